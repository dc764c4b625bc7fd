use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::spatial::project_rows;
use super::{
    by_class, flag_suspect_classes, FlagRule, identify_suspicious_cluster, sigma_zone_partition,
    temporal_signature, DefenseConfig, Preprocess, Defense, GradientContribution,
    SigmaZones, SpatialProjection, TemporalSpace, WindowReport, ZoneLabel, unit_block,
};
use crate::cluster::{cluster_2d, two_means_1d, ClusterAlgorithm};
use crate::config::FederationConfig;
use crate::seed::{derive_seed, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct StdLensParams {
    pub omega: usize,
    pub confidence: f64,
    pub watchlist_threshold: u32,
    pub flag_rule: FlagRule,
    pub clustering: ClusterAlgorithm,
    pub temporal_space: TemporalSpace,
    pub preprocess: Preprocess,
    pub max_carry_windows: usize,
    pub seed: u64,
}

impl StdLensParams {
    pub fn from_configs(fed: &FederationConfig, cfg: &DefenseConfig) -> Self {
        Self {
            omega: fed.temporal_window,
            confidence: fed.confidence_level,
            watchlist_threshold: fed.watchlist_threshold,
            flag_rule: cfg.flag_rule(),
            clustering: cfg.clustering,
            temporal_space: cfg.temporal_space,
            preprocess: Preprocess::from_config(cfg),
            max_carry_windows: cfg.max_carry_windows,
            seed: fed.master_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Active,
    Watchlisted,
    Revoked,
}

/// Running per-client state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDossier {
    pub client: usize,
    /// Per flagged class: the client's time-ordered spatial points in each
    /// cluster, from the last window that analysed it.
    pub trajectories: BTreeMap<usize, [Vec<[f64; 2]>; 2]>,
    /// Per flagged class: the client's temporal signature in each cluster.
    pub signatures: BTreeMap<usize, [Option<f64>; 2]>,
    pub watchlist_count: u32,
    pub verdict: Verdict,
}

impl ClientDossier {
    fn new(client: usize) -> Self {
        Self {
            client,
            trajectories: BTreeMap::new(),
            signatures: BTreeMap::new(),
            watchlist_count: 0,
            verdict: Verdict::Active,
        }
    }
}

/// Everything computed for one flagged class in one window.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAnalysis {
    pub projection: SpatialProjection,
    pub assignments: Vec<usize>,
    /// `None` when the window had to be deferred for this class.
    pub suspicious: Option<usize>,
    pub spatial_zones: Option<SigmaZones>,
    pub temporal_zones: Option<SigmaZones>,
    /// Client-level signature (minimum over clusters) and the cluster that attains it.
    pub client_signatures: BTreeMap<usize, (f64, usize)>,
}

#[derive(Default)]
struct ClassDecision {
    revoke: BTreeSet<usize>,
    watch: BTreeSet<usize>,
    undecided: BTreeSet<usize>,
    deferred: bool,
}

/// Spatial-temporal forensics with sigma-zone uncertainty handling.
pub struct StdLens {
    params: StdLensParams,
    /// Contributions awaiting analysis, with the number of windows each has
    /// already been carried.
    pending: Vec<(usize, GradientContribution)>,
    dossiers: BTreeMap<usize, ClientDossier>,
    windows: u64,
    last_analysis: Vec<ClassAnalysis>,
}

impl StdLens {
    pub fn new(params: StdLensParams) -> Self {
        Self { params, pending: Vec::new(), dossiers: BTreeMap::new(), windows: 0, last_analysis: Vec::new() }
    }

    pub fn params(&self) -> &StdLensParams {
        &self.params
    }

    pub fn dossiers(&self) -> &BTreeMap<usize, ClientDossier> {
        &self.dossiers
    }

    /// Per-class analyses of the most recent window (empty if it was benign).
    pub fn last_analysis(&self) -> &[ClassAnalysis] {
        &self.last_analysis
    }

    fn is_revoked(&self, client: usize) -> bool {
        self.dossiers.get(&client).is_some_and(|d| d.verdict == Verdict::Revoked)
    }

    fn rows(&self, group: &[&GradientContribution]) -> Vec<Vec<f64>> {
        group.iter().map(|c| c.block.clone()).collect()
    }

    fn analyse_class(
        &mut self,
        projection: SpatialProjection,
        rows: &[Vec<f64>],
        window: u64,
    ) -> (ClassAnalysis, ClassDecision) {
        let class = projection.class;
        let mut decision = ClassDecision::default();
        let all_clients: BTreeSet<usize> = projection.points.iter().map(|p| p.client).collect();
        let points: Vec<[f64; 2]> = projection.points.iter().map(|p| p.xy()).collect();
        let seed = derive_seed(self.params.seed, Stream::Clustering, class as u64, window);
        let mut analysis = ClassAnalysis {
            projection,
            assignments: Vec::new(),
            suspicious: None,
            spatial_zones: None,
            temporal_zones: None,
            client_signatures: BTreeMap::new(),
        };
        let Ok(assignments) = cluster_2d(&points, 2, self.params.clustering, seed) else {
            decision.deferred = true;
            decision.undecided = all_clients;
            return (analysis, decision);
        };
        let sizes = [0, 1].map(|c| assignments.iter().filter(|&&a| a == c).count());

        // time-ordered per-cluster trajectories of every client
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by_key(|&i| analysis.projection.points[i].round);
        let mut members: BTreeMap<usize, [Vec<usize>; 2]> = BTreeMap::new();
        for &i in &order {
            members.entry(analysis.projection.points[i].client).or_default()[assignments[i]].push(i);
        }
        let omega = self.params.omega;
        let signatures: BTreeMap<usize, [Option<f64>; 2]> = members
            .iter()
            .map(|(&client, per_cluster)| {
                let sig = [0, 1].map(|c| match self.params.temporal_space {
                    TemporalSpace::Spatial => {
                        let traj: Vec<[f64; 2]> = per_cluster[c].iter().map(|&i| points[i]).collect();
                        temporal_signature(&traj, omega)
                    }
                    TemporalSpace::Raw => {
                        let traj: Vec<&[f64]> = per_cluster[c].iter().map(|&i| rows[i].as_slice()).collect();
                        temporal_signature(&traj, omega)
                    }
                    TemporalSpace::UnitBlocks => {
                        let traj: Vec<Vec<f64>> = per_cluster[c].iter().map(|&i| unit_block(&rows[i])).collect();
                        temporal_signature(&traj, omega)
                    }
                });
                (client, sig)
            })
            .collect();
        for (&client, per_cluster) in &members {
            let dossier = self.dossiers.entry(client).or_insert_with(|| ClientDossier::new(client));
            dossier.trajectories.insert(class, [0, 1].map(|c| per_cluster[c].iter().map(|&i| points[i]).collect()));
            dossier.signatures.insert(class, signatures[&client]);
        }

        let sig_list: Vec<[Option<f64>; 2]> = signatures.values().copied().collect();
        let Some(suspicious) = identify_suspicious_cluster(&sig_list, sizes) else {
            decision.deferred = true;
            decision.undecided = all_clients;
            analysis.assignments = assignments;
            return (analysis, decision);
        };
        analysis.suspicious = Some(suspicious);

        let ssc1: Vec<f64> = analysis.projection.points.iter().map(|p| p.ssc1).collect();
        let (spatial_zones, spatial_labels) = sigma_zone_partition(&ssc1, &assignments, self.params.confidence)
            .expect("both clusters are nonempty and confidence is validated");

        // client-level signature: minimum over clusters, ties resolved toward
        // the suspicious cluster
        for (&client, sig) in &signatures {
            let best = match (sig[0], sig[1]) {
                (Some(a), Some(b)) if a == b => Some((a, suspicious)),
                (Some(a), Some(b)) => Some(if a < b { (a, 0) } else { (b, 1) }),
                (Some(a), None) => Some((a, 0)),
                (None, Some(b)) => Some((b, 1)),
                (None, None) => None,
            };
            match best {
                Some(b) => {
                    analysis.client_signatures.insert(client, b);
                }
                None => {
                    decision.undecided.insert(client);
                }
            }
        }

        let decided: Vec<usize> = analysis.client_signatures.keys().copied().collect();
        let values: Vec<f64> = decided.iter().map(|c| analysis.client_signatures[c].0).collect();
        let mut temporal_labels: BTreeMap<usize, ZoneLabel> = BTreeMap::new();
        let distinct = values.iter().any(|v| *v != values[0]);
        if values.len() >= 2 && distinct {
            let split = two_means_1d(&values);
            let (zones, labels) = sigma_zone_partition(&values, &split.labels, self.params.confidence)
                .expect("2-means groups are nonempty");
            temporal_labels = decided.iter().copied().zip(labels).collect();
            analysis.temporal_zones = Some(zones);
        }

        for &client in &decided {
            let (_, assigned) = analysis.client_signatures[&client];
            let mine = &members[&client];
            let spatial_uncertain =
                mine.iter().flatten().any(|&i| spatial_labels[i] == ZoneLabel::Uncertain);
            let temporal_uncertain = temporal_labels.get(&client) == Some(&ZoneLabel::Uncertain);
            if spatial_uncertain || temporal_uncertain {
                decision.watch.insert(client);
            }
            let suspicious_points_certain =
                mine[suspicious].iter().all(|&i| spatial_labels[i] != ZoneLabel::Uncertain);
            if assigned == suspicious && suspicious_points_certain && !temporal_uncertain {
                decision.revoke.insert(client);
            }
        }
        analysis.assignments = assignments;
        analysis.spatial_zones = Some(spatial_zones);
        (analysis, decision)
    }

    /// One forensic window: flag classes, then analyse each flagged class and
    /// update dossiers. Returns the window's report.
    pub fn forensic_window_step(&mut self, round: usize) -> WindowReport {
        let window = self.windows;
        self.windows += 1;
        self.last_analysis.clear();
        let mut report = WindowReport { round, ..WindowReport::default() };

        let pending = std::mem::take(&mut self.pending);
        let mut pending: Vec<(usize, GradientContribution)> =
            pending.into_iter().filter(|(_, c)| !self.is_revoked(c.client)).collect();
        pending.sort_by_key(|(_, c)| (c.round, c.client, c.class));
        let contributions: Vec<GradientContribution> = pending.iter().map(|(_, c)| c.clone()).collect();
        let groups = by_class(&contributions);

        let mut projections = Vec::new();
        let mut class_rows = BTreeMap::new();
        for (&class, group) in &groups {
            if group.len() < 3 {
                continue;
            }
            let rows = self.rows(group);
            if let Ok(p) = project_rows(class, group, &rows) {
                projections.push(p);
                class_rows.insert(class, rows);
            }
        }
        let flagged = flag_suspect_classes(&projections, &self.params.flag_rule);
        report.flagged_classes = flagged.clone();
        if flagged.is_empty() {
            return report;
        }

        let mut revoke = BTreeSet::new();
        let mut watch = BTreeSet::new();
        let mut carry: BTreeSet<(usize, usize)> = BTreeSet::new();
        for projection in projections.into_iter().filter(|p| flagged.contains(&p.class)) {
            let class = projection.class;
            let rows = &class_rows[&class];
            let (analysis, decision) = self.analyse_class(projection, rows, window);
            report.deferred |= decision.deferred;
            revoke.extend(decision.revoke);
            watch.extend(decision.watch);
            carry.extend(decision.undecided.into_iter().map(|client| (client, class)));
            self.last_analysis.push(analysis);
        }

        for &client in &watch {
            let dossier = self.dossiers.entry(client).or_insert_with(|| ClientDossier::new(client));
            dossier.watchlist_count += 1;
            if dossier.watchlist_count >= self.params.watchlist_threshold {
                revoke.insert(client);
            } else if dossier.verdict == Verdict::Active {
                dossier.verdict = Verdict::Watchlisted;
            }
        }
        for &client in &revoke {
            self.dossiers.entry(client).or_insert_with(|| ClientDossier::new(client)).verdict = Verdict::Revoked;
        }

        let max_carry = self.params.max_carry_windows;
        self.pending = pending
            .into_iter()
            .filter(|(age, c)| {
                *age < max_carry && !revoke.contains(&c.client) && carry.contains(&(c.client, c.class))
            })
            .map(|(age, c)| (age + 1, c))
            .collect();
        report.revoked = revoke.into_iter().collect();
        report.watchlisted = watch.into_iter().collect();
        report
    }
}

impl Defense for StdLens {
    fn name(&self) -> &'static str {
        "stdlens"
    }

    fn observe(&mut self, contributions: &[GradientContribution]) {
        let kept: Vec<GradientContribution> =
            contributions.iter().filter(|c| !self.is_revoked(c.client)).cloned().collect();
        for c in self.params.preprocess.apply(&kept) {
            self.pending.push((0, c));
        }
    }

    fn end_window(&mut self, round: usize) -> WindowReport {
        self.forensic_window_step(round)
    }
}
