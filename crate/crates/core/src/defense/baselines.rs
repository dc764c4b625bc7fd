use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::spatial::project_rows;
use super::{by_class, flag_suspect_classes, FlagRule, Defense, DefenseConfig, Preprocess, GradientContribution, WindowReport};
use crate::cluster::{cluster_2d, ClusterAlgorithm};
use crate::linalg::principal_components;
use crate::seed::{derive_seed, Stream};

/// Outlier score of one contribution along the top singular direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralScore {
    pub client: usize,
    pub round: usize,
    pub score: f64,
}

/// Clusters one class's contributions in the spatial-signature plane and
/// returns every client with a contribution in the smaller cluster. Equal
/// cluster sizes revoke nobody.
pub fn defense_spatial_smaller_cluster(
    contributions: &[&GradientContribution],
    algorithm: ClusterAlgorithm,
    seed: u64,
) -> Vec<usize> {
    if contributions.len() < 3 {
        return Vec::new();
    }
    let rows: Vec<Vec<f64>> = contributions.iter().map(|c| c.block.clone()).collect();
    smaller_cluster_of_rows(contributions, &rows, algorithm, seed)
}

fn smaller_cluster_of_rows(
    contributions: &[&GradientContribution],
    rows: &[Vec<f64>],
    algorithm: ClusterAlgorithm,
    seed: u64,
) -> Vec<usize> {
    let Ok(projection) = project_rows(contributions[0].class, contributions, rows) else {
        return Vec::new();
    };
    let points: Vec<[f64; 2]> = projection.points.iter().map(|p| p.xy()).collect();
    let Ok(labels) = cluster_2d(&points, 2, algorithm, seed) else {
        return Vec::new();
    };
    let sizes = [0, 1].map(|c| labels.iter().filter(|&&l| l == c).count());
    if sizes[0] == sizes[1] {
        return Vec::new();
    }
    let smaller = if sizes[0] < sizes[1] { 0 } else { 1 };
    let revoked: BTreeSet<usize> = contributions
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| l == smaller)
        .map(|(c, _)| c.client)
        .collect();
    revoked.into_iter().collect()
}

/// Scores contributions by their absolute projection on the top singular
/// vector of the mean-centred blocks, highest first (ties by input order).
pub fn spectral_scores(contributions: &[&GradientContribution], rows: &[Vec<f64>]) -> Vec<SpectralScore> {
    let Ok(pc) = principal_components(rows, 1) else {
        return Vec::new();
    };
    let mut scores: Vec<(usize, SpectralScore)> = contributions
        .iter()
        .zip(rows)
        .enumerate()
        .map(|(i, (c, r))| {
            (i, SpectralScore { client: c.client, round: c.round, score: pc.project(r, 0).abs() })
        })
        .collect();
    scores.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    scores.into_iter().map(|(_, s)| s).collect()
}

/// Revokes the owners of the top `removal_fraction` share of spectral
/// scores (rounded, at least one).
pub fn defense_spectral_signature(contributions: &[&GradientContribution], removal_fraction: f64) -> Vec<usize> {
    if contributions.len() < 3 {
        return Vec::new();
    }
    let rows: Vec<Vec<f64>> = contributions.iter().map(|c| c.block.clone()).collect();
    spectral_of_rows(contributions, &rows, removal_fraction)
}

fn spectral_of_rows(contributions: &[&GradientContribution], rows: &[Vec<f64>], removal_fraction: f64) -> Vec<usize> {
    let scores = spectral_scores(contributions, rows);
    let budget = ((removal_fraction * scores.len() as f64).round() as usize).max(1);
    let revoked: BTreeSet<usize> = scores.iter().take(budget).map(|s| s.client).collect();
    revoked.into_iter().collect()
}

/// Shared window bookkeeping of the stateless baselines: buffer one window,
/// flag classes the same way the main defense does, then apply `rule` to
/// every flagged class.
struct WindowBuffer {
    pending: Vec<GradientContribution>,
    revoked: BTreeSet<usize>,
    flag_rule: FlagRule,
    preprocess: Preprocess,
}

impl WindowBuffer {
    fn new(cfg: &DefenseConfig) -> Self {
        Self {
            pending: Vec::new(),
            revoked: BTreeSet::new(),
            flag_rule: cfg.flag_rule(),
            preprocess: Preprocess::from_config(cfg),
        }
    }

    fn observe(&mut self, contributions: &[GradientContribution]) {
        let kept: Vec<GradientContribution> =
            contributions.iter().filter(|c| !self.revoked.contains(&c.client)).cloned().collect();
        self.pending.extend(self.preprocess.apply(&kept));
    }

    fn close<F>(&mut self, round: usize, mut rule: F) -> WindowReport
    where
        F: FnMut(usize, &[&GradientContribution], &[Vec<f64>]) -> Vec<usize>,
    {
        let contributions = std::mem::take(&mut self.pending);
        let groups = by_class(&contributions);
        let mut projections = Vec::new();
        let mut rows_of = Vec::new();
        for (&class, group) in &groups {
            if group.len() < 3 {
                continue;
            }
            let rows: Vec<Vec<f64>> = group.iter().map(|c| c.block.clone()).collect();
            if let Ok(p) = project_rows(class, group, &rows) {
                projections.push(p);
                rows_of.push((class, rows));
            }
        }
        let flagged = flag_suspect_classes(&projections, &self.flag_rule);
        let mut revoked = BTreeSet::new();
        for (class, rows) in rows_of.iter().filter(|(c, _)| flagged.contains(c)) {
            revoked.extend(rule(*class, &groups[class], rows));
        }
        self.revoked.extend(revoked.iter().copied());
        WindowReport {
            round,
            flagged_classes: flagged,
            revoked: revoked.into_iter().collect(),
            watchlisted: Vec::new(),
            deferred: false,
        }
    }
}

/// Revokes every contributor to the smaller spatial cluster of a flagged class.
pub struct SpatialBaseline {
    buffer: WindowBuffer,
    algorithm: ClusterAlgorithm,
    seed: u64,
    windows: u64,
}

impl SpatialBaseline {
    pub fn new(cfg: &DefenseConfig, seed: u64) -> Self {
        Self { buffer: WindowBuffer::new(cfg), algorithm: cfg.clustering, seed, windows: 0 }
    }
}

impl Defense for SpatialBaseline {
    fn name(&self) -> &'static str {
        "spatial"
    }

    fn observe(&mut self, contributions: &[GradientContribution]) {
        self.buffer.observe(contributions);
    }

    fn end_window(&mut self, round: usize) -> WindowReport {
        let window = self.windows;
        self.windows += 1;
        let (algorithm, seed) = (self.algorithm, self.seed);
        self.buffer.close(round, |class, group, rows| {
            let seed = derive_seed(seed, Stream::Clustering, class as u64, window);
            smaller_cluster_of_rows(group, rows, algorithm, seed)
        })
    }
}

/// Removes the highest-scoring share of contributions of a flagged class.
pub struct SpectralBaseline {
    buffer: WindowBuffer,
    removal_fraction: f64,
}

impl SpectralBaseline {
    pub fn new(cfg: &DefenseConfig, removal_fraction: f64) -> Self {
        Self { buffer: WindowBuffer::new(cfg), removal_fraction }
    }
}

impl Defense for SpectralBaseline {
    fn name(&self) -> &'static str {
        "spectral"
    }

    fn observe(&mut self, contributions: &[GradientContribution]) {
        self.buffer.observe(contributions);
    }

    fn end_window(&mut self, round: usize) -> WindowReport {
        let fraction = self.removal_fraction;
        self.buffer.close(round, |_, group, rows| spectral_of_rows(group, rows, fraction))
    }
}
