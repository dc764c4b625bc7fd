//! Forensic defenses over per-class output-layer gradient contributions.
//!
//! Every defense sees the same stream: each round, one
//! [`GradientContribution`] per participant and class; at every forensic
//! window boundary it may revoke clients. [`StdLens`] combines spatial
//! signatures, temporal signatures and sigma-zone uncertainty handling;
//! [`SpatialBaseline`] and [`SpectralBaseline`] are the comparison rules.

mod baselines;
mod spatial;
mod stdlens;
mod temporal;
mod zones;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use serde::{Deserialize, Serialize};

pub use baselines::{spectral_scores}; pub use baselines::{defense_spatial_smaller_cluster, defense_spectral_signature, SpatialBaseline, SpectralBaseline, SpectralScore};
pub use spatial::{flag_suspect_classes, FlagRule, spatial_project, SpatialPoint, SpatialProjection};
pub use stdlens::{ClientDossier, StdLens, StdLensParams, Verdict};
pub use temporal::{identify_suspicious_cluster, temporal_signature};
pub use zones::{confident_interval, sigma_zone_partition, SigmaZones, ZoneLabel};

use crate::cluster::ClusterAlgorithm;
use crate::config::{FederationConfig, Violation};
use crate::error::Result;
use crate::fl::ClientUpdate;

/// One client's per-class output-layer block for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientContribution {
    pub client: usize,
    pub round: usize,
    pub class: usize,
    pub block: Vec<f64>,
}

/// Flattens the class-`class` block of an update: class rows, box rows and
/// objectness rows (see [`crate::detection::DetectorWeights::class_block`]).
pub fn extract_class_gradient_block(update: &ClientUpdate, class: usize) -> GradientContribution {
    GradientContribution {
        client: update.client,
        round: update.round,
        class,
        block: update.delta.class_block(class),
    }
}

/// All per-class contributions of an update.
pub fn contributions_of(update: &ClientUpdate) -> Vec<GradientContribution> {
    (0..update.delta.shape.classes).map(|c| extract_class_gradient_block(update, c)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    #[default]
    Stdlens,
    Spatial,
    Spectral,
    None,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 4] =
        [DefenseKind::Stdlens, DefenseKind::Spatial, DefenseKind::Spectral, DefenseKind::None];

    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::Stdlens => "stdlens",
            DefenseKind::Spatial => "spatial",
            DefenseKind::Spectral => "spectral",
            DefenseKind::None => "none",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Space in which temporal dissimilarities are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemporalSpace {
    /// The 2D spatial-signature coordinates.
    #[default]
    Spatial,
    /// The raw per-class blocks.
    Raw,
    /// The per-class blocks scaled to unit L2 norm.
    UnitBlocks,
}

/// Reference removed from each round's contributions before analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoundCentering {
    #[default]
    None,
    /// Coordinate-wise median of the round's contributions to the same class.
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    /// Minimum 2-means separation score on the first spatial component for
    /// a class to be flagged.
    pub separation_threshold: f64,
    /// Separation required instead when a group holds contributions of only
    /// one, two, ... distinct clients. An honest client with unusual data
    /// repeats itself across a window and can form a tight group alone.
    pub few_client_separation: Vec<f64>,
    pub clustering: ClusterAlgorithm,
    pub temporal_space: TemporalSpace,
    /// Per-round reference subtracted from every contribution on arrival.
    pub round_centering: RoundCentering,
    /// Scale each block to unit L2 norm on arrival (after centering).
    pub normalize_blocks: bool,
    /// Share of contributions the spectral baseline removes per flagged
    /// class; defaults to the malicious fraction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub removal_fraction: Option<f64>,
    /// How many windows an undecided client's contributions are carried.
    pub max_carry_windows: usize,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            kind: DefenseKind::Stdlens,
            separation_threshold: 2.0,
            few_client_separation: vec![8.5, 4.5],
            clustering: ClusterAlgorithm::Kmeans,
            temporal_space: TemporalSpace::Spatial,
            round_centering: RoundCentering::None,
            normalize_blocks: false,
            removal_fraction: None,
            max_carry_windows: 3,
        }
    }
}

impl DefenseConfig {
    pub fn with_kind(kind: DefenseKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn flag_rule(&self) -> FlagRule {
        FlagRule::new(self.separation_threshold, self.few_client_separation.clone())
    }

    pub(crate) fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        if !(self.separation_threshold.is_finite() && self.separation_threshold > 0.0) {
            v.push(Violation::new("defense.separation_threshold", "must be positive"));
        }
        if self.few_client_separation.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            v.push(Violation::new("defense.few_client_separation", "entries must be positive"));
        }
        if let Some(r) = self.removal_fraction {
            if !(r > 0.0 && r < 1.0) {
                v.push(Violation::new("defense.removal_fraction", "must lie in (0, 1)"));
            }
        }
        v
    }
}

/// What a defense decided at one window boundary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    /// Last round of the window.
    pub round: usize,
    pub flagged_classes: Vec<usize>,
    pub revoked: Vec<usize>,
    /// Clients whose watchlist count grew in this window.
    pub watchlisted: Vec<usize>,
    /// Whether some flagged class could not be decided and its
    /// contributions were carried into the next window.
    pub deferred: bool,
}

pub trait Defense: Send {
    fn name(&self) -> &'static str;

    /// Records one round of contributions.
    fn observe(&mut self, contributions: &[GradientContribution]);

    /// Analyses the window that ends at `round`.
    fn end_window(&mut self, round: usize) -> WindowReport;
}

/// Instantiates the configured defense, or `None` for [`DefenseKind::None`].
pub fn build_defense(fed: &FederationConfig, cfg: &DefenseConfig) -> Option<Box<dyn Defense>> {
    let seed = fed.master_seed;
    match cfg.kind {
        DefenseKind::None => None,
        DefenseKind::Stdlens => Some(Box::new(StdLens::new(StdLensParams::from_configs(fed, cfg)))),
        DefenseKind::Spatial => Some(Box::new(SpatialBaseline::new(cfg, seed))),
        DefenseKind::Spectral => Some(Box::new(SpectralBaseline::new(
            cfg,
            cfg.removal_fraction.unwrap_or(fed.malicious_fraction),
        ))),
    }
}

/// Block preprocessing applied to each round's contributions on arrival.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Preprocess {
    pub centering: RoundCentering,
    pub normalize: bool,
}

impl Preprocess {
    pub fn from_config(cfg: &DefenseConfig) -> Self {
        Self { centering: cfg.round_centering, normalize: cfg.normalize_blocks }
    }

    /// Transforms one round of contributions. Centering uses the
    /// contributions of the same class in `round_contributions`.
    pub fn apply(&self, round_contributions: &[GradientContribution]) -> Vec<GradientContribution> {
        let mut out = round_contributions.to_vec();
        if self.centering == RoundCentering::Median {
            for (_, group) in by_class(round_contributions) {
                let median = coordinate_median(&group);
                for c in out.iter_mut().filter(|c| c.class == group[0].class) {
                    c.block.iter_mut().zip(&median).for_each(|(x, m)| *x -= m);
                }
            }
        }
        if self.normalize {
            for c in &mut out {
                c.block = unit_block(&c.block);
            }
        }
        out
    }
}

fn coordinate_median(group: &[&GradientContribution]) -> Vec<f64> {
    let dim = group[0].block.len();
    let mut column = Vec::with_capacity(group.len());
    (0..dim)
        .map(|j| {
            column.clear();
            column.extend(group.iter().map(|c| c.block[j]));
            column.sort_by(f64::total_cmp);
            let n = column.len();
            if n % 2 == 1 {
                column[n / 2]
            } else {
                0.5 * (column[n / 2 - 1] + column[n / 2])
            }
        })
        .collect()
}

/// Scales a block to unit norm; zero blocks are left unchanged.
pub(crate) fn unit_block(block: &[f64]) -> Vec<f64> {
    let norm = block.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        block.iter().map(|x| x / norm).collect()
    } else {
        block.to_vec()
    }
}

/// Contributions grouped by class, preserving stream order inside a class.
pub(crate) fn by_class(contributions: &[GradientContribution]) -> BTreeMap<usize, Vec<&GradientContribution>> {
    let mut map: BTreeMap<usize, Vec<&GradientContribution>> = BTreeMap::new();
    for c in contributions {
        map.entry(c.class).or_default().push(c);
    }
    map
}

/// Runs a defense over a recorded stream, closing a window after every
/// `window` rounds (counting from round 0) and once more at the end if the
/// last window is incomplete.
pub fn replay(
    stream: &[GradientContribution],
    defense: &mut dyn Defense,
    window: usize,
) -> Vec<WindowReport> {
    let mut rounds: BTreeMap<usize, Vec<GradientContribution>> = BTreeMap::new();
    for c in stream {
        rounds.entry(c.round).or_default().push(c.clone());
    }
    let last = rounds.keys().next_back().copied().unwrap_or(0);
    let mut revoked = std::collections::BTreeSet::new();
    let mut reports = Vec::new();
    for round in 0..=last {
        if let Some(batch) = rounds.get(&round) {
            let kept: Vec<GradientContribution> =
                batch.iter().filter(|c| !revoked.contains(&c.client)).cloned().collect();
            defense.observe(&kept);
        }
        if (round + 1) % window == 0 || round == last {
            let report = defense.end_window(round);
            revoked.extend(report.revoked.iter().copied());
            reports.push(report);
        }
    }
    reports
}

pub fn write_contributions_jsonl<W: Write>(stream: &[GradientContribution], out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    for c in stream {
        serde_json::to_writer(&mut out, c)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_contributions_jsonl<R: Read>(input: R) -> Result<Vec<GradientContribution>> {
    let mut stream = Vec::new();
    for line in BufReader::new(input).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stream.push(serde_json::from_str(&line)?);
    }
    Ok(stream)
}
