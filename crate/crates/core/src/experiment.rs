//! Multi-seed experiment drivers and their tabular reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::defense::DefenseKind;
use crate::error::{Error, Result};
use crate::fl::{run_federation, RunOptions, RunOutput, WindowTiming};
use crate::metrics::{score_run, DefenseScore, Metric};

/// Class whose AP the attack targets; class 0 without an attack.
pub fn source_class(config: &ExperimentConfig) -> usize {
    config.attack.as_ref().map_or(0, |a| a.source_class)
}

fn with_seed(config: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = config.clone();
    c.federation.master_seed = seed;
    c
}

fn with_defense(config: &ExperimentConfig, kind: DefenseKind) -> ExperimentConfig {
    let mut c = config.clone();
    c.defense.kind = kind;
    c
}

/// The same federation without attack or defense.
pub fn benign_config(config: &ExperimentConfig) -> ExperimentConfig {
    let mut c = with_defense(config, DefenseKind::None);
    c.attack = None;
    c
}

/// A run together with its score against the ground-truth roles.
pub struct ScoredRun {
    pub output: RunOutput,
    pub score: DefenseScore,
}

pub fn run_scored(config: &ExperimentConfig, options: RunOptions) -> Result<ScoredRun> {
    let output = run_federation(config, options)?;
    let score = score_run(&output.log, config.federation.forensic_window, &output.malicious());
    Ok(ScoredRun { output, score })
}

/// One defense on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub defense: String,
    pub precision_at_max_recall: Option<f64>,
    pub max_recall: f64,
    pub round_of_max_recall: Option<usize>,
    pub time_to_purge: Option<usize>,
    pub revoked_malicious: usize,
    pub revoked_honest: usize,
    pub final_ap_src: Option<f64>,
    /// Final source-class AP of the benign run on the same seed.
    pub benign_ap_src: Option<f64>,
}

impl ComparisonRow {
    fn new(seed: u64, defense: DefenseKind, scored: &ScoredRun, class: usize, benign_ap_src: Option<f64>) -> Self {
        let s = &scored.score;
        Self {
            seed,
            defense: defense.name().to_string(),
            precision_at_max_recall: s.precision_at_max_recall,
            max_recall: s.max_recall,
            round_of_max_recall: s.round_of_max_recall,
            time_to_purge: s.time_to_purge,
            revoked_malicious: s.revoked_malicious,
            revoked_honest: s.revoked_honest,
            final_ap_src: scored.output.final_ap(class),
            benign_ap_src,
        }
    }

    pub fn is_perfect(&self) -> bool {
        self.time_to_purge.is_some() && self.revoked_honest == 0
    }
}

/// Wall-clock cost of one defense window step. Kept apart from the
/// deterministic reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub seed: u64,
    pub defense: String,
    pub round: usize,
    pub millis: f64,
}

impl TimingRow {
    fn from_run(seed: u64, defense: DefenseKind, timings: &[WindowTiming]) -> Vec<Self> {
        timings
            .iter()
            .map(|t| Self { seed, defense: defense.name().to_string(), round: t.round, millis: t.millis })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub timings: Vec<TimingRow>,
}

/// Runs every defense on every seed. For a given seed all defenses see the
/// same data, role assignment and per-round poisoning decisions; only the
/// participant pool differs once a defense starts revoking.
pub fn compare_defenses(config: &ExperimentConfig, defenses: &[DefenseKind], seeds: &[u64]) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    let class = source_class(config);
    let per_seed: Vec<Result<(Vec<ComparisonRow>, Vec<TimingRow>)>> = seeds
        .par_iter()
        .map(|&seed| {
            let base = with_seed(config, seed);
            let benign = run_federation(&benign_config(&base), RunOptions::default())?.final_ap(class);
            let mut rows = Vec::new();
            let mut timings = Vec::new();
            for &kind in defenses {
                let scored = run_scored(&with_defense(&base, kind), RunOptions::default())?;
                rows.push(ComparisonRow::new(seed, kind, &scored, class, benign));
                timings.extend(TimingRow::from_run(seed, kind, &scored.output.timings));
            }
            Ok((rows, timings))
        })
        .collect();
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for r in per_seed {
        let (a, b) = r?;
        rows.extend(a);
        timings.extend(b);
    }
    Ok(Comparison { rows, timings })
}

/// Mean and sample standard deviation; `None` for an empty list.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some((mean, var.sqrt()))
}

/// Per-defense aggregate over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub defense: String,
    pub runs: usize,
    pub perfect_runs: usize,
    /// Runs where precision at max recall is defined.
    pub precision_runs: usize,
    pub precision_mean: Option<f64>,
    pub precision_std: Option<f64>,
    pub recall_mean: f64,
    pub ap_src_mean: Option<f64>,
    pub ap_src_std: Option<f64>,
    pub benign_ap_src_mean: Option<f64>,
}

/// Aggregates rows by defense, in order of first appearance.
pub fn summarize(rows: &[ComparisonRow]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&ComparisonRow>> = BTreeMap::new();
    for r in rows {
        if !groups.contains_key(r.defense.as_str()) {
            order.push(&r.defense);
        }
        groups.entry(&r.defense).or_default().push(r);
    }
    order
        .into_iter()
        .map(|name| {
            let g = &groups[name];
            let precision: Vec<f64> = g.iter().filter_map(|r| r.precision_at_max_recall).collect();
            let ap: Vec<f64> = g.iter().filter_map(|r| r.final_ap_src).collect();
            let benign: Vec<f64> = g.iter().filter_map(|r| r.benign_ap_src).collect();
            let recall: Vec<f64> = g.iter().map(|r| r.max_recall).collect();
            SummaryRow {
                defense: name.to_string(),
                runs: g.len(),
                perfect_runs: g.iter().filter(|r| r.is_perfect()).count(),
                precision_runs: precision.len(),
                precision_mean: mean_std(&precision).map(|m| m.0),
                precision_std: mean_std(&precision).map(|m| m.1),
                recall_mean: mean_std(&recall).map_or(0.0, |m| m.0),
                ap_src_mean: mean_std(&ap).map(|m| m.0),
                ap_src_std: mean_std(&ap).map(|m| m.1),
                benign_ap_src_mean: mean_std(&benign).map(|m| m.0),
            }
        })
        .collect()
}

/// Fixed-width text rendering of a summary.
pub fn format_summary(summary: &[SummaryRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>5} {:>8} {:>16} {:>8} {:>16} {:>10}",
        "defense", "runs", "perfect", "precision@max", "recall", "final AP_src", "benign AP"
    );
    for s in summary {
        let pm = match (s.precision_mean, s.precision_std) {
            (Some(m), Some(sd)) => format!("{m:.3} ± {sd:.3}"),
            _ => "n/a".to_string(),
        };
        let ap = match (s.ap_src_mean, s.ap_src_std) {
            (Some(m), Some(sd)) => format!("{m:.3} ± {sd:.3}"),
            _ => "n/a".to_string(),
        };
        let _ = writeln!(
            out,
            "{:<10} {:>5} {:>8} {:>16} {:>8.3} {:>16} {:>10}",
            s.defense,
            s.runs,
            s.perfect_runs,
            pm,
            s.recall_mean,
            ap,
            Metric(s.benign_ap_src_mean).to_string()
        );
    }
    out
}

/// Attack parameters to sweep; an empty list keeps the configured value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub malicious_fractions: Vec<f64>,
    pub betas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub onsets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub defense: String,
    pub malicious_fraction: f64,
    pub beta: f64,
    pub gamma: f64,
    pub onset: usize,
    pub precision_at_max_recall: Option<f64>,
    pub max_recall: f64,
    pub time_to_purge: Option<usize>,
    pub revoked_malicious: usize,
    pub revoked_honest: usize,
    /// Revocations decided before the attack onset.
    pub revoked_before_onset: usize,
    pub final_ap_src: Option<f64>,
}

fn axis<T: Copy>(values: &[T], current: T) -> Vec<T> {
    if values.is_empty() {
        vec![current]
    } else {
        values.to_vec()
    }
}

/// Runs the configured defense over the Cartesian product of `grid` and
/// `seeds`. The configuration must contain an attack.
pub fn attack_sweep(config: &ExperimentConfig, grid: &SweepGrid, seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let Some(attack) = &config.attack else {
        return Err(Error::Empty("attack section"));
    };
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    let mut cells = Vec::new();
    for m in axis(&grid.malicious_fractions, config.federation.malicious_fraction) {
        for beta in axis(&grid.betas, attack.beta) {
            for gamma in axis(&grid.gammas, attack.gamma) {
                for onset in axis(&grid.onsets, attack.onset_round) {
                    for &seed in seeds {
                        let mut c = with_seed(config, seed);
                        c.federation.malicious_fraction = m;
                        let a = c.attack.as_mut().expect("checked above");
                        a.beta = beta;
                        a.gamma = gamma;
                        a.onset_round = onset;
                        cells.push(c);
                    }
                }
            }
        }
    }
    let class = attack.source_class;
    cells
        .par_iter()
        .map(|c| {
            let scored = run_scored(c, RunOptions::default())?;
            let a = c.attack.as_ref().expect("checked above");
            let before = scored
                .output
                .log
                .records
                .iter()
                .filter(|r| r.round < a.onset_round)
                .map(|r| r.revoked.len())
                .sum();
            Ok(SweepRow {
                seed: c.federation.master_seed,
                defense: c.defense.kind.name().to_string(),
                malicious_fraction: c.federation.malicious_fraction,
                beta: a.beta,
                gamma: a.gamma,
                onset: a.onset_round,
                precision_at_max_recall: scored.score.precision_at_max_recall,
                max_recall: scored.score.max_recall,
                time_to_purge: scored.score.time_to_purge,
                revoked_malicious: scored.score.revoked_malicious,
                revoked_honest: scored.score.revoked_honest,
                revoked_before_onset: before,
                final_ap_src: scored.output.final_ap(class),
            })
        })
        .collect()
}

/// Source-class AP per round for the benign, undefended and defended runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub round: usize,
    pub benign: Option<f64>,
    pub no_defense: Option<f64>,
    pub defended: Option<f64>,
}

pub fn learning_curves(config: &ExperimentConfig) -> Result<Vec<CurveRow>> {
    let class = source_class(config);
    let benign = run_federation(&benign_config(config), RunOptions::default())?;
    let undefended = run_federation(&with_defense(config, DefenseKind::None), RunOptions::default())?;
    let defended = match config.defense.kind {
        DefenseKind::None => None,
        _ => Some(run_federation(config, RunOptions::default())?),
    };
    let b = benign.log.ap_series(class);
    let u = undefended.log.ap_series(class);
    let d = defended.map(|o| o.log.ap_series(class));
    Ok((0..b.len())
        .map(|round| CurveRow {
            round,
            benign: b[round],
            no_defense: u.get(round).copied().flatten(),
            defended: d.as_ref().and_then(|d| d.get(round).copied().flatten()),
        })
        .collect())
}

/// Writes rows with a header line. Undefined values are empty fields.
pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned, R: Read>(input: R) -> Result<Vec<T>> {
    Ok(csv::Reader::from_reader(input).deserialize().collect::<Result<_, _>>()?)
}
