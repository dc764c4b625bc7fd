//! Acceptance suite. Every criterion prints one PASS/FAIL line to stderr
//! (uncaptured) and then asserts it.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use fedlens::attacks::{AttackSpec, PoisonType};
use fedlens::config::{z_for_confidence, ExperimentConfig, FederationConfig};
use fedlens::defense::{temporal_signature, Defense, DefenseConfig, DefenseKind, StdLens, StdLensParams};
use fedlens::detection::{detector_loss_and_grad, Anchor, BBox, DetectionSample, DetectorWeights, TaskShape};
use fedlens::experiment::{attack_sweep, compare_defenses, write_csv, ComparisonRow, SweepGrid, SweepRow};
use fedlens::fl::{fedavg_aggregate, run_federation, ClientUpdate, RunOptions};
use fedlens::robust_stats::{premise_trials, synth_two_population_stream, MixtureSpec, PopulationSpec, SynthStreamSpec};

const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");
const SEEDS: std::ops::Range<u64> = 0..10;

fn verdict(id: &str, pass: bool, detail: String) -> bool {
    let line = format!("acceptance {id}: {} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    pass
}

fn desk() -> ExperimentConfig {
    ExperimentConfig::load(DESK).unwrap().validate().unwrap()
}

fn desk_with(poison: PoisonType) -> ExperimentConfig {
    let mut c = desk();
    let target = (poison == PoisonType::Class).then_some(1);
    c.attack = Some(AttackSpec::new(poison, 0, target));
    c
}

fn seeds() -> Vec<u64> {
    SEEDS.collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- 1

/// Double sum written directly over index pairs, independent of the library.
fn signature_oracle(traj: &[Vec<f64>], omega: usize) -> Option<f64> {
    let n = traj.len();
    if n <= omega {
        return None;
    }
    let mut sum = 0.0;
    for a in 0..n {
        for b in 0..a {
            if a >= omega && a - b <= omega {
                let mut d = 0.0;
                for t in 0..traj[a].len() {
                    d += (traj[a][t] - traj[b][t]).abs();
                }
                sum += d;
            }
        }
    }
    let denom = (omega * n) as f64 - (omega * omega) as f64;
    Some(sum / denom)
}

#[test]
fn criterion_1_temporal_signature_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut mismatched = 0;
    for _ in 0..1000 {
        let len = rng.random_range(0..=12);
        let dim = rng.random_range(1..=8);
        let omega = rng.random_range(1..=3);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let traj: Vec<Vec<f64>> =
            (0..len).map(|_| (0..dim).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).collect();
        match (temporal_signature(&traj, omega), signature_oracle(&traj, omega)) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                let rel = if b == 0.0 { a.abs() } else { (a - b).abs() / b.abs() };
                worst = worst.max(rel);
            }
            _ => mismatched += 1,
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatched == 0 && worst < 1e-9 && elapsed < Duration::from_secs(5);
    assert!(verdict(
        "1",
        pass,
        format!("1000 trajectories, max relative error {worst:.2e}, definedness mismatches {mismatched}, {elapsed:.2?}")
    ));
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_separability_theorem() {
    let start = Instant::now();
    let trials = premise_trials(0, 100, 10_000).unwrap();
    let elapsed = start.elapsed();
    let premise = trials.iter().filter(|t| t.premise_holds).count();
    let in_range = trials.iter().all(|t| (0.05..=0.3).contains(&t.m) && (2..=16).contains(&t.dim));
    let separable = trials.iter().filter(|t| t.premise_holds && t.separable).count();
    let pass = premise == 100 && in_range && separable >= 99 && elapsed < Duration::from_secs(60);
    assert!(verdict(
        "2",
        pass,
        format!("premise held in {premise}/100, separable in {separable}/100 at n=10^4, {elapsed:.2?}")
    ));
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_3_empirical_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws: Vec<f64> = (0..100_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut pass = true;
    let mut detail = Vec::new();
    for confidence in [0.68, 0.95, 0.99] {
        let z = z_for_confidence(confidence).unwrap();
        let inside = draws.iter().filter(|x| x.abs() <= z).count() as f64 / draws.len() as f64;
        pass &= (inside - confidence).abs() <= 0.01;
        detail.push(format!("{z}σ {inside:.4} vs {confidence}"));
    }
    assert!(verdict("3", pass, detail.join(", ")));
}

// ---------------------------------------------------------------- 4

fn random_weights(rng: &mut ChaCha8Rng, shape: TaskShape, scale: f64) -> DetectorWeights {
    let mut w = DetectorWeights::zeros(shape);
    w.params_mut().for_each(|p| *p = rng.random_range(-scale..scale));
    w
}

#[test]
fn criterion_4_fedavg_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let shape = TaskShape::new(rng.random_range(4..=10), rng.random_range(1..=3), rng.random_range(2..=4));
        let k = rng.random_range(1..=12);
        let updates: Vec<ClientUpdate> = (0..k)
            .map(|i| ClientUpdate {
                client: i,
                round: 0,
                delta: random_weights(&mut rng, shape, 1.0),
                sample_count: rng.random_range(1..=100),
            })
            .collect();
        let got: Vec<f64> = fedavg_aggregate(&updates).unwrap().params().copied().collect();
        let total: f64 = updates.iter().map(|u| u.sample_count as f64).sum();
        let columns: Vec<Vec<f64>> = updates.iter().map(|u| u.delta.params().copied().collect()).collect();
        for (p, g) in got.iter().enumerate() {
            let mut acc = 0.0;
            for (u, col) in updates.iter().zip(&columns) {
                acc += u.sample_count as f64 * col[p];
            }
            worst = worst.max((g - acc / total).abs());
        }
    }
    assert!(verdict("4", worst <= 1e-12, format!("100 update sets, max componentwise difference {worst:.2e}")));
}

// ---------------------------------------------------------------- 5

fn random_sample(rng: &mut ChaCha8Rng, shape: TaskShape) -> DetectionSample {
    let features = (0..shape.features).map(|_| rng.random_range(-1.0..1.0)).collect();
    let anchors = (0..shape.anchors)
        .map(|_| {
            let class = rng.random_range(0..=shape.classes);
            if class == shape.classes {
                Anchor::background(shape.classes)
            } else {
                let bbox = BBox::new(
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.05..0.6),
                    rng.random_range(0.05..0.6),
                );
                Anchor { class, bbox, objn: rng.random_bool(0.8) }
            }
        })
        .collect();
    DetectionSample { features, anchors }
}

#[test]
fn criterion_5_gradient_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let shape = TaskShape::new(rng.random_range(4..=8), rng.random_range(1..=3), rng.random_range(2..=4));
        let w = random_weights(&mut rng, shape, 0.5);
        let batch: Vec<_> = (0..rng.random_range(1..=5)).map(|_| random_sample(&mut rng, shape)).collect();
        let (_, grad) = detector_loss_and_grad(&w, &batch).unwrap();
        let analytic: Vec<f64> = grad.params().copied().collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let mut plus = w.clone();
            *plus.params_mut().nth(i).unwrap() += h;
            let mut minus = w.clone();
            *minus.params_mut().nth(i).unwrap() -= h;
            let lp = detector_loss_and_grad(&plus, &batch).unwrap().0;
            let lm = detector_loss_and_grad(&minus, &batch).unwrap().0;
            numeric.push((lp - lm) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        worst = worst.max(diff / norm);
    }
    assert!(verdict("5", worst < 1e-5, format!("100 (weights, batch) pairs, max relative error {worst:.2e}")));
}

// ---------------------------------------------------------------- 6

fn synth_trial(seed: u64, benign: bool) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let dim = 8;
    let gap = (60.0 / dim as f64).sqrt();
    let mixture = MixtureSpec::new(
        PopulationSpec::isotropic(vec![0.0; dim], 1.0),
        PopulationSpec::isotropic(vec![gap; dim], 1.0),
        0.2,
    )
    .unwrap();
    let mut spec = SynthStreamSpec::with_defaults(mixture, 50, 30);
    spec.benign = benign;
    let stream = synth_two_population_stream(&spec, seed).unwrap();
    let fed = FederationConfig { num_clients: 50, malicious_fraction: 0.2, master_seed: seed, ..FederationConfig::default() };
    let mut lens = StdLens::new(StdLensParams::from_configs(&fed, &DefenseConfig::default()));
    let mut revoked = BTreeSet::new();
    for (r, round) in stream.rounds.iter().enumerate() {
        lens.observe(round);
        if (r + 1) % fed.forensic_window == 0 {
            revoked.extend(lens.end_window(r).revoked);
        }
    }
    (revoked, stream.malicious().into_iter().collect())
}

#[test]
fn criterion_6_synthetic_stream_soundness() {
    let start = Instant::now();
    let purged = (0..200).filter(|&s| {
        let (revoked, malicious) = synth_trial(s, false);
        revoked == malicious
    });
    let purged = purged.count();
    let clean = (0..200).filter(|&s| synth_trial(1000 + s, true).0.is_empty()).count();
    let elapsed = start.elapsed();
    let pass = purged >= 190 && clean >= 190 && elapsed < Duration::from_secs(120);
    assert!(verdict(
        "6",
        pass,
        format!("precision 1 and recall 1 within 3 windows in {purged}/200, benign streams untouched in {clean}/200, {elapsed:.2?}")
    ));
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_desk_scale_end_to_end() {
    let start = Instant::now();
    let mut pass = true;
    let mut detail = Vec::new();
    for poison in PoisonType::ALL {
        let cmp = compare_defenses(&desk_with(poison), &[DefenseKind::Stdlens, DefenseKind::None], &seeds()).unwrap();
        let of = |name: &str| -> Vec<&ComparisonRow> { cmp.rows.iter().filter(|r| r.defense == name).collect() };
        let (lens, none) = (of("stdlens"), of("none"));
        let benign = mean(none.iter().map(|r| r.benign_ap_src.unwrap()));
        let undefended = mean(none.iter().map(|r| r.final_ap_src.unwrap()));
        let defended = mean(lens.iter().map(|r| r.final_ap_src.unwrap()));
        let degraded = benign - undefended >= 0.10;
        let perfect = lens.iter().filter(|r| r.is_perfect()).count();
        let recovered = (benign - defended).abs() <= 0.03;
        pass &= degraded && perfect >= 9 && recovered;
        detail.push(format!(
            "{}: benign {benign:.3} undefended {undefended:.3} (a {}) clean purge {perfect}/10 (b {}) defended {defended:.3} (c {})",
            poison.name(),
            pass_word(degraded),
            pass_word(perfect >= 9),
            pass_word(recovered)
        ));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(600);
    assert!(verdict("7", pass, format!("{}; {elapsed:.2?}", detail.join("; "))));
}

fn pass_word(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "miss"
    }
}

// ---------------------------------------------------------------- 8

fn sweep(defense: DefenseKind, grid: SweepGrid) -> Vec<SweepRow> {
    let mut c = desk();
    c.defense.kind = defense;
    attack_sweep(&c, &grid, &seeds()).unwrap()
}

fn clean_purge(r: &SweepRow) -> bool {
    r.time_to_purge.is_some() && r.revoked_honest == 0
}

#[test]
fn criterion_8a_skip_rate_attack() {
    let grid = || SweepGrid { betas: vec![0.10], ..SweepGrid::default() };
    let lens = sweep(DefenseKind::Stdlens, grid()).iter().filter(|r| clean_purge(r)).count();
    let spatial = sweep(DefenseKind::Spatial, grid());
    let imprecise = spatial.iter().filter(|r| r.precision_at_max_recall.is_some_and(|p| p < 1.0)).count();
    let pass = lens >= 8 && imprecise >= 5;
    assert!(verdict(
        "8a",
        pass,
        format!("beta 0.10: stdlens clean purge {lens}/10 (need 8), spatial baseline precision < 1 in {imprecise}/10 (need 5)")
    ));
}

#[test]
fn criterion_8b_partial_poisoning_attack() {
    let rows = sweep(DefenseKind::Stdlens, SweepGrid { gammas: vec![0.6], ..SweepGrid::default() });
    let ok = rows.iter().filter(|r| clean_purge(r)).count();
    assert!(verdict("8b", ok >= 8, format!("gamma 0.6: stdlens clean purge {ok}/10 (need 8)")));
}

#[test]
fn criterion_8c_late_onset_attack() {
    let c = desk();
    let onset = c.federation.rounds / 2;
    let deadline = onset + 3 * c.federation.forensic_window - 1;
    let rows = sweep(DefenseKind::Stdlens, SweepGrid { onsets: vec![onset], ..SweepGrid::default() });
    let quiet = rows.iter().filter(|r| r.revoked_before_onset == 0).count();
    let ok = rows
        .iter()
        .filter(|r| r.revoked_before_onset == 0 && r.time_to_purge.is_some_and(|t| t <= deadline))
        .count();
    let late: Vec<String> = rows
        .iter()
        .filter(|r| !r.time_to_purge.is_some_and(|t| t <= deadline))
        .map(|r| format!("seed {} purge {:?}", r.seed, r.time_to_purge))
        .collect();
    assert!(verdict(
        "8c",
        ok >= 8,
        format!("onset {onset}: no revocation before onset in {quiet}/10, purged by round {deadline} in {ok}/10 (need 8); late: {}", late.join(", "))
    ));
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_9_baseline_precision_ordering() {
    let kinds = [DefenseKind::Stdlens, DefenseKind::Spatial, DefenseKind::Spectral];
    let cmp = compare_defenses(&desk_with(PoisonType::Class), &kinds, &seeds()).unwrap();
    // a defense that revoked nobody has no precision and ranks lowest
    let precision = |seed: u64, name: &str| {
        cmp.rows.iter().find(|r| r.seed == seed && r.defense == name).unwrap().precision_at_max_recall.unwrap_or(-1.0)
    };
    let ordered = SEEDS
        .filter(|&s| precision(s, "stdlens") >= precision(s, "spatial") && precision(s, "spatial") >= precision(s, "spectral"))
        .count();
    let means: Vec<String> = ["stdlens", "spatial", "spectral"]
        .iter()
        .map(|n| format!("{n} {:.3}", mean(SEEDS.map(|s| precision(s, n).max(0.0)))))
        .collect();
    assert!(verdict("9", ordered >= 8, format!("ordering held in {ordered}/10 seeds; mean precision {}", means.join(", "))));
}

// ---------------------------------------------------------------- 10

fn run_bytes(config: &ExperimentConfig) -> (Vec<u8>, Vec<u8>) {
    let out = run_federation(config, RunOptions::default()).unwrap();
    let mut log = Vec::new();
    out.log.write_jsonl(&mut log).unwrap();
    let mut table = Vec::new();
    write_csv(&out.log.records.iter().map(|r| (r.round, r.ap.clone().into_iter().flatten().sum::<f64>())).collect::<Vec<_>>(), &mut table).unwrap();
    (log, table)
}

#[test]
fn criterion_10_determinism() {
    let mut config = desk();
    config.federation.master_seed = 7;
    let (log_a, csv_a) = run_bytes(&config);
    let (log_b, csv_b) = run_bytes(&config);
    let kinds = [DefenseKind::Stdlens, DefenseKind::Spectral];
    let table = |c: &ExperimentConfig| {
        let mut buf = Vec::new();
        write_csv(&compare_defenses(c, &kinds, &[1, 2]).unwrap().rows, &mut buf).unwrap();
        buf
    };
    let cmp_a = table(&config);
    let cmp_b = table(&config);
    let pass = log_a == log_b && csv_a == csv_b && cmp_a == cmp_b && !log_a.is_empty();
    assert!(verdict(
        "10",
        pass,
        format!("run log {} bytes, curve csv {} bytes, comparison csv {} bytes, identical across reruns", log_a.len(), csv_a.len(), cmp_a.len())
    ));
}
