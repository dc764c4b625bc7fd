//! Perception poisoning of a malicious client's local data.
//!
//! Three poisons rewrite the ground truth of source-class objects: relabel
//! them, shrink and displace their boxes, or erase them. Adaptive attackers
//! additionally skip poisoning in some rounds (`beta`), poison only part of
//! their data (`gamma`), or stay dormant until an onset round.
//!
//! The stored clean dataset is never modified; every round works on a copy.
//! The subset poisoned by a gamma-adaptive attacker and the box jitter are
//! drawn once per client, so a malicious client presents the same poisoned
//! data whenever it poisons.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::Violation;
use crate::detection::{Anchor, BBox, DetectionSample};
use crate::seed::{rng_for, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoisonType {
    /// Relabel source objects as the target class.
    Class,
    /// Shrink and displace source boxes.
    Bbox,
    /// Turn source objects into background.
    Objn,
}

impl PoisonType {
    pub const ALL: [PoisonType; 3] = [PoisonType::Class, PoisonType::Bbox, PoisonType::Objn];

    pub fn name(self) -> &'static str {
        match self {
            PoisonType::Class => "class",
            PoisonType::Bbox => "bbox",
            PoisonType::Objn => "objn",
        }
    }
}

fn default_shrink() -> f64 {
    0.10
}
fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub poison: PoisonType,
    pub source_class: usize,
    /// Required by the class poison, ignored otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_class: Option<usize>,
    #[serde(default = "default_shrink")]
    pub shrink_factor: f64,
    /// Scale of the centre jitter relative to the removed box extent.
    #[serde(default = "default_one")]
    pub jitter_scale: f64,
    /// Per-round probability of not poisoning.
    #[serde(default)]
    pub beta: f64,
    /// Fraction of local samples poisoned.
    #[serde(default = "default_one")]
    pub gamma: f64,
    #[serde(default)]
    pub onset_round: usize,
}

impl AttackSpec {
    pub fn new(poison: PoisonType, source_class: usize, target_class: Option<usize>) -> Self {
        Self {
            poison,
            source_class,
            target_class,
            shrink_factor: default_shrink(),
            jitter_scale: 1.0,
            beta: 0.0,
            gamma: 1.0,
            onset_round: 0,
        }
    }

    pub(crate) fn violations(&self, classes: usize) -> Vec<Violation> {
        let mut v = Vec::new();
        if self.source_class >= classes {
            v.push(Violation::new("attack.source_class", "not a valid class id"));
        }
        match (self.poison, self.target_class) {
            (PoisonType::Class, None) => {
                v.push(Violation::new("attack.target_class", "required by the class poison"))
            }
            (PoisonType::Class, Some(t)) if t >= classes => {
                v.push(Violation::new("attack.target_class", "not a valid class id"))
            }
            (PoisonType::Class, Some(t)) if t == self.source_class => {
                v.push(Violation::new("attack.target_class", "must differ from source_class"))
            }
            _ => {}
        }
        if !(self.shrink_factor > 0.0 && self.shrink_factor <= 1.0) {
            v.push(Violation::new("attack.shrink_factor", "must lie in (0, 1]"));
        }
        if !(self.jitter_scale.is_finite() && self.jitter_scale >= 0.0) {
            v.push(Violation::new("attack.jitter_scale", "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta) {
            v.push(Violation::new("attack.beta", "must lie in [0, 1)"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            v.push(Violation::new("attack.gamma", "must lie in (0, 1]"));
        }
        v
    }
}

/// Relabels every source anchor as `target`. Returns the number of anchors changed.
pub fn poison_class(dataset: &mut [DetectionSample], source: usize, target: usize) -> usize {
    let mut changed = 0;
    for anchor in dataset.iter_mut().flat_map(|s| s.anchors.iter_mut()) {
        if anchor.class == source {
            anchor.class = target;
            changed += 1;
        }
    }
    changed
}

fn shrink_box<R: Rng>(b: &BBox, shrink: f64, jitter_scale: f64, rng: &mut R) -> BBox {
    let rx = jitter_scale * (1.0 - shrink) * b.w / 2.0;
    let ry = jitter_scale * (1.0 - shrink) * b.h / 2.0;
    let dx = if rx > 0.0 { rng.random_range(-rx..=rx) } else { 0.0 };
    let dy = if ry > 0.0 { rng.random_range(-ry..=ry) } else { 0.0 };
    BBox::new(
        (b.cx + dx).clamp(0.0, 1.0),
        (b.cy + dy).clamp(0.0, 1.0),
        b.w * shrink,
        b.h * shrink,
    )
}

/// Shrinks every source box by `shrink` and jitters its centre uniformly
/// within `jitter_scale * (1 - shrink)` of the half extent.
pub fn poison_bbox<R: Rng>(
    dataset: &mut [DetectionSample],
    source: usize,
    shrink: f64,
    jitter_scale: f64,
    rng: &mut R,
) -> usize {
    let mut changed = 0;
    for anchor in dataset.iter_mut().flat_map(|s| s.anchors.iter_mut()) {
        if anchor.class == source && anchor.objn {
            anchor.bbox = shrink_box(&anchor.bbox, shrink, jitter_scale, rng);
            changed += 1;
        }
    }
    changed
}

/// Turns every source anchor into background.
pub fn poison_objn(dataset: &mut [DetectionSample], source: usize, classes: usize) -> usize {
    let mut changed = 0;
    for anchor in dataset.iter_mut().flat_map(|s| s.anchors.iter_mut()) {
        if anchor.class == source {
            *anchor = Anchor::background(classes);
            changed += 1;
        }
    }
    changed
}

/// What one malicious client trains on in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPoisoning {
    pub data: Vec<DetectionSample>,
    pub poisoned_this_round: bool,
    pub poisoned_indices: Vec<usize>,
    /// Source anchors rewritten; zero flags a no-op.
    pub anchors_changed: usize,
}

/// `round(gamma * n)` with ties rounded up.
pub fn poisoned_sample_count(gamma: f64, n: usize) -> usize {
    ((gamma * n as f64) + 0.5).floor().min(n as f64) as usize
}

/// Applies `spec` to a copy of `dataset` for `(client, round)`: clean before
/// the onset round, clean with probability `beta`, otherwise the poison is
/// applied to `round(gamma * n)` samples.
pub fn effective_poison_for_round(
    spec: &AttackSpec,
    client: usize,
    round: usize,
    dataset: &[DetectionSample],
    master_seed: u64,
    classes: usize,
) -> RoundPoisoning {
    let clean = |data: Vec<DetectionSample>| RoundPoisoning {
        data,
        poisoned_this_round: false,
        poisoned_indices: Vec::new(),
        anchors_changed: 0,
    };
    if round < spec.onset_round {
        return clean(dataset.to_vec());
    }
    if spec.beta > 0.0 {
        let mut rng = rng_for(master_seed, Stream::AttackSkip, client as u64, round as u64);
        if rng.random::<f64>() < spec.beta {
            return clean(dataset.to_vec());
        }
    }
    let n = dataset.len();
    let count = poisoned_sample_count(spec.gamma, n);
    let mut indices: Vec<usize> = if count == n {
        (0..n).collect()
    } else {
        let mut rng = rng_for(master_seed, Stream::AttackSubset, client as u64, 0);
        index::sample(&mut rng, n, count).into_vec()
    };
    indices.sort_unstable();

    let mut data = dataset.to_vec();
    let mut jitter = rng_for(master_seed, Stream::AttackBoxJitter, client as u64, 0);
    let mut changed = 0;
    for &i in &indices {
        let sample = std::slice::from_mut(&mut data[i]);
        changed += match spec.poison {
            PoisonType::Class => poison_class(
                sample,
                spec.source_class,
                spec.target_class.expect("validated class poison has a target"),
            ),
            PoisonType::Bbox => poison_bbox(
                sample,
                spec.source_class,
                spec.shrink_factor,
                spec.jitter_scale,
                &mut jitter,
            ),
            PoisonType::Objn => poison_objn(sample, spec.source_class, classes),
        };
    }
    RoundPoisoning { data, poisoned_this_round: true, poisoned_indices: indices, anchors_changed: changed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{generate_federation_data, iou, TaskConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const C: usize = 4;

    fn sample_with(classes: &[usize]) -> DetectionSample {
        DetectionSample {
            features: vec![1.0, 0.0],
            anchors: classes
                .iter()
                .map(|&c| {
                    if c == C {
                        Anchor::background(C)
                    } else {
                        Anchor { class: c, bbox: BBox::new(0.5, 0.5, 0.4, 0.4), objn: true }
                    }
                })
                .collect(),
        }
    }

    fn count(data: &[DetectionSample], class: usize) -> usize {
        data.iter().flat_map(|s| &s.anchors).filter(|a| a.class == class).count()
    }

    #[test]
    fn class_poison_relabels_every_source_anchor() {
        let mut data = vec![
            sample_with(&[0, 0, 1]),
            sample_with(&[0, 3, 4]),
            sample_with(&[0, 0, 0]),
            sample_with(&[0, 2, 4]),
        ];
        let before_total: usize = data.iter().map(|s| s.anchors.len()).sum();
        let before_target = count(&data, 3);
        assert_eq!(count(&data, 0), 7);
        assert_eq!(poison_class(&mut data, 0, 3), 7);
        assert_eq!(count(&data, 0), 0);
        assert_eq!(count(&data, 3), before_target + 7);
        assert_eq!(data.iter().map(|s| s.anchors.len()).sum::<usize>(), before_total);
    }

    #[test]
    fn poisons_without_source_objects_are_noops() {
        let clean = vec![sample_with(&[1, 2, 4]), sample_with(&[3, 3, 4])];
        let mut a = clean.clone();
        assert_eq!(poison_class(&mut a, 0, 3), 0);
        assert_eq!(a, clean);
        let mut b = clean.clone();
        assert_eq!(poison_objn(&mut b, 0, C), 0);
        assert_eq!(b, clean);
    }

    #[test]
    fn objn_poison_removes_source_objects() {
        let mut data = vec![sample_with(&[0, 0, 1]), sample_with(&[0, 2, 0]), sample_with(&[0, 4, 4])];
        let objects = |d: &[DetectionSample]| {
            d.iter().flat_map(|s| &s.anchors).filter(|a| a.is_object(C)).count()
        };
        let before = objects(&data);
        assert_eq!(poison_objn(&mut data, 0, C), 5);
        assert_eq!(count(&data, 0), 0);
        assert_eq!(objects(&data), before - 5);
        assert!(data.iter().flat_map(|s| &s.anchors).filter(|a| a.class == C).all(|a| !a.objn));
    }

    #[test]
    fn bbox_shrink_identity_with_unit_factor() {
        let clean = vec![sample_with(&[0, 1, 0])];
        let mut data = clean.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        poison_bbox(&mut data, 0, 1.0, 1.0, &mut rng);
        assert_eq!(data, clean);
    }

    #[test]
    fn bbox_shrink_reference_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let original = BBox::new(0.5, 0.5, 0.4, 0.4);
        for _ in 0..500 {
            let b = shrink_box(&original, 0.10, 1.0, &mut rng);
            assert!((b.w - 0.04).abs() < 1e-12 && (b.h - 0.04).abs() < 1e-12);
            assert!((b.cx - 0.5).abs() <= 0.18 + 1e-12);
            assert!((b.cy - 0.5).abs() <= 0.18 + 1e-12);
        }
        // concentric shrink: IoU equals the area ratio 0.1^2
        let concentric = shrink_box(&original, 0.10, 0.0, &mut rng);
        assert!((iou(&original, &concentric) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn degenerate_attack_poisons_everything() {
        let cfg = TaskConfig::default();
        let data = generate_federation_data(1, 1, &cfg).unwrap();
        let spec = AttackSpec::new(PoisonType::Class, 0, Some(3));
        for round in 0..5 {
            let out = effective_poison_for_round(&spec, 0, round, &data.clients[0], 9, C);
            assert!(out.poisoned_this_round);
            assert_eq!(out.poisoned_indices.len(), data.clients[0].len());
            assert_eq!(count(&out.data, 0), 0);
        }
    }

    #[test]
    fn onset_keeps_early_rounds_clean() {
        let cfg = TaskConfig::default();
        let data = generate_federation_data(1, 1, &cfg).unwrap();
        let spec = AttackSpec { onset_round: 100, ..AttackSpec::new(PoisonType::Objn, 0, None) };
        let out = effective_poison_for_round(&spec, 0, 50, &data.clients[0], 9, C);
        assert!(!out.poisoned_this_round);
        assert_eq!(out.data, data.clients[0]);
        let out = effective_poison_for_round(&spec, 0, 100, &data.clients[0], 9, C);
        assert!(out.poisoned_this_round);
    }

    #[test]
    fn beta_skip_rate_is_binomial() {
        let data = vec![sample_with(&[0, 1, 4])];
        let spec = AttackSpec { beta: 0.10, ..AttackSpec::new(PoisonType::Class, 0, Some(3)) };
        let mut skipped = 0;
        for client in 0..20 {
            for round in 0..50 {
                if !effective_poison_for_round(&spec, client, round, &data, 77, C).poisoned_this_round {
                    skipped += 1;
                }
            }
        }
        // mean 100, sd sqrt(1000 * 0.1 * 0.9) ~ 9.5
        assert!((70..=130).contains(&skipped), "skipped {skipped}");
    }

    #[test]
    fn gamma_rounding_ties_up() {
        assert_eq!(poisoned_sample_count(0.6, 40), 24);
        assert_eq!(poisoned_sample_count(0.5, 5), 3);
        assert_eq!(poisoned_sample_count(1.0, 7), 7);
        assert_eq!(poisoned_sample_count(0.01, 10), 0);
    }

    #[test]
    fn spec_validation() {
        let ok = AttackSpec::new(PoisonType::Class, 0, Some(3));
        assert!(ok.violations(C).is_empty());
        let same = AttackSpec::new(PoisonType::Class, 1, Some(1));
        assert_eq!(same.violations(C)[0].field, "attack.target_class");
        let missing = AttackSpec::new(PoisonType::Class, 1, None);
        assert_eq!(missing.violations(C)[0].field, "attack.target_class");
        let bad = AttackSpec { shrink_factor: 1.5, beta: 1.0, gamma: 0.0, ..AttackSpec::new(PoisonType::Bbox, 0, None) };
        assert_eq!(bad.violations(C).len(), 3);
    }
}
