use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Anchor, BBox, DetectionSample, TaskShape};
use crate::config::Violation;
use crate::error::{Error, Result};
use crate::seed::{rng_for, Stream};

/// Shape and generator parameters of the synthetic detection task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub classes: usize,
    pub features: usize,
    pub anchors: usize,
    pub samples_per_client: usize,
    pub test_samples: usize,
    /// Probability that an anchor holds an object rather than background.
    pub object_prob: f64,
    /// Norm of each class prototype in feature space.
    pub signal: f64,
    /// Standard deviation of isotropic feature noise.
    pub noise: f64,
    /// Relative per-sample perturbation of object boxes around their
    /// class-and-anchor canonical box.
    pub box_jitter: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            features: 16,
            anchors: 3,
            samples_per_client: 40,
            test_samples: 400,
            object_prob: 0.6,
            signal: 2.0,
            noise: 0.5,
            box_jitter: 0.05,
        }
    }
}

impl TaskConfig {
    pub fn shape(&self) -> TaskShape {
        TaskShape::new(self.features, self.anchors, self.classes)
    }

    pub(crate) fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        if self.classes < 2 {
            v.push(Violation::new("task.classes", "C must be >= 2"));
        }
        if self.features < 4 {
            v.push(Violation::new("task.features", "d must be >= 4"));
        }
        if self.anchors == 0 {
            v.push(Violation::new("task.anchors", "A must be >= 1"));
        }
        if self.samples_per_client == 0 {
            v.push(Violation::new("task.samples_per_client", "must be positive"));
        }
        if self.test_samples == 0 {
            v.push(Violation::new("task.test_samples", "must be positive"));
        }
        if !(self.object_prob > 0.0 && self.object_prob <= 1.0) {
            v.push(Violation::new("task.object_prob", "must lie in (0, 1]"));
        }
        if !(self.signal.is_finite() && self.signal > 0.0) {
            v.push(Violation::new("task.signal", "must be positive"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            v.push(Violation::new("task.noise", "must be nonnegative"));
        }
        if !(0.0..0.5).contains(&self.box_jitter) {
            v.push(Violation::new("task.box_jitter", "must lie in [0, 0.5)"));
        }
        v
    }
}

/// Per-client training sets plus a disjoint held-out test set.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedData {
    pub shape: TaskShape,
    pub clients: Vec<Vec<DetectionSample>>,
    pub test: Vec<DetectionSample>,
}

/// Class-conditional generator: the first feature is a constant bias; the rest
/// is the sum of one prototype per object anchor plus isotropic noise.
struct Generator {
    shape: TaskShape,
    /// `prototypes[a * C + c]`, each of length `d - 1`.
    prototypes: Vec<Vec<f64>>,
    /// `canonical[a * C + c]`.
    canonical: Vec<BBox>,
    object_prob: f64,
    noise: f64,
    box_jitter: f64,
}

impl Generator {
    fn new<R: Rng>(cfg: &TaskConfig, rng: &mut R) -> Self {
        let shape = cfg.shape();
        let dim = shape.features - 1;
        let count = shape.anchors * shape.classes;
        // Gram-Schmidt while the space allows it, so prototypes are as
        // distinguishable as the dimension permits.
        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(count);
        for _ in 0..count {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            if prototypes.len() < dim {
                for u in &prototypes {
                    let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= n);
            prototypes.push(v);
        }
        for p in &mut prototypes {
            p.iter_mut().for_each(|x| *x *= cfg.signal);
        }
        let canonical = (0..count)
            .map(|_| {
                BBox::new(
                    rng.random_range(0.3..0.7),
                    rng.random_range(0.3..0.7),
                    rng.random_range(0.2..0.45),
                    rng.random_range(0.2..0.45),
                )
            })
            .collect();
        Self {
            shape,
            prototypes,
            canonical,
            object_prob: cfg.object_prob,
            noise: cfg.noise,
            box_jitter: cfg.box_jitter,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> DetectionSample {
        let TaskShape { features, anchors, classes } = self.shape;
        let mut x = vec![0.0; features];
        x[0] = 1.0;
        let mut out = Vec::with_capacity(anchors);
        for a in 0..anchors {
            if rng.random::<f64>() < self.object_prob {
                let c = rng.random_range(0..classes);
                let proto = &self.prototypes[a * classes + c];
                x[1..].iter_mut().zip(proto).for_each(|(xi, p)| *xi += p);
                let base = self.canonical[a * classes + c];
                let j = self.box_jitter;
                let bbox = BBox::new(
                    base.cx + base.w * rng.random_range(-j..=j),
                    base.cy + base.h * rng.random_range(-j..=j),
                    base.w * (1.0 + rng.random_range(-j..=j)),
                    base.h * (1.0 + rng.random_range(-j..=j)),
                );
                out.push(Anchor { class: c, bbox, objn: true });
            } else {
                out.push(Anchor::background(classes));
            }
        }
        for xi in x[1..].iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *xi += self.noise * z;
        }
        DetectionSample { features: x, anchors: out }
    }
}

/// Generates `num_clients` datasets of `cfg.samples_per_client` samples each
/// and a disjoint test set, all from one seeded pool.
pub fn generate_federation_data(
    seed: u64,
    num_clients: usize,
    cfg: &TaskConfig,
) -> Result<FederatedData> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        let msg = violations
            .iter()
            .map(|v| format!("{}: {}", v.field, v.message))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::InvalidDimensions(msg));
    }
    let mut rng = rng_for(seed, Stream::TaskData, 0, 0);
    let generator = Generator::new(cfg, &mut rng);
    let clients = (0..num_clients)
        .map(|_| (0..cfg.samples_per_client).map(|_| generator.sample(&mut rng)).collect())
        .collect();
    let test = (0..cfg.test_samples).map(|_| generator.sample(&mut rng)).collect();
    Ok(FederatedData { shape: cfg.shape(), clients, test })
}

/// One line of a dataset dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    /// Owning client; `None` for the test split.
    pub client: Option<usize>,
    #[serde(flatten)]
    pub sample: DetectionSample,
}

pub fn write_dataset_jsonl<W: Write>(data: &FederatedData, out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    let clients = data
        .clients
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().map(move |s| (Some(i), s)));
    let test = data.test.iter().map(|s| (None, s));
    for (client, sample) in clients.chain(test) {
        let rec = DatasetRecord { client, sample: sample.clone() };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dump written by [`write_dataset_jsonl`]. Client ids must be dense.
pub fn read_dataset_jsonl<R: Read>(input: R, shape: TaskShape) -> Result<FederatedData> {
    let mut clients: Vec<Vec<DetectionSample>> = Vec::new();
    let mut test = Vec::new();
    for line in BufReader::new(input).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)?;
        shape.check_sample(&rec.sample)?;
        match rec.client {
            Some(i) => {
                if clients.len() <= i {
                    clients.resize_with(i + 1, Vec::new);
                }
                clients[i].push(rec.sample);
            }
            None => test.push(rec.sample),
        }
    }
    Ok(FederatedData { shape, clients, test })
}
