use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BBox, DetectionSample, TaskShape};
use crate::error::{Error, Result};

/// Linear detector output layer. Every head is a row-major matrix whose rows
/// map the feature vector to one output.
///
/// Row layout, with `d` features, `A` anchors and `C` classes:
/// * class head: row `a*(C+1) + k` is the logit of class `k` (background is `k = C`) at anchor `a`;
/// * box head: row `(a*C + c)*4 + j` is box coordinate `j` of class `c` at anchor `a`;
/// * objectness head: row `a*C + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorWeights {
    pub shape: TaskShape,
    pub class_head: Vec<f64>,
    pub bbox_head: Vec<f64>,
    pub objn_head: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Box regression targets: centre as-is, log width and log height.
pub fn encode_box(b: &BBox) -> [f64; 4] {
    [b.cx, b.cy, b.w.ln(), b.h.ln()]
}

pub fn decode_box(t: &[f64; 4]) -> BBox {
    BBox::new(t[0], t[1], t[2].exp(), t[3].exp())
}

impl DetectorWeights {
    pub fn zeros(shape: TaskShape) -> Self {
        let TaskShape { features: d, anchors: a, classes: c } = shape;
        Self {
            shape,
            class_head: vec![0.0; a * (c + 1) * d],
            bbox_head: vec![0.0; a * c * 4 * d],
            objn_head: vec![0.0; a * c * d],
        }
    }

    pub fn num_params(&self) -> usize {
        self.class_head.len() + self.bbox_head.len() + self.objn_head.len()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.class_head.iter().chain(&self.bbox_head).chain(&self.objn_head)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.class_head
            .iter_mut()
            .chain(self.bbox_head.iter_mut())
            .chain(self.objn_head.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|x| x.is_finite())
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Self, alpha: f64) {
        debug_assert_eq!(self.shape, other.shape);
        axpy(&mut self.class_head, alpha, &other.class_head);
        axpy(&mut self.bbox_head, alpha, &other.bbox_head);
        axpy(&mut self.objn_head, alpha, &other.objn_head);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.params_mut().for_each(|x| *x *= alpha);
    }

    /// `self - other`.
    pub fn diff(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }

    pub fn norm(&self) -> f64 {
        self.params().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn class_row(&self, a: usize, k: usize) -> &[f64] {
        let TaskShape { features: d, classes: c, .. } = self.shape;
        let start = (a * (c + 1) + k) * d;
        &self.class_head[start..start + d]
    }

    fn box_row(&self, a: usize, class: usize, j: usize) -> &[f64] {
        let TaskShape { features: d, classes: c, .. } = self.shape;
        let start = ((a * c + class) * 4 + j) * d;
        &self.bbox_head[start..start + d]
    }

    fn objn_row(&self, a: usize, class: usize) -> &[f64] {
        let TaskShape { features: d, classes: c, .. } = self.shape;
        let start = (a * c + class) * d;
        &self.objn_head[start..start + d]
    }

    /// Flattened output-layer block owned by `class`: the class-head rows of
    /// every anchor, then the box-head rows (anchor-major, coordinate-minor),
    /// then the objectness rows.
    pub fn class_block(&self, class: usize) -> Vec<f64> {
        let TaskShape { anchors, .. } = self.shape;
        let mut out = Vec::with_capacity(self.shape.class_block_len());
        for a in 0..anchors {
            out.extend_from_slice(self.class_row(a, class));
        }
        for a in 0..anchors {
            for j in 0..4 {
                out.extend_from_slice(self.box_row(a, class, j));
            }
        }
        for a in 0..anchors {
            out.extend_from_slice(self.objn_row(a, class));
        }
        out
    }

    /// Hex SHA-256 over the little-endian bytes of every parameter.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for x in self.params() {
            h.update(x.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPrediction {
    /// Distribution over the `C` classes followed by background.
    pub class_probs: Vec<f64>,
    /// Decoded box per class.
    pub boxes: Vec<BBox>,
    /// Objectness probability per class.
    pub objectness: Vec<f64>,
}

impl AnchorPrediction {
    /// Most likely label, background included; ties go to the lower index.
    pub fn top_class(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.class_probs.iter().enumerate() {
            if p > self.class_probs[best] {
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionPrediction {
    pub anchors: Vec<AnchorPrediction>,
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

pub fn predict(weights: &DetectorWeights, sample: &DetectionSample) -> DetectionPrediction {
    let TaskShape { anchors, classes, .. } = weights.shape;
    let x = &sample.features;
    let anchors = (0..anchors)
        .map(|a| {
            let mut class_probs: Vec<f64> =
                (0..=classes).map(|k| dot(weights.class_row(a, k), x)).collect();
            softmax_in_place(&mut class_probs);
            let boxes = (0..classes)
                .map(|c| {
                    let t = [0, 1, 2, 3].map(|j| dot(weights.box_row(a, c, j), x));
                    decode_box(&t)
                })
                .collect();
            let objectness =
                (0..classes).map(|c| sigmoid(dot(weights.objn_row(a, c), x))).collect();
            AnchorPrediction { class_probs, boxes, objectness }
        })
        .collect();
    DetectionPrediction { anchors }
}

/// Mean loss over `batch` and its exact gradient.
///
/// Per sample and anchor the loss is the softmax cross-entropy of the class
/// head, plus half the squared error of the encoded box (see [`encode_box`])
/// for the true class of object anchors, plus the binary cross-entropy of
/// every per-class objectness logit against "this anchor is an object of
/// that class".
pub fn detector_loss_and_grad(
    weights: &DetectorWeights,
    batch: &[DetectionSample],
) -> Result<(f64, DetectorWeights)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let shape = weights.shape;
    let TaskShape { features: d, classes, .. } = shape;
    let mut grad = DetectorWeights::zeros(shape);
    let mut loss = 0.0;
    let mut logits = vec![0.0; classes + 1];
    for sample in batch {
        shape.check_sample(sample)?;
        let x = &sample.features;
        for (a, anchor) in sample.anchors.iter().enumerate() {
            // class head
            for (k, z) in logits.iter_mut().enumerate() {
                *z = dot(weights.class_row(a, k), x);
            }
            softmax_in_place(&mut logits);
            loss -= logits[anchor.class].max(f64::MIN_POSITIVE).ln();
            for (k, &p) in logits.iter().enumerate() {
                let r = p - if k == anchor.class { 1.0 } else { 0.0 };
                let start = (a * (classes + 1) + k) * d;
                axpy(&mut grad.class_head[start..start + d], r, x);
            }

            // objectness heads
            for c in 0..classes {
                let o = dot(weights.objn_row(a, c), x);
                let t = if anchor.class == c && anchor.objn { 1.0 } else { 0.0 };
                loss += softplus(o) - t * o;
                let start = (a * classes + c) * d;
                axpy(&mut grad.objn_head[start..start + d], sigmoid(o) - t, x);
            }

            // box head of the true class
            if anchor.is_object(classes) {
                let target = encode_box(&anchor.bbox);
                for (j, t) in target.iter().enumerate() {
                    let r = dot(weights.box_row(a, anchor.class, j), x) - t;
                    loss += 0.5 * r * r;
                    let start = ((a * classes + anchor.class) * 4 + j) * d;
                    axpy(&mut grad.bbox_head[start..start + d], r, x);
                }
            }
        }
    }
    let n = batch.len() as f64;
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}
