//! Surrogate object-detection task.
//!
//! Each sample carries a feature vector and a fixed list of anchors; every
//! anchor holds one object triplet (class, box, objectness) or background.
//! The detector is a single linear output layer with a class head, per-class
//! box heads and per-class objectness heads, so each class owns a well-defined
//! block of output-layer parameters.

mod data;
mod eval;
mod model;

use serde::{Deserialize, Serialize};

pub use data::{
    generate_federation_data, read_dataset_jsonl, write_dataset_jsonl, DatasetRecord,
    FederatedData, TaskConfig,
};
pub use eval::{average_precision, average_precision_ranked, iou, per_class_ap, Detection};
pub use model::{
    decode_box, detector_loss_and_grad, encode_box, predict, AnchorPrediction,
    DetectionPrediction, DetectorWeights,
};

/// Axis-aligned box in normalized image coordinates, centre/size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// `(x0, y0, x1, y1)` corners.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

/// One anchor's ground truth. `class == classes` marks background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub class: usize,
    pub bbox: BBox,
    pub objn: bool,
}

impl Anchor {
    pub fn background(classes: usize) -> Self {
        Self { class: classes, bbox: BBox::new(0.5, 0.5, 1.0, 1.0), objn: false }
    }

    pub fn is_object(&self, classes: usize) -> bool {
        self.class < classes && self.objn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSample {
    pub features: Vec<f64>,
    pub anchors: Vec<Anchor>,
}

/// `(d, A, C)`: feature dimension, anchors per sample, object classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskShape {
    pub features: usize,
    pub anchors: usize,
    pub classes: usize,
}

impl TaskShape {
    pub fn new(features: usize, anchors: usize, classes: usize) -> Self {
        Self { features, anchors, classes }
    }

    /// Length of one per-class output-layer block: class row, four box rows
    /// and one objectness row per anchor.
    pub fn class_block_len(&self) -> usize {
        self.features * 6 * self.anchors
    }

    pub fn check_sample(&self, s: &DetectionSample) -> crate::Result<()> {
        if s.features.len() != self.features || s.anchors.len() != self.anchors {
            return Err(crate::Error::ShapeMismatch(format!(
                "sample has {} features and {} anchors, task expects {} and {}",
                s.features.len(),
                s.anchors.len(),
                self.features,
                self.anchors
            )));
        }
        if let Some(a) = s.anchors.iter().find(|a| a.class > self.classes) {
            return Err(crate::Error::ShapeMismatch(format!(
                "anchor class {} outside [0, {}]",
                a.class, self.classes
            )));
        }
        Ok(())
    }
}
