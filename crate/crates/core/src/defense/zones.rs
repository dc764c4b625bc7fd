use serde::{Deserialize, Serialize};

use crate::config::z_for_confidence;
use crate::error::{Error, Result};

/// Where a value falls relative to two clusters' confident intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ZoneLabel {
    /// Inside its own cluster's interval.
    Confident(usize),
    /// Strictly between the two intervals.
    Uncertain,
    /// Neither: a tail beyond its own interval or inside the other one.
    Outside,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaZones {
    pub z: f64,
    pub means: [f64; 2],
    pub stds: [f64; 2],
    /// `mean ± z·std` per cluster.
    pub intervals: [(f64, f64); 2],
    /// Open gap between the two intervals; `None` when they overlap or touch.
    pub uncertain: Option<(f64, f64)>,
}

impl SigmaZones {
    pub fn label(&self, value: f64, cluster: usize) -> ZoneLabel {
        let (lo, hi) = self.intervals[cluster];
        if value >= lo && value <= hi {
            return ZoneLabel::Confident(cluster);
        }
        match self.uncertain {
            Some((a, b)) if value > a && value < b => ZoneLabel::Uncertain,
            _ => ZoneLabel::Outside,
        }
    }
}

pub fn confident_interval(mean: f64, std: f64, z: f64) -> (f64, f64) {
    (mean - z * std, mean + z * std)
}

/// Fits per-cluster mean and sample standard deviation to `values`, builds
/// the `z`-sigma intervals for `confidence` and labels every value.
/// A singleton cluster has zero spread.
pub fn sigma_zone_partition(
    values: &[f64],
    assignments: &[usize],
    confidence: f64,
) -> Result<(SigmaZones, Vec<ZoneLabel>)> {
    let z = z_for_confidence(confidence)
        .ok_or_else(|| Error::InvalidDimensions(format!("unsupported confidence {confidence}")))?;
    if values.len() != assignments.len() {
        return Err(Error::ShapeMismatch("values and assignments differ in length".into()));
    }
    let mut means = [0.0; 2];
    let mut stds = [0.0; 2];
    for c in 0..2 {
        let members: Vec<f64> =
            values.iter().zip(assignments).filter(|(_, &a)| a == c).map(|(&v, _)| v).collect();
        if members.is_empty() {
            return Err(Error::InsufficientData(format!("cluster {c} is empty")));
        }
        let n = members.len() as f64;
        means[c] = members.iter().sum::<f64>() / n;
        stds[c] = if members.len() > 1 {
            (members.iter().map(|v| (v - means[c]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
    }
    let intervals = [0, 1].map(|c| confident_interval(means[c], stds[c], z));
    let (left, right) = if means[0] <= means[1] { (0, 1) } else { (1, 0) };
    let uncertain = (intervals[left].1 < intervals[right].0).then_some((intervals[left].1, intervals[right].0));
    let zones = SigmaZones { z, means, stds, intervals, uncertain };
    let labels = values.iter().zip(assignments).map(|(&v, &a)| zones.label(v, a)).collect();
    Ok((zones, labels))
}
