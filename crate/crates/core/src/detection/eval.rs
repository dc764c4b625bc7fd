use super::{BBox, DetectionPrediction, DetectionSample};

/// Intersection over union of two centre/size boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A scored detection of one class in one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub sample: usize,
    pub anchor: usize,
    pub confidence: f64,
    pub bbox: BBox,
}

/// Area under the step precision/recall curve of a ranked hit list:
/// the sum over true positives of precision at that rank, divided by the
/// number of ground-truth objects.
pub fn average_precision_ranked(hits: &[bool], num_ground_truth: usize) -> Option<f64> {
    if num_ground_truth == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / num_ground_truth as f64)
}

/// Detections of `class`: one per anchor whose most likely label is `class`,
/// scored by class probability times objectness.
fn detections_for(predictions: &[DetectionPrediction], class: usize) -> Vec<Detection> {
    let mut out = Vec::new();
    for (i, p) in predictions.iter().enumerate() {
        for (a, ap) in p.anchors.iter().enumerate() {
            if ap.top_class() == class {
                out.push(Detection {
                    sample: i,
                    anchor: a,
                    confidence: ap.class_probs[class] * ap.objectness[class],
                    bbox: ap.boxes[class],
                });
            }
        }
    }
    out
}

/// Single-class average precision.
///
/// Detections are ranked by confidence (ties keep sample/anchor order), each
/// greedily matched to the unmatched ground-truth object of the same sample
/// with the highest IoU at or above `iou_threshold`. Returns `None` when the
/// ground truth holds no object of `class`.
pub fn average_precision(
    predictions: &[DetectionPrediction],
    ground_truth: &[DetectionSample],
    class: usize,
    iou_threshold: f64,
) -> Option<f64> {
    let gt: Vec<Vec<BBox>> = ground_truth
        .iter()
        .map(|s| {
            s.anchors
                .iter()
                .filter(|a| a.class == class && a.objn)
                .map(|a| a.bbox)
                .collect()
        })
        .collect();
    let num_gt: usize = gt.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return None;
    }
    let mut dets = detections_for(predictions, class);
    // stable sort keeps index order among equal confidences
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let hits: Vec<bool> = dets
        .iter()
        .map(|d| {
            let Some(boxes) = gt.get(d.sample) else { return false };
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in boxes.iter().enumerate() {
                if used[d.sample][j] {
                    continue;
                }
                let v = iou(&d.bbox, g);
                if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    used[d.sample][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    average_precision_ranked(&hits, num_gt)
}

/// AP at IoU 0.5 for every class.
pub fn per_class_ap(
    predictions: &[DetectionPrediction],
    ground_truth: &[DetectionSample],
    classes: usize,
) -> Vec<Option<f64>> {
    (0..classes).map(|c| average_precision(predictions, ground_truth, c, 0.5)).collect()
}
