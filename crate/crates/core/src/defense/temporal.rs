fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Windowed temporal dissimilarity of a time-ordered trajectory: every point
/// after the first `omega` is compared (L1) with each of its `omega`
/// predecessors, and the sum is normalized by `omega * n - omega^2`.
///
/// Returns `None` when the trajectory has at most `omega` points.
pub fn temporal_signature<P: AsRef<[f64]>>(trajectory: &[P], omega: usize) -> Option<f64> {
    let n = trajectory.len();
    if omega == 0 || n <= omega {
        return None;
    }
    let mut total = 0.0;
    for j in omega..n {
        for k in 1..=omega {
            total += l1(trajectory[j].as_ref(), trajectory[j - k].as_ref());
        }
    }
    Some(total / (omega * n - omega * omega) as f64)
}

/// Chooses the suspicious one of two clusters: the one with the lower mean
/// per-cluster temporal signature over clients where it is defined. Equal
/// means go to the cluster with fewer points.
///
/// `signatures[i][c]` is client `i`'s signature within cluster `c`.
/// Returns `None` when either cluster has no defined signature.
pub fn identify_suspicious_cluster(signatures: &[[Option<f64>; 2]], cluster_sizes: [usize; 2]) -> Option<usize> {
    let mut means = [0.0; 2];
    for (c, mean) in means.iter_mut().enumerate() {
        let defined: Vec<f64> = signatures.iter().filter_map(|s| s[c]).collect();
        if defined.is_empty() {
            return None;
        }
        *mean = defined.iter().sum::<f64>() / defined.len() as f64;
    }
    let tol = 1e-12 * means[0].abs().max(means[1].abs());
    if (means[0] - means[1]).abs() <= tol {
        Some(if cluster_sizes[1] < cluster_sizes[0] { 1 } else { 0 })
    } else if means[0] < means[1] {
        Some(0)
    } else {
        Some(1)
    }
}
