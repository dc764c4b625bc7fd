//! Two-dimensional clustering: k-means, Ward agglomerative and spectral.
//!
//! Labels are canonical: clusters are numbered by ascending mean of the first
//! coordinate, so the same partition always gets the same labels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClusterAlgorithm {
    #[default]
    Kmeans,
    Agglomerative,
    Spectral,
}

const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 100;

fn dist2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Partitions `points` into `k` nonempty clusters.
pub fn cluster_2d(
    points: &[Point],
    k: usize,
    algorithm: ClusterAlgorithm,
    seed: u64,
) -> Result<Vec<usize>> {
    if k == 0 || points.len() < k {
        return Err(Error::InsufficientData(format!(
            "cannot form {k} clusters from {} points",
            points.len()
        )));
    }
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::InvalidDimensions("non-finite point".into()));
    }
    let labels = if distinct_count(points, k) < k {
        degenerate_split(points, k)
    } else {
        match algorithm {
            ClusterAlgorithm::Kmeans => kmeans(points, k, seed).0,
            ClusterAlgorithm::Agglomerative => ward(points, k),
            ClusterAlgorithm::Spectral => spectral(points, k, seed),
        }
    };
    Ok(canonicalize(points, &labels, k))
}

fn distinct_count(points: &[Point], cap: usize) -> usize {
    let mut seen: Vec<&Point> = Vec::new();
    for p in points {
        if !seen.contains(&p) {
            seen.push(p);
            if seen.len() >= cap {
                break;
            }
        }
    }
    seen.len()
}

/// Fewer distinct points than clusters: keep the first `n - k + 1` points
/// together and give each remaining point its own cluster.
fn degenerate_split(points: &[Point], k: usize) -> Vec<usize> {
    let n = points.len();
    (0..n).map(|i| (i + k).saturating_sub(n)).collect()
}

/// Renumbers clusters by ascending mean first coordinate (then second
/// coordinate, then first member index).
fn canonicalize(points: &[Point], labels: &[usize], k: usize) -> Vec<usize> {
    let mut stats: Vec<(f64, f64, usize, usize)> = (0..k).map(|c| (0.0, 0.0, usize::MAX, c)).collect();
    let mut counts = vec![0usize; k];
    for (i, (p, &l)) in points.iter().zip(labels).enumerate() {
        stats[l].0 += p[0];
        stats[l].1 += p[1];
        stats[l].2 = stats[l].2.min(i);
        counts[l] += 1;
    }
    for (s, &n) in stats.iter_mut().zip(&counts) {
        s.0 /= n.max(1) as f64;
        s.1 /= n.max(1) as f64;
    }
    stats.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut remap = vec![0; k];
    for (new, s) in stats.iter().enumerate() {
        remap[s.3] = new;
    }
    labels.iter().map(|&l| remap[l]).collect()
}

fn inertia(points: &[Point], labels: &[usize], centres: &[Point]) -> f64 {
    points.iter().zip(labels).map(|(p, &l)| dist2(p, &centres[l])).sum()
}

fn kmeans_pp_init(points: &[Point], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let mut centres = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centres.push(points[next]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &points[next]));
        }
    }
    centres
}

fn lloyd(points: &[Point], mut centres: Vec<Point>) -> (Vec<usize>, Vec<Point>) {
    let k = centres.len();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(points) {
            let mut best = 0;
            for c in 1..k {
                if dist2(p, &centres[c]) < dist2(p, &centres[best]) {
                    best = c;
                }
            }
            if *l != best {
                *l = best;
                changed = true;
            }
        }
        let mut sums = vec![[0.0, 0.0, 0.0]; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            sums[l][2] += 1.0;
        }
        for c in 0..k {
            if sums[c][2] > 0.0 {
                centres[c] = [sums[c][0] / sums[c][2], sums[c][1] / sums[c][2]];
            } else {
                // re-seed an empty cluster at the point farthest from its centre
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        dist2(&points[a], &centres[labels[a]])
                            .total_cmp(&dist2(&points[b], &centres[labels[b]]))
                            .then(b.cmp(&a))
                    })
                    .expect("points nonempty");
                centres[c] = points[far];
                labels[far] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    (labels, centres)
}

/// Best of several k-means++ restarts by inertia; returns labels and inertia.
fn kmeans(points: &[Point], k: usize, seed: u64) -> (Vec<usize>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let centres = kmeans_pp_init(points, k, &mut rng);
        let (labels, centres) = lloyd(points, centres);
        let mut counts = vec![0; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        if counts.contains(&0) {
            continue;
        }
        let score = inertia(points, &labels, &centres);
        if best.as_ref().is_none_or(|(_, b)| score < *b - 1e-12) {
            best = Some((labels, score));
        }
    }
    best.unwrap_or_else(|| (degenerate_split(points, k), f64::INFINITY))
}

/// Ward-linkage agglomerative clustering (Lance-Williams updates).
fn ward(points: &[Point], k: usize) -> Vec<usize> {
    let n = points.len();
    let mut size = vec![1.0; n];
    let mut alive = vec![true; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    // Ward distance between singletons: half the squared Euclidean distance
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            d[i][j] = dist2(&points[i], &points[j]) / 2.0;
            d[j][i] = d[i][j];
        }
    }
    let mut clusters = n;
    while clusters > k {
        let mut best = (f64::INFINITY, 0, 0);
        for i in (0..n).filter(|&i| alive[i]) {
            for j in (i + 1..n).filter(|&j| alive[j]) {
                if d[i][j] < best.0 {
                    best = (d[i][j], i, j);
                }
            }
        }
        let (dij, i, j) = best;
        for l in (0..n).filter(|&l| alive[l] && l != i && l != j) {
            let (si, sj, sl) = (size[i], size[j], size[l]);
            let total = si + sj + sl;
            let v = ((si + sl) * d[i][l] + (sj + sl) * d[j][l] - sl * dij) / total;
            d[i][l] = v;
            d[l][i] = v;
        }
        size[i] += size[j];
        alive[j] = false;
        let moved = std::mem::take(&mut members[j]);
        members[i].extend(moved);
        clusters -= 1;
    }
    let mut labels = vec![0; n];
    for (c, m) in members.iter().filter(|m| !m.is_empty()).enumerate() {
        for &i in m {
            labels[i] = c;
        }
    }
    labels
}

/// Spectral clustering on a Gaussian affinity whose bandwidth is the median
/// pairwise distance. Uses the symmetric normalized Laplacian; for `k = 2`
/// the Fiedler vector is split by 2-means, otherwise the row-normalized
/// bottom-`k` eigenvectors are clustered with k-means.
fn spectral(points: &[Point], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let mut dists: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(dist2(&points[i], &points[j]).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let positive: Vec<f64> = dists.iter().copied().filter(|&x| x > 0.0).collect();
    let bandwidth = positive.get(positive.len() / 2).copied().unwrap_or(1.0);
    let mut w = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let a = (-dist2(&points[i], &points[j]) / (2.0 * bandwidth * bandwidth)).exp();
            w[i][j] = a;
            w[j][i] = a;
        }
    }
    let deg: Vec<f64> = w.iter().map(|r| r.iter().sum::<f64>().max(1e-300)).collect();
    // eigenvectors of D^-1/2 W D^-1/2 with the largest eigenvalues are the
    // Laplacian's smallest
    let m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| w[i][j] / (deg[i] * deg[j]).sqrt()).collect())
        .collect();
    let (_, vectors) = symmetric_eigen(&m);
    if k == 2 {
        let fiedler: Vec<f64> = (0..n).map(|i| vectors[1][i] / deg[i].sqrt()).collect();
        return two_means_1d(&fiedler).labels;
    }
    let embedded: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row: Vec<f64> = (0..k).map(|c| vectors[c][i]).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            row.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    // k-means on the first two embedding coordinates keeps the 2D machinery;
    // extra coordinates are folded in through a fixed random rotation
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let rot: Vec<[f64; 2]> = (0..k).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let flat: Vec<Point> = embedded
        .iter()
        .map(|r| {
            let mut p = [0.0, 0.0];
            for (x, q) in r.iter().zip(&rot) {
                p[0] += x * q[0];
                p[1] += x * q[1];
            }
            p
        })
        .collect();
    kmeans(&flat, k, seed).0
}

/// Optimal two-group split of scalar values.
#[derive(Debug, Clone, PartialEq)]
pub struct Split1d {
    /// 0 for the lower group, 1 for the upper group.
    pub labels: Vec<usize>,
    pub means: [f64; 2],
    /// Sample standard deviations (0 for a singleton group).
    pub stds: [f64; 2],
    pub counts: [usize; 2],
}

impl Split1d {
    /// `|mu0 - mu1| / (sigma0 + sigma1 + eps)`.
    pub fn separation(&self) -> f64 {
        (self.means[0] - self.means[1]).abs() / (self.stds[0] + self.stds[1] + 1e-12)
    }
}

/// Exact 1D 2-means: scans every split of the sorted values for the least
/// within-group sum of squares. Ties keep the leftmost split. Requires at
/// least two values; identical values all go to the lower group except the
/// last in index order.
pub fn two_means_1d(values: &[f64]) -> Split1d {
    let n = values.len();
    assert!(n >= 2, "two_means_1d needs at least two values");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let mut prefix = vec![0.0; n + 1];
    let mut prefix2 = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + sorted[i];
        prefix2[i + 1] = prefix2[i] + sorted[i] * sorted[i];
    }
    let sse = |lo: usize, hi: usize| {
        let cnt = (hi - lo) as f64;
        let s = prefix[hi] - prefix[lo];
        (prefix2[hi] - prefix2[lo] - s * s / cnt).max(0.0)
    };
    let mut best = (f64::INFINITY, 1);
    for cut in 1..n {
        let total = sse(0, cut) + sse(cut, n);
        if total < best.0 - 1e-12 * (1.0 + best.0.abs()) || best.0.is_infinite() {
            best = (total, cut);
        }
    }
    let cut = best.1;
    let mut labels = vec![0; n];
    for &i in &order[cut..] {
        labels[i] = 1;
    }
    let stats = |slice: &[f64]| {
        let cnt = slice.len() as f64;
        let mean = slice.iter().sum::<f64>() / cnt;
        let std = if slice.len() > 1 {
            (slice.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (cnt - 1.0)).sqrt()
        } else {
            0.0
        };
        (mean, std)
    };
    let (m0, s0) = stats(&sorted[..cut]);
    let (m1, s1) = stats(&sorted[cut..]);
    Split1d { labels, means: [m0, m1], stds: [s0, s1], counts: [cut, n - cut] }
}
