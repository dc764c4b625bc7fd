//! Principal components of small dense sample matrices.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Leading principal components of a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub mean: Vec<f64>,
    /// Sample-covariance eigenvalues, descending.
    pub values: Vec<f64>,
    /// Unit eigenvectors matching `values`.
    pub vectors: Vec<Vec<f64>>,
}

impl Components {
    /// Coordinates of `row` along component `i`, relative to the mean.
    pub fn project(&self, row: &[f64], i: usize) -> f64 {
        row.iter()
            .zip(&self.mean)
            .zip(&self.vectors[i])
            .map(|((x, m), v)| (x - m) * v)
            .sum()
    }
}

pub fn column_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn check_rows(rows: &[Vec<f64>], min_rows: usize) -> Result<usize> {
    if rows.len() < min_rows {
        return Err(Error::InsufficientData(format!(
            "need at least {min_rows} rows, got {}",
            rows.len()
        )));
    }
    let dim = rows[0].len();
    if dim == 0 {
        return Err(Error::InvalidDimensions("rows have no columns".into()));
    }
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::ShapeMismatch("rows differ in length".into()));
    }
    Ok(dim)
}

/// Top `k` eigenpairs of the sample covariance (denominator `n - 1`) of
/// `rows`, computed from the thin SVD of the centred data. Missing rank is
/// padded with zero eigenvalues and orthonormal completion vectors.
pub fn principal_components(rows: &[Vec<f64>], k: usize) -> Result<Components> {
    let dim = check_rows(rows, 2)?;
    let n = rows.len();
    let mean = column_mean(rows);
    let centred = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    let svd = centred.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let scale = 1.0 / (n as f64 - 1.0);
    let mut values = Vec::with_capacity(k);
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let s = svd.singular_values[i];
        // numerically null directions are not trustworthy eigenvectors
        if s <= 1e-12 * svd.singular_values[order[0]].max(f64::MIN_POSITIVE) || s == 0.0 {
            break;
        }
        values.push(s * s * scale);
        vectors.push(v_t.row(i).iter().copied().collect());
    }
    while vectors.len() < k.min(dim) {
        values.push(0.0);
        let v = orthonormal_completion(&vectors, dim);
        vectors.push(v);
    }
    Ok(Components { mean, values, vectors })
}

/// A unit vector orthogonal to every vector in `basis` (assumed orthonormal),
/// chosen deterministically from the standard basis.
fn orthonormal_completion(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best = vec![0.0; dim];
    let mut best_norm = -1.0;
    for e in 0..dim {
        let mut v = vec![0.0; dim];
        v[e] = 1.0;
        for b in basis {
            let p = b[e];
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > best_norm + 1e-12 {
            best_norm = norm;
            best = v;
        }
        if norm > 0.5 {
            break;
        }
    }
    best.iter_mut().for_each(|x| *x /= best_norm);
    best
}

/// Flips `v` so that its largest-magnitude entry is positive (first one on ties).
pub fn canonical_sign(v: &mut [f64]) {
    let mut idx = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[idx].abs() {
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Sample covariance matrix with denominator `n - 1`.
pub fn sample_covariance(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = check_rows(rows, 2)?;
    let mean = column_mean(rows);
    let mut cov = vec![vec![0.0; dim]; dim];
    for r in rows {
        for i in 0..dim {
            let di = r[i] - mean[i];
            for j in i..dim {
                cov[i][j] += di * (r[j] - mean[j]);
            }
        }
    }
    let scale = 1.0 / (rows.len() as f64 - 1.0);
    for i in 0..dim {
        for j in i..dim {
            cov[i][j] *= scale;
            cov[j][i] = cov[i][j];
        }
    }
    Ok(cov)
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues descending.
pub fn symmetric_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dim = matrix.len();
    let m = DMatrix::from_fn(dim, dim, |i, j| 0.5 * (matrix[i][j] + matrix[j][i]));
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    (values, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Cyclic Jacobi rotations; slow but independent of the library solver.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut d: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        d.sort_by(|x, y| y.total_cmp(x));
        d
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn components_match_jacobi_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let rows = random_rows(&mut rng, 20, 8);
            let pc = principal_components(&rows, 2).unwrap();
            let oracle = jacobi_eigenvalues(sample_covariance(&rows).unwrap());
            assert!((pc.values[0] - oracle[0]).abs() < 1e-9 * oracle[0].max(1.0));
            assert!((pc.values[1] - oracle[1]).abs() < 1e-9 * oracle[0].max(1.0));
            let dot: f64 = pc.vectors[0].iter().zip(&pc.vectors[1]).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-9);
        }
    }

    #[test]
    fn symmetric_eigen_matches_jacobi() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = random_rows(&mut rng, 50, 10);
        let cov = sample_covariance(&rows).unwrap();
        let (values, _) = symmetric_eigen(&cov);
        let oracle = jacobi_eigenvalues(cov);
        for (a, b) in values.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_one_rows_pad_second_component() {
        let dir = [0.6, 0.8, 0.0];
        let rows: Vec<Vec<f64>> =
            (0..5).map(|i| dir.iter().map(|x| x * i as f64).collect()).collect();
        let pc = principal_components(&rows, 2).unwrap();
        assert_eq!(pc.values[1], 0.0);
        let v = &pc.vectors[0];
        assert!((v[0].abs() - 0.6).abs() < 1e-12 && (v[1].abs() - 0.8).abs() < 1e-12);
        let dot: f64 = v.iter().zip(&pc.vectors[1]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);
        let n2: f64 = pc.vectors[1].iter().map(|x| x * x).sum();
        assert!((n2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_variance_equals_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows = random_rows(&mut rng, 30, 6);
        let pc = principal_components(&rows, 2).unwrap();
        let proj: Vec<f64> = rows.iter().map(|r| pc.project(r, 0)).collect();
        let mean = proj.iter().sum::<f64>() / proj.len() as f64;
        let var = proj.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (proj.len() - 1) as f64;
        assert!((var - pc.values[0]).abs() < 1e-6 * pc.values[0]);
    }

    #[test]
    fn canonical_sign_makes_largest_entry_positive() {
        let mut v = vec![0.1, -0.9, 0.3];
        canonical_sign(&mut v);
        assert_eq!(v, vec![-0.1, 0.9, -0.3]);
    }
}
