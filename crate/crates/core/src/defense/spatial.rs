use serde::{Deserialize, Serialize};

use super::GradientContribution;
use crate::cluster::two_means_1d;
use crate::error::{Error, Result};
use crate::linalg::principal_components;

/// One contribution's coordinates on the two spatial-signature components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialPoint {
    pub client: usize,
    pub round: usize,
    pub ssc1: f64,
    pub ssc2: f64,
}

impl SpatialPoint {
    pub fn xy(&self) -> [f64; 2] {
        [self.ssc1, self.ssc2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialProjection {
    pub class: usize,
    pub points: Vec<SpatialPoint>,
    /// `[lambda1, lambda2]`, descending.
    pub eigenvalues: [f64; 2],
    pub eigenvectors: [Vec<f64>; 2],
    /// Set when the contributions span fewer than two dimensions.
    pub rank_deficient: bool,
}

/// Projects mean-centred contributions of one class onto the two leading
/// eigenvectors of their covariance. Each axis is oriented so that the point
/// with the largest absolute coordinate is positive.
pub fn spatial_project(class: usize, contributions: &[&GradientContribution]) -> Result<SpatialProjection> {
    if contributions.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "spatial projection needs 3 contributions, got {}",
            contributions.len()
        )));
    }
    let rows: Vec<Vec<f64>> = contributions.iter().map(|c| c.block.clone()).collect();
    project_rows(class, contributions, &rows)
}

pub(crate) fn project_rows(
    class: usize,
    contributions: &[&GradientContribution],
    rows: &[Vec<f64>],
) -> Result<SpatialProjection> {
    if rows[0].len() < 2 {
        return Err(Error::InvalidDimensions("blocks need at least two entries".into()));
    }
    let mut pc = principal_components(rows, 2)?;
    let mut coords: [Vec<f64>; 2] = [0, 1].map(|i| rows.iter().map(|r| pc.project(r, i)).collect());
    for (axis, values) in coords.iter_mut().enumerate() {
        let extreme = values.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if extreme < 0.0 {
            values.iter_mut().for_each(|x| *x = -*x);
            pc.vectors[axis].iter_mut().for_each(|x| *x = -*x);
        }
    }
    if pc.values[1] == 0.0 {
        coords[1].iter_mut().for_each(|x| *x = 0.0);
    }
    let points = contributions
        .iter()
        .enumerate()
        .map(|(i, c)| SpatialPoint { client: c.client, round: c.round, ssc1: coords[0][i], ssc2: coords[1][i] })
        .collect();
    let [v1, v2]: [Vec<f64>; 2] = [pc.vectors[0].clone(), pc.vectors[1].clone()];
    Ok(SpatialProjection {
        class,
        points,
        eigenvalues: [pc.values[0], pc.values[1]],
        eigenvectors: [v1, v2],
        rank_deficient: pc.values[1] == 0.0,
    })
}

/// Thresholds on the 2-means separation of the first spatial component.
#[derive(Debug, Clone, PartialEq)]
pub struct FlagRule {
    pub min_separation: f64,
    /// Entry `i` is the separation required when a group holds the
    /// contributions of only `i + 1` distinct clients.
    pub few_client_separation: Vec<f64>,
}

impl FlagRule {
    pub fn new(min_separation: f64, few_client_separation: Vec<f64>) -> Self {
        Self { min_separation, few_client_separation }
    }

    pub fn required(&self, distinct_clients: usize) -> f64 {
        let few = distinct_clients.checked_sub(1).and_then(|i| self.few_client_separation.get(i));
        few.map_or(self.min_separation, |&s| s.max(self.min_separation))
    }
}

/// Classes whose contributions split into two well separated groups along
/// the first spatial component. Each group must hold at least two points.
pub fn flag_suspect_classes(projections: &[SpatialProjection], rule: &FlagRule) -> Vec<usize> {
    projections
        .iter()
        .filter(|p| p.points.len() >= 4)
        .filter(|p| {
            let ssc1: Vec<f64> = p.points.iter().map(|q| q.ssc1).collect();
            let split = two_means_1d(&ssc1);
            let distinct = [0, 1].map(|g| {
                let mut ids: Vec<usize> = p
                    .points
                    .iter()
                    .zip(&split.labels)
                    .filter(|(_, &l)| l == g)
                    .map(|(q, _)| q.client)
                    .collect();
                ids.sort_unstable();
                ids.dedup();
                ids.len()
            });
            split.counts.iter().all(|&n| n >= 2)
                && split.separation() >= rule.required(distinct[0].min(distinct[1]))
        })
        .map(|p| p.class)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    
    fn contribution(client: usize, block: Vec<f64>) -> GradientContribution {
        GradientContribution { client, round: 0, class: 0, block }
    }

    fn project(blocks: &[Vec<f64>]) -> SpatialProjection {
        let cs: Vec<GradientContribution> =
            blocks.iter().enumerate().map(|(i, b)| contribution(i, b.clone())).collect();
        let refs: Vec<&GradientContribution> = cs.iter().collect();
        spatial_project(0, &refs).unwrap()
    }

    #[test]
    fn plane_projection_is_an_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = [1.0, 0.0, 0.0, 0.0, 0.0];
        let s = 0.5f64.sqrt();
        let v = [0.0, s, s, 0.0, 0.0];
        let blocks: Vec<Vec<f64>> = (0..12)
            .map(|_| {
                let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0));
                (0..5).map(|i| a * u[i] + b * v[i] + 0.7).collect()
            })
            .collect();
        let p = project(&blocks);
        for i in 0..blocks.len() {
            for j in 0..blocks.len() {
                let orig: f64 = blocks[i].iter().zip(&blocks[j]).map(|(x, y)| (x - y).powi(2)).sum();
                let proj = (p.points[i].ssc1 - p.points[j].ssc1).powi(2)
                    + (p.points[i].ssc2 - p.points[j].ssc2).powi(2);
                assert!((orig.sqrt() - proj.sqrt()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn collinear_points_have_zero_second_eigenvalue() {
        let blocks: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let p = project(&blocks);
        assert_eq!(p.eigenvalues[1], 0.0);
        assert!(p.rank_deficient);
        assert!(p.points.iter().all(|q| q.ssc2 == 0.0));
    }

    #[test]
    fn eigenvectors_orthonormal_and_variance_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let blocks: Vec<Vec<f64>> =
            (0..20).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let p = project(&blocks);
        let dot: f64 = p.eigenvectors[0].iter().zip(&p.eigenvectors[1]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-9);
        assert!(p.eigenvalues[0] >= p.eigenvalues[1] && p.eigenvalues[1] >= 0.0);
        let xs: Vec<f64> = p.points.iter().map(|q| q.ssc1).collect();
        let mean = xs.iter().sum::<f64>() / 20.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 19.0;
        assert!((var - p.eigenvalues[0]).abs() < 1e-6 * p.eigenvalues[0]);
    }

    #[test]
    fn translation_invariant_after_sign_fix() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let blocks: Vec<Vec<f64>> =
            (0..15).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let shifted: Vec<Vec<f64>> = blocks.iter().map(|b| b.iter().map(|x| x + 42.0).collect()).collect();
        let (a, b) = (project(&blocks), project(&shifted));
        for (p, q) in a.points.iter().zip(&b.points) {
            assert!((p.ssc1 - q.ssc1).abs() < 1e-8 && (p.ssc2 - q.ssc2).abs() < 1e-8);
        }
    }

    fn gaussian_projection(rng: &mut ChaCha8Rng, n: usize, offset: f64, share: f64) -> SpatialProjection {
        let noise = Normal::new(0.0, 1.0).unwrap();
        let blocks: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let shift = if (i as f64) < share * n as f64 { offset } else { 0.0 };
                (0..4).map(|j| noise.sample(rng) + if j == 0 { shift } else { 0.0 }).collect()
            })
            .collect();
        project(&blocks)
    }

    #[test]
    fn unimodal_classes_rarely_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let flagged = (0..1000)
            .filter(|_| !flag_suspect_classes(&[gaussian_projection(&mut rng, 40, 0.0, 0.0)], &FlagRule::new(2.0, vec![8.5, 4.5])).is_empty())
            .count();
        assert!(flagged <= 50, "flagged {flagged}");
    }

    #[test]
    fn far_apart_groups_are_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = gaussian_projection(&mut rng, 40, 20.0, 0.2);
        assert_eq!(flag_suspect_classes(&[p], &FlagRule::new(2.0, vec![8.5, 4.5])), vec![0]);
    }
}
