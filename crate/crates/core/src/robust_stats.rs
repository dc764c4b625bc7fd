//! Two-population mixtures, the sufficient separation premise, an empirical
//! separability check, and synthetic gradient streams built on them.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::Violation;
use crate::defense::GradientContribution;
use crate::error::{Error, Result};
use crate::fl::Role;
use crate::linalg::{canonical_sign, column_mean, sample_covariance, symmetric_eigen};
use crate::seed::{rng_for, Stream};

/// Gaussian population with a mean and a positive-semidefinite covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl PopulationSpec {
    pub fn new(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        let p = Self { mean, covariance };
        let v = p.violations("population");
        if v.is_empty() {
            Ok(p)
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    /// `N(mean, variance * I)`.
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Self {
        let d = mean.len();
        let covariance = (0..d)
            .map(|i| (0..d).map(|j| if i == j { variance } else { 0.0 }).collect())
            .collect();
        Self { mean, covariance }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn violations(&self, field: &'static str) -> Vec<Violation> {
        let d = self.mean.len();
        let mut v = Vec::new();
        if d == 0 {
            v.push(Violation::new(field, "mean is empty"));
            return v;
        }
        if self.covariance.len() != d || self.covariance.iter().any(|r| r.len() != d) {
            v.push(Violation::new(field, format!("covariance must be {d}x{d}")));
            return v;
        }
        let asym = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .any(|(i, j)| (self.covariance[i][j] - self.covariance[j][i]).abs() > 1e-12);
        if asym {
            v.push(Violation::new(field, "covariance is not symmetric"));
        } else if symmetric_eigen(&self.covariance).0.iter().any(|&l| l < -1e-12) {
            v.push(Violation::new(field, "covariance is not positive semidefinite"));
        }
        v
    }

    /// Largest covariance eigenvalue.
    pub fn top_variance(&self) -> f64 {
        symmetric_eigen(&self.covariance).0[0].max(0.0)
    }

    /// Matrix `A` with `A A^T = covariance`, from the eigendecomposition.
    fn sqrt_factor(&self) -> Vec<Vec<f64>> {
        let (values, vectors) = symmetric_eigen(&self.covariance);
        let d = self.dim();
        (0..d)
            .map(|i| values.iter().zip(&vectors).map(|(l, v)| v[i] * l.max(0.0).sqrt()).collect())
            .collect()
    }

    pub fn sampler(&self) -> GaussianSampler {
        GaussianSampler { mean: self.mean.clone(), factor: self.sqrt_factor() }
    }
}

/// Draws from a fixed multivariate Gaussian.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: Vec<f64>,
    factor: Vec<Vec<f64>>,
}

impl GaussianSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.mean.len()).map(|_| StandardNormal.sample(rng)).collect();
        self.mean
            .iter()
            .zip(&self.factor)
            .map(|(m, row)| m + row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }
}

/// Honest population, poisoned population and the poisoned share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub honest: PopulationSpec,
    pub poisoned: PopulationSpec,
    pub m: f64,
}

impl MixtureSpec {
    pub fn new(honest: PopulationSpec, poisoned: PopulationSpec, m: f64) -> Result<Self> {
        let mut v = honest.violations("mixture.honest");
        v.extend(poisoned.violations("mixture.poisoned"));
        if honest.dim() != poisoned.dim() {
            v.push(Violation::new("mixture.poisoned", "dimension differs from the honest population"));
        }
        if !(m > 0.0 && m < 0.5) {
            v.push(Violation::new("mixture.m", "must lie in (0, 0.5)"));
        }
        if v.is_empty() {
            Ok(Self { honest, poisoned, m })
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    /// Honest mean minus poisoned mean.
    pub fn delta(&self) -> Vec<f64> {
        self.honest.mean.iter().zip(&self.poisoned.mean).map(|(h, p)| h - p).collect()
    }

    pub fn delta_norm_sq(&self) -> f64 {
        self.delta().iter().map(|x| x * x).sum()
    }

    /// Smallest `c` with both covariances below `c * I`.
    pub fn phi_sq(&self) -> f64 {
        self.honest.top_variance().max(self.poisoned.top_variance())
    }
}

/// Unit top eigenvector and eigenvalue of a sample covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct TopEigen {
    pub vector: Vec<f64>,
    pub value: f64,
    /// The covariance was zero; `vector` is the first basis vector.
    pub degenerate: bool,
}

/// Top eigenpair of the sample covariance of `samples`, with the largest
/// magnitude entry of the vector made positive.
pub fn top_eigenpair(samples: &[Vec<f64>]) -> Result<TopEigen> {
    let cov = sample_covariance(samples)?;
    if cov.iter().flatten().all(|&x| x == 0.0) {
        let mut vector = vec![0.0; cov.len()];
        vector[0] = 1.0;
        return Ok(TopEigen { vector, value: 0.0, degenerate: true });
    }
    let (values, mut vectors) = symmetric_eigen(&cov);
    let mut vector = vectors.swap_remove(0);
    canonical_sign(&mut vector);
    Ok(TopEigen { vector, value: values[0].max(0.0), degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PremiseReport {
    pub holds: bool,
    pub delta_norm_sq: f64,
    /// `6 * phi^2 / m`.
    pub bound: f64,
}

/// Whether the squared mean gap reaches `6 * phi^2 / m`.
pub fn separation_premise_holds(mixture: &MixtureSpec) -> PremiseReport {
    let delta_norm_sq = mixture.delta_norm_sq();
    let bound = 6.0 * mixture.phi_sq() / mixture.m;
    PremiseReport { holds: delta_norm_sq >= bound, delta_norm_sq, bound }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub separable: bool,
    pub tau: f64,
    /// Share of honest samples projecting beyond `tau`.
    pub honest_violation: f64,
    /// Share of poisoned samples projecting within `tau`.
    pub poisoned_violation: f64,
    pub honest_samples: usize,
    pub poisoned_samples: usize,
}

/// Draws a pooled sample and scans every midpoint threshold on the absolute
/// projections onto the pooled top eigenvector. The reported threshold
/// minimises the larger of the two violation rates.
pub fn separability_check<R: Rng + ?Sized>(
    mixture: &MixtureSpec,
    n_samples: usize,
    rng: &mut R,
) -> Result<SeparabilityReport> {
    if n_samples < 1000 {
        return Err(Error::InsufficientData(format!("need at least 1000 samples, got {n_samples}")));
    }
    let n_poisoned = ((mixture.m * n_samples as f64).round() as usize).clamp(1, n_samples - 1);
    let n_honest = n_samples - n_poisoned;
    let honest = mixture.honest.sampler();
    let poisoned = mixture.poisoned.sampler();
    let mut samples: Vec<Vec<f64>> = (0..n_honest).map(|_| honest.sample(rng)).collect();
    samples.extend((0..n_poisoned).map(|_| poisoned.sample(rng)));

    let top = top_eigenpair(&samples)?;
    let mean = column_mean(&samples);
    let mut scored: Vec<(f64, bool)> = samples
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let p: f64 = x.iter().zip(&mean).zip(&top.vector).map(|((a, m), v)| (a - m) * v).sum();
            (p.abs(), i >= n_honest)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));

    // walking up the sorted list: honest beyond tau shrinks, poisoned within grows
    let (nh, np) = (n_honest as f64, n_poisoned as f64);
    let mut honest_below = 0usize;
    let mut poisoned_below = 0usize;
    let mut best: Option<(f64, f64, f64)> = None;
    for w in scored.windows(2) {
        if w[0].1 {
            poisoned_below += 1;
        } else {
            honest_below += 1;
        }
        if w[0].0 == w[1].0 {
            continue;
        }
        let tau = 0.5 * (w[0].0 + w[1].0);
        let hv = (n_honest - honest_below) as f64 / nh;
        let pv = poisoned_below as f64 / np;
        if best.is_none_or(|(_, bh, bp)| hv.max(pv) < bh.max(bp)) {
            best = Some((tau, hv, pv));
        }
    }
    let (tau, honest_violation, poisoned_violation) = best.unwrap_or((0.0, 1.0, 1.0));
    Ok(SeparabilityReport {
        separable: honest_violation < mixture.m && poisoned_violation < mixture.m,
        tau,
        honest_violation,
        poisoned_violation,
        honest_samples: n_honest,
        poisoned_samples: n_poisoned,
    })
}

/// Parameters of a synthetic gradient stream over one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthStreamSpec {
    pub mixture: MixtureSpec,
    pub n_clients: usize,
    pub rounds: usize,
    /// Displacement of the honest population per round.
    pub drift: Vec<f64>,
    /// Standard deviation of the per-round jitter on malicious re-emissions.
    pub jitter: f64,
    /// Emit honest contributions only.
    pub benign: bool,
    pub class: usize,
}

impl SynthStreamSpec {
    /// Drift of 1% of the mean gap per round along the first axis and
    /// jitter of 1% of the mean gap.
    pub fn with_defaults(mixture: MixtureSpec, n_clients: usize, rounds: usize) -> Self {
        let gap = mixture.delta_norm_sq().sqrt();
        let mut drift = vec![0.0; mixture.honest.dim()];
        drift[0] = 0.01 * gap;
        Self { mixture, n_clients, rounds, drift, jitter: 0.01 * gap, benign: false, class: 0 }
    }

    pub fn malicious_count(&self) -> usize {
        (self.mixture.m * self.n_clients as f64).floor() as usize
    }
}

/// Contributions in round order, plus each client's role.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthStream {
    pub rounds: Vec<Vec<GradientContribution>>,
    pub roles: Vec<Role>,
}

impl SynthStream {
    pub fn malicious(&self) -> Vec<usize> {
        self.roles.iter().enumerate().filter(|(_, r)| **r == Role::Malicious).map(|(i, _)| i).collect()
    }

    pub fn flatten(&self) -> Vec<GradientContribution> {
        self.rounds.iter().flatten().cloned().collect()
    }
}

/// Every client contributes every round. Honest clients draw afresh from
/// the honest population shifted by `round * drift`; malicious clients draw
/// once from the poisoned population and re-emit that sample with jitter.
/// The highest client ids are malicious.
pub fn synth_two_population_stream(spec: &SynthStreamSpec, seed: u64) -> Result<SynthStream> {
    let malicious = if spec.benign { 0 } else { spec.malicious_count() };
    if !spec.benign && malicious == 0 {
        return Err(Error::InvalidConfig(vec![Violation::new(
            "stream.n_clients",
            "m * n_clients must be at least 1",
        )]));
    }
    if spec.drift.len() != spec.mixture.honest.dim() {
        return Err(Error::ShapeMismatch("drift length differs from the population dimension".into()));
    }
    let honest = spec.mixture.honest.sampler();
    let poisoned = spec.mixture.poisoned.sampler();
    let roles: Vec<Role> = (0..spec.n_clients)
        .map(|c| if c >= spec.n_clients - malicious { Role::Malicious } else { Role::Honest })
        .collect();
    let anchors: Vec<Option<Vec<f64>>> = roles
        .iter()
        .enumerate()
        .map(|(c, r)| (*r == Role::Malicious).then(|| poisoned.sample(&mut rng_for(seed, Stream::Synthetic, c as u64, 0))))
        .collect();
    let rounds = (0..spec.rounds)
        .map(|round| {
            (0..spec.n_clients)
                .map(|client| {
                    let mut rng = rng_for(seed, Stream::Synthetic, client as u64, round as u64 + 1);
                    let block = match &anchors[client] {
                        Some(anchor) => anchor
                            .iter()
                            .map(|a| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                a + spec.jitter * z
                            })
                            .collect(),
                        None => honest
                            .sample(&mut rng)
                            .iter()
                            .zip(&spec.drift)
                            .map(|(x, d)| x + round as f64 * d)
                            .collect(),
                    };
                    GradientContribution { client, round, class: spec.class, block }
                })
                .collect()
        })
        .collect();
    Ok(SynthStream { rounds, roles })
}

/// A random mixture in `dim` dimensions with poisoned share `m` whose squared
/// mean gap is `margin` times the premise bound. Covariances are random
/// Gram matrices with top eigenvalue at most one.
pub fn random_premise_mixture<R: Rng + ?Sized>(rng: &mut R, dim: usize, m: f64, margin: f64) -> Result<MixtureSpec> {
    let mut covariance = || {
        let a: Vec<Vec<f64>> = (0..dim).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut g: Vec<Vec<f64>> =
            (0..dim).map(|i| (0..dim).map(|j| (0..dim).map(|k| a[i][k] * a[j][k]).sum()).collect()).collect();
        let top = symmetric_eigen(&g).0[0].max(f64::MIN_POSITIVE);
        g.iter_mut().flatten().for_each(|x| *x /= top);
        g
    };
    let (ch, cp) = (covariance(), covariance());
    let honest_mean: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let direction: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let mut mix = MixtureSpec::new(
        PopulationSpec::new(honest_mean.clone(), ch)?,
        PopulationSpec::new(honest_mean.clone(), cp)?,
        m,
    )?;
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
    let gap = (margin * 6.0 * mix.phi_sq() / m).sqrt();
    mix.poisoned.mean = honest_mean.iter().zip(&direction).map(|(h, d)| h - gap * d / norm).collect();
    Ok(mix)
}

/// One premise and separability check on a random mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PremiseTrial {
    pub trial: usize,
    pub dim: usize,
    pub m: f64,
    pub delta_norm_sq: f64,
    pub bound: f64,
    pub premise_holds: bool,
    pub separable: bool,
    pub tau: f64,
    pub honest_violation: f64,
    pub poisoned_violation: f64,
    pub samples: usize,
}

/// Draws `trials` premise-satisfying mixtures with `m` in [0.05, 0.3] and
/// dimension in [2, 16], and checks each for separability.
pub fn premise_trials(seed: u64, trials: usize, samples: usize) -> Result<Vec<PremiseTrial>> {
    (0..trials)
        .map(|trial| {
            let mut rng = rng_for(seed, Stream::Synthetic, trial as u64, u64::MAX);
            let dim = rng.random_range(2..=16);
            let m = rng.random_range(0.05..=0.3);
            let margin = rng.random_range(1.0..2.0);
            let mix = random_premise_mixture(&mut rng, dim, m, margin)?;
            let premise = separation_premise_holds(&mix);
            let sep = separability_check(&mix, samples, &mut rng)?;
            Ok(PremiseTrial {
                trial,
                dim,
                m,
                delta_norm_sq: premise.delta_norm_sq,
                bound: premise.bound,
                premise_holds: premise.holds,
                separable: sep.separable,
                tau: sep.tau,
                honest_violation: sep.honest_violation,
                poisoned_violation: sep.poisoned_violation,
                samples,
            })
        })
        .collect()
}
