//! Federated training: client selection, local SGD, FedAvg aggregation,
//! defense hooks, revocation and per-round logging.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::effective_poison_for_round;
use crate::config::ExperimentConfig;
use crate::defense::{build_defense, contributions_of, Defense, GradientContribution};
use crate::detection::{
    detector_loss_and_grad, generate_federation_data, per_class_ap, predict, DetectionSample,
    DetectorWeights, FederatedData,
};
use crate::error::{Error, Result};
use crate::seed::{rng_for, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Honest,
    Malicious,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClientRole {
    pub client_id: usize,
    pub role: Role,
}

/// Picks exactly `malicious` of `num_clients` clients, uniformly.
pub fn assign_roles(num_clients: usize, malicious: usize, master_seed: u64) -> Vec<ClientRole> {
    let mut rng = rng_for(master_seed, Stream::Roles, 0, 0);
    let chosen: BTreeSet<usize> = index::sample(&mut rng, num_clients, malicious.min(num_clients)).into_iter().collect();
    (0..num_clients)
        .map(|client_id| ClientRole {
            client_id,
            role: if chosen.contains(&client_id) { Role::Malicious } else { Role::Honest },
        })
        .collect()
}

/// A client's model change after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub round: usize,
    pub delta: DetectorWeights,
    pub sample_count: usize,
}

/// `max(2, round(k * |active|))` distinct active clients, uniformly without
/// replacement, returned in ascending order.
pub fn select_participants<R: Rng>(active: &[usize], k: f64, rng: &mut R) -> Result<Vec<usize>> {
    if active.len() < 2 {
        return Err(Error::PopulationExhausted { active: active.len() });
    }
    let count = ((k * active.len() as f64).round() as usize).max(2).min(active.len());
    let mut chosen: Vec<usize> = index::sample(rng, active.len(), count).into_iter().map(|i| active[i]).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub learning_rate: f64,
    /// `None` trains on the full local dataset at each step.
    pub batch_size: Option<usize>,
}

/// Runs mini-batch SGD from `global` on `dataset` and returns the weight
/// change. The sample order is reshuffled every epoch with `rng`.
pub fn local_update<R: Rng>(
    client: usize,
    round: usize,
    dataset: &[DetectionSample],
    global: &DetectorWeights,
    training: &LocalTraining,
    rng: &mut R,
) -> Result<ClientUpdate> {
    if dataset.is_empty() {
        return Err(Error::Empty("local dataset"));
    }
    let mut weights = global.clone();
    let batch = training.batch_size.unwrap_or(dataset.len()).min(dataset.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut scratch: Vec<DetectionSample> = Vec::with_capacity(batch);
    for _ in 0..training.epochs {
        if batch < dataset.len() {
            order.shuffle(rng);
        }
        for chunk in order.chunks(batch) {
            scratch.clear();
            scratch.extend(chunk.iter().map(|&i| dataset[i].clone()));
            let (_, grad) = detector_loss_and_grad(&weights, &scratch)?;
            weights.add_scaled(&grad, -training.learning_rate);
        }
    }
    Ok(ClientUpdate { client, round, delta: weights.diff(global), sample_count: dataset.len() })
}

/// Sample-count-weighted mean of the update deltas.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<DetectorWeights> {
    let first = updates.first().ok_or(Error::Empty("update list"))?;
    let mut acc = DetectorWeights::zeros(first.delta.shape);
    let mut total = 0.0;
    for u in updates {
        first.delta.check_same_shape(&u.delta)?;
        acc.add_scaled(&u.delta, u.sample_count as f64);
        total += u.sample_count as f64;
    }
    if total <= 0.0 {
        return Err(Error::Empty("samples across updates"));
    }
    acc.scale(1.0 / total);
    Ok(acc)
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    /// Malicious participants that trained on poisoned data this round.
    pub poisoned: Vec<usize>,
    /// Of those, the ones whose data held no source object to poison.
    pub poison_noop: Vec<usize>,
    /// Per-class AP on the test set after aggregation; `null` when undefined.
    pub ap: Vec<Option<f64>>,
    pub test_loss: f64,
    pub weights_digest: String,
    pub flagged_classes: Vec<usize>,
    pub revoked: Vec<usize>,
    pub watchlisted: Vec<usize>,
}

/// Append-only per-round record of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<RoundRecord>,
}

impl RunLog {
    pub fn write_jsonl<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: Read>(input: R) -> Result<Self> {
        let mut records = Vec::new();
        for line in BufReader::new(input).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { records })
    }

    /// Rounds that revoked someone, with the clients revoked there.
    pub fn revocations(&self) -> Vec<(usize, Vec<usize>)> {
        self.records.iter().filter(|r| !r.revoked.is_empty()).map(|r| (r.round, r.revoked.clone())).collect()
    }

    pub fn ap_series(&self, class: usize) -> Vec<Option<f64>> {
        self.records.iter().map(|r| r.ap.get(class).copied().flatten()).collect()
    }
}

/// Whether the defense's revocations take effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DefenseMode {
    #[default]
    Enforce,
    /// The defense sees every update but its decisions are discarded.
    ObserveOnly,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub defense_mode: DefenseMode,
    /// Keep every per-class contribution for offline replay.
    pub record_gradients: bool,
}

/// Wall-clock cost of one defense window step; kept out of the run log so
/// logs stay reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowTiming {
    pub round: usize,
    pub millis: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub weights: DetectorWeights,
    pub log: RunLog,
    pub roles: Vec<ClientRole>,
    pub gradients: Vec<GradientContribution>,
    pub timings: Vec<WindowTiming>,
}

impl RunOutput {
    pub fn malicious(&self) -> BTreeSet<usize> {
        self.roles.iter().filter(|r| r.role == Role::Malicious).map(|r| r.client_id).collect()
    }

    pub fn final_ap(&self, class: usize) -> Option<f64> {
        self.log.records.last().and_then(|r| r.ap.get(class).copied().flatten())
    }
}

/// Per-class AP and mean loss of `weights` on `test`.
pub fn evaluate(weights: &DetectorWeights, test: &[DetectionSample]) -> Result<(Vec<Option<f64>>, f64)> {
    let predictions: Vec<_> = test.iter().map(|s| predict(weights, s)).collect();
    let ap = per_class_ap(&predictions, test, weights.shape.classes);
    let (loss, _) = detector_loss_and_grad(weights, test)?;
    Ok((ap, loss))
}

/// Runs a full federation described by `config` (validated here), with the
/// defense it names.
pub fn run_federation(config: &ExperimentConfig, options: RunOptions) -> Result<RunOutput> {
    let config = config.clone().validate()?;
    let data = generate_federation_data(config.federation.master_seed, config.federation.num_clients, &config.task)?;
    let defense = build_defense(&config.federation, &config.defense);
    run_federation_with(&config, &data, defense, options)
}

/// [`run_federation`] on pre-generated data with an explicit defense.
pub fn run_federation_with(
    config: &ExperimentConfig,
    data: &FederatedData,
    mut defense: Option<Box<dyn Defense>>,
    options: RunOptions,
) -> Result<RunOutput> {
    let fed = &config.federation;
    let seed = fed.master_seed;
    let classes = config.task.classes;
    if data.clients.len() != fed.num_clients {
        return Err(Error::ShapeMismatch(format!(
            "{} client datasets for {} clients",
            data.clients.len(),
            fed.num_clients
        )));
    }
    let roles = assign_roles(fed.num_clients, fed.malicious_count(), seed);
    let training = LocalTraining { epochs: fed.local_epochs, learning_rate: fed.learning_rate, batch_size: fed.batch_size };
    let mut weights = DetectorWeights::zeros(data.shape);
    let mut active: Vec<usize> = (0..fed.num_clients).collect();
    let mut log = RunLog::default();
    let mut gradients = Vec::new();
    let mut timings = Vec::new();

    for round in 0..fed.rounds {
        let participants = select_participants(&active, fed.participation_fraction, &mut rng_for(seed, Stream::Selection, 0, round as u64))?;
        let results: Vec<Result<(ClientUpdate, Option<bool>)>> = participants
            .par_iter()
            .map(|&client| {
                let clean = &data.clients[client];
                let mut rng = rng_for(seed, Stream::LocalTraining, client as u64, round as u64);
                match (&config.attack, roles[client].role) {
                    (Some(spec), Role::Malicious) => {
                        let poisoned = effective_poison_for_round(spec, client, round, clean, seed, classes);
                        let update = local_update(client, round, &poisoned.data, &weights, &training, &mut rng)?;
                        let noop = poisoned.anchors_changed == 0;
                        Ok((update, poisoned.poisoned_this_round.then_some(noop)))
                    }
                    _ => Ok((local_update(client, round, clean, &weights, &training, &mut rng)?, None)),
                }
            })
            .collect();
        let mut updates = Vec::with_capacity(results.len());
        let mut poisoned = Vec::new();
        let mut poison_noop = Vec::new();
        for r in results {
            let (update, poison) = r?;
            if let Some(noop) = poison {
                poisoned.push(update.client);
                if noop {
                    poison_noop.push(update.client);
                }
            }
            updates.push(update);
        }

        let aggregate = fedavg_aggregate(&updates)?;
        weights.add_scaled(&aggregate, 1.0);
        if !weights.is_finite() {
            return Err(Error::InvalidDimensions(format!("weights diverged in round {round}")));
        }
        let (ap, test_loss) = evaluate(&weights, &data.test)?;

        let mut record = RoundRecord {
            round,
            participants,
            poisoned,
            poison_noop,
            ap,
            test_loss,
            weights_digest: weights.digest(),
            flagged_classes: Vec::new(),
            revoked: Vec::new(),
            watchlisted: Vec::new(),
        };

        if defense.is_some() || options.record_gradients {
            let contributions: Vec<GradientContribution> = updates.iter().flat_map(contributions_of).collect();
            if let Some(d) = defense.as_mut() {
                d.observe(&contributions);
            }
            if options.record_gradients {
                gradients.extend(contributions);
            }
        }
        if let Some(d) = defense.as_mut() {
            if (round + 1) % fed.forensic_window == 0 {
                let start = Instant::now();
                let report = d.end_window(round);
                timings.push(WindowTiming { round, millis: start.elapsed().as_secs_f64() * 1e3 });
                if options.defense_mode == DefenseMode::Enforce {
                    let revoked: BTreeSet<usize> = report.revoked.iter().copied().collect();
                    active.retain(|c| !revoked.contains(c));
                    record.flagged_classes = report.flagged_classes;
                    record.revoked = report.revoked;
                    record.watchlisted = report.watchlisted;
                }
            }
        }
        log.records.push(record);
    }
    Ok(RunOutput { weights, log, roles, gradients, timings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::TaskShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn selection_sizes() {
        let active: Vec<usize> = (0..100).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = select_participants(&active, 0.10, &mut rng).unwrap();
        assert_eq!(p.len(), 10);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(select_participants(&active, 1.0, &mut rng).unwrap(), active);
        assert_eq!(select_participants(&active[..5], 0.01, &mut rng).unwrap().len(), 2);
        assert!(matches!(
            select_participants(&active[..1], 0.5, &mut rng),
            Err(Error::PopulationExhausted { active: 1 })
        ));
    }

    fn update(delta: Vec<f64>, n: usize) -> ClientUpdate {
        let shape = TaskShape::new(1, 1, 1);
        let mut w = DetectorWeights::zeros(shape);
        // shape (1,1,1): 2 class rows, 4 box rows, 1 objectness row of width 1
        w.params_mut().zip(delta).for_each(|(p, v)| *p = v);
        ClientUpdate { client: 0, round: 0, delta: w, sample_count: n }
    }

    #[test]
    fn fedavg_weighted_mean() {
        let a = update(vec![1.0, 3.0], 1);
        let b = update(vec![3.0, 1.0], 3);
        let avg = fedavg_aggregate(&[a, b]).unwrap();
        assert_eq!(avg.class_head, vec![2.5, 1.5]);
        assert!(fedavg_aggregate(&[]).is_err());
    }

    #[test]
    fn roles_have_exact_count() {
        let roles = assign_roles(50, 10, 3);
        assert_eq!(roles.iter().filter(|r| r.role == Role::Malicious).count(), 10);
        assert_eq!(roles, assign_roles(50, 10, 3));
    }

    #[test]
    fn one_full_batch_epoch_is_one_gradient_step() {
        use crate::detection::detector_loss_and_grad;
        use rand::Rng;
        let shape = TaskShape::new(4, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut global = DetectorWeights::zeros(shape);
        global.params_mut().for_each(|p| *p = rng.random_range(-0.3..0.3));
        let data: Vec<DetectionSample> = (0..5)
            .map(|_| DetectionSample {
                features: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                anchors: vec![
                    crate::detection::Anchor { class: 1, bbox: crate::detection::BBox::new(0.5, 0.4, 0.2, 0.3), objn: true },
                    crate::detection::Anchor::background(2),
                ],
            })
            .collect();
        let training = LocalTraining { epochs: 1, learning_rate: 0.1, batch_size: None };
        let u = local_update(3, 7, &data, &global, &training, &mut rng).unwrap();
        let (_, mut step) = detector_loss_and_grad(&global, &data).unwrap();
        step.scale(-0.1);
        assert!(u.delta.diff(&step).norm() < 1e-15);
        assert_eq!((u.client, u.round, u.sample_count), (3, 7, 5));

        let still = LocalTraining { learning_rate: 0.0, ..training };
        assert_eq!(local_update(3, 7, &data, &global, &still, &mut rng).unwrap().delta.norm(), 0.0);
    }
}
