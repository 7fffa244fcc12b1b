//! The federated training loop: broadcast, local compute, attack,
//! aggregate, global update.

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregators::{adaptive_tau_with, Aggregator, AggregatorSpec};
use crate::attacks::{craft, label_flip_transform, AttackContext, AttackSpec, LocalTraining};
use crate::data::{Dataset, Partition};
use crate::error::{invalid, Result};
use crate::metrics::{clamp_loss, pairwise_cosine};
use crate::models::{Architecture, Batch, Evaluation};
use crate::rng::{stream, Purpose};
use crate::vector::{l2_norm, UpdateVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Clients upload one minibatch gradient; the server steps `w - eta * agg`.
    FedSgd,
    /// Clients run local SGD and upload the parameter delta; the server
    /// steps `w + agg`.
    FedAvg,
}

impl Algorithm {
    pub fn default_eval_interval(self) -> usize {
        match self {
            Self::FedSgd => 10,
            Self::FedAvg => 1,
        }
    }

    pub fn default_schedule(self) -> Schedule {
        match self {
            Self::FedSgd => Schedule::fedsgd(),
            Self::FedAvg => Schedule::fedavg(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Breakpoint {
    /// Last round (inclusive) this rate applies to.
    pub until: u64,
    pub rate: f64,
}

/// Piecewise-constant learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub breakpoints: Vec<Breakpoint>,
}

impl Schedule {
    pub fn new(breakpoints: Vec<Breakpoint>) -> Result<Self> {
        let s = Self { breakpoints };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(rate: f64) -> Self {
        Self {
            breakpoints: vec![Breakpoint { until: 0, rate }],
        }
    }

    fn decay(first: u64, second: u64, end: u64) -> Self {
        Self {
            breakpoints: vec![
                Breakpoint { until: first, rate: 0.1 },
                Breakpoint { until: second, rate: 0.05 },
                Breakpoint { until: end, rate: 0.025 },
            ],
        }
    }

    pub fn fedsgd() -> Self {
        Self::decay(2000, 5000, 6000)
    }

    pub fn fedavg() -> Self {
        Self::decay(200, 500, 600)
    }

    pub fn validate(&self) -> Result<()> {
        if self.breakpoints.is_empty() {
            return Err(invalid("breakpoints", "schedule is empty"));
        }
        for pair in self.breakpoints.windows(2) {
            if pair[1].until <= pair[0].until {
                return Err(invalid(
                    "breakpoints",
                    format!("thresholds must increase strictly, got {} then {}", pair[0].until, pair[1].until),
                ));
            }
        }
        if let Some(b) = self.breakpoints.iter().find(|b| !(b.rate > 0.0 && b.rate.is_finite())) {
            return Err(invalid("rate", format!("learning rates must be positive, got {}", b.rate)));
        }
        Ok(())
    }

    /// Rate of the first breakpoint with `t <= until`, else the last rate.
    pub fn lr_at(&self, t: u64) -> Result<f64> {
        let last = self.breakpoints.last().ok_or_else(|| invalid("breakpoints", "schedule is empty"))?;
        Ok(self.breakpoints.iter().find(|b| t <= b.until).unwrap_or(last).rate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub algorithm: Algorithm,
    pub num_clients: usize,
    pub num_byzantine: usize,
    pub rounds: usize,
    /// Local SGD steps per round; FedAvg only.
    pub local_steps: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub eval_interval: usize,
    /// Rounds at which benign pairwise similarity is captured.
    pub similarity_rounds: Vec<usize>,
}

impl FederationConfig {
    pub fn new(algorithm: Algorithm, num_clients: usize, num_byzantine: usize, rounds: usize) -> Self {
        Self {
            algorithm,
            num_clients,
            num_byzantine,
            rounds,
            local_steps: 1,
            batch_size: 32,
            schedule: algorithm.default_schedule(),
            seed: 0,
            eval_interval: algorithm.default_eval_interval(),
            similarity_rounds: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(invalid("num_clients", "need at least one client"));
        }
        if 2 * self.num_byzantine >= self.num_clients {
            return Err(invalid(
                "num_byzantine",
                format!(
                    "M = {} with K = {} breaks M < K/2: the majority of the clients are benign",
                    self.num_byzantine, self.num_clients
                ),
            ));
        }
        if self.algorithm == Algorithm::FedAvg && self.local_steps == 0 {
            return Err(invalid("local_steps", "FedAvg needs at least one local step"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if self.eval_interval == 0 {
            return Err(invalid("eval_interval", "must be at least 1"));
        }
        self.schedule.validate()
    }

    /// Whether round `t` (0-based) ends with a test evaluation. The last
    /// round always does.
    pub fn evaluates(&self, t: usize) -> bool {
        (t + 1) % self.eval_interval == 0 || t + 1 == self.rounds
    }
}

/// Shuffle-per-epoch minibatch positions over a shard of `n` samples.
/// A shard no larger than the batch is used whole every step.
#[derive(Clone, Debug)]
pub struct MinibatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl MinibatchSampler {
    pub fn new(n: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Self> {
        if n == 0 {
            return Err(invalid("shard", "client shard is empty"));
        }
        if batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        if n > batch_size {
            order.shuffle(rng);
        }
        Ok(Self { order, pos: 0, batch_size })
    }

    pub fn next_batch(&mut self, rng: &mut impl Rng) -> &[usize] {
        let n = self.order.len();
        if n <= self.batch_size {
            return &self.order;
        }
        if self.pos + self.batch_size > n {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos += self.batch_size;
        &self.order[start..self.pos]
    }
}

/// Runs `local_steps` SGD steps from `w0` over a shard of `shard_len`
/// samples and returns `w_final - w0`. `grad` receives the parameters and
/// the minibatch as positions within the shard. Ascent moves along
/// `+eta * grad`.
#[allow(clippy::too_many_arguments)]
pub fn local_sgd<R, F>(
    w0: &[f64],
    shard_len: usize,
    local_steps: usize,
    batch_size: usize,
    eta: f64,
    training: LocalTraining,
    rng: &mut R,
    mut grad: F,
) -> Result<Vec<f64>>
where
    R: Rng,
    F: FnMut(&[f64], &[usize]) -> Result<Vec<f64>>,
{
    if local_steps == 0 {
        return Err(invalid("local_steps", "need at least one local step"));
    }
    let mut sampler = MinibatchSampler::new(shard_len, batch_size, rng)?;
    let step = -eta * training.sign();
    let mut w = w0.to_vec();
    for _ in 0..local_steps {
        let batch = sampler.next_batch(rng).to_vec();
        let g = grad(&w, &batch)?;
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi += step * gi;
        }
    }
    for (wi, w0i) in w.iter_mut().zip(w0) {
        *wi -= w0i;
    }
    Ok(w)
}

/// Everything observed in one round. `updates[k]` is client `k`'s upload.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub learning_rate: f64,
    pub updates: Vec<UpdateVector>,
    pub aggregate: UpdateVector,
    pub update_norms: Vec<f64>,
    /// Test metrics after the global update, on evaluated rounds.
    pub evaluation: Option<Evaluation>,
    pub tau: Option<f64>,
    /// Non-finite upload coordinates zeroed before aggregation.
    pub sanitized: usize,
}

/// The per-round summary kept for the whole run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub learning_rate: f64,
    pub aggregate_norm: f64,
    pub evaluation: Option<Evaluation>,
    pub mean_similarity: Option<f64>,
    pub tau: Option<f64>,
    pub sanitized: usize,
}

/// One federated run over a model and a partitioned dataset.
pub struct Simulation<'a> {
    config: FederationConfig,
    arch: Architecture,
    train: &'a Dataset,
    test_batch: Batch<'a>,
    shards: Vec<Vec<usize>>,
    flipped_labels: Option<Vec<usize>>,
    aggregator: Aggregator,
    attack: AttackSpec,
    params: Vec<f64>,
    round: usize,
}

impl<'a> Simulation<'a> {
    pub fn new(
        config: FederationConfig,
        arch: Architecture,
        train: &'a Dataset,
        test: &'a Dataset,
        partition: Partition,
        aggregator: &AggregatorSpec,
        attack: AttackSpec,
    ) -> Result<Self> {
        config.validate()?;
        attack.validate()?;
        if partition.num_clients() != config.num_clients {
            return Err(invalid(
                "partition",
                format!("{} shards for {} clients", partition.num_clients(), config.num_clients),
            ));
        }
        if !partition.is_partition_of(train.len()) {
            return Err(invalid("partition", "shards must be disjoint and cover the training set"));
        }
        if let Some(k) = partition.shards.iter().position(|s| s.is_empty()) {
            return Err(invalid("partition", format!("client {k} has an empty shard")));
        }
        for ds in [train, test] {
            if ds.feature_dim() != arch.input_dim() || ds.num_classes() > arch.num_classes() {
                return Err(invalid(
                    "model",
                    format!(
                        "model maps {} features to {} classes but data has {} features and {} classes",
                        arch.input_dim(),
                        arch.num_classes(),
                        ds.feature_dim(),
                        ds.num_classes()
                    ),
                ));
            }
        }
        let flipped_labels = if attack.flips_labels() {
            let classes = arch.num_classes();
            Some(
                train
                    .labels()
                    .iter()
                    .map(|&l| label_flip_transform(l, classes))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let aggregator = Aggregator::new(aggregator, config.num_clients, config.num_byzantine)?;
        let params = arch.init(&mut stream(config.seed, Purpose::Init, 0, 0)).values;
        Ok(Self {
            test_batch: test.all(),
            config,
            arch,
            train,
            shards: partition.shards,
            flipped_labels,
            aggregator,
            attack,
            params,
            round: 0,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        crate::vector::check_dims(self.arch.dim(), params.len())?;
        self.params = params;
        Ok(())
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        let mut e = self.arch.evaluate(&self.params, &self.test_batch)?;
        e.loss = clamp_loss(e.loss);
        Ok(e)
    }

    fn client_update(&self, k: usize, lr: f64) -> Result<Vec<f64>> {
        let byzantine = k < self.config.num_byzantine;
        let shard = &self.shards[k];
        let labels = match (&self.flipped_labels, byzantine) {
            (Some(flipped), true) => flipped.as_slice(),
            _ => self.train.labels(),
        };
        let training = if byzantine {
            self.attack.local_training()
        } else {
            LocalTraining::Descent
        };
        let grad = |w: &[f64], positions: &[usize]| -> Result<Vec<f64>> {
            let idx: Vec<usize> = positions.iter().map(|&p| shard[p]).collect();
            let batch = self.train.batch_with_labels(&idx, idx.iter().map(|&i| labels[i]).collect())?;
            Ok(self.arch.loss_grad(w, &batch)?.grad)
        };
        let mut rng = stream(self.config.seed, Purpose::Batches, k as u64, self.round as u64);
        match self.config.algorithm {
            Algorithm::FedSgd => {
                let mut sampler = MinibatchSampler::new(shard.len(), self.config.batch_size, &mut rng)?;
                let positions = sampler.next_batch(&mut rng).to_vec();
                let mut g = grad(&self.params, &positions)?;
                if training == LocalTraining::Ascent {
                    g.iter_mut().for_each(|x| *x = -*x);
                }
                Ok(g)
            }
            Algorithm::FedAvg => local_sgd(
                &self.params,
                shard.len(),
                self.config.local_steps,
                self.config.batch_size,
                lr,
                training,
                &mut rng,
                grad,
            ),
        }
    }

    /// Executes one round and advances the global model.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let t = self.round;
        let (k, m) = (self.config.num_clients, self.config.num_byzantine);
        let lr = self.config.schedule.lr_at(t as u64 + 1)?;

        let mut sanitized = 0;
        let mut computed = Vec::with_capacity(k);
        for c in 0..k {
            if c < m && !self.attack.byzantine_clients_train() {
                continue;
            }
            let (u, bad) = UpdateVector::sanitized(self.client_update(c, lr)?);
            sanitized += bad;
            computed.push(u);
        }
        let own_count = computed.len() + m - k;
        let benign = computed.split_off(own_count);
        let own = computed;

        let byzantine = if m > 0 && self.attack.is_omniscient() {
            let server_tau = match self.attack {
                AttackSpec::AdaptiveClipped { .. } => {
                    let norms: Vec<f64> = benign.iter().map(|u| u.norm()).collect();
                    Some(adaptive_tau_with(&self.aggregator.state().norm_history, &norms)?)
                }
                _ => None,
            };
            let ctx = AttackContext {
                benign_updates: &benign,
                own_updates: &own,
                num_clients: k,
                num_byzantine: m,
                server_tau,
                server_linkage: self.aggregator.spec().linkage().unwrap_or_default(),
            };
            let mut rng = stream(self.config.seed, Purpose::Attack, 0, t as u64);
            craft(&self.attack, &ctx, &mut rng)?
                .into_iter()
                .map(|u| {
                    let (u, bad) = UpdateVector::sanitized(u.into_inner());
                    sanitized += bad;
                    u
                })
                .collect()
        } else {
            own
        };

        let mut updates = byzantine;
        updates.extend(benign);
        if sanitized > 0 {
            warn!("round {t}: zeroed {sanitized} non-finite upload coordinates");
        }
        let aggregate = self.aggregator.aggregate(&updates)?;
        let step = match self.config.algorithm {
            Algorithm::FedSgd => -lr,
            Algorithm::FedAvg => 1.0,
        };
        for (w, a) in self.params.iter_mut().zip(aggregate.iter()) {
            *w += step * a;
        }

        let evaluation = if self.config.evaluates(t) {
            Some(self.evaluate()?)
        } else {
            None
        };
        if let Some(e) = evaluation {
            debug!("round {t}: accuracy {:.4} loss {:.4}", e.accuracy, e.loss);
        }
        self.round += 1;
        Ok(RoundRecord {
            round: t,
            learning_rate: lr,
            update_norms: updates.iter().map(|u| l2_norm(u)).collect(),
            updates,
            aggregate,
            evaluation,
            tau: self.aggregator.last_tau(),
            sanitized,
        })
    }

    /// Runs the remaining rounds. `observer` sees every full record; the
    /// returned logs keep only the summary fields.
    pub fn run(&mut self, mut observer: impl FnMut(&RoundRecord)) -> Result<Vec<RoundLog>> {
        let mut logs = Vec::with_capacity(self.config.rounds.saturating_sub(self.round));
        while self.round < self.config.rounds {
            let record = self.run_round()?;
            observer(&record);
            let benign = &record.updates[self.config.num_byzantine..];
            let mean_similarity = if self.config.similarity_rounds.contains(&record.round) && benign.len() >= 2 {
                Some(pairwise_cosine(benign)?.mean_off_diagonal())
            } else {
                None
            };
            logs.push(RoundLog {
                round: record.round,
                learning_rate: record.learning_rate,
                aggregate_norm: record.aggregate.norm(),
                evaluation: record.evaluation,
                mean_similarity,
                tau: record.tau,
                sanitized: record.sanitized,
            });
        }
        Ok(logs)
    }
}

/// Builds a simulation and runs it to completion.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment(
    config: FederationConfig,
    arch: Architecture,
    train: &Dataset,
    test: &Dataset,
    partition: Partition,
    aggregator: &AggregatorSpec,
    attack: AttackSpec,
    observer: impl FnMut(&RoundRecord),
) -> Result<Vec<RoundLog>> {
    Simulation::new(config, arch, train, test, partition, aggregator, attack)?.run(observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{iid_partition, synthetic_blobs};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_examples() {
        let s = Schedule::fedsgd();
        assert_eq!(s.lr_at(1500).unwrap(), 0.1);
        assert_eq!(s.lr_at(2000).unwrap(), 0.1);
        assert_eq!(s.lr_at(3000).unwrap(), 0.05);
        assert_eq!(s.lr_at(5001).unwrap(), 0.025);
        assert_eq!(s.lr_at(10_000).unwrap(), 0.025);
        let s = Schedule::fedavg();
        assert_eq!(s.lr_at(550).unwrap(), 0.025);
        assert_eq!(s.lr_at(200).unwrap(), 0.1);
        assert_eq!(s.lr_at(201).unwrap(), 0.05);
        assert!(Schedule { breakpoints: vec![] }.lr_at(0).is_err());
        assert!(Schedule::new(vec![Breakpoint { until: 5, rate: 0.1 }, Breakpoint { until: 5, rate: 0.1 }]).is_err());
        assert!(Schedule::new(vec![Breakpoint { until: 5, rate: 0.0 }]).is_err());
    }

    fn quad_grad(w: &[f64], _: &[usize]) -> Result<Vec<f64>> {
        Ok(vec![2.0 * (w[0] - 3.0)])
    }

    #[test]
    fn local_sgd_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = local_sgd(&[0.0], 1, 2, 1, 0.1, LocalTraining::Descent, &mut rng, quad_grad).unwrap();
        assert!((d[0] - 1.08).abs() < 1e-12);
        let d = local_sgd(&[0.0], 1, 1, 1, 0.1, LocalTraining::Descent, &mut rng, quad_grad).unwrap();
        assert_eq!(d[0], -0.1 * -6.0);
        let d = local_sgd(&[0.0], 1, 5, 1, 0.0, LocalTraining::Descent, &mut rng, quad_grad).unwrap();
        assert_eq!(d, vec![0.0]);
        let d = local_sgd(&[0.0], 1, 1, 1, 0.1, LocalTraining::Ascent, &mut rng, quad_grad).unwrap();
        assert!((d[0] + 0.6).abs() < 1e-15);
        assert!(local_sgd(&[0.0], 0, 1, 1, 0.1, LocalTraining::Descent, &mut rng, quad_grad).is_err());
        assert!(local_sgd(&[0.0], 1, 0, 1, 0.1, LocalTraining::Descent, &mut rng, quad_grad).is_err());
    }

    #[test]
    fn sampler_epochs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = MinibatchSampler::new(10, 3, &mut rng).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch(&mut rng).to_vec()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(s.next_batch(&mut rng).len(), 3);
        let mut whole = MinibatchSampler::new(4, 8, &mut rng).unwrap();
        assert_eq!(whole.next_batch(&mut rng), &[0, 1, 2, 3]);
    }

    fn blobs_setup(k: usize) -> (Dataset, Dataset, Partition) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let train = synthetic_blobs(2, 100, 2, 6.0, &mut rng).unwrap();
        let test = synthetic_blobs(2, 50, 2, 6.0, &mut rng).unwrap();
        let p = iid_partition(train.len(), k, &mut rng).unwrap();
        (train, test, p)
    }

    fn logistic() -> Architecture {
        Architecture::logistic(2, 2).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = FederationConfig::new(Algorithm::FedAvg, 20, 10, 5);
        assert!(c.validate().unwrap_err().to_string().contains("benign"));
        c.num_byzantine = 9;
        c.validate().unwrap();
        c.local_steps = 0;
        assert!(c.validate().is_err());
        let c = FederationConfig::new(Algorithm::FedSgd, 4, 0, 25);
        let evals: Vec<usize> = (0..25).filter(|&t| c.evaluates(t)).collect();
        assert_eq!(evals, vec![9, 19, 24]);
    }

    #[test]
    fn blobs_converge_and_repeat() {
        let (train, test, p) = blobs_setup(5);
        let mut config = FederationConfig::new(Algorithm::FedAvg, 5, 0, 10);
        config.local_steps = 5;
        config.batch_size = 10;
        let run = || {
            run_experiment(
                config.clone(),
                logistic(),
                &train,
                &test,
                p.clone(),
                &AggregatorSpec::Mean {},
                AttackSpec::none(),
                |_| {},
            )
            .unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.last().unwrap().evaluation.unwrap().accuracy >= 0.95);
    }

    #[test]
    fn byzantine_clients_are_replaced() {
        let (train, test, p) = blobs_setup(5);
        let config = FederationConfig::new(Algorithm::FedSgd, 5, 2, 1);
        let mut sim = Simulation::new(
            config,
            logistic(),
            &train,
            &test,
            p,
            &AggregatorSpec::Mean {},
            AttackSpec::Ipm { epsilon: 100.0 },
        )
        .unwrap();
        let r = sim.run_round().unwrap();
        assert_eq!(r.updates.len(), 5);
        assert_eq!(r.updates[0], r.updates[1]);
        assert!(crate::vector::dot(&r.aggregate, &r.updates[2]) < 0.0);
        assert!(r.evaluation.is_some());
    }

    #[test]
    fn partition_must_match() {
        let (train, test, _) = blobs_setup(5);
        let config = FederationConfig::new(Algorithm::FedSgd, 5, 0, 1);
        let bad = Partition {
            shards: vec![vec![0]; 5],
        };
        let err = Simulation::new(config, logistic(), &train, &test, bad, &AggregatorSpec::Mean {}, AttackSpec::none());
        assert!(err.is_err());
    }
}
