//! Round orchestration: availability draw, parallel local training,
//! aggregation and metric recording.
//!
//! Every random choice comes from a keyed [`RngStream`], so results do not
//! depend on the order or thread in which clients are trained.

use std::time::Instant;

use rayon::prelude::*;

use crate::availability::{make_stale_trace, load_trace_csv, sample_probabilities, AvailabilityModel};
use crate::config::{AvailabilitySpec, DatasetSpec, ExperimentConfig};
use crate::data::{self, Examples, Owner, Shard};
use crate::error::{Error, Result};
use crate::model::{local_sgd_corrected, ModelSpec};
use crate::params::ParamVector;
use crate::rng::{Purpose, RngStream};
use crate::strategies::{
    Aggregate, FedAr, FedAvg, FedAvgImportance, FedAvgSubsample, FedVarp, Mifa, Received,
    RoundContext, Scaffold, Strategy, StrategyKind,
};

/// Metrics for one evaluated round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub global_train_loss: f64,
    pub global_test_accuracy: f64,
    pub participating: Vec<usize>,
    /// Clients that entered the aggregate (`N_t` for FedAR).
    pub contributors: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct ClientData {
    pub train: Shard,
    pub test: Shard,
}

/// Everything fixed before round 1: data, partition, availability, model.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: ExperimentConfig,
    pub model: ModelSpec,
    pub clients: Vec<ClientData>,
    /// Union of client training shards, for the global training loss.
    pub train_union: Shard,
    pub test_set: Shard,
    pub availability: AvailabilityModel,
    pub probabilities: Vec<f64>,
}

fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<(Shard, Shard)> {
    match spec {
        DatasetSpec::Synthetic {
            num_classes,
            per_class,
            input_dim,
            separation,
            test_fraction,
        } => {
            let mut rng = RngStream::new(seed, Purpose::Synthesis).rng();
            let all = data::synth_classes(*num_classes, *per_class, *input_dim, *separation, &mut rng)?;
            let mut rng = RngStream::new(seed, Purpose::GlobalSplit).rng();
            data::train_test_split(&all, *test_fraction, &mut rng)
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Ok((
            data::load_idx(train_images, train_labels)?,
            data::load_idx(test_images, test_labels)?,
        )),
        DatasetSpec::Csv {
            train,
            test,
            test_fraction,
        } => {
            let train_set = data::load_csv(train)?;
            match test {
                Some(path) => Ok((train_set, data::load_csv(path)?)),
                None => {
                    let mut rng = RngStream::new(seed, Purpose::GlobalSplit).rng();
                    data::train_test_split(&train_set, *test_fraction, &mut rng)
                }
            }
        }
    }
}

impl Setup {
    pub fn new(config: &ExperimentConfig) -> Result<Setup> {
        config.validate()?;
        let seed = config.seed;
        let (train, test) = load_dataset(&config.dataset, seed)?;
        if train.input_dim() != test.input_dim() {
            return Err(Error::Data(format!(
                "train and test widths differ ({} vs {})",
                train.input_dim(),
                test.input_dim()
            )));
        }
        let num_classes = match config.dataset {
            DatasetSpec::Synthetic { num_classes, .. } => num_classes,
            _ => train.label_span().max(test.label_span()).max(2),
        };
        let model = ModelSpec {
            kind: config.model.kind,
            input_dim: train.input_dim(),
            num_classes,
            hidden_dim: config.model.hidden_dim,
            weight_decay: config.model.weight_decay,
        };
        model.validate()?;

        let plan = data::shard_two_class(
            &train,
            config.num_clients,
            config.classes_per_client,
            &mut RngStream::new(seed, Purpose::Partition).rng(),
        )?;
        let clients = plan
            .shards(&train)
            .into_iter()
            .enumerate()
            .map(|(c, shard)| {
                let mut rng = RngStream::new(seed, Purpose::ClientSplit).client(c).rng();
                let (train, test) = data::train_test_split(&shard, config.client_test_fraction, &mut rng)
                    .map_err(|e| Error::Data(format!("client {c}: {e}")))?;
                Ok(ClientData {
                    train: train.with_owner(Owner::Client(c)),
                    test: test.with_owner(Owner::Client(c)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let train_union = Shard::concat(clients.iter().map(|c| &c.train))?;

        let probabilities = sample_probabilities(
            config.num_clients,
            config.p_min,
            &mut RngStream::new(seed, Purpose::Probabilities).rng(),
        )?;
        let availability = match &config.availability {
            AvailabilitySpec::Bernoulli => AvailabilityModel::bernoulli(probabilities.clone(), seed),
            AvailabilitySpec::Trace { path } => load_trace_csv(path)?,
            AvailabilitySpec::Stale { client, rounds } => {
                make_stale_trace(config.num_clients, config.rounds, *client, *rounds)?
            }
        };
        availability.validate(config.num_clients, config.rounds)?;
        let probabilities = match config.availability {
            AvailabilitySpec::Bernoulli => probabilities,
            _ => availability.probabilities(),
        };

        Ok(Setup {
            config: config.clone(),
            model,
            clients,
            train_union,
            test_set: test,
            availability,
            probabilities,
        })
    }

    pub fn build_strategy(&self) -> Box<dyn Strategy> {
        let c = &self.config;
        let (n, dim) = (c.num_clients, self.model.num_params());
        match c.strategy {
            StrategyKind::Fedar => Box::new(FedAr::new(n, dim, c.rho, c.psi_max, c.cutoff)),
            StrategyKind::Fedavg => Box::new(FedAvg),
            StrategyKind::FedavgIs => Box::new(FedAvgImportance {
                probabilities: self.probabilities.iter().map(|p| p.max(f64::MIN_POSITIVE)).collect(),
            }),
            StrategyKind::FedavgS => Box::new(FedAvgSubsample {
                cap: c.effective_subsample_cap(),
                seed: c.seed,
            }),
            StrategyKind::Mifa => Box::new(Mifa::new(n)),
            StrategyKind::Fedvarp => Box::new(FedVarp::new(n, dim, c.server_lr)),
            StrategyKind::Scaffold => Box::new(Scaffold::new(n, dim, c.server_lr)),
        }
    }

    pub fn initial_model(&self) -> ParamVector {
        self.model.init(&mut RngStream::new(self.config.seed, Purpose::Init).rng())
    }
}

/// A running experiment.
pub struct Simulation {
    pub setup: Setup,
    strategy: Box<dyn Strategy>,
    global: ParamVector,
    round: usize,
    warned_mifa: bool,
}

impl Simulation {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self::from_setup(Setup::new(config)?))
    }

    pub fn from_setup(setup: Setup) -> Self {
        let strategy = setup.build_strategy();
        let global = setup.initial_model();
        Simulation {
            setup,
            strategy,
            global,
            round: 0,
            warned_mifa: false,
        }
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn context(&self, round: usize) -> RoundContext {
        let c = &self.setup.config;
        RoundContext {
            round,
            lr: c.lr(round),
            local_steps: c.local_steps,
            num_clients: c.num_clients,
        }
    }

    /// Clients responding in `round`. MIFA needs everyone in round 1, so that
    /// round is forced to full participation for it.
    pub fn participants(&mut self, round: usize) -> Result<Vec<usize>> {
        if round == 1 && self.strategy.kind() == StrategyKind::Mifa {
            if !self.warned_mifa {
                log::warn!("MIFA requires every client in round 1; forcing full participation");
                self.warned_mifa = true;
            }
            return Ok((0..self.setup.config.num_clients).collect());
        }
        self.setup.availability.available_set(round)
    }

    /// Local training for `participants`, run in parallel. Each client uses
    /// the stream keyed by `(seed, client, round)`.
    pub fn local_updates(&self, round: usize, participants: &[usize]) -> Result<Received> {
        let c = &self.setup.config;
        let lr = c.lr(round);
        let corrections: Vec<Option<ParamVector>> = participants
            .iter()
            .map(|&i| self.strategy.local_correction(i))
            .collect();
        let (model, clients, global) = (&self.setup.model, &self.setup.clients, &self.global);
        let models = participants
            .par_iter()
            .zip(corrections.par_iter())
            .map(|(&i, correction)| {
                let mut rng = RngStream::new(c.seed, Purpose::LocalTraining)
                    .client(i)
                    .round(round)
                    .rng();
                local_sgd_corrected(
                    model,
                    global,
                    &clients[i].train,
                    c.local_steps,
                    lr,
                    c.batch_size,
                    correction.as_ref(),
                    &mut rng,
                )
                .map(|w| (i, w))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(models.into_iter().collect())
    }

    /// Hand `received` to the strategy and adopt the new global model.
    pub fn aggregate(&mut self, round: usize, received: &Received) -> Result<Aggregate> {
        let ctx = self.context(round);
        let out = self
            .strategy
            .aggregate(&ctx, &self.global, received)
            .map_err(|e| e.in_round(round))?;
        if out.model.len() != self.global.len() || !out.model.is_finite() {
            return Err(Error::Protocol {
                round,
                message: format!("{} produced a non-finite or resized model", self.strategy.kind()),
            });
        }
        self.global = out.model.clone();
        Ok(out)
    }

    pub fn global_train_loss(&self) -> Result<f64> {
        self.setup.model.forward_loss(&self.global, &self.setup.train_union)
    }

    pub fn global_test_accuracy(&self) -> Result<f64> {
        self.setup.model.accuracy(&self.global, &self.setup.test_set)
    }

    fn should_evaluate(&self, round: usize) -> bool {
        let c = &self.setup.config;
        round.is_multiple_of(c.eval_every) || round == c.rounds
    }

    /// Run the next round. Returns a record when the round is on the
    /// evaluation cadence.
    pub fn step(&mut self) -> Result<Option<RoundRecord>> {
        self.step_observed(|_, _, _| Ok(()))
    }

    /// Like [`Simulation::step`], but `observe` sees the round index, the
    /// pre-aggregation global model and the received local models before the
    /// strategy does.
    pub fn step_observed<F>(&mut self, mut observe: F) -> Result<Option<RoundRecord>>
    where
        F: FnMut(usize, &ParamVector, &Received) -> Result<()>,
    {
        let round = self.round + 1;
        if round > self.setup.config.rounds {
            return Err(Error::config("rounds", format!("round {round} exceeds T = {}", self.setup.config.rounds)));
        }
        let start = Instant::now();
        let participants = self.participants(round)?;
        let received = self.local_updates(round, &participants)?;
        observe(round, &self.global, &received)?;
        let out = self.aggregate(round, &received)?;
        self.round = round;
        if !self.should_evaluate(round) {
            return Ok(None);
        }
        Ok(Some(RoundRecord {
            round,
            global_train_loss: self.global_train_loss()?,
            global_test_accuracy: self.global_test_accuracy()?,
            participating: participants,
            contributors: out.contributors,
            wall_time: start.elapsed().as_secs_f64(),
        }))
    }

    /// Accuracy of the current global model on every client's test split.
    pub fn per_client_accuracy(&self) -> Result<Vec<f64>> {
        self.setup
            .clients
            .iter()
            .map(|c| self.setup.model.accuracy(&self.global, &c.test))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub records: Vec<RoundRecord>,
    pub final_model: ParamVector,
    pub per_client_accuracy: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Rounds in which each client responded.
    pub participation: Vec<usize>,
}

impl ExperimentResult {
    pub fn final_record(&self) -> &RoundRecord {
        self.records.last().expect("at least one evaluated round")
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut sim = Simulation::new(config)?;
    let mut records = Vec::new();
    let mut participation = vec![0usize; config.num_clients];
    for _ in 0..config.rounds {
        let round = sim.round() + 1;
        if let Some(record) = sim.step()? {
            records.push(record);
        }
        // Count from the availability model so unevaluated rounds are included.
        for i in sim.participants(round)? {
            participation[i] += 1;
        }
    }
    Ok(ExperimentResult {
        per_client_accuracy: sim.per_client_accuracy()?,
        final_model: sim.global.clone(),
        probabilities: sim.setup.probabilities.clone(),
        records,
        participation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config(strategy: StrategyKind) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(
            strategy,
            3,
            5,
            DatasetSpec::Synthetic {
                num_classes: 3,
                per_class: 40,
                input_dim: 4,
                separation: 3.0,
                test_fraction: 0.2,
            },
        );
        c.batch_size = 8;
        c.p_min = 0.3;
        c.seed = 42;
        c
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let c = small_config(StrategyKind::Fedar);
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        assert_eq!(a.final_model.to_le_bytes(), b.final_model.to_le_bytes());
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.global_train_loss.to_bits(), y.global_train_loss.to_bits());
            assert_eq!(x.participating, y.participating);
            assert_eq!(x.contributors, y.contributors);
        }
    }

    #[test]
    fn zero_lr_keeps_model_constant() {
        let mut c = small_config(StrategyKind::Fedavg);
        c.eta0 = 0.0;
        let r = run_experiment(&c).unwrap();
        let first = r.records[0].global_train_loss;
        assert!(r.records.iter().all(|rec| rec.global_train_loss == first));
        assert!(r.final_model.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_client_single_round_is_local_sgd() {
        let mut c = small_config(StrategyKind::Fedar);
        c.num_clients = 1;
        c.rounds = 1;
        c.p_min = 1.0;
        let r = run_experiment(&c).unwrap();
        let setup = Setup::new(&c).unwrap();
        let mut rng = RngStream::new(c.seed, Purpose::LocalTraining).client(0).round(1).rng();
        let local = crate::model::local_sgd(
            &setup.model,
            &setup.initial_model(),
            &setup.clients[0].train,
            c.local_steps,
            c.eta0,
            c.batch_size,
            &mut rng,
        )
        .unwrap();
        assert!(r.final_model.max_abs_diff(&local) < 1e-14);
    }

    #[test]
    fn eval_cadence() {
        let mut c = small_config(StrategyKind::Fedavg);
        c.rounds = 10;
        c.eval_every = 3;
        let r = run_experiment(&c).unwrap();
        let rounds: Vec<usize> = r.records.iter().map(|x| x.round).collect();
        assert_eq!(rounds, vec![3, 6, 9, 10]);
    }

    #[test]
    fn different_seeds_change_participation() {
        let a = run_experiment(&small_config(StrategyKind::Fedar)).unwrap();
        let mut c = small_config(StrategyKind::Fedar);
        c.seed = 43;
        let b = run_experiment(&c).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        let pa: Vec<_> = a.records.iter().map(|r| r.participating.clone()).collect();
        let pb: Vec<_> = b.records.iter().map(|r| r.participating.clone()).collect();
        assert_ne!(pa, pb);
    }

    #[test]
    fn mifa_round_one_is_forced() {
        let mut c = small_config(StrategyKind::Mifa);
        c.p_min = 0.05;
        let r = run_experiment(&c).unwrap();
        assert_eq!(r.records[0].participating, vec![0, 1, 2]);
    }

    #[test]
    fn every_strategy_runs_and_stays_finite() {
        for kind in StrategyKind::ALL {
            let mut c = small_config(kind);
            c.model.kind = crate::model::ModelKind::Mlp;
            c.model.hidden_dim = 5;
            let r = run_experiment(&c).unwrap();
            assert!(r.final_model.is_finite(), "{kind}");
            assert_eq!(r.per_client_accuracy.len(), 3);
        }
    }

    #[test]
    fn local_updates_ignore_participant_order() {
        let c = small_config(StrategyKind::Fedar);
        let sim = Simulation::new(&c).unwrap();
        let a = sim.local_updates(1, &[0, 1, 2]).unwrap();
        let b = sim.local_updates(1, &[2, 0, 1]).unwrap();
        assert_eq!(a, b);
        let single = sim.local_updates(1, &[1]).unwrap();
        assert_eq!(single[&1], a[&1]);
    }

    #[test]
    fn headline_setting_runs() {
        let mut c = ExperimentConfig::new(
            StrategyKind::Fedar,
            100,
            3,
            DatasetSpec::Synthetic {
                num_classes: 10,
                per_class: 100,
                input_dim: 16,
                separation: 4.0,
                test_fraction: 0.2,
            },
        );
        c.seed = 1;
        let r = run_experiment(&c).unwrap();
        assert_eq!(r.per_client_accuracy.len(), 100);
        assert_eq!((c.local_steps, c.batch_size, c.eta0, c.rho), (5, 64, 0.1, 0.1));
    }
}
