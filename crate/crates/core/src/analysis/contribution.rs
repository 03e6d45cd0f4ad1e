//! How much a client's update contributes to the final aggregate as it goes
//! stale.
//!
//! For each staleness level the run keeps every client available except the
//! stale client, which drops out for the last `level` rounds. In the final
//! round a shadow FedAR state evaluates every coalition: the coalition's
//! stored updates are aggregated with their staleness weights, and
//! `v(S)` is the resulting test accuracy minus the accuracy of the model
//! before aggregation. The grand coalition therefore reproduces the actual
//! FedAR step.

use crate::config::{AvailabilitySpec, ExperimentConfig};
use crate::engine::Simulation;
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::strategies::{FedArState, RoundContext, StrategyKind};

use super::shapley::{shapley, ShapleyReport};

#[derive(Debug, Clone, PartialEq)]
pub struct LevelContribution {
    /// Rounds the stale client missed at the end of the run; 0 is "fresh".
    pub level: usize,
    pub report: ShapleyReport,
    /// Accuracy of the pre-aggregation model in the final round, `v(empty)`.
    pub base_accuracy: f64,
}

pub fn staleness_contribution_experiment(
    base: &ExperimentConfig,
    stale_client: usize,
    levels: &[usize],
) -> Result<Vec<LevelContribution>> {
    levels
        .iter()
        .map(|&level| {
            let mut config = base.clone();
            config.strategy = StrategyKind::Fedar;
            config.availability = AvailabilitySpec::Stale {
                client: stale_client,
                rounds: level,
            };
            // A single evaluation at the end is all this needs.
            config.eval_every = config.rounds;
            level_contribution(&config, level)
        })
        .collect()
}

fn level_contribution(config: &ExperimentConfig, level: usize) -> Result<LevelContribution> {
    let mut sim = Simulation::new(config)?;
    let dim = sim.global().len();
    let mut shadow = FedArState::new(
        config.num_clients,
        dim,
        config.rho,
        config.psi_max,
        config.cutoff,
    );
    let mut last: Option<ParamVector> = None;
    for _ in 0..config.rounds {
        sim.step_observed(|round, global, received| {
            let ctx = RoundContext {
                round,
                lr: config.lr(round),
                local_steps: config.local_steps,
                num_clients: config.num_clients,
            };
            shadow.record(&ctx, global, received)?;
            last = Some(global.clone());
            Ok(())
        })?;
    }
    let pre = last.ok_or_else(|| Error::config("rounds", "must be at least 1"))?;
    let state = shadow;
    let setup = &sim.setup;
    let round = config.rounds;
    let lr = config.lr(round);
    let base_accuracy = setup.model.accuracy(&pre, &setup.test_set)?;

    let report = shapley(config.num_clients, |mask| {
        let members = (0..config.num_clients).filter(|i| mask & (1 << i) != 0);
        let (model, _) = state.step_over(members, &pre, lr, round);
        // Dimensions are fixed by construction, so accuracy cannot fail here.
        setup.model.accuracy(&model, &setup.test_set).expect("consistent dimensions") - base_accuracy
    })?;
    Ok(LevelContribution {
        level,
        report,
        base_accuracy,
    })
}
