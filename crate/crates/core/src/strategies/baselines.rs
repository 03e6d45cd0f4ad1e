//! Comparison strategies: FedAvg and its importance-weighted and subsampled
//! variants, MIFA and FedVARP.

use rand::seq::index;

use super::{
    check_ids, check_lr, normalized_update, Aggregate, Received, RoundContext, Strategy,
    StrategyKind,
};
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::rng::{Purpose, RngStream};

/// Plain average of the received local models; unchanged when none arrived.
pub fn fedavg_step(received: &Received, global: &ParamVector) -> ParamVector {
    if received.is_empty() {
        return global.clone();
    }
    let mut sum = ParamVector::zeros(global.len());
    for local in received.values() {
        sum.axpy(1.0, local);
    }
    sum.scale(1.0 / received.len() as f64);
    sum
}

/// Average of received models weighted by `1/p_i`, normalized over the
/// received set.
pub fn fedavg_is_step(received: &Received, probabilities: &[f64], global: &ParamVector) -> ParamVector {
    if received.is_empty() {
        return global.clone();
    }
    let total: f64 = received.keys().map(|&i| 1.0 / probabilities[i]).sum();
    let mut out = ParamVector::zeros(global.len());
    for (&i, local) in received {
        out.axpy((1.0 / probabilities[i]) / total, local);
    }
    out
}

/// Average over a uniform subsample of at most `cap` received clients.
/// Returns the model and the aggregated client ids.
pub fn fedavg_s_step(
    received: &Received,
    cap: usize,
    stream: RngStream,
    global: &ParamVector,
) -> (ParamVector, Vec<usize>) {
    let ids: Vec<usize> = received.keys().copied().collect();
    let chosen: Vec<usize> = if ids.len() <= cap {
        ids
    } else {
        let mut picked: Vec<usize> = index::sample(&mut stream.rng(), ids.len(), cap)
            .into_iter()
            .map(|k| ids[k])
            .collect();
        picked.sort_unstable();
        picked
    };
    let subset: Received = chosen.iter().map(|&i| (i, received[&i].clone())).collect();
    (fedavg_step(&subset, global), chosen)
}

pub struct FedAvg;

impl Strategy for FedAvg {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Fedavg
    }

    fn aggregate(&mut self, ctx: &RoundContext, global: &ParamVector, received: &Received) -> Result<Aggregate> {
        check_ids(received, ctx)?;
        Ok(Aggregate {
            model: fedavg_step(received, global),
            contributors: received.len(),
        })
    }
}

/// FedAvg-IS. The availability probabilities are simulation ground truth
/// handed to the server.
pub struct FedAvgImportance {
    pub probabilities: Vec<f64>,
}

impl Strategy for FedAvgImportance {
    fn kind(&self) -> StrategyKind {
        StrategyKind::FedavgIs
    }

    fn aggregate(&mut self, ctx: &RoundContext, global: &ParamVector, received: &Received) -> Result<Aggregate> {
        check_ids(received, ctx)?;
        Ok(Aggregate {
            model: fedavg_is_step(received, &self.probabilities, global),
            contributors: received.len(),
        })
    }
}

/// FedAvg(S): at most `cap` of the received clients join each round.
pub struct FedAvgSubsample {
    pub cap: usize,
    pub seed: u64,
}

impl Strategy for FedAvgSubsample {
    fn kind(&self) -> StrategyKind {
        StrategyKind::FedavgS
    }

    fn aggregate(&mut self, ctx: &RoundContext, global: &ParamVector, received: &Received) -> Result<Aggregate> {
        check_ids(received, ctx)?;
        let stream = RngStream::new(self.seed, Purpose::Subsample).round(ctx.round);
        let (model, chosen) = fedavg_s_step(received, self.cap, stream, global);
        Ok(Aggregate {
            model,
            contributors: chosen.len(),
        })
    }
}

/// MIFA: every client's latest normalized update, equally weighted and
/// divided by N. All clients must respond in round 1.
pub struct Mifa {
    pub updates: Vec<Option<ParamVector>>,
}

impl Mifa {
    pub fn new(num_clients: usize) -> Self {
        Mifa {
            updates: vec![None; num_clients],
        }
    }
}

impl Strategy for Mifa {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Mifa
    }

    fn aggregate(&mut self, ctx: &RoundContext, global: &ParamVector, received: &Received) -> Result<Aggregate> {
        check_ids(received, ctx)?;
        if !received.is_empty() {
            check_lr(ctx)?;
        }
        for (&i, local) in received {
            self.updates[i] = Some(normalized_update(global, local, ctx.lr));
        }
        if let Some(missing) = self.updates.iter().position(Option::is_none) {
            return Err(Error::Protocol {
                round: ctx.round,
                message: format!("MIFA has no update from client {missing}; every client must respond in round 1"),
            });
        }
        let mut sum = ParamVector::zeros(global.len());
        for g in self.updates.iter().flatten() {
            sum.axpy(1.0, g);
        }
        let mut model = global.clone();
        model.axpy(-ctx.lr / self.updates.len() as f64, &sum);
        Ok(Aggregate {
            model,
            contributors: self.updates.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedVarpState {
    /// Stored update per client, zero until the client first reports.
    pub stored: Vec<ParamVector>,
    pub reported: Vec<bool>,
}

/// FedVARP: stored-update average plus a variance-reduction correction from
/// the clients that reported this round.
pub struct FedVarp {
    pub state: FedVarpState,
    pub server_lr: f64,
}

impl FedVarp {
    pub fn new(num_clients: usize, dim: usize, server_lr: f64) -> Self {
        FedVarp {
            state: FedVarpState {
                stored: vec![ParamVector::zeros(dim); num_clients],
                reported: vec![false; num_clients],
            },
            server_lr,
        }
    }

    /// `v = mean_i y_i + mean_{received} (delta_i - y_i)`.
    pub fn direction(&self, deltas: &[(usize, ParamVector)], dim: usize) -> ParamVector {
        let n = self.state.stored.len() as f64;
        let mut v = ParamVector::zeros(dim);
        for y in &self.state.stored {
            v.axpy(1.0 / n, y);
        }
        if !deltas.is_empty() {
            let m = deltas.len() as f64;
            for (i, delta) in deltas {
                v.axpy(1.0 / m, &delta.sub(&self.state.stored[*i]));
            }
        }
        v
    }
}

impl Strategy for FedVarp {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Fedvarp
    }

    fn aggregate(&mut self, ctx: &RoundContext, global: &ParamVector, received: &Received) -> Result<Aggregate> {
        check_ids(received, ctx)?;
        if !received.is_empty() {
            check_lr(ctx)?;
        }
        let deltas: Vec<(usize, ParamVector)> = received
            .iter()
            .map(|(&i, local)| (i, normalized_update(global, local, ctx.lr)))
            .collect();
        let v = self.direction(&deltas, global.len());
        let mut model = global.clone();
        model.axpy(-self.server_lr * ctx.lr, &v);
        for (i, delta) in deltas {
            self.state.stored[i] = delta;
            self.state.reported[i] = true;
        }
        let contributors = self.state.reported.iter().filter(|&&r| r).count();
        Ok(Aggregate {
            model,
            contributors,
        })
    }
}
