//! Server-side aggregation strategies behind one interface.
//!
//! Each round the engine hands a strategy the current global model and the
//! local models `w^i_{t,K}` of the clients whose updates arrived. The
//! strategy returns the next global model and how many clients contributed.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;

mod baselines;
mod fedar;
mod scaffold;

pub use baselines::{
    fedavg_is_step, fedavg_s_step, fedavg_step, FedAvg, FedAvgImportance, FedAvgSubsample, FedVarp,
    FedVarpState, Mifa,
};
pub use fedar::{fedar_weight, g_eval, CutoffSchedule, FedAr, FedArState};
pub use scaffold::{Scaffold, ScaffoldState};

/// Local models received this round, keyed by client id.
pub type Received = BTreeMap<usize, ParamVector>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundContext {
    /// 1-based round index.
    pub round: usize,
    /// Learning rate used by clients this round.
    pub lr: f64,
    pub local_steps: usize,
    pub num_clients: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub model: ParamVector,
    /// Clients whose updates entered the new model (`N_t` for FedAR).
    pub contributors: usize,
}

pub trait Strategy: Send {
    fn kind(&self) -> StrategyKind;

    /// Shift added to every local stochastic gradient of `client`.
    fn local_correction(&self, _client: usize) -> Option<ParamVector> {
        None
    }

    fn aggregate(
        &mut self,
        ctx: &RoundContext,
        global: &ParamVector,
        received: &Received,
    ) -> Result<Aggregate>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Fedar,
    Fedavg,
    FedavgIs,
    FedavgS,
    Mifa,
    Fedvarp,
    Scaffold,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::Fedar,
        StrategyKind::Fedavg,
        StrategyKind::FedavgIs,
        StrategyKind::FedavgS,
        StrategyKind::Mifa,
        StrategyKind::Fedvarp,
        StrategyKind::Scaffold,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Fedar => "fedar",
            StrategyKind::Fedavg => "fedavg",
            StrategyKind::FedavgIs => "fedavg_is",
            StrategyKind::FedavgS => "fedavg_s",
            StrategyKind::Mifa => "mifa",
            StrategyKind::Fedvarp => "fedvarp",
            StrategyKind::Scaffold => "scaffold",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::config(
                    "strategy",
                    format!(
                        "unknown strategy `{s}`; expected one of {}",
                        StrategyKind::ALL.map(|k| k.as_str()).join(", ")
                    ),
                )
            })
    }
}

/// `(1/lr) * (global - local)`, the normalized update a client reports.
pub fn normalized_update(global: &ParamVector, local: &ParamVector, lr: f64) -> ParamVector {
    let mut g = global.sub(local);
    g.scale(1.0 / lr);
    g
}

pub(crate) fn check_ids(received: &Received, ctx: &RoundContext) -> Result<()> {
    if let Some(&id) = received.keys().find(|&&id| id >= ctx.num_clients) {
        return Err(Error::Protocol {
            round: ctx.round,
            message: format!("update from unknown client {id} (N = {})", ctx.num_clients),
        });
    }
    Ok(())
}

pub(crate) fn check_lr(ctx: &RoundContext) -> Result<()> {
    if ctx.lr > 0.0 && ctx.lr.is_finite() {
        Ok(())
    } else {
        Err(Error::Protocol {
            round: ctx.round,
            message: format!("learning rate {} must be positive to normalize updates", ctx.lr),
        })
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn ctx(round: usize, lr: f64, num_clients: usize) -> RoundContext {
        RoundContext {
            round,
            lr,
            local_steps: 5,
            num_clients,
        }
    }

    pub fn pv(values: &[f64]) -> ParamVector {
        ParamVector::from_vec(values.to_vec())
    }

    pub fn received(items: &[(usize, &[f64])]) -> Received {
        items.iter().map(|(id, v)| (*id, pv(v))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for kind in StrategyKind::ALL {
            assert_eq!(kind.as_str().parse::<StrategyKind>().unwrap(), kind);
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(json, format!("\"{}\"", kind.as_str()));
        }
        assert!(matches!("fedprox".parse::<StrategyKind>(), Err(Error::Config { .. })));
    }
}
