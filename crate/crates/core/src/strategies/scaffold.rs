//! Scaffold with option-II control variates.
//!
//! Local steps use `grad - c_i + c`; the engine asks for that shift through
//! [`Strategy::local_correction`]. After training, a participant's variate
//! becomes `c_i - c + (w_t - w_i) / (K * lr)`. The server moves the model by
//! the mean participant delta and the global variate by the sum of variate
//! changes over N.

use super::{check_ids, check_lr, Aggregate, Received, RoundContext, Strategy, StrategyKind};
use crate::error::Result;
use crate::params::ParamVector;

#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldState {
    pub c_global: ParamVector,
    pub c_client: Vec<ParamVector>,
}

impl ScaffoldState {
    pub fn new(num_clients: usize, dim: usize) -> Self {
        ScaffoldState {
            c_global: ParamVector::zeros(dim),
            c_client: vec![ParamVector::zeros(dim); num_clients],
        }
    }

    /// Fold this round's participants into the state and return the new
    /// global model.
    pub fn update(
        &mut self,
        ctx: &RoundContext,
        global: &ParamVector,
        received: &Received,
        server_lr: f64,
    ) -> ParamVector {
        if received.is_empty() {
            return global.clone();
        }
        let n = self.c_client.len() as f64;
        let scale = 1.0 / (ctx.local_steps as f64 * ctx.lr);
        let mut model_delta = ParamVector::zeros(global.len());
        let mut variate_delta = ParamVector::zeros(global.len());
        for (&i, local) in received {
            let mut c_new = self.c_client[i].sub(&self.c_global);
            c_new.axpy(scale, &global.sub(local));
            variate_delta.axpy(1.0 / n, &c_new.sub(&self.c_client[i]));
            self.c_client[i] = c_new;
            model_delta.axpy(1.0 / received.len() as f64, &local.sub(global));
        }
        self.c_global.axpy(1.0, &variate_delta);
        let mut model = global.clone();
        model.axpy(server_lr, &model_delta);
        model
    }
}

pub struct Scaffold {
    pub state: ScaffoldState,
    pub server_lr: f64,
}

impl Scaffold {
    pub fn new(num_clients: usize, dim: usize, server_lr: f64) -> Self {
        Scaffold {
            state: ScaffoldState::new(num_clients, dim),
            server_lr,
        }
    }
}

impl Strategy for Scaffold {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Scaffold
    }

    fn local_correction(&self, client: usize) -> Option<ParamVector> {
        Some(self.state.c_global.sub(&self.state.c_client[client]))
    }

    fn aggregate(&mut self, ctx: &RoundContext, global: &ParamVector, received: &Received) -> Result<Aggregate> {
        check_ids(received, ctx)?;
        if !received.is_empty() {
            check_lr(ctx)?;
        }
        let model = self.state.update(ctx, global, received, self.server_lr);
        Ok(Aggregate {
            model,
            contributors: received.len(),
        })
    }
}
