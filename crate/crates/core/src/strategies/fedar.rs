//! FedAR: stale-update approximation plus staleness-weighted rectification.
//!
//! The server keeps the most recent normalized update `G_i` of every client
//! and the number of rounds `tau_i` since it arrived. Each round every client
//! seen so far contributes `psi_i * G_i`, where `psi_i` grows with staleness
//! as `(tau_i + 1)^rho` up to `psi_max` and drops to zero once `tau_i`
//! reaches the cutoff `g(t)`. The sum is divided by the number of clients
//! with nonzero weight.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{
    check_ids, check_lr, normalized_update, Aggregate, Received, RoundContext, Strategy,
    StrategyKind,
};
use crate::error::Result;
use crate::params::ParamVector;

/// Staleness cutoff `g(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CutoffSchedule {
    /// `t0 + t / b`
    Convex { t0: f64, b: f64 },
    /// `c * max(sqrt(t), sqrt(t0))`
    Nonconvex { c: f64, t0: f64 },
    Infinite,
}

impl Default for CutoffSchedule {
    fn default() -> Self {
        CutoffSchedule::Convex { t0: 10.0, b: 4.0 }
    }
}

impl CutoffSchedule {
    pub fn nonconvex_default() -> Self {
        CutoffSchedule::Nonconvex { c: 5.0, t0: 10.0 }
    }

    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        match *self {
            CutoffSchedule::Convex { t0, b } => {
                if !(t0 > 0.0 && t0.is_finite()) {
                    return Err(("cutoff.t0", format!("{t0} must be positive")));
                }
                if !(b > 2.0 && b.is_finite()) {
                    return Err(("cutoff.b", format!("{b} must exceed 2")));
                }
            }
            CutoffSchedule::Nonconvex { c, t0 } => {
                if !(c > 0.0 && c.is_finite()) {
                    return Err(("cutoff.c", format!("{c} must be positive")));
                }
                if !(t0 > 0.0 && t0.is_finite()) {
                    return Err(("cutoff.t0", format!("{t0} must be positive")));
                }
            }
            CutoffSchedule::Infinite => {}
        }
        Ok(())
    }
}

/// Evaluate the cutoff at `round` (1-based).
pub fn g_eval(g: &CutoffSchedule, round: usize) -> f64 {
    let t = round as f64;
    match *g {
        CutoffSchedule::Convex { t0, b } => t0 + t / b,
        CutoffSchedule::Nonconvex { c, t0 } => c * t.sqrt().max(t0.sqrt()),
        CutoffSchedule::Infinite => f64::INFINITY,
    }
}

/// Staleness weight: zero at or beyond the cutoff, otherwise
/// `min((tau + 1)^rho, psi_max)`.
pub fn fedar_weight(tau: usize, round: usize, rho: f64, psi_max: f64, g: &CutoffSchedule) -> f64 {
    if tau as f64 >= g_eval(g, round) {
        0.0
    } else {
        ((tau + 1) as f64).powf(rho).min(psi_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedArState {
    /// Latest normalized update per client; zero until the first arrival.
    pub updates: Vec<ParamVector>,
    /// Rounds since each client's update last arrived.
    pub tau: Vec<usize>,
    /// Clients ever observed. Membership is permanent.
    pub seen: BTreeSet<usize>,
    pub rho: f64,
    pub psi_max: f64,
    pub cutoff: CutoffSchedule,
}

impl FedArState {
    pub fn new(num_clients: usize, dim: usize, rho: f64, psi_max: f64, cutoff: CutoffSchedule) -> Self {
        FedArState {
            updates: vec![ParamVector::zeros(dim); num_clients],
            tau: vec![0; num_clients],
            seen: BTreeSet::new(),
            rho,
            psi_max,
            cutoff,
        }
    }

    /// Store arriving updates and advance the staleness counters.
    pub fn record(&mut self, ctx: &RoundContext, global: &ParamVector, received: &Received) -> Result<()> {
        check_ids(received, ctx)?;
        if !received.is_empty() {
            check_lr(ctx)?;
        }
        for client in 0..self.tau.len() {
            match received.get(&client) {
                Some(local) => {
                    self.updates[client] = normalized_update(global, local, ctx.lr);
                    self.tau[client] = 0;
                    self.seen.insert(client);
                }
                None => self.tau[client] += 1,
            }
        }
        Ok(())
    }

    pub fn weight(&self, client: usize, round: usize) -> f64 {
        fedar_weight(self.tau[client], round, self.rho, self.psi_max, &self.cutoff)
    }

    /// Apply the weighted update over the given members of the observed set.
    /// Returns the new model and the number of contributing clients; with no
    /// contributors the model is returned unchanged.
    pub fn step_over(
        &self,
        members: impl IntoIterator<Item = usize>,
        global: &ParamVector,
        lr: f64,
        round: usize,
    ) -> (ParamVector, usize) {
        let mut sum = ParamVector::zeros(global.len());
        let mut contributors = 0usize;
        for client in members {
            if !self.seen.contains(&client) {
                continue;
            }
            let psi = self.weight(client, round);
            if psi == 0.0 {
                continue;
            }
            sum.axpy(psi, &self.updates[client]);
            contributors += 1;
        }
        let mut next = global.clone();
        if contributors == 0 {
            log::debug!("round {round}: no contributing clients, global model unchanged");
        } else {
            next.axpy(-lr / contributors as f64, &sum);
        }
        (next, contributors)
    }

    pub fn global_step(&self, global: &ParamVector, lr: f64, round: usize) -> (ParamVector, usize) {
        self.step_over(self.seen.iter().copied(), global, lr, round)
    }
}

pub struct FedAr {
    pub state: FedArState,
}

impl FedAr {
    pub fn new(num_clients: usize, dim: usize, rho: f64, psi_max: f64, cutoff: CutoffSchedule) -> Self {
        if psi_max > 2.0 {
            log::warn!("psi_max = {psi_max} exceeds 2; the convergence guarantee no longer applies");
        }
        FedAr {
            state: FedArState::new(num_clients, dim, rho, psi_max, cutoff),
        }
    }
}

impl Strategy for FedAr {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Fedar
    }

    fn aggregate(&mut self, ctx: &RoundContext, global: &ParamVector, received: &Received) -> Result<Aggregate> {
        self.state.record(ctx, global, received)?;
        let (model, contributors) = self.state.global_step(global, ctx.lr, ctx.round);
        Ok(Aggregate {
            model,
            contributors,
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::super::test_support::*;
    use super::super::Strategy as _;
    use super::*;
    use crate::error::Error;

    const CONVEX: CutoffSchedule = CutoffSchedule::Convex { t0: 10.0, b: 4.0 };

    #[test]
    fn g_examples() {
        assert_eq!(g_eval(&CONVEX, 20), 15.0);
        assert_eq!(g_eval(&CutoffSchedule::Nonconvex { c: 2.0, t0: 4.0 }, 1), 4.0);
        assert_eq!(g_eval(&CutoffSchedule::Infinite, 1_000_000), f64::INFINITY);
    }

    #[test]
    fn weight_examples() {
        assert_eq!(fedar_weight(0, 1, 0.1, 2.0, &CONVEX), 1.0);
        assert_eq!(fedar_weight(0, 50, 1.0, 2.0, &CutoffSchedule::Infinite), 1.0);
        assert!((fedar_weight(3, 1, 0.1, 2.0, &CONVEX) - 1.148_698_354_997_035).abs() < 1e-15);
        assert_eq!(fedar_weight(1000, 1, 1.0, 2.0, &CutoffSchedule::Infinite), 2.0);
        // g(1) = 10.25: tau = 10 passes, tau = 11 is cut.
        assert!(fedar_weight(10, 1, 0.1, 2.0, &CONVEX) > 0.0);
        assert_eq!(fedar_weight(11, 1, 0.1, 2.0, &CONVEX), 0.0);
        // Exactly at the cutoff counts as cut.
        assert_eq!(fedar_weight(15, 20, 0.1, 2.0, &CONVEX), 0.0);
    }

    #[test]
    fn record_replaces_and_counts() {
        let mut s = FedArState::new(3, 2, 0.1, 2.0, CONVEX);
        let global = pv(&[1.0, 2.0]);
        s.record(&ctx(1, 0.5, 3), &global, &received(&[(0, &[1.0, 2.0]), (1, &[0.0, 1.0])]))
            .unwrap();
        assert_eq!(s.updates[0], pv(&[0.0, 0.0]));
        assert_eq!(s.updates[1], pv(&[2.0, 2.0]));
        assert_eq!(s.tau, vec![0, 0, 1]);
        assert_eq!(s.seen.iter().copied().collect::<Vec<_>>(), vec![0, 1]);

        let before = s.updates[1].clone();
        s.record(&ctx(2, 0.5, 3), &global, &received(&[(2, &[1.0, 1.0])])).unwrap();
        assert_eq!(s.updates[1].to_le_bytes(), before.to_le_bytes());
        assert_eq!(s.tau, vec![1, 1, 0]);
        assert_eq!(s.seen.len(), 3);
    }

    #[test]
    fn record_rejects_unknown_client() {
        let mut s = FedArState::new(2, 1, 0.1, 2.0, CONVEX);
        let err = s
            .record(&ctx(4, 0.1, 2), &pv(&[0.0]), &received(&[(2, &[1.0])]))
            .unwrap_err();
        assert!(matches!(err, Error::Protocol { round: 4, .. }));
    }

    #[test]
    fn full_participation_is_plain_average() {
        let mut f = FedAr::new(3, 2, 0.1, 2.0, CONVEX);
        let global = pv(&[0.3, -0.2]);
        let locals = received(&[(0, &[1.0, 2.0]), (1, &[0.5, 0.0]), (2, &[-1.0, 4.0])]);
        let out = f.aggregate(&ctx(1, 0.1, 3), &global, &locals).unwrap();
        assert_eq!(out.contributors, 3);
        assert!(out.model.max_abs_diff(&pv(&[0.5 / 3.0, 2.0])) < 1e-14);
    }

    #[test]
    fn single_seen_client_gets_its_model() {
        let mut f = FedAr::new(4, 2, 0.1, 2.0, CONVEX);
        let out = f
            .aggregate(&ctx(1, 0.1, 4), &pv(&[0.0, 0.0]), &received(&[(2, &[0.7, -0.3])]))
            .unwrap();
        assert_eq!(out.contributors, 1);
        assert!(out.model.max_abs_diff(&pv(&[0.7, -0.3])) < 1e-15);
    }

    #[test]
    fn stale_client_hand_computed() {
        // Three clients, lr 0.1. Client 2 last reported in round 1, so in
        // round 3 it has tau = 2 and weight 3^0.1.
        let lr = 0.1;
        let mut f = FedAr::new(3, 2, 0.1, 2.0, CONVEX);
        let w1 = [0.0, 0.0];
        let r1 = [[0.2, 0.1], [-0.1, 0.3], [0.4, -0.2]];
        let out = f
            .aggregate(&ctx(1, lr, 3), &pv(&w1), &received(&[(0, &r1[0]), (1, &r1[1]), (2, &r1[2])]))
            .unwrap();
        let w2 = out.model.clone();
        let r2 = [[0.3, 0.2], [0.0, 0.5]];
        let out = f
            .aggregate(&ctx(2, lr, 3), &w2, &received(&[(0, &r2[0]), (1, &r2[1])]))
            .unwrap();
        let w3 = out.model.clone();
        let r3 = [[0.25, 0.3], [0.1, 0.45]];
        let out = f
            .aggregate(&ctx(3, lr, 3), &w3, &received(&[(0, &r3[0]), (1, &r3[1])]))
            .unwrap();
        assert_eq!(out.contributors, 3);

        // Scalar recomputation, component by component.
        let psi = 3f64.powf(0.1);
        for d in 0..2 {
            let g2 = (w1[d] - r1[2][d]) / lr;
            let g0 = (w3[d] - r3[0][d]) / lr;
            let g1 = (w3[d] - r3[1][d]) / lr;
            let expected = w3[d] - lr / 3.0 * (g0 + g1 + psi * g2);
            assert!((out.model[d] - expected).abs() < 1e-14, "component {d}");
        }
    }

    #[test]
    fn cutoff_excludes_from_sum_and_count() {
        let g = CutoffSchedule::Convex { t0: 1.0, b: 100.0 };
        let mut f = FedAr::new(2, 1, 0.5, 2.0, g);
        let global = pv(&[0.0]);
        f.aggregate(&ctx(1, 1.0, 2), &global, &received(&[(0, &[1.0]), (1, &[5.0])])).unwrap();
        // Round 2: client 1 silent with tau = 1 < g(2) = 1.02.
        let out = f.aggregate(&ctx(2, 1.0, 2), &global, &received(&[(0, &[1.0])])).unwrap();
        assert_eq!(out.contributors, 2);
        // Round 3: tau = 2 >= g(3) = 1.03, client 1 is cut.
        let out = f.aggregate(&ctx(3, 1.0, 2), &global, &received(&[(0, &[1.0])])).unwrap();
        assert_eq!(out.contributors, 1);
        assert_eq!(out.model, pv(&[1.0]));
    }

    #[test]
    fn never_seen_clients_do_not_count() {
        let mut f = FedAr::new(5, 1, 0.1, 2.0, CutoffSchedule::Infinite);
        let out = f.aggregate(&ctx(1, 0.1, 5), &pv(&[0.0]), &received(&[(3, &[1.0])])).unwrap();
        assert_eq!(out.contributors, 1);
        assert!((out.model[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn no_contributors_leaves_model_unchanged() {
        let mut f = FedAr::new(2, 2, 0.1, 2.0, CONVEX);
        let global = pv(&[0.25, -1.0]);
        let out = f.aggregate(&ctx(1, 0.1, 2), &global, &Received::new()).unwrap();
        assert_eq!(out.contributors, 0);
        assert_eq!(out.model, global);
    }

    #[test]
    fn zero_lr_with_updates_is_rejected() {
        let mut f = FedAr::new(1, 1, 0.1, 2.0, CONVEX);
        let err = f.aggregate(&ctx(1, 0.0, 1), &pv(&[0.0]), &received(&[(0, &[0.0])]));
        assert!(matches!(err, Err(Error::Protocol { .. })));
    }

    proptest! {
        #[test]
        fn weight_range_and_monotonicity(
            tau in 0usize..500,
            round in 1usize..2000,
            rho in 0.0f64..=1.0,
            psi_max in 1.0f64..4.0,
        ) {
            for g in [CONVEX, CutoffSchedule::nonconvex_default(), CutoffSchedule::Infinite] {
                let psi = fedar_weight(tau, round, rho, psi_max, &g);
                prop_assert!(psi == 0.0 || (1.0..=psi_max).contains(&psi));
                let next = fedar_weight(tau + 1, round, rho, psi_max, &g);
                prop_assert!(next == 0.0 || next >= psi);
            }
        }

        #[test]
        fn cutoff_is_nondecreasing(round in 1usize..100_000, t0 in 0.1f64..50.0, b in 2.01f64..20.0, c in 0.1f64..10.0) {
            let convex = CutoffSchedule::Convex { t0, b };
            let nonconvex = CutoffSchedule::Nonconvex { c, t0 };
            prop_assert!(g_eval(&convex, round + 1) >= g_eval(&convex, round));
            prop_assert!(g_eval(&nonconvex, round + 1) >= g_eval(&nonconvex, round));
        }
    }
}
