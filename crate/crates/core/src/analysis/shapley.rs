//! Exact Shapley values by enumerating all coalitions.
//!
//! Coalitions are bitmasks: player `i` is in `S` when bit `i` is set. The
//! value function is called once per coalition, `2^n` times in total.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const MAX_EXACT_PLAYERS: usize = 12;

/// Totals at or below this are treated as non-positive.
const ZERO_TOTAL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyReport {
    pub values: Vec<f64>,
    /// Values as percentages of their total. Signs are kept.
    pub percentages: Vec<f64>,
    /// Set when the total was not positive and percentages were taken
    /// relative to the sum of absolute values instead.
    pub abs_normalized: bool,
    /// `v(grand coalition) - v(empty)`.
    pub total_gain: f64,
}

impl ShapleyReport {
    fn from_values(values: Vec<f64>, total_gain: f64) -> Self {
        let sum: f64 = values.iter().sum();
        let abs_sum: f64 = values.iter().map(|v| v.abs()).sum();
        // A total that is zero up to rounding must not become a denominator.
        let (denominator, abs_normalized) = if sum > ZERO_TOTAL { (sum, false) } else { (abs_sum, true) };
        let percentages = values
            .iter()
            .map(|v| if denominator > 0.0 { 100.0 * v / denominator } else { 0.0 })
            .collect();
        ShapleyReport {
            values,
            percentages,
            abs_normalized,
            total_gain,
        }
    }
}

pub fn shapley<F>(num_players: usize, value: F) -> Result<ShapleyReport>
where
    F: Fn(u32) -> f64 + Sync,
{
    if num_players > MAX_EXACT_PLAYERS {
        return Err(Error::Capacity(format!(
            "exact Shapley values support at most {MAX_EXACT_PLAYERS} players, got {num_players}"
        )));
    }
    let n = num_players;
    let coalitions = 1u32 << n;
    let v: Vec<f64> = (0..coalitions).into_par_iter().map(&value).collect();

    // weight[s] = s! (n - s - 1)! / n!
    let mut factorial = vec![1.0f64; n + 1];
    for k in 1..=n {
        factorial[k] = factorial[k - 1] * k as f64;
    }
    let weight: Vec<f64> = (0..n)
        .map(|s| factorial[s] * factorial[n - s - 1] / factorial[n])
        .collect();

    let values = (0..n)
        .map(|i| {
            let bit = 1u32 << i;
            (0..coalitions)
                .filter(|s| s & bit == 0)
                .map(|s| weight[s.count_ones() as usize] * (v[(s | bit) as usize] - v[s as usize]))
                .sum()
        })
        .collect();
    let total_gain = v[(coalitions - 1) as usize] - v[0];
    Ok(ShapleyReport::from_values(values, total_gain))
}
