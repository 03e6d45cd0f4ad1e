//! Client availability: independent Bernoulli participation and scripted
//! per-round traces. Rounds are numbered from 1.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub enum AvailabilityModel {
    /// Client `i` responds in each round with probability `probabilities[i]`,
    /// decided by a stream keyed on `(seed, i, round)`.
    Bernoulli { probabilities: Vec<f64>, seed: u64 },
    /// `schedule[i][round - 1]` says whether client `i` responds.
    Trace { schedule: Vec<Vec<bool>> },
}

/// Draw `p_i ~ U[p_min, 1]` for every client.
pub fn sample_probabilities<R: Rng>(num_clients: usize, p_min: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_p_min(p_min)?;
    Ok((0..num_clients)
        .map(|_| {
            if p_min == 1.0 {
                1.0
            } else {
                rng.random_range(p_min..=1.0)
            }
        })
        .collect())
}

pub fn check_p_min(p_min: f64) -> Result<()> {
    if p_min > 0.0 && p_min <= 1.0 {
        Ok(())
    } else {
        Err(Error::config("p_min", format!("{p_min} is not in (0, 1]")))
    }
}

/// Every client available except `stale_client`, which responds only in the
/// first `total_rounds - stale_rounds` rounds.
pub fn make_stale_trace(
    num_clients: usize,
    total_rounds: usize,
    stale_client: usize,
    stale_rounds: usize,
) -> Result<AvailabilityModel> {
    if stale_client >= num_clients {
        return Err(Error::config(
            "availability.client",
            format!("stale client {stale_client} out of range for {num_clients} clients"),
        ));
    }
    if stale_rounds > total_rounds {
        return Err(Error::config(
            "availability.rounds",
            format!("{stale_rounds} stale rounds exceed {total_rounds} total rounds"),
        ));
    }
    let active = total_rounds - stale_rounds;
    let schedule = (0..num_clients)
        .map(|c| {
            (0..total_rounds)
                .map(|r| c != stale_client || r < active)
                .collect()
        })
        .collect();
    Ok(AvailabilityModel::Trace { schedule })
}

/// Parse a 0/1 matrix, one row per client and one column per round.
pub fn parse_trace_csv(text: &str) -> Result<AvailabilityModel> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut schedule = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let flags = record
            .iter()
            .enumerate()
            .map(|(col, field)| match field {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Format(format!(
                    "trace row {}, column {}: expected 0 or 1, found `{other}`",
                    row + 1,
                    col + 1
                ))),
            })
            .collect::<Result<Vec<bool>>>()?;
        schedule.push(flags);
    }
    if schedule.is_empty() {
        return Err(Error::Format("availability trace has no rows".into()));
    }
    Ok(AvailabilityModel::Trace { schedule })
}

pub fn load_trace_csv(path: &Path) -> Result<AvailabilityModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace_csv(&text)
}

impl AvailabilityModel {
    pub fn bernoulli(probabilities: Vec<f64>, seed: u64) -> Self {
        AvailabilityModel::Bernoulli {
            probabilities,
            seed,
        }
    }

    pub fn num_clients(&self) -> usize {
        match self {
            AvailabilityModel::Bernoulli { probabilities, .. } => probabilities.len(),
            AvailabilityModel::Trace { schedule } => schedule.len(),
        }
    }

    /// Availability probabilities when the model has them (trace mode
    /// reports the empirical response rate of each row).
    pub fn probabilities(&self) -> Vec<f64> {
        match self {
            AvailabilityModel::Bernoulli { probabilities, .. } => probabilities.clone(),
            AvailabilityModel::Trace { schedule } => schedule
                .iter()
                .map(|row| {
                    row.iter().filter(|&&a| a).count() as f64 / row.len().max(1) as f64
                })
                .collect(),
        }
    }

    /// Check the model covers `num_clients` clients for `rounds` rounds.
    pub fn validate(&self, num_clients: usize, rounds: usize) -> Result<()> {
        if self.num_clients() != num_clients {
            return Err(Error::config(
                "availability",
                format!(
                    "model covers {} clients, experiment has {num_clients}",
                    self.num_clients()
                ),
            ));
        }
        match self {
            AvailabilityModel::Bernoulli { probabilities, .. } => {
                if let Some(p) = probabilities.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
                    return Err(Error::config("availability", format!("probability {p} not in (0, 1]")));
                }
            }
            AvailabilityModel::Trace { schedule } => {
                if let Some((c, row)) = schedule.iter().enumerate().find(|(_, r)| r.len() < rounds) {
                    return Err(Error::config(
                        "availability",
                        format!("trace for client {c} covers {} of {rounds} rounds", row.len()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Whether `client` responds in `round` (1-based). Depends only on the
    /// seed, the client and the round.
    pub fn is_available(&self, client: usize, round: usize) -> Result<bool> {
        if client >= self.num_clients() {
            return Err(Error::config(
                "availability",
                format!("unknown client {client}"),
            ));
        }
        match self {
            AvailabilityModel::Bernoulli {
                probabilities,
                seed,
            } => {
                let p = probabilities[client];
                if p >= 1.0 {
                    return Ok(true);
                }
                let mut rng = RngStream::new(*seed, Purpose::Availability)
                    .client(client)
                    .round(round)
                    .rng();
                Ok(rng.random::<f64>() < p)
            }
            AvailabilityModel::Trace { schedule } => {
                if round == 0 {
                    return Err(Error::config("availability", "rounds are numbered from 1"));
                }
                schedule[client].get(round - 1).copied().ok_or_else(|| {
                    Error::config(
                        "availability",
                        format!("trace for client {client} has no round {round}"),
                    )
                })
            }
        }
    }

    /// Clients responding in `round`, in increasing id order.
    pub fn available_set(&self, round: usize) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for c in 0..self.num_clients() {
            if self.is_available(c, round)? {
                out.push(c);
            }
        }
        Ok(out)
    }

    /// Full `clients × rounds` availability matrix.
    pub fn matrix(&self, rounds: usize) -> Result<Vec<Vec<bool>>> {
        (0..self.num_clients())
            .map(|c| (1..=rounds).map(|r| self.is_available(c, r)).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn degenerate_p_min() {
        let p = sample_probabilities(10, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(p.iter().all(|&v| v == 1.0));
        let model = AvailabilityModel::bernoulli(p, 3);
        assert!((1..100).all(|r| model.available_set(r).unwrap().len() == 10));
    }

    #[test]
    fn probabilities_respect_p_min() {
        let p = sample_probabilities(100, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(p.iter().all(|&v| (0.5..=1.0).contains(&v)));
        let mean = p.iter().sum::<f64>() / 100.0;
        // U[0.5, 1]: mean 0.75, sd 0.5/sqrt(12).
        let se = 0.5 / 12f64.sqrt() / 10.0;
        assert!((mean - 0.75).abs() < 3.0 * se);
    }

    #[test]
    fn p_min_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                sample_probabilities(3, bad, &mut rng),
                Err(Error::Config { .. })
            ));
        }
    }

    #[test]
    fn stale_three_of_nine() {
        let m = make_stale_trace(5, 9, 0, 3).unwrap();
        let row: Vec<bool> = (1..=9).map(|r| m.is_available(0, r).unwrap()).collect();
        assert_eq!(row, [true, true, true, true, true, true, false, false, false]);
        for c in 1..5 {
            assert!((1..=9).all(|r| m.is_available(c, r).unwrap()));
        }
    }

    #[test]
    fn stale_trace_boundaries() {
        let fresh = make_stale_trace(5, 9, 0, 0).unwrap();
        assert!(fresh.matrix(9).unwrap().iter().flatten().all(|&a| a));
        let six = make_stale_trace(5, 9, 0, 6).unwrap();
        let row: Vec<usize> = (1..=9).filter(|&r| six.is_available(0, r).unwrap()).collect();
        assert_eq!(row, [1, 2, 3]);
        let never = make_stale_trace(5, 9, 2, 9).unwrap();
        assert!((1..=9).all(|r| !never.is_available(2, r).unwrap()));
        assert!(make_stale_trace(5, 9, 5, 1).is_err());
        assert!(make_stale_trace(5, 9, 0, 10).is_err());
    }

    #[test]
    fn unknown_client_rejected() {
        let m = AvailabilityModel::bernoulli(vec![0.5; 3], 0);
        assert!(matches!(m.is_available(3, 1), Err(Error::Config { .. })));
        let t = make_stale_trace(2, 4, 0, 1).unwrap();
        assert!(t.is_available(0, 5).is_err());
    }

    #[test]
    fn trace_csv() {
        let m = parse_trace_csv("1,0,1\n0, 1 ,1\n").unwrap();
        assert_eq!(m.num_clients(), 2);
        assert!(!m.is_available(1, 1).unwrap());
        assert!(m.is_available(1, 2).unwrap());
        assert!(m.validate(2, 3).is_ok());
        assert!(m.validate(2, 4).is_err());
        assert!(matches!(parse_trace_csv("1,2\n"), Err(Error::Format(_))));
        assert!(parse_trace_csv("").is_err());
    }

    #[test]
    fn bernoulli_frequency() {
        let m = AvailabilityModel::bernoulli(vec![0.1, 0.9], 11);
        let hits = (1..=10_000).filter(|&r| m.is_available(0, r).unwrap()).count() as f64;
        let se = (0.1f64 * 0.9 / 10_000.0).sqrt();
        assert!((hits / 10_000.0 - 0.1).abs() < 3.0 * se, "frequency {}", hits / 10_000.0);
    }

    #[test]
    fn availability_is_keyed_not_sequential() {
        let a = AvailabilityModel::bernoulli(vec![0.3, 0.6, 0.5], 21);
        let b = AvailabilityModel::bernoulli(vec![0.3, 0.9, 0.1], 21);
        // Client 0's outcomes ignore other clients' probabilities and query order.
        let forward: Vec<bool> = (1..=50).map(|r| a.is_available(0, r).unwrap()).collect();
        let backward: Vec<bool> = (1..=50).rev().map(|r| b.is_available(0, r).unwrap()).collect();
        assert_eq!(forward, backward.into_iter().rev().collect::<Vec<_>>());
        assert_eq!(a.matrix(30).unwrap(), a.matrix(30).unwrap());
    }
}
