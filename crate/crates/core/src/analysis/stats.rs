use crate::error::{Error, Result};

/// Summary of per-client accuracies. Variances are population variances.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyStats {
    pub mean: f64,
    pub std: f64,
    pub variance: f64,
    pub worst10_mean: f64,
    pub worst10_std: f64,
    pub best10_mean: f64,
    pub best10_std: f64,
    /// Clients in each tail group.
    pub tail_size: usize,
    /// Set when there are fewer than 10 clients, so the tails are not true
    /// deciles.
    pub small_sample: bool,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn accuracy_stats(per_client: &[f64]) -> Result<AccuracyStats> {
    if per_client.is_empty() {
        return Err(Error::Data("no client accuracies".into()));
    }
    let n = per_client.len();
    let (mean, std) = mean_std(per_client.iter().copied());
    let variance = per_client.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;

    // Stable sort on (accuracy, id): ties go to the lower client id.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| per_client[a].total_cmp(&per_client[b]).then(a.cmp(&b)));
    let tail_size = (n / 10).max(1);
    let (worst10_mean, worst10_std) = mean_std(order[..tail_size].iter().map(|&i| per_client[i]));
    let (best10_mean, best10_std) = mean_std(order[n - tail_size..].iter().map(|&i| per_client[i]));

    Ok(AccuracyStats {
        mean,
        std,
        variance,
        worst10_mean,
        worst10_std,
        best10_mean,
        best10_std,
        tail_size,
        small_sample: n < 10,
    })
}

pub const DENSITY_POINTS: usize = 101;

/// Bin counts over `[0, 1]` plus a kernel density curve on an even grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_width: f64,
    /// `counts[k]` covers `[k * bin_width, (k + 1) * bin_width)`; the last bin
    /// also takes 1.0.
    pub counts: Vec<usize>,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// Histogram and Gaussian KDE of accuracies in `[0, 1]`.
///
/// The bandwidth follows Silverman's rule, floored at the grid spacing so a
/// single point or identical values still give a curve. Kernels are
/// reflected at 0 and 1 and the sampled curve is rescaled to unit area.
pub fn histogram_pdf(values: &[f64], bin_width: f64) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::Data("histogram of an empty sample".into()));
    }
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::config("bin_width", format!("must be positive, got {bin_width}")));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!("accuracy {v} outside [0, 1]")));
    }
    let bins = ((1.0 / bin_width) - 1e-9).ceil().max(1.0) as usize;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = ((v / bin_width) + 1e-9).floor() as usize;
        counts[k.min(bins - 1)] += 1;
    }

    let n = values.len() as f64;
    let (_, std) = mean_std(values.iter().copied());
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
    let step = 1.0 / (DENSITY_POINTS - 1) as f64;
    let h = (0.9 * spread * n.powf(-0.2)).max(step);

    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    let kernel = |u: f64| (-0.5 * u * u).exp();
    let grid: Vec<f64> = (0..DENSITY_POINTS).map(|k| k as f64 * step).collect();
    let mut density: Vec<f64> = grid
        .iter()
        .map(|&x| {
            norm * values
                .iter()
                .map(|&v| kernel((x - v) / h) + kernel((x + v) / h) + kernel((x - (2.0 - v)) / h))
                .sum::<f64>()
        })
        .collect();
    let area = trapezoid(&grid, &density);
    density.iter_mut().for_each(|d| *d /= area);

    Ok(Histogram {
        bin_width,
        counts,
        grid,
        density,
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn constant_accuracies() {
        let s = accuracy_stats(&[0.7; 20]).unwrap();
        assert_abs_diff_eq!(s.mean, 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(s.variance, 0.0, epsilon = 1e-24);
        assert_abs_diff_eq!(s.worst10_mean, 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(s.best10_mean, 0.7, epsilon = 1e-15);
        assert_eq!(s.tail_size, 2);
        assert!(!s.small_sample);
    }

    #[test]
    fn population_variance_on_small_sample() {
        let s = accuracy_stats(&[0.0, 1.0]).unwrap();
        assert_eq!(s.variance, 0.25);
        assert_eq!(s.std, 0.5);
        assert!(s.small_sample);
        assert_eq!(s.tail_size, 1);
        assert_eq!((s.worst10_mean, s.best10_mean), (0.0, 1.0));
    }

    #[test]
    fn matches_sort_and_slice_on_100_clients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let acc: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let s = accuracy_stats(&acc).unwrap();
        let mut sorted = acc.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let worst: f64 = sorted[..10].iter().sum::<f64>() / 10.0;
        let best: f64 = sorted[90..].iter().sum::<f64>() / 10.0;
        let worst_var: f64 = sorted[..10].iter().map(|x| (x - worst).powi(2)).sum::<f64>() / 10.0;
        assert_abs_diff_eq!(s.worst10_mean, worst, epsilon = 1e-12);
        assert_abs_diff_eq!(s.best10_mean, best, epsilon = 1e-12);
        assert_abs_diff_eq!(s.worst10_std, worst_var.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn empty_input_is_a_data_error() {
        assert!(matches!(accuracy_stats(&[]), Err(Error::Data(_))));
        assert!(matches!(histogram_pdf(&[], 0.1), Err(Error::Data(_))));
    }

    #[test]
    fn single_value_lands_in_its_bin() {
        let h = histogram_pdf(&[0.5], 0.1).unwrap();
        assert_eq!(h.counts.len(), 10);
        assert_eq!(h.counts[5], 1);
        assert_eq!(h.counts.iter().sum::<usize>(), 1);
        let top = histogram_pdf(&[1.0], 0.1).unwrap();
        assert_eq!(top.counts[9], 1);
    }

    #[test]
    fn uniform_sample_has_flat_density() {
        let acc: Vec<f64> = (0..2000).map(|i| (i as f64 + 0.5) / 2000.0).collect();
        let h = histogram_pdf(&acc, 0.05).unwrap();
        for (x, d) in h.grid.iter().zip(&h.density) {
            assert!((d - 1.0).abs() < 0.1, "density {d} at {x}");
        }
    }

    proptest! {
        #[test]
        fn density_has_unit_area(values in prop::collection::vec(0.0f64..=1.0, 1..60), width in 0.01f64..0.5) {
            let h = histogram_pdf(&values, width).unwrap();
            prop_assert_eq!(h.grid.len(), DENSITY_POINTS);
            prop_assert!((trapezoid(&h.grid, &h.density) - 1.0).abs() < 1e-3);
            prop_assert_eq!(h.counts.iter().sum::<usize>(), values.len());
        }

        #[test]
        fn tails_bracket_the_mean(values in prop::collection::vec(0.0f64..=1.0, 1..200)) {
            let s = accuracy_stats(&values).unwrap();
            prop_assert!(s.worst10_mean <= s.mean + 1e-12);
            prop_assert!(s.mean <= s.best10_mean + 1e-12);
            prop_assert!((s.variance - s.std * s.std).abs() < 1e-12);
        }
    }
}
