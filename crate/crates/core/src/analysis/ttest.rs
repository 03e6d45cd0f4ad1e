use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub df: usize,
    /// The differences had zero variance; `p` is 1 for a zero mean
    /// difference and 0 otherwise.
    pub degenerate: bool,
}

/// Paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Data(format!("paired series differ in length ({} vs {})", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Data(format!("paired t-test needs at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
        return Ok(TTest {
            t,
            p,
            df,
            degenerate: true,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(TTest {
        t,
        p,
        df,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn identical_series() {
        let r = paired_t_test(&[0.1, 0.5, 0.9], &[0.1, 0.5, 0.9]).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        assert!(r.degenerate);
    }

    #[test]
    fn constant_nonzero_difference() {
        let r = paired_t_test(&[1.0, 2.0], &[0.5, 1.5]).unwrap();
        assert_eq!(r.p, 0.0);
        assert!(r.t.is_infinite() && r.t > 0.0);
        assert!(r.degenerate);
    }

    #[test]
    fn two_pairs_against_cauchy_closed_form() {
        // One degree of freedom is the Cauchy distribution:
        // P(|T| > t) = 1 - 2 atan(t) / pi.
        let r = paired_t_test(&[1.0, 3.0], &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(r.t, 2.0, epsilon = 1e-15);
        assert_eq!(r.df, 1);
        let exact = 1.0 - 2.0 * 2f64.atan() / std::f64::consts::PI;
        assert_abs_diff_eq!(r.p, exact, epsilon = 1e-10);
        assert_abs_diff_eq!(r.p, 0.2952, epsilon = 1e-4);
    }

    #[test]
    fn two_degrees_of_freedom_closed_form() {
        // df = 2: P(|T| > t) = 1 - t / sqrt(t^2 + 2).
        let r = paired_t_test(&[1.0, 2.0, 4.5], &[0.0, 0.0, 0.0]).unwrap();
        let exact = 1.0 - r.t / (r.t * r.t + 2.0).sqrt();
        assert_abs_diff_eq!(r.p, exact, epsilon = 1e-10);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(paired_t_test(&[1.0], &[1.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn sign_flip_negates_t(a in prop::collection::vec(-5.0f64..5.0, 2..20), shift in -1.0f64..1.0) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + shift * (i as f64).sin()).collect();
            let ab = paired_t_test(&a, &b).unwrap();
            let ba = paired_t_test(&b, &a).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab.p));
            if !ab.degenerate {
                prop_assert!((ab.t + ba.t).abs() < 1e-12);
                prop_assert!((ab.p - ba.p).abs() < 1e-12);
            }
        }

        #[test]
        fn p_decreases_with_t(df in 1usize..30, t in 0.0f64..10.0) {
            let dist = StudentsT::new(0.0, 1.0, df as f64).unwrap();
            prop_assert!(dist.sf(t + 0.1) <= dist.sf(t));
        }
    }
}
