//! Stochastic-interpolant schedule.
//!
//! Convention: `t = 0` is pure noise and `t = 1` is data, so that
//! `x_t = alpha(t) * x + sigma(t) * eps` with `alpha(0) = 0`, `sigma(0) = 1`,
//! `alpha(1) = 1`, `sigma(1) = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `alpha(t) = t`, `sigma(t) = 1 - t`.
    #[default]
    Linear,
}

/// Interpolant coefficients and their time derivatives at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub alpha: f64,
    pub sigma: f64,
    pub alpha_dot: f64,
    pub sigma_dot: f64,
}

impl Coefficients {
    /// `alpha * sigma_dot - alpha_dot * sigma`; never zero on `[0, 1]`.
    pub fn denominator(&self) -> f64 {
        self.alpha * self.sigma_dot - self.alpha_dot * self.sigma
    }
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange { t })
    }
}

impl Schedule {
    pub const HORIZON: f64 = 1.0;

    pub fn eval(&self, t: f64) -> Result<Coefficients> {
        check_time(t)?;
        Ok(match self {
            Schedule::Linear => Coefficients {
                alpha: t,
                sigma: 1.0 - t,
                alpha_dot: 1.0,
                sigma_dot: -1.0,
            },
        })
    }

    pub fn interpolate(&self, x: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(x.len(), eps.len())?;
        let c = self.eval(t)?;
        Ok(x
            .iter()
            .zip(eps)
            .map(|(&xi, &ei)| c.alpha * xi + c.sigma * ei)
            .collect())
    }

    /// Conditional target velocity `alpha_dot * x + sigma_dot * eps`.
    pub fn target_velocity(&self, x: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(x.len(), eps.len())?;
        let c = self.eval(t)?;
        Ok(x
            .iter()
            .zip(eps)
            .map(|(&xi, &ei)| c.alpha_dot * xi + c.sigma_dot * ei)
            .collect())
    }

    /// Score `∇ log p_t(x_t)` implied by a velocity estimate.
    ///
    /// Singular at `t = 1` where `sigma` vanishes.
    pub fn velocity_to_score(&self, x_t: &[f64], v: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(x_t.len(), v.len())?;
        let c = self.eval(t)?;
        if c.sigma == 0.0 {
            return Err(Error::Singular { t });
        }
        let scale = c.sigma * c.denominator();
        Ok(x_t
            .iter()
            .zip(v)
            .map(|(&xi, &vi)| (c.alpha_dot * xi - c.alpha * vi) / scale)
            .collect())
    }

    /// Posterior mean `E[x | x_t]` implied by a velocity estimate.
    pub fn denoise_expectation(&self, x_t: &[f64], v: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(x_t.len(), v.len())?;
        let c = self.eval(t)?;
        let d = c.denominator();
        Ok(x_t
            .iter()
            .zip(v)
            .map(|(&xi, &vi)| (c.sigma_dot * xi - c.sigma * vi) / d)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn boundary_values_are_exact() {
        let s = Schedule::Linear;
        let c0 = s.eval(0.0).unwrap();
        assert_eq!((c0.alpha, c0.sigma, c0.alpha_dot, c0.sigma_dot), (0.0, 1.0, 1.0, -1.0));
        let c1 = s.eval(1.0).unwrap();
        assert_eq!((c1.alpha, c1.sigma, c1.alpha_dot, c1.sigma_dot), (1.0, 0.0, 1.0, -1.0));
        let c = s.eval(0.25).unwrap();
        assert_eq!((c.alpha, c.sigma, c.alpha_dot, c.sigma_dot), (0.25, 0.75, 1.0, -1.0));
    }

    #[test]
    fn eval_rejects_out_of_range() {
        assert!(matches!(Schedule::Linear.eval(-0.1), Err(Error::TimeOutOfRange { .. })));
        assert!(matches!(Schedule::Linear.eval(1.5), Err(Error::TimeOutOfRange { .. })));
        assert!(Schedule::Linear.eval(f64::NAN).is_err());
    }

    #[test]
    fn linear_is_monotone_with_constant_denominator() {
        let s = Schedule::Linear;
        let mut prev = s.eval(0.0).unwrap();
        for i in 1..=100 {
            let c = s.eval(i as f64 / 100.0).unwrap();
            assert!(c.alpha > prev.alpha && c.sigma < prev.sigma);
            assert_eq!(c.alpha + c.sigma, 1.0);
            assert_eq!(c.denominator(), -1.0);
            prev = c;
        }
    }

    #[test]
    fn interpolate_examples() {
        let s = Schedule::Linear;
        assert_eq!(s.interpolate(&[2.0, 0.0], &[0.0, 2.0], 0.5).unwrap(), vec![1.0, 1.0]);
        assert_eq!(s.interpolate(&[9.0, -3.0], &[0.5, 0.25], 0.0).unwrap(), vec![0.5, 0.25]);
        assert_eq!(s.interpolate(&[9.0, -3.0], &[0.5, 0.25], 1.0).unwrap(), vec![9.0, -3.0]);
        assert!(matches!(
            s.interpolate(&[1.0], &[1.0, 2.0], 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn target_velocity_examples() {
        let s = Schedule::Linear;
        assert_eq!(s.target_velocity(&[1.0, 1.0], &[0.0, 1.0], 0.3).unwrap(), vec![1.0, 0.0]);
        assert_eq!(s.target_velocity(&[0.0, 0.0], &[0.0, 0.0], 0.7).unwrap(), vec![0.0, 0.0]);
        assert_eq!(s.target_velocity(&[3.0, -2.0], &[1.0, 1.0], 0.9).unwrap(), vec![2.0, -3.0]);
    }

    #[test]
    fn score_examples() {
        let s = Schedule::Linear;
        assert_eq!(s.velocity_to_score(&[2.0, 0.0], &[123.0, -4.0], 0.0).unwrap(), vec![-2.0, -0.0]);
        // (t v - x_t) / (1 - t) = (0.5 - 1) / 0.5
        assert_eq!(s.velocity_to_score(&[1.0, 1.0], &[1.0, 1.0], 0.5).unwrap(), vec![-1.0, -1.0]);
        assert!(matches!(
            s.velocity_to_score(&[1.0], &[1.0], 1.0),
            Err(Error::Singular { .. })
        ));
        assert!(matches!(
            s.velocity_to_score(&[1.0], &[1.0], 1.2),
            Err(Error::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn denoise_examples() {
        let s = Schedule::Linear;
        let x = [2.0, 3.0];
        let eps = [0.0, 0.0];
        let xt = s.interpolate(&x, &eps, 0.4).unwrap();
        let v = s.target_velocity(&x, &eps, 0.4).unwrap();
        let rec = s.denoise_expectation(&xt, &v, 0.4).unwrap();
        for (a, b) in rec.iter().zip(x) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(s.denoise_expectation(&[1.0, 0.0], &[0.0, 0.0], 1.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(s.denoise_expectation(&[0.0, 0.0], &[1.0, 1.0], 0.5).unwrap(), vec![0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn denoise_inverts_interpolation(
            x in proptest::collection::vec(-10.0f64..10.0, 3),
            eps in proptest::collection::vec(-4.0f64..4.0, 3),
            t in 0.0f64..0.999,
        ) {
            let s = Schedule::Linear;
            let xt = s.interpolate(&x, &eps, t).unwrap();
            let v = s.target_velocity(&x, &eps, t).unwrap();
            let rec = s.denoise_expectation(&xt, &v, t).unwrap();
            for (a, b) in rec.iter().zip(&x) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
