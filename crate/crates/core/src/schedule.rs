//! Noise schedules, forward marginals and first-order ODE stepping.
//!
//! A schedule fixes `x_t = alpha(t) x0 + sigma(t) eps`. Everything downstream
//! talks in terms of the log-SNR `lambda(t) = ln(alpha / sigma)` or the
//! equivalent effective noise level `u = sigma / alpha = exp(-lambda)`, so
//! both built-in schedules share one code path.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `alpha = 1`, `sigma = t`.
    VarianceExploding,
    /// Trigonometric: `alpha = cos(pi t / 2)`, `sigma = sin(pi t / 2)`, `t` in `[0, 1)`.
    VariancePreserving,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::ve(0.002, 80.0).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, t_min: f64, t_max: f64) -> Result<Self> {
        let upper = match kind {
            ScheduleKind::VarianceExploding => f64::INFINITY,
            ScheduleKind::VariancePreserving => 1.0,
        };
        if !(t_min >= 0.0 && t_min < t_max && t_max < upper && t_max.is_finite()) {
            return Err(Error::Config(format!(
                "schedule {kind:?} needs 0 <= t_min < t_max < {upper}, got [{t_min}, {t_max}]"
            )));
        }
        Ok(Self { kind, t_min, t_max })
    }

    pub fn ve(t_min: f64, t_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::VarianceExploding, t_min, t_max)
    }

    pub fn vp(t_min: f64, t_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::VariancePreserving, t_min, t_max)
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VarianceExploding => 1.0,
            ScheduleKind::VariancePreserving => (FRAC_PI_2 * t).cos(),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VarianceExploding => t,
            ScheduleKind::VariancePreserving => (FRAC_PI_2 * t).sin(),
        }
    }

    /// Log signal-to-noise ratio `ln(alpha / sigma)`; `+inf` where sigma vanishes.
    pub fn lambda(&self, t: f64) -> f64 {
        -self.scaled_sigma(t).ln()
    }

    /// Inverse of [`lambda`](Self::lambda).
    pub fn t_of_lambda(&self, lambda: f64) -> f64 {
        self.t_of_scaled_sigma((-lambda).exp())
    }

    /// `sigma / alpha = exp(-lambda)`.
    pub fn scaled_sigma(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VarianceExploding => t,
            ScheduleKind::VariancePreserving => (FRAC_PI_2 * t).tan(),
        }
    }

    pub fn t_of_scaled_sigma(&self, u: f64) -> f64 {
        match self.kind {
            ScheduleKind::VarianceExploding => u,
            ScheduleKind::VariancePreserving => u.atan() / FRAC_PI_2,
        }
    }

    /// Drift coefficient `d ln alpha / dt`.
    pub fn f(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VarianceExploding => 0.0,
            ScheduleKind::VariancePreserving => -FRAC_PI_2 * (FRAC_PI_2 * t).tan(),
        }
    }

    /// Diffusion coefficient `d sigma^2 / dt - 2 f sigma^2`.
    pub fn g_squared(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VarianceExploding => 2.0 * t,
            ScheduleKind::VariancePreserving => 2.0 * FRAC_PI_2 * (FRAC_PI_2 * t).tan(),
        }
    }

    pub fn check_time(&self, what: &'static str, t: f64) -> Result<()> {
        if t >= self.t_min && t <= self.t_max {
            Ok(())
        } else {
            Err(Error::Range {
                what,
                value: t,
                lo: self.t_min,
                hi: self.t_max,
            })
        }
    }

    /// `n + 1` descending times from `hi` to `lo`, both endpoints exact.
    pub fn grid(&self, spacing: Spacing, hi: f64, lo: f64, n: usize) -> Vec<f64> {
        let n = n.max(1);
        let mut out: Vec<f64> = (0..=n)
            .map(|i| {
                let a = i as f64 / n as f64;
                match spacing {
                    Spacing::Uniform => hi + a * (lo - hi),
                    Spacing::LogSnr => {
                        let (lh, ll) = (self.lambda(hi), self.lambda(lo));
                        if ll.is_finite() {
                            self.t_of_lambda(lh + a * (ll - lh))
                        } else {
                            // lambda is unbounded at sigma = 0; fall back to the power grid.
                            power_point(hi, lo, 2.0, a)
                        }
                    }
                    Spacing::Power(rho) => power_point(hi, lo, rho, a),
                }
            })
            .collect();
        out[0] = hi;
        out[n] = lo;
        out
    }
}

fn power_point(hi: f64, lo: f64, rho: f64, a: f64) -> f64 {
    let (h, l) = (hi.powf(1.0 / rho), lo.powf(1.0 / rho));
    (h + a * (l - h)).powf(rho)
}

/// Placement of sub-steps between two times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Uniform,
    LogSnr,
    /// Uniform in `t^(1/rho)`.
    Power(f64),
}

/// Default sub-step spacing for first-order integration.
pub const DEFAULT_SPACING: Spacing = Spacing::Power(2.0);

/// A diffused sample, with the `(x0, eps)` pair that produced it when known.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusedPoint {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub origin: Option<(Vec<f64>, Vec<f64>)>,
}

fn same_dim(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        })
    }
}

pub fn forward_marginal(
    schedule: &NoiseSchedule,
    x0: &[f64],
    eps: &[f64],
    t: f64,
) -> Result<DiffusedPoint> {
    schedule.check_time("t", t)?;
    same_dim(x0, eps)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    let x_t = x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect();
    Ok(DiffusedPoint {
        x_t,
        t,
        origin: Some((x0.to_vec(), eps.to_vec())),
    })
}

/// `(x_t - alpha x0) / sigma`: the noise that maps `x0` to `x_t`.
pub fn conditional_epsilon(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: f64,
    x0: &[f64],
) -> Result<Vec<f64>> {
    same_dim(x_t, x0)?;
    let s = schedule.sigma(t);
    if s <= 0.0 {
        return Err(Error::DegenerateTime { t });
    }
    let a = schedule.alpha(t);
    Ok(x_t.iter().zip(x0).map(|(x, x0)| (x - a * x0) / s).collect())
}

/// One first-order exponential-integrator (DDIM) step from `t` down to `r`,
/// holding the epsilon estimate constant over the interval.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: f64,
    r: f64,
    eps_hat: &[f64],
) -> Result<Vec<f64>> {
    same_dim(x_t, eps_hat)?;
    if r >= t {
        return Err(Error::Ordering { t, r });
    }
    schedule.check_time("t", t)?;
    schedule.check_time("r", r)?;
    let (at, st) = (schedule.alpha(t), schedule.sigma(t));
    let (ar, sr) = (schedule.alpha(r), schedule.sigma(r));
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| {
            let x0 = (x - st * e) / at;
            ar * x0 + sr * e
        })
        .collect())
}

/// Closed form of the integral of `exp(-lambda)` from `lambda_t` to `lambda_r`,
/// i.e. `sigma_t / alpha_t - sigma_r / alpha_r`. Accepts `r` down to 0.
pub fn reward_weight_integral(schedule: &NoiseSchedule, t: f64, r: f64) -> Result<f64> {
    if r > t || r < 0.0 {
        return Err(Error::Ordering { t, r });
    }
    Ok(schedule.scaled_sigma(t) - schedule.scaled_sigma(r))
}
