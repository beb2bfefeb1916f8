//! The PF-ODE as a deterministic MDP.
//!
//! State `(t, x)`, action the first-order solver step to `next_t`, reward the
//! vector `eps_hat * (u_t - u_r)` with `u = sigma / alpha`, value
//! `h(x, t) = x / alpha_t - x0_hat(x, t)`. With an exact epsilon the value obeys
//! `h(x_t, t) = reward(t -> r) + h(x_r, r)`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::net::Denoiser;
use crate::oracle::{MixtureOracle, SolveOptions};
use crate::par;
use crate::rng::{self, tag};
use crate::schedule::{ddim_step, reward_weight_integral, NoiseSchedule};
use crate::target::{one_shot_target, teacher_target, variance_reduced_target, ReferenceBatch, TargetEstimate, TargetMode};

#[derive(Debug, Clone, PartialEq)]
pub struct MdpState {
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpTransition {
    pub state: MdpState,
    pub next_x: Vec<f64>,
    pub next_t: f64,
    pub reward_estimate: Vec<f64>,
    pub reward_mode: TargetMode,
}

/// Supplies the epsilon estimate that drives a transition.
pub trait EpsSource {
    fn estimate(&self, schedule: &NoiseSchedule, x_t: &[f64], t: f64) -> Result<TargetEstimate>;
}

/// Exact posterior-mean epsilon.
pub struct OracleEps<'a> {
    pub oracle: &'a MixtureOracle,
    pub class: Option<usize>,
}

impl EpsSource for OracleEps<'_> {
    fn estimate(&self, schedule: &NoiseSchedule, x_t: &[f64], t: f64) -> Result<TargetEstimate> {
        teacher_target(self.oracle, schedule, x_t, t, self.class)
    }
}

/// Conditional epsilon against a known clean sample.
pub struct OneShotEps<'a> {
    pub x0: &'a [f64],
}

impl EpsSource for OneShotEps<'_> {
    fn estimate(&self, schedule: &NoiseSchedule, x_t: &[f64], t: f64) -> Result<TargetEstimate> {
        one_shot_target(schedule, x_t, t, self.x0)
    }
}

/// Self-normalized estimate over a fixed reference batch.
pub struct ReferenceEps<'a> {
    pub refs: &'a ReferenceBatch,
    pub class: Option<usize>,
}

impl EpsSource for ReferenceEps<'_> {
    fn estimate(&self, schedule: &NoiseSchedule, x_t: &[f64], t: f64) -> Result<TargetEstimate> {
        variance_reduced_target(schedule, x_t, t, self.refs, self.class)
    }
}

/// One solver action. `next_t == state.t` is the identity transition with zero reward.
pub fn step(schedule: &NoiseSchedule, state: &MdpState, next_t: f64, eps: &dyn EpsSource) -> Result<MdpTransition> {
    if next_t > state.t {
        return Err(Error::Ordering { t: state.t, r: next_t });
    }
    schedule.check_time("t", state.t)?;
    if next_t == state.t {
        return Ok(MdpTransition {
            state: state.clone(),
            next_x: state.x.clone(),
            next_t,
            reward_estimate: vec![0.0; state.x.len()],
            reward_mode: TargetMode::OneShot,
        });
    }
    let est = eps.estimate(schedule, &state.x, state.t)?;
    let next_x = ddim_step(schedule, &state.x, state.t, next_t, &est.eps_hat)?;
    let w = reward_weight_integral(schedule, state.t, next_t)?;
    Ok(MdpTransition {
        state: state.clone(),
        next_x,
        next_t,
        reward_estimate: est.eps_hat.iter().map(|e| e * w).collect(),
        reward_mode: est.mode,
    })
}

/// Chains [`step`] through descending `times`, all at or below `state.t`.
pub fn n_step_rollout(
    schedule: &NoiseSchedule,
    state: &MdpState,
    times: &[f64],
    eps: &dyn EpsSource,
) -> Result<Vec<MdpTransition>> {
    let mut out = Vec::with_capacity(times.len());
    let mut cur = state.clone();
    for &t in times {
        let tr = step(schedule, &cur, t, eps)?;
        cur = MdpState {
            t: tr.next_t,
            x: tr.next_x.clone(),
        };
        out.push(tr);
    }
    Ok(out)
}

pub fn total_reward(rollout: &[MdpTransition]) -> Vec<f64> {
    let dim = rollout.first().map_or(0, |t| t.reward_estimate.len());
    rollout.iter().fold(vec![0.0; dim], |mut acc, tr| {
        acc.iter_mut().zip(&tr.reward_estimate).for_each(|(a, r)| *a += r);
        acc
    })
}

/// `x / alpha_t - x0_hat(x, t)`.
pub fn value_of(model: &dyn Denoiser, schedule: &NoiseSchedule, state: &MdpState, label: Option<usize>) -> Result<Vec<f64>> {
    let x = Array2::from_shape_vec((1, state.x.len()), state.x.clone()).expect("one row");
    let lab = label.map(|l| [l]);
    let x0 = model.predict_x0(x.view(), &[state.t], lab.as_ref().map(|l| &l[..]))?;
    let a = schedule.alpha(state.t);
    Ok(state.x.iter().zip(x0.row(0)).map(|(x, p)| x / a - p).collect())
}

/// Mean of `|h(x_t, t) - reward - h(x_r, r)|` over `n_points` oracle trajectories,
/// with `x_r` and the reward taken from the reference solver.
pub fn bellman_residual(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    oracle: &MixtureOracle,
    t: f64,
    r: f64,
    n_points: usize,
    seed: u64,
) -> Result<f64> {
    if r >= t {
        return Err(Error::Ordering { t, r });
    }
    schedule.check_time("t", t)?;
    schedule.check_time("r", r)?;
    if n_points == 0 {
        return Err(Error::Config("bellman residual needs at least one point".into()));
    }
    let dim = oracle.dim();
    let data = oracle.sample_data(n_points, None, seed)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    let opts = SolveOptions::default();
    let legs = par::map_indexed(n_points, |i| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut g = rng::stream(seed, tag::BELLMAN, i as u64, 0);
        let x_t: Vec<f64> = data.x.row(i).iter().map(|x0| a * x0 + s * rng::normal(&mut g)).collect();
        let traj = oracle.solve_reference_with(schedule, &x_t, &[t, r], &opts)?;
        Ok((x_t, traj.states[1].clone(), traj.rewards[0].clone()))
    });
    let legs: Vec<_> = legs.into_iter().collect::<Result<_>>()?;
    let mut xs = Array2::zeros((2 * n_points, dim));
    let mut ts = Vec::with_capacity(2 * n_points);
    for (i, (x_t, x_r, _)) in legs.iter().enumerate() {
        xs.row_mut(i).iter_mut().zip(x_t).for_each(|(d, v)| *d = *v);
        xs.row_mut(n_points + i).iter_mut().zip(x_r).for_each(|(d, v)| *d = *v);
    }
    ts.extend(std::iter::repeat_n(t, n_points));
    ts.extend(std::iter::repeat_n(r, n_points));
    // Trajectories are unconditional, so the model is queried without labels.
    let pred = model.predict_x0(xs.view(), &ts, None)?;
    let (at, ar) = (schedule.alpha(t), schedule.alpha(r));
    let norms: Vec<f64> = legs
        .iter()
        .enumerate()
        .map(|(i, (x_t, x_r, reward))| {
            (0..dim)
                .map(|j| {
                    let h_t = x_t[j] / at - pred[[i, j]];
                    let h_r = x_r[j] / ar - pred[[n_points + i, j]];
                    (h_t - reward[j] - h_r).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(par::pairwise_sum_scalar(&norms) / n_points as f64)
}

/// A perfect consistency function: the PF-ODE solution point of the oracle.
pub struct OracleDenoiser<'a> {
    pub oracle: &'a MixtureOracle,
    pub schedule: NoiseSchedule,
    pub opts: SolveOptions,
}

impl<'a> OracleDenoiser<'a> {
    pub fn new(oracle: &'a MixtureOracle, schedule: NoiseSchedule) -> Self {
        Self {
            oracle,
            schedule,
            opts: SolveOptions::default(),
        }
    }
}

impl Denoiser for OracleDenoiser<'_> {
    fn dim(&self) -> usize {
        self.oracle.dim()
    }

    fn predict_x0(&self, x: ndarray::ArrayView2<'_, f64>, t: &[f64], labels: Option<&[usize]>) -> Result<Array2<f64>> {
        if x.ncols() != self.oracle.dim() || t.len() != x.nrows() {
            return Err(Error::Dimension {
                expected: self.oracle.dim(),
                got: x.ncols(),
            });
        }
        let rows = par::map_indexed(x.nrows(), |i| {
            let mut o = self.opts;
            o.class = labels.map(|l| l[i]);
            self.oracle.solution_point(&self.schedule, &x.row(i).to_vec(), t[i], &o)
        });
        let mut out = Array2::zeros(x.raw_dim());
        for (i, row) in rows.into_iter().enumerate() {
            out.row_mut(i).iter_mut().zip(row?).for_each(|(d, v)| *d = v);
        }
        Ok(out)
    }
}
