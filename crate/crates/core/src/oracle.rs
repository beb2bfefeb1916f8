//! Isotropic Gaussian-mixture data with closed-form diffused scores.
//!
//! Under `x_t = alpha x0 + sigma eps` a component `N(mu, s^2 I)` diffuses to
//! `N(alpha mu, (alpha^2 s^2 + sigma^2) I)`, so the marginal score, the
//! posterior over components and the ground-truth epsilon are all available
//! in closed form. PF-ODE reference trajectories are integrated numerically
//! from that exact epsilon.

use ndarray::Array2;
use rand::distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    pub std: f64,
    #[serde(default)]
    pub label: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureOracle {
    dim: usize,
    components: Vec<MixtureComponent>,
    n_classes: usize,
}

/// Samples with their class labels, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSamples {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
}

impl LabeledSamples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

impl MixtureOracle {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Config("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::Config("mixture dimension must be positive".into()));
        }
        let mut total = 0.0;
        for c in &components {
            if c.mean.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: c.mean.len(),
                });
            }
            if !(c.std > 0.0 && c.std.is_finite()) {
                return Err(Error::Config(format!("component stdev must be positive, got {}", c.std)));
            }
            if !(c.weight > 0.0) {
                return Err(Error::Config(format!("mixing weight must be positive, got {}", c.weight)));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Config(format!("mixing weights sum to {total}, expected 1")));
        }
        let n_classes = components.iter().map(|c| c.label).max().unwrap_or(0) + 1;
        for label in 0..n_classes {
            if !components.iter().any(|c| c.label == label) {
                return Err(Error::Config(format!("class label {label} has no component")));
            }
        }
        Ok(Self {
            dim,
            components,
            n_classes,
        })
    }

    /// Equal-weight components, one class per component.
    pub fn equal_weights(means: Vec<Vec<f64>>, std: f64) -> Result<Self> {
        let w = 1.0 / means.len().max(1) as f64;
        Self::new(
            means
                .into_iter()
                .enumerate()
                .map(|(label, mean)| MixtureComponent {
                    mean,
                    std,
                    label,
                    weight: w,
                })
                .collect(),
        )
    }

    pub fn single_gaussian(dim: usize, std: f64) -> Result<Self> {
        Self::equal_weights(vec![vec![0.0; dim]], std)
    }

    /// Two 1D components at `-sep` and `+sep`.
    pub fn two_gaussians(sep: f64, std: f64) -> Result<Self> {
        Self::equal_weights(vec![vec![-sep], vec![sep]], std)
    }

    /// `k` components evenly spaced on a circle of the given radius.
    pub fn ring(k: usize, radius: f64, std: f64) -> Result<Self> {
        let means = (0..k)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::equal_weights(means, std)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// Per-coordinate standard deviation of the data distribution.
    pub fn data_std(&self) -> f64 {
        let mut mean = vec![0.0; self.dim];
        for c in &self.components {
            for (m, v) in mean.iter_mut().zip(&c.mean) {
                *m += c.weight * v;
            }
        }
        let var: f64 = self
            .components
            .iter()
            .map(|c| {
                let spread: f64 = c.mean.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum();
                c.weight * (c.std * c.std + spread / self.dim as f64)
            })
            .sum();
        var.sqrt()
    }

    fn check_label(&self, label: Option<usize>) -> Result<()> {
        match label {
            Some(l) if l >= self.n_classes => Err(Error::Config(format!(
                "unknown class label {l} (oracle has {} classes)",
                self.n_classes
            ))),
            _ => Ok(()),
        }
    }

    fn active(&self, class: Option<usize>) -> impl Iterator<Item = &MixtureComponent> + '_ {
        self.components
            .iter()
            .filter(move |c| class.is_none_or(|l| c.label == l))
    }

    /// `n` i.i.d. draws, optionally restricted to one class. Deterministic in `seed`.
    pub fn sample_data(&self, n: usize, class_filter: Option<usize>, seed: u64) -> Result<LabeledSamples> {
        if n == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        self.check_label(class_filter)?;
        let active: Vec<&MixtureComponent> = self.active(class_filter).collect();
        let pick = WeightedIndex::new(active.iter().map(|c| c.weight))
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = rng::stream(seed, tag::DATA, 0, 0);
        let mut x = Array2::zeros((n, self.dim));
        let mut labels = Vec::with_capacity(n);
        for mut row in x.rows_mut() {
            let c = active[pick.sample(&mut rng)];
            for (v, m) in row.iter_mut().zip(&c.mean) {
                *v = m + c.std * rng::normal(&mut rng);
            }
            labels.push(c.label);
        }
        Ok(LabeledSamples { x, labels })
    }

    /// Posterior probability of each component given `x_t`, in component order;
    /// components outside `class` get zero.
    pub fn posterior_weights(
        &self,
        schedule: &NoiseSchedule,
        x_t: &[f64],
        t: f64,
        class: Option<usize>,
    ) -> Result<Vec<f64>> {
        if x_t.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x_t.len(),
            });
        }
        self.check_label(class)?;
        Ok(self.posterior_unchecked(schedule, x_t, t, class))
    }

    fn posterior_unchecked(
        &self,
        schedule: &NoiseSchedule,
        x_t: &[f64],
        t: f64,
        class: Option<usize>,
    ) -> Vec<f64> {
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        let d = self.dim as f64;
        let logits: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                if class.is_some_and(|l| c.label != l) {
                    return f64::NEG_INFINITY;
                }
                let v = a * a * c.std * c.std + s * s;
                let sq: f64 = x_t.iter().zip(&c.mean).map(|(x, m)| (x - a * m).powi(2)).sum();
                c.weight.ln() - 0.5 * d * v.ln() - sq / (2.0 * v)
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= z);
        w
    }

    /// Ground-truth epsilon `-sigma * grad log p_t(x_t)`, optionally class-conditional.
    pub fn exact_epsilon(
        &self,
        schedule: &NoiseSchedule,
        x_t: &[f64],
        t: f64,
        class_filter: Option<usize>,
    ) -> Result<Vec<f64>> {
        if schedule.sigma(t) <= 0.0 {
            return Err(Error::DegenerateTime { t });
        }
        let w = self.posterior_weights(schedule, x_t, t, class_filter)?;
        Ok(self.epsilon_from_weights(schedule, x_t, t, &w))
    }

    fn epsilon_from_weights(&self, schedule: &NoiseSchedule, x_t: &[f64], t: f64, w: &[f64]) -> Vec<f64> {
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        let mut eps = vec![0.0; self.dim];
        for (c, &wk) in self.components.iter().zip(w) {
            if wk == 0.0 {
                continue;
            }
            let v = a * a * c.std * c.std + s * s;
            for ((e, x), m) in eps.iter_mut().zip(x_t).zip(&c.mean) {
                *e += wk * s * (x - a * m) / v;
            }
        }
        eps
    }

    /// Exact epsilon that tolerates `sigma = 0` (where it vanishes); used by the
    /// reference integrator whose grids may end at `t = 0`.
    fn epsilon_internal(&self, schedule: &NoiseSchedule, x_t: &[f64], t: f64, class: Option<usize>) -> Vec<f64> {
        let w = self.posterior_unchecked(schedule, x_t, t, class);
        self.epsilon_from_weights(schedule, x_t, t, &w)
    }

    /// Integrates the PF-ODE through `times` with the exact epsilon.
    pub fn solve_reference(
        &self,
        schedule: &NoiseSchedule,
        x_start: &[f64],
        times: &[f64],
    ) -> Result<ReferenceTrajectory> {
        self.solve_reference_with(schedule, x_start, times, &SolveOptions::default())
    }

    pub fn solve_reference_with(
        &self,
        schedule: &NoiseSchedule,
        x_start: &[f64],
        times: &[f64],
        opts: &SolveOptions,
    ) -> Result<ReferenceTrajectory> {
        if x_start.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x_start.len(),
            });
        }
        self.check_label(opts.class)?;
        if times.is_empty() {
            return Err(Error::Grid("empty time grid".into()));
        }
        for w in times.windows(2) {
            if !(w[1] <= w[0]) {
                return Err(Error::Grid(format!("times must be descending, got {} then {}", w[0], w[1])));
            }
        }
        if times[0] > schedule.t_max || times[times.len() - 1] < 0.0 {
            return Err(Error::Grid(format!(
                "times must lie in [0, {}], got [{}, {}]",
                schedule.t_max,
                times[times.len() - 1],
                times[0]
            )));
        }
        let mut states = vec![x_start.to_vec()];
        let mut rewards = Vec::with_capacity(times.len() - 1);
        let mut x = x_start.to_vec();
        for w in times.windows(2) {
            let (next, reward) = self.integrate_interval(schedule, &x, w[0], w[1], opts);
            x = next;
            states.push(x.clone());
            rewards.push(reward);
        }
        Ok(ReferenceTrajectory {
            times: times.to_vec(),
            states,
            rewards,
        })
    }

    /// Heun integration of `dy/du = eps` with `y = x / alpha`, `u = sigma / alpha`,
    /// plus trapezoidal quadrature of the reward `int eps du` on the same sub-grid.
    /// The integral over `u` equals the one over `lambda` weighted by `exp(-lambda)`
    /// and stays finite when the interval ends at `sigma = 0`.
    fn integrate_interval(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: f64,
        r: f64,
        opts: &SolveOptions,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut reward = vec![0.0; self.dim];
        if r == t {
            return (x.to_vec(), reward);
        }
        let (ut, ur) = (schedule.scaled_sigma(t), schedule.scaled_sigma(r));
        let us = sub_grid(ut, ur, opts.substeps.max(1), opts.spacing);
        let alpha_t = schedule.alpha(t);
        let mut y: Vec<f64> = x.iter().map(|v| v / alpha_t).collect();
        let eps_at = |y: &[f64], u: f64| -> Vec<f64> {
            let tt = schedule.t_of_scaled_sigma(u);
            let a = schedule.alpha(tt);
            let xs: Vec<f64> = y.iter().map(|v| a * v).collect();
            self.epsilon_internal(schedule, &xs, tt, opts.class)
        };
        let mut e0 = eps_at(&y, us[0]);
        for w in us.windows(2) {
            let h = w[0] - w[1];
            let pred: Vec<f64> = y.iter().zip(&e0).map(|(y, e)| y - h * e).collect();
            let ep = eps_at(&pred, w[1]);
            for ((yv, a), b) in y.iter_mut().zip(&e0).zip(&ep) {
                *yv -= 0.5 * h * (a + b);
            }
            let e1 = eps_at(&y, w[1]);
            for ((rv, a), b) in reward.iter_mut().zip(&e0).zip(&e1) {
                *rv += 0.5 * h * (a + b);
            }
            e0 = e1;
        }
        let alpha_r = schedule.alpha(r);
        (y.iter().map(|v| alpha_r * v).collect(), reward)
    }

    /// Ground-truth value `h(x_t, t) = x_t / alpha_t - x0(x_t)`, where the solution
    /// point is the scaled PF-ODE state at `t_min`.
    pub fn exact_value(&self, schedule: &NoiseSchedule, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        self.exact_value_with(schedule, x_t, t, &SolveOptions::default())
    }

    pub fn exact_value_with(
        &self,
        schedule: &NoiseSchedule,
        x_t: &[f64],
        t: f64,
        opts: &SolveOptions,
    ) -> Result<Vec<f64>> {
        schedule.check_time("t", t)?;
        let x0 = self.solution_point(schedule, x_t, t, opts)?;
        let a = schedule.alpha(t);
        Ok(x_t.iter().zip(&x0).map(|(x, s)| x / a - s).collect())
    }

    /// PF-ODE solution point reached from `(x_t, t)`, in units of `x / alpha` at `t_min`.
    pub fn solution_point(
        &self,
        schedule: &NoiseSchedule,
        x_t: &[f64],
        t: f64,
        opts: &SolveOptions,
    ) -> Result<Vec<f64>> {
        let traj = self.solve_reference_with(schedule, x_t, &[t, schedule.t_min], opts)?;
        let a = schedule.alpha(schedule.t_min);
        Ok(traj.states[1].iter().map(|v| v / a).collect())
    }
}

fn sub_grid(ut: f64, ur: f64, n: usize, spacing: SubSpacing) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=n)
        .map(|i| {
            let a = i as f64 / n as f64;
            match spacing {
                SubSpacing::Uniform => ut + a * (ur - ut),
                SubSpacing::Power(rho) => {
                    let (h, l) = (ut.powf(1.0 / rho), ur.powf(1.0 / rho));
                    (h + a * (l - h)).powf(rho)
                }
            }
        })
        .collect();
    g[0] = ut;
    g[n] = ur;
    g
}

/// Sub-grid placement in the effective noise level `u = sigma / alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SubSpacing {
    Uniform,
    Power(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Sub-steps per interval of the outer grid.
    pub substeps: usize,
    pub spacing: SubSpacing,
    pub class: Option<usize>,
}

pub const DEFAULT_SUBSTEPS: usize = 1024;

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            substeps: DEFAULT_SUBSTEPS,
            spacing: SubSpacing::Power(3.0),
            class: None,
        }
    }
}

impl SolveOptions {
    pub fn with_substeps(substeps: usize) -> Self {
        Self {
            substeps,
            ..Self::default()
        }
    }
}

/// A PF-ODE trajectory with per-interval rewards `int exp(-lambda) eps d lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub rewards: Vec<Vec<f64>>,
}

impl ReferenceTrajectory {
    pub fn total_reward(&self) -> Vec<f64> {
        let dim = self.states[0].len();
        self.rewards.iter().fold(vec![0.0; dim], |mut acc, r| {
            acc.iter_mut().zip(r).for_each(|(a, b)| *a += b);
            acc
        })
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ve() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    // Independent brute force: plain densities, no log-domain tricks.
    fn brute_posterior_mean_eps(o: &MixtureOracle, s: &NoiseSchedule, x: &[f64], t: f64, class: Option<usize>) -> Vec<f64> {
        let (a, sg) = (s.alpha(t), s.sigma(t));
        let mut num = vec![0.0; o.dim()];
        let mut den = 0.0;
        for c in o.components() {
            if class.is_some_and(|l| l != c.label) {
                continue;
            }
            let v = a * a * c.std * c.std + sg * sg;
            let sq: f64 = x.iter().zip(&c.mean).map(|(x, m)| (x - a * m).powi(2)).sum();
            let p = c.weight * (2.0 * std::f64::consts::PI * v).powf(-(o.dim() as f64) / 2.0) * (-sq / (2.0 * v)).exp();
            den += p;
            for ((n, x), m) in num.iter_mut().zip(x).zip(&c.mean) {
                // E[(x - a x0)/sigma | x, k] = sigma (x - a mu) / v
                *n += p * sg * (x - a * m) / v;
            }
        }
        num.iter().map(|n| n / den).collect()
    }

    #[test]
    fn exact_epsilon_examples() {
        let s = ve();
        let g = MixtureOracle::single_gaussian(1, 1.0).unwrap();
        let e = g.exact_epsilon(&s, &[2.0], 1.0, None).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-12);

        let pts = MixtureOracle::two_gaussians(1.0, 1e-6).unwrap();
        assert!(pts.exact_epsilon(&s, &[0.0], 1.0, None).unwrap()[0].abs() < 1e-15);
        let e = pts.exact_epsilon(&s, &[1.0], 1.0, None).unwrap()[0];
        let w_plus = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((e - 2.0 * (1.0 - w_plus)).abs() < 1e-9);
        assert!((e - 0.2384).abs() < 1e-4);

        let zero = NoiseSchedule::ve(0.0, 1.0).unwrap();
        assert!(matches!(g.exact_epsilon(&zero, &[1.0], 0.0, None), Err(Error::DegenerateTime { .. })));
    }

    #[test]
    fn exact_epsilon_matches_brute_force() {
        let s = ve();
        let o = MixtureOracle::ring(8, 2.0, 0.2).unwrap();
        let mut r = rng::stream(3, 99, 0, 0);
        for _ in 0..1000 {
            let t = (0.05f64.ln() + (10.0f64.ln() - 0.05f64.ln()) * rand::Rng::random::<f64>(&mut r)).exp();
            // diffused data keeps every class density representable in plain f64
            let x0 = o.sample_data(1, None, rand::Rng::random::<u64>(&mut r)).unwrap().x;
            let x: Vec<f64> = (0..2).map(|j| x0[[0, j]] + t * rng::normal(&mut r)).collect();
            let got = o.exact_epsilon(&s, &x, t, None).unwrap();
            let want = brute_posterior_mean_eps(&o, &s, &x, t, None);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-8, "t={t} x={x:?}: {g} vs {w}");
            }
            let c = Some(3);
            let got = o.exact_epsilon(&s, &x, t, c).unwrap();
            let want = brute_posterior_mean_eps(&o, &s, &x, t, c);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn construction_validates() {
        assert!(MixtureOracle::new(vec![]).is_err());
        let bad_w = vec![MixtureComponent { mean: vec![0.0], std: 1.0, label: 0, weight: 0.5 }];
        assert!(MixtureOracle::new(bad_w).is_err());
        let gap = vec![
            MixtureComponent { mean: vec![0.0], std: 1.0, label: 0, weight: 0.5 },
            MixtureComponent { mean: vec![1.0], std: 1.0, label: 2, weight: 0.5 },
        ];
        assert!(MixtureOracle::new(gap).is_err());
        let o = MixtureOracle::ring(8, 2.0, 0.1).unwrap();
        let total: f64 = o.components().iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-10);
        assert_eq!(o.n_classes(), 8);
    }

    #[test]
    fn sample_data_examples() {
        let o = MixtureOracle::two_gaussians(1.0, 1e-6).unwrap();
        let d = o.sample_data(10_000, None, 7).unwrap();
        let mean = d.x.column(0).sum() / 10_000.0;
        // stdev of the mean is 1/sqrt(n) = 0.01; 0.05 is five sigma.
        assert!(mean.abs() < 0.05, "{mean}");

        let only = o.sample_data(500, Some(1), 7).unwrap();
        assert!(only.x.column(0).iter().all(|v| (v - 1.0).abs() < 6e-6));
        assert!(only.labels.iter().all(|&l| l == 1));

        assert_eq!(o.sample_data(50, None, 3).unwrap(), o.sample_data(50, None, 3).unwrap());
        assert!(matches!(o.sample_data(5, Some(4), 3), Err(Error::Config(_))));
    }

    #[test]
    fn data_std_of_ring() {
        let o = MixtureOracle::ring(8, 2.0, 0.1).unwrap();
        // radius^2 / 2 per coordinate plus component variance
        assert!((o.data_std() - (2.0 + 0.01f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn reference_solution_of_single_gaussian() {
        let s = ve();
        let g = MixtureOracle::single_gaussian(1, 1.0).unwrap();
        let traj = g.solve_reference(&s, &[2f64.sqrt()], &[1.0, 0.0]).unwrap();
        assert!((traj.last()[0] - 1.0).abs() < 1e-3);
        assert!((traj.rewards[0][0] - (2f64.sqrt() - 1.0)).abs() < 1e-3);
        let z = g.solve_reference(&s, &[0.7], &[1.0, 1.0]).unwrap();
        assert_eq!(z.rewards[0], vec![0.0]);
        assert!(g.solve_reference(&s, &[0.7], &[0.5, 1.0]).is_err());
    }

    #[test]
    fn reference_matches_analytic_transport() {
        let s = ve();
        let g = MixtureOracle::single_gaussian(1, 1.0).unwrap();
        for &(t, r, x) in &[(4.0, 0.01, 1.3), (80.0, 0.002, -40.0), (1.0, 0.5, 0.2)] {
            let traj = g.solve_reference(&s, &[x], &[t, r]).unwrap();
            let exact = x * ((1.0 + r * r) / (1.0 + t * t)).sqrt();
            assert!((traj.last()[0] - exact).abs() < 1e-4 * (1.0 + exact.abs()), "{t}->{r}: {} vs {exact}", traj.last()[0]);
        }
    }

    #[test]
    fn exact_value_examples() {
        let s = ve();
        let g = MixtureOracle::single_gaussian(1, 1.0).unwrap();
        assert_eq!(g.exact_value(&s, &[0.4], s.t_min).unwrap(), vec![0.0]);
        let h = g.exact_value(&s, &[2f64.sqrt()], 1.0).unwrap()[0];
        assert!((h - (2f64.sqrt() - 1.0)).abs() < 1e-3);
        let h2 = g.exact_value(&s, &[2.0 * 2f64.sqrt()], 1.0).unwrap()[0];
        assert!((h2 - 2.0 * h).abs() < 1e-9);
    }

    #[test]
    fn oracle_bellman_identity_and_additivity() {
        let s = ve();
        let o = MixtureOracle::ring(8, 2.0, 0.2).unwrap();
        let opts = SolveOptions::default();
        let x_t = vec![1.7, -0.4];
        let (t, r, q) = (3.0, 0.8, 0.1);
        let traj = o.solve_reference_with(&s, &x_t, &[t, r, q], &opts).unwrap();
        let h_t = o.exact_value_with(&s, &x_t, t, &opts).unwrap();
        let h_r = o.exact_value_with(&s, &traj.states[1], r, &opts).unwrap();
        for i in 0..2 {
            let res = h_t[i] - traj.rewards[0][i] - h_r[i];
            assert!(res.abs() < 1e-3, "residual {res}");
        }
        let joined = o.solve_reference_with(&s, &x_t, &[t, q], &opts).unwrap();
        for i in 0..2 {
            let split = traj.rewards[0][i] + traj.rewards[1][i];
            assert!((split - joined.rewards[0][i]).abs() < 2e-3);
        }
    }
}
