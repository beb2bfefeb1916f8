//! One-step, re-noised multistep, phased deterministic and guided sampling.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Denoiser;
use crate::rng::{self, tag};
use crate::schedule::{NoiseSchedule, Spacing};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    OneStep,
    StochasticMultistep,
    PhasedDeterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplePlan {
    pub mode: SampleMode,
    /// Re-noising times for the stochastic mode, edges for the phased mode.
    #[serde(default)]
    pub times: Vec<f64>,
    #[serde(default = "one")]
    pub eta: f64,
    /// Guidance strength against the retained half-run weights; `None` is unguided.
    #[serde(default)]
    pub guidance: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl Default for SamplePlan {
    fn default() -> Self {
        Self {
            mode: SampleMode::OneStep,
            times: Vec::new(),
            eta: 1.0,
            guidance: None,
        }
    }
}

/// `n` prior draws `sigma(t_max) * eps`, one stream per row.
pub fn sample_prior(schedule: &NoiseSchedule, n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let s = schedule.sigma(schedule.t_max);
    let mut x = Array2::zeros((n, dim));
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        let mut g = rng::stream(seed, tag::PRIOR, i as u64, 0);
        row.iter_mut().for_each(|v| *v = s * rng::normal(&mut g));
    }
    x
}

pub fn one_step(den: &dyn Denoiser, schedule: &NoiseSchedule, x_t: ArrayView2<'_, f64>, labels: Option<&[usize]>) -> Result<Array2<f64>> {
    let t = vec![schedule.t_max; x_t.nrows()];
    den.predict_x0(x_t, &t, labels)
}

/// Predict, re-noise to each of `times` with fresh noise, predict again.
pub fn stochastic_multistep(
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x_t: ArrayView2<'_, f64>,
    times: &[f64],
    labels: Option<&[usize]>,
    seed: u64,
) -> Result<Array2<f64>> {
    let mut prev = schedule.t_max;
    for &t in times {
        if !(t < prev) {
            return Err(Error::Grid(format!("re-noising times must descend below {prev}, got {t}")));
        }
        schedule.check_time("t", t)?;
        prev = t;
    }
    let mut x0 = one_step(den, schedule, x_t, labels)?;
    for (k, &t) in times.iter().enumerate() {
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        let mut x = x0.clone();
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            let mut g = rng::stream(seed, tag::RENOISE, k as u64, i as u64);
            row.iter_mut().for_each(|v| *v = a * *v + s * rng::normal(&mut g));
        }
        x0 = den.predict_x0(x.view(), &vec![t; x.nrows()], labels)?;
    }
    Ok(x0)
}

/// Euler map along the ODE from `t` to `s` through the prediction `d`:
/// `alpha_s d + sigma_s (x_t - alpha_t d) / sigma_t`.
pub fn phased_combine(schedule: &NoiseSchedule, x_t: ArrayView2<'_, f64>, d: ArrayView2<'_, f64>, t: f64, s: f64) -> Array2<f64> {
    let (a_t, s_t) = (schedule.alpha(t), schedule.sigma(t));
    let (a_s, s_s) = (schedule.alpha(s), schedule.sigma(s));
    Zip::from(&x_t).and(&d).map_collect(|&x, &d| a_s * d + s_s * (x - a_t * d) / s_t)
}

pub fn phased_step(
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x_t: ArrayView2<'_, f64>,
    t: f64,
    s: f64,
    labels: Option<&[usize]>,
) -> Result<Array2<f64>> {
    if s > t || s < 0.0 {
        return Err(Error::Ordering { t, r: s });
    }
    if s == t {
        return Ok(x_t.to_owned());
    }
    let d = den.predict_x0(x_t, &vec![t; x_t.nrows()], labels)?;
    Ok(phased_combine(schedule, x_t, d.view(), t, s))
}

/// Times visited by edge-skipping: `s_1, eta s_2, ..., eta s_{n-1}, s_n`.
pub fn edge_visits(edges: &[f64], eta: f64) -> Result<Vec<f64>> {
    if edges.len() < 2 {
        return Err(Error::Grid("need at least two edges".into()));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::Range {
            what: "eta",
            value: eta,
            lo: 0.0,
            hi: 1.0,
        });
    }
    if edges.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Grid(format!("edges must be strictly descending, got {edges:?}")));
    }
    let n = edges.len();
    Ok(edges
        .iter()
        .enumerate()
        .map(|(i, &s)| if i == 0 || i == n - 1 || eta == 1.0 { s } else { eta * s })
        .collect())
}

/// Edges from `t_max` to `t_min`, `n` points.
pub fn default_edges(schedule: &NoiseSchedule, n: usize, spacing: Spacing) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Grid("need at least two edges".into()));
    }
    Ok(schedule.grid(spacing, schedule.t_max, schedule.t_min, n - 1))
}

pub fn check_edges(schedule: &NoiseSchedule, edges: &[f64]) -> Result<()> {
    edge_visits(edges, 1.0)?;
    if edges[0] != schedule.t_max || edges[edges.len() - 1] != schedule.t_min {
        return Err(Error::Grid(format!(
            "edges must run from t_max = {} to t_min = {}, got {edges:?}",
            schedule.t_max, schedule.t_min
        )));
    }
    Ok(())
}

pub fn phased_sample(
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x_t: ArrayView2<'_, f64>,
    edges: &[f64],
    eta: f64,
    labels: Option<&[usize]>,
) -> Result<Array2<f64>> {
    check_edges(schedule, edges)?;
    let visits = edge_visits(edges, eta)?;
    let mut x = x_t.to_owned();
    for w in visits.windows(2) {
        x = phased_step(den, schedule, x.view(), w[0], w[1], labels)?;
    }
    Ok(x)
}

/// `D* + omega (D - D*)`: `omega = 1` is the unguided model, `omega = 0` the reference.
pub struct Guided<'a> {
    pub net: &'a dyn Denoiser,
    pub star: &'a dyn Denoiser,
    pub omega: f64,
}

impl<'a> Guided<'a> {
    pub fn new(net: &'a dyn Denoiser, star: &'a dyn Denoiser, omega: f64) -> Result<Self> {
        if net.dim() != star.dim() {
            return Err(Error::Dimension {
                expected: net.dim(),
                got: star.dim(),
            });
        }
        if !(omega >= 0.0 && omega.is_finite()) {
            return Err(Error::Config(format!("guidance strength must be >= 0, got {omega}")));
        }
        Ok(Self { net, star, omega })
    }
}

pub fn guided_combine(d: f64, d_star: f64, omega: f64) -> f64 {
    d_star + omega * (d - d_star)
}

impl Denoiser for Guided<'_> {
    fn dim(&self) -> usize {
        self.net.dim()
    }

    fn predict_x0(&self, x: ArrayView2<'_, f64>, t: &[f64], labels: Option<&[usize]>) -> Result<Array2<f64>> {
        if self.omega == 1.0 {
            return self.net.predict_x0(x, t, labels);
        }
        if self.omega == 0.0 {
            return self.star.predict_x0(x, t, labels);
        }
        let d = self.net.predict_x0(x, t, labels)?;
        let d_star = self.star.predict_x0(x, t, labels)?;
        Ok(Zip::from(&d).and(&d_star).map_collect(|&a, &b| guided_combine(a, b, self.omega)))
    }
}

pub fn guided_predict(
    net: &dyn Denoiser,
    star: &dyn Denoiser,
    x: ArrayView2<'_, f64>,
    t: &[f64],
    labels: Option<&[usize]>,
    omega: f64,
) -> Result<Array2<f64>> {
    Guided::new(net, star, omega)?.predict_x0(x, t, labels)
}

/// Runs `plan` from the prior; `star` is required when the plan is guided.
pub fn sample_with_plan(
    net: &dyn Denoiser,
    star: Option<&dyn Denoiser>,
    schedule: &NoiseSchedule,
    plan: &SamplePlan,
    x_t: ArrayView2<'_, f64>,
    labels: Option<&[usize]>,
    seed: u64,
) -> Result<Array2<f64>> {
    let guided;
    let den: &dyn Denoiser = match plan.guidance {
        Some(omega) => {
            let star = star.ok_or_else(|| Error::Config("guided sampling needs the half-run weights".into()))?;
            guided = Guided::new(net, star, omega)?;
            &guided
        }
        None => net,
    };
    match plan.mode {
        SampleMode::OneStep => one_step(den, schedule, x_t, labels),
        SampleMode::StochasticMultistep => stochastic_multistep(den, schedule, x_t, &plan.times, labels, seed),
        SampleMode::PhasedDeterministic => phased_sample(den, schedule, x_t, &plan.times, plan.eta, labels),
    }
}

/// One row per sample, one column per dimension, then the label when present.
pub fn write_samples_csv<W: std::io::Write>(mut w: W, x: ArrayView2<'_, f64>, labels: Option<&[usize]>) -> std::io::Result<()> {
    let mut header: Vec<String> = (0..x.ncols()).map(|j| format!("x{j}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    writeln!(w, "{}", header.join(","))?;
    for (i, row) in x.rows().into_iter().enumerate() {
        let mut cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        if let Some(l) = labels {
            cells.push(l[i].to_string());
        }
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Returns a constant prediction regardless of the input.
    struct Constant(f64);

    impl Denoiser for Constant {
        fn dim(&self) -> usize {
            1
        }

        fn predict_x0(&self, x: ArrayView2<'_, f64>, _t: &[f64], _labels: Option<&[usize]>) -> Result<Array2<f64>> {
            Ok(Array2::from_elem(x.raw_dim(), self.0))
        }
    }

    /// Returns `x / alpha_t` scaled by a time-dependent factor.
    struct Shrink(NoiseSchedule, usize);

    impl Denoiser for Shrink {
        fn dim(&self) -> usize {
            self.1
        }

        fn predict_x0(&self, x: ArrayView2<'_, f64>, t: &[f64], _labels: Option<&[usize]>) -> Result<Array2<f64>> {
            let mut out = x.to_owned();
            for (mut row, &ti) in out.rows_mut().into_iter().zip(t) {
                row.mapv_inplace(|v| v / (1.0 + ti * ti).sqrt() / self.0.alpha(ti));
            }
            Ok(out)
        }
    }

    fn unit_ve() -> NoiseSchedule {
        NoiseSchedule::ve(0.0, 1.0).unwrap()
    }

    #[test]
    fn phased_step_examples() {
        let s = unit_ve();
        let x = array![[1.0]];
        let d = Constant(0.2);
        let out = phased_step(&d, &s, x.view(), 1.0, 0.5, None).unwrap();
        assert!((out[[0, 0]] - 0.6).abs() < 1e-15);
        assert_eq!(phased_step(&d, &s, x.view(), 1.0, 0.0, None).unwrap(), array![[0.2]]);
        assert_eq!(phased_step(&d, &s, x.view(), 1.0, 1.0, None).unwrap(), x);
        assert!(phased_step(&d, &s, x.view(), 0.5, 1.0, None).is_err());
    }

    #[test]
    fn visit_sequences() {
        let v = edge_visits(&[1.0, 3.0 / 6.0, 0.0], 2.0 / 3.0).unwrap();
        assert_eq!(v[0], 1.0);
        assert!((v[1] - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(v[2], 0.0);
        let v = edge_visits(&[1.0, 2.0 / 3.0, 1.0 / 3.0, 0.0], 0.9).unwrap();
        for (a, b) in v.iter().zip([1.0, 0.6, 0.3, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(edge_visits(&[1.0, 0.5], 0.0).is_err());
        assert!(edge_visits(&[1.0, 0.5], 1.5).is_err());
        assert!(edge_visits(&[1.0, 1.0], 0.9).is_err());
    }

    #[test]
    fn eta_one_matches_unscaled_walk() {
        let s = NoiseSchedule::ve(0.002, 4.0).unwrap();
        let d = Shrink(s, 2);
        let edges = default_edges(&s, 5, Spacing::Uniform).unwrap();
        let x = sample_prior(&s, 20, 2, 1);
        let a = phased_sample(&d, &s, x.view(), &edges, 1.0, None).unwrap();
        let mut b = x.clone();
        for w in edges.windows(2) {
            b = phased_step(&d, &s, b.view(), w[0], w[1], None).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn guidance_examples() {
        let net = Constant(1.0);
        let star = Constant(0.6);
        let x = array![[3.0]];
        let g = guided_predict(&net, &star, x.view(), &[1.0], None, 1.2).unwrap();
        assert!((g[[0, 0]] - 1.08).abs() < 1e-12);
        assert_eq!(guided_predict(&net, &star, x.view(), &[1.0], None, 1.0).unwrap(), array![[1.0]]);
        assert_eq!(guided_predict(&net, &star, x.view(), &[1.0], None, 0.0).unwrap(), array![[0.6]]);
        assert!(guided_predict(&net, &star, x.view(), &[1.0], None, -0.5).is_err());
    }

    #[test]
    fn guidance_is_affine_in_omega() {
        let s = NoiseSchedule::ve(0.002, 4.0).unwrap();
        let net = Shrink(s, 1);
        let star = Constant(0.3);
        let x = sample_prior(&s, 1, 1, 4);
        let at = |w: f64| guided_predict(&net, &star, x.view(), &[2.0], None, w).unwrap()[[0, 0]];
        let (a, b, c) = (at(0.5), at(1.5), at(2.5));
        assert!(((c - b) - (b - a)).abs() < 1e-12);
    }

    #[test]
    fn stochastic_reduces_to_one_step() {
        let s = NoiseSchedule::ve(0.002, 4.0).unwrap();
        let d = Shrink(s, 2);
        let x = sample_prior(&s, 8, 2, 3);
        let one = one_step(&d, &s, x.view(), None).unwrap();
        assert_eq!(stochastic_multistep(&d, &s, x.view(), &[], None, 9).unwrap(), one);
        // sigma = 0 at the re-noising time: the second prediction sees one_step's output unchanged
        let z = NoiseSchedule::ve(0.0, 4.0).unwrap();
        let dz = Shrink(z, 2);
        let one = one_step(&dz, &z, x.view(), None).unwrap();
        let two = stochastic_multistep(&dz, &z, x.view(), &[0.0], None, 9).unwrap();
        assert_eq!(two, dz.predict_x0(one.view(), &[0.0; 8], None).unwrap());
        assert!(stochastic_multistep(&d, &s, x.view(), &[5.0], None, 9).is_err());
    }

    #[test]
    fn samples_csv_shape() {
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, array![[1.0, 2.5], [0.0, -1.0]].view(), Some(&[0, 3])).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x0,x1,label\n1.0,2.5,0\n0.0,-1.0,3\n");
    }
}
