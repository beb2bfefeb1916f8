//! The trainable consistency function.
//!
//! A fully-connected network `F` maps `(c_in x / alpha_t, embed(ln u), onehot(label))`
//! to a raw output, and the clean-sample prediction is
//!
//! ```text
//! x0_hat(x, t) = c_skip(u) x / alpha_t + c_out(u) F
//! c_skip(u) = sd^2 / ((u - u_min)^2 + sd^2)
//! c_out(u)  = sd (u - u_min) / sqrt(sd^2 + u^2)
//! ```
//!
//! with `u = sigma_t / alpha_t` and `sd` the data standard deviation. At
//! `t_min` the prediction is `x / alpha_{t_min}` exactly, whatever the
//! parameters are (`x` itself for the variance-exploding schedule).

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, tag};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Sinusoidal frequencies applied to `ln u`.
    pub frequencies: usize,
    /// Zero for an unconditional net.
    pub n_classes: usize,
    pub sigma_data: f64,
}

impl NetSpec {
    pub fn new(dim: usize, sigma_data: f64) -> Self {
        Self {
            dim,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
            frequencies: 16,
            n_classes: 0,
            sigma_data,
        }
    }

    pub fn input_width(&self) -> usize {
        self.dim + 2 * self.frequencies + self.n_classes
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(&self.hidden);
        w.push(self.dim);
        w
    }

    /// Analytic parameter count.
    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return Err(Error::Config(format!("sigma_data must be positive, got {}", self.sigma_data)));
        }
        Ok(())
    }

    fn frequency(&self, k: usize) -> f64 {
        if self.frequencies <= 1 {
            return 1.0;
        }
        0.25 * 32f64.powf(k as f64 / (self.frequencies - 1) as f64)
    }
}

/// Anything that predicts clean samples for a batch of noisy ones.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    /// One row per sample; `t` holds one time per row.
    fn predict_x0(&self, x: ArrayView2<'_, f64>, t: &[f64], labels: Option<&[usize]>) -> Result<Array2<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyNet {
    spec: NetSpec,
    schedule: NoiseSchedule,
    params: Vec<f64>,
}

/// A net's architecture evaluated with someone else's parameters (EMA shadows, θ*).
#[derive(Debug, Clone, Copy)]
pub struct NetView<'a> {
    net: &'a ConsistencyNet,
    params: &'a [f64],
}

/// Activations kept for the reverse pass.
pub struct Tape {
    inputs: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    c_out: Vec<f64>,
}

/// Rows per block when a batch is split for the data-parallel path.
pub const ROW_CHUNK: usize = 64;

impl ConsistencyNet {
    /// Initializes weights from `N(0, 1/fan_in)` and biases at zero.
    pub fn new(spec: NetSpec, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::stream(seed, tag::INIT, 0, 0);
        let mut params = Vec::with_capacity(spec.param_count());
        for w in spec.widths().windows(2) {
            let scale = (1.0 / w[0] as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| scale * rng::normal(&mut r)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        debug_assert_eq!(params.len(), spec.param_count());
        Ok(Self { spec, schedule, params })
    }

    pub fn from_parts(spec: NetSpec, schedule: NoiseSchedule, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::Dimension {
                expected: spec.param_count(),
                got: params.len(),
            });
        }
        Ok(Self { spec, schedule, params })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn view<'a>(&'a self, params: &'a [f64]) -> Result<NetView<'a>> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        Ok(NetView { net: self, params })
    }

    /// `(c_skip, c_out, c_in)` at time `t`; `c_skip` multiplies `x / alpha_t`.
    pub fn preconditioning(&self, t: f64) -> (f64, f64, f64) {
        let sd = self.spec.sigma_data;
        let u = self.schedule.scaled_sigma(t);
        let du = u - self.schedule.scaled_sigma(self.schedule.t_min);
        let c_skip = sd * sd / (du * du + sd * sd);
        let c_out = sd * du / (sd * sd + u * u).sqrt();
        let c_in = 1.0 / (sd * sd + u * u).sqrt();
        (c_skip, c_out, c_in)
    }

    fn check_batch(&self, x: &ArrayView2<'_, f64>, t: &[f64], labels: Option<&[usize]>) -> Result<()> {
        if x.ncols() != self.spec.dim {
            return Err(Error::Dimension {
                expected: self.spec.dim,
                got: x.ncols(),
            });
        }
        if t.len() != x.nrows() {
            return Err(Error::Dimension {
                expected: x.nrows(),
                got: t.len(),
            });
        }
        if let Some(l) = labels {
            if l.len() != x.nrows() {
                return Err(Error::Dimension {
                    expected: x.nrows(),
                    got: l.len(),
                });
            }
            if let Some(bad) = l.iter().find(|&&c| c >= self.spec.n_classes) {
                return Err(Error::Condition(format!(
                    "label {bad} out of range for a net with {} classes",
                    self.spec.n_classes
                )));
            }
        }
        Ok(())
    }

    fn features(&self, x: ArrayView2<'_, f64>, t: &[f64], labels: Option<&[usize]>) -> Array2<f64> {
        let spec = &self.spec;
        let mut f = Array2::zeros((x.nrows(), spec.input_width()));
        for (i, (xr, mut fr)) in x.rows().into_iter().zip(f.rows_mut()).enumerate() {
            let ti = t[i];
            let (_, _, c_in) = self.preconditioning(ti);
            let a = self.schedule.alpha(ti);
            for j in 0..spec.dim {
                fr[j] = c_in * xr[j] / a;
            }
            let lu = self.schedule.scaled_sigma(ti).max(1e-30).ln();
            for k in 0..spec.frequencies {
                let w = spec.frequency(k) * lu;
                fr[spec.dim + 2 * k] = w.sin();
                fr[spec.dim + 2 * k + 1] = w.cos();
            }
            if let Some(l) = labels {
                fr[spec.dim + 2 * spec.frequencies + l[i]] = 1.0;
            }
        }
        f
    }

    fn layer<'p>(&self, params: &'p [f64], layer: usize) -> (ArrayView2<'p, f64>, &'p [f64]) {
        let widths = self.spec.widths();
        let mut off = 0;
        for w in widths.windows(2).take(layer) {
            off += w[0] * w[1] + w[1];
        }
        let (n_in, n_out) = (widths[layer], widths[layer + 1]);
        let w = ArrayView2::from_shape((n_out, n_in), &params[off..off + n_in * n_out]).expect("layer shape");
        let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
        (w, b)
    }

    fn raw_forward(&self, params: &[f64], inputs: &Array2<f64>, keep: bool) -> (Array2<f64>, Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let n_layers = self.spec.hidden.len() + 1;
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let mut h = inputs.clone();
        for l in 0..n_layers {
            let (w, b) = self.layer(params, l);
            let mut z = h.dot(&w.t());
            for mut row in z.rows_mut() {
                row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
            }
            if l + 1 == n_layers {
                return (z, pre, post);
            }
            let act = self.spec.activation;
            let a = z.mapv(|v| act.apply(v));
            if keep {
                pre.push(z);
                post.push(a.clone());
            }
            h = a;
        }
        unreachable!("network has an output layer")
    }

    fn predict_block(
        &self,
        params: &[f64],
        x: ArrayView2<'_, f64>,
        t: &[f64],
        labels: Option<&[usize]>,
        keep: bool,
    ) -> (Array2<f64>, Option<Tape>) {
        let inputs = self.features(x, t, labels);
        let (raw, pre, post) = self.raw_forward(params, &inputs, keep);
        let mut out = Array2::zeros(x.raw_dim());
        let mut c_outs = Vec::with_capacity(t.len());
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let (c_skip, c_out, _) = self.preconditioning(t[i]);
            let a = self.schedule.alpha(t[i]);
            c_outs.push(c_out);
            for j in 0..self.spec.dim {
                // Skip the raw output where c_out vanishes so the boundary stays exact.
                let skip = c_skip * (x[[i, j]] / a);
                row[j] = if c_out == 0.0 { skip } else { skip + c_out * raw[[i, j]] };
            }
        }
        let tape = keep.then_some(Tape {
            inputs,
            pre,
            post,
            c_out: c_outs,
        });
        (out, tape)
    }

    pub(crate) fn predict_with(
        &self,
        params: &[f64],
        x: ArrayView2<'_, f64>,
        t: &[f64],
        labels: Option<&[usize]>,
    ) -> Result<Array2<f64>> {
        self.check_batch(&x, t, labels)?;
        let chunks = par::chunk_ranges(x.nrows(), ROW_CHUNK);
        let blocks = par::map_indexed(chunks.len(), |c| {
            let r = chunks[c].clone();
            let lab = labels.map(|l| &l[r.clone()]);
            self.predict_block(params, x.slice(ndarray::s![r.clone(), ..]), &t[r], lab, false).0
        });
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        if views.is_empty() {
            return Ok(Array2::zeros((0, self.spec.dim)));
        }
        Ok(ndarray::concatenate(Axis(0), &views).expect("blocks share width"))
    }

    /// Forward pass keeping activations; rows are processed as one block.
    pub fn forward_tape(
        &self,
        x: ArrayView2<'_, f64>,
        t: &[f64],
        labels: Option<&[usize]>,
    ) -> Result<(Array2<f64>, Tape)> {
        self.check_batch(&x, t, labels)?;
        let (out, tape) = self.predict_block(&self.params, x, t, labels, true);
        Ok((out, tape.expect("tape requested")))
    }

    /// Parameter gradient of `sum_i <upstream_i, x0_hat_i>`, accumulated into `grad`.
    pub fn backprop_into(&self, tape: &Tape, upstream: ArrayView2<'_, f64>, grad: &mut [f64]) -> Result<()> {
        if upstream.dim() != (tape.inputs.nrows(), self.spec.dim) {
            return Err(Error::Dimension {
                expected: tape.inputs.nrows() * self.spec.dim,
                got: upstream.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(Error::Dimension {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let mut d = upstream.to_owned();
        for (mut row, c) in d.rows_mut().into_iter().zip(&tape.c_out) {
            row.mapv_inplace(|v| v * c);
        }
        let widths = self.spec.widths();
        let n_layers = widths.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in widths.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        for l in (0..n_layers).rev() {
            let h = if l == 0 { &tape.inputs } else { &tape.post[l - 1] };
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let o = offsets[l];
            {
                let (gw, gb) = grad[o..o + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                let mut gw = ArrayViewMut2::from_shape((n_out, n_in), gw).expect("layer shape");
                ndarray::linalg::general_mat_mul(1.0, &d.t(), h, 1.0, &mut gw);
                for row in d.rows() {
                    gb.iter_mut().zip(row).for_each(|(g, v)| *g += v);
                }
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.layer(&self.params, l);
            let mut dh = d.dot(&w);
            let act = self.spec.activation;
            dh.zip_mut_with(&tape.pre[l - 1], |g, &z| *g *= act.derivative(z));
            d = dh;
        }
        Ok(())
    }

    /// Exact reverse-mode gradient of `sum_i <upstream_i, x0_hat(x_i, t_i)>`.
    pub fn backprop(
        &self,
        x: ArrayView2<'_, f64>,
        t: &[f64],
        labels: Option<&[usize]>,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>> {
        let (_, tape) = self.forward_tape(x, t, labels)?;
        let mut g = vec![0.0; self.params.len()];
        self.backprop_into(&tape, upstream, &mut g)?;
        Ok(g)
    }

    /// Single-sample convenience wrapper around [`Denoiser::predict_x0`].
    pub fn predict_one(&self, x: &[f64], t: f64, label: Option<usize>) -> Result<Vec<f64>> {
        let xv = ArrayView2::from_shape((1, x.len()), x).map_err(|_| Error::Dimension {
            expected: self.spec.dim,
            got: x.len(),
        })?;
        let lab = label.map(|l| [l]);
        let out = self.predict_with(&self.params, xv, &[t], lab.as_ref().map(|l| &l[..]))?;
        Ok(out.row(0).to_vec())
    }
}

impl Denoiser for ConsistencyNet {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn predict_x0(&self, x: ArrayView2<'_, f64>, t: &[f64], labels: Option<&[usize]>) -> Result<Array2<f64>> {
        self.predict_with(&self.params, x, t, labels)
    }
}

impl Denoiser for NetView<'_> {
    fn dim(&self) -> usize {
        self.net.spec.dim
    }

    fn predict_x0(&self, x: ArrayView2<'_, f64>, t: &[f64], labels: Option<&[usize]>) -> Result<Array2<f64>> {
        self.net.predict_with(self.params, x, t, labels)
    }
}

/// Exponential moving average of a parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaShadow {
    pub decay: f64,
    pub params: Vec<f64>,
    pub updates: u64,
}

impl EmaShadow {
    pub fn new(decay: f64, params: &[f64]) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay must be in [0, 1], got {decay}")));
        }
        Ok(Self {
            decay,
            params: params.to_vec(),
            updates: 0,
        })
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        let b = self.decay;
        for (s, p) in self.params.iter_mut().zip(params) {
            *s = b * *s + (1.0 - b) * p;
        }
        self.updates += 1;
        Ok(())
    }
}

pub fn ema_update(shadow: &mut EmaShadow, net: &ConsistencyNet) -> Result<()> {
    shadow.update(net.params())
}

/// Adam with linear learning-rate warmup and optional inverse-square-root decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: u64,
    /// Past this step the rate is scaled by `sqrt(decay_ref / step)`.
    pub decay_ref: Option<u64>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64, warmup: u64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup,
            decay_ref: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let k = self.step as f64;
        let warm = if self.warmup == 0 { 1.0 } else { (k / self.warmup as f64).min(1.0) };
        let decay = match self.decay_ref {
            Some(r) if self.step > r => (r as f64 / k).sqrt(),
            _ => 1.0,
        };
        let lr = self.lr * warm * decay;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powf(k), 1.0 - b2.powf(k));
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn small_net(seed: u64, n_classes: usize) -> ConsistencyNet {
        let spec = NetSpec {
            dim: 2,
            hidden: vec![8, 6],
            activation: Activation::Silu,
            frequencies: 3,
            n_classes,
            sigma_data: 0.7,
        };
        let mut net = ConsistencyNet::new(spec, NoiseSchedule::default(), seed).unwrap();
        // non-zero biases so every parameter matters in the checks
        let n = net.params.len();
        let mut r = rng::stream(seed, 77, 0, 0);
        for p in net.params_mut().iter_mut().take(n) {
            *p += 0.1 * rng::normal(&mut r);
        }
        net
    }

    #[test]
    fn param_count_is_analytic() {
        let spec = NetSpec::new(2, 1.0);
        let n_in = 2 + 32;
        let expected = n_in * 128 + 128 + 2 * (128 * 128 + 128) + 128 * 2 + 2;
        assert_eq!(spec.param_count(), expected);
        let net = ConsistencyNet::new(spec, NoiseSchedule::default(), 0).unwrap();
        assert_eq!(net.params().len(), expected);
    }

    #[test]
    fn boundary_holds_exactly() {
        let net = small_net(1, 0);
        let s = *net.schedule();
        let mut r = rng::stream(5, 1, 0, 0);
        let x = Array2::from_shape_fn((1000, 2), |_| 10.0 * rng::normal(&mut r));
        let t = vec![s.t_min; 1000];
        let out = net.predict_x0(x.view(), &t, None).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn zero_params_give_skip_only() {
        let mut net = small_net(2, 0);
        net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let x = ndarray::array![[1.5, -2.0]];
        let t = 3.0;
        let (c_skip, _, _) = net.preconditioning(t);
        let out = net.predict_x0(x.view(), &[t], None).unwrap();
        assert_eq!(out, x.mapv(|v| c_skip * v));
    }

    #[test]
    fn unknown_label_is_rejected() {
        let net = small_net(3, 2);
        assert!(matches!(net.predict_one(&[0.0, 0.0], 1.0, Some(2)), Err(Error::Condition(_))));
        assert!(net.predict_one(&[0.0, 0.0], 1.0, Some(1)).is_ok());
    }

    fn directional_fd(net: &ConsistencyNet, x: &Array2<f64>, t: &[f64], labels: Option<&[usize]>, up: &Array2<f64>, dir: &[f64]) -> f64 {
        let h = 1e-5;
        let eval = |sign: f64| {
            let p: Vec<f64> = net.params().iter().zip(dir).map(|(p, d)| p + sign * h * d).collect();
            let out = net.view(&p).unwrap().predict_x0(x.view(), t, labels).unwrap();
            (&out * up).sum()
        };
        (eval(1.0) - eval(-1.0)) / (2.0 * h)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, classes) in [(4u64, 0usize), (5, 3)] {
            let net = small_net(seed, classes);
            let mut r = rng::stream(seed, 2, 0, 0);
            let x = Array2::from_shape_fn((5, 2), |_| 2.0 * rng::normal(&mut r));
            let t = vec![0.01, 0.3, 1.0, 7.0, 60.0];
            let labels: Vec<usize> = (0..5).map(|i| i % classes.max(1)).collect();
            let labels = (classes > 0).then_some(&labels[..]);
            let up = Array2::from_shape_fn((5, 2), |_| rng::normal(&mut r));
            let g = net.backprop(x.view(), &t, labels, up.view()).unwrap();
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let dir = rng::normal_vec(&mut r, g.len());
                let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
                let fd = directional_fd(&net, &x, &t, labels, &up, &dir);
                worst = worst.max((analytic - fd).abs() / analytic.abs().max(1e-8));
            }
            assert!(worst < 1e-4, "max relative error {worst}");
        }
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let net = small_net(6, 0);
        let x = ndarray::array![[0.3, 0.2]];
        let g = net.backprop(x.view(), &[1.0], None, Array2::zeros((1, 2)).view()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_raw_net_gradient_is_c_out_times_output_layer_grad() {
        // With raw_net identically zero only the output bias affects the output
        // linearly; its gradient against e_k is c_out at row k.
        let mut net = small_net(7, 0);
        net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let x = ndarray::array![[0.5, -0.5]];
        let t = 2.0;
        let (_, c_out, _) = net.preconditioning(t);
        let up = ndarray::array![[0.0, 1.0]];
        let g = net.backprop(x.view(), &[t], None, up.view()).unwrap();
        let n = g.len();
        assert_eq!(g[n - 2], 0.0);
        assert!((g[n - 1] - c_out).abs() < 1e-15);
    }

    #[test]
    fn chunked_prediction_matches_single_rows() {
        let net = small_net(8, 0);
        let mut r = rng::stream(8, 3, 0, 0);
        let x = Array2::from_shape_fn((150, 2), |_| rng::normal(&mut r));
        let t: Vec<f64> = (0..150).map(|i| 0.01 + i as f64 * 0.3).collect();
        let all = net.predict_x0(x.view(), &t, None).unwrap();
        let seq = par::sequential(|| net.predict_x0(x.view(), &t, None).unwrap());
        assert_eq!(all, seq);
        for i in [0, 63, 64, 149] {
            let one = net.predict_one(&x.row(i).to_vec(), t[i], None).unwrap();
            for j in 0..2 {
                assert!((one[j] - all[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ema_examples() {
        let theta = vec![1.0, -2.0, 3.0];
        let mut e = EmaShadow::new(0.0, &[0.0, 0.0, 0.0]).unwrap();
        e.update(&theta).unwrap();
        assert_eq!(e.params, theta);

        let mut e = EmaShadow::new(1.0, &[5.0, 5.0, 5.0]).unwrap();
        e.update(&theta).unwrap();
        assert_eq!(e.params, vec![5.0; 3]);

        let start = vec![0.0, 0.0, 0.0];
        let mut e = EmaShadow::new(0.99, &start).unwrap();
        let dist = |a: &[f64]| a.iter().zip(&theta).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let d0 = dist(&start);
        for _ in 0..100 {
            e.update(&theta).unwrap();
        }
        let ratio = dist(&e.params) / d0;
        assert!((ratio / 0.99f64.powi(100) - 1.0).abs() < 1e-9);
        assert_eq!(e.updates, 100);
        assert!(EmaShadow::new(1.5, &theta).is_err());
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1, 10);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn adam_decay_scales_late_steps() {
        // First Adam steps move each coordinate by about lr; compare at step 400.
        let mut a = Adam::new(1, 0.1, 0);
        let mut b = Adam::new(1, 0.1, 0);
        b.decay_ref = Some(100);
        let (mut pa, mut pb) = (vec![0.0], vec![0.0]);
        for _ in 0..399 {
            a.step(&mut pa, &[1.0]);
            b.step(&mut pb, &[1.0]);
        }
        let (qa, qb) = (pa[0], pb[0]);
        a.step(&mut pa, &[1.0]);
        b.step(&mut pb, &[1.0]);
        let ratio = (pb[0] - qb) / (pa[0] - qa);
        assert!((ratio - 0.5).abs() < 1e-9, "{ratio}");
    }
}
