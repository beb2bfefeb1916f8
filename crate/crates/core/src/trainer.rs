//! Consistency training: timestep sampling, progressive and phased `r`
//! mapping, target construction, weighted loss and the training loop.

use std::io::Write;

use ndarray::{s, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::bellman_residual;
use crate::metrics::sliced_wasserstein;
use crate::net::{Adam, ConsistencyNet, Denoiser, EmaShadow, ROW_CHUNK};
use crate::oracle::{LabeledSamples, MixtureOracle};
use crate::par;
use crate::rng::{self, tag};
use crate::sampler::{check_edges, one_step, phased_combine, phased_sample, sample_prior, stochastic_multistep};
use crate::schedule::{conditional_epsilon, ddim_step, NoiseSchedule};
use crate::target::{weighted_epsilon, TargetMode};

/// The `n(t)` factor of the progressive map; must lie in `(0, 1]` and be monotone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NFn {
    Constant(f64),
    /// `(t / t_max)^power`, clamped below at `1e-3`.
    Power(f64),
}

impl NFn {
    pub fn eval(&self, schedule: &NoiseSchedule, t: f64) -> f64 {
        match *self {
            NFn::Constant(c) => c,
            NFn::Power(p) => (t / schedule.t_max).powf(p).clamp(1e-3, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// `r = ReLU(1 - n(t) / q^floor(iter/d))` scaled into the phase.
    Progressive,
    /// `r = t (1 - 1/k)` for every iteration.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaMinus {
    StopGrad,
    Ema(f64),
}

/// How `x_r` is formed from `x_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XrMode {
    /// First-order solver step with the estimated epsilon.
    SolverStep,
    /// `alpha_r x0 + sigma_r eps` with the sampled noise; the fitting target
    /// carries the reward difference `(u_t - u_r)(eps - eps_hat)`.
    SharedNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// `sqrt(|a - b|^2 + c^2) - c`; `None` uses `c = 0.03 sqrt(dim)`.
    PseudoHuber(Option<f64>),
    SquaredL2,
}

impl Distance {
    fn c(&self, dim: usize) -> f64 {
        match *self {
            Distance::PseudoHuber(Some(c)) => c,
            _ => 0.03 * (dim as f64).sqrt(),
        }
    }

    /// Value and gradient with respect to `a`.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
        let diff: Vec<f64> = a.iter().zip(b).map(|(a, b)| a - b).collect();
        let sq: f64 = diff.iter().map(|d| d * d).sum();
        match self {
            Distance::SquaredL2 => (sq, diff.iter().map(|d| 2.0 * d).collect()),
            Distance::PseudoHuber(_) => {
                let c = self.c(a.len());
                let root = (sq + c * c).sqrt();
                (root - c, diff.iter().map(|d| d / root).collect())
            }
        }
    }
}

/// Where variance-reduced references come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefSource {
    /// The generating sample plus the next `n - 1` batch members (cyclically).
    InBatch(usize),
    /// The generating sample plus a fresh pool of this many data draws per iteration.
    Pool(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalPlan {
    /// Zero disables periodic evaluation.
    pub every: u64,
    pub samples: usize,
    pub projections: usize,
    /// Re-noising time of the two-step sampler.
    pub two_step_time: f64,
    pub bellman_t: f64,
    pub bellman_r: f64,
    pub bellman_points: usize,
    /// Stop once the one-step SW distance drops below this value.
    pub stop_below: Option<f64>,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self {
            every: 500,
            samples: 2000,
            projections: 64,
            two_step_time: 1.0,
            bellman_t: 2.0,
            bellman_r: 1.0,
            bellman_points: 64,
            stop_below: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub p_mean: f64,
    pub p_std: f64,
    pub q: f64,
    pub d: u64,
    pub n_fn: NFn,
    pub delta: f64,
    pub partition: Partition,
    /// Phase edges, `t_max` first and `t_min` last; `None` is continuous mode.
    pub edges: Option<Vec<f64>>,
    pub target_mode: TargetMode,
    pub refs: RefSource,
    pub conditional: bool,
    pub theta_minus: ThetaMinus,
    pub xr_mode: XrMode,
    pub distance: Distance,
    pub lr: f64,
    pub warmup: u64,
    /// Inverse-square-root learning-rate decay past this iteration; `None` keeps it constant.
    pub lr_decay_ref: Option<u64>,
    pub ema_decay: f64,
    pub eval: EvalPlan,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            p_mean: -1.1,
            p_std: 2.0,
            q: 1.25,
            d: 200,
            n_fn: NFn::Constant(1.0),
            delta: 1e-4,
            partition: Partition::Progressive,
            edges: None,
            target_mode: TargetMode::OneShot,
            refs: RefSource::InBatch(64),
            conditional: false,
            theta_minus: ThetaMinus::StopGrad,
            xr_mode: XrMode::SolverStep,
            distance: Distance::PseudoHuber(None),
            lr: 1e-3,
            warmup: 100,
            lr_decay_ref: None,
            ema_decay: 0.999,
            eval: EvalPlan::default(),
        }
    }
}

impl TrainPlan {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.p_std >= 0.0 && self.p_mean.is_finite()) {
            return bad(format!("p_std must be >= 0, got {}", self.p_std));
        }
        if !(self.q > 1.0) {
            return bad(format!("q must exceed 1, got {}", self.q));
        }
        if self.d == 0 {
            return bad("d must be at least 1".into());
        }
        if !(self.delta > 0.0) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        match self.n_fn {
            NFn::Constant(c) if !(c > 0.0 && c <= 1.0) => return bad(format!("constant n(t) must be in (0, 1], got {c}")),
            NFn::Power(p) if !(p >= 0.0) => return bad(format!("n(t) power must be >= 0, got {p}")),
            _ => {}
        }
        if let Partition::Fixed(0) = self.partition {
            return bad("fixed partition needs k >= 1".into());
        }
        match self.refs {
            RefSource::InBatch(0) => return bad("in-batch reference count must be >= 1".into()),
            RefSource::Pool(_) | RefSource::InBatch(_) => {}
        }
        if let ThetaMinus::Ema(b) = self.theta_minus {
            if !(0.0..=1.0).contains(&b) {
                return bad(format!("target EMA decay must be in [0, 1], got {b}"));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must be in [0, 1], got {}", self.ema_decay));
        }
        if self.lr_decay_ref == Some(0) {
            return bad("lr_decay_ref must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if let Some(e) = &self.edges {
            check_edges(schedule, e).map_err(|e| Error::Config(e.to_string()))?;
            if self.xr_mode == XrMode::SharedNoise {
                return bad("shared-noise x_r is only defined for continuous mode".into());
            }
        }
        Ok(())
    }

    /// Greatest edge strictly below `t`, or `t_min` in continuous mode.
    pub fn phase_floor(&self, schedule: &NoiseSchedule, t: f64) -> f64 {
        match &self.edges {
            None => schedule.t_min,
            Some(e) => e.iter().copied().find(|&s| s < t).unwrap_or(schedule.t_min),
        }
    }
}

/// `exp(P_mean + P_std z)` clamped to the schedule's range.
pub fn sample_t(plan: &TrainPlan, schedule: &NoiseSchedule, g: &mut rng::Rng) -> f64 {
    let z = rng::normal(g);
    (plan.p_mean + plan.p_std * z).exp().clamp(schedule.t_min, schedule.t_max)
}

pub fn r_of(plan: &TrainPlan, schedule: &NoiseSchedule, t: f64, iter: u64) -> f64 {
    let floor = plan.phase_floor(schedule, t);
    if t <= floor {
        return t;
    }
    if let Partition::Fixed(k) = plan.partition {
        return fixed_partition_r(t, k, floor);
    }
    let shrink = plan.q.powf((iter / plan.d) as f64);
    let gate = (1.0 - plan.n_fn.eval(schedule, t) / shrink).max(0.0);
    let r = match plan.edges {
        None => gate * t,
        Some(_) => gate * (t - floor) + floor,
    };
    // Late in training the gap falls below one ulp of t; keep r strictly below t.
    r.clamp(floor, t.next_down())
}

/// `t (1 - 1/k)`, never below `floor`.
pub fn fixed_partition_r(t: f64, k: usize, floor: f64) -> f64 {
    (t * (1.0 - 1.0 / k as f64)).max(floor)
}

/// `1 / (t - r + delta)`.
pub fn weight(t: f64, r: f64, delta: f64) -> f64 {
    1.0 / (t - r + delta)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainStepReport {
    pub iter: u64,
    /// Time and mapped `r` of the first batch member.
    pub t: f64,
    pub r: f64,
    pub loss: f64,
    /// Largest per-sample weight in the batch.
    pub weight: f64,
    pub mode: TargetMode,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSnapshot {
    pub iter: u64,
    pub sw_1step: f64,
    pub sw_2step: f64,
    pub bellman_residual: f64,
}

pub trait TrainSink {
    fn step(&mut self, report: &TrainStepReport) -> std::io::Result<()>;
    fn eval(&mut self, snapshot: &EvalSnapshot) -> std::io::Result<()>;
}

pub struct NullSink;

impl TrainSink for NullSink {
    fn step(&mut self, _: &TrainStepReport) -> std::io::Result<()> {
        Ok(())
    }

    fn eval(&mut self, _: &EvalSnapshot) -> std::io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct MemorySink {
    pub steps: Vec<TrainStepReport>,
    pub evals: Vec<EvalSnapshot>,
}

impl TrainSink for MemorySink {
    fn step(&mut self, report: &TrainStepReport) -> std::io::Result<()> {
        self.steps.push(report.clone());
        Ok(())
    }

    fn eval(&mut self, snapshot: &EvalSnapshot) -> std::io::Result<()> {
        self.evals.push(snapshot.clone());
        Ok(())
    }
}

/// Append-only report and evaluation CSVs.
pub struct CsvSink<W: Write> {
    steps: W,
    evals: W,
}

impl<W: Write> CsvSink<W> {
    pub fn new(mut steps: W, mut evals: W) -> std::io::Result<Self> {
        writeln!(steps, "iter,t,r,loss,weight,grad_norm,mode")?;
        writeln!(evals, "iter,sw_1step,sw_2step,bellman_residual")?;
        Ok(Self { steps, evals })
    }

    pub fn into_inner(self) -> (W, W) {
        (self.steps, self.evals)
    }
}

impl<W: Write> TrainSink for CsvSink<W> {
    fn step(&mut self, r: &TrainStepReport) -> std::io::Result<()> {
        writeln!(
            self.steps,
            "{},{:?},{:?},{:?},{:?},{:?},{}",
            r.iter,
            r.t,
            r.r,
            r.loss,
            r.weight,
            r.grad_norm,
            r.mode.as_str()
        )
    }

    fn eval(&mut self, s: &EvalSnapshot) -> std::io::Result<()> {
        writeln!(self.evals, "{},{:?},{:?},{:?}", s.iter, s.sw_1step, s.sw_2step, s.bellman_residual)
    }
}

/// Per-sample quantities fixed before any network evaluation.
struct Prepared {
    x_t: Vec<f64>,
    t: f64,
    r: f64,
    floor: f64,
    x_r: Vec<f64>,
    w: f64,
    /// Added to the target prediction (shared-noise mode only).
    correction: Option<Vec<f64>>,
}

pub struct StepOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub report: TrainStepReport,
}

fn batch_seed(seed: u64, iter: u64, tag: u64) -> u64 {
    rng::stream(seed, tag, iter, 0).random()
}

/// Draws the iteration's data batch.
pub fn draw_batch(oracle: &MixtureOracle, batch_size: usize, iter: u64, seed: u64) -> Result<LabeledSamples> {
    oracle.sample_data(batch_size, None, batch_seed(seed, iter, tag::BATCH))
}

#[allow(clippy::too_many_arguments)]
fn prepare(
    plan: &TrainPlan,
    schedule: &NoiseSchedule,
    oracle: &MixtureOracle,
    batch: &LabeledSamples,
    pool: Option<&LabeledSamples>,
    i: usize,
    iter: u64,
    seed: u64,
) -> Result<Prepared> {
    let dim = batch.dim();
    let mut g = rng::stream(seed, tag::SAMPLE, iter, i as u64);
    let t = sample_t(plan, schedule, &mut g);
    let eps = rng::normal_vec(&mut g, dim);
    let r = r_of(plan, schedule, t, iter);
    let floor = plan.phase_floor(schedule, t);
    let x0 = batch.x.row(i).to_vec();
    let label = batch.labels[i];
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    let x_t: Vec<f64> = x0.iter().zip(&eps).map(|(x, e)| a * x + s * e).collect();
    let w = weight(t, r, plan.delta);
    if r >= t {
        return Ok(Prepared {
            x_r: x_t.clone(),
            x_t,
            t,
            r,
            floor,
            w,
            correction: None,
        });
    }
    let class = plan.conditional.then_some(label);
    let eps_hat = match plan.target_mode {
        TargetMode::OneShot => conditional_epsilon(schedule, &x_t, t, &x0)?,
        TargetMode::TeacherOracle => oracle.exact_epsilon(schedule, &x_t, t, class)?,
        TargetMode::VarianceReduced => {
            let same = |j: usize, l: usize| class.is_none_or(|c| l == c) && j != i;
            let mut refs: Vec<&[f64]> = vec![&x0];
            match (plan.refs, pool) {
                (RefSource::InBatch(n), _) => {
                    let b = batch.len();
                    refs.extend(
                        (1..b)
                            .map(|k| (i + k) % b)
                            .filter(|&j| same(j, batch.labels[j]))
                            .take(n - 1)
                            .map(|j| batch.x.row(j).to_slice().expect("contiguous")),
                    );
                }
                (RefSource::Pool(_), Some(p)) => {
                    refs.extend(
                        (0..p.len())
                            .filter(|&j| class.is_none_or(|c| p.labels[j] == c))
                            .map(|j| p.x.row(j).to_slice().expect("contiguous")),
                    );
                }
                (RefSource::Pool(_), None) => unreachable!("pool drawn for pool references"),
            }
            weighted_epsilon(schedule, &x_t, t, refs.into_iter())?.0
        }
    };
    let (x_r, correction) = match plan.xr_mode {
        XrMode::SolverStep => (ddim_step(schedule, &x_t, t, r, &eps_hat)?, None),
        XrMode::SharedNoise => {
            let (ar, sr) = (schedule.alpha(r), schedule.sigma(r));
            let du = schedule.scaled_sigma(t) - schedule.scaled_sigma(r);
            let x_r = x0.iter().zip(&eps).map(|(x, e)| ar * x + sr * e).collect();
            let corr = eps.iter().zip(&eps_hat).map(|(e, h)| du * (e - h)).collect();
            (x_r, Some(corr))
        }
    };
    Ok(Prepared {
        x_t,
        t,
        r,
        floor,
        x_r,
        w,
        correction,
    })
}

fn rows_to_array(rows: impl Iterator<Item = Vec<f64>>, n: usize, dim: usize) -> Array2<f64> {
    let flat: Vec<f64> = rows.flatten().collect();
    Array2::from_shape_vec((n, dim), flat).expect("rectangular rows")
}

/// Loss and parameter gradient for one batch. The target network uses
/// `target_params` and receives no gradient.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad(
    net: &ConsistencyNet,
    target_params: &[f64],
    schedule: &NoiseSchedule,
    plan: &TrainPlan,
    oracle: &MixtureOracle,
    batch: &LabeledSamples,
    iter: u64,
    seed: u64,
) -> Result<StepOutput> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Config("empty training batch".into()));
    }
    let dim = net.spec().dim;
    if batch.dim() != dim {
        return Err(Error::Dimension { expected: dim, got: batch.dim() });
    }
    let pool = match (plan.target_mode, plan.refs) {
        (TargetMode::VarianceReduced, RefSource::Pool(m)) if m > 0 => {
            Some(oracle.sample_data(m, None, batch_seed(seed, iter, tag::POOL))?)
        }
        _ => None,
    };
    let prepared = par::map_indexed(n, |i| prepare(plan, schedule, oracle, batch, pool.as_ref(), i, iter, seed));
    let prepared: Vec<Prepared> = prepared.into_iter().collect::<Result<_>>()?;
    let labels = plan.conditional.then_some(&batch.labels[..]);

    let x_r = rows_to_array(prepared.iter().map(|p| p.x_r.clone()), n, dim);
    let r: Vec<f64> = prepared.iter().map(|p| p.r).collect();
    let target_view = net.view(target_params)?;
    let d_target = target_view.predict_x0(x_r.view(), &r, labels)?;
    let target = match plan.edges {
        None => {
            let mut tg = d_target;
            for (mut row, p) in tg.rows_mut().into_iter().zip(&prepared) {
                if let Some(c) = &p.correction {
                    row.iter_mut().zip(c).for_each(|(v, c)| *v += c);
                }
            }
            tg
        }
        Some(_) => {
            let mut tg = Array2::zeros((n, dim));
            for (i, p) in prepared.iter().enumerate() {
                let row = phased_combine(
                    schedule,
                    x_r.slice(s![i..i + 1, ..]),
                    d_target.slice(s![i..i + 1, ..]),
                    p.r,
                    p.floor,
                );
                tg.row_mut(i).assign(&row.row(0));
            }
            tg
        }
    };

    let x_t = rows_to_array(prepared.iter().map(|p| p.x_t.clone()), n, dim);
    let t: Vec<f64> = prepared.iter().map(|p| p.t).collect();
    let chunks = par::chunk_ranges(n, ROW_CHUNK);
    let parts = par::map_indexed(chunks.len(), |c| -> Result<(Vec<f64>, Vec<f64>)> {
        let rg = chunks[c].clone();
        let lab = labels.map(|l| &l[rg.clone()]);
        let (d, tape) = net.forward_tape(x_t.slice(s![rg.clone(), ..]), &t[rg.clone()], lab)?;
        let mut upstream = Array2::zeros(d.raw_dim());
        let mut losses = Vec::with_capacity(rg.len());
        for (k, i) in rg.clone().enumerate() {
            let p = &prepared[i];
            // Phased students output the edge point; continuous ones output x0 directly.
            let (out, coef) = if plan.edges.is_some() && p.t > p.floor {
                let (a_t, s_t) = (schedule.alpha(p.t), schedule.sigma(p.t));
                let (a_s, s_s) = (schedule.alpha(p.floor), schedule.sigma(p.floor));
                let out: Vec<f64> = (0..dim).map(|j| a_s * d[[k, j]] + s_s * (p.x_t[j] - a_t * d[[k, j]]) / s_t).collect();
                (out, a_s - s_s * a_t / s_t)
            } else if plan.edges.is_some() {
                (p.x_t.clone(), 0.0)
            } else {
                (d.row(k).to_vec(), 1.0)
            };
            let tgt = target.row(i).to_vec();
            let (dist, grad) = plan.distance.eval(&out, &tgt);
            let l = p.w * dist;
            if !l.is_finite() {
                return Err(Error::NonFinite { op: "loss_and_grad", t: p.t, r: p.r });
            }
            losses.push(l);
            for j in 0..dim {
                upstream[[k, j]] = p.w * coef * grad[j] / n as f64;
            }
        }
        let mut g = vec![0.0; net.params().len()];
        net.backprop_into(&tape, upstream.view(), &mut g)?;
        Ok((g, losses))
    });
    let mut grads = Vec::with_capacity(parts.len());
    let mut losses = Vec::with_capacity(n);
    for part in parts {
        let (g, l) = part?;
        grads.push(g);
        losses.extend(l);
    }
    let grad = par::pairwise_sum(grads);
    let loss = par::pairwise_sum_scalar(&losses) / n as f64;
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let first = &prepared[0];
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite { op: "loss_and_grad", t: first.t, r: first.r });
    }
    let max_w = prepared.iter().map(|p| p.w).fold(0.0, f64::max);
    Ok(StepOutput {
        loss,
        grad,
        report: TrainStepReport {
            iter,
            t: first.t,
            r: first.r,
            loss,
            weight: max_w,
            mode: plan.target_mode,
            grad_norm,
        },
    })
}

/// Everything a training run leaves behind.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ConsistencyNet,
    pub ema: EmaShadow,
    /// EMA weights retained at half the iteration budget.
    pub theta_star: EmaShadow,
    pub target_ema: Option<EmaShadow>,
    pub iters_run: u64,
    pub evals: Vec<EvalSnapshot>,
}

/// Shared evaluation data so snapshots are comparable across runs.
pub struct EvalContext {
    pub data: Array2<f64>,
    pub prior: Array2<f64>,
    pub seed: u64,
}

impl EvalContext {
    pub fn new(oracle: &MixtureOracle, schedule: &NoiseSchedule, samples: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            data: oracle.sample_data(samples, None, batch_seed(seed, 0, tag::EVAL))?.x,
            prior: sample_prior(schedule, samples, oracle.dim(), batch_seed(seed, 1, tag::EVAL)),
            seed,
        })
    }
}

pub fn evaluate(
    den: &dyn Denoiser,
    oracle: &MixtureOracle,
    schedule: &NoiseSchedule,
    plan: &TrainPlan,
    ctx: &EvalContext,
    iter: u64,
) -> Result<EvalSnapshot> {
    let e = &plan.eval;
    let (sw1, sw2) = match &plan.edges {
        None => {
            let one = one_step(den, schedule, ctx.prior.view(), None)?;
            let two = stochastic_multistep(den, schedule, ctx.prior.view(), &[e.two_step_time], None, ctx.seed)?;
            (
                sliced_wasserstein(one.view(), ctx.data.view(), e.projections, ctx.seed)?,
                sliced_wasserstein(two.view(), ctx.data.view(), e.projections, ctx.seed)?,
            )
        }
        Some(edges) => {
            let walk = phased_sample(den, schedule, ctx.prior.view(), edges, 1.0, None)?;
            (sliced_wasserstein(walk.view(), ctx.data.view(), e.projections, ctx.seed)?, f64::NAN)
        }
    };
    let bellman = if e.bellman_points > 0 && plan.edges.is_none() {
        bellman_residual(den, schedule, oracle, e.bellman_t, e.bellman_r, e.bellman_points, ctx.seed)?
    } else {
        f64::NAN
    };
    Ok(EvalSnapshot {
        iter,
        sw_1step: sw1,
        sw_2step: sw2,
        bellman_residual: bellman,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    mut net: ConsistencyNet,
    oracle: &MixtureOracle,
    schedule: &NoiseSchedule,
    plan: &TrainPlan,
    iters: u64,
    batch_size: usize,
    seed: u64,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    plan.validate(schedule)?;
    if net.spec().dim != oracle.dim() {
        return Err(Error::Dimension {
            expected: oracle.dim(),
            got: net.spec().dim,
        });
    }
    if plan.conditional && net.spec().n_classes < oracle.n_classes() {
        return Err(Error::Config("conditional training needs a net with a class embedding".into()));
    }
    let mut opt = Adam::new(net.params().len(), plan.lr, plan.warmup);
    opt.decay_ref = plan.lr_decay_ref;
    let mut ema = EmaShadow::new(plan.ema_decay, net.params())?;
    let mut theta_star = ema.clone();
    let mut target_ema = match plan.theta_minus {
        ThetaMinus::StopGrad => None,
        ThetaMinus::Ema(b) => Some(EmaShadow::new(b, net.params())?),
    };
    let ctx = if plan.eval.every > 0 {
        Some(EvalContext::new(oracle, schedule, plan.eval.samples, seed)?)
    } else {
        None
    };
    let mut evals = Vec::new();
    let half = iters / 2;
    let mut iters_run = 0;
    for iter in 0..iters {
        if iter == half {
            theta_star = ema.clone();
        }
        let batch = draw_batch(oracle, batch_size, iter, seed)?;
        let target_params = match &target_ema {
            Some(s) => s.params.clone(),
            None => net.params().to_vec(),
        };
        let out = loss_and_grad(&net, &target_params, schedule, plan, oracle, &batch, iter, seed)?;
        if out.report.weight > 1.0 / plan.delta {
            return Err(Error::NonFinite { op: "weight bound", t: out.report.t, r: out.report.r });
        }
        opt.step(net.params_mut(), &out.grad);
        if net.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { op: "optimizer step", t: out.report.t, r: out.report.r });
        }
        ema.update(net.params())?;
        if let Some(s) = target_ema.as_mut() {
            s.update(net.params())?;
        }
        sink.step(&out.report)?;
        iters_run = iter + 1;
        if let Some(ctx) = &ctx {
            if iters_run % plan.eval.every == 0 || iters_run == iters {
                let view = net.view(&ema.params)?;
                let snap = evaluate(&view, oracle, schedule, plan, ctx, iters_run)?;
                sink.eval(&snap)?;
                let stop = plan.eval.stop_below.is_some_and(|th| snap.sw_1step < th);
                evals.push(snap);
                if stop {
                    break;
                }
            }
        }
    }
    if iters_run <= half {
        theta_star = ema.clone();
    }
    Ok(TrainOutcome {
        net,
        ema,
        theta_star,
        target_ema,
        iters_run,
        evals,
    })
}

/// Grid of `(t, iter, r)` rows.
pub fn schedule_rows(plan: &TrainPlan, schedule: &NoiseSchedule, ts: &[f64], iters: &[u64]) -> Vec<(f64, u64, f64)> {
    let mut rows = Vec::with_capacity(ts.len() * iters.len());
    for &it in iters {
        for &t in ts {
            rows.push((t, it, r_of(plan, schedule, t, it)));
        }
    }
    rows
}

pub fn write_schedule_csv<W: Write>(mut w: W, rows: &[(f64, u64, f64)]) -> std::io::Result<()> {
    writeln!(w, "t,iter,r")?;
    for (t, it, r) in rows {
        writeln!(w, "{t:?},{it},{r:?}")?;
    }
    Ok(())
}
