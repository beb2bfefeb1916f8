//! Epsilon targets for consistency training.
//!
//! Three estimators of the ground-truth epsilon at `(x_t, t)`:
//!
//! * one-shot: the conditional epsilon of the single `x0` that generated `x_t`;
//! * variance-reduced: a self-normalized importance average of conditional
//!   epsilons over a reference batch, with weights `p(x_t | x0_i)`;
//! * teacher: the closed-form oracle epsilon.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::MixtureOracle;
use crate::par;
use crate::rng::{self, tag};
use crate::schedule::{conditional_epsilon, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    OneShot,
    VarianceReduced,
    TeacherOracle,
}

impl TargetMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TargetMode::OneShot => "one_shot",
            TargetMode::VarianceReduced => "variance_reduced",
            TargetMode::TeacherOracle => "teacher_oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    InBatch,
    ExternalPool,
    FullDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBatch {
    samples: Array2<f64>,
    labels: Option<Vec<usize>>,
    source: ReferenceSource,
}

impl ReferenceBatch {
    pub fn new(samples: Array2<f64>, labels: Option<Vec<usize>>, source: ReferenceSource) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::Condition("reference batch is empty".into()));
        }
        if let Some(l) = &labels {
            if l.len() != samples.nrows() {
                return Err(Error::Condition(format!(
                    "{} labels for {} reference samples",
                    l.len(),
                    samples.nrows()
                )));
            }
        }
        Ok(Self { samples, labels, source })
    }

    pub fn from_rows(rows: &[Vec<f64>], source: ReferenceSource) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let samples = Array2::from_shape_vec((rows.len(), dim), flat)
            .map_err(|e| Error::Condition(e.to_string()))?;
        Self::new(samples, None, source)
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn source(&self) -> ReferenceSource {
        self.source
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Rows usable under `condition`.
    fn rows(&self, condition: Option<usize>) -> Result<Vec<ArrayView1<'_, f64>>> {
        let rows: Vec<_> = match condition {
            None => self.samples.rows().into_iter().collect(),
            Some(c) => {
                let labels = self.labels.as_ref().ok_or_else(|| {
                    Error::Condition("conditional target requested but references carry no labels".into())
                })?;
                self.samples
                    .rows()
                    .into_iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(r, _)| r)
                    .collect()
            }
        };
        if rows.is_empty() {
            return Err(Error::Condition(format!("no reference samples with label {condition:?}")));
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetEstimate {
    pub eps_hat: Vec<f64>,
    pub weights: Vec<f64>,
    pub mode: TargetMode,
    /// Number of references that entered the estimate.
    pub effective_n: usize,
}

impl TargetEstimate {
    /// Kish effective sample size of the weights.
    pub fn kish_ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

pub fn one_shot_target(schedule: &NoiseSchedule, x_t: &[f64], t: f64, x0: &[f64]) -> Result<TargetEstimate> {
    Ok(TargetEstimate {
        eps_hat: conditional_epsilon(schedule, x_t, t, x0)?,
        weights: vec![1.0],
        mode: TargetMode::OneShot,
        effective_n: 1,
    })
}

pub fn variance_reduced_target(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: f64,
    refs: &ReferenceBatch,
    condition: Option<usize>,
) -> Result<TargetEstimate> {
    let rows = refs.rows(condition)?;
    let (eps_hat, weights) = weighted_epsilon(schedule, x_t, t, rows.iter().map(|r| r.as_slice().expect("rows are contiguous")))?;
    Ok(TargetEstimate {
        eps_hat,
        effective_n: weights.len(),
        weights,
        mode: TargetMode::VarianceReduced,
    })
}

/// Self-normalized importance average of conditional epsilons over `refs`.
/// Weights are `p(x_t | x0_i)` normalized over the set, computed in the log domain.
pub fn weighted_epsilon<'a>(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: f64,
    refs: impl Iterator<Item = &'a [f64]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    if s <= 0.0 {
        return Err(Error::DegenerateTime { t });
    }
    let refs: Vec<&[f64]> = refs.collect();
    let mut logits = Vec::with_capacity(refs.len());
    for x0 in &refs {
        if x0.len() != x_t.len() {
            return Err(Error::Dimension {
                expected: x_t.len(),
                got: x0.len(),
            });
        }
        let sq: f64 = x_t.iter().zip(*x0).map(|(x, x0)| (x - a * x0).powi(2)).sum();
        logits.push(-sq / (2.0 * s * s));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    if !(z.is_finite() && z > 0.0) {
        return Err(Error::NumericalDegeneracy { t });
    }
    w.iter_mut().for_each(|v| *v /= z);
    let mut eps = vec![0.0; x_t.len()];
    for (x0, wi) in refs.iter().zip(&w) {
        for ((e, x), x0) in eps.iter_mut().zip(x_t).zip(*x0) {
            *e += wi * (x - a * x0) / s;
        }
    }
    Ok((eps, w))
}

pub fn teacher_target(
    oracle: &MixtureOracle,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: f64,
    condition: Option<usize>,
) -> Result<TargetEstimate> {
    let eps_hat = oracle.exact_epsilon(schedule, x_t, t, condition)?;
    let weights = oracle.posterior_weights(schedule, x_t, t, condition)?;
    Ok(TargetEstimate {
        eps_hat,
        effective_n: weights.len(),
        weights,
        mode: TargetMode::TeacherOracle,
    })
}

/// One row of the estimator variance table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceRow {
    pub mode: TargetMode,
    pub n: usize,
    pub t: f64,
    pub mse: f64,
    pub stderr: f64,
}

/// Per-trial squared errors behind one [`VarianceRow`].
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceCell {
    pub row: VarianceRow,
    pub squared_errors: Vec<f64>,
}

/// Monte-Carlo squared error of each estimator against the exact epsilon.
///
/// Each trial draws `x0` from the data and `eps`, forms `x_t`, and evaluates
/// every requested estimator on that same `x_t` (common random numbers).
/// A variance-reduced estimate with `n` references uses the generating `x0`
/// plus `n - 1` further data draws. One-shot and teacher rows are reported
/// once per `t` with `n = 1` and `n = 0` respectively.
pub fn estimator_report(
    schedule: &NoiseSchedule,
    oracle: &MixtureOracle,
    modes: &[TargetMode],
    n_values: &[usize],
    t_grid: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<VarianceRow>> {
    Ok(estimator_cells(schedule, oracle, modes, n_values, t_grid, trials, seed)?
        .into_iter()
        .map(|c| c.row)
        .collect())
}

pub fn estimator_cells(
    schedule: &NoiseSchedule,
    oracle: &MixtureOracle,
    modes: &[TargetMode],
    n_values: &[usize],
    t_grid: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<VarianceCell>> {
    if trials < 100 {
        return Err(Error::Config(format!("estimator report needs at least 100 trials, got {trials}")));
    }
    if n_values.contains(&0) {
        return Err(Error::Config("reference counts must be positive".into()));
    }
    let mut columns: Vec<(TargetMode, usize)> = Vec::new();
    for &m in modes {
        match m {
            TargetMode::VarianceReduced => columns.extend(n_values.iter().map(|&n| (m, n))),
            TargetMode::OneShot => columns.push((m, 1)),
            TargetMode::TeacherOracle => columns.push((m, 0)),
        }
    }
    let n_max = n_values.iter().copied().max().unwrap_or(1);
    let dim = oracle.dim();
    let mut cells = Vec::new();
    for (ti, &t) in t_grid.iter().enumerate() {
        schedule.check_time("t", t)?;
        let per_trial = par::map_indexed(trials, |k| -> Result<Vec<f64>> {
            let pool = oracle.sample_data(n_max, None, derive(seed, ti as u64, k as u64))?;
            let mut r = rng::stream(seed, tag::TRIAL, ti as u64, k as u64);
            let x0 = pool.x.row(0).to_vec();
            let eps = rng::normal_vec(&mut r, dim);
            let (a, s) = (schedule.alpha(t), schedule.sigma(t));
            let x_t: Vec<f64> = x0.iter().zip(&eps).map(|(x, e)| a * x + s * e).collect();
            let truth = oracle.exact_epsilon(schedule, &x_t, t, None)?;
            columns
                .iter()
                .map(|&(mode, n)| {
                    let est = match mode {
                        TargetMode::OneShot => conditional_epsilon(schedule, &x_t, t, &x0)?,
                        TargetMode::TeacherOracle => oracle.exact_epsilon(schedule, &x_t, t, None)?,
                        TargetMode::VarianceReduced => {
                            let rows = pool.x.rows().into_iter().take(n).map(|r| r.to_slice().expect("contiguous"));
                            weighted_epsilon(schedule, &x_t, t, rows)?.0
                        }
                    };
                    Ok(est.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum())
                })
                .collect()
        });
        let per_trial: Vec<Vec<f64>> = per_trial.into_iter().collect::<Result<_>>()?;
        for (ci, &(mode, n)) in columns.iter().enumerate() {
            let errs: Vec<f64> = per_trial.iter().map(|v| v[ci]).collect();
            let (mse, stderr) = mean_and_stderr(&errs);
            cells.push(VarianceCell {
                row: VarianceRow { mode, n, t, mse, stderr },
                squared_errors: errs,
            });
        }
    }
    Ok(cells)
}

fn derive(seed: u64, a: u64, b: u64) -> u64 {
    // Distinct data seed per (t-index, trial); sample_data keys its own stream on it.
    let mut r = rng::stream(seed, tag::POOL, a, b);
    rand::Rng::random(&mut r)
}

pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = par::pairwise_sum_scalar(xs) / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// CSV with header `mode,n,t,mse,stderr`.
pub fn write_variance_csv<W: std::io::Write>(mut w: W, rows: &[VarianceRow]) -> std::io::Result<()> {
    writeln!(w, "mode,n,t,mse,stderr")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.mode.as_str(), r.n, r.t, r.mse, r.stderr)?;
    }
    Ok(())
}
