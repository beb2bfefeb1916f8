//! Sample-based distribution distances and sweep tables.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::{n_step_rollout, MdpState, OracleEps};
use crate::net::Denoiser;
use crate::oracle::MixtureOracle;
use crate::par;
use crate::rng::{self, tag};
use crate::sampler::{one_step, phased_sample, Guided};
use crate::schedule::{NoiseSchedule, DEFAULT_SPACING};
use crate::trainer::{schedule_rows, write_schedule_csv, TrainPlan};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: &'static str,
    pub value: f64,
    pub n_a: usize,
    pub n_b: usize,
    /// Projection count for SW, kernel bandwidth for MMD.
    pub parameter: f64,
    pub seed: u64,
}

/// Down-samples the larger set to the size of the smaller one.
fn equalize<'a>(a: ArrayView2<'a, f64>, b: ArrayView2<'a, f64>, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Config("metric needs non-empty sample sets".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension {
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    let n = a.nrows().min(b.nrows());
    let cut = |x: ArrayView2<'_, f64>| {
        if x.nrows() == n {
            return x.to_owned();
        }
        let mut g = rng::stream(seed, tag::SUBSAMPLE, x.nrows() as u64, n as u64);
        let mut idx = index::sample(&mut g, x.nrows(), n).into_vec();
        idx.sort_unstable();
        x.select(Axis(0), &idx)
    };
    Ok((cut(a), cut(b)))
}

/// Unit directions; in one dimension every direction is `+1`.
fn directions(dim: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| {
            if dim == 1 {
                return vec![1.0];
            }
            let mut g = rng::stream(seed, tag::PROJECTION, i as u64, 0);
            loop {
                let v = rng::normal_vec(&mut g, dim);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    return v.into_iter().map(|x| x / norm).collect();
                }
            }
        })
        .collect()
}

/// Mean over random projections of the 1D 2-Wasserstein distance.
pub fn sliced_wasserstein(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, projections: usize, seed: u64) -> Result<f64> {
    if projections == 0 {
        return Err(Error::Config("need at least one projection".into()));
    }
    let (a, b) = equalize(a, b, seed)?;
    let dirs = directions(a.ncols(), projections, seed);
    let per = par::map_indexed(projections, |k| {
        let d = &dirs[k];
        let project = |x: &Array2<f64>| {
            let mut p: Vec<f64> = x.rows().into_iter().map(|r| r.iter().zip(d).map(|(x, d)| x * d).sum()).collect();
            p.sort_by(f64::total_cmp);
            p
        };
        let (pa, pb) = (project(&a), project(&b));
        let sq: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).collect();
        (par::pairwise_sum_scalar(&sq) / sq.len() as f64).sqrt()
    });
    Ok(par::pairwise_sum_scalar(&per) / projections as f64)
}

pub fn sw_report(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, projections: usize, seed: u64) -> Result<MetricReport> {
    Ok(MetricReport {
        metric: "sliced_wasserstein",
        value: sliced_wasserstein(a, b, projections, seed)?,
        n_a: a.nrows(),
        n_b: b.nrows(),
        parameter: projections as f64,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MmdEstimate {
    /// Unbiased squared MMD; may be slightly negative.
    pub value: f64,
    pub stderr: f64,
    pub bandwidth: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median pairwise distance of the pooled sample (at most 1000 points).
fn median_bandwidth(a: &Array2<f64>, b: &Array2<f64>, seed: u64) -> f64 {
    let pooled = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("same width");
    let m = pooled.nrows().min(1000);
    let mut g = rng::stream(seed, tag::SUBSAMPLE, 0, 1);
    let idx = index::sample(&mut g, pooled.nrows(), m).into_vec();
    let mut d = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            d.push(sq_dist(pooled.row(idx[i]).as_slice().unwrap(), pooled.row(idx[j]).as_slice().unwrap()).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Unbiased squared MMD with kernel `exp(-|x - y|^2 / (2 h^2))` over
/// equal-size sets, as the U-statistic of `k(a_i,a_j) + k(b_i,b_j) - k(a_i,b_j) - k(a_j,b_i)`.
/// The standard error is `2 sd(row means) / sqrt(m)`.
pub fn mmd_rbf(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, bandwidth: Option<f64>, seed: u64) -> Result<MmdEstimate> {
    let (a, b) = equalize(a, b, seed)?;
    let m = a.nrows();
    if m < 2 {
        return Err(Error::Config("MMD needs at least two samples per set".into()));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(Error::Config(format!("bandwidth must be positive, got {h}"))),
        None => median_bandwidth(&a, &b, seed),
    };
    let k = |x: &[f64], y: &[f64]| {
        if h.is_infinite() {
            1.0
        } else {
            (-sq_dist(x, y) / (2.0 * h * h)).exp()
        }
    };
    let row = |x: &Array2<f64>, i: usize| x.row(i).to_slice().expect("contiguous").to_vec();
    let means = par::map_indexed(m, |i| {
        let (ai, bi) = (row(&a, i), row(&b, i));
        let terms: Vec<f64> = (0..m)
            .filter(|&j| j != i)
            .map(|j| {
                let (aj, bj) = (a.row(j), b.row(j));
                let (aj, bj) = (aj.to_slice().expect("contiguous"), bj.to_slice().expect("contiguous"));
                k(&ai, aj) + k(&bi, bj) - k(&ai, bj) - k(aj, &bi)
            })
            .collect();
        par::pairwise_sum_scalar(&terms) / (m - 1) as f64
    });
    let value = par::pairwise_sum_scalar(&means) / m as f64;
    let var = means.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (m - 1) as f64;
    Ok(MmdEstimate {
        value,
        stderr: 2.0 * (var / m as f64).sqrt(),
        bandwidth: h,
    })
}

/// Many-step DDIM from `prior` with the exact epsilon: the sampler floor that
/// trained models are compared against.
pub fn oracle_samples(
    oracle: &MixtureOracle,
    schedule: &NoiseSchedule,
    prior: ArrayView2<'_, f64>,
    steps: usize,
) -> Result<Array2<f64>> {
    if prior.ncols() != oracle.dim() {
        return Err(Error::Dimension {
            expected: oracle.dim(),
            got: prior.ncols(),
        });
    }
    let times = schedule.grid(DEFAULT_SPACING, schedule.t_max, schedule.t_min, steps);
    let eps = OracleEps { oracle, class: None };
    let rows = par::map_indexed(prior.nrows(), |i| -> Result<Vec<f64>> {
        let start = MdpState {
            t: schedule.t_max,
            x: prior.row(i).to_vec(),
        };
        let walk = n_step_rollout(schedule, &start, &times[1..], &eps)?;
        Ok(walk.last().map_or(start.x.clone(), |s| s.next_x.clone()))
    });
    let mut out = Array2::zeros(prior.raw_dim());
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).iter_mut().zip(row?).for_each(|(d, v)| *d = v);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub knob: &'static str,
    pub value: f64,
    pub sw: f64,
}

/// One phased-sampling SW row per `eta`.
#[allow(clippy::too_many_arguments)]
pub fn eta_sweep(
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    edges: &[f64],
    etas: &[f64],
    prior: ArrayView2<'_, f64>,
    data: ArrayView2<'_, f64>,
    projections: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    etas.iter()
        .map(|&eta| {
            let x = phased_sample(den, schedule, prior, edges, eta, None)?;
            Ok(SweepRow {
                knob: "eta",
                value: eta,
                sw: sliced_wasserstein(x.view(), data, projections, seed)?,
            })
        })
        .collect()
}

/// One-step SW per guidance strength; `omega = 1` is the unguided model.
#[allow(clippy::too_many_arguments)]
pub fn cfg_sweep(
    net: &dyn Denoiser,
    star: &dyn Denoiser,
    schedule: &NoiseSchedule,
    omegas: &[f64],
    prior: ArrayView2<'_, f64>,
    labels: Option<&[usize]>,
    data: ArrayView2<'_, f64>,
    projections: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    omegas
        .iter()
        .map(|&omega| {
            let g = Guided::new(net, star, omega)?;
            let x = one_step(&g, schedule, prior, labels)?;
            Ok(SweepRow {
                knob: "omega",
                value: omega,
                sw: sliced_wasserstein(x.view(), data, projections, seed)?,
            })
        })
        .collect()
}

/// Best (lowest SW) row; ties go to the earliest.
pub fn best_row(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter().fold(None, |best: Option<&SweepRow>, r| match best {
        Some(b) if b.sw <= r.sw => Some(b),
        _ => Some(r),
    })
}

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> std::io::Result<()> {
    let knob = rows.first().map_or("value", |r| r.knob);
    writeln!(w, "{knob},sw")?;
    for r in rows {
        writeln!(w, "{:?},{:?}", r.value, r.sw)?;
    }
    Ok(())
}

/// `r_of` tabulated over a `(t, iter)` grid as CSV `t,iter,r`.
pub fn schedule_dump<W: Write>(w: W, plan: &TrainPlan, schedule: &NoiseSchedule, ts: &[f64], iters: &[u64]) -> std::io::Result<()> {
    write_schedule_csv(w, &schedule_rows(plan, schedule, ts, iters))
}

pub fn write_metrics_csv<W: Write>(mut w: W, reports: &[MetricReport]) -> std::io::Result<()> {
    writeln!(w, "metric,value,n_a,n_b,parameter,seed")?;
    for r in reports {
        writeln!(w, "{},{:?},{},{},{:?},{}", r.metric, r.value, r.n_a, r.n_b, r.parameter, r.seed)?;
    }
    Ok(())
}

/// Plot data as `x,y,series` triplets.
pub fn write_plot_triplets<W: Write>(mut w: W, series: &[(&str, Vec<(f64, f64)>)]) -> std::io::Result<()> {
    writeln!(w, "x,y,series")?;
    for (name, pts) in series {
        for (x, y) in pts {
            writeln!(w, "{x:?},{y:?},{name}")?;
        }
    }
    Ok(())
}
