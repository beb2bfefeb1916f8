use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use sct_core::metrics::sliced_wasserstein;
use sct_core::net::{ConsistencyNet, Denoiser, NetSpec};
use sct_core::oracle::MixtureOracle;
use sct_core::rng;
use sct_core::sampler::{one_step, phased_sample, sample_prior};
use sct_core::schedule::NoiseSchedule;
use sct_core::target::{
    estimator_report, variance_reduced_target, ReferenceBatch, ReferenceSource, TargetMode,
};
use sct_core::trainer::{train, EvalPlan, NullSink, Partition, TrainPlan};

fn ve() -> NoiseSchedule {
    NoiseSchedule::default()
}

/// One draw from p(x0 | x_t) of an isotropic mixture: component by posterior
/// responsibility, then the Gaussian posterior of that component.
fn posterior_draw(o: &MixtureOracle, s: &NoiseSchedule, x: &[f64], t: f64, g: &mut rng::Rng) -> Vec<f64> {
    let (a, sig) = (s.alpha(t), s.sigma(t));
    let dens: Vec<f64> = o
        .components()
        .iter()
        .map(|c| {
            let var = a * a * c.std * c.std + sig * sig;
            let d2: f64 = x.iter().zip(&c.mean).map(|(xi, m)| (xi - a * m).powi(2)).sum();
            c.weight * var.powf(-(x.len() as f64) / 2.0) * (-d2 / (2.0 * var)).exp()
        })
        .collect();
    let total: f64 = dens.iter().sum();
    let mut u = g.random::<f64>() * total;
    let k = dens.iter().position(|d| {
        u -= d;
        u <= 0.0
    });
    let c = &o.components()[k.unwrap_or(dens.len() - 1)];
    let var = a * a * c.std * c.std + sig * sig;
    let gain = a * c.std * c.std / var;
    let sd = c.std * sig / var.sqrt();
    x.iter()
        .zip(&c.mean)
        .map(|(xi, m)| m + gain * (xi - a * m) + sd * rng::normal(g))
        .collect()
}

#[test]
fn variance_reduced_estimate_is_unbiased_over_resampled_batches() {
    // The generating sample is always a reference; given x_t it is a posterior
    // draw, and with it the self-normalized estimate is exactly unbiased.
    let s = ve();
    let o = MixtureOracle::ring(8, 2.0, 0.2).unwrap();
    let (x, t) = ([1.1, 0.6], 1.0);
    let truth = o.exact_epsilon(&s, &x, t, None).unwrap();
    let n_batches = 100_000;
    let mut g = rng::stream(11, 1, 0, 0);
    let mut sums = [0.0; 2];
    let mut squares = [0.0; 2];
    for k in 0..n_batches {
        let mut refs = o.sample_data(64, None, k).unwrap().x;
        let x0 = posterior_draw(&o, &s, &x, t, &mut g);
        refs.row_mut(0).iter_mut().zip(&x0).for_each(|(d, v)| *d = *v);
        let refs = ReferenceBatch::new(refs, None, ReferenceSource::InBatch).unwrap();
        let e = variance_reduced_target(&s, &x, t, &refs, None).unwrap().eps_hat;
        for j in 0..2 {
            sums[j] += e[j];
            squares[j] += e[j] * e[j];
        }
    }
    let n = n_batches as f64;
    for j in 0..2 {
        let mean = sums[j] / n;
        let se = ((squares[j] / n - mean * mean) / (n - 1.0)).sqrt();
        assert!((mean - truth[j]).abs() <= 4.0 * se, "dim {j}: mean {mean}, truth {}, se {se}", truth[j]);
    }
}

#[test]
fn conditional_estimate_matches_class_posterior() {
    let s = ve();
    let o = MixtureOracle::ring(4, 2.0, 0.3).unwrap();
    let data = o.sample_data(200, None, 3).unwrap();
    let refs = ReferenceBatch::new(data.x.clone(), Some(data.labels.clone()), ReferenceSource::FullDataset).unwrap();
    let mut g = rng::stream(3, 1, 0, 0);
    for k in 0..50 {
        let c = k % 4;
        let t = 0.1 + 3.0 * (k as f64) / 50.0;
        let x: Vec<f64> = (0..2).map(|_| 2.0 * rng::normal(&mut g)).collect();
        let got = variance_reduced_target(&s, &x, t, &refs, Some(c)).unwrap().eps_hat;
        let rows: Vec<_> = data.x.rows().into_iter().zip(&data.labels).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
        let logw: Vec<f64> = rows
            .iter()
            .map(|r| -r.iter().zip(&x).map(|(a, b)| (b - a).powi(2)).sum::<f64>() / (2.0 * t * t))
            .collect();
        let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = w.iter().sum();
        for j in 0..2 {
            let want = rows.iter().zip(&w).map(|(r, wi)| wi * (x[j] - r[j]) / t).sum::<f64>() / z;
            assert!((got[j] - want).abs() <= 1e-10 * (1.0 + want.abs()), "class {c}: {} vs {want}", got[j]);
        }
    }
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    for (rank, i) in idx.into_iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn estimator_error_does_not_grow_with_reference_count() {
    let s = ve();
    let o = MixtureOracle::two_gaussians(2.0, 0.5).unwrap();
    let ns = [1usize, 4, 16, 64];
    let rows = estimator_report(&s, &o, &[TargetMode::VarianceReduced], &ns, &[0.05, 0.5, 2.0, 10.0], 2000, 5).unwrap();
    for t in [0.05, 0.5, 2.0, 10.0] {
        let mse: Vec<f64> = ns.iter().map(|&n| rows.iter().find(|r| r.t == t && r.n == n).unwrap().mse).collect();
        let nf: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
        assert!(spearman(&nf, &mse) <= 0.0, "t {t}: {mse:?}");
    }
}

#[test]
fn reference_solver_conserves_the_single_gaussian() {
    let s = ve();
    let c = 0.7;
    let o = MixtureOracle::single_gaussian(2, c).unwrap();
    let n = 10_000;
    let scale = (c * c + s.t_max * s.t_max).sqrt();
    let mut g = rng::stream(8, 1, 0, 0);
    let mut out = Array2::zeros((n, 2));
    for i in 0..n {
        let x: Vec<f64> = (0..2).map(|_| scale * rng::normal(&mut g)).collect();
        let traj = o.solve_reference(&s, &x, &[s.t_max, s.t_min]).unwrap();
        out.row_mut(i).iter_mut().zip(traj.last()).for_each(|(d, v)| *d = *v);
    }
    let data = o.sample_data(n, None, 9).unwrap().x;
    let sw = sliced_wasserstein(out.view(), data.view(), 128, 1).unwrap();
    assert!(sw <= 0.02, "sw {sw}");
}

/// Posterior mean of N(0, c^2) data; a phased step through it is an exact-epsilon DDIM step.
struct GaussianPosteriorMean {
    c: f64,
}

impl Denoiser for GaussianPosteriorMean {
    fn dim(&self) -> usize {
        1
    }

    fn predict_x0(&self, x: ArrayView2<'_, f64>, t: &[f64], _: Option<&[usize]>) -> sct_core::Result<Array2<f64>> {
        let mut out = x.to_owned();
        for (mut row, &ti) in out.rows_mut().into_iter().zip(t) {
            row.mapv_inplace(|v| v * self.c * self.c / (self.c * self.c + ti * ti));
        }
        Ok(out)
    }
}

#[test]
fn phased_walk_error_halves_as_edges_double() {
    let s = ve();
    let c = 1.0;
    let den = GaussianPosteriorMean { c };
    let x = sample_prior(&s, 32, 1, 2);
    let (t_hi, t_lo) = (4.0, 0.5);
    let mut errs = Vec::new();
    for k in [4usize, 8, 16, 32, 64] {
        let edges: Vec<f64> = (0..=k).map(|i| t_hi + (t_lo - t_hi) * i as f64 / k as f64).collect();
        let sched = NoiseSchedule::ve(t_lo, t_hi).unwrap();
        let x_start = x.mapv(|v| v * t_hi / s.t_max);
        let got = phased_sample(&den, &sched, x_start.view(), &edges, 1.0, None).unwrap();
        let want = x_start.mapv(|v| v * (c * c + t_lo * t_lo).sqrt() / (c * c + t_hi * t_hi).sqrt());
        errs.push((&got - &want).iter().map(|v| v.abs()).fold(0.0, f64::max));
    }
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.8..=2.2).contains(&ratio), "errors {errs:?}");
    }
}

/// Final one-step SW on the 1D two-Gaussian task with a fixed partition.
fn final_sw(mode: TargetMode, seed: u64) -> f64 {
    let s = ve();
    let o = MixtureOracle::two_gaussians(2.0, 0.5).unwrap();
    let mut spec = NetSpec::new(1, o.data_std());
    spec.hidden = vec![32, 32];
    spec.frequencies = 8;
    let net = ConsistencyNet::new(spec, s, seed).unwrap();
    let plan = TrainPlan {
        target_mode: mode,
        partition: Partition::Fixed(256),
        lr_decay_ref: Some(4000),
        eval: EvalPlan { every: 0, ..EvalPlan::default() },
        ..TrainPlan::default()
    };
    let out = train(net, &o, &s, &plan, 20_000, 128, seed, &mut NullSink).unwrap();
    let view = out.net.view(&out.ema.params).unwrap();
    let prior = sample_prior(&s, 10_000, 1, 100 + seed);
    let x = one_step(&view, &s, prior.view(), None).unwrap();
    let data = o.sample_data(10_000, None, 200 + seed).unwrap().x;
    sliced_wasserstein(x.view(), data.view(), 1, seed).unwrap()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

#[test]
fn variance_reduced_training_is_no_worse_on_two_gaussians() {
    let seeds = [1u64, 2, 3, 4, 5];
    let vr: Vec<f64> = seeds.iter().map(|&s| final_sw(TargetMode::VarianceReduced, s)).collect();
    let os: Vec<f64> = seeds.iter().map(|&s| final_sw(TargetMode::OneShot, s)).collect();
    let (m_vr, m_os) = (median(vr.clone()), median(os.clone()));
    eprintln!("variance-reduced {vr:?}, one-shot {os:?}");
    assert!(m_vr <= m_os, "median variance-reduced {m_vr}, one-shot {m_os}");
}
