use ndarray::Array2;
use proptest::prelude::*;
use sct_core::metrics::sliced_wasserstein;
use sct_core::net::{ConsistencyNet, Denoiser, NetSpec};
use sct_core::rng;
use sct_core::sampler::{edge_visits, guided_predict, phased_sample, sample_prior};
use sct_core::schedule::{conditional_epsilon, ddim_step, forward_marginal, NoiseSchedule};
use sct_core::trainer::{r_of, weight, NFn, TrainPlan};

fn ve() -> NoiseSchedule {
    NoiseSchedule::default()
}

fn random_net(seed: u64, dim: usize) -> ConsistencyNet {
    let mut spec = NetSpec::new(dim, 0.8);
    spec.hidden = vec![16, 16];
    spec.frequencies = 4;
    let net = ConsistencyNet::new(spec.clone(), ve(), seed).unwrap();
    // Perturb the output layer so the raw net is not near zero.
    let mut g = rng::stream(seed, 99, 0, 0);
    let params: Vec<f64> = net.params().iter().map(|p| p + 0.3 * rng::normal(&mut g)).collect();
    ConsistencyNet::from_parts(spec, ve(), params).unwrap()
}

fn matrix(seed: u64, n: usize, dim: usize, scale: f64) -> Array2<f64> {
    let mut g = rng::stream(seed, 98, 0, 0);
    Array2::from_shape_fn((n, dim), |_| scale * rng::normal(&mut g))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn r_of_is_nondecreasing_and_bounded(
        q in 1.01f64..4.0,
        d in 1u64..5000,
        t in 0.0021f64..80.0,
        a in 0u64..1_000_000,
        b in 0u64..1_000_000,
        phased in any::<bool>(),
        n in 0.1f64..3.0,
    ) {
        let s = ve();
        let plan = TrainPlan {
            q,
            d,
            n_fn: NFn::Constant(n),
            edges: phased.then(|| vec![80.0, 10.0, 1.0, s.t_min]),
            ..TrainPlan::default()
        };
        let (lo, hi) = (a.min(b), a.max(b));
        let floor = plan.phase_floor(&s, t);
        let (r_lo, r_hi) = (r_of(&plan, &s, t, lo), r_of(&plan, &s, t, hi));
        prop_assert!(r_lo <= r_hi);
        for r in [r_lo, r_hi] {
            prop_assert!(r >= floor && r < t, "r = {r}, floor = {floor}, t = {t}");
            prop_assert!(weight(t, r, plan.delta) <= 1.0 / plan.delta);
        }
    }

    #[test]
    fn weight_factors_into_time_and_gap(t in 0.002f64..80.0, alpha in 0.0f64..0.999) {
        let w = weight(t, alpha * t, 0.0);
        let factored = (1.0 / t) * (1.0 / (1.0 - alpha));
        prop_assert!((w - factored).abs() <= 1e-12 * factored);
    }

    #[test]
    fn ddim_with_conditional_epsilon_lands_on_the_marginal(
        x0 in prop::collection::vec(-5.0f64..5.0, 2),
        e in prop::collection::vec(-4.0f64..4.0, 2),
        t in 0.01f64..80.0,
        frac in 0.0f64..0.999,
    ) {
        let s = ve();
        let r = (frac * t).max(s.t_min);
        prop_assume!(r < t);
        let x_t = forward_marginal(&s, &x0, &e, t).unwrap().x_t;
        let eps = conditional_epsilon(&s, &x_t, t, &x0).unwrap();
        let x_r = ddim_step(&s, &x_t, t, r, &eps).unwrap();
        let want = forward_marginal(&s, &x0, &e, r).unwrap().x_t;
        for (a, b) in x_r.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn lambda_round_trips(t in 0.002f64..80.0) {
        let s = ve();
        prop_assert!((s.t_of_lambda(s.lambda(t)) - t).abs() <= 1e-10 * t);
    }

    #[test]
    fn boundary_prediction_is_identity(seed in 0u64..1000, scale in 0.01f64..50.0) {
        let net = random_net(seed, 2);
        let x = matrix(seed, 8, 2, scale);
        let out = net.predict_x0(x.view(), &[ve().t_min; 8], None).unwrap();
        prop_assert_eq!(out, x);
    }

    #[test]
    fn guidance_is_collinear_in_omega(seed in 0u64..1000, w1 in 0.0f64..3.0, w2 in 0.0f64..3.0, w3 in 0.0f64..3.0) {
        prop_assume!((w1 - w2).abs() > 0.1 && (w2 - w3).abs() > 0.1 && (w1 - w3).abs() > 0.1);
        let (net, star) = (random_net(seed, 2), random_net(seed + 1, 2));
        let x = matrix(seed, 6, 2, 3.0);
        let ts = vec![2.5; 6];
        let at = |w: f64| guided_predict(&net, &star, x.view(), &ts, None, w).unwrap();
        let (a, b, c) = (at(w1), at(w2), at(w3));
        // Points on a line: (b - a) / (w2 - w1) equals (c - a) / (w3 - w1).
        for ((pa, pb), pc) in a.iter().zip(&b).zip(&c) {
            let (s1, s2) = ((pb - pa) / (w2 - w1), (pc - pa) / (w3 - w1));
            prop_assert!((s1 - s2).abs() <= 1e-9 * (1.0 + s1.abs()));
        }
    }

    #[test]
    fn sliced_wasserstein_is_symmetric(seed in 0u64..1000, n in 2usize..200, m in 2usize..200, shift in -3.0f64..3.0) {
        let a = matrix(seed, n, 2, 1.0);
        let b = matrix(seed + 7, m, 2, 1.5) + shift;
        let ab = sliced_wasserstein(a.view(), b.view(), 16, seed).unwrap();
        let ba = sliced_wasserstein(b.view(), a.view(), 16, seed).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn edge_visits_keep_both_ends(
        mut inner in prop::collection::vec(0.01f64..79.0, 0..6),
        eta in 0.05f64..1.0,
    ) {
        inner.sort_by(|a, b| b.total_cmp(a));
        inner.dedup();
        let mut edges = vec![80.0];
        edges.extend(inner);
        edges.push(0.002);
        let v = edge_visits(&edges, eta).unwrap();
        prop_assert_eq!(v.len(), edges.len());
        prop_assert_eq!(v[0], 80.0);
        prop_assert_eq!(*v.last().unwrap(), 0.002);
        prop_assert_eq!(edge_visits(&edges, 1.0).unwrap(), edges);
    }
}

#[test]
fn phased_output_is_continuous_in_eta() {
    let s = ve();
    let net = random_net(3, 2);
    let x = sample_prior(&s, 64, 2, 4);
    let edges = vec![80.0, 40.0, 10.0, 2.0, s.t_min];
    let at = |eta: f64| phased_sample(&net, &s, x.view(), &edges, eta, None).unwrap();
    let dist = |a: &Array2<f64>, b: &Array2<f64>| (a - b).iter().map(|v| v.abs()).fold(0.0, f64::max);
    let probe = 1e-4;
    let sensitivity = (0..=10)
        .map(|i| 0.5 + 0.05 * i as f64)
        .map(|eta| dist(&at(eta), &at(eta - probe)) / probe)
        .fold(0.0, f64::max);
    assert!(sensitivity.is_finite());
    let step = 0.01;
    for i in 0..50 {
        let eta = 0.5 + i as f64 * step;
        let jump = dist(&at(eta), &at(eta + step));
        assert!(jump <= 10.0 * step * sensitivity, "eta {eta}: jump {jump}, sensitivity {sensitivity}");
    }
}
