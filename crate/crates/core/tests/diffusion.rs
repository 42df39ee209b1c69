mod common;

use common::tiny::{self, Loss};
use common::{cumprod_alpha_bar, rel_err};
use proptest::prelude::*;
use trigen_core::diffusion::{
    build_schedule, denoise_terms, estimate_z0, forward_diffuse, generate_latents, predict_noise, reverse_mean,
    CondBatch, Denoiser, NoiseModel, NoiseSchedule, ScheduleKind,
};
use trigen_core::nn::check::{central_difference, relative_error};
use trigen_core::nn::{Graph, ParamStore, Var};
use trigen_core::util::rng;
use trigen_core::{Result, Tensor};

fn lin(t: usize, lo: f64, hi: f64) -> NoiseSchedule {
    build_schedule(ScheduleKind::Linear, t, lo, hi).unwrap()
}

#[test]
fn alpha_bar_matches_cumulative_product() {
    let s = lin(200, 1e-4, 0.02);
    let oracle = cumprod_alpha_bar(200, 1e-4, 0.02);
    for (a, b) in s.alpha_bar.iter().zip(&oracle) {
        assert!(rel_err(*a, *b) < 1e-12);
    }
    assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(s.sigma2, s.beta);
}

/// Posterior mean of `q(z_{t-1} | z_t, z_0)` in its closed form.
fn posterior_mean(z0: f64, zt: f64, t: usize, s: &NoiseSchedule) -> f64 {
    let ab = s.alpha_bar[t - 1];
    let ab_prev = if t == 1 { 1.0 } else { s.alpha_bar[t - 2] };
    let beta = s.beta[t - 1];
    ab_prev.sqrt() * beta / (1.0 - ab) * z0 + s.alpha[t - 1].sqrt() * (1.0 - ab_prev) / (1.0 - ab) * zt
}

#[test]
fn true_noise_inverts_the_forward_process() {
    let s = lin(200, 1e-4, 0.02);
    let mut r = rng(3);
    let z0 = Tensor::randn([2, 4, 4, 3], 1.0, &mut r);
    let eps = Tensor::randn([2, 4, 4, 3], 1.0, &mut r);
    for t in [1, 2, 50, 137, 200] {
        let zt = forward_diffuse(&z0, t, &eps, &s).unwrap();
        let back = estimate_z0(&zt, &eps, t, &s).unwrap();
        let mu = reverse_mean(&zt, &eps, t, &s).unwrap();
        for i in 0..z0.len() {
            let (a, b) = (z0.data()[i], zt.data()[i]);
            assert!((back.data()[i] - a).abs() < 1e-9, "t={t}");
            assert!((mu.data()[i] - posterior_mean(a, b, t, &s)).abs() < 1e-9, "t={t}");
        }
    }
}

/// Predicts a fixed tensor, whatever the input.
struct Fixed {
    store: ParamStore,
    out: Tensor,
}

impl NoiseModel for Fixed {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn predict(&self, g: &mut Graph, _: Var, _: &CondBatch, _: &[usize]) -> Result<Var> {
        Ok(g.constant(self.out.clone()))
    }
}

fn cond(b: usize) -> CondBatch {
    CondBatch { ids: vec![vec![0]; b], scenes: vec![1; b] }
}

#[test]
fn oracle_predictor_has_zero_loss() {
    let s = lin(50, 1e-3, 0.2);
    let mut r = rng(4);
    let z0 = Tensor::randn([8, 2, 2, 6], 1.0, &mut r);
    let eps = Tensor::randn([8, 2, 2, 6], 1.0, &mut r);
    let t: Vec<usize> = (1..=8).map(|i| i * 6).collect();
    let oracle = Fixed { store: ParamStore::new(), out: eps.clone() };
    let mut g = Graph::new(&oracle.store);
    let terms = denoise_terms(&mut g, &oracle, &z0, &cond(8), &t, &eps, &s).unwrap();
    assert_eq!(g.value(terms.loss).item(), 0.0);
}

#[test]
fn zero_predictor_loss_is_about_the_element_count() {
    let s = lin(50, 1e-3, 0.2);
    let mut r = rng(5);
    let (b, d) = (2000, 24);
    let z0 = Tensor::randn([b, 2, 2, 6], 1.0, &mut r);
    let eps = Tensor::randn([b, 2, 2, 6], 1.0, &mut r);
    let t = vec![10; b];
    let zero = Fixed { store: ParamStore::new(), out: Tensor::zeros([b, 2, 2, 6]) };
    let mut g = Graph::new(&zero.store);
    let loss = denoise_terms(&mut g, &zero, &z0, &cond(b), &t, &eps, &s).unwrap().loss;
    let l = g.value(loss).item();
    // ‖ε‖² is chi-squared with d degrees of freedom: sd √(2d/b) for the mean.
    assert!((l - d as f64).abs() < 4.0 * (2.0 * d as f64 / b as f64).sqrt(), "{l}");
}

#[test]
fn out_of_range_steps_are_rejected() {
    let s = lin(5, 1e-3, 0.2);
    let z0 = Tensor::zeros([1, 1, 1, 3]);
    let m = Fixed { store: ParamStore::new(), out: z0.clone() };
    let mut g = Graph::new(&m.store);
    assert!(denoise_terms(&mut g, &m, &z0, &cond(1), &[0], &z0, &s).is_err());
    assert!(denoise_terms(&mut g, &m, &z0, &cond(1), &[6], &z0, &s).is_err());
}

#[test]
fn probe_model_is_small() {
    let s = tiny::setup(1);
    assert!(s.model.store.num_scalars(&s.model.store.ids()) <= 500);
}

#[test]
fn loss_gradients_match_finite_differences() {
    for (which, seed) in [(Loss::Denoise, 1), (Loss::Calib, 2), (Loss::Utg, 3)] {
        let mut s = tiny::setup(seed);
        let e = tiny::max_probe_error(&mut s, which, 60, seed + 100);
        assert!(e < 1e-4, "{which:?}: {e}");
    }
}

#[test]
fn prediction_norm_gradient_matches_finite_differences() {
    let s = tiny::setup(9);
    let z = Tensor::randn([3, 2, 2, 3], 1.0, &mut rng(10));
    let norm = |store: &ParamStore| -> (f64, Option<trigen_core::nn::Gradients>) {
        let mut g = Graph::new(store);
        let zv = g.input(z.clone());
        let e = s.model.predict(&mut g, zv, &s.cond, &s.t).unwrap();
        let e2 = g.square(e);
        let l = g.sum(e2);
        (g.value(l).item(), g.backward(l).ok())
    };
    let grads = norm(&s.model.store).1.unwrap();
    let mut store = s.model.store.clone();
    for name in ["out.head.w", "block0.qkv.w", "cond.scene", "cond.text"] {
        let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
        for k in [0, 3] {
            let fd = central_difference(&mut store, id, k, 1e-5, |p| norm(p).0);
            let an = grads.param(id).unwrap().data()[k];
            assert!(relative_error(an, fd, 1e-6) < 1e-4, "{name}[{k}]: {an} vs {fd}");
        }
    }
}

/// The exact noise predictor for data at ±1 with equal mass.
struct TwoPoint {
    store: ParamStore,
    sched: NoiseSchedule,
}

impl NoiseModel for TwoPoint {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn predict(&self, g: &mut Graph, z_t: Var, _: &CondBatch, t: &[usize]) -> Result<Var> {
        let z = g.value(z_t).clone();
        let per = z.len() / t.len();
        let mut out = z.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ab = self.sched.alpha_bar[t[i / per] - 1];
            let mean = (ab.sqrt() * *v / (1.0 - ab)).tanh();
            *v = (*v - ab.sqrt() * mean) / (1.0 - ab).sqrt();
        }
        Ok(g.constant(out))
    }
}

#[test]
fn exact_predictor_recovers_a_two_point_distribution() {
    let sched = lin(200, 1e-4, 0.05);
    let m = TwoPoint { store: ParamStore::new(), sched: sched.clone() };
    let n = 10_000;
    let z = generate_latents(&m, &cond(n), &[1, 1, 1], &sched, None, &mut rng(6)).unwrap();
    let pos = z.data().iter().filter(|v| **v > 0.0).count() as f64 / n as f64;
    assert!((pos - 0.5).abs() < 0.05, "{pos}");
    let near = z.data().iter().filter(|v| (v.abs() - 1.0).abs() < 0.25).count() as f64 / n as f64;
    assert!(near > 0.95, "{near}");
}

#[test]
fn condition_order_matters_only_with_positions() {
    let z = Tensor::randn([1, 2, 2, 3], 1.0, &mut rng(7));
    let a = CondBatch { ids: vec![vec![1, 2, 3]], scenes: vec![1] };
    let b = CondBatch { ids: vec![vec![3, 2, 1]], scenes: vec![1] };
    let mut cfg = tiny::config();
    let mut with = Denoiser::new(cfg.clone(), 2).unwrap();
    tiny::randomize(&mut with.store, 8);
    assert_ne!(predict_noise(&with, &z, &a, &[3]).unwrap(), predict_noise(&with, &z, &b, &[3]).unwrap());
    cfg.cond_positional = false;
    let mut without = Denoiser::new(cfg, 2).unwrap();
    tiny::randomize(&mut without.store, 8);
    let (pa, pb) = (predict_noise(&without, &z, &a, &[3]).unwrap(), predict_noise(&without, &z, &b, &[3]).unwrap());
    for (x, y) in pa.data().iter().zip(pb.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_tables_are_consistent(t in 1usize..300, lo in 1e-5f64..1e-2, span in 0.0f64..0.3) {
        let s = lin(t, lo, lo + span);
        prop_assert_eq!(s.beta.len(), t);
        for i in 0..t {
            prop_assert!((s.alpha[i] + s.beta[i] - 1.0).abs() < 1e-15);
            prop_assert!(s.alpha_bar[i] > 0.0 && s.alpha_bar[i] < 1.0);
            if i > 0 {
                prop_assert!(s.alpha_bar[i] < s.alpha_bar[i - 1]);
            }
        }
    }

    #[test]
    fn forward_then_estimate_round_trips(seed in 0u64..1000, t in 1usize..=100) {
        let s = lin(100, 1e-4, 0.05);
        let mut r = rng(seed);
        let z0 = Tensor::randn([5], 2.0, &mut r);
        let eps = Tensor::randn([5], 1.0, &mut r);
        let zt = forward_diffuse(&z0, t, &eps, &s).unwrap();
        let back = estimate_z0(&zt, &eps, t, &s).unwrap();
        for (a, b) in back.data().iter().zip(z0.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
