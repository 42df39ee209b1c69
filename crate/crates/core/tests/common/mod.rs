//! Independent reference computations shared by the integration tests.

#![allow(dead_code)]

use rand::Rng;

/// Direct evaluation of the hierarchical sampling weights: class counts by
/// scanning every sample for every class, rarity by `exp(-α ln N)`, and each
/// group total by a fresh pass over all samples.
pub fn brute_force_weights_oracle(lists: &[Vec<u8>], groups: &[usize], k: usize, alpha: f64, eps: f64) -> Vec<f64> {
    let n = lists.len();
    let classes: Vec<u8> = (0..=u8::MAX).filter(|c| lists.iter().any(|l| l.contains(c))).collect();
    let count = |c: u8| lists.iter().filter(|l| l.contains(&c)).count() as f64;
    let rarity = |c: u8| (-alpha * count(c).ln()).exp();
    let r: Vec<f64> = lists
        .iter()
        .map(|l| {
            let mut m = 0.0f64;
            for &c in &classes {
                if l.contains(&c) && rarity(c) > m {
                    m = rarity(c);
                }
            }
            eps + m
        })
        .collect();
    (0..n)
        .map(|i| {
            let mut total = 0.0;
            for j in 0..n {
                if groups[j] == groups[i] {
                    total += r[j];
                }
            }
            r[i] / (k as f64 * total)
        })
        .collect()
}

/// A random weighting problem in which every one of the `k` groups is used.
pub fn random_instance<R: Rng>(rng: &mut R) -> (Vec<Vec<u8>>, Vec<usize>, usize, f64, f64) {
    let n = rng.random_range(1..=50usize);
    let k = rng.random_range(1..=8usize.min(n));
    let n_classes = rng.random_range(1..=6u8);
    let lists: Vec<Vec<u8>> = (0..n)
        .map(|_| (1..=n_classes).filter(|_| rng.random::<f64>() < 0.4).collect())
        .collect();
    let mut groups: Vec<usize> = (0..n).map(|i| if i < k { i + 1 } else { rng.random_range(1..=k) }).collect();
    for i in (1..n).rev() {
        groups.swap(i, rng.random_range(0..=i));
    }
    let alpha = rng.random_range(0.0..=2.0);
    let eps = rng.random_range(0.01..0.2);
    (lists, groups, k, alpha, eps)
}

/// `ᾱ_t` for a linear schedule by repeated multiplication in index order.
pub fn cumprod_alpha_bar(t_steps: usize, beta_min: f64, beta_max: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut acc = 1.0f64;
    for i in 0..t_steps {
        let frac = if t_steps > 1 { i as f64 / (t_steps - 1) as f64 } else { 0.0 };
        acc *= 1.0 - (beta_min + frac * (beta_max - beta_min));
        out.push(acc);
    }
    out
}

/// Relative error with an absolute floor for values near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

pub mod tiny {
    //! A denoiser with adapters small enough for finite-difference probes.

    use rand::Rng;
    use trigen_core::adapters::{calib_loss, AdapterSet};
    use trigen_core::diffusion::{
        build_schedule, denoise_terms, CondBatch, Denoiser, DenoiserConfig, NoiseSchedule, ScheduleKind,
    };
    use trigen_core::nn::{Graph, ParamId, ParamStore, Var};
    use trigen_core::util::rng;
    use trigen_core::Tensor;

    pub struct Setup {
        pub model: Denoiser,
        pub adapters: AdapterSet,
        pub sched: NoiseSchedule,
        pub z0: Tensor,
        pub cond: CondBatch,
        pub t: Vec<usize>,
        pub eps: Tensor,
        pub lambda: f64,
    }

    pub fn config() -> DenoiserConfig {
        DenoiserConfig {
            latent_h: 2,
            latent_w: 2,
            latent_c: 3,
            patch: 1,
            width: 4,
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            vocab_size: 6,
            text_len: 3,
            scene_groups: 2,
            cond_positional: true,
            time_to_latents: true,
        }
    }

    /// Jitters every parameter, so zero-initialized layers pass gradients on.
    pub fn randomize(store: &mut ParamStore, seed: u64) {
        let mut r = rng(seed);
        for id in store.ids() {
            for v in store.get_mut(id).data_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
    }

    /// A denoiser with jittered parameters and width-2 adapters.
    pub fn setup(seed: u64) -> Setup {
        let mut model = Denoiser::new(config(), seed).unwrap();
        let mut r = rng(seed ^ 0x5eed);
        let adapters = AdapterSet::new(&mut model.store, 1, 2, &mut r);
        randomize(&mut model.store, seed ^ 0xa11);
        let b = 3;
        let z0 = Tensor::randn([b, 2, 2, 3], 1.0, &mut r);
        let eps = Tensor::randn([b, 2, 2, 3], 1.0, &mut r);
        let cond = CondBatch { ids: vec![vec![1, 2, 0], vec![3, 4, 5], vec![2, 0, 0]], scenes: vec![1, 2, 1] };
        let sched = build_schedule(ScheduleKind::Linear, 10, 1e-3, 0.2).unwrap();
        Setup { model, adapters, sched, z0, cond, t: vec![2, 5, 9], eps, lambda: 0.7 }
    }

    impl Setup {
        pub fn denoiser_ids(&self) -> Vec<ParamId> {
            let a = self.adapters.param_ids();
            self.model.store.ids().into_iter().filter(|id| !a.contains(id)).collect()
        }

        pub fn denoise(&self, g: &mut Graph) -> (Var, Var) {
            let terms = denoise_terms(g, &self.model, &self.z0, &self.cond, &self.t, &self.eps, &self.sched).unwrap();
            let z_t = g.constant(terms.z_t);
            (terms.loss, self.z0_estimate(g, z_t, terms.eps_hat))
        }

        /// `(z_t - √(1 - ᾱ_t) ε̂) / √ᾱ_t` built on the graph, so `ẑ` stays
        /// connected to the denoiser until the calibration loss detaches it.
        fn z0_estimate(&self, g: &mut Graph, z_t: Var, eps_hat: Var) -> Var {
            let per = self.z0.len() / self.t.len();
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for &t in &self.t {
                let ab = self.sched.alpha_bar[t - 1];
                a.extend(std::iter::repeat_n(1.0 / ab.sqrt(), per));
                b.extend(std::iter::repeat_n((1.0 - ab).sqrt() / ab.sqrt(), per));
            }
            let shape = self.z0.shape().to_vec();
            let a = g.constant(Tensor::new(shape.clone(), a).unwrap());
            let b = g.constant(Tensor::new(shape, b).unwrap());
            let x = g.mul(z_t, a).unwrap();
            let y = g.mul(eps_hat, b).unwrap();
            g.sub(x, y).unwrap()
        }

        /// `ẑ` at the current parameters, as a plain tensor.
        pub fn z_hat(&self, store: &ParamStore) -> Tensor {
            let mut g = Graph::new(store);
            let (_, z) = self.denoise(&mut g);
            g.value(z).clone()
        }

        pub fn loss_denoise(&self, store: &ParamStore) -> f64 {
            let mut g = Graph::new(store);
            let (l, _) = self.denoise(&mut g);
            g.value(l).item()
        }

        /// Calibration loss with `ẑ` held at `frozen`.
        pub fn loss_calib(&self, store: &ParamStore, frozen: &Tensor) -> f64 {
            let mut g = Graph::new(store);
            let z = g.input(frozen.clone());
            let l = calib_loss(&mut g, &self.adapters, z, &self.z0).unwrap();
            g.value(l).item()
        }

        pub fn loss_utg(&self, store: &ParamStore, frozen: &Tensor) -> f64 {
            self.loss_denoise(store) + self.lambda * self.loss_calib(store, frozen)
        }

        /// Analytic gradients of the three losses, all from graphs in which
        /// `ẑ` is computed from the denoiser output.
        pub fn gradients(&self, which: Loss) -> trigen_core::nn::Gradients {
            let mut g = Graph::new(&self.model.store);
            let (ld, z_hat) = self.denoise(&mut g);
            let lc = calib_loss(&mut g, &self.adapters, z_hat, &self.z0).unwrap();
            let loss = match which {
                Loss::Denoise => ld,
                Loss::Calib => lc,
                Loss::Utg => {
                    let w = g.scale(lc, self.lambda);
                    g.add(ld, w).unwrap()
                }
            };
            g.backward(loss).unwrap()
        }
    }

    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    pub enum Loss {
        Denoise,
        Calib,
        Utg,
    }

    /// Worst relative error between analytic and central-difference gradients
    /// over `probes` random parameter entries.
    pub fn max_probe_error(s: &mut Setup, which: Loss, probes: usize, seed: u64) -> f64 {
        let grads = s.gradients(which);
        let frozen = s.z_hat(&s.model.store);
        let ids = s.model.store.ids();
        let mut r = rng(seed);
        let mut worst = 0.0f64;
        for _ in 0..probes {
            let id = ids[r.random_range(0..ids.len())];
            let k = r.random_range(0..s.model.store.get(id).len());
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[k]);
            let mut store = s.model.store.clone();
            let fd = trigen_core::nn::check::central_difference(&mut store, id, k, 1e-5, |p| match which {
                Loss::Denoise => s.loss_denoise(p),
                Loss::Calib => s.loss_calib(p, &frozen),
                Loss::Utg => s.loss_utg(p, &frozen),
            });
            worst = worst.max(trigen_core::nn::check::relative_error(analytic, fd, 1e-6));
        }
        worst
    }
}
