//! One PASS/FAIL line per acceptance criterion. The end-to-end criteria share
//! one pipeline: a corpus, one codec set, and per seed a generator with and
//! without scene-balanced sampling.

mod common;

use std::io::Write;
use std::time::Instant;

use common::tiny::{self, Loss};
use common::{brute_force_weights_oracle, random_instance, rel_err};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trigen_core::adapters::{decode_triplet, AdapterSet, DecodedTriplet};
use trigen_core::codecs::{split_latents, train_codecs, CodecSet, Modality, ModalityCodec};
use trigen_core::config::RunConfig;
use trigen_core::conditioning::group_triplets;
use trigen_core::corpus::{generate_samples, Triplet};
use trigen_core::diffusion::{
    build_schedule, denoise_terms, estimate_z0, forward_diffuse, reverse_mean, CondBatch, NoiseModel, ScheduleKind,
};
use trigen_core::eval::{
    consistency_metrics, diversity_metrics, miou, permutation_null_pooled, train_segmenter, ConfusionMatrix,
    ConsistencyMetric, OracleSegmenter,
};
use trigen_core::generator::train_generator;
use trigen_core::nn::check::central_difference;
use trigen_core::nn::{Graph, ParamStore, Var};
use trigen_core::sbca::{compute_class_stats, compute_weights, WeightedSampler};
use trigen_core::util::{derive_seed, rng};
use trigen_core::Tensor;

struct Tally {
    passed: usize,
    failed: Vec<&'static str>,
}

impl Tally {
    fn report(&mut self, name: &'static str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        std::io::stdout().flush().ok();
        if ok {
            self.passed += 1;
        } else {
            self.failed.push(name);
        }
    }
}

fn progress(msg: &str) {
    eprintln!("[acceptance] {msg}");
}

fn sbca_oracle(t: &mut Tally) {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut worst_sum = 0.0f64;
    for _ in 0..1000 {
        let (lists, groups, k, alpha, eps) = random_instance(&mut r);
        let stats = compute_class_stats(&lists, alpha, eps).unwrap();
        let w = compute_weights(&stats, &groups, k, &lists).unwrap().weights();
        let o = brute_force_weights_oracle(&lists, &groups, k, alpha, eps);
        for (a, b) in w.iter().zip(&o) {
            worst = worst.max(rel_err(*a, *b));
        }
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        for g in 1..=k {
            let s: f64 = w.iter().zip(&groups).filter(|(_, &gi)| gi == g).map(|(x, _)| x).sum();
            worst_sum = worst_sum.max((s - 1.0 / k as f64).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    t.report(
        "sbca_oracle_equivalence",
        worst < 1e-12 && worst_sum < 1e-12 && secs < 10.0,
        format!("max rel err {worst:.2e}, max sum deviation {worst_sum:.2e}, {secs:.2}s"),
    );
}

fn sbca_hand_case(t: &mut Tally) {
    let lists = vec![vec![1], vec![1, 2], vec![1], vec![3]];
    let stats = compute_class_stats(&lists, 1.0, 0.0).unwrap();
    let table = compute_weights(&stats, &[1, 1, 2, 2], 2, &lists).unwrap();
    let w = table.weights();
    let expect = [0.125, 0.375, 0.125, 0.375];
    let exact = w.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-15);
    let n = 100_000;
    let idx = WeightedSampler::new(&table).unwrap().sample(n, &mut rng(7)).unwrap();
    let mut counts = [0usize; 4];
    for i in idx {
        counts[i] += 1;
    }
    let mut worst_z = 0.0f64;
    for (c, p) in counts.iter().zip(expect) {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        worst_z = worst_z.max((*c as f64 - n as f64 * p).abs() / sd);
    }
    t.report(
        "sbca_hand_case",
        exact && worst_z <= 3.0,
        format!("W = {w:?}, draw counts {counts:?}, max |z| {worst_z:.2}"),
    );
}

struct TrueNoise {
    store: ParamStore,
    eps: Tensor,
}

impl NoiseModel for TrueNoise {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn predict(&self, g: &mut Graph, _: Var, _: &CondBatch, _: &[usize]) -> trigen_core::Result<Var> {
        Ok(g.constant(self.eps.clone()))
    }
}

fn diffusion_identities(t: &mut Tally) {
    let start = Instant::now();
    let s = build_schedule(ScheduleKind::Linear, 200, 1e-4, 0.02).unwrap();
    let mut r = rng(11);
    let z0 = Tensor::randn([4, 8, 8, 12], 1.0, &mut r);
    let eps = Tensor::randn([4, 8, 8, 12], 1.0, &mut r);
    let mut round = 0.0f64;
    for step in 1..=200 {
        let zt = forward_diffuse(&z0, step, &eps, &s).unwrap();
        let back = estimate_z0(&zt, &eps, step, &s).unwrap();
        round = round.max(back.max_abs_diff(&z0));
    }
    let z1 = forward_diffuse(&z0, 1, &eps, &s).unwrap();
    let mean_err = reverse_mean(&z1, &eps, 1, &s).unwrap().max_abs_diff(&z0);
    let model = TrueNoise { store: ParamStore::new(), eps: eps.clone() };
    let cond = CondBatch { ids: vec![vec![0]; 4], scenes: vec![1; 4] };
    let mut g = Graph::new(&model.store);
    let terms = denoise_terms(&mut g, &model, &z0, &cond, &[1, 50, 120, 200], &eps, &s).unwrap();
    let loss = g.value(terms.loss).item();
    let secs = start.elapsed().as_secs_f64();
    t.report(
        "diffusion_identities",
        round < 1e-9 && mean_err < 1e-9 && loss == 0.0 && secs < 5.0,
        format!("round trip {round:.2e}, t=1 mean {mean_err:.2e}, oracle loss {loss}, {secs:.2}s"),
    );
}

fn gradient_check(t: &mut Tally) {
    let start = Instant::now();
    let mut worst = Vec::new();
    let mut size = 0;
    for (i, which) in [Loss::Denoise, Loss::Calib, Loss::Utg].into_iter().enumerate() {
        let mut s = tiny::setup(40 + i as u64);
        size = s.model.store.num_scalars(&s.model.store.ids());
        worst.push((which, tiny::max_probe_error(&mut s, which, 100, 90 + i as u64)));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = size <= 500 && worst.iter().all(|(_, e)| *e < 1e-4) && secs < 120.0;
    t.report("gradient_correctness", ok, format!("{size} parameters, 100 probes each, max rel err {worst:?}, {secs:.2}s"));
}

fn stop_gradient(t: &mut Tally) {
    let s = tiny::setup(50);
    let calib = s.gradients(Loss::Calib);
    let denoise = s.gradients(Loss::Denoise);
    let theta = s.denoiser_ids();
    let graph_zero = theta.iter().all(|&id| calib.param(id).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
    let phi_live = Modality::ALL.iter().all(|&m| {
        s.adapters.get(m).param_ids().iter().any(|&id| calib.param(id).is_some_and(|g| g.data().iter().any(|&v| v != 0.0)))
    });

    // Probe entries whose denoising gradient is nonzero.
    let mut live = Vec::new();
    for &id in &theta {
        if let Some(g) = denoise.param(id) {
            live.extend(g.data().iter().enumerate().filter(|(_, v)| v.abs() > 1e-6).map(|(k, _)| (id, k)));
        }
    }
    let mut r = rng(51);
    let frozen = s.z_hat(&s.model.store);
    let mut store = s.model.store.clone();
    let (mut max_calib, mut min_denoise) = (0.0f64, f64::INFINITY);
    for _ in 0..100 {
        let (id, k) = live[r.random_range(0..live.len())];
        max_calib = max_calib.max(central_difference(&mut store, id, k, 1e-5, |p| s.loss_calib(p, &frozen)).abs());
        min_denoise = min_denoise.min(central_difference(&mut store, id, k, 1e-5, |p| s.loss_denoise(p)).abs());
    }
    t.report(
        "stop_gradient_exactness",
        graph_zero && phi_live && max_calib < 1e-8 && min_denoise > 1e-8,
        format!(
            "graph: zero on all {} denoiser tensors = {graph_zero}, adapters live per modality = {phi_live}; \
             FD over 100 probes: max |dL_calib| {max_calib:.1e}, min |dL_denoise| {min_denoise:.1e}",
            theta.len()
        ),
    );
}

fn zero_init_identity(t: &mut Tally, cfg: &RunConfig) {
    let codec = &cfg.codec;
    let make = |m, seed| ModalityCodec::new(m, codec.clone(), seed).unwrap();
    let codecs = CodecSet::new(make(Modality::Vis, 1), make(Modality::Ir, 2), make(Modality::Label, 3)).unwrap();
    let (h, w, c) = codec.latent_shape();
    let mut store = ParamStore::new();
    let adapters = AdapterSet::new(&mut store, c, cfg.generator.adapter_hidden, &mut rng(4));
    let z = Tensor::randn([100, h, w, 3 * c], 1.0, &mut rng(5));
    let with = decode_triplet(&adapters.bind(&store), &codecs, &z).unwrap();
    let (zv, zi, zl) = split_latents(&z).unwrap();
    let plain: Vec<DecodedTriplet> = codecs
        .vis
        .decode_images(&zv)
        .unwrap()
        .into_iter()
        .zip(codecs.ir.decode_images(&zi).unwrap())
        .zip(codecs.label.decode_labels(&zl).unwrap())
        .map(|((vis, ir), label)| DecodedTriplet { vis, ir, label })
        .collect();
    let same = with.len() == 100
        && with.iter().zip(&plain).all(|(a, b)| {
            a.label == b.label
                && a.vis.data.iter().zip(&b.vis.data).all(|(x, y)| x.to_bits() == y.to_bits())
                && a.ir.data.iter().zip(&b.ir.data).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    t.report("zero_init_adapter_identity", same, format!("100 latents, bitwise equal = {same}"));
}

fn miou_arithmetic(t: &mut Tally, test: &[Triplet], n_classes: usize) {
    let cm = ConfusionMatrix::from_rows(&[vec![50, 10], vec![5, 35]]).unwrap();
    let m = cm.miou();
    let oracle = miou(&OracleSegmenter, test, n_classes).unwrap().miou;
    t.report(
        "miou_arithmetic",
        (m - 0.7346).abs() < 1e-4 && (m - (50.0 / 65.0 + 0.7) / 2.0).abs() < 1e-12 && oracle == 1.0,
        format!("hand case {m:.6}, oracle {oracle}"),
    );
}

fn frac(a: &[bool]) -> usize {
    a.iter().filter(|&&x| x).count()
}

fn main() {
    let total = Instant::now();
    let mut t = Tally { passed: 0, failed: Vec::new() };
    sbca_oracle(&mut t);
    sbca_hand_case(&mut t);
    diffusion_identities(&mut t);
    gradient_check(&mut t);
    stop_gradient(&mut t);

    let cfg = RunConfig::tiny();
    let world = &cfg.corpus.world;
    let n_classes = world.n_classes();
    zero_init_identity(&mut t, &cfg);
    let real = generate_samples(world, cfg.corpus.n_samples, cfg.corpus.seed).unwrap();
    let test = generate_samples(world, cfg.corpus.n_test, cfg.corpus.test_seed).unwrap();
    miou_arithmetic(&mut t, &test, n_classes);

    progress("training codecs");
    let start = Instant::now();
    let (codecs, _) = train_codecs(&real, &cfg.codec).unwrap();
    let codec_secs = start.elapsed().as_secs_f64();
    let test_refs: Vec<&Triplet> = test.iter().collect();
    let label_acc = 1.0 - codecs.label.reconstruction_error(&test_refs).unwrap();
    let vis_mse = codecs.vis.reconstruction_error(&test_refs).unwrap();
    let ir_mse = codecs.ir.reconstruction_error(&test_refs).unwrap();
    t.report(
        "codec_fidelity",
        label_acc >= 0.99 && vis_mse <= 5e-3 && ir_mse <= 5e-3 && codec_secs < 900.0,
        format!("held-out label accuracy {label_acc:.4}, VIS MSE {vis_mse:.2e}, IR MSE {ir_mse:.2e}, {codec_secs:.0}s"),
    );

    let scenes = group_triplets(&real, cfg.generator.sbca.k, cfg.generator.seed).unwrap();
    let multiple = *cfg.eval.multiples.iter().max().unwrap();
    let seg = &cfg.eval.segmenter;
    let mut consistency_secs = 0.0;
    let mut syn_sets = Vec::new();
    let mut per_seed = Vec::new();
    let mut rare = Vec::new();
    let mut entropy = Vec::new();
    let (mut miou_on, mut miou_off, mut miou_real, mut miou_big) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &seed in &cfg.eval.seeds {
        let mut on_cfg = cfg.generator.clone();
        on_cfg.seed = derive_seed(cfg.generator.seed, seed);
        let mut off_cfg = on_cfg.clone();
        off_cfg.sbca.enabled = false;

        progress(&format!("seed {seed}: generator with scene-balanced sampling"));
        let consistency_start = Instant::now();
        let (gen_on, _) = train_generator(&real, &codecs, world, &on_cfg, |_| {}).unwrap();
        let big = gen_on.synthesize(&codecs, multiple * real.len(), derive_seed(seed, 100)).unwrap();
        let syn_on: Vec<Triplet> = big[..real.len()].to_vec();
        let c = consistency_metrics(&syn_on, world).unwrap();
        consistency_secs += consistency_start.elapsed().as_secs_f64();
        per_seed.push(c.clone());
        progress(&format!("seed {seed}: {c:?}"));

        progress(&format!("seed {seed}: generator with uniform sampling"));
        let (gen_off, _) = train_generator(&real, &codecs, world, &off_cfg, |_| {}).unwrap();
        let syn_off = gen_off.synthesize(&codecs, real.len(), derive_seed(seed, 100)).unwrap();
        let d_on = diversity_metrics(&syn_on, &scenes, world).unwrap();
        let d_off = diversity_metrics(&syn_off, &scenes, world).unwrap();
        progress(&format!("seed {seed}: diversity on {d_on:?} off {d_off:?}"));
        rare.push((d_on.rare_class_rate, d_off.rare_class_rate));
        entropy.push((d_on.scene_entropy, d_off.scene_entropy));

        progress(&format!("seed {seed}: segmenters"));
        let score = |sets: &[&[Triplet]]| miou(&train_segmenter(sets, n_classes, seg, seed).unwrap(), &test, n_classes).unwrap().miou;
        miou_real.push(score(&[&real]));
        miou_on.push(score(&[&real, &syn_on]));
        miou_off.push(score(&[&real, &syn_off]));
        miou_big.push(score(&[&real, &big]));
        progress(&format!(
            "seed {seed}: mIoU real {:.4}, real+syn {:.4} (uniform {:.4}), real+{multiple}x syn {:.4}",
            miou_real.last().unwrap(),
            miou_on.last().unwrap(),
            miou_off.last().unwrap(),
            miou_big.last().unwrap()
        ));
        syn_sets.push(syn_on);
    }

    let refs: Vec<&[Triplet]> = syn_sets.iter().map(Vec::as_slice).collect();
    let start = Instant::now();
    let null = permutation_null_pooled(&refs, world, cfg.eval.null_shuffles, 77).unwrap();
    consistency_secs += start.elapsed().as_secs_f64();
    let recall = null.get(ConsistencyMetric::Recall);
    let order = null.get(ConsistencyMetric::Ordering);
    let each = per_seed.iter().all(|c| c.prompt_recall >= 0.7 && c.class_ir_ordering_corr >= 0.5);
    let seeds_txt: Vec<String> =
        per_seed.iter().map(|c| format!("({:.3}, {:.3})", c.prompt_recall, c.class_ir_ordering_corr)).collect();
    t.report(
        "end_to_end_consistency",
        each && recall.p_value < 0.01 && order.p_value < 0.01 && consistency_secs <= 7200.0,
        format!(
            "per seed (recall, ordering) {}; pooled recall {:.3} vs null {:.3} p={:.4}; ordering {:.3} vs null {:.3} p={:.4}; {:.0}s",
            seeds_txt.join(" "),
            recall.observed,
            recall.null_mean,
            recall.p_value,
            order.observed,
            order.null_mean,
            order.p_value,
            consistency_secs
        ),
    );

    let rare_up: Vec<bool> = rare.iter().map(|(a, b)| a > b).collect();
    let ent_up: Vec<bool> = entropy.iter().map(|(a, b)| a > b).collect();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (m_on, m_off) = (mean(&miou_on), mean(&miou_off));
    t.report(
        "sbca_ablation_direction",
        frac(&rare_up) >= 2 && frac(&ent_up) >= 2 && m_on >= m_off,
        format!(
            "rare_class_rate (on, off) {rare:.3?}; scene_entropy (on, off) {entropy:.3?}; real+syn mIoU on {m_on:.4} vs off {m_off:.4}"
        ),
    );

    let gains: Vec<bool> = miou_on.iter().zip(&miou_real).map(|(a, b)| a >= b).collect();
    let (m_1, m_10) = (mean(&miou_on), mean(&miou_big));
    t.report(
        "augmentation_trend",
        frac(&gains) >= 2 && m_10 >= m_1,
        format!(
            "real {miou_real:.4?}; real+syn 1:1 {miou_on:.4?}; real+syn 1:{multiple} {miou_big:.4?}; means {:.4} / {m_1:.4} / {m_10:.4}",
            mean(&miou_real)
        ),
    );

    println!(
        "acceptance: {} passed, {} failed {:?} in {:.0}s",
        t.passed,
        t.failed.len(),
        t.failed,
        total.elapsed().as_secs_f64()
    );
}
