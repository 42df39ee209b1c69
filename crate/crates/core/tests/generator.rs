use trigen_core::codecs::{CodecConfig, CodecSet, Modality, ModalityCodec};
use trigen_core::config::RunConfig;
use trigen_core::corpus::{generate_samples, CorpusConfig, Triplet};
use trigen_core::generator::{train_generator, GeneratorConfig, TripletGenerator};
use trigen_core::util::rng;

fn codecs() -> CodecSet {
    let cfg = CodecConfig { height: 16, width: 16, depth: 2, hidden: 8, latent_channels: 2, ..CodecConfig::default() };
    let make = |m, seed| ModalityCodec::new(m, cfg.clone(), seed).unwrap();
    CodecSet::new(make(Modality::Vis, 1), make(Modality::Ir, 2), make(Modality::Label, 3)).unwrap()
}

fn small(steps: usize) -> GeneratorConfig {
    GeneratorConfig {
        width: 16,
        heads: 2,
        blocks: 1,
        patch: 1,
        steps,
        batch_size: 4,
        log_every: 5,
        ..RunConfig::tiny().generator
    }
}

fn corpus() -> (CorpusConfig, Vec<Triplet>) {
    let c = CorpusConfig::with_size(16, 16);
    let ts = generate_samples(&c, 20, 5).unwrap();
    (c, ts)
}

#[test]
fn checkpoint_round_trip_reproduces_samples() {
    let (c, ts) = corpus();
    let cs = codecs();
    let mut logged = 0;
    let (gen, summary) = train_generator(&ts, &cs, &c, &small(20), |_| logged += 1).unwrap();
    assert_eq!(logged, 4);
    assert_eq!(summary.records.len(), 4);
    let fl = summary.final_loss.unwrap();
    assert!((fl.total - (fl.loss_denoise + fl.lambda * fl.loss_calib)).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gen.ckpt");
    gen.save(&path).unwrap();
    let back = TripletGenerator::load(&path).unwrap();
    assert_eq!(back.config, gen.config);
    assert_eq!(back.table, gen.table);
    let req = gen.auto_requests(3, &mut rng(1)).unwrap();
    let a = gen.generate(&cs, &req, &mut rng(2)).unwrap();
    let b = back.generate(&cs, &req, &mut rng(2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(gen.synthesize(&cs, 2, 9).unwrap(), back.synthesize(&cs, 2, 9).unwrap());
}

#[test]
fn training_is_deterministic() {
    let (c, ts) = corpus();
    let cs = codecs();
    let (a, sa) = train_generator(&ts, &cs, &c, &small(10), |_| {}).unwrap();
    let (b, sb) = train_generator(&ts, &cs, &c, &small(10), |_| {}).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(a.sample_latents(&a.auto_requests(2, &mut rng(3)).unwrap(), &mut rng(4)).unwrap(),
               b.sample_latents(&b.auto_requests(2, &mut rng(3)).unwrap(), &mut rng(4)).unwrap());
}

#[test]
fn disabling_sbca_gives_uniform_weights_and_one_scene() {
    let (c, ts) = corpus();
    let mut cfg = small(2);
    cfg.sbca.enabled = false;
    let (gen, _) = train_generator(&ts, &codecs(), &c, &cfg, |_| {}).unwrap();
    let w = gen.table.weights();
    assert!(w.iter().all(|&x| (x - 1.0 / ts.len() as f64).abs() < 1e-15));
    assert_eq!(gen.denoiser.config.scene_groups, 1);
}

#[test]
fn bad_inputs_are_rejected() {
    let (c, ts) = corpus();
    assert!(train_generator(&[], &codecs(), &c, &small(2), |_| {}).is_err());
    let mut cfg = small(2);
    cfg.lambda = -1.0;
    assert!(train_generator(&ts, &codecs(), &c, &cfg, |_| {}).is_err());
    let (gen, _) = train_generator(&ts, &codecs(), &c, &small(2), |_| {}).unwrap();
    assert!(gen.synthesize(&codecs(), 0, 1).is_err());
}
