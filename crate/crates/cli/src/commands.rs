use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use trigen_core::codecs::{train_codecs, CodecSet};
use trigen_core::conditioning::group_triplets;
use trigen_core::config::RunConfig;
use trigen_core::corpus::{generate_samples, load_dataset, write_dataset, PromptRecord, Triplet};
use trigen_core::eval::{
    consistency_metrics, diversity_metrics, mean_std, permutation_null, ratio_sweep, run_protocol, scaling_sweep,
    MetricsReport, Regime,
};
use trigen_core::generator::{train_generator, TrainRecord, TripletGenerator};
use trigen_core::sbca::{compute_class_stats, compute_weights};
use trigen_core::util::derive_seed;
use trigen_core::{Error, Result};

use crate::run::{RunRoot, Stage};
use crate::settings::to_toml;

pub const GENERATOR_FILE: &str = "generator.ckpt";

pub struct Ctx {
    pub config: RunConfig,
    pub run: RunRoot,
    pub force: bool,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value).expect("serializable report") + "\n")
}

impl Ctx {
    fn hash(&self) -> String {
        self.config.hash()
    }

    fn write_config(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("config.toml"), to_toml(&self.config)?)
    }

    fn load_corpus(&self, dir: &Path) -> Result<Vec<Triplet>> {
        let (manifest, triplets) = load_dataset(dir)?;
        let expected = self.config.corpus.world.config_hash();
        if manifest.config_hash != expected {
            return Err(Error::data(format!(
                "{} was generated from a different world configuration ({} vs {expected})",
                dir.display(),
                manifest.config_hash
            )));
        }
        if triplets.is_empty() {
            return Err(Error::data(format!("{} holds no triplets", dir.display())));
        }
        Ok(triplets)
    }

    fn test_split(&self) -> Result<Vec<Triplet>> {
        let c = &self.config.corpus;
        generate_samples(&c.world, c.n_test, c.test_seed)
    }

    fn train_gen(&self, triplets: &[Triplet], codecs: &CodecSet, log: Option<&Path>) -> Result<TripletGenerator> {
        let mut sink = match log {
            Some(p) => Some(fs::File::create(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        let mut io_err = None;
        let on_record = |r: &TrainRecord| {
            eprintln!(
                "step {:>6}  denoise {:>10.4}  calib {:>10.4}  lr {:.2e}",
                r.step, r.loss_denoise, r.loss_calib, r.lr
            );
            if let Some(f) = sink.as_mut() {
                if let Err(e) = writeln!(f, "{}", serde_json::to_string(r).expect("record serializes")) {
                    io_err.get_or_insert(e);
                }
            }
        };
        let (gen, _) = train_generator(triplets, codecs, &self.config.corpus.world, &self.config.generator, on_record)?;
        if let (Some(e), Some(p)) = (io_err, log) {
            return Err(Error::io(p, e));
        }
        Ok(gen)
    }
}

pub fn gen_corpus(ctx: &Ctx, out: &Path) -> Result<()> {
    let c = &ctx.config.corpus;
    let stage = Stage::begin(out.to_path_buf(), ctx.force, true)?;
    let triplets = generate_samples(&c.world, c.n_samples, c.seed)?;
    let manifest = write_dataset(&stage.partial, &triplets, c.seed, &c.world.config_hash())?;
    ctx.write_config(&stage.partial)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for e in &manifest.entries {
        for &id in &e.classes {
            *counts.entry(c.world.class_name(id).unwrap_or("?").to_owned()).or_default() += 1;
        }
    }
    stage.commit(&ctx.run, "gen-corpus", &ctx.hash(), &[], json!({ "n_samples": triplets.len(), "class_counts": counts }))?;
    eprintln!("wrote {} triplets to {}", triplets.len(), out.display());
    Ok(())
}

pub fn train_codecs_cmd(ctx: &Ctx, corpus: &Path, out: &Path) -> Result<()> {
    let triplets = ctx.load_corpus(corpus)?;
    let stage = Stage::begin(out.to_path_buf(), ctx.force, true)?;
    let (codecs, curves) = train_codecs(&triplets, &ctx.config.codec)?;
    codecs.save(&stage.partial)?;
    write_json(&stage.partial.join("curves.json"), &curves)?;
    ctx.write_config(&stage.partial)?;
    let refs: Vec<&Triplet> = triplets.iter().collect();
    let test = ctx.test_split()?;
    let test_refs: Vec<&Triplet> = test.iter().collect();
    let mut metrics = serde_json::Map::new();
    for m in trigen_core::codecs::Modality::ALL {
        let codec = codecs.get(m);
        metrics.insert(format!("{m}_train_error"), json!(codec.reconstruction_error(&refs)?));
        metrics.insert(format!("{m}_test_error"), json!(codec.reconstruction_error(&test_refs)?));
    }
    eprintln!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
    stage.commit(&ctx.run, "train-codecs", &ctx.hash(), &[corpus], serde_json::Value::Object(metrics))?;
    Ok(())
}

pub fn train_gen_cmd(ctx: &Ctx, corpus: &Path, codecs_dir: &Path, out: &Path) -> Result<()> {
    let triplets = ctx.load_corpus(corpus)?;
    let codecs = CodecSet::load(codecs_dir)?;
    let stage = Stage::begin(out.to_path_buf(), ctx.force, true)?;
    let gen = ctx.train_gen(&triplets, &codecs, Some(&stage.partial.join("train_log.jsonl")))?;
    gen.save(&stage.partial.join(GENERATOR_FILE))?;
    let ids: Vec<String> = (0..triplets.len()).map(|i| format!("{i:06}")).collect();
    write_file(&stage.partial.join("sampling_weights.csv"), gen.table.to_csv(&ids))?;
    ctx.write_config(&stage.partial)?;
    let metrics = json!({
        "steps": gen.steps_trained,
        "parameters": gen.denoiser.num_params(),
        "adapter_parameters": gen.denoiser.store.num_scalars(&gen.adapters.param_ids()),
        "scene_group_sizes": gen.groups.group_sizes(),
    });
    stage.commit(&ctx.run, "train-gen", &ctx.hash(), &[corpus, codecs_dir], metrics)?;
    Ok(())
}

fn generator_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(GENERATOR_FILE)
    } else {
        p.to_path_buf()
    }
}

fn read_prompts(path: &Path) -> Result<Vec<PromptRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let prompts: Vec<PromptRecord> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(PromptRecord::parse)
        .collect();
    if prompts.is_empty() {
        return Err(Error::data(format!("{} contains no prompts", path.display())));
    }
    Ok(prompts)
}

pub fn sample_cmd(
    ctx: &Ctx,
    generator: &Path,
    codecs_dir: &Path,
    n: usize,
    prompts: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if n == 0 {
        return Err(Error::config("--n must be at least 1"));
    }
    let gen = TripletGenerator::load(&generator_path(generator))?;
    let codecs = CodecSet::load(codecs_dir)?;
    let mut rng = trigen_core::util::rng(seed);
    let requests = match prompts {
        Some(p) => {
            let list = read_prompts(p)?;
            for pr in &list {
                gen.vocab.encode(pr)?;
            }
            (0..n).map(|i| gen.request(list[i % list.len()].clone())).collect()
        }
        None => gen.auto_requests(n, &mut rng)?,
    };
    let stage = Stage::begin(out.to_path_buf(), ctx.force, true)?;
    let mut triplets = Vec::with_capacity(n);
    for chunk in requests.chunks(64) {
        triplets.extend(gen.generate(&codecs, chunk, &mut rng)?);
        eprintln!("sampled {}/{n}", triplets.len());
    }
    write_dataset(&stage.partial, &triplets, seed, &gen.corpus.config_hash())?;
    let c = consistency_metrics(&triplets, &gen.corpus)?;
    let mut inputs: Vec<&Path> = vec![generator, codecs_dir];
    if let Some(p) = prompts {
        inputs.push(p);
    }
    stage.commit(&ctx.run, "sample", &ctx.hash(), &inputs, json!({ "n": n, "consistency": c }))?;
    Ok(())
}

#[derive(Serialize)]
struct EvaluationReport {
    config_hash: String,
    protocol: trigen_core::eval::ProtocolReport,
    null: trigen_core::eval::ConsistencyNull,
    real_diversity: trigen_core::eval::Diversity,
    metrics: MetricsReport,
}

pub fn evaluate_cmd(ctx: &Ctx, real_dir: &Path, syn_dir: &Path, out: &Path) -> Result<()> {
    let cfg = &ctx.config;
    let real = ctx.load_corpus(real_dir)?;
    let syn = ctx.load_corpus(syn_dir)?;
    let test = ctx.test_split()?;
    let stage = Stage::begin(out.to_path_buf(), ctx.force, true)?;
    let n_classes = cfg.corpus.world.n_classes();
    let protocol = run_protocol(&real, &syn, &test, &cfg.eval.regimes, &cfg.eval.seeds, n_classes, &cfg.eval.segmenter)?;
    let consistency = consistency_metrics(&syn, &cfg.corpus.world)?;
    let null = permutation_null(&syn, &cfg.corpus.world, cfg.eval.null_shuffles, derive_seed(cfg.eval.seeds[0], 5))?;
    let scenes = group_triplets(&real, cfg.generator.sbca.k.min(real.len()), cfg.generator.seed)?;
    let diversity = diversity_metrics(&syn, &scenes, &cfg.corpus.world)?;
    let real_diversity = diversity_metrics(&real, &scenes, &cfg.corpus.world)?;
    let headline = protocol
        .row(Regime::RealSyn)
        .or_else(|| protocol.rows.first())
        .expect("protocol has at least one row");
    let per_class = headline.cells.first().map(|c| c.per_class_iou.clone()).unwrap_or_default();
    let metrics = MetricsReport {
        miou: headline.mean,
        per_class_iou: per_class,
        consistency,
        diversity,
        config_hash: ctx.hash(),
        seeds: cfg.eval.seeds.clone(),
    };
    let report = EvaluationReport { config_hash: ctx.hash(), protocol, null, real_diversity, metrics };
    write_json(&stage.partial.join("report.json"), &report)?;
    let text = format!("{}\n{}", report.protocol.render(), report.metrics.render(&cfg.corpus.world));
    write_file(&stage.partial.join("report.txt"), &text)?;
    print!("{text}");
    let summary = json!({
        "miou": report.protocol.rows.iter().map(|r| (r.regime.name(), r.mean)).collect::<BTreeMap<_, _>>(),
        "consistency": report.metrics.consistency,
    });
    stage.commit(&ctx.run, "evaluate", &ctx.hash(), &[real_dir, syn_dir], summary)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepKind {
    Ratio,
    Scale,
    Alpha,
    Lambda,
}

#[derive(Serialize)]
struct ParamRow {
    value: f64,
    rare_class_rate: (f64, f64),
    scene_entropy: (f64, f64),
    prompt_recall: (f64, f64),
    real_syn_miou: (f64, f64),
}

fn render_param_rows(name: &str, rows: &[ParamRow]) -> String {
    let mut s = format!("{name:<8}  rare_class_rate  scene_entropy    prompt_recall    real+syn mIoU\n");
    for r in rows {
        let f = |(m, sd): (f64, f64)| format!("{m:.4} ± {sd:.4}");
        s += &format!(
            "{:<8}  {:<15}  {:<15}  {:<15}  {}\n",
            r.value,
            f(r.rare_class_rate),
            f(r.scene_entropy),
            f(r.prompt_recall),
            f(r.real_syn_miou)
        );
    }
    s
}

pub fn sweep_cmd(ctx: &Ctx, kind: SweepKind, corpus: &Path, codecs_dir: &Path, out: &Path) -> Result<()> {
    let cfg = &ctx.config;
    let real = ctx.load_corpus(corpus)?;
    let codecs = CodecSet::load(codecs_dir)?;
    let test = ctx.test_split()?;
    let n_classes = cfg.corpus.world.n_classes();
    let seg = &cfg.eval.segmenter;
    let seeds = &cfg.eval.seeds;
    let stage = Stage::begin(out.to_path_buf(), ctx.force, true)?;
    let with_seed = |seed: u64| {
        let mut c = ctx.config.clone();
        c.generator.seed = derive_seed(cfg.generator.seed, seed);
        Ctx { config: c, run: ctx.run.clone(), force: ctx.force }
    };
    let (json, text) = match kind {
        SweepKind::Ratio => {
            let rep = ratio_sweep(&real, &test, &cfg.eval.ratios, seeds, n_classes, seg, |subset, seed| {
                let gen = with_seed(seed).train_gen(subset, &codecs, None)?;
                gen.synthesize(&codecs, subset.len() * cfg.eval.syn_multiple, derive_seed(seed, 8))
            })?;
            (serde_json::to_value(&rep).expect("report serializes"), rep.render())
        }
        SweepKind::Scale => {
            let mut gens: BTreeMap<u64, TripletGenerator> = BTreeMap::new();
            let rep = scaling_sweep(&real, &test, &cfg.eval.multiples, seeds, n_classes, seg, |k, seed| {
                if !gens.contains_key(&seed) {
                    gens.insert(seed, with_seed(seed).train_gen(&real, &codecs, None)?);
                }
                gens[&seed].synthesize(&codecs, real.len() * k, derive_seed(seed, 9))
            })?;
            (serde_json::to_value(&rep).expect("report serializes"), rep.render())
        }
        SweepKind::Alpha | SweepKind::Lambda => {
            let (name, values) = match kind {
                SweepKind::Alpha => ("alpha", &cfg.eval.alphas),
                _ => ("lambda", &cfg.eval.lambdas),
            };
            let scenes = group_triplets(&real, cfg.generator.sbca.k.min(real.len()), cfg.generator.seed)?;
            let mut rows = Vec::new();
            for &v in values {
                let mut cols: [Vec<f64>; 4] = Default::default();
                for &seed in seeds {
                    let mut c = with_seed(seed);
                    match kind {
                        SweepKind::Alpha => c.config.generator.sbca.alpha = v,
                        _ => c.config.generator.lambda = v,
                    }
                    c.config.validate()?;
                    let gen = c.train_gen(&real, &codecs, None)?;
                    let syn = gen.synthesize(&codecs, real.len() * cfg.eval.syn_multiple, derive_seed(seed, 10))?;
                    let d = diversity_metrics(&syn, &scenes, &cfg.corpus.world)?;
                    let cm = consistency_metrics(&syn, &cfg.corpus.world)?;
                    let p = run_protocol(&real, &syn, &test, &[Regime::RealSyn], &[seed], n_classes, seg)?;
                    cols[0].push(d.rare_class_rate);
                    cols[1].push(d.scene_entropy);
                    cols[2].push(cm.prompt_recall);
                    cols[3].push(p.rows[0].mean);
                }
                rows.push(ParamRow {
                    value: v,
                    rare_class_rate: mean_std(&cols[0]),
                    scene_entropy: mean_std(&cols[1]),
                    prompt_recall: mean_std(&cols[2]),
                    real_syn_miou: mean_std(&cols[3]),
                });
            }
            let text = render_param_rows(name, &rows);
            (json!({ "kind": name, "rows": rows }), text)
        }
    };
    write_json(&stage.partial.join("sweep.json"), &json)?;
    write_file(&stage.partial.join("sweep.txt"), &text)?;
    ctx.write_config(&stage.partial)?;
    print!("{text}");
    stage.commit(&ctx.run, "sweep", &ctx.hash(), &[corpus, codecs_dir], json)?;
    Ok(())
}

pub fn export_weights_cmd(ctx: &Ctx, corpus: &Path, out: &Path) -> Result<()> {
    let cfg = &ctx.config;
    let real = ctx.load_corpus(corpus)?;
    let sb = &cfg.generator.sbca;
    let lists: Vec<Vec<u8>> = real.iter().map(Triplet::class_ids).collect();
    let stats = compute_class_stats(&lists, sb.alpha, sb.epsilon_floor)?;
    let groups = group_triplets(&real, sb.k.min(real.len()), derive_seed(cfg.generator.seed, 3))?;
    let table = compute_weights(&stats, &groups.assignment, groups.k, &lists)?;
    let ids: Vec<String> = (0..real.len()).map(|i| format!("{i:06}")).collect();
    let stage = Stage::begin(out.to_path_buf(), ctx.force, false)?;
    write_file(&stage.partial, table.to_csv(&ids))?;
    stage.commit(&ctx.run, "export-weights", &ctx.hash(), &[corpus], json!({ "rows": table.len(), "groups": groups.k }))?;
    Ok(())
}
