//! `trigen`: corpus generation, codec and generator training, sampling,
//! evaluation and sweeps.

mod commands;
mod run;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use trigen_core::{Error, Result};

use commands::{Ctx, SweepKind};
use run::RunRoot;

#[derive(Parser, Debug)]
#[command(name = "trigen", version, about = "Joint VIS-IR-label triplet generation and evaluation")]
struct Cli {
    /// Base configuration: `default` (64×64) or `tiny` (32×32).
    #[arg(long, global = true, default_value = "default")]
    preset: String,

    /// TOML file overlaid on the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set generator.steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Directory holding the run manifest; relative paths resolve against it.
    #[arg(long, global = true, env = "TRIGEN_RUN_ROOT", default_value = ".")]
    run_root: PathBuf,

    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the training corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the VIS, IR and label codecs on a corpus.
    TrainCodecs {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the joint denoiser and calibration adapters.
    TrainGen {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codecs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Uniform batches and no scene grouping.
        #[arg(long)]
        no_sbca: bool,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epsilon_floor: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate a synthetic dataset.
    Sample {
        /// Generator directory or checkpoint file.
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        codecs: PathBuf,
        #[arg(long)]
        n: usize,
        /// One prompt per line (`<scene description>; <class>, <class>`);
        /// without it prompts are drawn from the training sampler.
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segmentation protocol plus consistency and diversity of a synthetic set.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        syn: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ratio, scale, alpha or lambda sweep.
    Sweep {
        #[arg(long, value_enum)]
        kind: SweepKind,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codecs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the scene-balanced sampling weights of a corpus as CSV.
    ExportWeights {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig,
    /// List run-root entries that no manifest record owns.
    CheckRun,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numerical(_) => 4,
        Error::DegenerateInput(_) | Error::Shape(_) | Error::Data(_) | Error::Io { .. } => 3,
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Command::TrainGen { no_sbca, lambda, alpha, epsilon_floor, steps, .. } = &cli.command {
        if *no_sbca {
            overrides.push("generator.sbca.enabled=false".into());
        }
        for (key, v) in [("lambda", lambda), ("sbca.alpha", alpha), ("sbca.epsilon_floor", epsilon_floor)] {
            if let Some(v) = v {
                overrides.push(format!("generator.{key}={v:?}"));
            }
        }
        if let Some(s) = steps {
            overrides.push(format!("generator.steps={s}"));
        }
    }
    let config = settings::resolve(&cli.preset, cli.config.as_deref(), &overrides)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", settings::to_toml(&config)?);
        return Ok(());
    }
    let run = RunRoot::new(cli.run_root.clone())?;
    if let Command::CheckRun = cli.command {
        let orphans = run::orphans(&run.root)?;
        for o in &orphans {
            println!("{o}");
        }
        return if orphans.is_empty() {
            Ok(())
        } else {
            Err(Error::data(format!("{} entries are not owned by the run manifest", orphans.len())))
        };
    }
    let ctx = Ctx { config, run: run.clone(), force: cli.force };
    let p = |path: &PathBuf| run.resolve(path);
    match &cli.command {
        Command::GenCorpus { out } => commands::gen_corpus(&ctx, &p(out)),
        Command::TrainCodecs { corpus, out } => commands::train_codecs_cmd(&ctx, &p(corpus), &p(out)),
        Command::TrainGen { corpus, codecs, out, .. } => commands::train_gen_cmd(&ctx, &p(corpus), &p(codecs), &p(out)),
        Command::Sample { generator, codecs, n, prompts, seed, out } => {
            let prompts = prompts.as_ref().map(p);
            commands::sample_cmd(&ctx, &p(generator), &p(codecs), *n, prompts.as_deref(), *seed, &p(out))
        }
        Command::Evaluate { real, syn, out } => commands::evaluate_cmd(&ctx, &p(real), &p(syn), &p(out)),
        Command::Sweep { kind, corpus, codecs, out } => commands::sweep_cmd(&ctx, *kind, &p(corpus), &p(codecs), &p(out)),
        Command::ExportWeights { corpus, out } => commands::export_weights_cmd(&ctx, &p(corpus), &p(out)),
        Command::ShowConfig | Command::CheckRun => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match &e {
                Error::Config(_) => "config",
                Error::Numerical(_) => "numerical",
                Error::Io { .. } => "io",
                _ => "data",
            };
            eprintln!("{}", serde_json::json!({ "error": kind, "message": e.to_string() }));
            ExitCode::from(exit_code(&e))
        }
    }
}
