use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trafx::config::RunConfig;
use trafx::pipeline::{ManifestEntry, Run};
use trafx::synth::generate;
use trafx::{Error, Result};

/// Thread-count override for the rayon pool.
const THREADS_ENV: &str = "TRAFX_THREADS";

#[derive(Parser, Debug)]
#[command(name = "trafx", version, about = "Traffic-image DDoS classification pipeline")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Restrict per-model stages to one configured model.
    #[arg(long, global = true)]
    model: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic flow CSV.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        records_per_class: Option<usize>,
    },
    /// Clean flows and encode them as images.
    Encode {
        /// Flow CSV replacing the configured input.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        augment_per_class: Option<usize>,
    },
    /// Stratified train/validation/test split.
    Split,
    Train(TrainArgs),
    /// Test-set metrics, ROC and confusion.
    Eval,
    /// Grad-CAM and KernelSHAP maps plus quality scores.
    Explain {
        #[arg(long)]
        shap_budget: Option<usize>,
        #[arg(long)]
        samples_per_class: Option<usize>,
    },
    /// Inference latency.
    Bench {
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Assemble the report tables.
    Report,
    /// Every stage in order.
    Run(TrainArgs),
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.train.learning_rate = v;
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={raw} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn print_entries(entries: &[ManifestEntry]) {
    for e in entries {
        println!("{}\t{} outputs\t{:.2}s", e.stage, e.outputs.len(), e.wall_time_s);
    }
}

fn execute(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut cfg = load_config(&cli)?;
    let only = cli.model.as_deref();
    if let Some(name) = only {
        cfg.model(name)?;
    }
    let entries = match &cli.command {
        Command::Synth {
            output,
            records_per_class,
        } => {
            if let Some(n) = records_per_class {
                cfg.data.synth.records_per_class = *n;
            }
            let table = generate(&cfg.data.synth)?;
            let f = std::fs::File::create(output).map_err(|e| Error::Format(format!("{}: {e}", output.display())))?;
            table.write_csv(std::io::BufWriter::new(f))?;
            println!("wrote {} records to {}", table.len(), output.display());
            return Ok(());
        }
        Command::Encode {
            input,
            augment_per_class,
        } => {
            if input.is_some() {
                cfg.data.input = input.clone();
            }
            if augment_per_class.is_some() {
                cfg.data.augment_per_class = *augment_per_class;
            }
            vec![Run::open(cfg)?.encode()?]
        }
        Command::Split => vec![Run::open(cfg)?.split()?],
        Command::Train(args) => {
            args.apply(&mut cfg);
            vec![Run::open(cfg)?.train(only)?]
        }
        Command::Eval => vec![Run::open(cfg)?.eval(only)?],
        Command::Explain {
            shap_budget,
            samples_per_class,
        } => {
            if let Some(v) = shap_budget {
                cfg.explain.shap_budget = *v;
            }
            if let Some(v) = samples_per_class {
                cfg.explain.samples_per_class = *v;
            }
            vec![Run::open(cfg)?.explain(only)?]
        }
        Command::Bench { trials } => {
            if let Some(v) = trials {
                cfg.bench.trials = *v;
            }
            vec![Run::open(cfg)?.bench(only)?]
        }
        Command::Report => vec![Run::open(cfg)?.report()?],
        Command::Run(args) => {
            args.apply(&mut cfg);
            if only.is_some() {
                let name = only.unwrap_or_default().to_string();
                cfg.models.retain(|m| m.name() == name);
            }
            Run::open(cfg)?.run_all()?
        }
    };
    print_entries(&entries);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
