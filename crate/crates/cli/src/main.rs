//! `tapgkit`: synthetic data, training, inference, evaluation and sweeps
//! driven by one TOML configuration file.

mod commands;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tapgkit::Config;

#[derive(Parser, Debug)]
#[command(name = "tapgkit", version, about = "Temporal action proposal generation toolkit")]
struct Cli {
    /// TOML configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the model and shuffling seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-video parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic dataset: features/, annotations.json and manifest.json.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a model, writing a checkpoint after every epoch and a JSON-lines log.
    Train {
        /// Dataset directory with annotations.json and features/.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Epoch log; defaults to the checkpoint path with a .jsonl extension.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continues from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generates proposals (or classified detections) for every video of a dataset.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output JSON, video id to detections.
        #[arg(long)]
        out: PathBuf,
        /// Named suppression preset, e.g. anet-tapg-snms or thumos-tapg-nms.
        #[arg(long)]
        preset: Option<String>,
        /// Video-level class scores; turns proposals into detections.
        #[arg(long)]
        classes: Option<PathBuf>,
        /// Classes attached to each proposal when --classes is given.
        #[arg(long, default_value_t = 1)]
        top_k: usize,
    },
    /// Scores proposals against annotations: metrics.json, ar_curve.csv and ar_curve.svg.
    Eval {
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Skip the SVG plot.
        #[arg(long)]
        no_svg: bool,
    },
    /// Trains and evaluates once per lambda or per ablation and tabulates the results.
    Sweep {
        /// Dataset directory; the configured synthetic set when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
        /// Ablation names exp1..exp7.
        #[arg(long, value_delimiter = ',')]
        ablations: Vec<String>,
        /// Markdown table; a .json file with the same stem gets the raw rows.
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints the effective configuration as TOML.
    Config {
        /// Start from the small desk-scale configuration instead of the defaults.
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> tapgkit::Result<Config> {
    let mut cfg = match (&cli.command, &cli.config) {
        (_, Some(path)) => Config::load(path)?,
        (Command::Config { desk: true, .. }, None) => Config::desk(),
        _ => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.train.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> commands::Outcome {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth { out } => commands::synth(&cfg, &out),
        Command::Train { data, out, log, resume } => commands::train(&cfg, &data, &out, log, resume),
        Command::Infer {
            checkpoint,
            data,
            out,
            preset,
            classes,
            top_k,
        } => commands::infer(&cfg, &checkpoint, &data, &out, preset, classes, top_k),
        Command::Eval {
            proposals,
            annotations,
            out,
            no_svg,
        } => commands::eval(&cfg, &proposals, &annotations, &out, !no_svg),
        Command::Sweep {
            data,
            lambdas,
            ablations,
            out,
        } => commands::sweep(&cfg, data, &lambdas, &ablations, &out),
        Command::Config { out, .. } => commands::show_config(&cfg, out),
    }
}

fn report(kind: &str, message: String, checkpoint: Option<PathBuf>) {
    let mut err = serde_json::json!({ "error": kind, "message": message });
    if let Some(c) = checkpoint {
        err["last_good_checkpoint"] = serde_json::json!(c);
    }
    let _ = writeln!(std::io::stderr(), "{err}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TAPGKIT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("usage", e.to_string().trim_end().to_string(), None);
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(f.error.kind(), f.error.to_string(), f.checkpoint);
            ExitCode::FAILURE
        }
    }
}
