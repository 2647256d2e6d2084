use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dble::cli::{self, RunConfig};
use dble::metrics::DistanceKind;
use dble::Result;

/// Distance-based learning from errors: training, evaluation and
/// calibration diagnostics.
#[derive(Parser)]
#[command(name = "dble", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint, trainlog.csv and config.json.
    Train(Overrides),
    /// Score a checkpoint on the test split; writes report.json and records.csv.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Accuracy against distance-to-center bins from a records.csv file.
    Curve {
        #[arg(long)]
        records: PathBuf,
        /// `d_t` (ground-truth center) or `d_prime_t` (predicted center).
        #[arg(long, default_value = "d_t")]
        which: DistanceKind,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Defaults to curve.csv next to the records file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train both DBLE arms and the vanilla baselines; writes ablation.json.
    Ablate(Overrides),
}

#[derive(Args)]
struct Overrides {
    /// key = value config file (`#` starts a comment).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    distance: Option<String>,
    #[arg(long)]
    mnist_dir: Option<String>,
    #[arg(long = "out")]
    out_dir: Option<String>,
    /// Any config key, e.g. `--set lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let flags = [
            ("dataset", &self.dataset),
            ("method", &self.method),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("samples", &self.samples),
            ("ablation", &self.ablation),
            ("distance", &self.distance),
            ("mnist_dir", &self.mnist_dir),
            ("out_dir", &self.out_dir),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| dble::Error::Config {
                    field: pair.clone(),
                    reason: "expected KEY=VALUE".into(),
                })?;
            cfg.set(k.trim(), v)?;
        }
        Ok(())
    }

    fn build(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        self.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(o) => cli::cmd_train(&o.build()?),
        Command::Evaluate { checkpoint, overrides } => cli::cmd_evaluate(&checkpoint, |cfg| overrides.apply(cfg)),
        Command::Curve {
            records,
            which,
            bins,
            out,
        } => {
            let out = out.unwrap_or_else(|| records.with_file_name("curve.csv"));
            cli::cmd_curve(&records, which, bins, &out)
        }
        Command::Ablate(o) => cli::cmd_ablate(&o.build()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
