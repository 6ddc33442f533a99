use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use headfit::engine::Block;
use headfit::toolkit::io::write_json;
use headfit::toolkit::run::{
    init_threads, run_export_control, run_fit, run_gradcheck, run_render, run_synth, run_transfer_apply, run_transfer_train, RunConfig,
};
use headfit::Error;

#[derive(Parser)]
#[command(name = "headfit", version, about = "Fit and drive personalized head meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known ground truth.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        levels: Option<usize>,
        /// Targets without sensor noise.
        #[arg(long)]
        noiseless: bool,
    },
    /// Fit expression, jaw and offset fields to a dataset.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Compare analytic gradients with finite differences; exit 1 if a block fails.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// `all` or a comma list of psi, omega, static, dynamic.
        #[arg(long, default_value = "all")]
        blocks: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the transfer networks on fitted runs (or the synthetic corpus if none given).
    TransferTrain {
        #[command(flatten)]
        common: Common,
        /// Fit output directory; repeat once per identity.
        #[arg(long = "fit")]
        fits: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Drive one fitted identity with another fit's sequence.
    TransferApply {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        driving: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render reference and driving normal maps for a transferred sequence.
    ExportControl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        driving: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render normal, depth and coverage maps of a dataset or checkpoint.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Outcome {
    Done,
    Failed,
    Aborted,
}

fn print<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    let threads = init_threads()?;
    log::info!("using {threads} worker threads");
    match cli.command {
        Command::Synth { common, out, frames, width, height, levels, noiseless } => {
            let mut cfg = common.load()?;
            if let Some(f) = frames {
                cfg.synth.frames = f;
            }
            if let Some(w) = width {
                cfg.synth.width = w;
            }
            if let Some(h) = height {
                cfg.synth.height = h;
            }
            if let Some(l) = levels {
                cfg.synth.levels = l;
            }
            if noiseless {
                cfg.synth = cfg.synth.noiseless();
            }
            let m = run_synth(&cfg.resolved(), &out)?;
            print(&serde_json::json!({ "out": out, "frames": m.frames.len(), "seed": m.seed, "config_hash": m.config_hash }));
            Ok(Outcome::Done)
        }
        Command::Fit { common, data, out, iters } => {
            let mut cfg = common.load()?;
            if let Some(n) = iters {
                cfg.schedule.iters = n;
            }
            let run = run_fit(&cfg.resolved(), &data, &out)?;
            let r = &run.report;
            print(&serde_json::json!({
                "out": out,
                "iterations": r.iterations,
                "initial_loss": r.initial.total,
                "final_loss": r.final_terms.total,
                "converged": r.converged,
                "aborted": r.aborted,
                "digest": run.digest,
            }));
            Ok(if r.aborted.is_some() { Outcome::Aborted } else { Outcome::Done })
        }
        Command::Gradcheck { common, data, blocks, checkpoint, out } => {
            let mut cfg = common.load()?.resolved();
            cfg.gradcheck.blocks = Block::parse(&blocks)?;
            let report = run_gradcheck(&cfg, &data, checkpoint.as_deref())?;
            if let Some(p) = out {
                write_json(&p, &report)?;
            }
            print(&report);
            Ok(if report.pass { Outcome::Done } else { Outcome::Failed })
        }
        Command::TransferTrain { common, fits, out, epochs } => {
            let mut cfg = common.load()?;
            if let Some(e) = epochs {
                cfg.transfer.epochs = e;
            }
            let r = run_transfer_train(&cfg.resolved(), &fits, &out)?;
            print(&serde_json::json!({
                "out": out,
                "final_train": r.final_train,
                "train_baseline": r.train_baseline,
                "final_validation": r.final_validation,
                "validation_baseline": r.validation_baseline,
                "warnings": r.warnings,
            }));
            Ok(Outcome::Done)
        }
        Command::TransferApply { common, net, target, driving, out } => {
            let cfg = common.load()?.resolved();
            print(&run_transfer_apply(&cfg, &net, &target, &driving, &out)?);
            Ok(Outcome::Done)
        }
        Command::ExportControl { common, net, target, driving, out } => {
            let cfg = common.load()?.resolved();
            print(&run_export_control(&cfg, &net, &target, &driving, &out)?);
            Ok(Outcome::Done)
        }
        Command::Render { common, data, checkpoint, out } => {
            let cfg = common.load()?.resolved();
            let n = run_render(&cfg, &data, checkpoint.as_deref(), &out)?;
            print(&serde_json::json!({ "out": out, "frames": n }));
            Ok(Outcome::Done)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Ok(Outcome::Aborted) => {
            eprintln!("error: numerical abort");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
