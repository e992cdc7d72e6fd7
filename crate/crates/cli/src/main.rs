//! `stemseg` command-line driver.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use run::{CliError, RunDir};

#[derive(Parser, Debug)]
#[command(name = "stemseg", version, about = "Thin-structure semantic segmentation toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Config file: `key = value` lines under `[section]` headers.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.iterations=500`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Root for run directories (`paths.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory written by `gen-data` (`paths.data`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Run directory label; defaults to the subcommand name.
    #[arg(long, global = true)]
    label: Option<String>,
    /// Replace an existing run directory.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads; defaults to STEMSEG_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Val,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (images, masks, manifests).
    GenData,
    /// Supervised training.
    Train {
        #[arg(long, value_parser = ["sapa", "bilinear"])]
        upsampler: Option<String>,
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Rank the unlabeled pool by teacher stem share and keep the top per domain.
    Select {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        n_per_domain: Option<usize>,
    },
    /// Burn-in, handoff and EMA stages from a supervised teacher.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        /// Output directory of `select`; selection runs inline if omitted.
        #[arg(long)]
        selection: Option<PathBuf>,
    },
    /// Multi-scale tiled inference on a split.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated scale set. Repeat to compare several sets.
        #[arg(long)]
        scales: Vec<String>,
        /// Window `K` or `KHxKW`.
        #[arg(long)]
        window: Option<String>,
        /// Stride `T` or `THxTW`.
        #[arg(long)]
        stride: Option<String>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        /// Write per-scale logits for each image.
        #[arg(long)]
        dump_logits: bool,
    },
    /// Per-class IoU and mIoU of a checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Staged ablation with one report row per stage.
    Ablate {
        #[arg(long, default_value = "baseline,sapa,distill,ttscale")]
        stages: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            CliError::new("usage", first).report();
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            e.report();
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    run::init_threads(cli.common.threads)?;
    let c = &cli.common;
    match cli.command {
        Command::GenData => run::gen_data(c),
        Command::Train { upsampler, iterations } => run::train(c, upsampler, iterations),
        Command::Select { teacher, n_per_domain } => run::select(c, &teacher, n_per_domain),
        Command::Distill { teacher, selection } => run::distill(c, &teacher, selection.as_deref()),
        Command::Infer {
            model,
            scales,
            window,
            stride,
            split,
            dump_logits,
        } => run::infer(c, &model, &scales, window, stride, split, dump_logits),
        Command::Eval { model, split } => run::eval(c, &model, split),
        Command::Ablate { stages } => run::ablate(c, &stages),
    }
}
