//! `nprobe`: runs the experiment pipeline stage by stage or end to end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nprobe::config::ExperimentConfig;
use nprobe::pipeline::{run_all, run_stage, with_threads, Layout, Manifest, Stage};
use nprobe::Error;

#[derive(Parser, Debug)]
#[command(
    name = "nprobe",
    version,
    about = "Probe frozen denoiser features and prune sampling trajectories with a verifier"
)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true, default_value = "configs/reference.json")]
    config: PathBuf,
    /// Run directory; overrides the config's output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the labeled synthetic dataset.
    GenData,
    /// Train and freeze the denoiser.
    TrainDenoiser,
    /// Extract the hidden-state feature cache.
    Extract,
    /// Probe grid, cross-source, residualization and random-weight controls.
    Probe,
    /// Train verifiers on candidate layers and keep the best.
    TrainVerifier,
    /// Run trajectory selection over the configured prompts.
    Select(SelectArgs),
    /// Aggregate CSV, JSON and SVG reports.
    Report,
    /// Every stage in order.
    All,
}

#[derive(Args, Debug)]
struct SelectArgs {
    /// Selection mode (guided, best-of-n, random, baseline, oracle).
    #[arg(long)]
    mode: Option<String>,
    /// Initial trajectory count.
    #[arg(long)]
    n: Option<usize>,
    /// Comma-separated checkpoint timesteps, strictly decreasing.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Option<Vec<usize>>,
    #[arg(long)]
    keep_ratio: Option<f64>,
    /// Verifier checkpoint to use instead of the run's own.
    #[arg(long)]
    verifier: Option<PathBuf>,
    /// Number of prompts.
    #[arg(long)]
    prompts: Option<u32>,
}

fn fail(code: u8, err: &Error) -> ExitCode {
    let kind = if code == 2 { "config" } else { "runtime" };
    let msg = serde_json::json!({ "error": kind, "message": err.to_string() });
    eprintln!("{msg}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    let mut cfg = match ExperimentConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => return fail(2, &e),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let mut layout = Layout::new(cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir)));
    if let Command::Select(a) = &cli.command {
        let sel = &mut cfg.selection;
        if let Some(m) = &a.mode {
            sel.modes = vec![m.clone()];
        }
        if let Some(n) = a.n {
            sel.schedule.n = n;
        }
        if let Some(c) = &a.checkpoints {
            sel.schedule.checkpoints = c.clone();
        }
        if let Some(r) = a.keep_ratio {
            sel.schedule.keep_ratio = r;
        }
        if let Some(p) = a.prompts {
            sel.prompts = p;
        }
        layout.verifier_override = a.verifier.clone();
    }
    if let Err(e) = cfg.validate() {
        return fail(2, &e);
    }

    let result = with_threads(cli.threads, || -> nprobe::Result<Vec<Manifest>> {
        match &cli.command {
            Command::All => run_all(&cfg, &layout),
            cmd => run_stage(&cfg, &layout, stage_of(cmd)).map(|m| vec![m]),
        }
    })
    .and_then(|r| r);
    match result {
        Ok(manifests) => {
            for m in manifests {
                log::info!("{}: {} outputs", m.stage, m.outputs.len());
            }
            ExitCode::SUCCESS
        }
        Err(e) if e.is_config_error() => fail(2, &e),
        Err(e) => fail(1, &e),
    }
}

fn stage_of(cmd: &Command) -> Stage {
    match cmd {
        Command::GenData => Stage::GenData,
        Command::TrainDenoiser => Stage::TrainDenoiser,
        Command::Extract => Stage::Extract,
        Command::Probe => Stage::Probe,
        Command::TrainVerifier => Stage::TrainVerifier,
        Command::Select(_) => Stage::Select,
        Command::Report => Stage::Report,
        Command::All => unreachable!("handled by run_all"),
    }
}
