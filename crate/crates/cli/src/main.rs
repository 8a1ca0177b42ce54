mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Failure;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "objloc",
    version,
    about = "Camera relocalization against a map of semantic object landmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with keyframe and query sequences.
    Simulate(Common),
    /// Accumulate landmark label statistics from associated keyframe detections.
    BuildMap(Common),
    /// Estimate a pose for every query frame.
    Localize(LocalizeArgs),
    /// Score localization results against ground truth.
    Evaluate(Common),
}

#[derive(Args)]
struct LocalizeArgs {
    #[command(flatten)]
    common: Common,
    /// Run every combination of these values, e.g. `--sweep K=1,3,5`; repeatable.
    #[arg(long, value_name = "KEY=V1,V2,...")]
    sweep: Vec<String>,
}

#[derive(Args)]
struct Common {
    /// `key = value` settings file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to the dataset directory).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Worker threads; 0 uses every logical core.
    #[arg(long)]
    threads: Option<usize>,
    /// Labels kept per detection.
    #[arg(long = "K", value_name = "K")]
    top_k: Option<usize>,
    /// Candidates kept per query detection.
    #[arg(long)]
    tau: Option<usize>,
    /// Box-similarity scale in pixels.
    #[arg(long = "C", value_name = "C")]
    scale: Option<f64>,
    /// Sampling iterations per frame.
    #[arg(long)]
    n_iter: Option<usize>,
    /// Neighbors per node when building graph edges.
    #[arg(long)]
    k_edge: Option<usize>,
    /// Directory holding inputs under their default names.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    keyframes: Option<PathBuf>,
    /// Query detection log.
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Ground-truth trajectory (TUM format).
    #[arg(long)]
    groundtruth: Option<PathBuf>,
    #[arg(long)]
    associations: Option<PathBuf>,
    /// Landmark geometry.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    results: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text)
                .map_err(|(line, e)| Failure::Input(format!("{}:{line}: {e}", path.display())))?;
        }
        for a in &self.set {
            cfg.assign(a).map_err(Failure::Input)?;
        }
        let mut flags: Vec<(&str, String)> = Vec::new();
        let mut push = |key, value: Option<String>| {
            if let Some(v) = value {
                flags.push((key, v));
            }
        };
        let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        push("seed", self.seed.map(|v| v.to_string()));
        push("threads", self.threads.map(|v| v.to_string()));
        push("K", self.top_k.map(|v| v.to_string()));
        push("tau", self.tau.map(|v| v.to_string()));
        push("C", self.scale.map(|v| v.to_string()));
        push("n_iter", self.n_iter.map(|v| v.to_string()));
        push("k_edge", self.k_edge.map(|v| v.to_string()));
        push("output", show(&self.output));
        push("dataset", show(&self.dataset));
        push("map", show(&self.map));
        push("keyframes", show(&self.keyframes));
        push("detections", show(&self.detections));
        push("intrinsics", show(&self.intrinsics));
        push("groundtruth", show(&self.groundtruth));
        push("associations", show(&self.associations));
        push("scene", show(&self.scene));
        push("results", show(&self.results));
        for (k, v) in flags {
            cfg.set(k, &v).map_err(Failure::Input)?;
        }
        Ok(cfg)
    }
}

fn run() -> Result<(), Failure> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return Err(Failure::Exit(code));
        }
    };
    let (common, sweep) = match &cli.command {
        Command::Simulate(c) | Command::BuildMap(c) | Command::Evaluate(c) => (c, &[][..]),
        Command::Localize(l) => (&l.common, &l.sweep[..]),
    };
    let cfg = common.resolve()?;
    cfg.matcher.validate()?;
    if rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .is_err()
    {
        log::warn!("thread pool already initialized");
    }
    match cli.command {
        Command::Simulate(_) => commands::simulate(&cfg),
        Command::BuildMap(_) => commands::build_map(&cfg),
        Command::Localize(_) if sweep.is_empty() => commands::localize(&cfg),
        Command::Localize(_) => commands::sweep(&cfg, sweep),
        Command::Evaluate(_) => commands::evaluate(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Exit(code)) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
