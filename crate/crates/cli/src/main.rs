//! `geoscout`: run the geolocation pipeline, apply defenses and score
//! results from the command line.
//!
//! Exit codes: 0 on success, 1 when a run fails or some images fail, 2 on
//! usage and configuration errors. Every invocation that gets past
//! argument parsing writes `run_log.json` into the output directory.

mod commands;
mod config;
mod runlog;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;
use runlog::RunLog;

#[derive(Parser)]
#[command(
    name = "geoscout",
    version,
    about = "Agentic image geolocation and geolocation defenses"
)]
struct Cli {
    /// Directory for all outputs and the run log.
    #[arg(long, global = true, default_value = "geoscout-out")]
    out: PathBuf,
    /// Log verbosity: -v for info, -vv for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Where provider calls go.
#[derive(Args, Clone, Debug, Default)]
pub struct ProviderArgs {
    /// TOML configuration; its `[providers]` section selects live services.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scripted mock fixtures (JSON) instead of live services.
    #[arg(long, value_name = "FIXTURES")]
    pub mock: Option<PathBuf>,
    /// Prompt memory file; overrides `memory_path` from the config.
    #[arg(long)]
    pub memory: Option<PathBuf>,
}

/// Per-run overrides of the `[agent]` configuration.
#[derive(Args, Clone, Debug, Default)]
pub struct AgentArgs {
    /// Run a fixed tool preset (baseline, eap, rs, eap_rs, baseline_seg_rs,
    /// eap_seg_rs) or the full agent.
    #[arg(long)]
    pub preset: Option<String>,
    /// Skip the evaluate-then-fallback loop.
    #[arg(long)]
    pub no_refine: bool,
    /// Provider-call limit per image.
    #[arg(long)]
    pub max_calls: Option<u64>,
    /// Wall-clock limit per image, in seconds.
    #[arg(long)]
    pub max_seconds: Option<f64>,
    /// Maximum fallback rounds per image.
    #[arg(long)]
    pub max_rounds: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate how hard images are to geolocate.
    Assess {
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        #[command(flatten)]
        providers: ProviderArgs,
    },
    /// Geolocate one image.
    Analyze {
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        providers: ProviderArgs,
        #[command(flatten)]
        agent: AgentArgs,
    },
    /// Geolocate every image in a manifest.
    Batch {
        #[arg(long)]
        manifest: PathBuf,
        /// Worker threads; defaults to the config value or the CPU count.
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        providers: ProviderArgs,
        #[command(flatten)]
        agent: AgentArgs,
    },
    /// Apply a privacy defense to an image.
    Defend(commands::defend::DefendArgs),
    /// Score predictions against a manifest's ground truth.
    Eval(commands::eval::EvalArgs),
    /// Run several tool presets over a manifest and compare them.
    Ablate(commands::eval::AblateArgs),
    /// Patch-by-patch similarity of an image to a text prompt.
    Heatgrid(commands::experience::HeatgridArgs),
    /// Learn location prompts from labelled images into prompt memory.
    Memorize(commands::experience::MemorizeArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Assess { .. } => "assess",
            Command::Analyze { .. } => "analyze",
            Command::Batch { .. } => "batch",
            Command::Defend(_) => "defend",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Heatgrid(_) => "heatgrid",
            Command::Memorize(_) => "memorize",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let mut log = RunLog::start(cli.command.name());
    let out = cli.out;
    let result = match cli.command {
        Command::Assess { images, providers } => commands::analyze::assess(&images, &providers, &out, &mut log),
        Command::Analyze {
            image,
            providers,
            agent,
        } => commands::analyze::analyze(&image, &providers, &agent, &out, &mut log),
        Command::Batch {
            manifest,
            workers,
            providers,
            agent,
        } => commands::analyze::batch(&manifest, workers, &providers, &agent, &out, &mut log),
        Command::Defend(args) => commands::defend::run(&args, &out, &mut log),
        Command::Eval(args) => commands::eval::eval(&args, &out, &mut log),
        Command::Ablate(args) => commands::eval::ablate(&args, &out, &mut log),
        Command::Heatgrid(args) => commands::experience::heatgrid(&args, &out, &mut log),
        Command::Memorize(args) => commands::experience::memorize(&args, &out, &mut log),
    };

    let (code, error) = match &result {
        Ok(()) => (0, None),
        Err(f) => (f.exit_code(), Some(format!("{:#}", f.error()))),
    };
    if let Some(e) = &error {
        eprintln!("error: {e}");
    }
    log.finish(code, error);
    if let Err(e) = log.write(&out) {
        eprintln!("error: cannot write the run log to {}: {e}", out.display());
        return ExitCode::from(Failure::OPERATIONAL);
    }
    ExitCode::from(code as u8)
}
