pub mod analyze;
pub mod defend;
pub mod eval;
pub mod experience;

use std::path::{Path, PathBuf};

use anyhow::anyhow;
use geoscout_core::agent::AgentConfig;
use serde::Serialize;

use crate::config::{setup, Setup};
use crate::runlog::RunLog;
use crate::{AgentArgs, ProviderArgs};

/// How a command failed, which decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, configuration or input files.
    Usage(anyhow::Error),
    /// The run itself failed, wholly or for some inputs.
    Operational(anyhow::Error),
}

impl Failure {
    pub const OPERATIONAL: u8 = 1;
    pub const USAGE: u8 = 2;

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => Self::USAGE as i32,
            Failure::Operational(_) => Self::OPERATIONAL as i32,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Operational(e) => e,
        }
    }
}

pub type CmdResult = Result<(), Failure>;

/// Tags an error with its exit-code class.
pub trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn operational(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn operational(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Operational(e.into()))
    }
}

pub fn usage_error(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

/// Builds providers and records the files read.
pub fn provider_setup(args: &ProviderArgs, log: &mut RunLog) -> Result<Setup, Failure> {
    let s = setup(args.config.as_deref(), args.mock.as_deref(), args.memory.as_deref()).usage()?;
    for p in &s.inputs {
        log.input(p);
    }
    log.config_digest = Some(s.config_digest.clone());
    Ok(s)
}

/// Applies command-line overrides and validates the result.
pub fn agent_config(base: &AgentConfig, args: &AgentArgs) -> Result<AgentConfig, Failure> {
    let mut cfg = base.clone();
    if let Some(p) = &args.preset {
        cfg.strategy.ablation = Some(p.clone());
    }
    if args.no_refine {
        cfg.refine = false;
    }
    if let Some(n) = args.max_calls {
        cfg.budget.provider_call_limit = n;
    }
    if let Some(s) = args.max_seconds {
        cfg.budget.wall_clock_limit_secs = s;
    }
    if let Some(r) = args.max_rounds {
        cfg.budget.max_refine_rounds = r;
    }
    cfg.validate().usage()?;
    cfg.strategy.preset().usage()?;
    Ok(cfg)
}

pub fn worker_pool(workers: Option<usize>) -> Result<rayon::ThreadPool, Failure> {
    if workers == Some(0) {
        return Err(usage_error("workers must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .operational()
}

/// Writes a file, creating its directory, and appends it to `outputs`.
pub fn write_bytes(path: &Path, bytes: &[u8], outputs: &mut Vec<PathBuf>) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::Operational(anyhow!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::Operational(anyhow!("cannot write {}: {e}", path.display())))?;
    outputs.push(path.to_path_buf());
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T, outputs: &mut Vec<PathBuf>) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(value).operational()?;
    bytes.push(b'\n');
    write_bytes(path, &bytes, outputs)
}

/// Image ids name output directories, so they must be unique in a run.
pub fn check_unique_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<(), Failure> {
    let mut seen = std::collections::BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(usage_error(format!(
                "two images share the id {id:?}; rename one so their outputs do not collide"
            )));
        }
    }
    Ok(())
}
