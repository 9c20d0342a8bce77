//! The machine-readable record every command leaves behind. Timestamps
//! and durations live only here so the other outputs stay reproducible.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use geoscout_core::imaging::sha256_hex;
use geoscout_core::providers::budget::CallCounts;
use serde::Serialize;

pub const RUN_LOG_FILE: &str = "run_log.json";

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Timing {
    pub step: String,
    pub millis: u128,
}

#[derive(Debug, Serialize)]
pub struct RunLog {
    pub command: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub elapsed_ms: u128,
    pub config_digest: Option<String>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    pub calls: CallCounts,
    pub timings: Vec<Timing>,
    pub warnings: Vec<String>,
    pub exit_code: i32,
    pub error: Option<String>,
    #[serde(skip)]
    clock: Instant,
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunLog {
    pub fn start(command: &str) -> Self {
        RunLog {
            command: command.into(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            started_unix_ms: unix_ms(),
            finished_unix_ms: 0,
            elapsed_ms: 0,
            config_digest: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            calls: CallCounts::default(),
            timings: Vec::new(),
            warnings: Vec::new(),
            exit_code: 0,
            error: None,
            clock: Instant::now(),
        }
    }

    /// Records a file read by the run with its content digest. Unreadable
    /// files are noted with an empty digest.
    pub fn input(&mut self, path: &Path) {
        let sha256 = std::fs::read(path).map(|b| sha256_hex(&b)).unwrap_or_default();
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256,
        });
    }

    /// Runs `f` and records how long it took under `step`.
    pub fn timed<T>(&mut self, step: impl Into<String>, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timings.push(Timing {
            step: step.into(),
            millis: t.elapsed().as_millis(),
        });
        out
    }

    pub fn finish(&mut self, exit_code: i32, error: Option<String>) {
        self.finished_unix_ms = unix_ms();
        self.elapsed_ms = self.clock.elapsed().as_millis();
        self.exit_code = exit_code;
        self.error = error;
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RUN_LOG_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(self).expect("run log serializes"))?;
        Ok(path)
    }
}
