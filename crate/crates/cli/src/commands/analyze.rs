//! `assess`, `analyze` and `batch`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::anyhow;
use geoscout_core::agent::{Agent, PipelineOutcome};
use geoscout_core::difficulty::{assess_image, CueObservation};
use geoscout_core::evaluation::ingest_manifest;
use geoscout_core::providers::budget::{BudgetMeter, CallCounts};
use geoscout_core::segmentation::write_crops;
use geoscout_core::{DifficultyAssessment, DifficultyLevel, ImageHandle, Prediction};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    agent_config, check_unique_ids, provider_setup, worker_pool, write_bytes, write_json, Classify, CmdResult, Failure,
};
use crate::runlog::RunLog;
use crate::{AgentArgs, ProviderArgs};

pub const PREDICTION_FILE: &str = "prediction.json";

#[derive(Serialize)]
struct AssessEntry {
    image_id: String,
    path: PathBuf,
    assessment: Option<DifficultyAssessment>,
    cues: Option<CueObservation>,
    error: Option<String>,
}

pub fn assess(images: &[PathBuf], providers: &ProviderArgs, out: &Path, log: &mut RunLog) -> CmdResult {
    let setup = provider_setup(providers, log)?;
    let handles = images
        .iter()
        .map(|p| {
            log.input(p);
            ImageHandle::open(p).usage()
        })
        .collect::<Result<Vec<_>, _>>()?;
    check_unique_ids(handles.iter().map(ImageHandle::id))?;

    let meter = Arc::new(BudgetMeter::unlimited());
    let metered = setup.providers.metered(meter.clone());
    let mut entries = Vec::new();
    for (path, image) in images.iter().zip(&handles) {
        let result = log.timed(format!("assess {}", image.id()), || {
            assess_image(image, metered.vision.as_ref())
        });
        let entry = match result {
            Ok((report, a)) => {
                println!("{}\t{}\t{}", image.id(), a.level.title(), a.score);
                AssessEntry {
                    image_id: image.id().into(),
                    path: path.clone(),
                    assessment: Some(a),
                    cues: Some(report.observation),
                    error: None,
                }
            }
            Err(e) => {
                println!("{}\tfailed\t{e}", image.id());
                AssessEntry {
                    image_id: image.id().into(),
                    path: path.clone(),
                    assessment: None,
                    cues: None,
                    error: Some(e.to_string()),
                }
            }
        };
        entries.push(entry);
    }
    log.calls += meter.counts();
    write_json(&out.join("assessments.json"), &entries, &mut log.outputs)?;
    let failed = entries.iter().filter(|e| e.error.is_some()).count();
    if failed > 0 {
        return Err(Failure::Operational(anyhow!(
            "{failed} of {} assessments failed",
            entries.len()
        )));
    }
    Ok(())
}

/// What `prediction.json` holds when the pipeline could not run at all:
/// an unknown answer plus the reason, so scoring still sees the image.
#[derive(Serialize)]
struct FailedRun<'a> {
    image_id: &'a str,
    prediction: Prediction,
    difficulty: Option<DifficultyAssessment>,
    error: &'a str,
}

/// The fields of `prediction.json` that scoring reads.
#[derive(Deserialize)]
pub struct StoredPrediction {
    pub image_id: String,
    pub prediction: Prediction,
    #[serde(default)]
    pub difficulty: Option<StoredDifficulty>,
}

#[derive(Deserialize)]
pub struct StoredDifficulty {
    pub level: DifficultyLevel,
}

/// Writes `<dir>/prediction.json`, `report.md`, `crops/` and `search/`.
pub fn write_outcome(
    dir: &Path,
    image: &ImageHandle,
    outcome: &PipelineOutcome,
    outputs: &mut Vec<PathBuf>,
) -> CmdResult {
    write_json(&dir.join(PREDICTION_FILE), outcome, outputs)?;
    write_bytes(&dir.join("report.md"), outcome.to_markdown().as_bytes(), outputs)?;
    let crops = write_crops(&dir.join("crops"), image, &outcome.regions).operational()?;
    outputs.extend(crops);
    let search = dir.join("search");
    std::fs::create_dir_all(&search).operational()?;
    for (i, report) in outcome.reports.iter().enumerate() {
        write_json(&search.join(format!("analysis_{}.json", i + 1)), report, outputs)?;
        write_bytes(
            &search.join(format!("analysis_{}.md", i + 1)),
            report.to_markdown().as_bytes(),
            outputs,
        )?;
    }
    Ok(())
}

fn write_failure(dir: &Path, image_id: &str, error: &str, outputs: &mut Vec<PathBuf>) -> CmdResult {
    let run = FailedRun {
        image_id,
        prediction: Prediction::unknown(format!("the pipeline failed: {error}")),
        difficulty: None,
        error,
    };
    write_json(&dir.join(PREDICTION_FILE), &run, outputs)
}

pub fn analyze(image: &Path, providers: &ProviderArgs, agent: &AgentArgs, out: &Path, log: &mut RunLog) -> CmdResult {
    let setup = provider_setup(providers, log)?;
    let cfg = agent_config(&setup.config.agent, agent)?;
    log.input(image);
    let handle = ImageHandle::open(image).usage()?;
    let agent = Agent::new(setup.providers, setup.memory, cfg).usage()?;
    let dir = out.join(handle.id());
    let result = log.timed(format!("analyze {}", handle.id()), || agent.run(&handle));
    match result {
        Ok(outcome) => {
            log.calls += outcome.calls;
            if let Some(reason) = &outcome.budget_exhausted {
                log.warnings.push(format!("{}: stopped early: {reason}", handle.id()));
            }
            write_outcome(&dir, &handle, &outcome, &mut log.outputs)?;
            println!("{}\t{}", handle.id(), outcome.prediction.label_text());
            Ok(())
        }
        Err(e) => {
            let msg = e.to_string();
            write_failure(&dir, handle.id(), &msg, &mut log.outputs)?;
            Err(Failure::Operational(anyhow!("{}: {msg}", handle.id())))
        }
    }
}

#[derive(Serialize)]
struct BatchEntry {
    image_id: String,
    image_path: String,
    prediction: Option<String>,
    level: Option<DifficultyLevel>,
    budget_exhausted: Option<String>,
    calls: CallCounts,
    error: Option<String>,
}

#[derive(Serialize)]
struct BatchSummary {
    images: usize,
    failed: usize,
    calls: CallCounts,
    entries: Vec<BatchEntry>,
}

struct ImageRun {
    entry: BatchEntry,
    outputs: Vec<PathBuf>,
    write_error: Option<String>,
}

fn run_one(agent: &Agent, id: String, image_path: String, resolved: &Path, out: &Path) -> ImageRun {
    let dir = out.join(&id);
    let mut outputs = Vec::new();
    let mut entry = BatchEntry {
        image_id: id.clone(),
        image_path,
        prediction: None,
        level: None,
        budget_exhausted: None,
        calls: CallCounts::default(),
        error: None,
    };
    let written = match ImageHandle::open(resolved).map(|image| (agent.run(&image), image)) {
        Ok((Ok(outcome), image)) => {
            entry.prediction = outcome.prediction.label.as_ref().map(|l| l.display_name());
            entry.level = outcome.difficulty.as_ref().map(|d| d.level);
            entry.budget_exhausted = outcome.budget_exhausted.clone();
            entry.calls = outcome.calls;
            write_outcome(&dir, &image, &outcome, &mut outputs)
        }
        Ok((Err(e), _)) => {
            entry.error = Some(e.to_string());
            write_failure(&dir, &id, &e.to_string(), &mut outputs)
        }
        Err(e) => {
            entry.error = Some(e.to_string());
            write_failure(&dir, &id, &e.to_string(), &mut outputs)
        }
    };
    ImageRun {
        entry,
        outputs,
        write_error: written.err().map(|f| format!("{:#}", f.error())),
    }
}

pub fn batch(
    manifest: &Path,
    workers: Option<usize>,
    providers: &ProviderArgs,
    agent: &AgentArgs,
    out: &Path,
    log: &mut RunLog,
) -> CmdResult {
    let setup = provider_setup(providers, log)?;
    let cfg = agent_config(&setup.config.agent, agent)?;
    log.input(manifest);
    let rows = ingest_manifest(manifest).usage()?;
    let ids: Vec<String> = rows.iter().map(|r| r.image_id()).collect();
    check_unique_ids(ids.iter().map(String::as_str))?;
    for r in &rows {
        log.input(&r.resolved_path);
    }
    let pool = worker_pool(workers.or(setup.config.workers))?;
    let agent = Agent::new(setup.providers, setup.memory, cfg).usage()?;

    let runs: Vec<ImageRun> = log.timed("batch", || {
        pool.install(|| {
            rows.par_iter()
                .zip(ids.par_iter())
                .map(|(row, id)| run_one(&agent, id.clone(), row.image_path.clone(), &row.resolved_path, out))
                .collect()
        })
    });

    let mut calls = CallCounts::default();
    let mut write_errors = Vec::new();
    let mut entries = Vec::new();
    for run in runs {
        calls += run.entry.calls;
        log.outputs.extend(run.outputs);
        if let Some(e) = &run.entry.error {
            log.warnings.push(format!("{}: {e}", run.entry.image_id));
        }
        if let Some(e) = run.write_error {
            write_errors.push(e);
        }
        println!(
            "{}\t{}",
            run.entry.image_id,
            run.entry
                .prediction
                .as_deref()
                .unwrap_or(if run.entry.error.is_some() { "failed" } else { "unknown" })
        );
        entries.push(run.entry);
    }
    log.calls += calls;
    let failed = entries.iter().filter(|e| e.error.is_some()).count();
    let summary = BatchSummary {
        images: entries.len(),
        failed,
        calls,
        entries,
    };
    write_json(&out.join("batch.json"), &summary, &mut log.outputs)?;
    if let Some(e) = write_errors.first() {
        return Err(Failure::Operational(anyhow!(
            "{} outputs could not be written; first: {e}",
            write_errors.len()
        )));
    }
    if failed > 0 {
        return Err(Failure::Operational(anyhow!(
            "{failed} of {} images failed",
            summary.images
        )));
    }
    Ok(())
}
