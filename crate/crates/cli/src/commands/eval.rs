//! `eval` and `ablate`.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::anyhow;
use clap::{Args, ValueEnum};
use geoscout_core::agent::plan::{select_strategy, Preset};
use geoscout_core::agent::{Agent, AgentConfig};
use geoscout_core::difficulty::assess_image;
use geoscout_core::evaluation::{
    aggregate, emit_comparison, emit_report, ingest_manifest, score, EvalRecord, JudgeOptions, ManifestRow, Metric,
    MetricsTable, ReportFormat, ScoringInput,
};
use geoscout_core::model::UncertaintyDetector;
use geoscout_core::providers::budget::{BudgetMeter, CallCounts};
use geoscout_core::providers::VisionModel;
use geoscout_core::{DifficultyAssessment, GeoLabel, ImageHandle, Prediction};
use rayon::prelude::*;
use serde::Serialize;

use super::analyze::{write_outcome, StoredPrediction, PREDICTION_FILE};
use super::{
    check_unique_ids, provider_setup, usage_error, worker_pool, write_bytes, write_json, Classify, CmdResult, Failure,
};
use crate::config::load_config;
use crate::runlog::RunLog;
use crate::ProviderArgs;

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
pub enum FormatArg {
    #[default]
    Markdown,
    Csv,
}

impl FormatArg {
    fn format(self) -> ReportFormat {
        match self {
            FormatArg::Markdown => ReportFormat::Markdown,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }

    fn extension(self) -> &'static str {
        match self {
            FormatArg::Markdown => "md",
            FormatArg::Csv => "csv",
        }
    }
}

/// Judge settings shared by `eval` and `ablate`.
#[derive(Args, Clone, Debug, Default)]
pub struct JudgeArgs {
    /// Ask the vision model whether names that the rules cannot match
    /// refer to the same place.
    #[arg(long)]
    pub judge: bool,
    /// Ask the judge about every level, letting it overrule the rules.
    #[arg(long, requires = "judge")]
    pub judge_always: bool,
    #[arg(long, value_enum, default_value_t = FormatArg::Markdown)]
    pub format: FormatArg,
}

#[derive(Args, Clone, Debug)]
pub struct EvalArgs {
    /// CSV manifest with ground truth.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory of `analyze` or `batch` (one folder per image).
    #[arg(long)]
    pub predictions: PathBuf,
    /// `metrics.json` of an earlier run to report differences against.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[command(flatten)]
    pub judge: JudgeArgs,
    #[command(flatten)]
    pub providers: ProviderArgs,
}

#[derive(Args, Clone, Debug)]
pub struct AblateArgs {
    /// CSV manifest with ground truth.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Presets to compare, first one as the baseline. Defaults to every
    /// preset followed by the full agent.
    #[arg(long = "preset", value_delimiter = ',')]
    pub presets: Vec<String>,
    /// Worker threads; defaults to the config value or the CPU count.
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub judge: JudgeArgs,
    #[command(flatten)]
    pub providers: ProviderArgs,
}

fn labelled_rows(manifest: &Path, log: &mut RunLog) -> Result<Vec<(ManifestRow, GeoLabel)>, Failure> {
    log.input(manifest);
    let rows = ingest_manifest(manifest).usage()?;
    let ids: Vec<String> = rows.iter().map(ManifestRow::image_id).collect();
    check_unique_ids(ids.iter().map(String::as_str))?;
    rows.into_iter()
        .map(|r| match r.truth() {
            Some(t) => Ok((r, t)),
            None => Err(usage_error(format!("{} has no ground-truth country", r.image_path))),
        })
        .collect()
}

/// Scores, aggregates and writes `judgments.jsonl`, `metrics.json` and
/// the report. Returns the table.
fn score_and_report(
    inputs: Vec<ScoringInput>,
    judge: Option<&dyn VisionModel>,
    args: &JudgeArgs,
    detector: &UncertaintyDetector,
    baseline: Option<&MetricsTable>,
    dir: &Path,
    log: &mut RunLog,
) -> Result<(MetricsTable, String), Failure> {
    let opts = JudgeOptions {
        judge_always: args.judge_always,
    };
    let records: Vec<EvalRecord> = score(inputs, judge, opts, detector);
    for r in &records {
        if let Some(w) = &r.judge_warning {
            log.warnings.push(format!("{}: {w}", r.image_id));
        }
    }
    let table = aggregate(&records).usage()?;
    let report = emit_report(&table, baseline, args.format.format()).usage()?;

    let mut lines = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut lines, r).operational()?;
        lines.write_all(b"\n").operational()?;
    }
    write_bytes(&dir.join("judgments.jsonl"), &lines, &mut log.outputs)?;
    write_json(&dir.join("metrics.json"), &table, &mut log.outputs)?;
    write_bytes(
        &dir.join(format!("report.{}", args.format.extension())),
        report.as_bytes(),
        &mut log.outputs,
    )?;
    Ok((table, report))
}

fn read_prediction(dir: &Path, id: &str, log: &mut RunLog) -> Result<StoredPrediction, Failure> {
    let path = dir.join(id).join(PREDICTION_FILE);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            log.warnings
                .push(format!("{id}: no prediction at {}; scored as unknown", path.display()));
            return Ok(StoredPrediction {
                image_id: id.into(),
                prediction: Prediction::unknown("no prediction was produced"),
                difficulty: None,
            });
        }
        Err(e) => return Err(usage_error(format!("cannot read {}: {e}", path.display()))),
    };
    log.input(&path);
    let stored: StoredPrediction = serde_json::from_str(&text)
        .map_err(|e| usage_error(format!("{} is not a prediction file: {e}", path.display())))?;
    if stored.image_id != id {
        log.warnings
            .push(format!("{} names image {:?}", path.display(), stored.image_id));
    }
    Ok(stored)
}

pub fn eval(args: &EvalArgs, out: &Path, log: &mut RunLog) -> CmdResult {
    let (judge_providers, config) = if args.judge.judge {
        let s = provider_setup(&args.providers, log)?;
        (Some(s.providers), s.config)
    } else {
        if let Some(p) = &args.providers.config {
            log.input(p);
        }
        (None, load_config(args.providers.config.as_deref()).usage()?.0)
    };
    let detector = UncertaintyDetector::new(&config.agent.uncertain_phrases);
    let baseline: Option<MetricsTable> = match &args.baseline {
        Some(p) => {
            log.input(p);
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage_error(format!("cannot read baseline {}: {e}", p.display())))?;
            Some(
                serde_json::from_str(&text)
                    .map_err(|e| usage_error(format!("invalid baseline {}: {e}", p.display())))?,
            )
        }
        None => None,
    };

    let rows = labelled_rows(&args.manifest, log)?;
    let mut inputs = Vec::new();
    for (row, truth) in rows {
        let id = row.image_id();
        let stored = read_prediction(&args.predictions, &id, log)?;
        inputs.push(ScoringInput {
            image_id: id,
            level: stored.difficulty.map(|d| d.level),
            prediction: stored.prediction,
            truth,
        });
    }

    let meter = Arc::new(BudgetMeter::unlimited());
    let judge = judge_providers.map(|p| p.metered(meter.clone()).vision);
    let (_, report) = score_and_report(
        inputs,
        judge.as_deref(),
        &args.judge,
        &detector,
        baseline.as_ref(),
        out,
        log,
    )?;
    log.calls += meter.counts();
    print!("{report}");
    Ok(())
}

#[derive(Serialize)]
struct AssessedImage {
    image_id: String,
    assessment: Option<DifficultyAssessment>,
    error: Option<String>,
}

#[derive(Serialize)]
struct PresetSummary {
    preset: String,
    failed: Vec<String>,
    calls: CallCounts,
    metrics: MetricsTable,
}

fn parse_presets(names: &[String]) -> Result<Vec<Preset>, Failure> {
    if names.is_empty() {
        return Ok(Preset::ALL.to_vec());
    }
    let presets = names
        .iter()
        .map(|n| n.parse::<Preset>().usage())
        .collect::<Result<Vec<_>, _>>()?;
    for (i, p) in presets.iter().enumerate() {
        if presets[..i].contains(p) {
            return Err(usage_error(format!("preset {} is listed twice", p.as_str())));
        }
    }
    Ok(presets)
}

/// The agent configuration for one column: fixed presets run their
/// tools once, the full agent follows its policy and refinement settings.
fn preset_config(base: &AgentConfig, preset: Preset) -> AgentConfig {
    let mut cfg = base.clone();
    if preset.fixed_steps().is_some() {
        cfg.strategy.ablation = Some(preset.as_str().into());
        cfg.refine = false;
    } else {
        cfg.strategy.ablation = None;
    }
    cfg
}

pub fn ablate(args: &AblateArgs, out: &Path, log: &mut RunLog) -> CmdResult {
    let presets = parse_presets(&args.presets)?;
    let setup = provider_setup(&args.providers, log)?;
    let detector = UncertaintyDetector::new(&setup.config.agent.uncertain_phrases);
    let rows = labelled_rows(&args.manifest, log)?;
    let images = rows
        .iter()
        .map(|(r, _)| {
            log.input(&r.resolved_path);
            ImageHandle::open(&r.resolved_path).usage()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pool = worker_pool(args.workers.or(setup.config.workers))?;

    let assess_meter = Arc::new(BudgetMeter::unlimited());
    let assess_providers = setup.providers.metered(assess_meter.clone());
    let assessed: Vec<AssessedImage> = log.timed("assess", || {
        pool.install(|| {
            images
                .par_iter()
                .map(|img| match assess_image(img, assess_providers.vision.as_ref()) {
                    Ok((_, a)) => AssessedImage {
                        image_id: img.id().into(),
                        assessment: Some(a),
                        error: None,
                    },
                    Err(e) => AssessedImage {
                        image_id: img.id().into(),
                        assessment: None,
                        error: Some(e.to_string()),
                    },
                })
                .collect()
        })
    });
    log.calls += assess_meter.counts();
    for a in assessed.iter().filter(|a| a.error.is_some()) {
        log.warnings.push(format!(
            "{}: difficulty assessment failed ({}); its results are reported as unassessed",
            a.image_id,
            a.error.as_deref().unwrap_or_default()
        ));
    }
    write_json(&out.join("assessments.json"), &assessed, &mut log.outputs)?;

    let judge_meter = Arc::new(BudgetMeter::unlimited());
    let judge = args
        .judge
        .judge
        .then(|| setup.providers.metered(judge_meter.clone()).vision);
    let mut tables: Vec<(String, MetricsTable)> = Vec::new();
    let mut summaries = Vec::new();
    let mut any_failed = false;
    for preset in &presets {
        let name = preset.as_str().to_string();
        let cfg = preset_config(&setup.config.agent, *preset);
        let agent = Agent::new(setup.providers.clone(), setup.memory.clone(), cfg.clone()).usage()?;
        let dir = out.join(&name);
        type Run = (Result<Prediction, String>, CallCounts, Vec<PathBuf>, Option<String>);
        let runs: Vec<Run> = log.timed(format!("run {name}"), || {
            pool.install(|| {
                images
                    .par_iter()
                    .zip(assessed.par_iter())
                    .map(|(img, a)| {
                        let level = a.assessment.as_ref().map_or(cfg.fallback_level, |x| x.level);
                        let result = select_strategy(level, &cfg.strategy)
                            .and_then(|plan| agent.run_pipeline(img, plan, &cfg.budget));
                        let mut outputs = Vec::new();
                        match result {
                            Ok(mut outcome) => {
                                outcome.difficulty = a.assessment.clone();
                                let written = write_outcome(&dir.join(img.id()), img, &outcome, &mut outputs);
                                let write_error = written.err().map(|f| format!("{:#}", f.error()));
                                (Ok(outcome.prediction), outcome.calls, outputs, write_error)
                            }
                            Err(e) => (Err(e.to_string()), CallCounts::default(), outputs, None),
                        }
                    })
                    .collect()
            })
        });

        let mut calls = CallCounts::default();
        let mut failed = Vec::new();
        let mut inputs = Vec::new();
        for (((result, c, outputs, write_error), (_, truth)), (img, a)) in
            runs.into_iter().zip(&rows).zip(images.iter().zip(&assessed))
        {
            calls += c;
            log.outputs.extend(outputs);
            if let Some(e) = write_error {
                return Err(Failure::Operational(anyhow!("{name}/{}: {e}", img.id())));
            }
            let prediction = result.unwrap_or_else(|e| {
                log.warnings.push(format!("{name}/{}: {e}", img.id()));
                failed.push(img.id().to_string());
                Prediction::unknown(format!("the pipeline failed: {e}"))
            });
            inputs.push(ScoringInput {
                image_id: img.id().into(),
                level: a.assessment.as_ref().map(|x| x.level),
                prediction,
                truth: truth.clone(),
            });
        }
        log.calls += calls;
        any_failed |= !failed.is_empty();
        let baseline = tables.first().map(|(_, t)| t);
        let (table, _) = score_and_report(inputs, judge.as_deref(), &args.judge, &detector, baseline, &dir, log)?;
        summaries.push(PresetSummary {
            preset: name.clone(),
            failed,
            calls,
            metrics: table.clone(),
        });
        tables.push((name, table));
    }
    log.calls += judge_meter.counts();

    let columns: Vec<(String, &MetricsTable)> = tables.iter().map(|(n, t)| (n.clone(), t)).collect();
    let mut combined = String::new();
    for metric in Metric::ALL {
        let text = emit_comparison(&columns, metric, args.judge.format.format()).usage()?;
        let file = out.join(format!(
            "comparison_{}.{}",
            metric.as_str(),
            args.judge.format.extension()
        ));
        write_bytes(&file, text.as_bytes(), &mut log.outputs)?;
        combined.push_str(&format!("{}\n\n{text}\n", metric.title()));
    }
    write_json(&out.join("ablation.json"), &summaries, &mut log.outputs)?;
    print!("{combined}");
    if any_failed {
        return Err(Failure::Operational(anyhow!(
            "some pipeline runs failed; see the warnings in the run log"
        )));
    }
    Ok(())
}
