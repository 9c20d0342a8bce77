//! `heatgrid` and `memorize`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::anyhow;
use clap::Args;
use geoscout_core::evaluation::ingest_manifest;
use geoscout_core::experience::{
    ground_truth_prompt, optimize_prompt, similarity_grid, GeoElementCatalog, OptimizeOutcome, OptimizeReport,
    PatchSpec, DEFAULT_STRIDE, DEFAULT_TOP_K, DEFAULT_WINDOW,
};
use geoscout_core::providers::budget::BudgetMeter;
use geoscout_core::{GeoLabel, ImageHandle};
use serde::Serialize;

use super::{check_unique_ids, provider_setup, usage_error, write_bytes, write_json, Classify, CmdResult, Failure};
use crate::runlog::RunLog;
use crate::ProviderArgs;

/// Patch layout flags. Without `--window` the default window shrinks to
/// fit small images.
#[derive(Args, Clone, Debug, Default)]
pub struct PatchArgs {
    /// Patch side in pixels.
    #[arg(long)]
    pub window: Option<u32>,
    /// Step between patches in pixels; at most the window.
    #[arg(long)]
    pub stride: Option<u32>,
}

impl PatchArgs {
    fn spec(&self, image: &ImageHandle) -> PatchSpec {
        let spec = PatchSpec {
            window: self.window.unwrap_or(DEFAULT_WINDOW),
            stride: self.stride.unwrap_or(DEFAULT_STRIDE),
        };
        if self.window.is_some() {
            spec
        } else {
            spec.fitted_to(image)
        }
    }
}

#[derive(Args, Clone, Debug)]
pub struct HeatgridArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Text to compare each patch with.
    #[arg(long, conflicts_with = "label", required_unless_present = "label")]
    pub prompt: Option<String>,
    /// Build the prompt from a place, as "City, Region, Country".
    #[arg(long)]
    pub label: Option<String>,
    /// Pixels per grid cell in the PNG.
    #[arg(long, default_value_t = 16)]
    pub scale: u32,
    #[command(flatten)]
    pub patch: PatchArgs,
    #[command(flatten)]
    pub providers: ProviderArgs,
}

#[derive(Serialize)]
struct GridSummary<'a> {
    image_id: &'a str,
    prompt: &'a str,
    rows: usize,
    cols: usize,
    window: u32,
    stride: u32,
    min: f64,
    max: f64,
}

pub fn heatgrid(args: &HeatgridArgs, out: &Path, log: &mut RunLog) -> CmdResult {
    if args.scale == 0 {
        return Err(usage_error("scale must be at least 1"));
    }
    let setup = provider_setup(&args.providers, log)?;
    log.input(&args.image);
    let image = ImageHandle::open(&args.image).usage()?;
    let prompt = match (&args.prompt, &args.label) {
        (Some(p), _) => p.clone(),
        (None, Some(l)) => {
            let label = GeoLabel::parse_hierarchical(l).ok_or_else(|| usage_error(format!("label {l:?} is empty")))?;
            ground_truth_prompt(&label).usage()?
        }
        (None, None) => return Err(usage_error("pass --prompt or --label")),
    };
    let spec = args.patch.spec(&image);
    let meter = Arc::new(BudgetMeter::unlimited());
    let embedder = setup.providers.metered(meter.clone()).geo_embedder;
    let grid = log.timed("grid", || similarity_grid(&image, &prompt, spec, embedder.as_ref()));
    log.calls += meter.counts();
    let grid = grid.map_err(|e| match e {
        geoscout_core::experience::ExperienceError::Provider(_) => Failure::Operational(e.into()),
        _ => Failure::Usage(e.into()),
    })?;

    let file = |ext: &str| out.join(format!("{}.heatgrid.{ext}", image.id()));
    write_bytes(&file("png"), &grid.to_png(args.scale), &mut log.outputs)?;
    write_bytes(&file("csv"), grid.to_csv().as_bytes(), &mut log.outputs)?;
    let summary = GridSummary {
        image_id: image.id(),
        prompt: &prompt,
        rows: grid.rows,
        cols: grid.cols,
        window: grid.window,
        stride: grid.stride,
        min: grid.min(),
        max: grid.max(),
    };
    write_json(&file("json"), &summary, &mut log.outputs)?;
    println!(
        "{}x{} grid, similarity {:.3} to {:.3}",
        grid.rows,
        grid.cols,
        grid.min(),
        grid.max()
    );
    Ok(())
}

#[derive(Args, Clone, Debug)]
pub struct MemorizeArgs {
    /// CSV manifest of labelled images.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Element catalog (TOML); the built-in one when absent.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Elements kept per image.
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
    #[command(flatten)]
    pub patch: PatchArgs,
    #[command(flatten)]
    pub providers: ProviderArgs,
}

#[derive(Serialize)]
struct MemorizeEntry {
    image_id: String,
    stored: bool,
    report: Option<OptimizeReport>,
    error: Option<String>,
}

pub fn memorize(args: &MemorizeArgs, out: &Path, log: &mut RunLog) -> CmdResult {
    if args.top_k == 0 {
        return Err(usage_error("top-k must be at least 1"));
    }
    let setup = provider_setup(&args.providers, log)?;
    if setup.memory.path().is_none() {
        return Err(usage_error(
            "memorize needs a memory file: pass --memory or set memory_path in the config",
        ));
    }
    let catalog = match &args.catalog {
        Some(p) => {
            log.input(p);
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage_error(format!("cannot read catalog {}: {e}", p.display())))?;
            GeoElementCatalog::from_toml(&text).usage()?
        }
        None => GeoElementCatalog::builtin(),
    };
    log.input(&args.manifest);
    let rows = ingest_manifest(&args.manifest).usage()?;
    let ids: Vec<String> = rows.iter().map(|r| r.image_id()).collect();
    check_unique_ids(ids.iter().map(String::as_str))?;

    let meter = Arc::new(BudgetMeter::unlimited());
    let providers = setup.providers.metered(meter.clone());
    let mut entries = Vec::new();
    for row in &rows {
        let id = row.image_id();
        let Some(label) = row.truth() else {
            return Err(usage_error(format!("{} has no ground-truth country", row.image_path)));
        };
        log.input(&row.resolved_path);
        let image = ImageHandle::open(&row.resolved_path).usage()?;
        let spec = args.patch.spec(&image);
        let result = log.timed(format!("optimize {id}"), || {
            optimize_prompt(
                &image,
                &label,
                &catalog,
                args.top_k,
                spec,
                providers.vision.as_ref(),
                providers.geo_embedder.as_ref(),
            )
        });
        let entry = match result {
            Ok(report) => {
                let stored = match &report.outcome {
                    OptimizeOutcome::Improved(record) => {
                        setup.memory.put(record.clone()).operational()?;
                        println!("{id}\tstored\t{:.3}\t{}", record.similarity, record.prompt);
                        true
                    }
                    OptimizeOutcome::NoImprovement { .. } => {
                        println!("{id}\tno improvement");
                        false
                    }
                };
                MemorizeEntry {
                    image_id: id,
                    stored,
                    report: Some(report),
                    error: None,
                }
            }
            Err(e) => {
                println!("{id}\tfailed\t{e}");
                log.warnings.push(format!("{id}: {e}"));
                MemorizeEntry {
                    image_id: id,
                    stored: false,
                    report: None,
                    error: Some(e.to_string()),
                }
            }
        };
        entries.push(entry);
    }
    log.calls += meter.counts();
    if let Some(p) = setup.memory.path() {
        log.outputs.push(p.to_path_buf());
    }
    write_json(&out.join("memorize.json"), &entries, &mut log.outputs)?;
    let failed = entries.iter().filter(|e| e.error.is_some()).count();
    if failed > 0 {
        return Err(Failure::Operational(anyhow!(
            "{failed} of {} images failed",
            entries.len()
        )));
    }
    Ok(())
}
