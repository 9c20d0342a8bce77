//! Scoring predictions against ground truth: manifest ingest, per-level
//! judging, accuracy and unknown-rate aggregation, and report tables.

mod judge;
mod manifest;
mod table;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use judge::{judge_match, judge_prompt, GeoLevel, JudgeOptions, Judgment, MatchTier};
pub use manifest::{ingest_manifest, parse_manifest, ManifestRow};
pub use table::{emit_comparison, emit_report, percent_tenths, Metric, ReportFormat};

use crate::difficulty::DifficultyLevel;
use crate::model::{GeoLabel, Prediction, UncertaintyDetector};
use crate::providers::VisionModel;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("manifest line {line}: {path} is listed twice")]
    DuplicatePath { line: u64, path: String },
    #[error("manifest line {line}: image {path} does not exist")]
    MissingImage { line: u64, path: String },
    #[error("no records to aggregate")]
    EmptyInput,
    #[error("tables differ in their rows: {0}")]
    StructureMismatch(String),
    #[error("image {0} has no ground-truth country")]
    NoTruth(String),
}

/// One image ready for scoring.
#[derive(Clone, Debug)]
pub struct ScoringInput {
    pub image_id: String,
    pub level: Option<DifficultyLevel>,
    pub prediction: Prediction,
    pub truth: GeoLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub level: Option<DifficultyLevel>,
    pub prediction: Prediction,
    pub truth: GeoLabel,
    pub match_country: bool,
    pub match_region: bool,
    pub match_city: bool,
    pub unknown: bool,
    pub tiers: [MatchTier; 3],
    pub judge_warning: Option<String>,
}

impl EvalRecord {
    /// Builds a record from a judgment, forcing every level to incorrect
    /// when the prediction is an uncertain answer.
    pub fn new(input: ScoringInput, judgment: Judgment, unknown: bool) -> Self {
        let [c, r, t] = if unknown { [false; 3] } else { judgment.matches() };
        EvalRecord {
            image_id: input.image_id,
            level: input.level,
            prediction: input.prediction,
            truth: input.truth,
            match_country: c,
            match_region: r,
            match_city: t,
            unknown,
            tiers: if unknown {
                [MatchTier::Absent; 3]
            } else {
                judgment.tiers
            },
            judge_warning: judgment.warning,
        }
    }
}

/// Whether `prediction` counts as an "unknown" answer.
pub fn prediction_is_unknown(prediction: &Prediction, detector: &UncertaintyDetector) -> bool {
    match &prediction.label {
        None => true,
        Some(l) => l.is_empty() || detector.is_unknown(&l.display_name()),
    }
}

/// Judges every input, in parallel, and returns records in input order.
pub fn score(
    inputs: Vec<ScoringInput>,
    judge: Option<&dyn VisionModel>,
    opts: JudgeOptions,
    detector: &UncertaintyDetector,
) -> Vec<EvalRecord> {
    inputs
        .into_par_iter()
        .map(|input| {
            let unknown = prediction_is_unknown(&input.prediction, detector);
            let judgment = if unknown {
                judge_match(None, &input.truth, None, opts)
            } else {
                judge_match(input.prediction.label.as_ref(), &input.truth, judge, opts)
            };
            if let Some(w) = &judgment.warning {
                log::warn!("{}: {w}", input.image_id);
            }
            EvalRecord::new(input, judgment, unknown)
        })
        .collect()
}

/// A table row: one difficulty stratum, or the overall total.
///
/// Serializes as its name ("easy", "unassessed", "overall") so tables can
/// be JSON maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Stratum {
    Level(DifficultyLevel),
    /// Records scored without a difficulty assessment.
    Unassessed,
    Overall,
}

impl Stratum {
    pub fn title(self) -> &'static str {
        match self {
            Stratum::Level(l) => l.title(),
            Stratum::Unassessed => "Unassessed",
            Stratum::Overall => "Overall",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::Level(l) => l.as_str(),
            Stratum::Unassessed => "unassessed",
            Stratum::Overall => "overall",
        }
    }
}

impl From<Stratum> for String {
    fn from(s: Stratum) -> String {
        s.as_str().to_string()
    }
}

impl TryFrom<String> for Stratum {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        match s.as_str() {
            "unassessed" => Ok(Stratum::Unassessed),
            "overall" => Ok(Stratum::Overall),
            other => other
                .parse::<DifficultyLevel>()
                .map(Stratum::Level)
                .map_err(|_| format!("unknown stratum {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub count: u64,
    pub country: u64,
    pub region: u64,
    pub city: u64,
    pub unknown: u64,
}

impl MetricsRow {
    fn add(&mut self, r: &EvalRecord) {
        self.count += 1;
        self.country += r.match_country as u64;
        self.region += r.match_region as u64;
        self.city += r.match_city as u64;
        self.unknown += r.unknown as u64;
    }

    pub fn hits(&self, metric: Metric) -> u64 {
        match metric {
            Metric::Country => self.country,
            Metric::Region => self.region,
            Metric::City => self.city,
            Metric::Unknown => self.unknown,
        }
    }

    /// `hits ÷ count` as a fraction in `[0, 1]`.
    pub fn rate(&self, metric: Metric) -> f64 {
        self.hits(metric) as f64 / self.count as f64
    }
}

/// Counts per stratum, ordered easiest first with the overall row last.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: BTreeMap<Stratum, MetricsRow>,
}

impl MetricsTable {
    pub fn overall(&self) -> &MetricsRow {
        &self.rows[&Stratum::Overall]
    }

    pub fn row(&self, stratum: Stratum) -> Option<&MetricsRow> {
        self.rows.get(&stratum)
    }

    fn strata(&self) -> Vec<Stratum> {
        self.rows.keys().copied().collect()
    }
}

/// Accuracy and unknown counts per difficulty level and overall.
pub fn aggregate(records: &[EvalRecord]) -> Result<MetricsTable, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut rows: BTreeMap<Stratum, MetricsRow> = BTreeMap::new();
    for r in records {
        let stratum = r.level.map_or(Stratum::Unassessed, Stratum::Level);
        rows.entry(stratum).or_default().add(r);
        rows.entry(Stratum::Overall).or_default().add(r);
    }
    Ok(MetricsTable { rows })
}
