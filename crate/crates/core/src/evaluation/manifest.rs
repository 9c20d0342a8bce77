//! Dataset manifests: one CSV row per image with its ground truth.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::model::GeoLabel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// As written in the manifest.
    pub image_path: String,
    pub country: Option<String>,
    pub region: Option<String>,
    pub city: Option<String>,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
    pub split: Option<String>,
    /// `image_path` resolved against the manifest's directory.
    #[serde(skip)]
    pub resolved_path: PathBuf,
}

impl ManifestRow {
    /// Ground truth, when the row names at least a country.
    pub fn truth(&self) -> Option<GeoLabel> {
        self.country.as_ref()?;
        Some(GeoLabel::partial(
            self.country.clone(),
            self.region.clone(),
            self.city.clone(),
        ))
    }

    /// File stem, used as the image id throughout a run.
    pub fn image_id(&self) -> String {
        Path::new(&self.image_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image_path.clone())
    }
}

#[derive(Deserialize)]
struct RawRow {
    image_path: Option<String>,
    country: Option<String>,
    #[serde(alias = "state")]
    region: Option<String>,
    city: Option<String>,
    #[serde(default)]
    lat: Option<String>,
    #[serde(default)]
    lon: Option<String>,
    #[serde(default, alias = "split_tag")]
    split: Option<String>,
}

fn present(v: Option<String>) -> Option<String> {
    v.map(|s| s.trim().to_string()).filter(|s| !s.is_empty())
}

fn coordinate(v: Option<String>, line: u64, field: &str, limit: f64) -> Result<Option<f64>, EvalError> {
    let Some(text) = present(v) else {
        return Ok(None);
    };
    match text.parse::<f64>() {
        Ok(x) if x.is_finite() && x.abs() <= limit => Ok(Some(x)),
        _ => Err(EvalError::Parse {
            line,
            message: format!("{field} {text:?} is not a coordinate within ±{limit}"),
        }),
    }
}

/// Reads a manifest with header `image_path,country,region,city` plus
/// optional `lat,lon,split`. Image paths resolve against the manifest's
/// directory and must exist; each may appear once.
pub fn ingest_manifest(path: &Path) -> Result<Vec<ManifestRow>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base)
}

/// [`ingest_manifest`] over text already in memory.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestRow>, EvalError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| EvalError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    for required in ["image_path", "country", "city"] {
        if !headers.iter().any(|h| h == required) {
            return Err(EvalError::Parse {
                line: 1,
                message: format!("header lacks the {required} column"),
            });
        }
    }
    if !headers.iter().any(|h| h == "region" || h == "state") {
        return Err(EvalError::Parse {
            line: 1,
            message: "header lacks the region column".into(),
        });
    }

    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| EvalError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let raw: RawRow = record.deserialize(Some(&headers)).map_err(|e| EvalError::Parse {
            line,
            message: e.to_string(),
        })?;
        let image_path = present(raw.image_path).ok_or_else(|| EvalError::Parse {
            line,
            message: "image_path is empty".into(),
        })?;
        if !seen.insert(image_path.clone()) {
            return Err(EvalError::DuplicatePath { line, path: image_path });
        }
        let resolved_path = base.join(&image_path);
        if !resolved_path.is_file() {
            return Err(EvalError::MissingImage {
                line,
                path: resolved_path.display().to_string(),
            });
        }
        let row = ManifestRow {
            country: present(raw.country),
            region: present(raw.region),
            city: present(raw.city),
            lat: coordinate(raw.lat, line, "lat", 90.0)?,
            lon: coordinate(raw.lon, line, "lon", 180.0)?,
            split: present(raw.split),
            image_path,
            resolved_path,
        };
        if row.city.is_some() && row.country.is_none() {
            return Err(EvalError::Parse {
                line,
                message: "a row naming a city must name its country".into(),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}
