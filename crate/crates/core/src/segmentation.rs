//! Geographic feature segmentation.
//!
//! The vision model proposes boxes around location-revealing elements.
//! Each box is loosened to keep some context, scored by the model on four
//! quality criteria, and adjusted until it passes or the refinement budget
//! runs out. Cropping is done here from the returned coordinates.

use std::path::{Path, PathBuf};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::imaging::{ImageError, ImageHandle, Rect};
use crate::providers::{request_structured, ProviderError, Purpose, StructuredError, VisionModel, VisionRequest};

pub const PROPOSE_PROMPT: &str = include_str!("../assets/propose_regions_prompt.txt");
pub const ASSESS_PROMPT: &str = include_str!("../assets/assess_box_prompt.txt");
pub const ADJUST_PROMPT: &str = include_str!("../assets/adjust_box_prompt.txt");
pub const MAX_PARSE_ATTEMPTS: u32 = 2;

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("reply failed schema validation after {attempts} attempts: {reason}")]
    Schema { attempts: u32, reason: String },
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl From<StructuredError> for SegmentationError {
    fn from(e: StructuredError) -> Self {
        match e {
            StructuredError::Provider(p) => SegmentationError::Provider(p),
            StructuredError::Schema { attempts, reason } => SegmentationError::Schema { attempts, reason },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityThresholds {
    pub completeness: f64,
    pub centrality: f64,
    pub context_coverage: f64,
    pub boundary_validity: f64,
}

impl Default for QualityThresholds {
    fn default() -> Self {
        Self {
            completeness: 0.6,
            centrality: 0.6,
            context_coverage: 0.6,
            boundary_validity: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub max_regions: usize,
    pub min_confidence: f64,
    pub margin_fraction: f64,
    pub max_refine: u32,
    pub thresholds: QualityThresholds,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            max_regions: 5,
            min_confidence: 0.2,
            margin_fraction: 0.15,
            max_refine: 2,
            thresholds: QualityThresholds::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    #[serde(rename = "box")]
    pub rect: Rect,
    pub feature_label: String,
    pub confidence: f64,
}

/// Box coordinates as the model writes them: `[x, y, w, h]` or an object.
/// Fractional values are rounded.
#[derive(Clone, Copy, Debug, PartialEq)]
struct SignedBox {
    x: i64,
    y: i64,
    w: i64,
    h: i64,
}

impl<'de> Deserialize<'de> for SignedBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            List([f64; 4]),
            Object { x: f64, y: f64, w: f64, h: f64 },
        }
        let [x, y, w, h] = match Raw::deserialize(d)? {
            Raw::List(v) => v,
            Raw::Object { x, y, w, h } => [x, y, w, h],
        };
        if ![x, y, w, h].iter().all(|v| v.is_finite() && v.abs() < 1e9) {
            return Err(D::Error::custom("box coordinates must be finite numbers"));
        }
        Ok(SignedBox {
            x: x.round() as i64,
            y: y.round() as i64,
            w: w.round() as i64,
            h: h.round() as i64,
        })
    }
}

impl SignedBox {
    fn clip(self, bounds: Rect) -> Option<Rect> {
        Rect::clip_signed(self.x, self.y, self.w, self.h, bounds.w, bounds.h)
    }
}

#[derive(Deserialize)]
struct RawProposal {
    #[serde(rename = "box")]
    rect: SignedBox,
    feature_label: String,
    confidence: f64,
}

#[derive(Deserialize)]
struct ProposalReply {
    regions: Vec<RawProposal>,
}

fn unit_interval<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let v = f64::deserialize(d)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(D::Error::custom(format!("score {v} is outside [0, 1]")))
    }
}

/// Model-reported quality of one box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxScores {
    #[serde(deserialize_with = "unit_interval")]
    pub completeness: f64,
    #[serde(deserialize_with = "unit_interval")]
    pub centrality: f64,
    #[serde(deserialize_with = "unit_interval")]
    pub context_coverage: f64,
    #[serde(deserialize_with = "unit_interval")]
    pub boundary_validity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxQuality {
    pub completeness: f64,
    pub centrality: f64,
    pub context_coverage: f64,
    pub boundary_validity: f64,
    pub passed: bool,
}

impl BoxQuality {
    pub fn judge(scores: BoxScores, t: &QualityThresholds) -> Self {
        Self {
            completeness: scores.completeness,
            centrality: scores.centrality,
            context_coverage: scores.context_coverage,
            boundary_validity: scores.boundary_validity,
            passed: scores.completeness >= t.completeness
                && scores.centrality >= t.centrality
                && scores.context_coverage >= t.context_coverage
                && scores.boundary_validity >= t.boundary_validity,
        }
    }
}

#[derive(Deserialize)]
struct AdjustReply {
    #[serde(rename = "box")]
    rect: SignedBox,
}

/// Asks the model for up to `max_regions` informative boxes. Boxes are
/// clipped to the image; low-confidence and fully outside boxes are
/// dropped; the rest are ordered by confidence (ties keep reply order).
pub fn propose_regions(
    image: &ImageHandle,
    vision: &dyn VisionModel,
    cfg: &SegmentationConfig,
) -> Result<Vec<RegionProposal>, SegmentationError> {
    let prompt = PROPOSE_PROMPT
        .replace("{width}", &image.width().to_string())
        .replace("{height}", &image.height().to_string())
        .replace("{max_regions}", &cfg.max_regions.to_string());
    let req = VisionRequest::new(Purpose::ProposeRegions, vec![image.clone()], prompt).structured("region_proposals");
    let (reply, _) = request_structured::<ProposalReply>(vision, &req, MAX_PARSE_ATTEMPTS)?;
    let mut kept: Vec<RegionProposal> = reply
        .regions
        .into_iter()
        .filter_map(|raw| {
            let confidence = raw.confidence;
            if !(0.0..=1.0).contains(&confidence) || confidence < cfg.min_confidence {
                return None;
            }
            let label = raw.feature_label.trim();
            if label.is_empty() {
                return None;
            }
            Some(RegionProposal {
                rect: raw.rect.clip(image.bounds())?,
                feature_label: label.to_string(),
                confidence,
            })
        })
        .collect();
    kept.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    kept.truncate(cfg.max_regions);
    Ok(kept)
}

/// Grows every side by `margin_fraction` of the box's width (left/right)
/// or height (top/bottom), rounding outward, then clips to
/// `width`×`height`. The margin is clamped to `[0, 0.5]`.
pub fn loosen_box(rect: Rect, margin_fraction: f64, width: u32, height: u32) -> Rect {
    let m = if margin_fraction.is_nan() {
        0.0
    } else {
        margin_fraction.clamp(0.0, 0.5)
    };
    // absorbs representation error such as 0.15 * 100 = 15.000000000000002
    const EPS: f64 = 1e-9;
    let dx = m * rect.w as f64;
    let dy = m * rect.h as f64;
    let x0 = (rect.x as f64 - dx + EPS).floor() as i64;
    let y0 = (rect.y as f64 - dy + EPS).floor() as i64;
    let x1 = (rect.right() as f64 + dx - EPS).ceil() as i64;
    let y1 = (rect.bottom() as f64 + dy - EPS).ceil() as i64;
    Rect::clip_signed(x0, y0, x1 - x0, y1 - y0, width, height).unwrap_or(rect)
}

/// Pixel-exact crop.
pub fn crop(image: &ImageHandle, rect: Rect) -> Result<ImageHandle, ImageError> {
    image.crop(rect)
}

/// Scores one box with the model: the request carries the full image and
/// the crop.
pub fn assess_box(
    image: &ImageHandle,
    rect: Rect,
    feature_label: &str,
    vision: &dyn VisionModel,
    thresholds: &QualityThresholds,
) -> Result<BoxQuality, SegmentationError> {
    let crop = image.crop(rect)?;
    let prompt = ASSESS_PROMPT
        .replace("{feature_label}", feature_label)
        .replace("{box}", &format_box(rect))
        .replace("{width}", &image.width().to_string())
        .replace("{height}", &image.height().to_string());
    let req = VisionRequest::new(Purpose::AssessBox, vec![image.clone(), crop], prompt).structured("box_quality");
    let (scores, _) = request_structured::<BoxScores>(vision, &req, MAX_PARSE_ATTEMPTS)?;
    Ok(BoxQuality::judge(scores, thresholds))
}

fn format_box(r: Rect) -> String {
    format!("[{}, {}, {}, {}]", r.x, r.y, r.w, r.h)
}

fn adjust_box(
    image: &ImageHandle,
    rect: Rect,
    feature_label: &str,
    quality: &BoxQuality,
    vision: &dyn VisionModel,
) -> Result<Option<Rect>, SegmentationError> {
    let crop = image.crop(rect)?;
    let prompt = ADJUST_PROMPT
        .replace("{feature_label}", feature_label)
        .replace("{box}", &format_box(rect))
        .replace("{width}", &image.width().to_string())
        .replace("{height}", &image.height().to_string())
        .replace(
            "{scores}",
            &format!(
                "completeness {:.2}, centrality {:.2}, context coverage {:.2}, boundary validity {:.2}",
                quality.completeness, quality.centrality, quality.context_coverage, quality.boundary_validity
            ),
        );
    let req = VisionRequest::new(Purpose::AdjustBox, vec![image.clone(), crop], prompt).structured("adjusted_box");
    let (reply, _) = request_structured::<AdjustReply>(vision, &req, MAX_PARSE_ATTEMPTS)?;
    Ok(reply.rect.clip(image.bounds()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AcceptedRegion {
    #[serde(rename = "box")]
    pub rect: Rect,
    pub feature_label: String,
    pub confidence: f64,
    pub proposal_box: Rect,
    pub quality: BoxQuality,
    pub assess_calls: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RejectedRegion {
    pub proposal: RegionProposal,
    pub reason: String,
    pub assess_calls: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RefineOutcome {
    pub accepted: Vec<AcceptedRegion>,
    pub rejected: Vec<RejectedRegion>,
}

/// Loosens, assesses and adjusts each proposal in order. Adjusted boxes
/// are clipped and widened to cover the original proposal. A proposal
/// whose replies never validate is rejected; provider failures abort.
pub fn refine_regions(
    image: &ImageHandle,
    proposals: &[RegionProposal],
    vision: &dyn VisionModel,
    cfg: &SegmentationConfig,
) -> Result<RefineOutcome, SegmentationError> {
    let mut out = RefineOutcome::default();
    for proposal in proposals {
        let mut calls = 0;
        let result = refine_one(image, proposal, vision, cfg, &mut calls);
        match result {
            Ok(Some((rect, quality))) => out.accepted.push(AcceptedRegion {
                rect,
                feature_label: proposal.feature_label.clone(),
                confidence: proposal.confidence,
                proposal_box: proposal.rect,
                quality,
                assess_calls: calls,
            }),
            Ok(None) => out.rejected.push(RejectedRegion {
                proposal: proposal.clone(),
                reason: format!("failed quality checks after {calls} assessments"),
                assess_calls: calls,
            }),
            Err(SegmentationError::Schema { reason, .. }) => out.rejected.push(RejectedRegion {
                proposal: proposal.clone(),
                reason: format!("unusable model reply: {reason}"),
                assess_calls: calls,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn refine_one(
    image: &ImageHandle,
    proposal: &RegionProposal,
    vision: &dyn VisionModel,
    cfg: &SegmentationConfig,
    calls: &mut u32,
) -> Result<Option<(Rect, BoxQuality)>, SegmentationError> {
    let mut current = loosen_box(proposal.rect, cfg.margin_fraction, image.width(), image.height());
    *calls += 1;
    let mut quality = assess_box(image, current, &proposal.feature_label, vision, &cfg.thresholds)?;
    for _ in 0..cfg.max_refine {
        if quality.passed {
            break;
        }
        let adjusted = adjust_box(image, current, &proposal.feature_label, &quality, vision)?;
        current = adjusted.map_or(proposal.rect, |r| r.union(&proposal.rect));
        *calls += 1;
        quality = assess_box(image, current, &proposal.feature_label, vision, &cfg.thresholds)?;
    }
    Ok(quality.passed.then_some((current, quality)))
}

/// Full segmentation: propose, then refine.
pub fn segment(
    image: &ImageHandle,
    vision: &dyn VisionModel,
    cfg: &SegmentationConfig,
) -> Result<RefineOutcome, SegmentationError> {
    let proposals = propose_regions(image, vision, cfg)?;
    if proposals.is_empty() {
        return Ok(RefineOutcome::default());
    }
    refine_regions(image, &proposals, vision, cfg)
}

/// Writes `crop_<n>.png` plus `crop_<n>.json` (label, box, scores) for
/// every accepted region. Returns the PNG paths.
pub fn write_crops(
    dir: &Path,
    image: &ImageHandle,
    regions: &[AcceptedRegion],
) -> Result<Vec<PathBuf>, SegmentationError> {
    std::fs::create_dir_all(dir).map_err(|source| ImageError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut paths = Vec::new();
    for (i, region) in regions.iter().enumerate() {
        let png = dir.join(format!("crop_{}.png", i + 1));
        let json = dir.join(format!("crop_{}.json", i + 1));
        let bytes = image.crop(region.rect)?.to_png();
        let meta = serde_json::to_vec_pretty(region).expect("regions serialize");
        for (path, data) in [(&png, bytes), (&json, meta)] {
            std::fs::write(path, data).map_err(|source| ImageError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        paths.push(png);
    }
    Ok(paths)
}
