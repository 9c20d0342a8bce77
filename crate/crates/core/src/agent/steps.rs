//! The four tools as pipeline steps.

use crate::experience::ExperienceError;
use crate::experience::MemoryStore;
use crate::imaging::ImageHandle;
use crate::model::{EvidenceItem, EvidenceSource, GeoLabel, UncertaintyDetector};
use crate::providers::{extract_json, ProviderError, Providers, Purpose, VisionRequest};
use crate::reverse_search::{analyze_crops, analyze_image, AnalysisReport, ReverseSearchConfig};
use crate::segmentation::{segment, AcceptedRegion, SegmentationConfig, SegmentationError};

pub const DIRECT_QUESTION: &str = "Where was the photo taken?";

const ANSWER_FORMAT: &str = "Answer on the first line with the location as \"City, Region, \
Country\", leaving out parts you cannot determine, or with \"unknown\" if you cannot tell. On \
the following lines, explain which visible details support the answer.";

const ANSWER_PREFIXES: &[&str] = &[
    "location:",
    "answer:",
    "final answer:",
    "the photo was taken in",
    "this photo was taken in",
    "the image was taken in",
    "this image was taken in",
];

#[derive(Debug, Default)]
pub(crate) struct StepOutput {
    pub items: Vec<EvidenceItem>,
    pub note: String,
    pub report: Option<AnalysisReport>,
    pub regions: Vec<AcceptedRegion>,
    /// Set when the step decided there was nothing useful to do.
    pub skipped: bool,
}

impl StepOutput {
    fn note(note: impl Into<String>) -> Self {
        Self {
            note: note.into(),
            ..Default::default()
        }
    }
}

/// A location answer read from free text or JSON, with its rationale.
/// `None` when the model declined to answer.
pub fn parse_answer(reply: &str, detector: &UncertaintyDetector) -> Option<(GeoLabel, String)> {
    if let Some(json) = extract_json(reply) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(json) {
            if v.is_object() {
                let text = |k: &str| v.get(k).and_then(|x| x.as_str()).map(str::to_string);
                let rationale = ["rationale", "reasoning", "explanation"]
                    .into_iter()
                    .find_map(text)
                    .unwrap_or_default();
                let label = GeoLabel::partial(text("country"), text("region").or_else(|| text("state")), text("city"));
                if !label.is_empty() {
                    return (!detector.is_unknown(&label.display_name())).then_some((label, rationale));
                }
                if let Some(loc) = text("location") {
                    return parse_line(&loc, detector).map(|l| (l, rationale));
                }
                return None;
            }
        }
    }
    let mut lines = reply.lines().map(str::trim).filter(|l| !l.is_empty());
    let first = lines.next()?;
    let rationale = lines.collect::<Vec<_>>().join("\n");
    parse_line(first, detector).map(|l| (l, rationale))
}

fn parse_line(line: &str, detector: &UncertaintyDetector) -> Option<GeoLabel> {
    let mut s = line
        .trim()
        .trim_matches(|c: char| c == '*' || c == '#' || c == '"')
        .trim();
    for p in ANSWER_PREFIXES {
        if s.len() >= p.len() && s.is_char_boundary(p.len()) && s[..p.len()].eq_ignore_ascii_case(p) {
            s = s[p.len()..].trim_start_matches(['*', ' ']).trim();
        }
    }
    let s = s.trim_end_matches(['.', '!']).trim();
    if detector.is_unknown(s) {
        return None;
    }
    GeoLabel::parse_hierarchical(s)
}

fn ask(
    image: &ImageHandle,
    providers: &Providers,
    purpose: Purpose,
    prompt: String,
    detector: &UncertaintyDetector,
    source: EvidenceSource,
    context: &str,
) -> Result<StepOutput, ProviderError> {
    let req = VisionRequest::new(purpose, vec![image.clone()], prompt);
    let reply = providers.vision.chat_vision(&req)?;
    Ok(match parse_answer(&reply, detector) {
        Some((label, rationale)) => {
            let note = [context, rationale.as_str()]
                .into_iter()
                .filter(|s| !s.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            let item =
                EvidenceItem::new(source, vec![label.clone()], false, note).expect("parsed labels are non-empty");
            StepOutput {
                items: vec![item],
                note: format!("answered {}", label.display_name()),
                ..Default::default()
            }
        }
        None => StepOutput::note("the model gave no location"),
    })
}

pub(crate) fn direct(
    image: &ImageHandle,
    providers: &Providers,
    detector: &UncertaintyDetector,
) -> Result<StepOutput, ProviderError> {
    let prompt = format!("{DIRECT_QUESTION} {ANSWER_FORMAT}");
    ask(
        image,
        providers,
        Purpose::Direct,
        prompt,
        detector,
        EvidenceSource::DirectLvlm,
        "",
    )
}

/// Looks the image up in prompt memory and asks with the retrieved prompt
/// as a hint, or with the plain question on a miss. With `skip_on_miss`
/// a miss ends the step without a model call.
pub(crate) fn eap(
    image: &ImageHandle,
    providers: &Providers,
    memory: &MemoryStore,
    threshold: f64,
    detector: &UncertaintyDetector,
    skip_on_miss: bool,
) -> Result<StepOutput, ProviderError> {
    let hit = match memory.lookup(image, providers.geo_embedder.as_ref(), threshold) {
        Ok(hit) => hit,
        Err(ExperienceError::Provider(e)) => return Err(e),
        Err(e) => {
            log::warn!("prompt memory lookup failed: {e}");
            None
        }
    };
    let Some(hit) = hit else {
        if skip_on_miss {
            return Ok(StepOutput {
                skipped: true,
                ..StepOutput::note("no remembered prompt for a similar image")
            });
        }
        let prompt = format!("{DIRECT_QUESTION} {ANSWER_FORMAT}");
        let mut out = ask(
            image,
            providers,
            Purpose::Eap,
            prompt,
            detector,
            EvidenceSource::Eap,
            "",
        )?;
        out.note = format!("no remembered prompt; {}", out.note);
        return Ok(out);
    };
    let prompt = format!(
        "{DIRECT_QUESTION} A visually similar photo was previously described as: \"{}\". Use \
         this as a hint about which details matter, not as the answer. {ANSWER_FORMAT}",
        hit.record.prompt
    );
    let context = format!(
        "Prompted with a remembered description of {} (image similarity {:.3}).",
        hit.record.source_image_id, hit.similarity
    );
    let mut out = ask(
        image,
        providers,
        Purpose::Eap,
        prompt,
        detector,
        EvidenceSource::Eap,
        &context,
    )?;
    out.note = format!("remembered prompt from {}; {}", hit.record.source_image_id, out.note);
    Ok(out)
}

pub(crate) fn reverse_search(
    image: &ImageHandle,
    providers: &Providers,
    cfg: &ReverseSearchConfig,
) -> Result<StepOutput, ProviderError> {
    let report = analyze_image(image, providers, cfg)?;
    let items: Vec<EvidenceItem> = report.evidence().into_iter().collect();
    let note = match &report.consensus {
        Some(l) => format!(
            "{} candidate(s), consensus {}",
            report.candidates.len(),
            l.display_name()
        ),
        None => format!("{} candidate(s), no consensus", report.candidates.len()),
    };
    Ok(StepOutput {
        items,
        note,
        report: Some(report),
        ..Default::default()
    })
}

pub(crate) fn seg_then_reverse_search(
    image: &ImageHandle,
    providers: &Providers,
    seg: &SegmentationConfig,
    rs: &ReverseSearchConfig,
) -> Result<StepOutput, ProviderError> {
    let outcome = match segment(image, providers.vision.as_ref(), seg) {
        Ok(o) => o,
        Err(SegmentationError::Provider(e)) => return Err(e),
        Err(e) => return Ok(StepOutput::note(format!("segmentation produced no regions: {e}"))),
    };
    if outcome.accepted.is_empty() {
        return Ok(StepOutput::note("segmentation accepted no regions"));
    }
    let mut crops = Vec::new();
    for (i, r) in outcome.accepted.iter().enumerate() {
        match image.crop(r.rect) {
            Ok(c) => crops.push((c, format!("region {} ({}) at {}", i + 1, r.feature_label, r.rect))),
            Err(e) => log::warn!("skipping region {}: {e}", r.rect),
        }
    }
    let report = analyze_crops(image, &crops, providers, rs)?;
    let items: Vec<EvidenceItem> = report
        .evidence()
        .into_iter()
        .filter_map(|e| {
            let regions = outcome
                .accepted
                .iter()
                .map(|r| r.feature_label.as_str())
                .collect::<Vec<_>>()
                .join(", ");
            EvidenceItem::new(
                EvidenceSource::Segmentation,
                e.places().to_vec(),
                true,
                format!("{} Regions searched: {regions}.", e.note),
            )
            .ok()
        })
        .collect();
    let note = format!(
        "{} region(s), {} candidate(s), {}",
        outcome.accepted.len(),
        report.candidates.len(),
        report
            .consensus
            .as_ref()
            .map_or("no consensus".to_string(), |l| format!(
                "consensus {}",
                l.display_name()
            ))
    );
    Ok(StepOutput {
        items,
        note,
        report: Some(report),
        regions: outcome.accepted,
        skipped: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answers_in_text_and_json() {
        let d = UncertaintyDetector::default();
        let (l, r) = parse_answer("Paris, Île-de-France, France\nEiffel Tower visible.", &d).unwrap();
        assert_eq!(l, GeoLabel::place(Some("Paris"), Some("Île-de-France"), "France"));
        assert_eq!(r, "Eiffel Tower visible.");
        let (l, _) = parse_answer("**Location:** Lisbon, Portugal.", &d).unwrap();
        assert_eq!(l, GeoLabel::place(Some("Lisbon"), None, "Portugal"));
        let (l, r) = parse_answer(r#"{"city": "Kyoto", "country": "Japan", "reasoning": "torii"}"#, &d).unwrap();
        assert_eq!(l, GeoLabel::place(Some("Kyoto"), None, "Japan"));
        assert_eq!(r, "torii");
        assert!(parse_answer("Unknown", &d).is_none());
        assert!(parse_answer("I cannot determine the location.\nToo dark.", &d).is_none());
        assert!(parse_answer(r#"{"country": null, "location": "unknown"}"#, &d).is_none());
        assert!(parse_answer("", &d).is_none());
    }
}
