//! Place labels, evidence items and predictions shared by every stage.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Suffixes removed when building loose comparison keys ("New York City"
/// and "New York" must compare equal).
const COMPARISON_SUFFIXES: &[&str] = &[" city", " province", " state", " prefecture"];

/// Default phrases treated as an uncertain ("unknown") answer.
pub const DEFAULT_UNCERTAIN_PHRASES: &[&str] =
    &["unknown", "cannot determine", "not sure", "unable to identify", "n/a"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("a label naming a city must also name a country")]
    CityWithoutCountry,
    #[error("evidence item must name at least one place")]
    EmptyEvidence,
    #[error("unknown tool id `{0}`")]
    UnknownTool(String),
}

/// Trims, collapses internal whitespace and case-folds. No suffix handling.
pub fn canonical_key(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Loose comparison key: [`canonical_key`] plus removal of the
/// administrative suffixes in [`COMPARISON_SUFFIXES`] as long as a
/// non-empty name remains. Idempotent.
pub fn normalize_place(raw: &str) -> String {
    let mut key = canonical_key(raw);
    loop {
        let stripped = COMPARISON_SUFFIXES.iter().find_map(|suffix| {
            key.strip_suffix(suffix)
                .filter(|rest| !rest.trim().is_empty())
                .map(|rest| rest.trim_end().to_string())
        });
        match stripped {
            Some(rest) => key = rest,
            None => return key,
        }
    }
}

/// Detects refusals and other uncertain answers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyDetector {
    phrases: Vec<String>,
}

impl Default for UncertaintyDetector {
    fn default() -> Self {
        Self::new(DEFAULT_UNCERTAIN_PHRASES.iter().copied())
    }
}

impl UncertaintyDetector {
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let phrases = phrases
            .into_iter()
            .map(|p| canonical_key(p.as_ref()))
            .filter(|p| !p.is_empty())
            .collect();
        Self { phrases }
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn is_unknown(&self, answer: &str) -> bool {
        let key = canonical_key(answer);
        key.is_empty() || self.phrases.iter().any(|p| key.contains(p.as_str()))
    }
}

/// [`UncertaintyDetector::is_unknown`] with the default phrase set.
pub fn is_unknown(answer: &str) -> bool {
    UncertaintyDetector::default().is_unknown(answer)
}

fn clean(value: Option<String>) -> Option<String> {
    value.map(|v| v.trim().to_string()).filter(|v| !v.is_empty())
}

/// Hierarchical place identity.
///
/// Stored values keep their original casing; equality and hashing use the
/// canonical (trimmed, whitespace-collapsed, case-folded) form of each
/// level. A label that names a city without a country is a *partial*
/// mention, which only [`GeoLabel::partial`] and deserialization produce;
/// page clues such as a bare `geo.placename` need it.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(from = "RawLabel")]
pub struct GeoLabel {
    country: Option<String>,
    region: Option<String>,
    city: Option<String>,
}

#[derive(Deserialize)]
struct RawLabel {
    #[serde(default)]
    country: Option<String>,
    #[serde(default, alias = "state")]
    region: Option<String>,
    #[serde(default)]
    city: Option<String>,
}

impl From<RawLabel> for GeoLabel {
    fn from(raw: RawLabel) -> Self {
        GeoLabel::partial(raw.country, raw.region, raw.city)
    }
}

impl GeoLabel {
    pub fn new(country: Option<String>, region: Option<String>, city: Option<String>) -> Result<Self, ModelError> {
        let label = Self::partial(country, region, city);
        if label.city.is_some() && label.country.is_none() {
            return Err(ModelError::CityWithoutCountry);
        }
        Ok(label)
    }

    pub fn partial(country: Option<String>, region: Option<String>, city: Option<String>) -> Self {
        Self {
            country: clean(country),
            region: clean(region),
            city: clean(city),
        }
    }

    pub fn country_only(country: &str) -> Self {
        Self::partial(Some(country.into()), None, None)
    }

    /// Convenience for literals: `GeoLabel::place(Some("Prague"), None, "Czech Republic")`.
    pub fn place(city: Option<&str>, region: Option<&str>, country: &str) -> Self {
        Self::partial(Some(country.into()), region.map(Into::into), city.map(Into::into))
    }

    /// Parses "City, Region, Country" style text. One part is read as a
    /// country, two as city and country, three or more as the last three
    /// of city, region, country.
    pub fn parse_hierarchical(text: &str) -> Option<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
        let label = match parts.as_slice() {
            [] => return None,
            [country] => Self::country_only(country),
            [city, country] => Self::place(Some(city), None, country),
            [.., city, region, country] => Self::place(Some(city), Some(region), country),
        };
        (!label.is_empty()).then_some(label)
    }

    pub fn country(&self) -> Option<&str> {
        self.country.as_deref()
    }

    pub fn region(&self) -> Option<&str> {
        self.region.as_deref()
    }

    pub fn city(&self) -> Option<&str> {
        self.city.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.country.is_none() && self.region.is_none() && self.city.is_none()
    }

    /// True when a city, if named, is anchored to a country.
    pub fn is_anchored(&self) -> bool {
        self.city.is_none() || self.country.is_some()
    }

    /// Number of populated levels.
    pub fn specificity(&self) -> usize {
        [&self.country, &self.region, &self.city]
            .iter()
            .filter(|v| v.is_some())
            .count()
    }

    pub fn keys(&self) -> [Option<String>; 3] {
        [
            self.country.as_deref().map(canonical_key),
            self.region.as_deref().map(canonical_key),
            self.city.as_deref().map(canonical_key),
        ]
    }

    /// Stable textual key, used for deterministic ordering.
    pub fn sort_key(&self) -> String {
        self.keys()
            .iter()
            .map(|k| k.clone().unwrap_or_default())
            .collect::<Vec<_>>()
            .join("|")
    }

    /// Two labels are compatible when no level that both specify disagrees
    /// and they share at least one specified level.
    pub fn is_compatible(&self, other: &GeoLabel) -> bool {
        let mut shared = false;
        for (a, b) in self.keys().iter().zip(other.keys().iter()) {
            if let (Some(a), Some(b)) = (a, b) {
                if a != b {
                    return false;
                }
                shared = true;
            }
        }
        shared
    }

    /// Fills levels missing here from `other`.
    pub fn merged_with(&self, other: &GeoLabel) -> GeoLabel {
        GeoLabel {
            country: self.country.clone().or_else(|| other.country.clone()),
            region: self.region.clone().or_else(|| other.region.clone()),
            city: self.city.clone().or_else(|| other.city.clone()),
        }
    }

    /// Keeps only the levels on which both labels agree.
    pub fn common_with(&self, other: &GeoLabel) -> GeoLabel {
        let keep = |a: &Option<String>, b: &Option<String>| match (a, b) {
            (Some(x), Some(y)) if canonical_key(x) == canonical_key(y) => Some(x.clone()),
            _ => None,
        };
        GeoLabel {
            country: keep(&self.country, &other.country),
            region: keep(&self.region, &other.region),
            city: keep(&self.city, &other.city),
        }
    }

    /// "City, Region, Country" using the populated levels.
    pub fn display_name(&self) -> String {
        [&self.city, &self.region, &self.country]
            .iter()
            .filter_map(|v| v.as_deref())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl PartialEq for GeoLabel {
    fn eq(&self, other: &Self) -> bool {
        self.keys() == other.keys()
    }
}

impl Eq for GeoLabel {}

impl Hash for GeoLabel {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.keys().hash(state);
    }
}

impl fmt::Display for GeoLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display_name())
    }
}

/// The tools a plan can schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolId {
    DirectLvlm,
    Eap,
    ReverseSearch,
    SegThenReverseSearch,
}

impl ToolId {
    pub const ALL: [ToolId; 4] = [
        ToolId::DirectLvlm,
        ToolId::Eap,
        ToolId::ReverseSearch,
        ToolId::SegThenReverseSearch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolId::DirectLvlm => "direct_lvlm",
            ToolId::Eap => "eap",
            ToolId::ReverseSearch => "reverse_search",
            ToolId::SegThenReverseSearch => "seg_then_reverse_search",
        }
    }
}

impl fmt::Display for ToolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ToolId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ToolId::ALL
            .into_iter()
            .find(|t| t.as_str() == s.trim())
            .ok_or_else(|| ModelError::UnknownTool(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceSource {
    DirectLvlm,
    Eap,
    ReverseSearch,
    Segmentation,
    WebpageMetadata,
}

impl EvidenceSource {
    /// Tools whose execution can yield evidence of this source.
    pub fn producers(self) -> &'static [ToolId] {
        match self {
            EvidenceSource::DirectLvlm => &[ToolId::DirectLvlm],
            EvidenceSource::Eap => &[ToolId::Eap],
            EvidenceSource::ReverseSearch => &[ToolId::ReverseSearch],
            EvidenceSource::Segmentation => &[ToolId::SegThenReverseSearch],
            EvidenceSource::WebpageMetadata => &[ToolId::ReverseSearch, ToolId::SegThenReverseSearch],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EvidenceSource::DirectLvlm => "direct_lvlm",
            EvidenceSource::Eap => "eap",
            EvidenceSource::ReverseSearch => "reverse_search",
            EvidenceSource::Segmentation => "segmentation",
            EvidenceSource::WebpageMetadata => "webpage_metadata",
        }
    }
}

/// One location signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub source: EvidenceSource,
    places: Vec<GeoLabel>,
    pub explicit_place_name: bool,
    pub note: String,
}

impl EvidenceItem {
    pub fn new(
        source: EvidenceSource,
        places: Vec<GeoLabel>,
        explicit_place_name: bool,
        note: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let places: Vec<GeoLabel> = places.into_iter().filter(|p| !p.is_empty()).collect();
        if places.is_empty() {
            return Err(ModelError::EmptyEvidence);
        }
        Ok(Self {
            source,
            places,
            explicit_place_name,
            note: note.into(),
        })
    }

    pub fn places(&self) -> &[GeoLabel] {
        &self.places
    }

    /// The first (highest-priority) place.
    pub fn primary(&self) -> &GeoLabel {
        &self.places[0]
    }

    pub fn supports(&self, label: &GeoLabel) -> bool {
        self.places.iter().any(|p| p.is_compatible(label))
    }
}

/// A final answer. `label == None` is the Unknown answer and serializes as
/// `"label": null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Option<GeoLabel>,
    pub explanation: String,
    pub evidence: Vec<EvidenceItem>,
    pub strategy_trace: Vec<ToolId>,
}

impl Prediction {
    pub fn unknown(explanation: impl Into<String>) -> Self {
        Self {
            label: None,
            explanation: explanation.into(),
            evidence: Vec::new(),
            strategy_trace: Vec::new(),
        }
    }

    pub fn is_unknown(&self) -> bool {
        self.label.is_none()
    }

    /// Text rendering of the label; "unknown" for the Unknown answer.
    pub fn label_text(&self) -> String {
        self.label
            .as_ref()
            .map(GeoLabel::display_name)
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| "unknown".to_string())
    }
}
