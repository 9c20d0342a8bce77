//! Heuristic place-clue extraction from web pages.
//!
//! Every emitted place string is copied verbatim from the page (after
//! entity decoding and whitespace collapsing); nothing is inferred.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::Deserialize;

use crate::html::{self, Token};
use crate::model::{canonical_key, EvidenceItem, EvidenceSource, GeoLabel};
use crate::providers::{request_structured, Purpose, VisionModel, VisionRequest};

pub const COUNTRY_LIST: &str = include_str!("../../assets/countries.txt");

/// Words allowed inside (not at the start of) a multi-word place name.
const CONNECTORS: &[&str] = &[
    "de", "del", "della", "di", "da", "do", "dos", "du", "des", "la", "le", "les", "el", "am", "an", "im", "upon",
    "on", "sur", "of", "the", "and", "y", "en",
];
const MAX_PLACE_WORDS: usize = 4;

#[derive(Debug)]
struct Country {
    canonical: String,
    names: Vec<String>,
    pattern_only: bool,
}

/// Country names and aliases.
#[derive(Debug)]
pub struct Gazetteer {
    countries: Vec<Country>,
    by_key: HashMap<String, usize>,
}

impl Gazetteer {
    pub fn parse(text: &str) -> Self {
        let mut countries = Vec::new();
        let mut by_key = HashMap::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (pattern_only, line) = match line.strip_prefix('~') {
                Some(rest) => (true, rest),
                None => (false, line),
            };
            let names: Vec<String> = line
                .split('|')
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .map(str::to_string)
                .collect();
            if names.is_empty() {
                continue;
            }
            for n in &names {
                by_key.entry(canonical_key(n)).or_insert(countries.len());
            }
            countries.push(Country {
                canonical: names[0].clone(),
                names,
                pattern_only,
            });
        }
        Self { countries, by_key }
    }

    pub fn builtin() -> &'static Gazetteer {
        static G: OnceLock<Gazetteer> = OnceLock::new();
        G.get_or_init(|| Gazetteer::parse(COUNTRY_LIST))
    }

    /// Canonical country name when `name` is a known country or alias
    /// written with a leading capital.
    pub fn canonical(&self, name: &str) -> Option<&str> {
        let name = name.trim();
        if !name.chars().next().is_some_and(char::is_uppercase) {
            return None;
        }
        self.by_key
            .get(&canonical_key(name))
            .map(|&i| self.countries[i].canonical.as_str())
    }

    /// `label` with its country replaced by the canonical name when the
    /// country is a known name or alias in any casing.
    pub fn canonical_label(&self, label: &GeoLabel) -> GeoLabel {
        let known = label
            .country()
            .and_then(|c| self.by_key.get(&canonical_key(c)))
            .map(|&i| self.countries[i].canonical.clone());
        match known {
            Some(country) => GeoLabel::partial(
                Some(country),
                label.region().map(Into::into),
                label.city().map(Into::into),
            ),
            None => label.clone(),
        }
    }

    /// Comparison key for a country: the canonical name's key when known.
    pub fn country_key(&self, name: &str) -> String {
        self.by_key
            .get(&canonical_key(name))
            .map(|&i| canonical_key(&self.countries[i].canonical))
            .unwrap_or_else(|| canonical_key(name))
    }

    /// Longest leading run of `words` naming a country, as written, with
    /// trailing punctuation dropped when the name does not include it.
    fn country_prefix(&self, words: &[&str]) -> Option<String> {
        (1..=words.len().min(6)).rev().find_map(|n| {
            let joined = words[..n].join(" ");
            if self.canonical(&joined).is_some() {
                return Some(joined);
            }
            let trimmed = joined.trim_end_matches(['.', ',', ';', '!', '?', '"', ')', '\'']);
            self.canonical(trimmed).is_some().then(|| trimmed.to_string())
        })
    }

    /// Whole-word, case-exact mentions of country names that are not
    /// pattern-only. Returns (byte start, matched text), left to right,
    /// longest match first at each position, without overlaps.
    fn mentions<'a>(&self, text: &'a str) -> Vec<(usize, &'a str)> {
        let mut found: Vec<(usize, &'a str)> = Vec::new();
        for c in self.countries.iter().filter(|c| !c.pattern_only) {
            for name in &c.names {
                let mut from = 0;
                while let Some(pos) = text[from..].find(name.as_str()) {
                    let start = from + pos;
                    let end = start + name.len();
                    let before_ok = text[..start].chars().next_back().is_none_or(|ch| !ch.is_alphanumeric());
                    let after_ok = text[end..].chars().next().is_none_or(|ch| !ch.is_alphanumeric());
                    if before_ok && after_ok {
                        found.push((start, &text[start..end]));
                    }
                    from = start + name.len().max(1);
                }
            }
        }
        found.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.len().cmp(&a.1.len())));
        let mut out: Vec<(usize, &str)> = Vec::new();
        for (start, m) in found {
            if out.last().is_none_or(|(s, prev)| start >= s + prev.len()) {
                out.push((start, m));
            }
        }
        out
    }
}

fn clean_word(w: &str) -> &str {
    w.trim_matches(|c: char| {
        matches!(
            c,
            '"' | '\'' | '“' | '”' | '‘' | '’' | '(' | ')' | '[' | ']' | '«' | '»' | '!' | '?' | ';' | '.'
        )
    })
}

fn is_capitalized(w: &str) -> bool {
    let w = clean_word(w);
    w.chars().next().is_some_and(char::is_uppercase) && !w.chars().any(|c| c.is_ascii_digit())
}

/// The trailing run of capitalized words (connectors allowed inside) in
/// `part`, and whether it spans the whole part.
fn trailing_place(part: &str) -> Option<(String, bool)> {
    let words: Vec<&str> = part.split_whitespace().collect();
    let mut start = words.len();
    while start > 0 {
        let w = words[start - 1];
        if is_capitalized(w) || (CONNECTORS.contains(&w) && start < words.len()) {
            start -= 1;
        } else {
            break;
        }
    }
    while start < words.len() && !is_capitalized(words[start]) {
        start += 1;
    }
    if start >= words.len() || words.len() - start > MAX_PLACE_WORDS {
        return None;
    }
    let phrase: Vec<&str> = words[start..].iter().map(|w| clean_word(w)).collect();
    let text = phrase.join(" ");
    let text = text.trim();
    (!text.is_empty()).then(|| (text.to_string(), start == 0))
}

/// Splits text into segments that never contain a place pattern boundary.
fn segments(text: &str) -> Vec<&str> {
    text.split(['|', '—', '–', '·', ':', '(', ')', '\n', '/', '•'])
        .flat_map(|s| s.split(" - "))
        .flat_map(|s| s.split(". "))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

/// "City, Region, Country" and "City, Country" patterns plus bare country
/// mentions found in one text.
fn labels_in(text: &str, gaz: &Gazetteer) -> Vec<GeoLabel> {
    let mut out = Vec::new();
    for seg in segments(text) {
        let parts: Vec<&str> = seg.split(',').map(str::trim).collect();
        let mut pattern_countries = Vec::new();
        for i in 1..parts.len() {
            let words: Vec<&str> = parts[i].split_whitespace().collect();
            let Some(country) = gaz.country_prefix(&words) else {
                continue;
            };
            let Some((p1, whole)) = trailing_place(parts[i - 1]) else {
                continue;
            };
            if gaz.canonical(&p1).is_some() {
                continue;
            }
            let label = match (whole && i >= 2).then(|| trailing_place(parts[i - 2])).flatten() {
                Some((city, _)) if gaz.canonical(&city).is_none() => GeoLabel::place(Some(&city), Some(&p1), &country),
                _ => GeoLabel::place(Some(&p1), None, &country),
            };
            pattern_countries.push(gaz.country_key(&country));
            out.push(label);
        }
        for (_, name) in gaz.mentions(seg) {
            if !pattern_countries.contains(&gaz.country_key(name)) {
                out.push(GeoLabel::country_only(name));
            }
        }
    }
    out
}

/// Reads a `geo.placename` value. Without a recognizable country the
/// parts are taken as city, then region.
fn placename_label(value: &str, gaz: &Gazetteer) -> Option<GeoLabel> {
    if let Some(label) = labels_in(value, gaz).into_iter().next() {
        return Some(label);
    }
    let parts: Vec<&str> = value.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
    let label = match parts.as_slice() {
        [] => return None,
        [city] => GeoLabel::partial(None, None, Some(city.to_string())),
        [city, region] => GeoLabel::partial(None, Some(region.to_string()), Some(city.to_string())),
        [.., city, region, country] => GeoLabel::place(Some(city), Some(region), country),
    };
    (!label.is_empty()).then_some(label)
}

/// Text fields of a page in extraction priority order, each tagged with
/// where it came from.
pub fn page_fields(html_text: &str) -> Vec<(String, String)> {
    let tokens = html::tokenize(html_text);
    let mut fields = Vec::new();
    for t in html::element_texts(&tokens, "title") {
        fields.push(("title".to_string(), t));
    }
    for t in &tokens {
        if let Token::Open { name, .. } = t {
            if name == "meta" {
                let key = t
                    .attr("property")
                    .or_else(|| t.attr("name"))
                    .unwrap_or_default()
                    .to_ascii_lowercase();
                if matches!(key.as_str(), "og:title" | "og:description" | "geo.placename") {
                    if let Some(content) = t.attr("content") {
                        let content = html::squash(content);
                        if !content.is_empty() {
                            fields.push((format!("meta {key}"), content));
                        }
                    }
                }
            }
        }
    }
    for t in html::element_texts(&tokens, "figcaption") {
        fields.push(("caption".to_string(), t));
    }
    for t in &tokens {
        if let Token::Open { name, .. } = t {
            if name == "img" {
                if let Some(alt) = t.attr("alt").map(html::squash).filter(|a| !a.is_empty()) {
                    fields.push(("image alt".to_string(), alt));
                }
            }
        }
    }
    for h in ["h1", "h2", "h3", "h4", "h5", "h6"] {
        for t in html::element_texts(&tokens, h) {
            fields.push((format!("heading {h}"), t));
        }
    }
    fields
}

/// `geo.position` ("lat;lon") when present and valid.
pub fn page_coordinates(html_text: &str) -> Option<(f64, f64)> {
    html::tokenize(html_text).iter().find_map(|t| {
        let key = t.attr("name").or_else(|| t.attr("property"))?;
        if !key.eq_ignore_ascii_case("geo.position") {
            return None;
        }
        let (lat, lon) = t.attr("content")?.split_once([';', ','])?;
        let lat: f64 = lat.trim().parse().ok()?;
        let lon: f64 = lon.trim().parse().ok()?;
        ((-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon)).then_some((lat, lon))
    })
}

/// Scans title, meta tags, captions/alt text and headings, in that order,
/// for place names. Repeated labels are reported once, at their first
/// occurrence.
pub fn extract_page_clues(html_text: &str, url: &str) -> Vec<EvidenceItem> {
    let gaz = Gazetteer::builtin();
    let mut seen: Vec<GeoLabel> = Vec::new();
    let mut items = Vec::new();
    for (origin, text) in page_fields(html_text) {
        let labels = if origin == "meta geo.placename" {
            placename_label(&text, gaz).into_iter().collect()
        } else {
            labels_in(&text, gaz)
        };
        for label in labels {
            if seen.contains(&label) {
                continue;
            }
            seen.push(label.clone());
            let note = format!("{origin} of {url}: \"{text}\"");
            if let Ok(item) = EvidenceItem::new(EvidenceSource::WebpageMetadata, vec![label], true, note) {
                items.push(item);
            }
        }
    }
    items
}

#[derive(Deserialize)]
struct LvlmPlaces {
    places: Vec<GeoLabel>,
}

/// Model-assisted extraction. Only places whose every level occurs
/// verbatim in the page text are kept, so the model cannot introduce
/// names the page does not contain.
pub fn extract_page_clues_lvlm(html_text: &str, url: &str, vision: &dyn VisionModel) -> Vec<EvidenceItem> {
    let fields = page_fields(html_text);
    if fields.is_empty() {
        return Vec::new();
    }
    let joined = fields
        .iter()
        .map(|(origin, text)| format!("{origin}: {text}"))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = format!(
        "List the places named in this web page excerpt. Reply with JSON \
         {{\"places\": [{{\"city\": ..., \"region\": ..., \"country\": ...}}]}} using null for \
         missing levels and copying names exactly as written.\n\n{joined}"
    );
    let req = VisionRequest::new(Purpose::PageClues, vec![], prompt).structured("page_places");
    let places = match request_structured::<LvlmPlaces>(vision, &req, 2) {
        Ok((reply, _)) => reply.places,
        Err(e) => {
            log::debug!("page clue extraction for {url} failed: {e}");
            return Vec::new();
        }
    };
    let haystack = fields.iter().map(|(_, t)| t.as_str()).collect::<Vec<_>>().join("\n");
    let mut items: Vec<EvidenceItem> = Vec::new();
    for label in places {
        let verbatim = [label.city(), label.region(), label.country()]
            .into_iter()
            .flatten()
            .all(|part| haystack.contains(part));
        if !verbatim || label.is_empty() || items.iter().any(|i| i.primary() == &label) {
            continue;
        }
        if let Ok(item) = EvidenceItem::new(
            EvidenceSource::WebpageMetadata,
            vec![label],
            true,
            format!("model-read place on {url}"),
        ) {
            items.push(item);
        }
    }
    items
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(html: &str) -> Vec<String> {
        extract_page_clues(html, "https://x.example/")
            .iter()
            .map(|i| i.primary().display_name())
            .collect()
    }

    #[test]
    fn title_with_city_and_country() {
        let items = extract_page_clues(
            "<html><head><title>Old Town Square — Prague, Czech Republic</title></head></html>",
            "https://x.example/",
        );
        assert_eq!(items.len(), 1);
        let l = items[0].primary();
        assert_eq!(l.city(), Some("Prague"));
        assert_eq!(l.country(), Some("Czech Republic"));
        assert!(items[0].explicit_place_name);
        assert_eq!(items[0].source, EvidenceSource::WebpageMetadata);
    }

    #[test]
    fn placename_meta_without_country() {
        let items = extract_page_clues(r#"<meta name="geo.placename" content="Kyoto">"#, "u");
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].primary().city(), Some("Kyoto"));
        assert_eq!(items[0].primary().country(), None);
    }

    #[test]
    fn no_place_content() {
        assert!(labels("<html><title>My lunch</title><h1>Tasty noodles</h1></html>").is_empty());
        assert!(labels("").is_empty());
    }

    #[test]
    fn three_level_pattern_and_bare_mentions() {
        let html = r#"<title>Walking tour</title>
            <meta property="og:description" content="A day in Cambridge, Massachusetts, United States.">
            <figcaption>Photo taken near Lisbon, Portugal</figcaption>
            <h2>More from Japan</h2>"#;
        assert_eq!(
            labels(html),
            ["Cambridge, Massachusetts, United States", "Lisbon, Portugal", "Japan"]
        );
    }

    #[test]
    fn lowercase_and_pattern_only_names_ignored() {
        assert!(labels("<h1>chad and jordan went to georgia</h1>").is_empty());
        assert!(labels("<h1>Chad likes hiking</h1>").is_empty());
        assert_eq!(labels("<h1>Tbilisi, Georgia</h1>"), ["Tbilisi, Georgia"]);
    }

    #[test]
    fn coordinates() {
        assert_eq!(
            page_coordinates(r#"<meta name="geo.position" content="50.087; 14.421">"#),
            Some((50.087, 14.421))
        );
        assert_eq!(page_coordinates(r#"<meta name="geo.position" content="north">"#), None);
    }

    #[test]
    fn gazetteer_aliases() {
        let g = Gazetteer::builtin();
        assert_eq!(g.canonical("Czechia"), Some("Czech Republic"));
        assert_eq!(g.canonical("czechia"), None);
        assert_eq!(g.country_key("USA"), "united states");
    }
}
