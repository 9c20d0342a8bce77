//! Consensus over clue-enriched candidates.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{Gazetteer, SceneVerdict, SearchCandidate};
use crate::model::{canonical_key, EvidenceItem, EvidenceSource, GeoLabel};

/// Two-label public suffixes under which registrations happen one level
/// deeper.
const SECOND_LEVEL_SUFFIXES: &[&str] = &[
    "co.uk", "org.uk", "ac.uk", "gov.uk", "me.uk", "com.au", "net.au", "org.au", "edu.au", "co.jp", "ne.jp", "or.jp",
    "ac.jp", "co.nz", "org.nz", "com.br", "com.cn", "com.tw", "com.hk", "co.in", "co.kr", "co.za", "com.mx", "com.ar",
    "com.tr", "com.sg", "co.il", "com.ua", "co.id", "com.my", "com.ph", "com.vn",
];

/// The registrable part of a URL's host ("news.bbc.co.uk" → "bbc.co.uk").
/// Unparseable URLs stand for themselves.
pub fn registrable_domain(raw: &str) -> String {
    let Some(host) = url::Url::parse(raw)
        .ok()
        .and_then(|u| u.host_str().map(str::to_ascii_lowercase))
    else {
        return raw.trim().to_ascii_lowercase();
    };
    let host = host.trim_end_matches('.');
    if host.parse::<std::net::IpAddr>().is_ok() || host.starts_with('[') {
        return host.to_string();
    }
    let labels: Vec<&str> = host.split('.').collect();
    let n = labels.len();
    let keep = if n >= 3 && SECOND_LEVEL_SUFFIXES.contains(&labels[n - 2..].join(".").as_str()) {
        3
    } else {
        2
    };
    labels[n.saturating_sub(keep)..].join(".")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub query_image_id: String,
    pub candidates: Vec<SearchCandidate>,
    pub consensus: Option<GeoLabel>,
    /// Independent sources (distinct domains) behind the consensus.
    pub support: usize,
    pub notes: String,
}

impl AnalysisReport {
    /// The consensus as reverse-search evidence.
    pub fn evidence(&self) -> Option<EvidenceItem> {
        let label = self.consensus.clone()?;
        EvidenceItem::new(
            EvidenceSource::ReverseSearch,
            vec![label],
            true,
            format!(
                "reverse image search consensus from {} independent source(s)",
                self.support
            ),
        )
        .ok()
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("### Reverse image search for `{}`\n\n", self.query_image_id);
        if self.candidates.is_empty() {
            out.push_str("No search result passed the similarity filter.\n\n");
        } else {
            out.push_str("| # | Similarity | Source | Places | Scene |\n|---|---|---|---|---|\n");
            for (i, c) in self.candidates.iter().enumerate() {
                let places = c
                    .page_clues
                    .iter()
                    .flat_map(|e| e.places())
                    .map(GeoLabel::display_name)
                    .collect::<Vec<_>>()
                    .join("; ");
                let scene = c.scene_match.map_or("-", SceneVerdict::as_str);
                out.push_str(&format!(
                    "| {} | {:.3} | {} | {} | {} |\n",
                    i + 1,
                    c.similarity,
                    c.hit.source_url.replace('|', "%7C"),
                    if places.is_empty() {
                        "-".to_string()
                    } else {
                        places.replace('|', "/")
                    },
                    scene
                ));
            }
            out.push('\n');
        }
        let consensus = self
            .consensus
            .as_ref()
            .map_or("none".to_string(), GeoLabel::display_name);
        out.push_str(&format!("**Consensus:** {consensus}\n\n{}\n", self.notes));
        out
    }
}

#[derive(Default)]
struct Group {
    domains: BTreeSet<String>,
    /// Most specific label each supporting candidate gave, by candidate index.
    labels: BTreeMap<usize, GeoLabel>,
    scene_matched: bool,
    country: Option<String>,
}

fn group_key(label: &GeoLabel, gaz: &Gazetteer) -> String {
    match (label.country(), label.city(), label.region()) {
        (Some(c), _, _) => format!("country:{}", gaz.country_key(c)),
        (None, Some(city), _) => format!("city:{}", canonical_key(city)),
        (None, None, Some(r)) => format!("region:{}", canonical_key(r)),
        (None, None, None) => String::new(),
    }
}

/// Picks the place named by the most independent candidates. A single
/// source suffices only when its scene was judged a match; a tie for the
/// lead yields no consensus. Candidates whose scene was judged a mismatch
/// do not count as support.
pub fn build_report(image_id: &str, candidates: Vec<SearchCandidate>) -> AnalysisReport {
    let gaz = Gazetteer::builtin();
    let mut groups: BTreeMap<String, Group> = BTreeMap::new();
    let mut mismatched = Vec::new();

    let explicit: Vec<(usize, Vec<GeoLabel>)> = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let keep = c.scene_match != Some(SceneVerdict::Mismatch);
            if !keep && c.has_explicit_place() {
                mismatched.push(c.hit.source_url.clone());
            }
            keep
        })
        .map(|(i, c)| {
            let labels = c
                .page_clues
                .iter()
                .filter(|e| e.explicit_place_name)
                .flat_map(|e| e.places().iter().cloned())
                .collect();
            (i, labels)
        })
        .collect();

    // Country-anchored labels first so partial mentions can join them.
    let mut city_home: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (_, labels) in &explicit {
        for l in labels.iter().filter(|l| l.country().is_some()) {
            if let Some(city) = l.city() {
                city_home
                    .entry(canonical_key(city))
                    .or_default()
                    .insert(group_key(l, gaz));
            }
        }
    }
    for (i, labels) in &explicit {
        let c = &candidates[*i];
        for l in labels {
            let mut key = group_key(l, gaz);
            if l.country().is_none() {
                if let Some(homes) = l.city().and_then(|city| city_home.get(&canonical_key(city))) {
                    if homes.len() == 1 {
                        key = homes.iter().next().unwrap().clone();
                    }
                }
            }
            if key.is_empty() {
                continue;
            }
            let g = groups.entry(key).or_default();
            g.domains.insert(registrable_domain(&c.hit.source_url));
            g.scene_matched |= c.scene_match == Some(SceneVerdict::Match);
            if let Some(country) = l.country() {
                g.country
                    .get_or_insert_with(|| gaz.canonical(country).unwrap_or(country).to_string());
            }
            let slot = g.labels.entry(*i).or_insert_with(|| l.clone());
            if l.specificity() > slot.specificity() {
                *slot = l.clone();
            }
        }
    }

    let mut ranked: Vec<(&String, &Group)> = groups.iter().collect();
    ranked.sort_by(|a, b| b.1.domains.len().cmp(&a.1.domains.len()).then(a.0.cmp(b.0)));

    let describe = |g: &Group| -> String {
        let mut name = g.labels.values().next().cloned().unwrap_or_default();
        for l in g.labels.values().skip(1) {
            name = name.common_with(l);
        }
        if let Some(country) = &g.country {
            name = name.merged_with(&GeoLabel::country_only(country));
        }
        name.display_name()
    };

    let mut notes = vec![format!(
        "{} candidate(s) passed the similarity filter; {} carry explicit place names.",
        candidates.len(),
        candidates.iter().filter(|c| c.has_explicit_place()).count()
    )];
    for (_, g) in &ranked {
        notes.push(format!(
            "{} is named by {} independent source(s): {}.",
            describe(g),
            g.domains.len(),
            g.domains.iter().cloned().collect::<Vec<_>>().join(", ")
        ));
    }
    if !mismatched.is_empty() {
        notes.push(format!("Ignored as scene mismatches: {}.", mismatched.join(", ")));
    }
    for c in candidates.iter().filter(|c| !c.distinctive_elements.is_empty()) {
        notes.push(format!(
            "Distinctive elements noted against {}: {}.",
            c.hit.source_url,
            c.distinctive_elements.join(", ")
        ));
    }

    let (consensus, support) = match ranked.as_slice() {
        [] => {
            notes.push("No consensus: no page names a place.".into());
            (None, 0)
        }
        [(_, a), (_, b), ..] if a.domains.len() == b.domains.len() => {
            notes.push(format!(
                "No consensus: {} and {} are equally supported.",
                describe(a),
                describe(b)
            ));
            (None, 0)
        }
        [(_, top), ..] if top.domains.len() >= 2 || top.scene_matched => {
            let mut label = top.labels.values().next().cloned().unwrap_or_default();
            for l in top.labels.values().skip(1) {
                label = label.common_with(l);
            }
            if let Some(country) = &top.country {
                label = label.merged_with(&GeoLabel::country_only(country));
            }
            (Some(label), top.domains.len())
        }
        [(_, top), ..] => {
            notes.push(format!(
                "No consensus: only one source names {} and its scene was not confirmed.",
                describe(top)
            ));
            (None, 0)
        }
    };

    AnalysisReport {
        query_image_id: image_id.to_string(),
        candidates,
        consensus,
        support,
        notes: notes.join("\n"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::mock::fixture_thumbnail;
    use crate::providers::SearchHit;

    fn cand(url: &str, labels: &[GeoLabel], scene: Option<SceneVerdict>) -> SearchCandidate {
        let mut c = SearchCandidate::new(
            SearchHit {
                thumbnail: fixture_thumbnail(url),
                source_url: url.to_string(),
                page_title: String::new(),
                rank: 1,
            },
            0.9,
        );
        c.page_clues = labels
            .iter()
            .map(|l| EvidenceItem::new(EvidenceSource::WebpageMetadata, vec![l.clone()], true, "t").unwrap())
            .collect();
        c.scene_match = scene;
        c
    }

    fn prague() -> GeoLabel {
        GeoLabel::place(Some("Prague"), None, "Czech Republic")
    }

    #[test]
    fn unanimous_three() {
        let r = build_report(
            "q",
            vec![
                cand("https://a.com/1", &[prague()], None),
                cand("https://b.org/2", &[prague()], None),
                cand("https://c.net/3", &[prague()], None),
            ],
        );
        assert_eq!(r.consensus, Some(prague()));
        assert_eq!(r.support, 3);
        assert!(r.evidence().is_some());
    }

    #[test]
    fn single_scene_match() {
        let r = build_report(
            "q",
            vec![cand("https://a.com/", &[prague()], Some(SceneVerdict::Match))],
        );
        assert_eq!(r.consensus, Some(prague()));
        let r = build_report(
            "q",
            vec![cand("https://a.com/", &[prague()], Some(SceneVerdict::Uncertain))],
        );
        assert_eq!(r.consensus, None);
    }

    #[test]
    fn tie_gives_none() {
        let vienna = GeoLabel::place(Some("Vienna"), None, "Austria");
        let r = build_report(
            "q",
            vec![
                cand("https://a.com/", &[prague()], None),
                cand("https://b.com/", &[vienna], None),
            ],
        );
        assert_eq!(r.consensus, None);
        assert!(r.notes.contains("equally supported"));
    }

    #[test]
    fn same_domain_counts_once() {
        let r = build_report(
            "q",
            vec![
                cand("https://www.a.com/1", &[prague()], None),
                cand("https://img.a.com/2", &[prague()], None),
            ],
        );
        assert_eq!(r.consensus, None);
    }

    #[test]
    fn finest_shared_level_and_aliases() {
        let r = build_report(
            "q",
            vec![
                cand("https://a.com/", &[prague()], None),
                cand(
                    "https://b.com/",
                    &[GeoLabel::place(Some("Brno"), None, "Czechia")],
                    None,
                ),
            ],
        );
        assert_eq!(r.consensus, Some(GeoLabel::country_only("Czech Republic")));
    }

    #[test]
    fn partial_city_joins_country_group() {
        let kyoto = GeoLabel::partial(None, None, Some("Kyoto".into()));
        let r = build_report(
            "q",
            vec![
                cand("https://a.com/", &[GeoLabel::place(Some("Kyoto"), None, "Japan")], None),
                cand("https://b.com/", &[kyoto], None),
            ],
        );
        assert_eq!(r.consensus, Some(GeoLabel::place(Some("Kyoto"), None, "Japan")));
    }

    #[test]
    fn mismatch_does_not_support() {
        let r = build_report(
            "q",
            vec![
                cand("https://a.com/", &[prague()], None),
                cand("https://b.com/", &[prague()], Some(SceneVerdict::Mismatch)),
            ],
        );
        assert_eq!(r.consensus, None);
    }

    #[test]
    fn deterministic() {
        let make = || {
            vec![
                cand("https://a.com/", &[prague()], None),
                cand("https://b.com/", &[GeoLabel::country_only("Austria")], None),
                cand("https://c.com/", &[prague()], None),
            ]
        };
        let a = build_report("q", make());
        let b = build_report("q", make());
        assert_eq!(a, b);
        assert!(a.to_markdown().contains("**Consensus:** Prague, Czech Republic"));
    }

    #[test]
    fn domains() {
        assert_eq!(registrable_domain("https://news.bbc.co.uk/x"), "bbc.co.uk");
        assert_eq!(registrable_domain("https://www.flickr.com/p"), "flickr.com");
        assert_eq!(registrable_domain("http://127.0.0.1:8080/"), "127.0.0.1");
        assert_eq!(registrable_domain("not a url"), "not a url");
    }
}
