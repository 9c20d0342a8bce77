//! Evidence merging, conflict resolution and self-evaluation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::imaging::ImageHandle;
use crate::model::{canonical_key, EvidenceItem, GeoLabel, Prediction};
use crate::providers::{request_structured, Purpose, VisionModel, VisionRequest};
use crate::reverse_search::Gazetteer;

pub const CONSISTENCY_SCHEMA_NAME: &str = "consistency_choice";
pub const CONSISTENCY_MAX_ATTEMPTS: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeficiencyReason {
    UnknownLabel,
    IncompleteLevels,
    WeakReasoning,
}

impl DeficiencyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DeficiencyReason::UnknownLabel => "unknown_label",
            DeficiencyReason::IncompleteLevels => "incomplete_levels",
            DeficiencyReason::WeakReasoning => "weak_reasoning",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict", content = "reason")]
pub enum Verdict {
    Accept,
    Deficient(DeficiencyReason),
}

/// Accepts a prediction naming at least a country and a region, with a
/// non-empty explanation and at least one supporting evidence item.
pub fn self_evaluate(pred: &Prediction) -> Verdict {
    let Some(label) = pred.label.as_ref().filter(|l| !l.is_empty()) else {
        return Verdict::Deficient(DeficiencyReason::UnknownLabel);
    };
    if label.country().is_none() || label.region().is_none() {
        return Verdict::Deficient(DeficiencyReason::IncompleteLevels);
    }
    let gaz = Gazetteer::builtin();
    let label = gaz.canonical_label(label);
    let supported = pred
        .evidence
        .iter()
        .any(|e| e.places().iter().any(|p| gaz.canonical_label(p).is_compatible(&label)));
    if pred.explanation.trim().is_empty() || !supported {
        return Verdict::Deficient(DeficiencyReason::WeakReasoning);
    }
    Verdict::Accept
}

/// How the label was chosen, for logs and tests.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SynthesisTrace {
    pub agreement: bool,
    pub tiebreak_called: bool,
    pub tiebreak_error: Option<String>,
    /// Candidates as (label, explicit, supporting items), best first.
    pub ranking: Vec<(String, bool, usize)>,
}

struct Candidate {
    key: String,
    label: GeoLabel,
    explicit: bool,
    items: BTreeSet<usize>,
}

fn group_key(label: &GeoLabel) -> Option<String> {
    match (label.country(), label.city(), label.region()) {
        (Some(c), _, _) => Some(format!("country:{}", canonical_key(c))),
        (None, Some(c), _) => Some(format!("city:{}", canonical_key(c))),
        (None, None, Some(r)) => Some(format!("region:{}", canonical_key(r))),
        _ => None,
    }
}

/// Chooses the value named by the most evidence items at one level. A tie
/// leaves the level empty. Among spellings of the winning value the
/// smallest string is kept so the result never depends on input order.
fn vote<'a>(entries: impl Iterator<Item = (usize, &'a str)>) -> Option<String> {
    let mut tally: BTreeMap<String, (BTreeSet<usize>, String)> = BTreeMap::new();
    for (item, value) in entries {
        let slot = tally
            .entry(canonical_key(value))
            .or_insert_with(|| (BTreeSet::new(), value.to_string()));
        slot.0.insert(item);
        if value < slot.1.as_str() {
            slot.1 = value.to_string();
        }
    }
    let best = tally.values().map(|(items, _)| items.len()).max()?;
    let mut winners = tally.values().filter(|(items, _)| items.len() == best);
    let first = winners.next()?;
    winners.next().is_none().then(|| first.1.clone())
}

/// One label per group: country, then the region most items name, then
/// the city most items name among those consistent with that region.
fn group_label(members: &[(usize, GeoLabel)]) -> GeoLabel {
    let country = vote(members.iter().filter_map(|(i, l)| l.country().map(|c| (*i, c))));
    let region = vote(members.iter().filter_map(|(i, l)| l.region().map(|r| (*i, r))));
    let region_key = region.as_deref().map(canonical_key);
    let city = vote(members.iter().filter_map(|(i, l)| {
        let fits = match (&region_key, l.region()) {
            (Some(k), Some(r)) => canonical_key(r) == *k,
            _ => true,
        };
        l.city().filter(|_| fits).map(|c| (*i, c))
    }));
    GeoLabel::partial(country, region, city)
}

fn candidates(evidence: &[EvidenceItem]) -> Vec<Candidate> {
    let gaz = Gazetteer::builtin();
    let labelled: Vec<(usize, GeoLabel)> = evidence
        .iter()
        .enumerate()
        .flat_map(|(i, e)| e.places().iter().map(move |p| (i, gaz.canonical_label(p))))
        .collect();

    let mut city_home: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (_, l) in &labelled {
        if let (Some(city), Some(key)) = (l.city(), group_key(l)) {
            if l.country().is_some() {
                city_home.entry(canonical_key(city)).or_default().insert(key);
            }
        }
    }
    let mut groups: BTreeMap<String, Vec<(usize, GeoLabel)>> = BTreeMap::new();
    for (i, l) in labelled {
        let Some(mut key) = group_key(&l) else { continue };
        if l.country().is_none() {
            if let Some(homes) = l.city().and_then(|c| city_home.get(&canonical_key(c))) {
                if homes.len() == 1 {
                    key = homes.iter().next().unwrap().clone();
                }
            }
        }
        groups.entry(key).or_default().push((i, l));
    }
    groups
        .into_iter()
        .map(|(key, members)| {
            let items: BTreeSet<usize> = members.iter().map(|(i, _)| *i).collect();
            Candidate {
                label: group_label(&members),
                explicit: items.iter().any(|&i| evidence[i].explicit_place_name),
                items,
                key,
            }
        })
        .collect()
}

#[derive(Deserialize)]
struct Choice {
    choice: usize,
}

fn consistency_vote(image: &ImageHandle, options: &[&Candidate], vision: &dyn VisionModel) -> Result<usize, String> {
    let listing = options
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {}", i + 1, c.label.display_name()))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = format!(
        "Several candidate locations are equally supported for this photo. Judging only by \
         what is visible (signage, vegetation, architecture, road furniture), which one is most \
         consistent with the image? Reply with JSON {{\"choice\": <number>}}.\n{listing}"
    );
    let req = VisionRequest::new(Purpose::Consistency, vec![image.clone()], prompt).structured(CONSISTENCY_SCHEMA_NAME);
    let (reply, _) = request_structured::<Choice>(vision, &req, CONSISTENCY_MAX_ATTEMPTS).map_err(|e| e.to_string())?;
    if reply.choice == 0 || reply.choice > options.len() {
        return Err(format!(
            "choice {} is not one of the {} options",
            reply.choice,
            options.len()
        ));
    }
    Ok(reply.choice - 1)
}

fn explain(label: &GeoLabel, evidence: &[EvidenceItem], support: &BTreeSet<usize>, extra: &[String]) -> String {
    let mut lines = vec![format!("Predicted location: {}.", label.display_name())];
    lines.push("Supporting evidence:".into());
    for &i in support {
        let e = &evidence[i];
        let places = e
            .places()
            .iter()
            .map(GeoLabel::display_name)
            .collect::<Vec<_>>()
            .join("; ");
        let kind = if e.explicit_place_name {
            "explicit place name"
        } else {
            "inferred"
        };
        let note = e.note.trim();
        if note.is_empty() {
            lines.push(format!("- {} ({kind}): {places}", e.source.as_str()));
        } else {
            lines.push(format!("- {} ({kind}): {places}. {note}", e.source.as_str()));
        }
    }
    lines.extend(extra.iter().cloned());
    lines.join("\n")
}

/// Merges evidence into one prediction. When every place named is
/// compatible with every other, their combination is the answer.
/// Otherwise candidates rank by explicit place names, then by the number
/// of supporting items; only a tie on both asks the vision model which
/// candidate fits the image. The returned trace is empty.
pub fn synthesize(
    evidence: &[EvidenceItem],
    image: &ImageHandle,
    vision: &dyn VisionModel,
) -> (Prediction, SynthesisTrace) {
    let mut trace = SynthesisTrace::default();
    let mut cands = candidates(evidence);
    if cands.is_empty() {
        let mut p = Prediction::unknown("No tool produced location evidence.");
        p.evidence = evidence.to_vec();
        return (p, trace);
    }
    cands.sort_by(|a, b| {
        b.explicit
            .cmp(&a.explicit)
            .then(b.items.len().cmp(&a.items.len()))
            .then(a.key.cmp(&b.key))
    });
    trace.ranking = cands
        .iter()
        .map(|c| (c.label.display_name(), c.explicit, c.items.len()))
        .collect();

    let gaz = Gazetteer::builtin();
    let all: Vec<GeoLabel> = evidence
        .iter()
        .flat_map(|e| e.places().iter().map(|p| gaz.canonical_label(p)))
        .collect();
    let agree = all.iter().all(|a| all.iter().all(|b| a.is_compatible(b)));
    let mut extra = Vec::new();

    let winner = if agree && cands.len() == 1 {
        trace.agreement = true;
        0
    } else {
        let top = (cands[0].explicit, cands[0].items.len());
        let tied: Vec<usize> = (0..cands.len())
            .filter(|&i| (cands[i].explicit, cands[i].items.len()) == top)
            .collect();
        let chosen = if tied.len() > 1 {
            trace.tiebreak_called = true;
            let options: Vec<&Candidate> = tied.iter().map(|&i| &cands[i]).collect();
            match consistency_vote(image, &options, vision) {
                Ok(i) => {
                    extra.push(format!(
                        "Equally supported candidates were resolved by visual consistency in favour of {}.",
                        cands[tied[i]].label.display_name()
                    ));
                    tied[i]
                }
                Err(e) => {
                    log::warn!("consistency tiebreak failed: {e}");
                    trace.tiebreak_error = Some(e);
                    tied[0]
                }
            }
        } else {
            0
        };
        let others: Vec<String> = cands
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != chosen)
            .map(|(_, c)| {
                format!(
                    "{} ({} item(s){})",
                    c.label.display_name(),
                    c.items.len(),
                    if c.explicit { ", explicit" } else { "" }
                )
            })
            .collect();
        if !others.is_empty() {
            extra.push(format!("Set aside conflicting candidates: {}.", others.join("; ")));
        }
        chosen
    };

    let c = &cands[winner];
    let explanation = explain(&c.label, evidence, &c.items, &extra);
    let prediction = Prediction {
        label: Some(c.label.clone()),
        explanation,
        evidence: evidence.to_vec(),
        strategy_trace: Vec::new(),
    };
    (prediction, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EvidenceSource;
    use crate::providers::mock::{MockFixtures, MockVision};

    fn item(label: GeoLabel, explicit: bool) -> EvidenceItem {
        let source = if explicit {
            EvidenceSource::ReverseSearch
        } else {
            EvidenceSource::DirectLvlm
        };
        EvidenceItem::new(source, vec![label], explicit, "n").unwrap()
    }

    fn img() -> ImageHandle {
        ImageHandle::solid("img", 2, 2, [0, 0, 0, 255])
    }

    fn no_vision() -> MockVision {
        MockVision::new(Default::default())
    }

    #[test]
    fn explicit_beats_count() {
        let prague = GeoLabel::place(Some("Prague"), None, "Czech Republic");
        let vienna = GeoLabel::place(Some("Vienna"), None, "Austria");
        let mut ev = vec![item(prague.clone(), true), item(prague.clone(), true)];
        ev.extend((0..3).map(|_| item(vienna.clone(), false)));
        let v = no_vision();
        let (p, t) = synthesize(&ev, &img(), &v);
        assert_eq!(p.label, Some(prague));
        assert!(!t.tiebreak_called);
        assert_eq!(v.total_calls(), 0);
    }

    #[test]
    fn agreement_needs_no_call() {
        let ev = vec![
            item(GeoLabel::place(Some("Lisbon"), None, "Portugal"), false),
            item(GeoLabel::country_only("Portugal"), false),
            item(
                GeoLabel::place(Some("Lisbon"), Some("Lisbon District"), "Portugal"),
                true,
            ),
        ];
        let v = no_vision();
        let (p, t) = synthesize(&ev, &img(), &v);
        assert!(t.agreement);
        assert_eq!(
            p.label,
            Some(GeoLabel::place(Some("Lisbon"), Some("Lisbon District"), "Portugal"))
        );
        assert_eq!(v.total_calls(), 0);
    }

    #[test]
    fn empty_is_unknown() {
        let (p, _) = synthesize(&[], &img(), &no_vision());
        assert!(p.is_unknown());
    }

    #[test]
    fn tie_asks_once_and_falls_back_on_failure() {
        let ev = vec![
            item(GeoLabel::country_only("Austria"), false),
            item(GeoLabel::country_only("Germany"), false),
        ];
        let fx = MockFixtures::default().with_vision_json("img|consistency", serde_json::json!({"choice": 2}));
        let v = MockVision::new(fx.vision);
        let (p, t) = synthesize(&ev, &img(), &v);
        assert!(t.tiebreak_called);
        assert_eq!(p.label, Some(GeoLabel::country_only("Germany")));
        assert_eq!(v.total_calls(), 1);

        let (p, t) = synthesize(&ev, &img(), &no_vision());
        assert!(t.tiebreak_error.is_some());
        assert_eq!(p.label, Some(GeoLabel::country_only("Austria")));
    }

    #[test]
    fn alias_countries_merge() {
        let ev = vec![
            item(GeoLabel::place(Some("Brno"), None, "Czechia"), false),
            item(GeoLabel::country_only("Czech Republic"), false),
        ];
        let (p, _) = synthesize(&ev, &img(), &no_vision());
        assert_eq!(p.label, Some(GeoLabel::place(Some("Brno"), None, "Czech Republic")));
    }

    #[test]
    fn evaluation_rules() {
        let full = GeoLabel::place(Some("Cambridge"), Some("Massachusetts"), "United States");
        let p = Prediction {
            label: Some(full.clone()),
            explanation: "brick and signage".into(),
            evidence: vec![item(full.clone(), false), item(full.clone(), true)],
            strategy_trace: vec![],
        };
        assert_eq!(self_evaluate(&p), Verdict::Accept);
        let mut q = p.clone();
        q.label = Some(GeoLabel::country_only("United States"));
        assert_eq!(
            self_evaluate(&q),
            Verdict::Deficient(DeficiencyReason::IncompleteLevels)
        );
        assert_eq!(
            self_evaluate(&Prediction::unknown("x")),
            Verdict::Deficient(DeficiencyReason::UnknownLabel)
        );
        let mut r = p.clone();
        r.evidence.clear();
        assert_eq!(self_evaluate(&r), Verdict::Deficient(DeficiencyReason::WeakReasoning));
        let mut s = p;
        s.explanation = " ".into();
        assert_eq!(self_evaluate(&s), Verdict::Deficient(DeficiencyReason::WeakReasoning));
    }
}
