//! Per-level matching of a predicted place against ground truth.

use serde::{Deserialize, Serialize};

use crate::model::{canonical_key, normalize_place, GeoLabel};
use crate::providers::{Purpose, VisionModel, VisionRequest};

/// The three administrative levels, coarsest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeoLevel {
    Country,
    Region,
    City,
}

impl GeoLevel {
    pub const ALL: [GeoLevel; 3] = [GeoLevel::Country, GeoLevel::Region, GeoLevel::City];

    pub fn as_str(self) -> &'static str {
        match self {
            GeoLevel::Country => "country",
            GeoLevel::Region => "region",
            GeoLevel::City => "city",
        }
    }

    fn noun(self) -> &'static str {
        match self {
            GeoLevel::Country => "country",
            GeoLevel::Region => "state, province or region",
            GeoLevel::City => "city",
        }
    }

    fn of(self, label: &GeoLabel) -> Option<&str> {
        match self {
            GeoLevel::Country => label.country(),
            GeoLevel::Region => label.region(),
            GeoLevel::City => label.city(),
        }
    }
}

/// How a level's outcome was decided.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchTier {
    /// Same name after case and whitespace folding.
    Exact,
    /// Same name once administrative suffixes ("City", "Province", ...) are dropped.
    Suffix,
    /// The judge model called the two names the same place.
    Judge,
    /// No rule and no judge found the names equal.
    Different,
    /// The prediction or the truth lacks this level.
    Absent,
}

impl MatchTier {
    pub fn matched(self) -> bool {
        matches!(self, MatchTier::Exact | MatchTier::Suffix | MatchTier::Judge)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct JudgeOptions {
    /// Ask the judge even when a deterministic rule already matched.
    pub judge_always: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub tiers: [MatchTier; 3],
    /// Set when a judge call failed and the level fell back to the rules.
    pub warning: Option<String>,
}

impl Judgment {
    pub fn matches(&self) -> [bool; 3] {
        self.tiers.map(MatchTier::matched)
    }

    fn unknown() -> Self {
        Judgment {
            tiers: [MatchTier::Absent; 3],
            warning: None,
        }
    }
}

/// Prompt for one same-place question.
pub fn judge_prompt(level: GeoLevel, predicted: &str, truth: &str, truth_label: &GeoLabel) -> String {
    format!(
        "You are grading a geolocation answer at the {noun} level. The true location is \
         \"{full}\". Does the predicted {noun} \"{predicted}\" name the same {noun} as \
         \"{truth}\"? Treat translations, transliterations, abbreviations and official versus \
         common names as the same place. Reply with exactly one word: yes or no.",
        noun = level.noun(),
        full = truth_label.display_name(),
    )
}

fn parse_yes_no(reply: &str) -> Option<bool> {
    let word: String = reply
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" | "true" | "same" => Some(true),
        "no" | "false" | "different" => Some(false),
        _ => None,
    }
}

fn deterministic(pred: &str, truth: &str) -> MatchTier {
    if canonical_key(pred) == canonical_key(truth) {
        MatchTier::Exact
    } else if normalize_place(pred) == normalize_place(truth) {
        MatchTier::Suffix
    } else {
        MatchTier::Different
    }
}

/// Compares `pred` with `truth` at each level. Rules run first; a judge,
/// when given, settles levels the rules could not match (or every present
/// level under `judge_always`). A failed or unreadable judge reply leaves
/// the rule outcome in place and sets [`Judgment::warning`].
pub fn judge_match(
    pred: Option<&GeoLabel>,
    truth: &GeoLabel,
    judge: Option<&dyn VisionModel>,
    opts: JudgeOptions,
) -> Judgment {
    let Some(pred) = pred else {
        return Judgment::unknown();
    };
    let mut tiers = [MatchTier::Absent; 3];
    let mut warnings = Vec::new();
    for (slot, level) in tiers.iter_mut().zip(GeoLevel::ALL) {
        let (Some(p), Some(t)) = (level.of(pred), level.of(truth)) else {
            continue;
        };
        let rule = deterministic(p, t);
        *slot = rule;
        let Some(judge) = judge else { continue };
        if rule.matched() && !opts.judge_always {
            continue;
        }
        let req = VisionRequest::new(Purpose::Judge, vec![], judge_prompt(level, p, t, truth));
        match judge.chat_vision(&req) {
            Ok(reply) => match parse_yes_no(&reply) {
                Some(true) if !rule.matched() => *slot = MatchTier::Judge,
                Some(true) => {}
                Some(false) => *slot = MatchTier::Different,
                None => warnings.push(format!("{}: unreadable judge reply {reply:?}", level.as_str())),
            },
            Err(e) => warnings.push(format!("{}: judge unavailable ({e})", level.as_str())),
        }
    }
    Judgment {
        tiers,
        warning: (!warnings.is_empty()).then(|| warnings.join("; ")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::mock::{MockFixtures, MockVision};

    fn ny() -> GeoLabel {
        GeoLabel::place(Some("New York"), Some("New York"), "United States")
    }

    #[test]
    fn new_york_city_is_new_york() {
        let pred = GeoLabel::place(Some("New York City"), Some("New York State"), "united states");
        let j = judge_match(Some(&pred), &ny(), None, JudgeOptions::default());
        assert_eq!(j.tiers, [MatchTier::Exact, MatchTier::Suffix, MatchTier::Suffix]);
        assert_eq!(j.matches(), [true, true, true]);
    }

    #[test]
    fn unknown_matches_nothing() {
        let j = judge_match(None, &ny(), None, JudgeOptions::default());
        assert_eq!(j.matches(), [false; 3]);
    }

    #[test]
    fn missing_levels_do_not_match() {
        let pred = GeoLabel::country_only("United States");
        let j = judge_match(Some(&pred), &ny(), None, JudgeOptions::default());
        assert_eq!(j.tiers, [MatchTier::Exact, MatchTier::Absent, MatchTier::Absent]);
    }

    #[test]
    fn judge_settles_other_languages() {
        let vision = MockVision::new(MockFixtures::default().with_vision("*|judge", ["Yes."]).vision);
        let truth = GeoLabel::place(Some("Munich"), Some("Bavaria"), "Germany");
        let pred = GeoLabel::place(Some("München"), Some("Bavaria"), "Germany");
        let j = judge_match(Some(&pred), &truth, Some(&vision), JudgeOptions::default());
        assert_eq!(j.tiers, [MatchTier::Exact, MatchTier::Exact, MatchTier::Judge]);
        assert_eq!(vision.calls_for(Purpose::Judge), 1);
        assert!(j.warning.is_none());
    }

    #[test]
    fn judge_failure_degrades_to_rules() {
        let vision = MockVision::new(MockFixtures::default().vision);
        let truth = GeoLabel::place(Some("Munich"), None, "Germany");
        let pred = GeoLabel::place(Some("München"), None, "Germany");
        let j = judge_match(Some(&pred), &truth, Some(&vision), JudgeOptions::default());
        assert_eq!(j.matches(), [true, false, false]);
        assert!(j.warning.unwrap().starts_with("city"));
    }

    #[test]
    fn judge_always_can_overrule() {
        let vision = MockVision::new(MockFixtures::default().with_vision("*|judge", ["no"]).vision);
        let truth = GeoLabel::place(Some("Kansas City"), Some("Missouri"), "United States");
        let pred = GeoLabel::place(Some("Kansas City"), Some("Kansas"), "United States");
        let opts = JudgeOptions { judge_always: true };
        let j = judge_match(Some(&pred), &truth, Some(&vision), opts);
        assert_eq!(j.matches(), [false; 3]);
        assert_eq!(vision.calls_for(Purpose::Judge), 3);
    }

    #[test]
    fn levels_are_compared_separately() {
        let truth = GeoLabel::place(Some("Overland Park"), Some("Kansas"), "United States");
        let pred = GeoLabel::place(Some("Kansas City"), Some("Missouri"), "United States");
        let j = judge_match(Some(&pred), &truth, None, JudgeOptions::default());
        assert_eq!(j.tiers, [MatchTier::Exact, MatchTier::Different, MatchTier::Different]);
    }

    #[test]
    fn yes_no_parsing() {
        assert_eq!(parse_yes_no("**Yes**, same city"), Some(true));
        assert_eq!(parse_yes_no("no"), Some(false));
        assert_eq!(parse_yes_no("maybe"), None);
    }
}
