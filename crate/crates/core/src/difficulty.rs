//! Visual difficulty assessment: the vision model reports which location
//! cues are visible, and a fixed weighting turns those cues into a score
//! in `[1, 100]` and a difficulty band.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::imaging::ImageHandle;
use crate::providers::{request_structured, Purpose, StructuredError, VisionModel, VisionRequest};

/// Cue-extraction prompt sent alongside the image.
pub const CUE_PROMPT: &str = include_str!("../assets/cue_prompt.txt");
/// JSON schema the cue-extraction reply must follow.
pub const CUE_SCHEMA: &str = include_str!("../assets/cue_observation.schema.json");
pub const CUE_SCHEMA_NAME: &str = "cue_observation";
pub const CUE_MAX_ATTEMPTS: u32 = 2;

pub const BASE_SCORE: i32 = 50;

macro_rules! cue_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

cue_enum!(
    /// Ordered from least to most text.
    TextVisibility { None => "none", Minimal => "minimal", Some => "some", Abundant => "abundant" }
);
cue_enum!(
    /// Ordered from worst to best.
    ImageQuality { Poor => "poor", Fair => "fair", Good => "good", Excellent => "excellent" }
);
cue_enum!(
    /// Ordered from fewest to most clues.
    ContextualClues { None => "none", Few => "few", Some => "some", Many => "many" }
);
cue_enum!(SceneType { Urban => "urban", Rural => "rural", Indoor => "indoor", Other => "other" });

/// What the vision model saw. Every field is required when parsing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CueObservation {
    pub landmarks_present: bool,
    pub text_visibility: TextVisibility,
    pub architecture_distinctive: bool,
    pub geographic_features_unique: bool,
    pub image_quality: ImageQuality,
    pub contextual_clues: ContextualClues,
    pub scene_type: SceneType,
}

impl CueObservation {
    /// Every possible observation, in a fixed order.
    pub fn enumerate_all() -> Vec<CueObservation> {
        let bools = [false, true];
        let mut out = Vec::new();
        for &landmarks_present in &bools {
            for &text_visibility in TextVisibility::ALL {
                for &architecture_distinctive in &bools {
                    for &geographic_features_unique in &bools {
                        for &image_quality in ImageQuality::ALL {
                            for &contextual_clues in ContextualClues::ALL {
                                for &scene_type in SceneType::ALL {
                                    out.push(CueObservation {
                                        landmarks_present,
                                        text_visibility,
                                        architecture_distinctive,
                                        geographic_features_unique,
                                        image_quality,
                                        contextual_clues,
                                        scene_type,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Number of content-bearing cues that count toward the bonus.
    pub fn positive_indicators(&self) -> usize {
        [
            self.landmarks_present,
            self.text_visibility >= TextVisibility::Some,
            self.architecture_distinctive,
            self.geographic_features_unique,
            self.contextual_clues >= ContextualClues::Some,
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyLevel {
    Easy,
    Moderate,
    Difficult,
    VeryDifficult,
    ExtremelyDifficult,
}

impl DifficultyLevel {
    pub const ALL: [DifficultyLevel; 5] = [
        DifficultyLevel::Easy,
        DifficultyLevel::Moderate,
        DifficultyLevel::Difficult,
        DifficultyLevel::VeryDifficult,
        DifficultyLevel::ExtremelyDifficult,
    ];

    /// The band containing `score`. Scores outside `[1, 100]` are clamped.
    pub fn from_score(score: i32) -> DifficultyLevel {
        match score.clamp(1, 100) {
            81..=100 => DifficultyLevel::Easy,
            61..=80 => DifficultyLevel::Moderate,
            41..=60 => DifficultyLevel::Difficult,
            21..=40 => DifficultyLevel::VeryDifficult,
            _ => DifficultyLevel::ExtremelyDifficult,
        }
    }

    /// Inclusive score range of the band.
    pub fn range(self) -> (i32, i32) {
        match self {
            DifficultyLevel::Easy => (81, 100),
            DifficultyLevel::Moderate => (61, 80),
            DifficultyLevel::Difficult => (41, 60),
            DifficultyLevel::VeryDifficult => (21, 40),
            DifficultyLevel::ExtremelyDifficult => (1, 20),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DifficultyLevel::Easy => "easy",
            DifficultyLevel::Moderate => "moderate",
            DifficultyLevel::Difficult => "difficult",
            DifficultyLevel::VeryDifficult => "very_difficult",
            DifficultyLevel::ExtremelyDifficult => "extremely_difficult",
        }
    }

    /// Title-case name used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            DifficultyLevel::Easy => "Easy",
            DifficultyLevel::Moderate => "Moderate",
            DifficultyLevel::Difficult => "Difficult",
            DifficultyLevel::VeryDifficult => "Very Difficult",
            DifficultyLevel::ExtremelyDifficult => "Extremely Difficult",
        }
    }
}

impl fmt::Display for DifficultyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown difficulty level {0:?}")]
pub struct UnknownLevel(pub String);

impl FromStr for DifficultyLevel {
    type Err = UnknownLevel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        DifficultyLevel::ALL
            .into_iter()
            .find(|l| l.as_str() == key || l.as_str().trim_end_matches("_difficult") == key)
            .ok_or_else(|| UnknownLevel(s.to_string()))
    }
}

/// One applied weight.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorDelta {
    pub factor: String,
    pub delta: i32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyAssessment {
    pub score: i32,
    pub level: DifficultyLevel,
    pub factor_breakdown: Vec<FactorDelta>,
}

impl DifficultyAssessment {
    /// Base score plus every delta, before clamping.
    pub fn raw_total(&self) -> i32 {
        BASE_SCORE + self.factor_breakdown.iter().map(|f| f.delta).sum::<i32>()
    }
}

/// Applies the weighting table. Pure and total.
pub fn score_cues(obs: &CueObservation) -> DifficultyAssessment {
    let landmarks = if obs.landmarks_present { 30 } else { 0 };
    let text = match obs.text_visibility {
        TextVisibility::Abundant => 20,
        TextVisibility::Some => 10,
        TextVisibility::Minimal => 5,
        TextVisibility::None => 0,
    };
    let architecture = if obs.architecture_distinctive { 15 } else { 0 };
    let geographic = if obs.geographic_features_unique { 15 } else { 0 };
    let quality = match obs.image_quality {
        ImageQuality::Excellent => 10,
        ImageQuality::Good => 5,
        ImageQuality::Fair => 0,
        ImageQuality::Poor => -15,
    };
    let contextual = match obs.contextual_clues {
        ContextualClues::Many => 10,
        ContextualClues::Some => 5,
        ContextualClues::Few => 0,
        ContextualClues::None => -10,
    };
    let scene = match obs.scene_type {
        SceneType::Urban => 5,
        SceneType::Rural => -5,
        SceneType::Indoor => -10,
        SceneType::Other => 0,
    };
    let bonus = match obs.positive_indicators() {
        n if n >= 3 => 10,
        2 => 5,
        _ => 0,
    };
    let factor_breakdown: Vec<FactorDelta> = [
        ("landmarks", landmarks),
        ("text", text),
        ("architecture", architecture),
        ("geographic_features", geographic),
        ("image_quality", quality),
        ("contextual_clues", contextual),
        ("scene_type", scene),
        ("bonus", bonus),
    ]
    .into_iter()
    .map(|(factor, delta)| FactorDelta {
        factor: factor.to_string(),
        delta,
    })
    .collect();
    let raw = BASE_SCORE + factor_breakdown.iter().map(|f| f.delta).sum::<i32>();
    let score = raw.clamp(1, 100);
    DifficultyAssessment {
        score,
        level: DifficultyLevel::from_score(score),
        factor_breakdown,
    }
}

/// Cue observation plus how many model replies it took.
#[derive(Clone, Debug, PartialEq)]
pub struct CueReport {
    pub observation: CueObservation,
    pub attempts: u32,
}

/// Asks the vision model to fill in every cue field with one structured
/// request, re-asking once if the reply does not validate.
pub fn assess_cues(image: &ImageHandle, vision: &dyn VisionModel) -> Result<CueReport, StructuredError> {
    let prompt = format!("{CUE_PROMPT}\nJSON schema:\n{CUE_SCHEMA}");
    let req = VisionRequest::new(Purpose::Cues, vec![image.clone()], prompt).structured(CUE_SCHEMA_NAME);
    let (observation, attempts) = request_structured::<CueObservation>(vision, &req, CUE_MAX_ATTEMPTS)?;
    Ok(CueReport { observation, attempts })
}

/// Cue extraction followed by scoring.
pub fn assess_image(
    image: &ImageHandle,
    vision: &dyn VisionModel,
) -> Result<(CueReport, DifficultyAssessment), StructuredError> {
    let report = assess_cues(image, vision)?;
    let assessment = score_cues(&report.observation);
    Ok((report, assessment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::mock::{MockFixtures, MockVision};
    use proptest::prelude::*;

    fn obs(
        landmarks: bool,
        text: TextVisibility,
        arch: bool,
        geo: bool,
        quality: ImageQuality,
        ctx: ContextualClues,
        scene: SceneType,
    ) -> CueObservation {
        CueObservation {
            landmarks_present: landmarks,
            text_visibility: text,
            architecture_distinctive: arch,
            geographic_features_unique: geo,
            image_quality: quality,
            contextual_clues: ctx,
            scene_type: scene,
        }
    }

    #[test]
    fn everything_visible_clamps_to_easy() {
        let a = score_cues(&obs(
            true,
            TextVisibility::Abundant,
            true,
            true,
            ImageQuality::Excellent,
            ContextualClues::Many,
            SceneType::Urban,
        ));
        assert_eq!(a.raw_total(), 165);
        assert_eq!(a.score, 100);
        assert_eq!(a.level, DifficultyLevel::Easy);
    }

    #[test]
    fn bare_indoor_is_very_difficult() {
        let a = score_cues(&obs(
            false,
            TextVisibility::None,
            false,
            false,
            ImageQuality::Fair,
            ContextualClues::Few,
            SceneType::Indoor,
        ));
        assert_eq!(a.score, 40);
        assert_eq!(a.level, DifficultyLevel::VeryDifficult);
    }

    #[test]
    fn poor_indoor_is_extremely_difficult() {
        let a = score_cues(&obs(
            false,
            TextVisibility::None,
            false,
            false,
            ImageQuality::Poor,
            ContextualClues::None,
            SceneType::Indoor,
        ));
        assert_eq!(a.score, 15);
        assert_eq!(a.level, DifficultyLevel::ExtremelyDifficult);
    }

    #[test]
    fn band_edges() {
        for (score, level) in [
            (100, DifficultyLevel::Easy),
            (81, DifficultyLevel::Easy),
            (80, DifficultyLevel::Moderate),
            (61, DifficultyLevel::Moderate),
            (60, DifficultyLevel::Difficult),
            (41, DifficultyLevel::Difficult),
            (40, DifficultyLevel::VeryDifficult),
            (21, DifficultyLevel::VeryDifficult),
            (20, DifficultyLevel::ExtremelyDifficult),
            (1, DifficultyLevel::ExtremelyDifficult),
        ] {
            assert_eq!(DifficultyLevel::from_score(score), level, "score {score}");
        }
    }

    #[test]
    fn level_names_parse() {
        for l in DifficultyLevel::ALL {
            assert_eq!(l.as_str().parse::<DifficultyLevel>().unwrap(), l);
            assert_eq!(l.title().parse::<DifficultyLevel>().unwrap(), l);
        }
        assert!("trivial".parse::<DifficultyLevel>().is_err());
    }

    #[test]
    fn schema_asset_names_every_field() {
        let schema: serde_json::Value = serde_json::from_str(CUE_SCHEMA).unwrap();
        let required: Vec<&str> = schema["required"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap())
            .collect();
        let sample = serde_json::to_value(CueObservation::enumerate_all()[0]).unwrap();
        let mut fields: Vec<&str> = sample.as_object().unwrap().keys().map(String::as_str).collect();
        fields.sort_unstable();
        let mut required_sorted = required.clone();
        required_sorted.sort_unstable();
        assert_eq!(fields, required_sorted);
    }

    const FULL: &str = r#"{"landmarks_present": true, "text_visibility": "some",
        "architecture_distinctive": false, "geographic_features_unique": false,
        "image_quality": "good", "contextual_clues": "few", "scene_type": "urban"}"#;
    const MISSING_SCENE: &str = r#"{"landmarks_present": true, "text_visibility": "some",
        "architecture_distinctive": false, "geographic_features_unique": false,
        "image_quality": "good", "contextual_clues": "few"}"#;

    #[test]
    fn assess_cues_parses_complete_reply() {
        let img = ImageHandle::solid("street", 4, 4, [1, 2, 3, 255]);
        let vision = MockVision::new(MockFixtures::default().with_vision("street|cues", [FULL]).vision);
        let report = assess_cues(&img, &vision).unwrap();
        assert_eq!(report.attempts, 1);
        assert!(report.observation.landmarks_present);
        assert_eq!(report.observation.scene_type, SceneType::Urban);
    }

    #[test]
    fn assess_cues_retries_once() {
        let img = ImageHandle::solid("street", 4, 4, [1, 2, 3, 255]);
        let vision = MockVision::new(
            MockFixtures::default()
                .with_vision("street|cues", [MISSING_SCENE, FULL])
                .vision,
        );
        let report = assess_cues(&img, &vision).unwrap();
        assert_eq!(report.attempts, 2);
        assert_eq!(vision.total_calls(), 2);
    }

    #[test]
    fn assess_cues_gives_up_after_two() {
        let img = ImageHandle::solid("street", 4, 4, [1, 2, 3, 255]);
        let vision = MockVision::new(
            MockFixtures::default()
                .with_vision("street|cues", ["not json", "{\"scene_type\": \"beach\"}"])
                .vision,
        );
        let err = assess_cues(&img, &vision).unwrap_err();
        assert!(matches!(err, StructuredError::Schema { attempts: 2, .. }));
        assert_eq!(vision.total_calls(), 2);
    }

    fn arb_obs() -> impl Strategy<Value = CueObservation> {
        (
            any::<bool>(),
            prop::sample::select(TextVisibility::ALL),
            any::<bool>(),
            any::<bool>(),
            prop::sample::select(ImageQuality::ALL),
            prop::sample::select(ContextualClues::ALL),
            prop::sample::select(SceneType::ALL),
        )
            .prop_map(|(l, t, a, g, q, c, s)| obs(l, t, a, g, q, c, s))
    }

    proptest! {
        #[test]
        fn json_round_trip(o in arb_obs()) {
            let text = serde_json::to_string(&o).unwrap();
            prop_assert_eq!(serde_json::from_str::<CueObservation>(&text).unwrap(), o);
        }

        #[test]
        fn adding_landmarks_never_lowers_score(o in arb_obs()) {
            let mut up = o;
            up.landmarks_present = true;
            prop_assert!(score_cues(&up).score >= score_cues(&o).score);
        }
    }
}
