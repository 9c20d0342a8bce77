use std::sync::Arc;

use geoscout_core::agent::{
    synthesize, Agent, AgentConfig, PlanSource, Preset, RunBudget, StepStatus, StrategyConfig, StrategyPlan, Verdict,
};
use geoscout_core::experience::MemoryStore;
use geoscout_core::providers::mock::{HitScript, MockFixtures, MockSuite, MockVision};
use geoscout_core::{EvidenceItem, EvidenceSource, GeoLabel, ImageHandle, ToolId};
use proptest::prelude::*;
use serde_json::json;

const EASY_CUES: &str = r#"{"landmarks_present": true, "text_visibility": "abundant",
 "architecture_distinctive": true, "geographic_features_unique": true, "image_quality": "excellent",
 "contextual_clues": "many", "scene_type": "urban"}"#;

fn image(id: &str) -> ImageHandle {
    ImageHandle::solid(id, 16, 16, [id.len() as u8, 40, 90, 255])
}

/// Three look-alike hits on distinct sites, each titled with `place`.
fn with_search_consensus(mut fx: MockFixtures, id: &str, place: &str) -> MockFixtures {
    let hits = (0..3)
        .map(|k| HitScript::new(&format!("{id}-t{k}"), &format!("https://site{k}.example/{id}"), ""))
        .collect();
    fx = fx
        .with_search(id, hits)
        .with_vector(&format!("image:{id}"), vec![1.0, 0.0]);
    for k in 0..3 {
        fx = fx.with_vector(&format!("image:{id}-t{k}"), vec![0.95, 0.05]).with_page(
            &format!("https://site{k}.example/{id}"),
            &format!("<html><head><title>Street view | {place}</title></head></html>"),
        );
    }
    fx
}

fn base() -> MockFixtures {
    MockFixtures::default()
        .with_dimension(2)
        .with_vision("*|cues", [EASY_CUES])
        .with_vision_json("*|compare_scenes", json!({"verdict": "uncertain"}))
}

fn agent(suite: &MockSuite, cfg: AgentConfig) -> Agent {
    Agent::new(suite.providers(), Arc::new(MemoryStore::in_memory()), cfg).unwrap()
}

#[test]
fn unknown_answer_falls_back_to_reverse_search() {
    let fx = with_search_consensus(
        base().with_vision("a|direct", ["Unknown"]),
        "a",
        "Prague, Prague, Czech Republic",
    );
    let suite = MockSuite::new(fx);
    let out = agent(&suite, AgentConfig::default()).run(&image("a")).unwrap();
    let label = out.prediction.label.clone().unwrap();
    assert_eq!(label.city(), Some("Prague"));
    assert_eq!(label.country(), Some("Czech Republic"));
    assert_eq!(
        out.prediction.strategy_trace,
        [ToolId::DirectLvlm, ToolId::ReverseSearch]
    );
    assert_eq!(out.verdict, Verdict::Accept);
    assert!(out
        .steps
        .iter()
        .any(|s| s.tool == ToolId::Eap && s.status == StepStatus::Skipped));
}

#[test]
fn complete_direct_answer_is_accepted() {
    let fx = base().with_vision(
        "b|direct",
        ["Paris, Île-de-France, France\nHaussmann facades and a Métro entrance."],
    );
    let suite = MockSuite::new(fx);
    let out = agent(&suite, AgentConfig::default()).run(&image("b")).unwrap();
    assert_eq!(out.prediction.strategy_trace, [ToolId::DirectLvlm]);
    assert_eq!(out.prediction.label_text(), "Paris, Île-de-France, France");
    assert_eq!(suite.search.calls(), 0);
}

#[test]
fn call_limit_keeps_first_step_result() {
    let fx = base()
        .with_vision("c|direct", ["Lisbon, Lisbon District, Portugal\nTrams."])
        .with_vision("c|eap", ["Porto, Porto District, Portugal"]);
    let suite = MockSuite::new(fx);
    let a = agent(&suite, AgentConfig::default());
    let plan = StrategyPlan::new(vec![ToolId::DirectLvlm, ToolId::Eap], PlanSource::AblationConfig).unwrap();
    let budget = RunBudget {
        provider_call_limit: 1,
        ..Default::default()
    };
    let out = a.run_pipeline(&image("c"), plan, &budget).unwrap();
    assert!(out.budget_exhausted.is_some());
    assert_eq!(out.prediction.label_text(), "Lisbon, Lisbon District, Portugal");
    assert_eq!(out.prediction.strategy_trace, [ToolId::DirectLvlm]);
    assert_eq!(out.calls.total(), 1);
}

#[test]
fn first_step_failure_is_an_error() {
    let suite = MockSuite::new(base());
    let a = agent(&suite, AgentConfig::default());
    assert!(a.run(&image("nothing-scripted")).is_err());
}

#[test]
fn later_step_failure_is_recorded() {
    let fx = base().with_vision("d|direct", ["Unknown"]);
    let suite = MockSuite::new(fx);
    let out = agent(&suite, AgentConfig::default()).run(&image("d")).unwrap();
    assert!(out.prediction.is_unknown());
    assert_eq!(
        out.prediction.strategy_trace,
        [ToolId::DirectLvlm, ToolId::ReverseSearch, ToolId::SegThenReverseSearch]
    );
    let seg = out
        .steps
        .iter()
        .find(|s| s.tool == ToolId::SegThenReverseSearch)
        .unwrap();
    assert!(matches!(seg.status, StepStatus::Failed(_)));
}

#[test]
fn presets_follow_their_columns() {
    let expected = [
        (Preset::Baseline, vec![ToolId::DirectLvlm]),
        (Preset::Eap, vec![ToolId::Eap]),
        (Preset::Rs, vec![ToolId::ReverseSearch]),
        (Preset::EapRs, vec![ToolId::Eap, ToolId::ReverseSearch]),
        (
            Preset::BaselineSegRs,
            vec![ToolId::DirectLvlm, ToolId::SegThenReverseSearch],
        ),
        (Preset::EapSegRs, vec![ToolId::Eap, ToolId::SegThenReverseSearch]),
    ];
    for (preset, steps) in expected {
        let fx = base()
            .with_vision("*|direct", ["Unknown"])
            .with_vision("*|eap", ["Unknown"])
            .with_vision_json("*|propose_regions", json!({"regions": []}));
        let suite = MockSuite::new(fx);
        let cfg = AgentConfig {
            strategy: StrategyConfig {
                ablation: Some(preset.as_str().into()),
                ..Default::default()
            },
            ..Default::default()
        };
        let out = agent(&suite, cfg).run(&image("e")).unwrap();
        assert_eq!(out.prediction.strategy_trace, steps, "{preset}");
        assert_eq!(suite.vision.calls_for(geoscout_core::providers::Purpose::Cues), 0);
    }
}

#[test]
fn runs_are_deterministic() {
    let make = || {
        let fx = with_search_consensus(
            base().with_vision("f|direct", ["Vienna, Austria\nBaroque facades."]),
            "f",
            "Vienna, Vienna, Austria",
        );
        let suite = MockSuite::new(fx);
        let out = agent(&suite, AgentConfig::default()).run(&image("f")).unwrap();
        serde_json::to_string(&out.prediction).unwrap()
    };
    assert_eq!(make(), make());
}

fn arb_item() -> impl Strategy<Value = EvidenceItem> {
    let places = prop::sample::select(vec![
        GeoLabel::place(Some("Prague"), None, "Czech Republic"),
        GeoLabel::place(Some("Brno"), Some("South Moravia"), "Czech Republic"),
        GeoLabel::country_only("Austria"),
        GeoLabel::place(Some("Vienna"), None, "Austria"),
        GeoLabel::place(Some("Lisbon"), None, "Portugal"),
    ]);
    let source = prop::sample::select(vec![
        EvidenceSource::DirectLvlm,
        EvidenceSource::Eap,
        EvidenceSource::ReverseSearch,
    ]);
    (places, source, any::<bool>()).prop_map(|(p, s, explicit)| EvidenceItem::new(s, vec![p], explicit, "n").unwrap())
}

proptest! {
    #[test]
    fn synthesis_ignores_evidence_order(items in prop::collection::vec(arb_item(), 1..8), seed in any::<u64>()) {
        let vision = MockVision::new(
            MockFixtures::default().with_vision_json("*|consistency", json!({"choice": 1})).vision,
        );
        let img = image("p");
        let (a, _) = synthesize(&items, &img, &vision);
        let mut shuffled = items.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            let j = (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) % (i as u64 + 1)) as usize;
            shuffled.swap(i, j);
        }
        let (b, _) = synthesize(&shuffled, &img, &vision);
        prop_assert_eq!(a.label, b.label);
    }
}
