//! Difficulty-driven tool plans, ablation presets and fallback order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::difficulty::DifficultyLevel;
use crate::model::ToolId;

/// Tools tried, in order, when a prediction is judged deficient.
pub const FALLBACK_ORDER: [ToolId; 3] = [ToolId::Eap, ToolId::ReverseSearch, ToolId::SegThenReverseSearch];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    DifficultyPolicy,
    AblationConfig,
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyPlan {
    steps: Vec<ToolId>,
    pub source: PlanSource,
}

impl StrategyPlan {
    /// Rejects empty plans and repeated tools.
    pub fn new(steps: Vec<ToolId>, source: PlanSource) -> Result<Self, AgentError> {
        if steps.is_empty() {
            return Err(AgentError::Config("a plan needs at least one tool".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &steps {
            if !seen.insert(*s) {
                return Err(AgentError::Config(format!("tool {s} appears twice in the plan")));
            }
        }
        Ok(Self { steps, source })
    }

    pub fn steps(&self) -> &[ToolId] {
        &self.steps
    }
}

/// Named module combinations for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Baseline,
    Eap,
    Rs,
    EapRs,
    BaselineSegRs,
    EapSegRs,
    Agent,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Baseline,
        Preset::Eap,
        Preset::Rs,
        Preset::EapRs,
        Preset::BaselineSegRs,
        Preset::EapSegRs,
        Preset::Agent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::Eap => "eap",
            Preset::Rs => "rs",
            Preset::EapRs => "eap_rs",
            Preset::BaselineSegRs => "baseline_seg_rs",
            Preset::EapSegRs => "eap_seg_rs",
            Preset::Agent => "agent",
        }
    }

    /// Column heading in ablation tables.
    pub fn title(self) -> &'static str {
        match self {
            Preset::Baseline => "Baseline",
            Preset::Eap => "EAP",
            Preset::Rs => "Reverse Search",
            Preset::EapRs => "EAP+RS",
            Preset::BaselineSegRs => "Baseline+Seg+RS",
            Preset::EapSegRs => "EAP+Seg+RS",
            Preset::Agent => "Agent",
        }
    }

    /// The fixed tool sequence, or `None` for the adaptive agent.
    pub fn fixed_steps(self) -> Option<Vec<ToolId>> {
        use ToolId::*;
        Some(match self {
            Preset::Baseline => vec![DirectLvlm],
            Preset::Eap => vec![Eap],
            Preset::Rs => vec![ReverseSearch],
            Preset::EapRs => vec![Eap, ReverseSearch],
            Preset::BaselineSegRs => vec![DirectLvlm, SegThenReverseSearch],
            Preset::EapSegRs => vec![Eap, SegThenReverseSearch],
            Preset::Agent => return None,
        })
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = AgentError;

    /// Accepts the snake-case name or the table heading ("EAP+RS").
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == t || p.title().eq_ignore_ascii_case(t))
            .ok_or_else(|| {
                AgentError::Config(format!(
                    "unknown preset {t:?}; expected one of {}",
                    Preset::ALL.map(Preset::as_str).join(", ")
                ))
            })
    }
}

/// The built-in difficulty → tools table.
pub fn default_policy(level: DifficultyLevel) -> Vec<ToolId> {
    use ToolId::*;
    match level {
        DifficultyLevel::Easy => vec![DirectLvlm],
        DifficultyLevel::Moderate => vec![DirectLvlm, Eap],
        DifficultyLevel::Difficult => vec![Eap, ReverseSearch],
        DifficultyLevel::VeryDifficult => vec![Eap, SegThenReverseSearch, ReverseSearch],
        DifficultyLevel::ExtremelyDifficult => ToolId::ALL.to_vec(),
    }
}

/// Planner settings as written in a config file. Tool and level names stay
/// text until a plan is selected, so typos surface as configuration errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    /// Preset name; overrides the policy wholesale.
    pub ablation: Option<String>,
    /// Per-level replacements for the policy table, keyed by level name.
    pub policy: BTreeMap<String, Vec<String>>,
}

impl StrategyConfig {
    pub fn preset(&self) -> Result<Option<Preset>, AgentError> {
        self.ablation.as_deref().map(str::parse).transpose()
    }

    /// Checks every name without selecting anything.
    pub fn validate(&self) -> Result<(), AgentError> {
        self.preset()?;
        for (level, tools) in &self.policy {
            level
                .parse::<DifficultyLevel>()
                .map_err(|e| AgentError::Config(e.to_string()))?;
            parse_tools(tools)?;
        }
        Ok(())
    }
}

fn parse_tools(names: &[String]) -> Result<Vec<ToolId>, AgentError> {
    names
        .iter()
        .map(|n| n.parse::<ToolId>().map_err(|e| AgentError::Config(e.to_string())))
        .collect()
}

/// The plan for an image of difficulty `level`.
pub fn select_strategy(level: DifficultyLevel, cfg: &StrategyConfig) -> Result<StrategyPlan, AgentError> {
    cfg.validate()?;
    if let Some(steps) = cfg.preset()?.and_then(Preset::fixed_steps) {
        return StrategyPlan::new(steps, PlanSource::AblationConfig);
    }
    let overridden = cfg
        .policy
        .iter()
        .find(|(name, _)| name.parse::<DifficultyLevel>().is_ok_and(|l| l == level));
    let steps = match overridden {
        Some((_, tools)) => parse_tools(tools)?,
        None => default_policy(level),
    };
    StrategyPlan::new(steps, PlanSource::DifficultyPolicy)
}

/// The first tool of the fallback order not yet tried.
pub fn next_fallback(executed: &BTreeSet<ToolId>) -> Option<ToolId> {
    FALLBACK_ORDER.into_iter().find(|t| !executed.contains(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ToolId::*;

    #[test]
    fn policy_table() {
        let cfg = StrategyConfig::default();
        let plan = |l| select_strategy(l, &cfg).unwrap().steps().to_vec();
        assert_eq!(plan(DifficultyLevel::Easy), [DirectLvlm]);
        assert_eq!(plan(DifficultyLevel::Moderate), [DirectLvlm, Eap]);
        assert_eq!(plan(DifficultyLevel::Difficult), [Eap, ReverseSearch]);
        assert_eq!(
            plan(DifficultyLevel::VeryDifficult),
            [Eap, SegThenReverseSearch, ReverseSearch]
        );
        assert_eq!(plan(DifficultyLevel::ExtremelyDifficult).len(), 4);
    }

    #[test]
    fn ablation_overrides_every_level() {
        let cfg = StrategyConfig {
            ablation: Some("EAP+RS".into()),
            ..Default::default()
        };
        for level in DifficultyLevel::ALL {
            let plan = select_strategy(level, &cfg).unwrap();
            assert_eq!(plan.steps(), [Eap, ReverseSearch]);
            assert_eq!(plan.source, PlanSource::AblationConfig);
        }
    }

    #[test]
    fn unknown_tool_is_config_error() {
        let cfg = StrategyConfig {
            policy: [("easy".to_string(), vec!["telepathy".to_string()])].into(),
            ..Default::default()
        };
        assert!(matches!(
            select_strategy(DifficultyLevel::Easy, &cfg),
            Err(AgentError::Config(_))
        ));
        let cfg = StrategyConfig {
            ablation: Some("psychic".into()),
            ..Default::default()
        };
        assert!(matches!(
            select_strategy(DifficultyLevel::Easy, &cfg),
            Err(AgentError::Config(_))
        ));
    }

    #[test]
    fn policy_override_and_duplicates() {
        let cfg = StrategyConfig {
            policy: [("Very Difficult".to_string(), vec!["reverse_search".to_string()])].into(),
            ..Default::default()
        };
        assert_eq!(
            select_strategy(DifficultyLevel::VeryDifficult, &cfg).unwrap().steps(),
            [ReverseSearch]
        );
        assert!(StrategyPlan::new(vec![Eap, Eap], PlanSource::Fallback).is_err());
        assert!(StrategyPlan::new(vec![], PlanSource::Fallback).is_err());
    }

    #[test]
    fn fallback_order() {
        assert_eq!(next_fallback(&[DirectLvlm].into()), Some(Eap));
        assert_eq!(
            next_fallback(&[DirectLvlm, Eap, ReverseSearch].into()),
            Some(SegThenReverseSearch)
        );
        assert_eq!(next_fallback(&ToolId::ALL.into()), None);
    }
}
