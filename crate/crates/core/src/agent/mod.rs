//! The planner: difficulty → plan, tool execution, synthesis and the
//! evaluate-then-fallback loop under a run budget.

pub mod plan;
mod steps;
pub mod synthesis;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use plan::{
    default_policy, next_fallback, select_strategy, PlanSource, Preset, StrategyConfig, StrategyPlan, FALLBACK_ORDER,
};
pub use steps::{parse_answer, DIRECT_QUESTION};
pub use synthesis::{self_evaluate, synthesize, DeficiencyReason, SynthesisTrace, Verdict};

use crate::difficulty::{assess_image, DifficultyAssessment, DifficultyLevel};
use crate::experience::MemoryStore;
use crate::experience::DEFAULT_MEMORY_THRESHOLD;
use crate::imaging::ImageHandle;
use crate::model::{Prediction, ToolId, UncertaintyDetector, DEFAULT_UNCERTAIN_PHRASES};
use crate::providers::budget::{BudgetMeter, CallCounts};
use crate::providers::{ProviderError, Providers, StructuredError};
use crate::reverse_search::{AnalysisReport, ReverseSearchConfig};
use crate::segmentation::{AcceptedRegion, SegmentationConfig};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("first step failed: {0}")]
    Provider(#[from] ProviderError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunBudget {
    pub max_refine_rounds: u32,
    pub wall_clock_limit_secs: f64,
    pub provider_call_limit: u64,
}

impl Default for RunBudget {
    fn default() -> Self {
        Self {
            max_refine_rounds: 3,
            wall_clock_limit_secs: 600.0,
            provider_call_limit: 500,
        }
    }
}

impl RunBudget {
    pub fn validate(&self, refine: bool) -> Result<(), AgentError> {
        if !(self.wall_clock_limit_secs.is_finite() && self.wall_clock_limit_secs > 0.0) {
            return Err(AgentError::Config("wall_clock_limit_secs must be positive".into()));
        }
        if self.provider_call_limit == 0 {
            return Err(AgentError::Config("provider_call_limit must be positive".into()));
        }
        if refine && self.max_refine_rounds == 0 {
            return Err(AgentError::Config(
                "max_refine_rounds must be positive when refinement is enabled".into(),
            ));
        }
        Ok(())
    }

    pub fn meter(&self) -> BudgetMeter {
        BudgetMeter::new(
            Some(self.provider_call_limit),
            Some(Duration::from_secs_f64(self.wall_clock_limit_secs)),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub strategy: StrategyConfig,
    pub budget: RunBudget,
    /// Run the evaluate-then-fallback loop. Fixed presets never do.
    pub refine: bool,
    pub memory_threshold: f64,
    /// Plan used when the difficulty assessment itself fails.
    pub fallback_level: DifficultyLevel,
    pub uncertain_phrases: Vec<String>,
    pub reverse_search: ReverseSearchConfig,
    pub segmentation: SegmentationConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyConfig::default(),
            budget: RunBudget::default(),
            refine: true,
            memory_threshold: DEFAULT_MEMORY_THRESHOLD,
            fallback_level: DifficultyLevel::Difficult,
            uncertain_phrases: DEFAULT_UNCERTAIN_PHRASES.iter().map(|s| s.to_string()).collect(),
            reverse_search: ReverseSearchConfig::default(),
            segmentation: SegmentationConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        self.strategy.validate()?;
        self.budget.validate(self.refine)?;
        if !(0.0..=1.0).contains(&self.memory_threshold) {
            return Err(AgentError::Config("memory_threshold must lie in [0, 1]".into()));
        }
        if !(-1.0..=1.0).contains(&self.reverse_search.tau_rs) {
            return Err(AgentError::Config("reverse_search.tau_rs must lie in [-1, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum StepStatus {
    Completed,
    Skipped,
    Failed(String),
    BudgetExhausted(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub tool: ToolId,
    pub origin: PlanSource,
    pub status: StepStatus,
    pub evidence_items: usize,
    pub note: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineOutcome {
    pub image_id: String,
    pub prediction: Prediction,
    pub difficulty: Option<DifficultyAssessment>,
    pub plan: StrategyPlan,
    pub steps: Vec<StepRecord>,
    pub verdict: Verdict,
    /// Why the run stopped early, when the budget ran out.
    pub budget_exhausted: Option<String>,
    pub calls: CallCounts,
    pub synthesis: SynthesisTrace,
    pub reports: Vec<AnalysisReport>,
    pub regions: Vec<AcceptedRegion>,
}

impl PipelineOutcome {
    /// Human-readable report: the prediction, its explanation and every
    /// reverse-search analysis.
    pub fn to_markdown(&self) -> String {
        let mut out = format!("# Geolocation of `{}`\n\n", self.image_id);
        out.push_str(&format!("**Prediction:** {}\n\n", self.prediction.label_text()));
        if let Some(d) = &self.difficulty {
            out.push_str(&format!("**Difficulty:** {} (score {})\n\n", d.level.title(), d.score));
        }
        let trace = self
            .prediction
            .strategy_trace
            .iter()
            .map(|t| t.as_str())
            .collect::<Vec<_>>()
            .join(" → ");
        out.push_str(&format!("**Tools run:** {trace}\n\n"));
        if let Some(reason) = &self.budget_exhausted {
            out.push_str(&format!("**Stopped early:** {reason}\n\n"));
        }
        out.push_str("## Explanation\n\n");
        out.push_str(&self.prediction.explanation);
        out.push_str("\n\n");
        for r in &self.reports {
            out.push_str(&r.to_markdown());
            out.push('\n');
        }
        out
    }
}

/// One pipeline over shared providers and prompt memory. Cheap to share
/// across worker threads.
pub struct Agent {
    providers: Providers,
    memory: Arc<MemoryStore>,
    cfg: AgentConfig,
    detector: UncertaintyDetector,
}

impl Agent {
    pub fn new(providers: Providers, memory: Arc<MemoryStore>, cfg: AgentConfig) -> Result<Self, AgentError> {
        cfg.validate()?;
        let detector = UncertaintyDetector::new(&cfg.uncertain_phrases);
        Ok(Self {
            providers,
            memory,
            cfg,
            detector,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    /// Plans and runs the pipeline for one image. A fixed preset skips the
    /// difficulty assessment and the fallback loop; otherwise the assessed
    /// level selects the plan.
    pub fn run(&self, image: &ImageHandle) -> Result<PipelineOutcome, AgentError> {
        let meter = Arc::new(self.cfg.budget.meter());
        let providers = self.providers.metered(meter.clone());
        let preset = self.cfg.strategy.preset()?;
        if let Some(steps) = preset.and_then(Preset::fixed_steps) {
            let plan = StrategyPlan::new(steps, PlanSource::AblationConfig)?;
            return self.run_plan(image, plan, &providers, &meter, false, None, &self.cfg.budget);
        }
        let (difficulty, level) = match assess_image(image, providers.vision.as_ref()) {
            Ok((_, a)) => (Some(a.clone()), a.level),
            Err(StructuredError::Provider(e @ ProviderError::BudgetExhausted(_))) => {
                return Err(AgentError::Provider(e));
            }
            Err(e) => {
                log::warn!(
                    "difficulty assessment of {} failed ({e}); planning for {}",
                    image.id(),
                    self.cfg.fallback_level
                );
                (None, self.cfg.fallback_level)
            }
        };
        let plan = select_strategy(level, &self.cfg.strategy)?;
        self.run_plan(
            image,
            plan,
            &providers,
            &meter,
            self.cfg.refine,
            difficulty,
            &self.cfg.budget,
        )
    }

    /// Runs `plan` under `budget` with a fresh meter. Refinement follows
    /// the configuration.
    pub fn run_pipeline(
        &self,
        image: &ImageHandle,
        plan: StrategyPlan,
        budget: &RunBudget,
    ) -> Result<PipelineOutcome, AgentError> {
        budget.validate(self.cfg.refine)?;
        let meter = Arc::new(budget.meter());
        let providers = self.providers.metered(meter.clone());
        self.run_plan(image, plan, &providers, &meter, self.cfg.refine, None, budget)
    }

    fn run_step(
        &self,
        tool: ToolId,
        image: &ImageHandle,
        providers: &Providers,
        as_fallback_after_direct: bool,
    ) -> Result<steps::StepOutput, ProviderError> {
        match tool {
            ToolId::DirectLvlm => steps::direct(image, providers, &self.detector),
            ToolId::Eap => steps::eap(
                image,
                providers,
                &self.memory,
                self.cfg.memory_threshold,
                &self.detector,
                as_fallback_after_direct,
            ),
            ToolId::ReverseSearch => steps::reverse_search(image, providers, &self.cfg.reverse_search),
            ToolId::SegThenReverseSearch => {
                steps::seg_then_reverse_search(image, providers, &self.cfg.segmentation, &self.cfg.reverse_search)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_plan(
        &self,
        image: &ImageHandle,
        plan: StrategyPlan,
        providers: &Providers,
        meter: &Arc<BudgetMeter>,
        refine: bool,
        difficulty: Option<DifficultyAssessment>,
        budget: &RunBudget,
    ) -> Result<PipelineOutcome, AgentError> {
        let mut run = Run::default();

        for (index, &tool) in plan.steps().iter().enumerate() {
            if let Some(reason) = meter.exhausted() {
                run.budget_exhausted = Some(reason);
                break;
            }
            run.attempted.insert(tool);
            match self.run_step(tool, image, providers, false) {
                Ok(out) => run.record(tool, plan.source, out),
                Err(e) if index == 0 && !matches!(e, ProviderError::BudgetExhausted(_)) => {
                    return Err(AgentError::Provider(e));
                }
                Err(e) => run.fail(tool, plan.source, e),
            }
            if run.budget_exhausted.is_some() {
                break;
            }
        }

        let (mut prediction, mut synthesis) = synthesize(&run.evidence, image, providers.vision.as_ref());
        let mut verdict = self_evaluate(&prediction);
        let mut rounds = 0;
        while refine && verdict != Verdict::Accept && run.budget_exhausted.is_none() {
            if rounds >= budget.max_refine_rounds {
                break;
            }
            let Some(tool) = next_fallback(&run.attempted) else {
                break;
            };
            run.attempted.insert(tool);
            if let Some(reason) = meter.exhausted() {
                run.budget_exhausted = Some(reason);
                break;
            }
            let after_direct = tool == ToolId::Eap && run.trace.contains(&ToolId::DirectLvlm);
            match self.run_step(tool, image, providers, after_direct) {
                Ok(out) if out.skipped => {
                    log::debug!("fallback {tool} skipped: {}", out.note);
                    run.steps.push(StepRecord {
                        tool,
                        origin: PlanSource::Fallback,
                        status: StepStatus::Skipped,
                        evidence_items: 0,
                        note: out.note,
                    });
                    continue;
                }
                Ok(out) => run.record(tool, PlanSource::Fallback, out),
                Err(e) => run.fail(tool, PlanSource::Fallback, e),
            }
            rounds += 1;
            let (p, s) = synthesize(&run.evidence, image, providers.vision.as_ref());
            prediction = p;
            synthesis = s;
            verdict = self_evaluate(&prediction);
        }
        if run.budget_exhausted.is_none() {
            run.budget_exhausted = synthesis
                .tiebreak_error
                .as_ref()
                .filter(|e| e.contains("budget exhausted"))
                .cloned();
        }

        prediction.strategy_trace = run.trace.clone();
        Ok(PipelineOutcome {
            image_id: image.id().to_string(),
            prediction,
            difficulty,
            plan,
            steps: run.steps,
            verdict,
            budget_exhausted: run.budget_exhausted,
            calls: meter.counts(),
            synthesis,
            reports: run.reports,
            regions: run.regions,
        })
    }
}

#[derive(Default)]
struct Run {
    attempted: BTreeSet<ToolId>,
    trace: Vec<ToolId>,
    evidence: Vec<crate::model::EvidenceItem>,
    steps: Vec<StepRecord>,
    reports: Vec<AnalysisReport>,
    regions: Vec<AcceptedRegion>,
    budget_exhausted: Option<String>,
}

impl Run {
    fn record(&mut self, tool: ToolId, origin: PlanSource, out: steps::StepOutput) {
        self.trace.push(tool);
        self.steps.push(StepRecord {
            tool,
            origin,
            status: StepStatus::Completed,
            evidence_items: out.items.len(),
            note: out.note,
        });
        self.evidence.extend(out.items);
        self.reports.extend(out.report);
        self.regions.extend(out.regions);
    }

    fn fail(&mut self, tool: ToolId, origin: PlanSource, e: ProviderError) {
        self.trace.push(tool);
        let status = match &e {
            ProviderError::BudgetExhausted(reason) => {
                self.budget_exhausted = Some(reason.clone());
                StepStatus::BudgetExhausted(reason.clone())
            }
            other => {
                log::warn!("{tool} failed: {other}");
                StepStatus::Failed(other.to_string())
            }
        };
        self.steps.push(StepRecord {
            tool,
            origin,
            status,
            evidence_items: 0,
            note: String::new(),
        });
    }
}
