//! Agentic image geolocation.
//!
//! The pipeline estimates how hard a photo is to place, picks a tool plan
//! from that difficulty, runs the tools (direct vision-model prompting,
//! experience-augmented prompting, region segmentation, reverse image
//! search), merges the evidence into one hierarchical place label and
//! falls back to further tools while the answer stays incomplete.
//!
//! Every external service sits behind a trait in [`providers`], with a
//! scripted mock implementation so whole runs are reproducible offline.

pub mod agent;
pub mod difficulty;
pub mod evaluation;
pub mod experience;
pub mod html;
pub mod imaging;
pub mod model;
pub mod providers;
pub mod reverse_search;
pub mod segmentation;

pub use difficulty::{CueObservation, DifficultyAssessment, DifficultyLevel};
pub use imaging::{ImageHandle, Rect};
pub use model::{EvidenceItem, EvidenceSource, GeoLabel, Prediction, ToolId};
pub use providers::{ProviderError, Providers};
