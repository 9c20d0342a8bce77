//! Contracts for the external services the pipeline talks to.
//!
//! Four capabilities: vision-language chat, text/image embedding, reverse
//! image search and web page fetching. Each has a live HTTP adapter
//! ([`live`]) and a scripted mock ([`mock`]).

pub mod budget;
pub mod live;
pub mod mock;
pub mod search_pages;
pub mod throttle;

use std::fmt;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::ImageHandle;

/// Tolerance on the unit-norm invariant of embedding vectors.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Auth,
    Quota,
    Transport,
    Timeout,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorKind::Auth => "auth",
            ErrorKind::Quota => "quota",
            ErrorKind::Transport => "transport",
            ErrorKind::Timeout => "timeout",
        })
    }
}

impl ErrorKind {
    pub fn is_retryable(self) -> bool {
        !matches!(self, ErrorKind::Auth)
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum ProviderError {
    #[error("{kind} error: {message}")]
    Service { kind: ErrorKind, message: String },
    #[error("{engine} answered with a human-verification page")]
    CaptchaDetected { engine: String },
    #[error("response body exceeds the {limit}-byte cap")]
    SizeExceeded { limit: u64 },
    #[error("embedding mismatch: {0}")]
    DimensionMismatch(String),
    #[error("provider returned invalid data: {0}")]
    InvalidOutput(String),
    #[error("run budget exhausted: {0}")]
    BudgetExhausted(String),
}

impl ProviderError {
    pub fn service(kind: ErrorKind, message: impl Into<String>) -> Self {
        ProviderError::Service {
            kind,
            message: message.into(),
        }
    }

    pub fn transport(message: impl Into<String>) -> Self {
        Self::service(ErrorKind::Transport, message)
    }

    pub fn kind(&self) -> Option<ErrorKind> {
        match self {
            ProviderError::Service { kind, .. } => Some(*kind),
            _ => None,
        }
    }
}

/// Maps an HTTP status to an error kind; `None` for success and redirect
/// classes. Every other status maps to some kind.
pub fn classify_status(status: u16) -> Option<ErrorKind> {
    match status {
        100..=399 => None,
        401 | 403 | 407 => Some(ErrorKind::Auth),
        429 => Some(ErrorKind::Quota),
        408 | 504 => Some(ErrorKind::Timeout),
        _ => Some(ErrorKind::Transport),
    }
}

/// What a vision request is for. Mocks key their scripts on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Cues,
    Direct,
    Eap,
    RefinePrompt,
    ProposeRegions,
    AssessBox,
    AdjustBox,
    CompareScenes,
    PageClues,
    Consistency,
    Judge,
}

impl Purpose {
    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::Cues => "cues",
            Purpose::Direct => "direct",
            Purpose::Eap => "eap",
            Purpose::RefinePrompt => "refine_prompt",
            Purpose::ProposeRegions => "propose_regions",
            Purpose::AssessBox => "assess_box",
            Purpose::AdjustBox => "adjust_box",
            Purpose::CompareScenes => "compare_scenes",
            Purpose::PageClues => "page_clues",
            Purpose::Consistency => "consistency",
            Purpose::Judge => "judge",
        }
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct VisionRequest {
    pub images: Vec<ImageHandle>,
    pub prompt: String,
    pub purpose: Purpose,
    /// Name of the JSON schema the reply must follow, if any.
    pub want_structured: Option<&'static str>,
    pub temperature: f64,
}

impl VisionRequest {
    pub fn new(purpose: Purpose, images: Vec<ImageHandle>, prompt: impl Into<String>) -> Self {
        Self {
            images,
            prompt: prompt.into(),
            purpose,
            want_structured: None,
            temperature: 0.0,
        }
    }

    pub fn structured(mut self, schema: &'static str) -> Self {
        self.want_structured = Some(schema);
        self
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.images.is_empty() && self.prompt.trim().is_empty() {
            return Err(ProviderError::InvalidOutput(
                "vision request needs an image or a prompt".into(),
            ));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ProviderError::InvalidOutput("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

/// A unit-length embedding tagged with the encoder space it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    space_id: String,
}

impl EmbeddingVector {
    /// Accepts `values` only if already unit length within [`NORM_TOLERANCE`].
    pub fn new(values: Vec<f64>, space_id: impl Into<String>) -> Result<Self, ProviderError> {
        if values.is_empty() {
            return Err(ProviderError::InvalidOutput("empty embedding".into()));
        }
        let norm = l2_norm(&values);
        if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(ProviderError::InvalidOutput(format!("embedding norm {norm} is not 1")));
        }
        Ok(Self {
            values,
            space_id: space_id.into(),
        })
    }

    /// Scales `values` to unit length.
    pub fn normalized(values: Vec<f64>, space_id: impl Into<String>) -> Result<Self, ProviderError> {
        let norm = l2_norm(&values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(ProviderError::InvalidOutput(
                "cannot normalize a zero or non-finite vector".into(),
            ));
        }
        Self::new(values.into_iter().map(|v| v / norm).collect(), space_id)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn space_id(&self) -> &str {
        &self.space_id
    }
}

pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    #[default]
    Yandex,
    Google,
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Yandex => "yandex",
            Engine::Google => "google",
        })
    }
}

/// One reverse-search result.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchHit {
    pub thumbnail: ImageHandle,
    pub source_url: String,
    pub page_title: String,
    pub rank: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FetchedPage {
    pub html: String,
    pub final_url: String,
}

pub trait VisionModel: Send + Sync {
    fn chat_vision(&self, req: &VisionRequest) -> Result<String, ProviderError>;
}

pub trait Embedder: Send + Sync {
    fn space_id(&self) -> &str;
    fn embed_image(&self, image: &ImageHandle) -> Result<EmbeddingVector, ProviderError>;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, ProviderError>;
}

pub trait ImageSearch: Send + Sync {
    fn search_by_image(&self, image: &ImageHandle, engine: Engine) -> Result<Vec<SearchHit>, ProviderError>;
}

pub trait PageFetcher: Send + Sync {
    fn fetch_page(&self, url: &str) -> Result<FetchedPage, ProviderError>;
}

/// The full set of services a pipeline run needs. The experience module
/// uses `geo_embedder` (location-aware encoder); reverse search filters
/// with `search_embedder`. Both may be the same instance.
#[derive(Clone)]
pub struct Providers {
    pub vision: Arc<dyn VisionModel>,
    pub geo_embedder: Arc<dyn Embedder>,
    pub search_embedder: Arc<dyn Embedder>,
    pub search: Arc<dyn ImageSearch>,
    pub fetcher: Arc<dyn PageFetcher>,
}

#[derive(Debug, Error)]
pub enum StructuredError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("reply failed schema validation after {attempts} attempts: {reason}")]
    Schema { attempts: u32, reason: String },
}

/// Pulls the JSON object out of a model reply, tolerating code fences and
/// surrounding prose.
pub fn extract_json(reply: &str) -> Option<&str> {
    let start = reply.find(['{', '['])?;
    let open = reply.as_bytes()[start];
    let close = if open == b'{' { '}' } else { ']' };
    let end = reply.rfind(close)?;
    (end > start).then(|| &reply[start..=end])
}

/// Sends `req` and parses the reply as `T`, re-asking up to
/// `max_attempts` times in total when parsing fails.
pub fn request_structured<T: DeserializeOwned>(
    vision: &dyn VisionModel,
    req: &VisionRequest,
    max_attempts: u32,
) -> Result<(T, u32), StructuredError> {
    let mut reason = String::from("no attempt made");
    for attempt in 1..=max_attempts.max(1) {
        let reply = vision.chat_vision(req)?;
        let parsed = extract_json(&reply)
            .ok_or_else(|| "reply contains no JSON object".to_string())
            .and_then(|json| serde_json::from_str::<T>(json).map_err(|e| e.to_string()));
        match parsed {
            Ok(value) => return Ok((value, attempt)),
            Err(e) => {
                log::debug!("{} reply rejected on attempt {attempt}: {e}", req.purpose);
                reason = e;
            }
        }
    }
    Err(StructuredError::Schema {
        attempts: max_attempts.max(1),
        reason,
    })
}
