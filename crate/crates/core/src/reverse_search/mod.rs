//! Reverse image search: query an engine with the photo (or its crops),
//! keep visually close hits, read place clues from their pages, compare
//! scenes and settle on a consensus location.

pub mod clues;
mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use clues::{extract_page_clues, extract_page_clues_lvlm, page_coordinates, Gazetteer};
pub use report::{build_report, registrable_domain, AnalysisReport};

use crate::experience::cosine_raw;
use crate::imaging::ImageHandle;
use crate::model::EvidenceItem;
use crate::providers::{
    request_structured, Embedder, Engine, ImageSearch, ProviderError, Providers, Purpose, SearchHit, StructuredError,
    VisionModel, VisionRequest,
};

pub const DEFAULT_TAU_RS: f64 = 0.75;
pub const SCENE_MAX_ATTEMPTS: u32 = 2;
pub const SCENE_SCHEMA_NAME: &str = "scene_comparison";

const SCENE_PROMPT: &str = "The first image is a photo to be located; the second is a visually \
similar image found on the web. Decide whether both show the same place. Reply with JSON \
{\"verdict\": \"match\" | \"mismatch\" | \"uncertain\", \"distinctive_elements\": [...]}. When \
the scenes differ, list geographic cues visible in the first image (signage, road markings, \
vegetation, architecture) that would help place it.";

#[derive(Debug, Error)]
pub enum ReverseSearchError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("scene comparison failed schema validation after {attempts} attempts: {reason}")]
    Schema { attempts: u32, reason: String },
}

impl From<StructuredError> for ReverseSearchError {
    fn from(e: StructuredError) -> Self {
        match e {
            StructuredError::Provider(p) => Self::Provider(p),
            StructuredError::Schema { attempts, reason } => Self::Schema { attempts, reason },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneVerdict {
    Match,
    Mismatch,
    Uncertain,
}

impl SceneVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            SceneVerdict::Match => "match",
            SceneVerdict::Mismatch => "mismatch",
            SceneVerdict::Uncertain => "uncertain",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClueMode {
    /// Pattern scanning only.
    #[default]
    Heuristic,
    /// Pattern scanning plus a model read of the page text.
    Lvlm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReverseSearchConfig {
    pub tau_rs: f64,
    pub engine: Engine,
    pub clue_mode: ClueMode,
    pub compare_scenes: bool,
    /// Retained candidates beyond this many are not fetched or compared.
    pub max_enriched: usize,
}

impl Default for ReverseSearchConfig {
    fn default() -> Self {
        Self {
            tau_rs: DEFAULT_TAU_RS,
            engine: Engine::Yandex,
            clue_mode: ClueMode::Heuristic,
            compare_scenes: true,
            max_enriched: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchCandidate {
    pub hit: SearchHit,
    pub similarity: f64,
    pub page_clues: Vec<EvidenceItem>,
    pub scene_match: Option<SceneVerdict>,
    pub distinctive_elements: Vec<String>,
    /// `geo.position` of the linked page, when it has one.
    pub page_coordinates: Option<(f64, f64)>,
    /// Which query produced the hit when crops were searched.
    pub provenance: Option<String>,
    /// Why the linked page could not be read, if it could not.
    pub fetch_error: Option<String>,
}

impl SearchCandidate {
    pub fn new(hit: SearchHit, similarity: f64) -> Self {
        Self {
            hit,
            similarity,
            page_clues: Vec::new(),
            scene_match: None,
            distinctive_elements: Vec::new(),
            page_coordinates: None,
            provenance: None,
            fetch_error: None,
        }
    }

    pub fn has_explicit_place(&self) -> bool {
        self.page_clues.iter().any(|c| c.explicit_place_name)
    }
}

/// Highest similarity first; engine rank breaks ties.
fn order_candidates(candidates: &mut [SearchCandidate]) {
    candidates.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.hit.rank.cmp(&b.hit.rank)));
}

fn score_hits(
    query: &ImageHandle,
    hits: Vec<SearchHit>,
    embedder: &dyn Embedder,
    tau: f64,
) -> Result<Vec<SearchCandidate>, ProviderError> {
    if hits.is_empty() {
        return Ok(Vec::new());
    }
    let q = embedder.embed_image(query)?;
    let mut kept = Vec::new();
    for hit in hits {
        let v = embedder.embed_image(&hit.thumbnail)?;
        if v.dimension() != q.dimension() || v.space_id() != q.space_id() {
            return Err(ProviderError::DimensionMismatch(format!(
                "thumbnail embedding {}x{} vs query {}x{}",
                v.space_id(),
                v.dimension(),
                q.space_id(),
                q.dimension()
            )));
        }
        let s = cosine_raw(q.values(), v.values());
        if s >= tau {
            kept.push(SearchCandidate::new(hit, s));
        }
    }
    Ok(kept)
}

/// Searches with `image`, keeps hits whose thumbnail similarity to the
/// query reaches `tau`, best first.
pub fn run_reverse_search(
    image: &ImageHandle,
    engine: Engine,
    search: &dyn ImageSearch,
    embedder: &dyn Embedder,
    tau: f64,
) -> Result<Vec<SearchCandidate>, ProviderError> {
    let hits = search.search_by_image(image, engine)?;
    let mut kept = score_hits(image, hits, embedder, tau)?;
    order_candidates(&mut kept);
    Ok(kept)
}

/// Searches with every crop, pools the hits, then filters and orders them
/// together. Each candidate records the crop that found it; a page found
/// by several crops is kept once, with its best similarity.
pub fn run_pooled_search(
    crops: &[(ImageHandle, String)],
    engine: Engine,
    search: &dyn ImageSearch,
    embedder: &dyn Embedder,
    tau: f64,
) -> Result<Vec<SearchCandidate>, ProviderError> {
    let mut pooled: Vec<SearchCandidate> = Vec::new();
    for (crop, provenance) in crops {
        let hits = search.search_by_image(crop, engine)?;
        for mut c in score_hits(crop, hits, embedder, tau)? {
            c.provenance = Some(provenance.clone());
            match pooled.iter_mut().find(|p| p.hit.source_url == c.hit.source_url) {
                Some(existing) if existing.similarity >= c.similarity => {}
                Some(existing) => *existing = c,
                None => pooled.push(c),
            }
        }
    }
    order_candidates(&mut pooled);
    Ok(pooled)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneReply {
    verdict: SceneVerdict,
    #[serde(default)]
    distinctive_elements: Vec<String>,
}

/// One structured model call over the pair. A match carries no elements.
pub fn compare_scenes(
    original: &ImageHandle,
    candidate: &ImageHandle,
    vision: &dyn VisionModel,
) -> Result<(SceneVerdict, Vec<String>), ReverseSearchError> {
    let req = VisionRequest::new(
        Purpose::CompareScenes,
        vec![original.clone(), candidate.clone()],
        SCENE_PROMPT,
    )
    .structured(SCENE_SCHEMA_NAME);
    let (reply, _) = request_structured::<SceneReply>(vision, &req, SCENE_MAX_ATTEMPTS)?;
    let elements = match reply.verdict {
        SceneVerdict::Match => Vec::new(),
        _ => reply
            .distinctive_elements
            .into_iter()
            .map(|e| e.trim().to_string())
            .filter(|e| !e.is_empty())
            .collect(),
    };
    Ok((reply.verdict, elements))
}

/// Fetches each candidate's page for clues and compares its thumbnail
/// with the query. Candidates are processed concurrently; a page that
/// cannot be fetched or a scene reply that never validates is recorded on
/// the candidate, while other provider failures abort.
pub fn enrich_candidates(
    image: &ImageHandle,
    candidates: Vec<SearchCandidate>,
    providers: &Providers,
    cfg: &ReverseSearchConfig,
) -> Result<Vec<SearchCandidate>, ProviderError> {
    let limit = cfg.max_enriched.min(candidates.len());
    let mut candidates = candidates;
    candidates.truncate(limit);
    candidates
        .into_par_iter()
        .map(|mut c| {
            match providers.fetcher.fetch_page(&c.hit.source_url) {
                Ok(page) => {
                    let mut clues = extract_page_clues(&page.html, &page.final_url);
                    if cfg.clue_mode == ClueMode::Lvlm {
                        for item in extract_page_clues_lvlm(&page.html, &page.final_url, providers.vision.as_ref()) {
                            if !clues.iter().any(|c| c.primary() == item.primary()) {
                                clues.push(item);
                            }
                        }
                    }
                    c.page_clues = clues;
                    c.page_coordinates = page_coordinates(&page.html);
                }
                Err(e @ ProviderError::BudgetExhausted(_)) => return Err(e),
                Err(e) => {
                    log::info!("skipping page {}: {e}", c.hit.source_url);
                    c.fetch_error = Some(e.to_string());
                }
            }
            if cfg.compare_scenes {
                match compare_scenes(image, &c.hit.thumbnail, providers.vision.as_ref()) {
                    Ok((verdict, elements)) => {
                        c.scene_match = Some(verdict);
                        c.distinctive_elements = elements;
                    }
                    Err(ReverseSearchError::Provider(e)) => return Err(e),
                    Err(e @ ReverseSearchError::Schema { .. }) => {
                        log::info!("scene comparison for {} gave no verdict: {e}", c.hit.source_url);
                    }
                }
            }
            Ok(c)
        })
        .collect()
}

/// Search, filter, enrichment and report for one image.
pub fn analyze_image(
    image: &ImageHandle,
    providers: &Providers,
    cfg: &ReverseSearchConfig,
) -> Result<AnalysisReport, ProviderError> {
    let found = run_reverse_search(
        image,
        cfg.engine,
        providers.search.as_ref(),
        providers.search_embedder.as_ref(),
        cfg.tau_rs,
    )?;
    let enriched = enrich_candidates(image, found, providers, cfg)?;
    Ok(build_report(image.id(), enriched))
}

/// Pooled crop search, enrichment against the full image, and report.
pub fn analyze_crops(
    image: &ImageHandle,
    crops: &[(ImageHandle, String)],
    providers: &Providers,
    cfg: &ReverseSearchConfig,
) -> Result<AnalysisReport, ProviderError> {
    let found = run_pooled_search(
        crops,
        cfg.engine,
        providers.search.as_ref(),
        providers.search_embedder.as_ref(),
        cfg.tau_rs,
    )?;
    let enriched = enrich_candidates(image, found, providers, cfg)?;
    Ok(build_report(image.id(), enriched))
}
