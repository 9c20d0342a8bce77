//! Experience-augmented prompting.
//!
//! Image patches are compared against a catalog of geographic element
//! phrases in a shared image/text embedding space. The strongest elements
//! feed a vision-model loop that rewrites a ground-truth location prompt;
//! a rewrite that scores higher than the ground truth is stored in a
//! memory and later reused for visually similar images.

mod grid;
mod store;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{ImageHandle, Rect};
use crate::model::GeoLabel;
use crate::providers::{Embedder, EmbeddingVector, ProviderError, Purpose, VisionModel, VisionRequest};

pub use grid::{similarity_grid, SimilarityGrid};
pub use store::{MemoryHit, MemoryStore, STORE_MAGIC, STORE_VERSION};

pub const DEFAULT_CATALOG: &str = include_str!("../../assets/geo_elements.toml");
pub const REFINE_TEMPLATE: &str = include_str!("../../assets/refine_prompt.txt");

pub const DEFAULT_WINDOW: u32 = 224;
pub const DEFAULT_STRIDE: u32 = 112;
pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_MEMORY_THRESHOLD: f64 = 0.85;
pub const REFINE_ITERATIONS: u32 = 3;

#[derive(Debug, Error)]
pub enum ExperienceError {
    #[error("embedding mismatch: {0}")]
    DimensionMismatch(String),
    #[error("window {window}px does not fit a {width}x{height} image")]
    WindowTooLarge { window: u32, width: u32, height: u32 },
    #[error("stride must be between 1 and the window size, got {stride} for window {window}")]
    InvalidStride { window: u32, stride: u32 },
    #[error("invalid element catalog: {0}")]
    InvalidCatalog(String),
    #[error("label needs at least a country to build a prompt")]
    LabelWithoutCountry,
    #[error("memory store is corrupt: {0}")]
    StoreCorrupt(String),
    #[error("memory store I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Cosine similarity of two raw vectors, clamped to `[-1, 1]`. Zero
/// vectors give 0.
pub fn cosine_raw(u: &[f64], v: &[f64]) -> f64 {
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let denom = nu.sqrt() * nv.sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (dot / denom).clamp(-1.0, 1.0)
}

pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, ExperienceError> {
    if u.space_id() != v.space_id() {
        return Err(ExperienceError::DimensionMismatch(format!(
            "space {} vs {}",
            u.space_id(),
            v.space_id()
        )));
    }
    if u.dimension() != v.dimension() {
        return Err(ExperienceError::DimensionMismatch(format!(
            "dimension {} vs {}",
            u.dimension(),
            v.dimension()
        )));
    }
    Ok(cosine_raw(u.values(), v.values()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementCategory {
    Architectural,
    Infrastructure,
    Environmental,
    UrbanPlanning,
    Signage,
}

impl ElementCategory {
    pub const ALL: [ElementCategory; 5] = [
        ElementCategory::Architectural,
        ElementCategory::Infrastructure,
        ElementCategory::Environmental,
        ElementCategory::UrbanPlanning,
        ElementCategory::Signage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ElementCategory::Architectural => "architectural",
            ElementCategory::Infrastructure => "infrastructure",
            ElementCategory::Environmental => "environmental",
            ElementCategory::UrbanPlanning => "urban_planning",
            ElementCategory::Signage => "signage",
        }
    }
}

impl fmt::Display for ElementCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Element phrases grouped by category. Iteration order (category order,
/// then file order within a category) is the "catalog order" used to break
/// ranking ties.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeoElementCatalog {
    categories: BTreeMap<ElementCategory, Vec<String>>,
}

impl GeoElementCatalog {
    pub fn new(categories: BTreeMap<ElementCategory, Vec<String>>) -> Result<Self, ExperienceError> {
        for cat in ElementCategory::ALL {
            let phrases = categories
                .get(&cat)
                .ok_or_else(|| ExperienceError::InvalidCatalog(format!("category {cat} missing")))?;
            if phrases.is_empty() {
                return Err(ExperienceError::InvalidCatalog(format!("category {cat} is empty")));
            }
            if phrases.iter().any(|p| p.trim().is_empty()) {
                return Err(ExperienceError::InvalidCatalog(format!(
                    "category {cat} has an empty phrase"
                )));
            }
        }
        let categories = categories
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().map(|p| p.trim().to_string()).collect()))
            .collect();
        Ok(Self { categories })
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperienceError> {
        let raw: BTreeMap<ElementCategory, Vec<String>> =
            toml::from_str(text).map_err(|e| ExperienceError::InvalidCatalog(e.to_string()))?;
        Self::new(raw)
    }

    pub fn load(path: &Path) -> Result<Self, ExperienceError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// The shipped catalog.
    pub fn builtin() -> Self {
        Self::from_toml(DEFAULT_CATALOG).expect("bundled catalog is valid")
    }

    /// Every (category, phrase) in catalog order.
    pub fn entries(&self) -> Vec<(ElementCategory, &str)> {
        self.categories
            .iter()
            .flat_map(|(c, ps)| ps.iter().map(move |p| (*c, p.as_str())))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.categories.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Catalog phrases that occur (case-insensitively) in `text`.
    pub fn mentioned_in(&self, text: &str) -> Vec<(ElementCategory, String)> {
        let lower = text.to_lowercase();
        self.entries()
            .into_iter()
            .filter(|(_, p)| lower.contains(&p.to_lowercase()))
            .map(|(c, p)| (c, p.to_string()))
            .collect()
    }
}

/// Patch layout for ranking and heat grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub window: u32,
    pub stride: u32,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
        }
    }
}

impl PatchSpec {
    /// Shrinks the window (and stride with it) so it fits `image`.
    pub fn fitted_to(self, image: &ImageHandle) -> PatchSpec {
        let window = self.window.min(image.width()).min(image.height()).max(1);
        PatchSpec {
            window,
            stride: self.stride.min(window).max(1),
        }
    }
}

fn positions(len: u32, window: u32, stride: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut p = 0;
    loop {
        if p + window >= len {
            out.push(len - window);
            return out;
        }
        out.push(p);
        p += stride;
    }
}

/// Sliding-window boxes covering the image, in reading order. The last
/// row and column are anchored to the image edge.
pub fn patch_boxes(width: u32, height: u32, spec: PatchSpec) -> Result<(Vec<u32>, Vec<u32>), ExperienceError> {
    if spec.window == 0 || spec.window > width || spec.window > height {
        return Err(ExperienceError::WindowTooLarge {
            window: spec.window,
            width,
            height,
        });
    }
    if spec.stride == 0 || spec.stride > spec.window {
        return Err(ExperienceError::InvalidStride {
            window: spec.window,
            stride: spec.stride,
        });
    }
    Ok((
        positions(height, spec.window, spec.stride),
        positions(width, spec.window, spec.stride),
    ))
}

pub fn patch_grid(image: &ImageHandle, spec: PatchSpec) -> Result<Vec<(Rect, ImageHandle)>, ExperienceError> {
    let (ys, xs) = patch_boxes(image.width(), image.height(), spec)?;
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            let rect = Rect::new(x, y, spec.window, spec.window);
            let patch = image.crop(rect).expect("patch boxes lie inside the image");
            out.push((rect, patch));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedElement {
    pub category: ElementCategory,
    pub phrase: String,
    pub best_patch: Rect,
    pub score: f64,
}

/// Embeds every patch once and returns them with their boxes.
pub fn embed_patches(
    image: &ImageHandle,
    spec: PatchSpec,
    embedder: &dyn Embedder,
) -> Result<Vec<(Rect, EmbeddingVector)>, ExperienceError> {
    patch_grid(image, spec)?
        .into_iter()
        .map(|(rect, patch)| Ok((rect, embedder.embed_image(&patch)?)))
        .collect()
}

/// Scores every catalog phrase by its best-matching patch and returns the
/// top `k`, highest first, ties in catalog order.
pub fn rank_elements(
    image: &ImageHandle,
    catalog: &GeoElementCatalog,
    k: usize,
    spec: PatchSpec,
    embedder: &dyn Embedder,
) -> Result<Vec<RankedElement>, ExperienceError> {
    let patches = embed_patches(image, spec, embedder)?;
    let mut ranked = Vec::with_capacity(catalog.len());
    for (category, phrase) in catalog.entries() {
        let text = embedder.embed_text(phrase)?;
        let mut best: Option<(Rect, f64)> = None;
        for (rect, patch) in &patches {
            let s = cosine_similarity(patch, &text)?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((*rect, s));
            }
        }
        let (best_patch, score) = best.expect("patch grid is never empty");
        ranked.push(RankedElement {
            category,
            phrase: phrase.to_string(),
            best_patch,
            score,
        });
    }
    // stable sort keeps catalog order among equal scores
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    ranked.truncate(k);
    Ok(ranked)
}

/// An optimized prompt bound to the image it was optimized for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub image_embedding: EmbeddingVector,
    pub prompt: String,
    pub similarity: f64,
    pub elements_used: Vec<(ElementCategory, String)>,
    pub source_image_id: String,
    /// Refinement round (1-based) that produced the prompt.
    pub iteration: u32,
}

/// `"This image was taken in {city}, {region}, {country}"` with absent
/// levels left out.
pub fn ground_truth_prompt(label: &GeoLabel) -> Result<String, ExperienceError> {
    if label.country().is_none() {
        return Err(ExperienceError::LabelWithoutCountry);
    }
    Ok(format!("This image was taken in {}", label.display_name()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub iteration: u32,
    pub prompt: String,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum OptimizeOutcome {
    Improved(PromptRecord),
    /// No candidate beat the ground-truth prompt; nothing should be stored.
    NoImprovement {
        ground_truth_similarity: f64,
        candidates: Vec<Candidate>,
    },
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimizeReport {
    pub ground_truth_prompt: String,
    pub ground_truth_similarity: f64,
    pub elements: Vec<RankedElement>,
    pub candidates: Vec<Candidate>,
    pub outcome: OptimizeOutcome,
}

fn refine_request(
    image: &ImageHandle,
    gt_prompt: &str,
    elements: &[RankedElement],
    history: &[Candidate],
    gt_similarity: f64,
) -> VisionRequest {
    let element_lines = elements
        .iter()
        .map(|e| format!("- {} ({}, score {:.3})", e.phrase, e.category, e.score))
        .collect::<Vec<_>>()
        .join("\n");
    let history_text = if history.is_empty() {
        String::new()
    } else {
        let mut h = format!("Earlier attempts (the reference prompt scores {gt_similarity:.3}):\n");
        for c in history {
            h.push_str(&format!("- score {:.3}: {}\n", c.similarity, c.prompt));
        }
        h
    };
    let prompt = REFINE_TEMPLATE
        .replace("{ground_truth}", gt_prompt)
        .replace("{elements}", &element_lines)
        .replace("{history}", &history_text);
    VisionRequest::new(Purpose::RefinePrompt, vec![image.clone()], prompt)
}

/// Runs the three-round prompt refinement for one labelled image.
///
/// Elements are ranked once and reused each round; every round sends one
/// refinement request that also lists earlier attempts and their scores.
pub fn optimize_prompt(
    image: &ImageHandle,
    label: &GeoLabel,
    catalog: &GeoElementCatalog,
    k: usize,
    spec: PatchSpec,
    vision: &dyn VisionModel,
    embedder: &dyn Embedder,
) -> Result<OptimizeReport, ExperienceError> {
    let gt_prompt = ground_truth_prompt(label)?;
    let image_embedding = embedder.embed_image(image)?;
    let s_gt = cosine_similarity(&image_embedding, &embedder.embed_text(&gt_prompt)?)?;
    let elements = rank_elements(image, catalog, k, spec.fitted_to(image), embedder)?;

    let mut candidates: Vec<Candidate> = Vec::new();
    for iteration in 1..=REFINE_ITERATIONS {
        let req = refine_request(image, &gt_prompt, &elements, &candidates, s_gt);
        let reply = vision.chat_vision(&req)?;
        let prompt = reply.trim().trim_matches('"').trim().to_string();
        if prompt.is_empty() {
            log::debug!("refinement round {iteration} returned an empty prompt");
            continue;
        }
        let similarity = cosine_similarity(&image_embedding, &embedder.embed_text(&prompt)?)?;
        candidates.push(Candidate {
            iteration,
            prompt,
            similarity,
        });
    }

    let best = candidates
        .iter()
        .filter(|c| c.similarity > s_gt)
        .fold(None::<&Candidate>, |best, c| match best {
            Some(b) if b.similarity >= c.similarity => Some(b),
            _ => Some(c),
        });
    let outcome = match best {
        Some(c) => OptimizeOutcome::Improved(PromptRecord {
            image_embedding: image_embedding.clone(),
            prompt: c.prompt.clone(),
            similarity: c.similarity,
            elements_used: catalog.mentioned_in(&c.prompt),
            source_image_id: image.id().to_string(),
            iteration: c.iteration,
        }),
        None => OptimizeOutcome::NoImprovement {
            ground_truth_similarity: s_gt,
            candidates: candidates.clone(),
        },
    };
    Ok(OptimizeReport {
        ground_truth_prompt: gt_prompt,
        ground_truth_similarity: s_gt,
        elements,
        candidates,
        outcome,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::mock::{EmbeddingFixtures, MockEmbedder, MockFixtures, MockVision};
    use proptest::prelude::*;

    fn unit(space: &str, v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalized(v.to_vec(), space).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = unit("s", &[0.6, 0.8]);
        let b = unit("s", &[1.0, 0.0]);
        let c = unit("s", &[0.0, 1.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&b, &c).unwrap().abs() < 1e-12);
        assert!((cosine_similarity(&a, &b).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_mismatch() {
        let a = unit("s", &[1.0, 0.0]);
        assert!(matches!(
            cosine_similarity(&a, &unit("s", &[1.0, 0.0, 0.0])),
            Err(ExperienceError::DimensionMismatch(_))
        ));
        assert!(matches!(
            cosine_similarity(&a, &unit("t", &[1.0, 0.0])),
            Err(ExperienceError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn patch_layouts() {
        let square = ImageHandle::solid("sq", 448, 448, [0, 0, 0, 255]);
        let spec = PatchSpec {
            window: 224,
            stride: 224,
        };
        assert_eq!(patch_grid(&square, spec).unwrap().len(), 4);

        let wide = ImageHandle::solid("w", 500, 224, [0, 0, 0, 255]);
        let xs: Vec<u32> = patch_grid(&wide, spec).unwrap().iter().map(|(r, _)| r.x).collect();
        assert_eq!(xs, [0, 224, 276]);

        let narrow = ImageHandle::solid("n", 224, 400, [0, 0, 0, 255]);
        assert!(matches!(
            patch_grid(
                &narrow,
                PatchSpec {
                    window: 300,
                    stride: 100
                }
            ),
            Err(ExperienceError::WindowTooLarge { .. })
        ));
        assert!(matches!(
            patch_grid(
                &square,
                PatchSpec {
                    window: 100,
                    stride: 150
                }
            ),
            Err(ExperienceError::InvalidStride { .. })
        ));
    }

    #[test]
    fn catalog_has_all_categories() {
        let cat = GeoElementCatalog::builtin();
        let cats: Vec<_> = cat.entries().iter().map(|(c, _)| *c).collect();
        for c in ElementCategory::ALL {
            assert!(cats.contains(&c));
        }
        assert!(GeoElementCatalog::from_toml("architectural = [\"x\"]").is_err());
        let mut text = DEFAULT_CATALOG.to_string();
        text = text.replace("\"billboard\",", "\"  \",");
        assert!(GeoElementCatalog::from_toml(&text).is_err());
    }

    fn small_catalog() -> GeoElementCatalog {
        let mut m = BTreeMap::new();
        m.insert(
            ElementCategory::Architectural,
            vec!["brick facade".into(), "roof style".into()],
        );
        m.insert(ElementCategory::Infrastructure, vec!["tram line".into()]);
        m.insert(ElementCategory::Environmental, vec!["palm trees".into()]);
        m.insert(ElementCategory::UrbanPlanning, vec!["grid street plan".into()]);
        m.insert(ElementCategory::Signage, vec!["shop sign".into()]);
        GeoElementCatalog::new(m).unwrap()
    }

    /// Embedder over a 4-dim space where every patch of "street" points
    /// along e0 except the top-left, which points along e1.
    fn scripted_embedder() -> MockEmbedder {
        let fx = MockFixtures::default()
            .with_dimension(4)
            .with_vector("image:*", vec![1.0, 0.0, 0.0, 0.0])
            .with_vector("image:street@0,0,2,2", vec![0.0, 1.0, 0.0, 0.0])
            .with_vector("text:brick facade", vec![0.9, (1.0f64 - 0.81).sqrt(), 0.0, 0.0])
            .with_vector("text:roof style", vec![0.0, 0.6, 0.8, 0.0])
            .with_vector("text:tram line", vec![0.6, 0.0, 0.0, 0.8])
            .with_vector("text:palm trees", vec![0.6, 0.0, 0.8, 0.0])
            .with_vector("text:*", vec![0.0, 0.0, 0.0, 1.0]);
        MockEmbedder::new(fx.embeddings)
    }

    #[test]
    fn ranking_uses_best_patch() {
        let img = ImageHandle::solid("street", 4, 4, [5, 5, 5, 255]);
        let emb = scripted_embedder();
        let spec = PatchSpec { window: 2, stride: 2 };
        let top = rank_elements(&img, &small_catalog(), 1, spec, &emb).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].phrase, "brick facade");
        assert!((top[0].score - 0.9).abs() < 1e-9);
        assert_ne!(top[0].best_patch, Rect::new(0, 0, 2, 2));

        let all = rank_elements(&img, &small_catalog(), 100, spec, &emb).unwrap();
        assert_eq!(all.len(), 6);
        // tram line and palm trees score 0.6 on the plain patches and roof
        // style reaches 0.6 on the top-left one. Catalog order decides.
        let tied: Vec<&str> = all[1..4].iter().map(|e| e.phrase.as_str()).collect();
        assert_eq!(tied, ["roof style", "tram line", "palm trees"]);
        assert_eq!(all[1].best_patch, Rect::new(0, 0, 2, 2));
    }

    #[test]
    fn ground_truth_prompt_levels() {
        let full = GeoLabel::place(Some("Cambridge"), Some("Massachusetts"), "United States");
        assert_eq!(
            ground_truth_prompt(&full).unwrap(),
            "This image was taken in Cambridge, Massachusetts, United States"
        );
        let no_city = GeoLabel::place(None, Some("Bavaria"), "Germany");
        assert_eq!(
            ground_truth_prompt(&no_city).unwrap(),
            "This image was taken in Bavaria, Germany"
        );
        assert!(ground_truth_prompt(&GeoLabel::default()).is_err());
    }

    /// Fixture where the image is e0 and each prompt's similarity is
    /// scripted through its text vector.
    fn optimize_fixture(scores: &[f64], gt_score: f64) -> (MockVision, MockEmbedder) {
        let gt = "This image was taken in Lisbon, Portugal";
        let with_score = |s: f64| vec![s, (1.0 - s * s).sqrt(), 0.0];
        let mut fx = MockFixtures::default()
            .with_dimension(3)
            .with_vector("image:*", vec![1.0, 0.0, 0.0])
            .with_vector("text:*", vec![0.0, 0.0, 1.0])
            .with_vector(&format!("text:{gt}"), with_score(gt_score));
        let mut replies = Vec::new();
        for (i, s) in scores.iter().enumerate() {
            let prompt = format!(
                "Candidate {} with a brick facade and tram line in Lisbon, Portugal",
                i + 1
            );
            fx = fx.with_vector(&format!("text:{prompt}"), with_score(*s));
            replies.push(prompt);
        }
        fx = fx.with_vision("tile|refine_prompt", replies);
        (MockVision::new(fx.vision), MockEmbedder::new(fx.embeddings))
    }

    fn run(scores: &[f64], gt: f64) -> (OptimizeReport, MockVision) {
        let (vision, emb) = optimize_fixture(scores, gt);
        let img = ImageHandle::solid("tile", 4, 4, [1, 1, 1, 255]);
        let label = GeoLabel::place(Some("Lisbon"), None, "Portugal");
        let report = optimize_prompt(
            &img,
            &label,
            &small_catalog(),
            DEFAULT_TOP_K,
            PatchSpec { window: 2, stride: 2 },
            &vision,
            &emb,
        )
        .unwrap();
        (report, vision)
    }

    #[test]
    fn optimize_picks_best_above_ground_truth() {
        let (report, vision) = run(&[0.41, 0.55, 0.48], 0.50);
        assert_eq!(vision.calls_for(Purpose::RefinePrompt), 3);
        let OptimizeOutcome::Improved(rec) = report.outcome else {
            panic!("expected an improved prompt");
        };
        assert_eq!(rec.iteration, 2);
        assert!((rec.similarity - 0.55).abs() < 1e-9);
        assert!(rec.prompt.starts_with("Candidate 2"));
        assert_eq!(
            rec.elements_used,
            [
                (ElementCategory::Architectural, "brick facade".to_string()),
                (ElementCategory::Infrastructure, "tram line".to_string())
            ]
        );
    }

    #[test]
    fn optimize_without_improvement() {
        let (report, vision) = run(&[0.41, 0.50, 0.48], 0.50);
        assert_eq!(vision.calls_for(Purpose::RefinePrompt), 3);
        assert!(matches!(report.outcome, OptimizeOutcome::NoImprovement { .. }));
    }

    #[test]
    fn optimize_ties_keep_earliest() {
        let (report, _) = run(&[0.6, 0.6, 0.2], 0.5);
        let OptimizeOutcome::Improved(rec) = report.outcome else {
            panic!("expected an improved prompt");
        };
        assert_eq!(rec.iteration, 1);
    }

    #[test]
    fn record_similarity_matches_recomputation() {
        let (vision, emb) = optimize_fixture(&[0.7, 0.2, 0.3], 0.5);
        let img = ImageHandle::solid("tile", 4, 4, [1, 1, 1, 255]);
        let label = GeoLabel::country_only("Portugal");
        let report = optimize_prompt(&img, &label, &small_catalog(), 2, PatchSpec::default(), &vision, &emb).unwrap();
        // the ground truth for a country-only label is unscripted: 0 similarity
        assert!(report.ground_truth_similarity.abs() < 1e-9);
        let OptimizeOutcome::Improved(rec) = report.outcome else {
            panic!("expected an improved prompt");
        };
        let again = cosine_similarity(&rec.image_embedding, &emb.embed_text(&rec.prompt).unwrap()).unwrap();
        assert!((again - rec.similarity).abs() < 1e-6);
    }

    #[test]
    fn default_fixtures_embedder_is_usable() {
        let emb = MockEmbedder::new(EmbeddingFixtures::default());
        let img = ImageHandle::solid("x", 300, 300, [0, 0, 0, 255]);
        let top = rank_elements(&img, &GeoElementCatalog::builtin(), 3, PatchSpec::default(), &emb).unwrap();
        assert_eq!(top.len(), 3);
        assert!(top[0].score >= top[1].score && top[1].score >= top[2].score);
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            u in prop::collection::vec(-10.0f64..10.0, 8),
            v in prop::collection::vec(-10.0f64..10.0, 8),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            let c = cosine_raw(&u, &v);
            prop_assert!((c - cosine_raw(&v, &u)).abs() < 1e-12);
            let su: Vec<f64> = u.iter().map(|x| x * a).collect();
            let sv: Vec<f64> = v.iter().map(|x| x * b).collect();
            prop_assert!((c - cosine_raw(&su, &sv)).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&c));
        }

        #[test]
        fn patches_cover_every_pixel(w in 1u32..60, h in 1u32..60, window in 1u32..30, stride in 1u32..30) {
            let window = window.min(w).min(h);
            let stride = stride.min(window);
            let (ys, xs) = patch_boxes(w, h, PatchSpec { window, stride }).unwrap();
            let mut covered = vec![false; (w * h) as usize];
            for &y in &ys {
                for &x in &xs {
                    prop_assert!(x + window <= w && y + window <= h);
                    for yy in y..y + window {
                        for xx in x..x + window {
                            covered[(yy * w + xx) as usize] = true;
                        }
                    }
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
        }
    }
}
