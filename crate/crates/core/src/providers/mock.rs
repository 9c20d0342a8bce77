//! Scripted offline providers.
//!
//! A fixture file scripts every service by key:
//!
//! ```json
//! {
//!   "vision":  { "img_a|direct": ["Paris, Île-de-France, France"],
//!                "img_a|cues":   [{"landmarks_present": true, "...": "..."}],
//!                "*|judge":      ["yes"] },
//!   "embeddings": { "dimension": 512,
//!                   "vectors": { "text:brick facade": {"sparse": [[0, 1.0]]},
//!                                "image:img_b": [0.6, 0.8] } },
//!   "searches": { "img_b": { "hits": [{"thumbnail": "h1", "source_url": "https://a.example/x"}] } },
//!   "pages": { "https://a.example/x": "<html>...</html>" }
//! }
//! ```
//!
//! Vision keys are `"<image ids joined by +>|<purpose>"`; lookup falls back
//! to the first image's id, then its digest, then `"*|<purpose>"`. A key
//! with several replies answers them in order and repeats the last one.
//! A reply object of the form `{"error": "quota"}` scripts a failure; any
//! other JSON value is returned as its serialized text.
//!
//! Unscripted embeddings are pseudo-random unit vectors seeded by the
//! content digest (image) or text, so they are repeatable. Unscripted
//! searches return no hits; unscripted vision keys and pages fail with a
//! transport error.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{
    Embedder, EmbeddingVector, Engine, ErrorKind, FetchedPage, ImageSearch, PageFetcher, ProviderError, Providers,
    Purpose, SearchHit, VisionModel, VisionRequest,
};
use crate::imaging::ImageHandle;

pub const MOCK_SPACE: &str = "mock";

#[derive(Clone, Debug, PartialEq)]
pub enum ScriptedReply {
    Text(String),
    Fail(ErrorKind),
}

impl<'de> Deserialize<'de> for ScriptedReply {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(ScriptedReply::from(Value::deserialize(d)?))
    }
}

impl From<Value> for ScriptedReply {
    fn from(value: Value) -> Self {
        match value {
            Value::String(s) => ScriptedReply::Text(s),
            Value::Object(ref map) if map.len() == 1 && map.contains_key("error") => {
                let kind = match map["error"].as_str().unwrap_or("transport") {
                    "auth" => ErrorKind::Auth,
                    "quota" => ErrorKind::Quota,
                    "timeout" => ErrorKind::Timeout,
                    _ => ErrorKind::Transport,
                };
                ScriptedReply::Fail(kind)
            }
            other => ScriptedReply::Text(other.to_string()),
        }
    }
}

impl From<&str> for ScriptedReply {
    fn from(s: &str) -> Self {
        ScriptedReply::Text(s.to_string())
    }
}

impl From<String> for ScriptedReply {
    fn from(s: String) -> Self {
        ScriptedReply::Text(s)
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<ScriptedReply>, D::Error> {
    Ok(match Value::deserialize(d)? {
        Value::Array(items) => items.into_iter().map(ScriptedReply::from).collect(),
        single => vec![ScriptedReply::from(single)],
    })
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(transparent)]
pub struct ReplySequence(#[serde(deserialize_with = "one_or_many")] pub Vec<ScriptedReply>);

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum VectorScript {
    Dense(Vec<f64>),
    Sparse { sparse: Vec<(usize, f64)> },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default)]
pub struct EmbeddingFixtures {
    pub dimension: usize,
    pub space_id: String,
    pub vectors: BTreeMap<String, VectorScript>,
}

impl Default for EmbeddingFixtures {
    fn default() -> Self {
        Self {
            dimension: 512,
            space_id: MOCK_SPACE.to_string(),
            vectors: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
pub struct HitScript {
    pub thumbnail: String,
    pub source_url: String,
    #[serde(default)]
    pub page_title: String,
}

#[derive(Clone, Debug, Default, Deserialize)]
pub struct SearchScript {
    #[serde(default)]
    pub hits: Vec<HitScript>,
    #[serde(default)]
    pub captcha: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum PageScript {
    Html(String),
    Full { html: String, final_url: String },
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default)]
pub struct MockFixtures {
    pub vision: BTreeMap<String, ReplySequence>,
    pub embeddings: EmbeddingFixtures,
    pub searches: BTreeMap<String, SearchScript>,
    pub pages: BTreeMap<String, PageScript>,
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("cannot read fixtures {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid fixtures: {0}")]
    Parse(#[from] serde_json::Error),
}

impl MockFixtures {
    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        let text = std::fs::read_to_string(path).map_err(|source| FixtureError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn with_vision<I, R>(mut self, key: &str, replies: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: Into<ScriptedReply>,
    {
        self.vision
            .entry(key.to_string())
            .or_default()
            .0
            .extend(replies.into_iter().map(Into::into));
        self
    }

    pub fn with_vision_json(self, key: &str, reply: Value) -> Self {
        self.with_vision(key, [ScriptedReply::from(reply)])
    }

    pub fn with_vision_error(self, key: &str, kind: ErrorKind) -> Self {
        self.with_vision(key, [ScriptedReply::Fail(kind)])
    }

    pub fn with_dimension(mut self, dimension: usize) -> Self {
        self.embeddings.dimension = dimension;
        self
    }

    /// `key` is `"text:<text>"` or `"image:<id or digest>"`, with `*` as a
    /// wildcard for the part after the colon.
    pub fn with_vector(mut self, key: &str, values: Vec<f64>) -> Self {
        self.embeddings
            .vectors
            .insert(key.to_string(), VectorScript::Dense(values));
        self
    }

    pub fn with_sparse_vector(mut self, key: &str, entries: Vec<(usize, f64)>) -> Self {
        self.embeddings
            .vectors
            .insert(key.to_string(), VectorScript::Sparse { sparse: entries });
        self
    }

    pub fn with_search(mut self, image_key: &str, hits: Vec<HitScript>) -> Self {
        self.searches
            .insert(image_key.to_string(), SearchScript { hits, captcha: false });
        self
    }

    pub fn with_captcha(mut self, image_key: &str) -> Self {
        self.searches.insert(
            image_key.to_string(),
            SearchScript {
                hits: Vec::new(),
                captcha: true,
            },
        );
        self
    }

    pub fn with_page(mut self, url: &str, html: &str) -> Self {
        self.pages.insert(url.to_string(), PageScript::Html(html.to_string()));
        self
    }
}

impl HitScript {
    pub fn new(thumbnail: &str, source_url: &str, page_title: &str) -> Self {
        Self {
            thumbnail: thumbnail.to_string(),
            source_url: source_url.to_string(),
            page_title: page_title.to_string(),
        }
    }
}

/// Scripted vision model.
#[derive(Debug)]
pub struct MockVision {
    script: BTreeMap<String, ReplySequence>,
    cursor: Mutex<HashMap<String, usize>>,
    calls: Mutex<Vec<(String, Purpose)>>,
}

impl MockVision {
    pub fn new(script: BTreeMap<String, ReplySequence>) -> Self {
        Self {
            script,
            cursor: Mutex::new(HashMap::new()),
            calls: Mutex::new(Vec::new()),
        }
    }

    fn resolve(&self, req: &VisionRequest) -> Option<String> {
        let purpose = req.purpose.as_str();
        let mut candidates = Vec::new();
        if !req.images.is_empty() {
            let joined = req.images.iter().map(ImageHandle::id).collect::<Vec<_>>().join("+");
            candidates.push(format!("{joined}|{purpose}"));
            candidates.push(format!("{}|{purpose}", req.images[0].id()));
            candidates.push(format!("{}|{purpose}", req.images[0].digest()));
        }
        candidates.push(format!("*|{purpose}"));
        candidates.into_iter().find(|k| self.script.contains_key(k))
    }

    /// Number of calls made for `purpose`.
    pub fn calls_for(&self, purpose: Purpose) -> usize {
        self.calls.lock().unwrap().iter().filter(|(_, p)| *p == purpose).count()
    }

    pub fn total_calls(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    /// Resolved keys of every call, in order.
    pub fn call_log(&self) -> Vec<(String, Purpose)> {
        self.calls.lock().unwrap().clone()
    }
}

impl VisionModel for MockVision {
    fn chat_vision(&self, req: &VisionRequest) -> Result<String, ProviderError> {
        req.validate()?;
        let key = self.resolve(req);
        self.calls
            .lock()
            .unwrap()
            .push((key.clone().unwrap_or_else(|| "<unscripted>".into()), req.purpose));
        let Some(key) = key else {
            let first = req.images.first().map(ImageHandle::id).unwrap_or("*");
            return Err(ProviderError::transport(format!(
                "no mock script for {first}|{}",
                req.purpose
            )));
        };
        let replies = &self.script[&key].0;
        if replies.is_empty() {
            return Err(ProviderError::transport(format!("empty mock script for {key}")));
        }
        let index = {
            let mut cursor = self.cursor.lock().unwrap();
            let slot = cursor.entry(key).or_insert(0);
            let i = (*slot).min(replies.len() - 1);
            *slot += 1;
            i
        };
        match &replies[index] {
            ScriptedReply::Text(t) => Ok(t.clone()),
            ScriptedReply::Fail(kind) => Err(ProviderError::service(*kind, "scripted failure")),
        }
    }
}

/// Deterministic embedder: scripted vectors, otherwise seeded noise.
#[derive(Debug)]
pub struct MockEmbedder {
    fixtures: EmbeddingFixtures,
    calls: Mutex<u64>,
}

impl MockEmbedder {
    pub fn new(fixtures: EmbeddingFixtures) -> Self {
        Self {
            fixtures,
            calls: Mutex::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        *self.calls.lock().unwrap()
    }

    fn scripted(&self, keys: &[String]) -> Option<Result<EmbeddingVector, ProviderError>> {
        let script = keys.iter().find_map(|k| self.fixtures.vectors.get(k))?;
        let dim = self.fixtures.dimension;
        let values = match script {
            VectorScript::Dense(v) => v.clone(),
            VectorScript::Sparse { sparse } => {
                let mut v = vec![0.0; dim];
                for &(i, x) in sparse {
                    if i >= dim {
                        return Some(Err(ProviderError::DimensionMismatch(format!(
                            "sparse index {i} outside dimension {dim}"
                        ))));
                    }
                    v[i] = x;
                }
                v
            }
        };
        if values.len() != dim {
            return Some(Err(ProviderError::DimensionMismatch(format!(
                "scripted vector has {} values, space has {dim}",
                values.len()
            ))));
        }
        Some(EmbeddingVector::normalized(values, self.fixtures.space_id.clone()))
    }

    fn seeded(&self, seed_material: &str) -> Result<EmbeddingVector, ProviderError> {
        let seed: [u8; 32] = Sha256::digest(seed_material.as_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let values: Vec<f64> = (0..self.fixtures.dimension)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        EmbeddingVector::normalized(values, self.fixtures.space_id.clone())
    }
}

impl Embedder for MockEmbedder {
    fn space_id(&self) -> &str {
        &self.fixtures.space_id
    }

    fn embed_image(&self, image: &ImageHandle) -> Result<EmbeddingVector, ProviderError> {
        *self.calls.lock().unwrap() += 1;
        let keys = [
            format!("image:{}", image.id()),
            format!("image:{}", image.digest()),
            "image:*".to_string(),
        ];
        self.scripted(&keys)
            .unwrap_or_else(|| self.seeded(&format!("image:{}", image.digest())))
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        *self.calls.lock().unwrap() += 1;
        let keys = [format!("text:{text}"), "text:*".to_string()];
        self.scripted(&keys)
            .unwrap_or_else(|| self.seeded(&format!("text:{text}")))
    }
}

/// Scripted reverse image search.
#[derive(Debug)]
pub struct MockSearch {
    scripts: BTreeMap<String, SearchScript>,
    max_hits: usize,
    calls: Mutex<u64>,
}

impl MockSearch {
    pub fn new(scripts: BTreeMap<String, SearchScript>, max_hits: usize) -> Self {
        Self {
            scripts,
            max_hits,
            calls: Mutex::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        *self.calls.lock().unwrap()
    }
}

/// Small solid thumbnail whose colour derives from its id.
pub fn fixture_thumbnail(id: &str) -> ImageHandle {
    let d = Sha256::digest(id.as_bytes());
    ImageHandle::solid(id, 8, 8, [d[0], d[1], d[2], 255])
}

impl ImageSearch for MockSearch {
    fn search_by_image(&self, image: &ImageHandle, engine: Engine) -> Result<Vec<SearchHit>, ProviderError> {
        *self.calls.lock().unwrap() += 1;
        let script = self
            .scripts
            .get(image.id())
            .or_else(|| self.scripts.get(image.digest()));
        let Some(script) = script else {
            return Ok(Vec::new());
        };
        if script.captcha {
            return Err(ProviderError::CaptchaDetected {
                engine: engine.to_string(),
            });
        }
        Ok(script
            .hits
            .iter()
            .take(self.max_hits)
            .enumerate()
            .map(|(i, h)| SearchHit {
                thumbnail: fixture_thumbnail(&h.thumbnail),
                source_url: h.source_url.clone(),
                page_title: h.page_title.clone(),
                rank: i as u32 + 1,
            })
            .collect())
    }
}

#[derive(Debug)]
pub struct MockFetcher {
    pages: BTreeMap<String, PageScript>,
    calls: Mutex<u64>,
}

impl MockFetcher {
    pub fn new(pages: BTreeMap<String, PageScript>) -> Self {
        Self {
            pages,
            calls: Mutex::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        *self.calls.lock().unwrap()
    }
}

impl PageFetcher for MockFetcher {
    fn fetch_page(&self, url: &str) -> Result<FetchedPage, ProviderError> {
        *self.calls.lock().unwrap() += 1;
        match self.pages.get(url) {
            Some(PageScript::Html(html)) => Ok(FetchedPage {
                html: html.clone(),
                final_url: url.to_string(),
            }),
            Some(PageScript::Full { html, final_url }) => Ok(FetchedPage {
                html: html.clone(),
                final_url: final_url.clone(),
            }),
            None => Err(ProviderError::transport(format!("no mock page for {url}"))),
        }
    }
}

/// All four mocks built from one fixture set, with handles kept for
/// call-count assertions.
#[derive(Clone)]
pub struct MockSuite {
    pub vision: Arc<MockVision>,
    pub embedder: Arc<MockEmbedder>,
    pub search: Arc<MockSearch>,
    pub fetcher: Arc<MockFetcher>,
}

impl MockSuite {
    pub const DEFAULT_MAX_HITS: usize = 20;

    pub fn new(fixtures: MockFixtures) -> Self {
        Self {
            vision: Arc::new(MockVision::new(fixtures.vision)),
            embedder: Arc::new(MockEmbedder::new(fixtures.embeddings)),
            search: Arc::new(MockSearch::new(fixtures.searches, Self::DEFAULT_MAX_HITS)),
            fetcher: Arc::new(MockFetcher::new(fixtures.pages)),
        }
    }

    pub fn providers(&self) -> Providers {
        Providers {
            vision: self.vision.clone(),
            geo_embedder: self.embedder.clone(),
            search_embedder: self.embedder.clone(),
            search: self.search.clone(),
            fetcher: self.fetcher.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(id: &str) -> ImageHandle {
        ImageHandle::solid(id, 4, 4, [9, 9, 9, 255])
    }

    #[test]
    fn scripted_direct_reply() {
        let suite =
            MockSuite::new(MockFixtures::default().with_vision("img_a|direct", ["Paris, Île-de-France, France"]));
        let req = VisionRequest::new(Purpose::Direct, vec![img("img_a")], "Where was the photo taken?");
        assert_eq!(suite.vision.chat_vision(&req).unwrap(), "Paris, Île-de-France, France");
    }

    #[test]
    fn unscripted_key_is_transport_error() {
        let suite = MockSuite::new(MockFixtures::default());
        let req = VisionRequest::new(Purpose::Direct, vec![img("img_z")], "Where?");
        let err = suite.vision.chat_vision(&req).unwrap_err();
        assert_eq!(err.kind(), Some(ErrorKind::Transport));
    }

    #[test]
    fn replies_advance_then_repeat() {
        let suite = MockSuite::new(MockFixtures::default().with_vision("*|judge", ["no", "yes"]));
        let req = VisionRequest::new(Purpose::Judge, vec![], "same?");
        let got: Vec<_> = (0..3).map(|_| suite.vision.chat_vision(&req).unwrap()).collect();
        assert_eq!(got, ["no", "yes", "yes"]);
        assert_eq!(suite.vision.calls_for(Purpose::Judge), 3);
    }

    #[test]
    fn scripted_error_entries() {
        let fx: MockFixtures = serde_json::from_str(r#"{"vision": {"a|direct": {"error": "quota"}}}"#).unwrap();
        let suite = MockSuite::new(fx);
        let req = VisionRequest::new(Purpose::Direct, vec![img("a")], "Where?");
        assert_eq!(
            suite.vision.chat_vision(&req).unwrap_err().kind(),
            Some(ErrorKind::Quota)
        );
    }

    #[test]
    fn object_replies_serialize() {
        let fx: MockFixtures = serde_json::from_str(r#"{"vision": {"a|cues": [{"scene_type": "urban"}]}}"#).unwrap();
        let suite = MockSuite::new(fx);
        let req = VisionRequest::new(Purpose::Cues, vec![img("a")], "cues");
        assert_eq!(suite.vision.chat_vision(&req).unwrap(), r#"{"scene_type":"urban"}"#);
    }

    #[test]
    fn seeded_embeddings_repeat() {
        let suite = MockSuite::new(MockFixtures::default());
        let a = suite.embedder.embed_image(&img("x")).unwrap();
        let b = suite.embedder.embed_image(&img("y")).unwrap();
        assert_eq!(a, b, "same pixels, same vector");
        assert_eq!(a.dimension(), 512);
        let t1 = suite.embedder.embed_text("brick facade").unwrap();
        let t2 = suite.embedder.embed_text("brick facade").unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, suite.embedder.embed_text("tram lines").unwrap());
    }

    #[test]
    fn scripted_vectors_are_normalized() {
        let suite = MockSuite::new(
            MockFixtures::default()
                .with_dimension(3)
                .with_sparse_vector("text:a", vec![(0, 2.0)])
                .with_vector("image:*", vec![0.0, 3.0, 4.0]),
        );
        assert_eq!(suite.embedder.embed_text("a").unwrap().values(), &[1.0, 0.0, 0.0]);
        assert_eq!(
            suite.embedder.embed_image(&img("q")).unwrap().values(),
            &[0.0, 0.6, 0.8]
        );
    }

    #[test]
    fn search_fixtures() {
        let hits = (1..=5)
            .map(|i| HitScript::new(&format!("h{i}"), &format!("https://s{i}.example/p"), ""))
            .collect();
        let suite = MockSuite::new(MockFixtures::default().with_search("img_b", hits).with_captcha("img_c"));
        let got = suite.search.search_by_image(&img("img_b"), Engine::Yandex).unwrap();
        assert_eq!(got.iter().map(|h| h.rank).collect::<Vec<_>>(), [1, 2, 3, 4, 5]);
        assert!(matches!(
            suite.search.search_by_image(&img("img_c"), Engine::Yandex),
            Err(ProviderError::CaptchaDetected { .. })
        ));
        assert!(suite
            .search
            .search_by_image(&img("img_d"), Engine::Yandex)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn page_fixtures() {
        let suite = MockSuite::new(MockFixtures::default().with_page("https://a.example/", "<p>x</p>"));
        assert_eq!(suite.fetcher.fetch_page("https://a.example/").unwrap().html, "<p>x</p>");
        assert!(suite.fetcher.fetch_page("https://b.example/").is_err());
    }
}
