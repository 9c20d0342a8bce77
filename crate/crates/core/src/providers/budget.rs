//! Call counting and budget enforcement around a [`Providers`] bundle.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{
    Embedder, EmbeddingVector, Engine, FetchedPage, ImageSearch, PageFetcher, ProviderError, Providers, SearchHit,
    VisionModel, VisionRequest,
};
use crate::imaging::ImageHandle;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CallCounts {
    pub vision: u64,
    pub embed: u64,
    pub search: u64,
    pub fetch: u64,
}

impl CallCounts {
    pub fn total(&self) -> u64 {
        self.vision + self.embed + self.search + self.fetch
    }
}

impl std::ops::AddAssign for CallCounts {
    fn add_assign(&mut self, rhs: CallCounts) {
        self.vision += rhs.vision;
        self.embed += rhs.embed;
        self.search += rhs.search;
        self.fetch += rhs.fetch;
    }
}

/// Shared meter. Every wrapped call first reserves one unit of the call
/// limit and checks the wall-clock deadline.
#[derive(Debug)]
pub struct BudgetMeter {
    call_limit: Option<u64>,
    deadline: Option<Instant>,
    vision: AtomicU64,
    embed: AtomicU64,
    search: AtomicU64,
    fetch: AtomicU64,
}

#[derive(Clone, Copy)]
enum Channel {
    Vision,
    Embed,
    Search,
    Fetch,
}

impl BudgetMeter {
    pub fn new(call_limit: Option<u64>, wall_clock: Option<Duration>) -> Self {
        Self {
            call_limit,
            deadline: wall_clock.map(|d| Instant::now() + d),
            vision: AtomicU64::new(0),
            embed: AtomicU64::new(0),
            search: AtomicU64::new(0),
            fetch: AtomicU64::new(0),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(None, None)
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            vision: self.vision.load(Ordering::SeqCst),
            embed: self.embed.load(Ordering::SeqCst),
            search: self.search.load(Ordering::SeqCst),
            fetch: self.fetch.load(Ordering::SeqCst),
        }
    }

    pub fn used(&self) -> u64 {
        self.counts().total()
    }

    /// Why no further call may be made, if so.
    pub fn exhausted(&self) -> Option<String> {
        if let Some(limit) = self.call_limit {
            if self.used() >= limit {
                return Some(format!("provider call limit {limit} reached"));
            }
        }
        if let Some(deadline) = self.deadline {
            if Instant::now() >= deadline {
                return Some("wall-clock limit reached".to_string());
            }
        }
        None
    }

    fn reserve(&self, channel: Channel) -> Result<(), ProviderError> {
        if let Some(reason) = self.exhausted() {
            return Err(ProviderError::BudgetExhausted(reason));
        }
        let counter = match channel {
            Channel::Vision => &self.vision,
            Channel::Embed => &self.embed,
            Channel::Search => &self.search,
            Channel::Fetch => &self.fetch,
        };
        counter.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }
}

struct Metered<T: ?Sized> {
    inner: Arc<T>,
    meter: Arc<BudgetMeter>,
}

impl VisionModel for Metered<dyn VisionModel> {
    fn chat_vision(&self, req: &VisionRequest) -> Result<String, ProviderError> {
        self.meter.reserve(Channel::Vision)?;
        self.inner.chat_vision(req)
    }
}

impl Embedder for Metered<dyn Embedder> {
    fn space_id(&self) -> &str {
        self.inner.space_id()
    }

    fn embed_image(&self, image: &ImageHandle) -> Result<EmbeddingVector, ProviderError> {
        self.meter.reserve(Channel::Embed)?;
        self.inner.embed_image(image)
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        self.meter.reserve(Channel::Embed)?;
        self.inner.embed_text(text)
    }
}

impl ImageSearch for Metered<dyn ImageSearch> {
    fn search_by_image(&self, image: &ImageHandle, engine: Engine) -> Result<Vec<SearchHit>, ProviderError> {
        self.meter.reserve(Channel::Search)?;
        self.inner.search_by_image(image, engine)
    }
}

impl PageFetcher for Metered<dyn PageFetcher> {
    fn fetch_page(&self, url: &str) -> Result<FetchedPage, ProviderError> {
        self.meter.reserve(Channel::Fetch)?;
        self.inner.fetch_page(url)
    }
}

impl Providers {
    /// Wraps every provider so that calls are counted against `meter`.
    pub fn metered(&self, meter: Arc<BudgetMeter>) -> Providers {
        Providers {
            vision: Arc::new(Metered {
                inner: self.vision.clone(),
                meter: meter.clone(),
            }),
            geo_embedder: Arc::new(Metered {
                inner: self.geo_embedder.clone(),
                meter: meter.clone(),
            }),
            search_embedder: Arc::new(Metered {
                inner: self.search_embedder.clone(),
                meter: meter.clone(),
            }),
            search: Arc::new(Metered {
                inner: self.search.clone(),
                meter: meter.clone(),
            }),
            fetcher: Arc::new(Metered {
                inner: self.fetcher.clone(),
                meter,
            }),
        }
    }
}
