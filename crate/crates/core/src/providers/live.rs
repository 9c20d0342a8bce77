//! HTTP adapters for the provider traits.

use std::io::Read;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use ureq::ResponseExt;

use super::search_pages;
use super::throttle::Throttle;
use super::{
    classify_status, Embedder, EmbeddingVector, Engine, ErrorKind, FetchedPage, ImageSearch, PageFetcher,
    ProviderError, SearchHit, VisionModel, VisionRequest,
};
use crate::imaging::{sha256_hex, ImageHandle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpSettings {
    pub timeout_secs: f64,
    pub max_redirects: u32,
    pub max_body_bytes: u64,
    /// Extra attempts after the first for retryable failures.
    pub retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_factor: f64,
    pub max_in_flight: usize,
    /// Requests per second per endpoint; 0 disables the limit.
    pub rate_per_sec: f64,
    pub burst: usize,
    pub user_agent: String,
}

impl Default for HttpSettings {
    fn default() -> Self {
        Self {
            timeout_secs: 15.0,
            max_redirects: 5,
            max_body_bytes: 5 * 1024 * 1024,
            retries: 3,
            backoff_base_ms: 1000,
            backoff_factor: 2.0,
            max_in_flight: 4,
            rate_per_sec: 5.0,
            burst: 4,
            user_agent: "Mozilla/5.0 (X11; Linux x86_64) geoscout/0.1".to_string(),
        }
    }
}

pub struct HttpResponse {
    pub status: u16,
    pub final_url: String,
    pub body: Vec<u8>,
}

/// Shared HTTP plumbing: limits, throttling, retries and error mapping.
pub struct HttpClient {
    agent: ureq::Agent,
    settings: HttpSettings,
    throttle: Throttle,
}

impl HttpClient {
    pub fn new(settings: HttpSettings) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(settings.timeout_secs)))
            .max_redirects(settings.max_redirects)
            .http_status_as_error(false)
            .user_agent(settings.user_agent.as_str())
            .build()
            .into();
        let throttle = Throttle::new(settings.max_in_flight, settings.rate_per_sec, settings.burst);
        Self {
            agent,
            settings,
            throttle,
        }
    }

    pub fn settings(&self) -> &HttpSettings {
        &self.settings
    }

    fn read(
        &self,
        result: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<HttpResponse, ProviderError> {
        let mut resp = result.map_err(map_ureq_error)?;
        let status = resp.status().as_u16();
        let final_url = resp.get_uri().to_string();
        let limit = self.settings.max_body_bytes;
        let mut body = Vec::new();
        resp.body_mut()
            .with_config()
            .limit(limit + 1)
            .reader()
            .take(limit + 1)
            .read_to_end(&mut body)
            .map_err(|e| map_io_error(e, limit))?;
        if body.len() as u64 > limit {
            return Err(ProviderError::SizeExceeded { limit });
        }
        Ok(HttpResponse {
            status,
            final_url,
            body,
        })
    }

    pub fn get(&self, url: &str, headers: &[(&str, &str)]) -> Result<HttpResponse, ProviderError> {
        let _permit = self.throttle.acquire();
        let mut req = self.agent.get(url);
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        self.read(req.call())
    }

    pub fn post(&self, url: &str, headers: &[(&str, &str)], body: &[u8]) -> Result<HttpResponse, ProviderError> {
        let _permit = self.throttle.acquire();
        let mut req = self.agent.post(url);
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        self.read(req.send(body))
    }

    /// Runs `op` and retries retryable failures with exponential backoff.
    /// Non-2xx statuses are turned into errors via [`classify_status`].
    pub fn with_retries<F>(&self, mut op: F) -> Result<HttpResponse, ProviderError>
    where
        F: FnMut() -> Result<HttpResponse, ProviderError>,
    {
        let mut delay = Duration::from_millis(self.settings.backoff_base_ms);
        let mut attempt = 0;
        loop {
            let outcome = op().and_then(|resp| match classify_status(resp.status) {
                None => Ok(resp),
                Some(kind) => Err(ProviderError::service(
                    kind,
                    format!(
                        "HTTP {} from {}: {}",
                        resp.status,
                        resp.final_url,
                        String::from_utf8_lossy(&resp.body[..resp.body.len().min(200)])
                    ),
                )),
            });
            match outcome {
                Err(e) if attempt < self.settings.retries && e.kind().is_some_and(ErrorKind::is_retryable) => {
                    log::warn!("retrying after {e} (attempt {})", attempt + 1);
                    std::thread::sleep(delay);
                    delay = delay.mul_f64(self.settings.backoff_factor);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn map_ureq_error(e: ureq::Error) -> ProviderError {
    match e {
        ureq::Error::Timeout(t) => ProviderError::service(ErrorKind::Timeout, t.to_string()),
        ureq::Error::BodyExceedsLimit(limit) => ProviderError::SizeExceeded { limit },
        ureq::Error::TooManyRedirects => ProviderError::transport("too many redirects"),
        ureq::Error::StatusCode(code) => ProviderError::service(
            classify_status(code).unwrap_or(ErrorKind::Transport),
            format!("HTTP {code}"),
        ),
        ureq::Error::Io(io) => map_io_error(io, 0),
        other => ProviderError::transport(other.to_string()),
    }
}

fn map_io_error(e: std::io::Error, limit: u64) -> ProviderError {
    if e.kind() == std::io::ErrorKind::TimedOut {
        return ProviderError::service(ErrorKind::Timeout, e.to_string());
    }
    let text = e.to_string();
    if text.contains("limit") && limit > 0 {
        return ProviderError::SizeExceeded { limit };
    }
    if let Some(inner) = e.into_inner() {
        if let Ok(ue) = inner.downcast::<ureq::Error>() {
            return map_ureq_error(*ue);
        }
    }
    ProviderError::transport(text)
}

/// OpenAI-compatible chat-completions endpoint.
pub struct ChatCompletionsVision {
    client: Arc<HttpClient>,
    base_url: String,
    model: String,
    api_key: Option<String>,
}

impl ChatCompletionsVision {
    pub fn new(client: Arc<HttpClient>, base_url: &str, model: &str, api_key: Option<String>) -> Self {
        Self {
            client,
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
        }
    }

    fn body(&self, req: &VisionRequest) -> Value {
        let mut content = vec![json!({"type": "text", "text": req.prompt})];
        for img in &req.images {
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{}", BASE64.encode(img.to_png()))}
            }));
        }
        let mut body = json!({
            "model": self.model,
            "temperature": req.temperature,
            "messages": [{"role": "user", "content": content}],
        });
        if req.want_structured.is_some() {
            body["response_format"] = json!({"type": "json_object"});
        }
        body
    }
}

impl VisionModel for ChatCompletionsVision {
    fn chat_vision(&self, req: &VisionRequest) -> Result<String, ProviderError> {
        req.validate()?;
        let body = serde_json::to_vec(&self.body(req)).expect("JSON body serializes");
        let url = format!("{}/chat/completions", self.base_url);
        let auth = self.api_key.as_ref().map(|k| format!("Bearer {k}"));
        let resp = self.client.with_retries(|| {
            let mut headers = vec![("Content-Type", "application/json")];
            if let Some(a) = auth.as_deref() {
                headers.push(("Authorization", a));
            }
            self.client.post(&url, &headers, &body)
        })?;
        let value: Value = serde_json::from_slice(&resp.body)
            .map_err(|e| ProviderError::InvalidOutput(format!("chat response is not JSON: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::InvalidOutput("chat response has no message content".into()))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    kind: &'a str,
    payload: String,
    space_id: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
    dimension: usize,
    space_id: String,
}

/// Client for the embedding sidecar (`POST /embed`).
pub struct SidecarEmbedder {
    client: Arc<HttpClient>,
    base_url: String,
    space_id: String,
    dimension: Mutex<Option<usize>>,
}

impl SidecarEmbedder {
    pub fn new(client: Arc<HttpClient>, base_url: &str, space_id: &str) -> Self {
        Self {
            client,
            base_url: base_url.trim_end_matches('/').to_string(),
            space_id: space_id.to_string(),
            dimension: Mutex::new(None),
        }
    }

    fn embed(&self, kind: &str, payload: String) -> Result<EmbeddingVector, ProviderError> {
        let body = serde_json::to_vec(&EmbedRequest {
            kind,
            payload,
            space_id: &self.space_id,
        })
        .expect("JSON body serializes");
        let url = format!("{}/embed", self.base_url);
        let resp = self
            .client
            .with_retries(|| self.client.post(&url, &[("Content-Type", "application/json")], &body))?;
        let parsed: EmbedResponse = serde_json::from_slice(&resp.body)
            .map_err(|e| ProviderError::InvalidOutput(format!("bad /embed response: {e}")))?;
        if parsed.space_id != self.space_id {
            return Err(ProviderError::DimensionMismatch(format!(
                "asked for space {}, got {}",
                self.space_id, parsed.space_id
            )));
        }
        if parsed.vector.len() != parsed.dimension {
            return Err(ProviderError::DimensionMismatch(format!(
                "declared dimension {} but {} values",
                parsed.dimension,
                parsed.vector.len()
            )));
        }
        let mut known = self.dimension.lock().unwrap();
        match *known {
            Some(d) if d != parsed.dimension => {
                return Err(ProviderError::DimensionMismatch(format!(
                    "space {} returned dimension {} after {d}",
                    self.space_id, parsed.dimension
                )))
            }
            _ => *known = Some(parsed.dimension),
        }
        EmbeddingVector::new(parsed.vector, parsed.space_id)
    }
}

impl Embedder for SidecarEmbedder {
    fn space_id(&self) -> &str {
        &self.space_id
    }

    fn embed_image(&self, image: &ImageHandle) -> Result<EmbeddingVector, ProviderError> {
        self.embed("image", BASE64.encode(image.to_png()))
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        self.embed("text", text.to_string())
    }
}

/// Plain HTTP page fetcher with the client's redirect/size/time caps.
pub struct HttpFetcher {
    client: Arc<HttpClient>,
}

impl HttpFetcher {
    pub fn new(client: Arc<HttpClient>) -> Self {
        Self { client }
    }
}

impl PageFetcher for HttpFetcher {
    fn fetch_page(&self, url: &str) -> Result<FetchedPage, ProviderError> {
        url::Url::parse(url).map_err(|e| ProviderError::transport(format!("bad URL {url}: {e}")))?;
        let resp = self.client.with_retries(|| self.client.get(url, &[]))?;
        Ok(FetchedPage {
            html: String::from_utf8_lossy(&resp.body).into_owned(),
            final_url: resp.final_url,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchEndpoints {
    pub yandex_base: String,
    pub google_upload: String,
    pub max_hits: usize,
}

impl Default for SearchEndpoints {
    fn default() -> Self {
        Self {
            yandex_base: "https://yandex.com/images/search".to_string(),
            google_upload: "https://lens.google.com/v3/upload".to_string(),
            max_hits: 20,
        }
    }
}

/// Uploads the query image to the engine and parses the result page.
pub struct HttpImageSearch {
    client: Arc<HttpClient>,
    endpoints: SearchEndpoints,
}

const BOUNDARY: &str = "----geoscout-7d1f0c2a";

fn multipart(field: &str, filename: &str, png: &[u8]) -> Vec<u8> {
    let mut body = Vec::with_capacity(png.len() + 256);
    body.extend_from_slice(
        format!(
            "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{field}\"; filename=\"{filename}\"\r\nContent-Type: image/png\r\n\r\n"
        )
        .as_bytes(),
    );
    body.extend_from_slice(png);
    body.extend_from_slice(format!("\r\n--{BOUNDARY}--\r\n").as_bytes());
    body
}

impl HttpImageSearch {
    pub fn new(client: Arc<HttpClient>, endpoints: SearchEndpoints) -> Self {
        Self { client, endpoints }
    }

    fn result_page(&self, image: &ImageHandle, engine: Engine) -> Result<HttpResponse, ProviderError> {
        let png = image.to_png();
        let content_type = format!("multipart/form-data; boundary={BOUNDARY}");
        let headers = [("Content-Type", content_type.as_str())];
        match engine {
            Engine::Yandex => {
                let upload_url = format!(
                    "{}?rpt=imageview&format=json&request={}",
                    self.endpoints.yandex_base,
                    "%7B%22blocks%22%3A%5B%7B%22block%22%3A%22b-page_type_search-by-image__link%22%7D%5D%7D"
                );
                let body = multipart("upfile", "query.png", &png);
                let upload = self
                    .client
                    .with_retries(|| self.client.post(&upload_url, &headers, &body))?;
                if search_pages::is_captcha(engine, &upload.final_url, &String::from_utf8_lossy(&upload.body)) {
                    return Err(ProviderError::CaptchaDetected {
                        engine: engine.to_string(),
                    });
                }
                let value: Value = serde_json::from_slice(&upload.body)
                    .map_err(|e| ProviderError::InvalidOutput(format!("unexpected upload response: {e}")))?;
                let query = value["blocks"][0]["params"]["url"]
                    .as_str()
                    .ok_or_else(|| ProviderError::InvalidOutput("upload response has no result url".into()))?;
                let results_url = format!("{}?{}&cbir_page=sites", self.endpoints.yandex_base, query);
                self.client.with_retries(|| self.client.get(&results_url, &[]))
            }
            Engine::Google => {
                let body = multipart("encoded_image", "query.png", &png);
                self.client
                    .with_retries(|| self.client.post(&self.endpoints.google_upload, &headers, &body))
            }
        }
    }
}

impl ImageSearch for HttpImageSearch {
    fn search_by_image(&self, image: &ImageHandle, engine: Engine) -> Result<Vec<SearchHit>, ProviderError> {
        let page = self.result_page(image, engine)?;
        let body = String::from_utf8_lossy(&page.body);
        if search_pages::is_captcha(engine, &page.final_url, &body) {
            return Err(ProviderError::CaptchaDetected {
                engine: engine.to_string(),
            });
        }
        let mut hits = Vec::new();
        for raw in search_pages::parse_results(engine, &body, self.endpoints.max_hits) {
            let thumb = self
                .client
                .with_retries(|| self.client.get(&raw.thumbnail_url, &[]))
                .ok()
                .and_then(|r| {
                    ImageHandle::from_bytes(
                        format!("thumb-{}", &sha256_hex(raw.thumbnail_url.as_bytes())[..16]),
                        &r.body,
                    )
                    .ok()
                });
            let Some(thumbnail) = thumb else {
                log::debug!("skipping hit {}: thumbnail unavailable", raw.page_url);
                continue;
            };
            hits.push(SearchHit {
                thumbnail,
                source_url: raw.page_url,
                page_title: raw.title,
                rank: hits.len() as u32 + 1,
            });
        }
        Ok(hits)
    }
}


#[cfg(test)]
mod tests {
    use super::test_server::{serve, Reply};
    use super::*;
    use crate::providers::Purpose;
    use std::collections::HashMap;

    fn fast_client() -> Arc<HttpClient> {
        Arc::new(HttpClient::new(HttpSettings {
            timeout_secs: 5.0,
            backoff_base_ms: 1,
            rate_per_sec: 0.0,
            ..HttpSettings::default()
        }))
    }

    #[test]
    fn bad_key_maps_to_auth() {
        let (base, log) = serve(HashMap::from([(
            "/v1/chat/completions".to_string(),
            Reply::status(401),
        )]));
        let vision = ChatCompletionsVision::new(fast_client(), &format!("{base}/v1"), "m", Some("bad".into()));
        let req = VisionRequest::new(Purpose::Direct, vec![], "Where was the photo taken?");
        let err = vision.chat_vision(&req).unwrap_err();
        assert_eq!(err.kind(), Some(ErrorKind::Auth));
        assert_eq!(log.lock().unwrap().len(), 1, "auth errors are not retried");
    }

    #[test]
    fn transient_errors_retry_then_fail() {
        let (base, log) = serve(HashMap::from([(
            "/v1/chat/completions".to_string(),
            Reply::status(503),
        )]));
        let vision = ChatCompletionsVision::new(fast_client(), &format!("{base}/v1"), "m", None);
        let req = VisionRequest::new(Purpose::Direct, vec![], "Where?");
        assert_eq!(vision.chat_vision(&req).unwrap_err().kind(), Some(ErrorKind::Transport));
        assert_eq!(log.lock().unwrap().len(), 4, "first attempt plus three retries");
    }

    #[test]
    fn chat_content_extracted() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"Lisbon, Portugal"}}]}"#;
        let (base, _) = serve(HashMap::from([("/v1/chat/completions".to_string(), Reply::ok(body))]));
        let vision = ChatCompletionsVision::new(fast_client(), &format!("{base}/v1"), "m", None);
        let img = ImageHandle::solid("a", 2, 2, [0, 0, 0, 255]);
        let req = VisionRequest::new(Purpose::Direct, vec![img], "Where?");
        assert_eq!(vision.chat_vision(&req).unwrap(), "Lisbon, Portugal");
    }

    #[test]
    fn redirect_cap() {
        let mut routes = HashMap::new();
        for i in 0..6 {
            routes.insert(format!("/r{i}"), Reply::redirect(&format!("/r{}", i + 1)));
        }
        routes.insert("/r6".to_string(), Reply::ok("<html>end</html>"));
        let (base, _) = serve(routes);
        let fetcher = HttpFetcher::new(fast_client());
        // five hops are fine
        let page = fetcher.fetch_page(&format!("{base}/r1")).unwrap();
        assert_eq!(page.html, "<html>end</html>");
        assert!(page.final_url.ends_with("/r6"));
        // six are not
        let err = fetcher.fetch_page(&format!("{base}/r0")).unwrap_err();
        assert_eq!(err.kind(), Some(ErrorKind::Transport), "{err}");
    }

    #[test]
    fn size_cap() {
        let big = vec![b'a'; 10 * 1024 * 1024];
        let (base, _) = serve(HashMap::from([("/big".to_string(), Reply::ok(big))]));
        let fetcher = HttpFetcher::new(fast_client());
        assert!(matches!(
            fetcher.fetch_page(&format!("{base}/big")),
            Err(ProviderError::SizeExceeded { .. })
        ));
    }

    #[test]
    fn sidecar_vectors_validated() {
        let good = r#"{"vector":[0.6,0.8],"dimension":2,"space_id":"geoclip"}"#;
        let (base, _) = serve(HashMap::from([("/embed".to_string(), Reply::ok(good))]));
        let emb = SidecarEmbedder::new(fast_client(), &base, "geoclip");
        let v = emb.embed_text("brick facade").unwrap();
        assert_eq!(v.dimension(), 2);

        let bad = r#"{"vector":[0.6,0.9],"dimension":2,"space_id":"geoclip"}"#;
        let (base, _) = serve(HashMap::from([("/embed".to_string(), Reply::ok(bad))]));
        let emb = SidecarEmbedder::new(fast_client(), &base, "geoclip");
        assert!(matches!(emb.embed_text("x"), Err(ProviderError::InvalidOutput(_))));

        let wrong = r#"{"vector":[1.0],"dimension":2,"space_id":"geoclip"}"#;
        let (base, _) = serve(HashMap::from([("/embed".to_string(), Reply::ok(wrong))]));
        let emb = SidecarEmbedder::new(fast_client(), &base, "geoclip");
        assert!(matches!(emb.embed_text("x"), Err(ProviderError::DimensionMismatch(_))));
    }

    #[test]
    fn yandex_flow_against_local_server() {
        let thumb = ImageHandle::solid("t", 4, 4, [10, 20, 30, 255]).to_png();
        let (thumbs, _) = serve(HashMap::from([("/t1.png".to_string(), Reply::ok(thumb))]));
        let results = format!(
            r#"<li class="CbirSites-Item"><img src="{thumbs}/t1.png"><div class="CbirSites-ItemTitle"><a href="https://a.example/p">Prague</a></div></li>
               <li class="CbirSites-Item"><img src="{thumbs}/missing.png"><div class="CbirSites-ItemTitle"><a href="https://b.example/q">Gone</a></div></li>"#
        );
        let (base, log) = serve(HashMap::from([
            (
                "POST /images/search".to_string(),
                Reply::ok(r#"{"blocks":[{"params":{"url":"cbir_id=1"}}]}"#),
            ),
            ("GET /images/search".to_string(), Reply::ok(results)),
        ]));
        let search = HttpImageSearch::new(
            fast_client(),
            SearchEndpoints {
                yandex_base: format!("{base}/images/search"),
                ..SearchEndpoints::default()
            },
        );
        let img = ImageHandle::solid("q", 4, 4, [0, 0, 0, 255]);
        let hits = search.search_by_image(&img, Engine::Yandex).unwrap();
        assert_eq!(hits.len(), 1, "hits without a thumbnail are dropped");
        assert_eq!(hits[0].source_url, "https://a.example/p");
        assert_eq!(hits[0].page_title, "Prague");
        assert_eq!(hits[0].rank, 1);
        assert!(log.lock().unwrap()[1].contains("cbir_id=1"));
    }

    #[test]
    fn captcha_detected_on_upload() {
        let (base, _) = serve(HashMap::from([(
            "/images/search".to_string(),
            Reply::ok("<form action=\"/checkcaptcha\">CheckboxCaptcha</form>"),
        )]));
        let search = HttpImageSearch::new(
            fast_client(),
            SearchEndpoints {
                yandex_base: format!("{base}/images/search"),
                ..SearchEndpoints::default()
            },
        );
        let img = ImageHandle::solid("q", 4, 4, [0, 0, 0, 255]);
        assert!(matches!(
            search.search_by_image(&img, Engine::Yandex),
            Err(ProviderError::CaptchaDetected { .. })
        ));
    }
}
