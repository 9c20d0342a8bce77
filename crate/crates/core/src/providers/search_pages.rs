//! Result-page parsing for the reverse-search engines.
//!
//! Engine markup drifts; these parsers target the "similar sites" layout
//! of Yandex image search and the visual-match layout of Google Lens, and
//! degrade to an empty list rather than failing.

use crate::html::{self, Token};

use super::Engine;

/// A parsed result row before its thumbnail is downloaded.
#[derive(Clone, Debug, PartialEq)]
pub struct RawHit {
    pub page_url: String,
    pub title: String,
    pub thumbnail_url: String,
}

/// True when the response is a human-verification interstitial.
pub fn is_captcha(engine: Engine, final_url: &str, body: &str) -> bool {
    let lower_url = final_url.to_ascii_lowercase();
    let head: String = body.chars().take(200_000).collect::<String>().to_ascii_lowercase();
    match engine {
        Engine::Yandex => {
            lower_url.contains("showcaptcha")
                || head.contains("checkboxcaptcha")
                || head.contains("smartcaptcha")
                || head.contains("action=\"/checkcaptcha")
        }
        Engine::Google => {
            lower_url.contains("/sorry/")
                || head.contains("our systems have detected unusual traffic")
                || head.contains("g-recaptcha")
        }
    }
}

fn absolutize(url: &str) -> String {
    if let Some(rest) = url.strip_prefix("//") {
        format!("https://{rest}")
    } else {
        url.to_string()
    }
}

pub fn parse_results(engine: Engine, body: &str, max_hits: usize) -> Vec<RawHit> {
    let tokens = html::tokenize(body);
    let hits = match engine {
        Engine::Yandex => parse_yandex(&tokens),
        Engine::Google => parse_google(&tokens),
    };
    hits.into_iter().take(max_hits).collect()
}

/// `<li class="CbirSites-Item">` rows holding an `ItemThumb` image and an
/// `ItemTitle` link.
fn parse_yandex(tokens: &[Token]) -> Vec<RawHit> {
    let mut hits = Vec::new();
    let mut current: Option<RawHit> = None;
    let mut in_title = false;
    for t in tokens {
        match t {
            Token::Open { .. } if t.has_class("CbirSites-Item") => {
                if let Some(h) = current.take().filter(|h| !h.page_url.is_empty()) {
                    hits.push(h);
                }
                current = Some(RawHit {
                    page_url: String::new(),
                    title: String::new(),
                    thumbnail_url: String::new(),
                });
            }
            Token::Open { .. } if t.has_class("CbirSites-ItemTitle") => in_title = true,
            Token::Open { name, .. } if name == "a" && in_title => {
                if let (Some(h), Some(href)) = (current.as_mut(), t.attr("href")) {
                    h.page_url = absolutize(href);
                }
            }
            Token::Open { name, .. } if name == "img" => {
                if let (Some(h), Some(src)) = (current.as_mut(), t.attr("src")) {
                    if h.thumbnail_url.is_empty() {
                        h.thumbnail_url = absolutize(src);
                    }
                }
            }
            Token::Text(s) if in_title => {
                if let Some(h) = current.as_mut() {
                    if !h.title.is_empty() {
                        h.title.push(' ');
                    }
                    h.title.push_str(&html::squash(s));
                }
            }
            Token::Close { name } if name == "div" || name == "a" => in_title = false,
            _ => {}
        }
    }
    if let Some(h) = current.filter(|h| !h.page_url.is_empty()) {
        hits.push(h);
    }
    hits
}

/// Outbound links (not back to Google) that wrap an image.
fn parse_google(tokens: &[Token]) -> Vec<RawHit> {
    let mut hits = Vec::new();
    let mut open: Option<RawHit> = None;
    for t in tokens {
        match t {
            Token::Open { name, .. } if name == "a" => {
                open = t
                    .attr("href")
                    .filter(|h| h.starts_with("http") && !h.contains("google."))
                    .map(|h| RawHit {
                        page_url: h.to_string(),
                        title: t.attr("aria-label").unwrap_or_default().to_string(),
                        thumbnail_url: String::new(),
                    });
            }
            Token::Open { name, .. } if name == "img" => {
                if let (Some(h), Some(src)) = (open.as_mut(), t.attr("src")) {
                    if h.thumbnail_url.is_empty() && !src.starts_with("data:") {
                        h.thumbnail_url = absolutize(src);
                    }
                    if h.title.is_empty() {
                        h.title = t.attr("alt").unwrap_or_default().to_string();
                    }
                }
            }
            Token::Close { name } if name == "a" => {
                if let Some(h) = open.take().filter(|h| !h.thumbnail_url.is_empty()) {
                    hits.push(h);
                }
            }
            _ => {}
        }
    }
    hits
}
