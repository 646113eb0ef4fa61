//! Client for external text/vision services, with a deterministic offline
//! stub.
//!
//! Three capabilities back the caption pipeline: prompt expansion for
//! sample generation, low-level image description, and elevation of a
//! low-level description into a high-level summary. The stub derives every
//! answer from the request content and a fixed seed, performs no network
//! activity, and keeps tag tokens intact so downstream tokenization sees
//! the same object identities. HTTP mode POSTs a JSON body
//! `{kind, prompt, image_b64?}` to a plain-HTTP endpoint and expects
//! `{"text": ...}` back, retrying with exponential backoff.
//!
//! Every response, stub or live, appends one record to an audit log.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::sha256_bytes;
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::text::parse_tags;

pub const DEFAULT_TIMEOUT_MS: u64 = 10_000;
pub const DEFAULT_MAX_RETRIES: u32 = 3;
pub const DEFAULT_BACKOFF_BASE_MS: u64 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayMode {
    Stub,
    Http,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GatewayConfig {
    pub mode: GatewayMode,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    /// First retry waits this long; each later retry doubles it.
    pub backoff_base_ms: u64,
    pub seed: u64,
    /// Audit records are appended here when set.
    #[serde(default)]
    pub audit_path: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            mode: GatewayMode::Stub,
            endpoint_url: None,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            max_retries: DEFAULT_MAX_RETRIES,
            backoff_base_ms: DEFAULT_BACKOFF_BASE_MS,
            seed: 0,
            audit_path: None,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(Error::Config("gateway timeout_ms must be > 0".into()));
        }
        if self.mode == GatewayMode::Http
            && self.endpoint_url.as_deref().map_or(true, str::is_empty)
        {
            return Err(Error::Config("http gateway mode requires endpoint_url".into()));
        }
        Ok(())
    }

    /// Overlay `GATEWAY_MODE`, `GATEWAY_URL`, and `GATEWAY_TIMEOUT_MS` from
    /// the environment onto this config.
    pub fn with_env(mut self) -> Result<Self> {
        if let Ok(mode) = std::env::var("GATEWAY_MODE") {
            self.mode = match mode.as_str() {
                "stub" => GatewayMode::Stub,
                "http" => GatewayMode::Http,
                other => {
                    return Err(Error::Config(format!(
                        "GATEWAY_MODE must be 'stub' or 'http', got '{other}'"
                    )))
                }
            };
        }
        if let Ok(url) = std::env::var("GATEWAY_URL") {
            self.endpoint_url = Some(url);
        }
        if let Ok(t) = std::env::var("GATEWAY_TIMEOUT_MS") {
            self.timeout_ms = t
                .parse()
                .map_err(|_| Error::Config(format!("GATEWAY_TIMEOUT_MS must be an integer, got '{t}'")))?;
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Text,
    Vision,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GatewayRequest {
    pub kind: RequestKind,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
}

impl GatewayRequest {
    fn validate(&self) -> Result<()> {
        match (self.kind, &self.image_b64) {
            (RequestKind::Vision, None) => {
                Err(Error::Validation("vision request is missing its image payload".into()))
            }
            (RequestKind::Vision, Some(b64)) if b64.is_empty() => {
                Err(Error::Validation("vision request has an empty image payload".into()))
            }
            (RequestKind::Text, Some(_)) => {
                Err(Error::Validation("text request must not carry an image payload".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct AuditRecord {
    request_sha256: String,
    latency_ms: u64,
    mode: GatewayMode,
    kind: RequestKind,
}

pub struct Gateway {
    cfg: GatewayConfig,
    audit: Option<std::fs::File>,
}

impl Gateway {
    pub fn new(cfg: GatewayConfig) -> Result<Self> {
        cfg.validate()?;
        let audit = match &cfg.audit_path {
            Some(path) => {
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                Some(std::fs::OpenOptions::new().create(true).append(true).open(path)?)
            }
            None => None,
        };
        Ok(Self { cfg, audit })
    }

    pub fn mode(&self) -> GatewayMode {
        self.cfg.mode
    }

    fn record(&mut self, request: &GatewayRequest, started: Instant) -> Result<()> {
        if let Some(file) = &mut self.audit {
            let record = AuditRecord {
                request_sha256: sha256_bytes(serde_json::to_string(request)?.as_bytes()),
                latency_ms: started.elapsed().as_millis() as u64,
                mode: self.cfg.mode,
                kind: request.kind,
            };
            writeln!(file, "{}", serde_json::to_string(&record)?)?;
        }
        Ok(())
    }

    fn dispatch(&mut self, request: GatewayRequest, stub: impl FnOnce(&GatewayConfig) -> String) -> Result<String> {
        request.validate()?;
        let started = Instant::now();
        let response = match self.cfg.mode {
            GatewayMode::Stub => Ok(stub(&self.cfg)),
            GatewayMode::Http => self.http_with_retries(&request),
        };
        self.record(&request, started)?;
        response
    }

    /// `n` distinct tag-grammar prompts for generation runs.
    pub fn expand_prompts(&mut self, topic: &str, n: usize) -> Result<Vec<String>> {
        if n == 0 {
            return Err(Error::Param("prompt expansion needs n >= 1".into()));
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let request = GatewayRequest {
                kind: RequestKind::Text,
                prompt: format!(
                    "Produce sonar image prompt {i} of {n} about: {topic}. \
                     Use one object tag and one background tag."
                ),
                image_b64: None,
            };
            let text = self.dispatch(request, |cfg| stub_expand(cfg.seed, i, &mut out.iter()))?;
            out.push(text);
        }
        Ok(out)
    }

    /// Non-empty low-level description of one image. The stub blends tags
    /// parsed from `domain_prompt` with a brightness-blob position readout.
    pub fn describe_low_level(&mut self, image: &ImageGrid, domain_prompt: &str) -> Result<String> {
        let payload = base64::engine::general_purpose::STANDARD.encode(image.png_bytes()?);
        let request = GatewayRequest {
            kind: RequestKind::Vision,
            prompt: domain_prompt.to_string(),
            image_b64: Some(payload),
        };
        self.dispatch(request, |_| stub_describe(image, domain_prompt))
    }

    /// Non-empty high-level summary preserving every tag of the input.
    pub fn elevate_to_high_level(&mut self, low_desc: &str) -> Result<String> {
        if low_desc.trim().is_empty() {
            return Err(Error::Param("low-level description must be non-empty".into()));
        }
        let request = GatewayRequest {
            kind: RequestKind::Text,
            prompt: format!("Summarize at a high level: {low_desc}"),
            image_b64: None,
        };
        let low = low_desc.to_string();
        self.dispatch(request, move |_| stub_elevate(&low))
    }

    fn http_with_retries(&self, request: &GatewayRequest) -> Result<String> {
        let url = self.cfg.endpoint_url.as_deref().expect("validated");
        let body = serde_json::to_string(request)?;
        let mut last_error = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let wait = self.cfg.backoff_base_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(wait));
            }
            match http_post_json(url, &body, Duration::from_millis(self.cfg.timeout_ms)) {
                Ok(text) => return Ok(text),
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(Error::Gateway(format!(
            "request failed after {} attempts: {last_error}",
            self.cfg.max_retries + 1
        )))
    }
}

/// Deterministic prompt synthesis. Draws tag digits from a seeded stream
/// and skips collisions with already-produced prompts.
fn stub_expand(seed: u64, index: usize, existing: &mut dyn Iterator<Item = &String>) -> String {
    let taken: Vec<String> = existing.cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
    loop {
        let obj = crate::text::OBJECT_PREFIXES[rng.gen_range(0..crate::text::OBJECT_PREFIXES.len())];
        let bg = crate::text::BACKGROUND_PREFIXES
            [rng.gen_range(0..crate::text::BACKGROUND_PREFIXES.len())];
        let prompt = format!(
            "image of {obj}{}* on the {bg}{}* seabed",
            rng.gen_range(1..=99999u32),
            rng.gen_range(1..=999u32)
        );
        if !taken.contains(&prompt) {
            return prompt;
        }
    }
}

/// Centroid of pixels bright enough to be target returns, if any.
fn bright_blob(image: &ImageGrid) -> Option<(f64, f64)> {
    let (h, w, c) = image.pixels.dim();
    let mut sum_i = 0.0;
    let mut sum_j = 0.0;
    let mut count = 0usize;
    for i in 0..h {
        for j in 0..w {
            let mut v = 0.0;
            for ch in 0..c {
                v += image.pixels[(i, j, ch)];
            }
            if v / c as f64 > 0.7 {
                sum_i += i as f64;
                sum_j += j as f64;
                count += 1;
            }
        }
    }
    (count >= 4).then(|| (sum_i / count as f64, sum_j / count as f64))
}

fn stub_describe(image: &ImageGrid, domain_prompt: &str) -> String {
    let tags = parse_tags(domain_prompt);
    let tag_clause = if tags.is_empty() {
        String::new()
    } else {
        let list: Vec<String> = tags.iter().map(|t| t.text()).collect();
        format!(", consistent with the annotation {}", list.join(" and "))
    };
    let (h, w, _) = image.pixels.dim();
    let mean: f64 = image.pixels.mean().unwrap_or(0.0);
    match bright_blob(image) {
        Some((ci, cj)) => {
            let horiz = if cj < w as f64 / 3.0 {
                "left"
            } else if cj > 2.0 * w as f64 / 3.0 {
                "right"
            } else {
                "center"
            };
            let vert = if ci < h as f64 / 3.0 {
                "upper"
            } else if ci > 2.0 * h as f64 / 3.0 {
                "lower"
            } else {
                "middle"
            };
            format!(
                "The image shows a bright sonar return in the {vert} {horiz} of the frame \
                 casting an acoustic shadow{tag_clause}. The surrounding seabed is speckled \
                 reverberation with mean intensity {mean:.2}."
            )
        }
        None => format!(
            "The image shows featureless speckled seabed with no distinct target return{tag_clause}. \
             Mean intensity {mean:.2}."
        ),
    }
}

fn stub_elevate(low_desc: &str) -> String {
    let tags = parse_tags(low_desc);
    let first_clause: String = low_desc
        .split(['.', ','])
        .next()
        .unwrap_or(low_desc)
        .trim()
        .to_lowercase();
    if tags.is_empty() {
        format!("High-level summary: {first_clause}.")
    } else {
        let list: Vec<String> = tags.iter().map(|t| t.text()).collect();
        format!(
            "High-level summary: the scene likely depicts {}, where {first_clause}.",
            list.join(" and ")
        )
    }
}

/// Minimal HTTP/1.1 POST over a plain TCP stream. Supports `http://` URLs
/// only; the response body must be JSON with a `text` field.
fn http_post_json(url: &str, body: &str, timeout: Duration) -> Result<String> {
    let rest = url
        .strip_prefix("http://")
        .ok_or_else(|| Error::Gateway(format!("only http:// endpoints are supported, got '{url}'")))?;
    let (host_port, path) = match rest.find('/') {
        Some(i) => (&rest[..i], &rest[i..]),
        None => (rest, "/"),
    };
    let addr = if host_port.contains(':') {
        host_port.to_string()
    } else {
        format!("{host_port}:80")
    };

    let stream = TcpStream::connect(&addr).map_err(|e| Error::Gateway(format!("connect {addr}: {e}")))?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    let mut stream = stream;
    let request = format!(
        "POST {path} HTTP/1.1\r\nHost: {host_port}\r\nContent-Type: application/json\r\n\
         Content-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream
        .write_all(request.as_bytes())
        .map_err(|e| Error::Gateway(format!("send: {e}")))?;

    let mut response = Vec::new();
    stream
        .read_to_end(&mut response)
        .map_err(|e| Error::Gateway(format!("receive: {e}")))?;
    let response = String::from_utf8_lossy(&response);
    let mut parts = response.splitn(2, "\r\n\r\n");
    let head = parts.next().unwrap_or("");
    let body = parts.next().unwrap_or("");
    let status = head
        .lines()
        .next()
        .and_then(|l| l.split_whitespace().nth(1))
        .and_then(|s| s.parse::<u16>().ok())
        .ok_or_else(|| Error::Gateway("malformed response status line".into()))?;
    if status != 200 {
        return Err(Error::Gateway(format!("endpoint returned status {status}")));
    }
    let parsed: serde_json::Value = serde_json::from_str(body.trim())
        .map_err(|e| Error::Gateway(format!("response body is not JSON: {e}")))?;
    parsed
        .get("text")
        .and_then(|t| t.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Gateway("response JSON lacks a string 'text' field".into()))
}
