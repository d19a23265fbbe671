//! HTTP clients for remotely deployed generator / embedder / LLM services.
//!
//! Protocol:
//! - `POST /v1/generate {"prompt", "width", "height", "seed"}` -> PNG bytes
//! - `POST /v1/embed_image` (PNG body) -> `{"vector": [..]}`
//! - `POST /v1/embed_text {"text"}` -> `{"vector": [..]}`
//! - `POST /v1/complete {"instruction", "n"}` -> `{"texts": [..]}`

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{GeneratorCapabilities, InstructionLlmBackend, TextToImageBackend, VisionLanguageEmbedder};
use crate::error::{Error, Result};
use crate::image::Image;

pub const BACKEND_URL_ENV: &str = "ZSMLC_BACKEND_URL";

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub timeout: Duration,
    /// Extra attempts after the first failure.
    pub retries: usize,
    pub resolutions: Vec<u32>,
    pub embedding_dim: usize,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            timeout: Duration::from_secs(120),
            retries: 2,
            resolutions: vec![512, 560, 768],
            embedding_dim: 512,
        }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(BACKEND_URL_ENV).ok().map(Self::new)
    }
}

/// One client serving all three model roles; the agent keeps a connection pool.
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    width: u32,
    height: u32,
    seed: u64,
}

#[derive(Serialize)]
struct EmbedTextRequest<'a> {
    text: &'a str,
}

#[derive(Serialize)]
struct CompleteRequest<'a> {
    instruction: &'a str,
    n: usize,
}

#[derive(Deserialize)]
struct VectorResponse {
    vector: Vec<f64>,
}

#[derive(Deserialize)]
struct TextsResponse {
    texts: Vec<String>,
}

enum Payload<'a> {
    Json(serde_json::Value),
    Png(&'a [u8]),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(true)
            .build()
            .into();
        HttpBackend { config, agent }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn map_error(&self, e: ureq::Error) -> Error {
        match e {
            ureq::Error::Timeout(_) => Error::BackendTimeout(self.config.timeout.as_secs_f64()),
            ureq::Error::ConnectionFailed | ureq::Error::HostNotFound | ureq::Error::Io(_) => {
                Error::BackendUnreachable(format!("{}: {e}", self.config.base_url))
            }
            other => Error::Backend(other.to_string()),
        }
    }

    fn post(&self, path: &str, payload: Payload<'_>) -> Result<Vec<u8>> {
        let url = format!("{}{}", self.config.base_url, path);
        let mut last = None;
        for _ in 0..=self.config.retries {
            let request = self.agent.post(&url);
            let sent = match &payload {
                Payload::Json(v) => request.send_json(v),
                Payload::Png(bytes) => request.content_type("image/png").send(*bytes),
            };
            match sent.and_then(|mut r| r.body_mut().read_to_vec()) {
                Ok(body) => return Ok(body),
                Err(e) => {
                    let retryable = !matches!(e, ureq::Error::StatusCode(c) if (400..500).contains(&c));
                    let err = self.map_error(e);
                    log::warn!("backend call {path} failed: {err}");
                    last = Some(err);
                    if !retryable {
                        break;
                    }
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn post_json<T: for<'de> Deserialize<'de>>(&self, path: &str, payload: Payload<'_>) -> Result<T> {
        let body = self.post(path, payload)?;
        serde_json::from_slice(&body).map_err(|e| Error::Backend(format!("{path}: {e}")))
    }
}

impl TextToImageBackend for HttpBackend {
    fn capabilities(&self) -> GeneratorCapabilities {
        GeneratorCapabilities {
            resolutions: self.config.resolutions.clone(),
            supports_text_encoder_gradients: false,
        }
    }

    fn generate(&self, prompt: &str, resolution: u32, seed: u64) -> Result<Image> {
        let req = GenerateRequest {
            prompt,
            width: resolution,
            height: resolution,
            seed,
        };
        let body = self.post("/v1/generate", Payload::Json(serde_json::to_value(req)?))?;
        Image::from_png_bytes(&body)
    }
}

impl VisionLanguageEmbedder for HttpBackend {
    fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        let png = image.to_png_bytes()?;
        let r: VectorResponse = self.post_json("/v1/embed_image", Payload::Png(&png))?;
        Ok(r.vector)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let r: VectorResponse = self.post_json(
            "/v1/embed_text",
            Payload::Json(serde_json::to_value(EmbedTextRequest { text })?),
        )?;
        Ok(r.vector)
    }
}

impl InstructionLlmBackend for HttpBackend {
    fn complete(&self, instruction: &str, n: usize) -> Result<Vec<String>> {
        let r: TextsResponse = self.post_json(
            "/v1/complete",
            Payload::Json(serde_json::to_value(CompleteRequest { instruction, n })?),
        )?;
        if r.texts.len() != n || r.texts.iter().any(|t| t.trim().is_empty()) {
            return Err(Error::Backend(format!(
                "expected {n} non-empty completions, got {}",
                r.texts.len()
            )));
        }
        Ok(r.texts)
    }
}
