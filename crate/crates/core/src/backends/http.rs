//! HTTP+JSON clients for the model service.
//!
//! Endpoints (all bodies UTF-8 JSON, images as base64-encoded PNG):
//!
//! - `POST /chat` `{messages: [{role, text, images}], temperature, max_tokens, seed?}` -> `{text}`
//! - `POST /embed/image` `{image}` -> `{values, model_id}`
//! - `POST /embed/text` `{text}` -> `{values, model_id}`
//! - `POST /segment` `{image, boxes: [[x1, y1, x2, y2]]}` -> `{mask}` (8-bit PNG, nonzero = tampered)

use std::sync::OnceLock;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::Serialize;
use ureq::Agent;

use super::{
    validate_history, BackendError, BackendErrorKind, ChatBackend, ChatTurn, Decoding,
    EmbeddingBackend, EmbeddingVector, SegmentBackend, SegmentPrompt,
};
use crate::tools::{binarize_mask, ImageBuffer, MaskImage};

/// Request and response bodies of the wire protocol.
pub mod wire {
    use serde::{Deserialize, Serialize};

    use crate::backends::Role;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct WireMessage {
        pub role: Role,
        pub text: String,
        pub images: Vec<String>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ChatRequest {
        pub messages: Vec<WireMessage>,
        pub temperature: f64,
        pub max_tokens: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub seed: Option<u64>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ChatResponse {
        pub text: String,
        /// Set by services that surface an explicit model refusal.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub refusal: Option<String>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct EmbedImageRequest {
        pub image: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct EmbedTextRequest {
        pub text: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct EmbedResponse {
        pub values: Vec<f64>,
        pub model_id: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct SegmentRequest {
        pub image: String,
        pub boxes: Vec<[i64; 4]>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct SegmentResponse {
        pub mask: String,
    }
}

/// Environment variable holding an optional bearer token for the service.
pub const API_KEY_ENV: &str = "FORENSIC_API_KEY";

const MAX_BODY_BYTES: u64 = 256 * 1024 * 1024;

/// Shared HTTP transport: one agent, one base URL, optional bearer token.
#[derive(Clone)]
pub struct HttpTransport {
    agent: Agent,
    base_url: String,
    api_key: Option<String>,
}

impl std::fmt::Debug for HttpTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpTransport")
            .field("base_url", &self.base_url)
            .finish_non_exhaustive()
    }
}

impl HttpTransport {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, BackendError> {
        let url = format!("{}{path}", self.base_url);
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| map_transport_error(&url, e))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let detail = resp
                .body_mut()
                .read_to_string()
                .unwrap_or_default()
                .chars()
                .take(400)
                .collect::<String>();
            return Err(BackendError::new(
                status_kind(status),
                format!("{url} returned HTTP {status}: {detail}"),
            ));
        }
        resp.body_mut()
            .with_config()
            .limit(MAX_BODY_BYTES)
            .read_json::<R>()
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => BackendError::timeout(format!("{url}: {e}")),
                other => BackendError::protocol(format!("{url}: malformed response body: {other}")),
            })
    }
}

/// Error kind for a non-2xx status.
pub fn status_kind(status: u16) -> BackendErrorKind {
    match status {
        408 | 504 => BackendErrorKind::Timeout,
        451 => BackendErrorKind::ModelRefusal,
        429 | 500..=599 => BackendErrorKind::Transport,
        _ => BackendErrorKind::Protocol,
    }
}

fn map_transport_error(url: &str, e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::timeout(format!("{url}: {e}")),
        ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
            BackendError::transport(format!("{url}: {e}"))
        }
        other => BackendError::protocol(format!("{url}: {other}")),
    }
}

pub fn encode_image(image: &ImageBuffer) -> Result<String, BackendError> {
    let png = image
        .encode_png()
        .map_err(|e| BackendError::protocol(e.to_string()))?;
    Ok(STANDARD.encode(png))
}

pub fn decode_base64(payload: &str) -> Result<Vec<u8>, BackendError> {
    STANDARD
        .decode(payload.trim())
        .map_err(|e| BackendError::protocol(format!("invalid base64 payload: {e}")))
}

pub fn chat_request(history: &[ChatTurn], decoding: &Decoding) -> Result<wire::ChatRequest, BackendError> {
    let messages = history
        .iter()
        .map(|turn| {
            Ok(wire::WireMessage {
                role: turn.role,
                text: turn.text.clone(),
                images: turn
                    .images
                    .iter()
                    .map(|img| encode_image(img))
                    .collect::<Result<_, BackendError>>()?,
            })
        })
        .collect::<Result<_, BackendError>>()?;
    Ok(wire::ChatRequest {
        messages,
        temperature: decoding.temperature,
        max_tokens: decoding.max_tokens,
        seed: decoding.seed,
    })
}

#[derive(Debug, Clone)]
pub struct HttpChat {
    transport: HttpTransport,
}

impl HttpChat {
    pub fn new(transport: HttpTransport) -> Self {
        Self { transport }
    }
}

impl ChatBackend for HttpChat {
    fn chat(&self, history: &[ChatTurn], decoding: &Decoding) -> Result<String, BackendError> {
        validate_history(history, decoding)?;
        let body = chat_request(history, decoding)?;
        let resp: wire::ChatResponse = self.transport.post("/chat", &body)?;
        if let Some(reason) = resp.refusal {
            return Err(BackendError::refusal(reason));
        }
        Ok(resp.text)
    }
}

#[derive(Debug)]
pub struct HttpEmbedder {
    transport: HttpTransport,
    model_id: OnceLock<String>,
}

impl HttpEmbedder {
    pub fn new(transport: HttpTransport) -> Self {
        Self {
            transport,
            model_id: OnceLock::new(),
        }
    }

    fn finish(&self, resp: wire::EmbedResponse) -> Result<EmbeddingVector, BackendError> {
        let v = EmbeddingVector::normalized(resp.values, resp.model_id)?;
        let _ = self.model_id.set(v.model_id.clone());
        Ok(v)
    }
}

impl EmbeddingBackend for HttpEmbedder {
    fn model_id(&self) -> Result<String, BackendError> {
        if let Some(id) = self.model_id.get() {
            return Ok(id.clone());
        }
        // the protocol has no metadata endpoint; a probe embedding carries the id
        Ok(self.embed_text("model identifier probe")?.model_id)
    }

    fn embed_image(&self, image: &ImageBuffer) -> Result<EmbeddingVector, BackendError> {
        let body = wire::EmbedImageRequest {
            image: encode_image(image)?,
        };
        let resp = self.transport.post("/embed/image", &body)?;
        self.finish(resp)
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.is_empty() {
            return Err(BackendError::protocol("cannot embed empty text"));
        }
        let body = wire::EmbedTextRequest { text: text.into() };
        let resp = self.transport.post("/embed/text", &body)?;
        self.finish(resp)
    }
}

#[derive(Debug, Clone)]
pub struct HttpSegmenter {
    transport: HttpTransport,
}

impl HttpSegmenter {
    pub fn new(transport: HttpTransport) -> Self {
        Self { transport }
    }
}

impl SegmentBackend for HttpSegmenter {
    fn segment(&self, image: &ImageBuffer, prompt: &SegmentPrompt) -> Result<MaskImage, BackendError> {
        prompt.validate(image.dims())?;
        let body = wire::SegmentRequest {
            image: encode_image(image)?,
            boxes: prompt.boxes.iter().map(|&b| b.into()).collect(),
        };
        let resp: wire::SegmentResponse = self.transport.post("/segment", &body)?;
        let bytes = decode_base64(&resp.mask)?;
        let mask = binarize_mask(&bytes, 0).map_err(|e| BackendError::protocol(e.to_string()))?;
        if mask.dims() != image.dims() {
            return Err(BackendError::protocol(format!(
                "mask is {:?} but the image is {:?}",
                mask.dims(),
                image.dims()
            )));
        }
        Ok(mask)
    }
}
