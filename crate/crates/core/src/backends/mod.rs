//! Model-service contracts: multimodal chat, embeddings and promptable
//! segmentation.
//!
//! Each service is a trait so the pipeline can run against the HTTP wire
//! protocol ([`http`]) or against deterministic in-process stubs ([`stub`]).

pub mod http;
pub mod stub;

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::Clock;
use crate::messages::BoundingBox;
use crate::tools::{ImageBuffer, MaskImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendErrorKind {
    Transport,
    Protocol,
    ModelRefusal,
    Timeout,
}

impl BackendErrorKind {
    /// Transport failures and timeouts are worth retrying; the rest are not.
    pub fn is_retryable(self) -> bool {
        matches!(self, Self::Transport | Self::Timeout)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{kind:?} error: {detail}")]
pub struct BackendError {
    pub kind: BackendErrorKind,
    pub detail: String,
}

impl BackendError {
    pub fn new(kind: BackendErrorKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
        }
    }

    pub fn transport(detail: impl Into<String>) -> Self {
        Self::new(BackendErrorKind::Transport, detail)
    }

    pub fn protocol(detail: impl Into<String>) -> Self {
        Self::new(BackendErrorKind::Protocol, detail)
    }

    pub fn timeout(detail: impl Into<String>) -> Self {
        Self::new(BackendErrorKind::Timeout, detail)
    }

    pub fn refusal(detail: impl Into<String>) -> Self {
        Self::new(BackendErrorKind::ModelRefusal, detail)
    }

    pub fn retryable(&self) -> bool {
        self.kind.is_retryable()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// One conversation turn; images travel in order after the text.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatTurn {
    pub role: Role,
    pub text: String,
    pub images: Vec<Arc<ImageBuffer>>,
}

impl ChatTurn {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn user(text: impl Into<String>, images: Vec<Arc<ImageBuffer>>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            images,
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.role == Role::Assistant && !self.images.is_empty() {
            return Err(BackendError::protocol("assistant turns cannot carry images"));
        }
        if self.text.is_empty() && self.images.is_empty() {
            return Err(BackendError::protocol("turn has neither text nor images"));
        }
        Ok(())
    }
}

/// Sampling parameters for a chat request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 1024,
            seed: Some(0),
        }
    }
}

/// Checks shared by every chat backend.
pub fn validate_history(history: &[ChatTurn], decoding: &Decoding) -> Result<(), BackendError> {
    let last = history
        .last()
        .ok_or_else(|| BackendError::protocol("empty chat history"))?;
    if last.role != Role::User {
        return Err(BackendError::protocol("last turn must be a user turn"));
    }
    if decoding.temperature.is_nan() || decoding.temperature < 0.0 || decoding.max_tokens == 0 {
        return Err(BackendError::protocol("invalid decoding parameters"));
    }
    history.iter().try_for_each(ChatTurn::validate)
}

/// SHA-256 over roles, texts, image digests and decoding parameters.
pub fn history_digest(history: &[ChatTurn], decoding: &Decoding) -> String {
    let mut h = Sha256::new();
    for turn in history {
        h.update(format!("{:?}\n{}\n", turn.role, turn.text.len()));
        h.update(turn.text.as_bytes());
        for img in &turn.images {
            h.update(img.digest().as_bytes());
        }
        h.update(b"\x1e");
    }
    h.update(format!(
        "{}|{}|{:?}",
        decoding.temperature, decoding.max_tokens, decoding.seed
    ));
    hex::encode(h.finalize())
}

/// Unit-normalized embedding tagged with the model that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_id: String,
}

impl EmbeddingVector {
    /// Normalize raw model output to unit length.
    pub fn normalized(values: Vec<f64>, model_id: impl Into<String>) -> Result<Self, BackendError> {
        if values.is_empty() {
            return Err(BackendError::protocol("empty embedding"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::protocol("non-finite embedding value"));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(BackendError::protocol("zero-norm embedding"));
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / norm).collect(),
            model_id: model_id.into(),
        })
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Box prompts for the segmenter, in absolute pixels of the target image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPrompt {
    pub boxes: Vec<BoundingBox>,
}

impl SegmentPrompt {
    pub fn new(boxes: Vec<BoundingBox>, dims: (u32, u32)) -> Result<Self, BackendError> {
        let prompt = Self { boxes };
        prompt.validate(dims)?;
        Ok(prompt)
    }

    pub fn validate(&self, dims: (u32, u32)) -> Result<(), BackendError> {
        if self.boxes.is_empty() {
            return Err(BackendError::protocol("segment prompt has no boxes"));
        }
        if let Some(b) = self.boxes.iter().find(|b| !b.is_within(dims.0, dims.1)) {
            return Err(BackendError::protocol(format!(
                "box {b} outside the {}x{} image",
                dims.0, dims.1
            )));
        }
        Ok(())
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, history: &[ChatTurn], decoding: &Decoding) -> Result<String, BackendError>;
}

pub trait EmbeddingBackend: Send + Sync {
    /// Identifier of the embedding model, used to key rule-embedding caches.
    fn model_id(&self) -> Result<String, BackendError>;
    fn embed_image(&self, image: &ImageBuffer) -> Result<EmbeddingVector, BackendError>;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError>;
}

pub trait SegmentBackend: Send + Sync {
    /// Binary mask of the image's dimensions; several boxes are unioned.
    fn segment(&self, image: &ImageBuffer, prompt: &SegmentPrompt) -> Result<MaskImage, BackendError>;
}

/// Bounded exponential-backoff retry for retryable error kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 250,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay() -> Self {
        Self {
            base_delay_ms: 0,
            ..Self::default()
        }
    }

    /// Run `op` until it succeeds, fails with a non-retryable error, or the
    /// attempt budget is spent. Also returns the number of retries performed.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, BackendError>) -> (Result<T, BackendError>, u32) {
        let attempts = self.max_attempts.max(1);
        let mut retries = 0;
        loop {
            match op() {
                Err(e) if e.retryable() && retries + 1 < attempts => {
                    let delay = self.base_delay_ms.saturating_mul(1 << retries.min(16));
                    log::warn!("retryable backend error ({e}); retrying in {delay} ms");
                    if delay > 0 {
                        thread::sleep(Duration::from_millis(delay));
                    }
                    retries += 1;
                }
                other => return (other, retries),
            }
        }
    }
}

/// The three services one pipeline run talks to.
#[derive(Clone)]
pub struct Backends {
    pub chat: Arc<dyn ChatBackend>,
    pub embedder: Arc<dyn EmbeddingBackend>,
    pub segmenter: Arc<dyn SegmentBackend>,
    pub retry: RetryPolicy,
    /// Timestamp source for traces of runs using these backends.
    pub clock: Clock,
}

impl Backends {
    pub fn new(
        chat: Arc<dyn ChatBackend>,
        embedder: Arc<dyn EmbeddingBackend>,
        segmenter: Arc<dyn SegmentBackend>,
    ) -> Self {
        Self {
            chat,
            embedder,
            segmenter,
            retry: RetryPolicy::default(),
            clock: Clock::System,
        }
    }

    /// Deterministic in-process backends: heuristic chat, hash embeddings and
    /// box-fill segmentation.
    pub fn stub() -> Self {
        Self {
            chat: Arc::new(stub::HeuristicChat::default()),
            embedder: Arc::new(stub::HashEmbedder::default()),
            segmenter: Arc::new(stub::BoxFillSegmenter),
            retry: RetryPolicy::no_delay(),
            clock: Clock::Frozen,
        }
    }

    pub fn with_chat(mut self, chat: Arc<dyn ChatBackend>) -> Self {
        self.chat = chat;
        self
    }

    pub fn with_segmenter(mut self, segmenter: Arc<dyn SegmentBackend>) -> Self {
        self.segmenter = segmenter;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}
