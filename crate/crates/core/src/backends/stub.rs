//! Deterministic in-process backends for tests and offline runs.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{
    validate_history, BackendError, ChatBackend, ChatTurn, Decoding, EmbeddingBackend,
    EmbeddingVector, Role, SegmentBackend, SegmentPrompt,
};
use crate::messages::BoundingBox;
use crate::tools::{union_masks, ImageBuffer, MaskImage};

/// One scripted chat outcome.
#[derive(Debug, Clone, PartialEq)]
pub enum ScriptStep {
    Reply(String),
    Fail(BackendError),
}

/// Chat stub that replays a fixed queue of replies in order.
#[derive(Debug, Default)]
pub struct ScriptedChat {
    queue: Mutex<VecDeque<ScriptStep>>,
}

impl ScriptedChat {
    pub fn new(steps: impl IntoIterator<Item = ScriptStep>) -> Self {
        Self {
            queue: Mutex::new(steps.into_iter().collect()),
        }
    }

    pub fn replies<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::new(replies.into_iter().map(|r| ScriptStep::Reply(r.into())))
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("script lock").len()
    }
}

impl ChatBackend for ScriptedChat {
    fn chat(&self, history: &[ChatTurn], decoding: &Decoding) -> Result<String, BackendError> {
        validate_history(history, decoding)?;
        let mut queue = self.queue.lock().expect("script lock");
        match queue.front().cloned() {
            None => Err(BackendError::protocol("chat script exhausted")),
            // a failure stays at the head so retries observe it again
            Some(ScriptStep::Fail(e)) => {
                if !e.retryable() {
                    queue.pop_front();
                }
                Err(e)
            }
            Some(ScriptStep::Reply(text)) => {
                queue.pop_front();
                Ok(text)
            }
        }
    }
}

/// Luminance-Laplacian detector used by [`HeuristicChat`].
///
/// Flags pixels whose 4-neighbour Laplacian magnitude exceeds `threshold`
/// and returns the bounding box of the flagged pixels when there are at
/// least `min_pixels` of them. Smooth content yields `None`.
pub fn detect_texture_anomaly(image: &ImageBuffer, threshold: i32, min_pixels: usize) -> Option<BoundingBox> {
    let (w, h) = image.dims();
    if w < 3 || h < 3 {
        return None;
    }
    let lum = |x: u32, y: u32| {
        let [r, g, b] = image.pixel(x, y);
        (i32::from(r) * 299 + i32::from(g) * 587 + i32::from(b) * 114) / 1000
    };
    let mut count = 0usize;
    let (mut x1, mut y1, mut x2, mut y2) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let lap = 4 * lum(x, y) - lum(x - 1, y) - lum(x + 1, y) - lum(x, y - 1) - lum(x, y + 1);
            if lap.abs() > threshold {
                count += 1;
                let (xi, yi) = (i64::from(x), i64::from(y));
                x1 = x1.min(xi);
                y1 = y1.min(yi);
                x2 = x2.max(xi + 1);
                y2 = y2.max(yi + 1);
            }
        }
    }
    (count >= min_pixels).then(|| BoundingBox::new(x1, y1, x2, y2))
}

/// Chat stub that answers from a fixed image heuristic instead of a model.
///
/// The reply depends only on the prompt stage and on the last image of the
/// last user turn (the full target image), so it is a pure function of the
/// request. The coarse stage proposes the detected region, padded, plus a
/// low-confidence corner region; later stages return the tight region with
/// a `tampered` label. Images without a detection get an `authentic` verdict.
#[derive(Debug, Clone)]
pub struct HeuristicChat {
    pub laplacian_threshold: i32,
    pub min_pixels: usize,
}

impl Default for HeuristicChat {
    fn default() -> Self {
        Self {
            laplacian_threshold: 40,
            min_pixels: 12,
        }
    }
}

impl ChatBackend for HeuristicChat {
    fn chat(&self, history: &[ChatTurn], decoding: &Decoding) -> Result<String, BackendError> {
        validate_history(history, decoding)?;
        let turn = history.iter().rev().find(|t| t.role == Role::User).expect("validated");
        let target = turn
            .images
            .last()
            .ok_or_else(|| BackendError::protocol("no image in the request"))?;
        let (w, h) = target.dims();
        let detection = detect_texture_anomaly(target, self.laplacian_threshold, self.min_pixels);
        let coarse = turn.text.contains("Stage: coarse");

        let reply = match detection {
            None => json!({
                "boxes": [],
                "analysis": "Texture statistics are smooth and consistent across the frame; no region stands out.",
                "label": "authentic",
            }),
            Some(tight) if coarse => {
                let dx = (tight.width() / 4).max(1);
                let dy = (tight.height() / 4).max(1);
                let padded = BoundingBox::new(
                    (tight.x1 - dx).max(0),
                    (tight.y1 - dy).max(0),
                    (tight.x2 + dx).min(i64::from(w)),
                    (tight.y2 + dy).min(i64::from(h)),
                );
                let (cw, ch) = ((i64::from(w) / 4).max(1), (i64::from(h) / 4).max(1));
                let cx = (tight.x1 + tight.x2) / 2;
                let cy = (tight.y1 + tight.y2) / 2;
                let corner_x = if cx * 2 < i64::from(w) { i64::from(w) - cw } else { 0 };
                let corner_y = if cy * 2 < i64::from(h) { i64::from(h) - ch } else { 0 };
                json!({
                    "boxes": [
                        {"bbox": padded, "confidence": 0.8,
                         "note": "High-frequency texture inconsistent with the smooth surroundings."},
                        {"bbox": [corner_x, corner_y, corner_x + cw, corner_y + ch], "confidence": 0.2,
                         "note": "Low-prior region kept for recall."},
                    ],
                    "analysis": "Noise level differs sharply between one region and the rest of the image.",
                })
            }
            Some(tight) => json!({
                "boxes": [
                    {"bbox": tight, "confidence": 0.9,
                     "note": "Boundary of the region whose noise level disagrees with the background."},
                ],
                "analysis": "The selected region carries a noise texture absent elsewhere, consistent with a pasted patch.",
                "label": "tampered",
            }),
        };
        Ok(format!("```json\n{reply}\n```"))
    }
}

/// Embedding stub: a unit vector drawn from a generator seeded by the hash of
/// the input.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
    pub model_id: String,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dim: 64,
            model_id: "stub-hash-embed-64".into(),
        }
    }
}

impl HashEmbedder {
    fn vector(&self, domain: &[u8], payload: &[u8]) -> Result<EmbeddingVector, BackendError> {
        let mut h = Sha256::new();
        h.update(domain);
        h.update(payload);
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let values: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        EmbeddingVector::normalized(values, self.model_id.clone())
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn model_id(&self) -> Result<String, BackendError> {
        Ok(self.model_id.clone())
    }

    fn embed_image(&self, image: &ImageBuffer) -> Result<EmbeddingVector, BackendError> {
        self.vector(b"image", image.digest().as_bytes())
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.is_empty() {
            return Err(BackendError::protocol("cannot embed empty text"));
        }
        self.vector(b"text", text.as_bytes())
    }
}

/// Segmentation stub: the mask is exactly the union of the prompt boxes.
#[derive(Debug, Clone, Copy, Default)]
pub struct BoxFillSegmenter;

impl SegmentBackend for BoxFillSegmenter {
    fn segment(&self, image: &ImageBuffer, prompt: &SegmentPrompt) -> Result<MaskImage, BackendError> {
        let (w, h) = image.dims();
        prompt.validate((w, h))?;
        let masks: Vec<MaskImage> = prompt
            .boxes
            .iter()
            .map(|b| MaskImage::from_boxes(w, h, std::slice::from_ref(b)))
            .collect();
        union_masks(&masks).map_err(|e| BackendError::protocol(e.to_string()))
    }
}

/// Segmenter stub that always returns an empty mask.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmptySegmenter;

impl SegmentBackend for EmptySegmenter {
    fn segment(&self, image: &ImageBuffer, prompt: &SegmentPrompt) -> Result<MaskImage, BackendError> {
        prompt.validate(image.dims())?;
        Ok(MaskImage::zeros(image.width(), image.height()))
    }
}

/// Shared handle to a scripted chat, for tests that inspect the queue.
pub fn scripted(replies: &[&str]) -> Arc<ScriptedChat> {
    Arc::new(ScriptedChat::replies(replies.iter().copied()))
}
