//! Scripted chat runs over a small synthetic target.
#![allow(dead_code)]

use std::sync::Arc;

use forensic_core::backends::stub::{HashEmbedder, ScriptedChat};
use forensic_core::backends::Backends;
use forensic_core::chain::{run_chain, ChainConfig, ChainFailure, DEFAULT_QUERY};
use forensic_core::rulebase::{RuleIndex, RuleSet};
use forensic_core::tools::ImageBuffer;
use forensic_core::ForensicResult;
use rand::Rng;
use serde_json::json;

pub const W: u32 = 64;
pub const H: u32 = 48;

pub fn target() -> Arc<ImageBuffer> {
    Arc::new(ImageBuffer::from_fn(W, H, |x, y| [(x * 3) as u8, (y * 5) as u8, 90]))
}

pub fn index() -> RuleIndex {
    RuleIndex::build(RuleSet::builtin(), &HashEmbedder::default()).unwrap()
}

/// Serialized reply with the given boxes (all at one confidence) and label.
pub fn reply(step: u32, boxes: &[[i64; 4]], label: Option<&str>) -> String {
    let boxes: Vec<_> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| json!({"bbox": b, "confidence": 0.9 / (1.0 + i as f64), "note": format!("candidate {i}")}))
        .collect();
    let mut v = json!({"step": step, "boxes": boxes, "analysis": format!("analysis at step {step}")});
    if let Some(l) = label {
        v["label"] = json!(l);
    }
    v.to_string()
}

pub fn config(steps: u32) -> ChainConfig {
    ChainConfig {
        steps,
        ..ChainConfig::default()
    }
}

pub fn run_scripted(
    replies: &[String],
    config: &ChainConfig,
    backends: Backends,
) -> (Result<ForensicResult, ChainFailure>, Arc<ScriptedChat>) {
    let chat = Arc::new(ScriptedChat::replies(replies.iter().cloned()));
    let backends = backends.with_chat(chat.clone());
    (run_chain(DEFAULT_QUERY, target(), &index(), config, &backends), chat)
}

fn random_box(rng: &mut impl Rng) -> [i64; 4] {
    let x1 = rng.random_range(0..i64::from(W) - 1);
    let y1 = rng.random_range(0..i64::from(H) - 1);
    [x1, y1, rng.random_range(x1 + 1..=i64::from(W)), rng.random_range(y1 + 1..=i64::from(H))]
}

/// A random but well-formed reply: an authentic verdict, or 1..=4 boxes with
/// a tampered label or none. Boxes sometimes repeat the previous reply's.
pub fn random_reply(rng: &mut impl Rng, step: u32, prev: &mut Vec<[i64; 4]>) -> String {
    if rng.random_bool(0.15) {
        prev.clear();
        return reply(step, &[], Some("authentic"));
    }
    let boxes: Vec<[i64; 4]> = if !prev.is_empty() && rng.random_bool(0.3) {
        prev.clone()
    } else {
        (0..rng.random_range(1..=4)).map(|_| random_box(rng)).collect()
    };
    *prev = boxes.clone();
    let label = if rng.random_bool(0.5) { Some("tampered") } else { None };
    reply(step, &boxes, label)
}
