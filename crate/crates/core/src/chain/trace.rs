//! Append-only event log for one pipeline run.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::messages::{BoundingBox, Label, ParseOutcome};

/// Time source for trace timestamps and latencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clock {
    #[default]
    System,
    /// Always reads zero, so traces of deterministic runs are byte-stable.
    Frozen,
}

impl Clock {
    pub fn now_ms(self) -> u64 {
        match self {
            Clock::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
            Clock::Frozen => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    BackendCall {
        service: String,
        stage: String,
        digest: String,
        latency_ms: u64,
        retries: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    RulesFiltered {
        threshold: f64,
        kept: Vec<String>,
        similarities: Vec<f64>,
        fallback: bool,
    },
    Parse {
        step: u32,
        outcome: ParseOutcome,
        repairs: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        failure: Option<String>,
    },
    BoxesCapped {
        step: u32,
        kept: usize,
        dropped: usize,
    },
    Crops {
        step: u32,
        regions: Vec<BoundingBox>,
        contexts: Vec<BoundingBox>,
    },
    /// Best IoU of every new box against the previous step's boxes.
    Refinement {
        step: u32,
        best_prior_iou: Vec<f64>,
    },
    Stabilization {
        step: u32,
        stabilized: bool,
    },
    ShortCircuit {
        step: u32,
    },
    Consolidation {
        step: u32,
    },
    SegmentationFallback {
        reason: String,
    },
    Finalized {
        label: Label,
        boxes: Vec<BoundingBox>,
        mask_pixels: usize,
    },
    Failed {
        stage: String,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub ts_ms: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    clock: Clock,
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new(clock: Clock) -> Self {
        Self {
            clock,
            events: Vec::new(),
        }
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn push(&mut self, kind: EventKind) {
        let seq = self.events.len() as u64;
        self.events.push(TraceEvent {
            seq,
            ts_ms: self.clock.now_ms(),
            kind,
        });
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Backend calls made to `service` ("chat", "embed", "segment").
    pub fn calls_to(&self, service: &str) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(&e.kind, EventKind::BackendCall { service: s, .. } if s == service))
            .count()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("trace event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<TraceEvent>, _>>()?;
        Ok(Self {
            clock: Clock::System,
            events,
        })
    }
}
