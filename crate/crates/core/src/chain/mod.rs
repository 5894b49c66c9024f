//! Multi-step progressive reasoning.
//!
//! A run filters the rule set for the target image, asks the chat model for
//! coarse candidate regions (step 0), then refines them for up to `n` update
//! steps. Each update sees the relevant rules, the previous reasoning message,
//! crops of the previous candidates and the full target. The loop stops early
//! when consecutive steps agree on their boxes, or when the model returns a
//! zero-box authentic verdict. The final boxes are handed to the segmenter to
//! produce the pixel mask.

mod prompts;
mod trace;

pub use prompts::{render, PromptSet, DEFAULT_PROMPT_ID, REASONING_MESSAGE_SCHEMA};
pub use trace::{Clock, EventKind, Trace, TraceEvent};

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{history_digest, BackendError, Backends, ChatTurn, Decoding, SegmentPrompt};
use crate::messages::{
    bbox_iou, parse_reasoning_message, select_top_boxes, serialize_reasoning_message, BoundingBox,
    Label, ParseOutcome, ReasoningMessage,
};
use crate::rulebase::{render_rules_prompt, RelevanceThreshold, Rule, RuleError, RuleIndex, DEFAULT_FALLBACK_TOP_K};
use crate::tools::{crop, pad_box, ImageBuffer, MaskImage, ToolError};

pub const DEFAULT_QUERY: &str =
    "Determine whether this image has been digitally manipulated and, if so, localize the manipulated region.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    /// Update steps after the coarse proposal.
    pub steps: u32,
    /// Per-pair IoU needed for boxes to count as stable.
    pub stabilization_iou: f64,
    pub max_boxes_stage1: usize,
    pub relevance_threshold: RelevanceThreshold,
    pub fallback_top_k: usize,
    /// Context margin around crops sent to the model, as a fraction of box size.
    pub crop_margin: f64,
    pub prompt_template_id: String,
    pub decoding: Decoding,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            steps: 2,
            stabilization_iou: 0.9,
            max_boxes_stage1: 8,
            relevance_threshold: RelevanceThreshold::default(),
            fallback_top_k: DEFAULT_FALLBACK_TOP_K,
            crop_margin: 0.1,
            prompt_template_id: DEFAULT_PROMPT_ID.into(),
            decoding: Decoding::default(),
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<&'static PromptSet, ChainError> {
        let bad = |m: String| Err(ChainError::Config(m));
        if self.steps < 1 {
            return bad("steps must be at least 1".into());
        }
        if !(self.stabilization_iou > 0.0 && self.stabilization_iou <= 1.0) {
            return bad(format!("stabilization_iou {} outside (0, 1]", self.stabilization_iou));
        }
        if self.max_boxes_stage1 < 1 {
            return bad("max_boxes_stage1 must be at least 1".into());
        }
        if self.fallback_top_k < 1 {
            return bad("fallback_top_k must be at least 1".into());
        }
        if !(self.crop_margin >= 0.0 && self.crop_margin.is_finite()) {
            return bad(format!("crop_margin {} must be non-negative", self.crop_margin));
        }
        PromptSet::by_id(&self.prompt_template_id)
            .ok_or_else(|| ChainError::Config(format!("unknown prompt template `{}`", self.prompt_template_id)))
    }
}

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Backend {
        stage: &'static str,
        #[source]
        source: BackendError,
    },
    #[error("rule filtering failed: {0}")]
    Rules(#[from] RuleError),
    #[error("step {step}: unparseable reasoning message ({reason})")]
    Parse { step: u32, reason: String, raw: String },
    #[error("step {step}: no image-level label after consolidation")]
    MissingLabel { step: u32 },
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error("invalid chain state: {0}")]
    InvalidState(String),
}

/// A failed run together with everything traced before the failure.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct ChainFailure {
    #[source]
    pub error: ChainError,
    pub trace: Trace,
}

/// One cropped candidate region fed back to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Vision {
    /// Box of record, as stated by the model.
    pub region: BoundingBox,
    /// Region grown by the context margin; what was actually cropped.
    pub context: BoundingBox,
    pub patch: Arc<ImageBuffer>,
}

#[derive(Debug, Clone)]
pub struct ChainState {
    /// Index of the latest reasoning message.
    pub step: u32,
    pub query: String,
    pub target: Arc<ImageBuffer>,
    pub rules: Vec<Rule>,
    pub messages: Vec<ReasoningMessage>,
    pub views: Vec<Vec<Vision>>,
    pub trace: Trace,
    /// Set once the model returned a zero-box authentic verdict.
    pub short_circuited: bool,
}

impl ChainState {
    pub fn new(query: impl Into<String>, target: Arc<ImageBuffer>, rules: Vec<Rule>, clock: Clock) -> Self {
        Self {
            step: 0,
            query: query.into(),
            target,
            rules,
            messages: Vec::new(),
            views: Vec::new(),
            trace: Trace::new(clock),
            short_circuited: false,
        }
    }

    pub fn latest(&self) -> Option<&ReasoningMessage> {
        self.messages.last()
    }

    fn dims(&self) -> (u32, u32) {
        self.target.dims()
    }
}

/// Output of a complete run.
#[derive(Debug, Clone)]
pub struct ForensicResult {
    pub label: Label,
    pub mask: Option<MaskImage>,
    pub final_boxes: Vec<BoundingBox>,
    pub explanation: String,
    pub messages: Vec<ReasoningMessage>,
    pub rules: Vec<String>,
    pub trace: Trace,
}

/// JSON form of a result; the mask itself is written separately as PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub label: Label,
    pub boxes: Vec<BoundingBox>,
    pub explanation: String,
    pub mask: Option<String>,
    pub steps: usize,
    pub rules: Vec<String>,
}

impl ForensicResult {
    pub fn document(&self, mask_path: Option<&str>) -> ResultDocument {
        ResultDocument {
            label: self.label,
            boxes: self.final_boxes.clone(),
            explanation: self.explanation.clone(),
            mask: mask_path.map(str::to_string),
            steps: self.messages.len(),
            rules: self.rules.clone(),
        }
    }

    /// Label/mask consistency: tampered carries a non-empty mask, authentic none.
    pub fn is_consistent(&self) -> bool {
        match self.label {
            Label::Tampered => self.mask.as_ref().is_some_and(|m| !m.is_empty()),
            Label::Authentic => self.mask.as_ref().is_none_or(MaskImage::is_empty),
        }
    }
}

/// Boxes match one-to-one under greedy highest-IoU pairing, with equal counts
/// and every matched pair at IoU >= `tau`.
pub fn has_stabilized(prev: &ReasoningMessage, curr: &ReasoningMessage, tau: f64) -> bool {
    let (a, b) = (prev.bboxes(), curr.bboxes());
    if a.is_empty() || a.len() != b.len() {
        return false;
    }
    let mut pairs: Vec<(f64, usize, usize)> = a
        .iter()
        .enumerate()
        .flat_map(|(i, pa)| b.iter().enumerate().map(move |(j, pb)| (bbox_iou(pa, pb), i, j)))
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut matched = 0;
    for (iou, i, j) in pairs {
        if used_a[i] || used_b[j] {
            continue;
        }
        if iou < tau {
            return false;
        }
        used_a[i] = true;
        used_b[j] = true;
        matched += 1;
    }
    matched == a.len()
}

fn chat_call(
    state: &mut ChainState,
    backends: &Backends,
    decoding: &Decoding,
    history: &[ChatTurn],
    stage: &'static str,
) -> Result<String, ChainError> {
    let digest = history_digest(history, decoding);
    let started = Instant::now();
    let (result, retries) = backends.retry.run(|| backends.chat.chat(history, decoding));
    state.trace.push(EventKind::BackendCall {
        service: "chat".into(),
        stage: stage.into(),
        digest,
        latency_ms: latency_ms(state.trace.clock(), started),
        retries,
        error: result.as_ref().err().map(ToString::to_string),
    });
    result.map_err(|source| ChainError::Backend { stage, source })
}

fn latency_ms(clock: Clock, started: Instant) -> u64 {
    match clock {
        Clock::Frozen => 0,
        Clock::System => started.elapsed().as_millis() as u64,
    }
}

fn parse_step(state: &mut ChainState, raw: String, step: u32) -> Result<ReasoningMessage, ChainError> {
    let (msg, report) = parse_reasoning_message(&raw, state.dims(), step);
    state.trace.push(EventKind::Parse {
        step,
        outcome: report.outcome,
        repairs: report.repairs.clone(),
        failure: report.failure.clone(),
    });
    match msg {
        Some(m) => Ok(m),
        None => {
            debug_assert_eq!(report.outcome, ParseOutcome::Failed);
            Err(ChainError::Parse {
                step,
                reason: report.failure.unwrap_or_default(),
                raw,
            })
        }
    }
}

fn make_views(state: &mut ChainState, msg: &ReasoningMessage, margin: f64) -> Result<Vec<Vision>, ChainError> {
    let dims = state.dims();
    let views = msg
        .boxes
        .iter()
        .map(|b| {
            let context = pad_box(&b.bbox, margin, dims);
            Ok(Vision {
                region: b.bbox,
                context,
                patch: Arc::new(crop(&state.target, &context)?),
            })
        })
        .collect::<Result<Vec<_>, ToolError>>()?;
    state.trace.push(EventKind::Crops {
        step: msg.step,
        regions: views.iter().map(|v| v.region).collect(),
        contexts: views.iter().map(|v| v.context).collect(),
    });
    Ok(views)
}

fn base_vars<'a>(state: &'a ChainState, rules: &'a str, dims: &'a (String, String), step: &'a str) -> BTreeMap<&'static str, &'a str> {
    BTreeMap::from([
        ("query", state.query.as_str()),
        ("rules", rules),
        ("width", dims.0.as_str()),
        ("height", dims.1.as_str()),
        ("step", step),
    ])
}

/// Coarse region proposal: one chat call over the query, the rendered rules
/// and the target image, producing the first message and its crops.
pub fn init_step(state: &mut ChainState, config: &ChainConfig, backends: &Backends) -> Result<(), ChainError> {
    let prompts = config.validate()?;
    if !state.messages.is_empty() {
        return Err(ChainError::InvalidState("init_step on a started chain".into()));
    }
    let rules = render_rules_prompt(&state.rules)?;
    let dims = (state.target.width().to_string(), state.target.height().to_string());
    let text = render(prompts.coarse, &base_vars(state, &rules, &dims, "0"));
    let history = [
        ChatTurn::system(prompts.system_prompt()),
        ChatTurn::user(text, vec![state.target.clone()]),
    ];
    let raw = chat_call(state, backends, &config.decoding, &history, "coarse")?;
    let mut msg = parse_step(state, raw, 0)?;
    if msg.boxes.len() > config.max_boxes_stage1 {
        let before = msg.boxes.len();
        msg.boxes = select_top_boxes(&msg.boxes, config.max_boxes_stage1);
        state.trace.push(EventKind::BoxesCapped {
            step: 0,
            kept: msg.boxes.len(),
            dropped: before - msg.boxes.len(),
        });
    }
    let views = make_views(state, &msg, config.crop_margin)?;
    if msg.is_authentic_verdict() {
        state.short_circuited = true;
        state.trace.push(EventKind::ShortCircuit { step: 0 });
    }
    state.step = 0;
    state.messages.push(msg);
    state.views.push(views);
    Ok(())
}

/// One refinement: rules, the previous message, its crops and the full
/// target go to the model, which returns the next message.
pub fn update_step(state: &mut ChainState, config: &ChainConfig, backends: &Backends) -> Result<(), ChainError> {
    let prompts = config.validate()?;
    let prev = state
        .latest()
        .cloned()
        .ok_or_else(|| ChainError::InvalidState("update_step before init_step".into()))?;
    if state.short_circuited {
        return Err(ChainError::InvalidState("chain already reached a verdict".into()));
    }
    if state.step >= config.steps {
        return Err(ChainError::InvalidState(format!("step budget {} exhausted", config.steps)));
    }
    let next = state.step + 1;
    let prev_views = state.views.last().cloned().unwrap_or_default();

    let mut crop_list = String::new();
    for (i, v) in prev_views.iter().enumerate() {
        crop_list.push_str(&format!(
            "{}. crop of candidate {} {} (shown with context {})\n",
            i + 1,
            i + 1,
            v.region,
            v.context
        ));
    }
    crop_list.push_str(&format!("{}. the full target image\n", prev_views.len() + 1));

    let rules = render_rules_prompt(&state.rules)?;
    let dims = (state.target.width().to_string(), state.target.height().to_string());
    let step_str = next.to_string();
    let previous = serialize_reasoning_message(&prev);
    let mut vars = base_vars(state, &rules, &dims, &step_str);
    vars.insert("previous", &previous);
    vars.insert("crop_list", &crop_list);
    let text = render(prompts.refine, &vars);

    let mut images: Vec<Arc<ImageBuffer>> = prev_views.iter().map(|v| v.patch.clone()).collect();
    images.push(state.target.clone());
    let history = [ChatTurn::system(prompts.system_prompt()), ChatTurn::user(text, images)];
    let raw = chat_call(state, backends, &config.decoding, &history, "refine")?;
    let msg = parse_step(state, raw, next)?;

    let prior = prev.bboxes();
    state.trace.push(EventKind::Refinement {
        step: next,
        best_prior_iou: msg
            .boxes
            .iter()
            .map(|b| prior.iter().map(|p| bbox_iou(&b.bbox, p)).fold(0.0, f64::max))
            .collect(),
    });
    let views = make_views(state, &msg, config.crop_margin)?;
    if msg.is_authentic_verdict() {
        state.short_circuited = true;
        state.trace.push(EventKind::ShortCircuit { step: next });
    }
    state.step = next;
    state.messages.push(msg);
    state.views.push(views);
    Ok(())
}

fn consolidate(state: &mut ChainState, config: &ChainConfig, backends: &Backends) -> Result<(), ChainError> {
    let prompts = config.validate()?;
    let prev = state.latest().cloned().expect("consolidate after init");
    let next = state.step + 1;
    state.trace.push(EventKind::Consolidation { step: next });
    let rules = render_rules_prompt(&state.rules)?;
    let dims = (state.target.width().to_string(), state.target.height().to_string());
    let step_str = next.to_string();
    let previous = serialize_reasoning_message(&prev);
    let mut vars = base_vars(state, &rules, &dims, &step_str);
    vars.insert("previous", &previous);
    let text = render(prompts.consolidate, &vars);
    let history = [
        ChatTurn::system(prompts.system_prompt()),
        ChatTurn::user(text, vec![state.target.clone()]),
    ];
    let raw = chat_call(state, backends, &config.decoding, &history, "consolidate")?;
    let msg = parse_step(state, raw, next)?;
    let views = make_views(state, &msg, config.crop_margin)?;
    state.step = next;
    state.messages.push(msg);
    state.views.push(views);
    Ok(())
}

/// Turn the final message into a result: authentic verdicts get no mask,
/// tampered verdicts are segmented from their boxes. A final message without
/// a label triggers one consolidation call first.
pub fn finalize(state: &mut ChainState, config: &ChainConfig, backends: &Backends) -> Result<ForensicResult, ChainError> {
    if state.messages.is_empty() {
        return Err(ChainError::InvalidState("finalize before init_step".into()));
    }
    if state.latest().and_then(|m| m.label).is_none() {
        consolidate(state, config, backends)?;
    }
    let last = state.latest().cloned().expect("non-empty");
    let label = last.label.ok_or(ChainError::MissingLabel { step: last.step })?;
    let final_boxes = last.bboxes();

    let mask = match label {
        Label::Authentic => None,
        Label::Tampered => Some(segment(state, &final_boxes, backends)?),
    };
    state.trace.push(EventKind::Finalized {
        label,
        boxes: final_boxes.clone(),
        mask_pixels: mask.as_ref().map_or(0, MaskImage::count_ones),
    });

    let explanation = state
        .messages
        .iter()
        .map(|m| format!("[step {}] {}", m.step, m.analysis.trim()))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(ForensicResult {
        label,
        mask,
        final_boxes,
        explanation,
        messages: state.messages.clone(),
        rules: state.rules.iter().map(|r| r.id.clone()).collect(),
        trace: state.trace.clone(),
    })
}

fn segment(state: &mut ChainState, boxes: &[BoundingBox], backends: &Backends) -> Result<MaskImage, ChainError> {
    let dims = state.dims();
    let prompt = SegmentPrompt::new(boxes.to_vec(), dims)
        .map_err(|source| ChainError::Backend { stage: "segment", source })?;
    let started = Instant::now();
    let (result, retries) = backends.retry.run(|| backends.segmenter.segment(&state.target, &prompt));
    let result = result.and_then(|m| {
        if m.dims() == dims {
            Ok(m)
        } else {
            Err(BackendError::protocol(format!("mask is {:?}, image is {dims:?}", m.dims())))
        }
    });
    state.trace.push(EventKind::BackendCall {
        service: "segment".into(),
        stage: "segment".into(),
        digest: segment_digest(&state.target, boxes),
        latency_ms: latency_ms(state.trace.clock(), started),
        retries,
        error: result.as_ref().err().map(ToString::to_string),
    });
    let mask = result.map_err(|source| ChainError::Backend { stage: "segment", source })?;
    if mask.is_empty() {
        // keep tampered => non-empty mask by falling back to the boxes themselves
        state.trace.push(EventKind::SegmentationFallback {
            reason: "segmenter returned an empty mask; using the box region".into(),
        });
        return Ok(MaskImage::from_boxes(dims.0, dims.1, boxes));
    }
    Ok(mask)
}

fn segment_digest(image: &ImageBuffer, boxes: &[BoundingBox]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(image.digest().as_bytes());
    for b in boxes {
        h.update(b.to_string().as_bytes());
    }
    hex::encode(h.finalize())
}

/// Full run: filter rules, coarse proposal, up to `n` refinements with early
/// stopping, then segmentation of the final boxes.
pub fn run_chain(
    query: &str,
    target: Arc<ImageBuffer>,
    index: &RuleIndex,
    config: &ChainConfig,
    backends: &Backends,
) -> Result<ForensicResult, ChainFailure> {
    let mut state = ChainState::new(query, target, Vec::new(), backends.clock);
    match drive(&mut state, index, config, backends) {
        Ok(result) => Ok(result),
        Err(error) => {
            state.trace.push(EventKind::Failed {
                stage: format!("step {}", state.step),
                detail: error.to_string(),
            });
            Err(ChainFailure {
                error,
                trace: state.trace,
            })
        }
    }
}

fn drive(
    state: &mut ChainState,
    index: &RuleIndex,
    config: &ChainConfig,
    backends: &Backends,
) -> Result<ForensicResult, ChainError> {
    config.validate()?;

    let started = Instant::now();
    let (embedding, retries) = backends.retry.run(|| backends.embedder.embed_image(&state.target));
    state.trace.push(EventKind::BackendCall {
        service: "embed".into(),
        stage: "filter".into(),
        digest: state.target.digest(),
        latency_ms: latency_ms(state.trace.clock(), started),
        retries,
        error: embedding.as_ref().err().map(ToString::to_string),
    });
    let embedding = embedding.map_err(|source| ChainError::Backend { stage: "embed", source })?;
    if embedding.model_id != index.model_id {
        return Err(ChainError::Config(format!(
            "image embedding model `{}` differs from rule embedding model `{}`",
            embedding.model_id, index.model_id
        )));
    }
    let selection = index.filter(&embedding.values, config.relevance_threshold, config.fallback_top_k)?;
    state.trace.push(EventKind::RulesFiltered {
        threshold: config.relevance_threshold.value(),
        kept: selection.ids(),
        similarities: selection.rules.iter().map(|s| s.similarity).collect(),
        fallback: selection.fallback,
    });
    state.rules = selection.rule_list();

    init_step(state, config, backends)?;
    while !state.short_circuited && state.step < config.steps {
        update_step(state, config, backends)?;
        if state.short_circuited {
            break;
        }
        let n = state.messages.len();
        let stabilized = has_stabilized(&state.messages[n - 2], &state.messages[n - 1], config.stabilization_iou);
        state.trace.push(EventKind::Stabilization {
            step: state.step,
            stabilized,
        });
        if stabilized {
            break;
        }
    }
    finalize(state, config, backends)
}
