//! Structured reasoning messages exchanged with the chat model.
//!
//! A reasoning message is a JSON object holding candidate regions (boxes with
//! a confidence and a note), a free-text forensic analysis and, at the final
//! step, an image-level label. Models rarely emit clean JSON, so
//! [`parse_reasoning_message`] walks a bounded repair ladder and records every
//! repair it applied in a [`ParseReport`].
//!
//! Boxes use absolute pixel coordinates with a top-left origin and half-open
//! extents: `[x1, x2) x [y1, y2)`.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Maximum number of boxes a parsed message may carry.
pub const MAX_BOXES: usize = 8;

/// Confidence assigned to boxes that arrive without one.
pub const DEFAULT_CONFIDENCE: f64 = 0.5;

/// Axis-aligned box in pixel coordinates, half-open on the right and bottom.
///
/// Coordinates are signed so that model output pointing outside the image can
/// be represented before [`clamp_box`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct BoundingBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl BoundingBox {
    pub const fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Box covering a whole `width x height` image.
    pub fn full(width: u32, height: u32) -> Self {
        Self::new(0, 0, i64::from(width), i64::from(height))
    }

    pub fn width(&self) -> i64 {
        (self.x2 - self.x1).max(0)
    }

    pub fn height(&self) -> i64 {
        (self.y2 - self.y1).max(0)
    }

    /// Pixel count; zero for degenerate boxes.
    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let b = BoundingBox::new(
            self.x1.max(other.x1),
            self.y1.max(other.y1),
            self.x2.min(other.x2),
            self.y2.min(other.y2),
        );
        (b.area() > 0).then_some(b)
    }

    /// True when the box is non-degenerate and lies inside a `width x height` image.
    pub fn is_within(&self, width: u32, height: u32) -> bool {
        self.area() > 0
            && self.x1 >= 0
            && self.y1 >= 0
            && self.x2 <= i64::from(width)
            && self.y2 <= i64::from(height)
    }
}

impl From<[i64; 4]> for BoundingBox {
    fn from(v: [i64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [i64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Intersection over union under the half-open convention.
pub fn bbox_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b).map_or(0, |i| i.area());
    let union = a.area() + b.area() - inter;
    if union <= 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Clip a box to `[0, width] x [0, height]`. Returns `None` (rejection) when
/// nothing of the box survives.
pub fn clamp_box(b: &BoundingBox, dims: (u32, u32)) -> Option<BoundingBox> {
    let (w, h) = (i64::from(dims.0), i64::from(dims.1));
    let c = BoundingBox::new(
        b.x1.clamp(0, w),
        b.y1.clamp(0, h),
        b.x2.clamp(0, w),
        b.y2.clamp(0, h),
    );
    (c.area() > 0).then_some(c)
}

/// Image-level verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Authentic,
    Tampered,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Authentic => "authentic",
            Label::Tampered => "tampered",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One candidate region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxHypothesis {
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub note: String,
}

/// Structured model output for one reasoning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningMessage {
    pub step: u32,
    pub boxes: Vec<BoxHypothesis>,
    pub analysis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl ReasoningMessage {
    pub fn bboxes(&self) -> Vec<BoundingBox> {
        self.boxes.iter().map(|b| b.bbox).collect()
    }

    /// Zero-box authentic verdict.
    pub fn is_authentic_verdict(&self) -> bool {
        self.label == Some(Label::Authentic) && self.boxes.is_empty()
    }

    /// Label/box consistency: tampered needs a box, authentic allows none.
    pub fn is_consistent(&self) -> bool {
        match self.label {
            Some(Label::Tampered) => !self.boxes.is_empty(),
            Some(Label::Authentic) => self.boxes.is_empty(),
            None => true,
        }
    }
}

/// Canonical compact JSON with stable key order.
pub fn serialize_reasoning_message(msg: &ReasoningMessage) -> String {
    serde_json::to_string(msg).expect("reasoning message serializes")
}

/// Indices of the `k` highest-confidence boxes, ties broken by earlier
/// position, returned in their original order.
pub fn top_box_indices(boxes: &[BoxHypothesis], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[b]
            .confidence
            .total_cmp(&boxes[a].confidence)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Keep the `k` highest-confidence boxes in their original order.
pub fn select_top_boxes(boxes: &[BoxHypothesis], k: usize) -> Vec<BoxHypothesis> {
    top_box_indices(boxes, k)
        .into_iter()
        .map(|i| boxes[i].clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseOutcome {
    Clean,
    Repaired,
    Failed,
}

/// What the parser did to get from raw text to a message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub outcome: ParseOutcome,
    pub repairs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Extract, repair and validate a reasoning message from raw model text.
///
/// The repair ladder is: strip code fences, extract the first balanced
/// `{...}`, drop trailing commas, fill a missing confidence with 0.5. Boxes
/// are then clamped to `image_dims`, zero-area boxes dropped, and at most
/// [`MAX_BOXES`] of the highest-confidence boxes kept. Anything the ladder
/// cannot fix yields a `Failed` report and no message.
pub fn parse_reasoning_message(
    raw: &str,
    image_dims: (u32, u32),
    step: u32,
) -> (Option<ReasoningMessage>, ParseReport) {
    let mut repairs = Vec::new();
    let result = extract_json_object(raw, &mut repairs)
        .and_then(|value| build_message(value, image_dims, step, &mut repairs));
    match result {
        Ok(msg) => {
            let outcome = if repairs.is_empty() {
                ParseOutcome::Clean
            } else {
                ParseOutcome::Repaired
            };
            (
                Some(msg),
                ParseReport {
                    outcome,
                    repairs,
                    failure: None,
                },
            )
        }
        Err(reason) => (
            None,
            ParseReport {
                outcome: ParseOutcome::Failed,
                repairs,
                failure: Some(reason),
            },
        ),
    }
}

fn extract_json_object(raw: &str, repairs: &mut Vec<String>) -> Result<Value, String> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err("empty response".into());
    }
    if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(trimmed) {
        return Ok(v);
    }

    let mut text = trimmed;
    if let Some(inner) = strip_code_fence(text) {
        repairs.push("stripped code fence".into());
        text = inner;
    }
    let candidate = match first_balanced_object(text) {
        Some(obj) => {
            if obj.len() != text.trim().len() {
                repairs.push("extracted JSON object from surrounding text".into());
            }
            obj
        }
        None => return Err("no balanced JSON object found".into()),
    };
    match serde_json::from_str::<Value>(candidate) {
        Ok(v) => Ok(v),
        Err(first_err) => {
            let (fixed, removed) = remove_trailing_commas(candidate);
            if removed > 0 {
                if let Ok(v) = serde_json::from_str::<Value>(&fixed) {
                    repairs.push(format!("removed {removed} trailing comma(s)"));
                    return Ok(v);
                }
            }
            Err(format!("invalid JSON: {first_err}"))
        }
    }
}

/// Contents of the first fenced block, if the text contains one.
fn strip_code_fence(text: &str) -> Option<&str> {
    let open = text.find("```")?;
    let after = &text[open + 3..];
    // skip an optional language tag on the fence line
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let tag = after[..body_start].trim();
    if !tag.is_empty() && !tag.chars().all(|c| c.is_ascii_alphanumeric()) {
        // single-line fence such as ```{"a":1}```
        let end = after.find("```")?;
        return Some(after[..end].trim());
    }
    let body = &after[body_start..];
    let end = body.find("```").unwrap_or(body.len());
    Some(body[..end].trim())
}

/// The first `{...}` whose braces balance, ignoring braces inside strings.
fn first_balanced_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, ch) in text[start..].char_indices() {
        if in_str {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

fn remove_trailing_commas(text: &str) -> (String, usize) {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut removed = 0;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &ch) in chars.iter().enumerate() {
        if in_str {
            out.push(ch);
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        if ch == '"' {
            in_str = true;
        } else if ch == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                removed += 1;
                continue;
            }
        }
        out.push(ch);
    }
    (out, removed)
}

fn build_message(
    value: Value,
    dims: (u32, u32),
    step: u32,
    repairs: &mut Vec<String>,
) -> Result<ReasoningMessage, String> {
    let Value::Object(mut obj) = value else {
        return Err("top-level JSON value is not an object".into());
    };

    match obj.remove("step") {
        None | Some(Value::Null) => {}
        Some(v) if v.as_u64() == Some(u64::from(step)) => {}
        Some(v) => repairs.push(format!("replaced step {v} with {step}")),
    }

    let analysis = match obj.remove("analysis") {
        Some(Value::String(s)) => s,
        Some(_) => return Err("field `analysis` is not a string".into()),
        None => return Err("missing field `analysis`".into()),
    };

    let label = match obj.remove("label") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => match s.as_str() {
            "authentic" => Some(Label::Authentic),
            "tampered" => Some(Label::Tampered),
            other => return Err(format!("unknown label `{other}`")),
        },
        Some(_) => return Err("field `label` is not a string".into()),
    };

    let raw_boxes = match obj.remove("boxes") {
        Some(Value::Array(items)) => items,
        Some(_) => return Err("field `boxes` is not an array".into()),
        None => return Err("missing field `boxes`".into()),
    };

    let mut unknown: Vec<&String> = obj.keys().collect();
    unknown.sort();
    for key in unknown {
        repairs.push(format!("ignored unknown field `{key}`"));
    }

    let mut boxes = Vec::with_capacity(raw_boxes.len());
    for (idx, item) in raw_boxes.into_iter().enumerate() {
        let Value::Object(entry) = item else {
            return Err(format!("box {idx} is not an object"));
        };
        let hyp = parse_box(idx, entry, repairs)?;
        match clamp_box(&hyp.bbox, dims) {
            None => repairs.push(format!("dropped box {idx}: no area inside the image")),
            Some(clamped) => {
                if clamped != hyp.bbox {
                    repairs.push(format!("clamped box {idx} to image bounds"));
                }
                boxes.push(BoxHypothesis {
                    bbox: clamped,
                    ..hyp
                });
            }
        }
    }
    if boxes.len() > MAX_BOXES {
        repairs.push(format!(
            "kept the {MAX_BOXES} highest-confidence boxes of {}",
            boxes.len()
        ));
        boxes = select_top_boxes(&boxes, MAX_BOXES);
    }

    let msg = ReasoningMessage {
        step,
        boxes,
        analysis,
        label,
    };
    if !msg.is_consistent() {
        return Err(match msg.label {
            Some(Label::Tampered) => "tampered label without any valid box".into(),
            _ => "authentic label with boxes".into(),
        });
    }
    Ok(msg)
}

fn parse_box(
    idx: usize,
    mut entry: Map<String, Value>,
    repairs: &mut Vec<String>,
) -> Result<BoxHypothesis, String> {
    let coords = match entry.remove("bbox") {
        Some(Value::Array(c)) if c.len() == 4 => c,
        Some(_) => return Err(format!("box {idx}: `bbox` must be an array of 4 integers")),
        None => return Err(format!("box {idx}: missing `bbox`")),
    };
    let mut xy = [0i64; 4];
    for (slot, c) in xy.iter_mut().zip(&coords) {
        *slot = as_integer(c).ok_or_else(|| format!("box {idx}: coordinate {c} is not an integer"))?;
    }
    let confidence = match entry.remove("confidence") {
        None | Some(Value::Null) => {
            repairs.push(format!(
                "filled missing confidence of box {idx} with {DEFAULT_CONFIDENCE}"
            ));
            DEFAULT_CONFIDENCE
        }
        Some(v) => match v.as_f64() {
            Some(c) if (0.0..=1.0).contains(&c) => c,
            _ => return Err(format!("box {idx}: confidence {v} outside [0, 1]")),
        },
    };
    let note = match entry.remove("note") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s,
        Some(_) => return Err(format!("box {idx}: `note` is not a string")),
    };
    Ok(BoxHypothesis {
        bbox: BoundingBox::from(xy),
        confidence,
        note,
    })
}

fn as_integer(v: &Value) -> Option<i64> {
    if let Some(i) = v.as_i64() {
        return Some(i);
    }
    let f = v.as_f64()?;
    (f.fract() == 0.0 && f.abs() < 1e15).then_some(f as i64)
}
