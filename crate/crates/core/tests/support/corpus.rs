//! Generated reasoning messages and a corpus of damaged model replies.
#![allow(dead_code)]

use forensic_core::messages::{serialize_reasoning_message, BoundingBox, BoxHypothesis, Label, ReasoningMessage};
use rand::Rng;

pub const DIMS: (u32, u32) = (64, 48);

const PHRASES: [&str; 6] = [
    "Noise is stronger inside the region.",
    "Edge halo {sharp} along the \"left\" border.",
    "Lighting direction disagrees: shadow falls east, key light from the west.",
    "JPEG grid shifted by 3px; ringing near text.",
    "Unicode check: é, ß, 漢字.",
    "",
];

fn text(rng: &mut impl Rng) -> String {
    let n = rng.random_range(0..3);
    (0..n).map(|_| PHRASES[rng.random_range(0..PHRASES.len())]).collect::<Vec<_>>().join(" ")
}

fn bbox(rng: &mut impl Rng, dims: (u32, u32)) -> BoundingBox {
    let (w, h) = (i64::from(dims.0), i64::from(dims.1));
    let x1 = rng.random_range(0..w);
    let y1 = rng.random_range(0..h);
    BoundingBox::new(x1, y1, rng.random_range(x1 + 1..=w), rng.random_range(y1 + 1..=h))
}

/// A message that satisfies every invariant of the format.
pub fn valid_message(rng: &mut impl Rng, dims: (u32, u32)) -> ReasoningMessage {
    let label = match rng.random_range(0..3) {
        0 => None,
        1 => Some(Label::Authentic),
        _ => Some(Label::Tampered),
    };
    let n = match label {
        Some(Label::Authentic) => 0,
        Some(Label::Tampered) => rng.random_range(1..=8),
        None => rng.random_range(0..=8),
    };
    ReasoningMessage {
        step: rng.random_range(0..5),
        boxes: (0..n)
            .map(|_| BoxHypothesis {
                bbox: bbox(rng, dims),
                confidence: match rng.random_range(0..4) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => rng.random::<f64>(),
                },
                note: text(rng),
            })
            .collect(),
        analysis: text(rng),
        label,
    }
}

/// One corpus entry: the raw reply, and the message a correct parser must
/// recover from it (`None` when the reply is unrecoverable).
pub struct Case {
    pub kind: &'static str,
    pub raw: String,
    pub expected: Option<ReasoningMessage>,
}

fn tampered(rng: &mut impl Rng) -> ReasoningMessage {
    loop {
        let m = valid_message(rng, DIMS);
        if m.label == Some(Label::Tampered) {
            return m;
        }
    }
}

/// `n` damaged replies, cycling through every mutation kind.
pub fn damaged_corpus(rng: &mut impl Rng, n: usize) -> Vec<Case> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut m = valid_message(rng, DIMS);
        let json = serialize_reasoning_message(&m);
        let pretty = serde_json::to_string_pretty(&m).unwrap();
        let case = |kind, raw: String, expected: Option<ReasoningMessage>| Case { kind, raw, expected };
        out.push(match i % 14 {
            0 => case("fence", format!("```json\n{json}\n```"), Some(m)),
            1 => case("bare fence", format!("```\n{pretty}\n```"), Some(m)),
            2 => case("prose", format!("Here is my analysis:\n{json}\nLet me know if you need more."), Some(m)),
            3 => case("prose and fence", format!("Sure.\n```json\n{pretty}\n```\nDone."), Some(m)),
            4 => {
                let raw = pretty.replace("\n  ]", ",\n  ]").replace("\n}", ",\n}");
                case("trailing commas", raw, Some(m))
            }
            5 => {
                let mut m = tampered(rng);
                let json = serialize_reasoning_message(&m);
                let raw = json.replacen(&format!(",\"confidence\":{}", serde_json::to_string(&m.boxes[0].confidence).unwrap()), "", 1);
                m.boxes[0].confidence = 0.5;
                case("missing confidence", raw, Some(m))
            }
            6 => {
                let raw = json.replacen('{', "{\"reasoning_effort\":\"high\",", 1);
                case("unknown field", raw, Some(m))
            }
            7 => {
                let mut m = tampered(rng);
                let b = m.boxes[0].bbox;
                let mut raw_msg = m.clone();
                raw_msg.boxes[0].bbox = BoundingBox::new(b.x1 - 20, b.y1 - 5, b.x2 + 100, b.y2 + 100);
                m.boxes[0].bbox = BoundingBox::new(0, 0.max(b.y1 - 5), i64::from(DIMS.0), i64::from(DIMS.1));
                m.boxes[0].bbox.x1 = 0.max(b.x1 - 20);
                case("out of bounds box", format!("```json\n{}\n```", serialize_reasoning_message(&raw_msg)), Some(m))
            }
            8 => {
                let cut = json.len() * rng.random_range(1..9) / 10;
                let cut = (0..=cut).rev().find(|&c| json.is_char_boundary(c)).unwrap();
                case("truncated", format!("```json\n{}", &json[..cut]), None)
            }
            9 => case("refusal", "I cannot analyze this image.".into(), None),
            10 => case("bad label", json.replacen("\"boxes\"", "\"label\":\"maybe\",\"boxes\"", 1).replacen(",\"label\":\"authentic\"", "", 1).replacen(",\"label\":\"tampered\"", "", 1), None),
            11 => {
                m = tampered(rng);
                let json = serialize_reasoning_message(&m);
                let start = json.find("\"boxes\":[").unwrap() + "\"boxes\":[".len();
                let end = json.find("],\"analysis\"").unwrap();
                case("tampered without boxes", format!("{}{}", &json[..start], &json[end..]), None)
            }
            12 => {
                m = tampered(rng);
                let json = serialize_reasoning_message(&m);
                let b: [i64; 4] = m.boxes[0].bbox.into();
                let three = format!("[{},{},{}]", b[0], b[1], b[2]);
                let four = format!("[{},{},{},{}]", b[0], b[1], b[2], b[3]);
                case("three coordinates", json.replacen(&four, &three, 1), None)
            }
            _ => case("missing analysis", json.replacen("\"analysis\"", "\"analysys\"", 1), None),
        });
    }
    out
}
