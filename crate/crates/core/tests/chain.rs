#[path = "support/oracles.rs"]
mod oracles;
#[path = "support/scripts.rs"]
mod scripts;

use std::sync::Arc;

use forensic_core::backends::stub::{EmptySegmenter, HashEmbedder, ScriptStep, ScriptedChat};
use forensic_core::backends::{BackendError, BackendErrorKind, Backends};
use forensic_core::chain::{
    finalize, has_stabilized, init_step, run_chain, update_step, ChainError, ChainState, Clock, EventKind, Trace,
    DEFAULT_QUERY,
};
use forensic_core::messages::{BoundingBox, BoxHypothesis, Label, ReasoningMessage};
use forensic_core::rulebase::RuleSet;
use forensic_core::tools::MaskImage;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scripts::{config, reply, run_scripted, target, H, W};

fn stub() -> Backends {
    Backends::stub()
}

fn state() -> ChainState {
    let rules = RuleSet::builtin().rules.into_iter().take(3).collect();
    ChainState::new(DEFAULT_QUERY, target(), rules, Clock::Frozen)
}

fn with_chat(replies: &[String]) -> (Backends, Arc<ScriptedChat>) {
    let chat = Arc::new(ScriptedChat::replies(replies.iter().cloned()));
    (stub().with_chat(chat.clone()), chat)
}

fn message(boxes: &[[i64; 4]]) -> ReasoningMessage {
    ReasoningMessage {
        step: 0,
        boxes: boxes
            .iter()
            .map(|&b| BoxHypothesis {
                bbox: b.into(),
                confidence: 0.5,
                note: String::new(),
            })
            .collect(),
        analysis: String::new(),
        label: None,
    }
}

#[test]
fn init_with_two_boxes_makes_two_crops() {
    let (backends, _) = with_chat(&[reply(0, &[[0, 0, 10, 10], [20, 20, 40, 30]], None)]);
    let mut s = state();
    init_step(&mut s, &config(2), &backends).unwrap();
    assert_eq!(s.messages.len(), 1);
    assert_eq!(s.views[0].len(), 2);
    assert_eq!(s.views[0][1].region, BoundingBox::new(20, 20, 40, 30));
    // context crops are padded by the margin and stay inside the image
    assert_eq!(s.views[0][1].context, BoundingBox::new(18, 19, 42, 31));
    assert_eq!(s.views[0][1].patch.dims(), (24, 12));
    assert!(!s.short_circuited);
    assert!(init_step(&mut s, &config(2), &backends).is_err(), "init twice");
}

#[test]
fn authentic_init_short_circuits() {
    let (res, chat) = run_scripted(&[reply(0, &[], Some("authentic"))], &config(2), stub());
    let res = res.unwrap();
    assert_eq!(res.label, Label::Authentic);
    assert!(res.mask.is_none());
    assert_eq!(res.messages.len(), 1);
    assert_eq!(chat.remaining(), 0);
    assert_eq!(res.trace.calls_to("chat"), 1);
    assert_eq!(res.trace.calls_to("segment"), 0);
}

#[test]
fn stage_one_cap_keeps_highest_confidence() {
    let boxes: Vec<[i64; 4]> = (0..12).map(|i| [i * 4, 0, i * 4 + 3, 10]).collect();
    // confidences descend with position, so the first k survive
    let (backends, _) = with_chat(&[reply(0, &boxes, None)]);
    let mut s = state();
    let mut c = config(2);
    c.max_boxes_stage1 = 8;
    init_step(&mut s, &c, &backends).unwrap();
    assert_eq!(s.messages[0].bboxes(), boxes[..8].iter().map(|&b| b.into()).collect::<Vec<BoundingBox>>());

    let (backends, _) = with_chat(&[reply(0, &boxes, None)]);
    let mut s = state();
    c.max_boxes_stage1 = 3;
    init_step(&mut s, &c, &backends).unwrap();
    assert_eq!(s.messages[0].boxes.len(), 3);
    assert!(s.trace.events().iter().any(|e| matches!(e.kind, EventKind::BoxesCapped { kept: 3, dropped: 5, .. })));
}

#[test]
fn update_narrows_and_detects_stability() {
    let a = [4, 4, 20, 20];
    let (backends, _) = with_chat(&[
        reply(0, &[a, [30, 10, 50, 40]], None),
        reply(1, &[a], None),
        reply(2, &[a], Some("tampered")),
    ]);
    let c = config(4);
    let mut s = state();
    init_step(&mut s, &c, &backends).unwrap();
    update_step(&mut s, &c, &backends).unwrap();
    assert_eq!(s.messages[1].boxes.len(), 1);
    assert!(!has_stabilized(&s.messages[0], &s.messages[1], 0.9));
    update_step(&mut s, &c, &backends).unwrap();
    assert!(has_stabilized(&s.messages[1], &s.messages[2], 0.9));
    assert_eq!(s.step, 2);
    // the update saw one crop plus the full target
    assert_eq!(s.views[1].len(), 1);
}

#[test]
fn stabilization_example_against_exhaustive_pairing() {
    let prev = message(&[[0, 0, 20, 20], [40, 0, 60, 20]]);
    let curr = message(&[[0, 0, 20, 19], [40, 0, 60, 14]]);
    assert!((oracles::raster_iou(&prev.boxes[0].bbox, &curr.boxes[0].bbox, 0, 60) - 0.95).abs() < 1e-12);
    assert!((oracles::raster_iou(&prev.boxes[1].bbox, &curr.boxes[1].bbox, 0, 60) - 0.7).abs() < 1e-12);
    assert!(!has_stabilized(&prev, &curr, 0.9));
    assert!(!oracles::exists_stable_pairing(&prev.bboxes(), &curr.bboxes(), 0.9));
    assert!(has_stabilized(&prev, &curr, 0.7));
    assert!(oracles::exists_stable_pairing(&prev.bboxes(), &curr.bboxes(), 0.7));
}

fn small_box() -> impl Strategy<Value = [i64; 4]> {
    (0i64..24, 0i64..24, 1i64..9, 1i64..9).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 2000, failure_persistence: None, ..ProptestConfig::default() })]

    /// A greedy match is a valid pairing, so it never claims stability that
    /// no pairing supports. Identical box lists are always stable.
    #[test]
    fn greedy_stability_is_sound(
        a in proptest::collection::vec(small_box(), 1..4),
        jitter in proptest::collection::vec((-1i64..=1, -1i64..=1), 4),
        perm_seed in any::<u64>(),
        tau in 0.3f64..1.0,
    ) {
        let mut b: Vec<[i64; 4]> = a.iter().zip(&jitter).map(|(r, (dx, dy))| [r[0] + dx, r[1] + dy, r[2] + dx, r[3] + dy]).collect();
        use rand::seq::SliceRandom;
        b.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let (ma, mb) = (message(&a), message(&b));
        if has_stabilized(&ma, &mb, tau) {
            prop_assert!(oracles::exists_stable_pairing(&ma.bboxes(), &mb.bboxes(), tau));
        }
        prop_assert!(has_stabilized(&ma, &ma, tau));
    }
}

#[test]
fn timeouts_on_every_retry_surface_as_timeout() {
    let chat = Arc::new(ScriptedChat::new([ScriptStep::Fail(BackendError::timeout("model took too long"))]));
    let backends = stub().with_chat(chat);
    let failure = run_chain(DEFAULT_QUERY, target(), &scripts::index(), &config(2), &backends).unwrap_err();
    match &failure.error {
        ChainError::Backend { stage, source } => {
            assert_eq!(*stage, "coarse");
            assert_eq!(source.kind, BackendErrorKind::Timeout);
        }
        other => panic!("unexpected {other}"),
    }
    let retries: Vec<u32> = failure
        .trace
        .events()
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::BackendCall { service, retries, .. } if service == "chat" => Some(*retries),
            _ => None,
        })
        .collect();
    assert_eq!(retries, [2]);
    assert!(matches!(failure.trace.events().last().unwrap().kind, EventKind::Failed { .. }));
}

#[test]
fn unparseable_reply_is_a_parse_error() {
    let (res, _) = run_scripted(&[reply(0, &[[1, 1, 5, 5]], None), "I cannot analyze this image.".into()], &config(2), stub());
    let failure = res.unwrap_err();
    assert!(matches!(failure.error, ChainError::Parse { step: 1, .. }));
}

#[test]
fn finalize_cases() {
    // authentic after init
    let (backends, _) = with_chat(&[reply(0, &[], Some("authentic"))]);
    let mut s = state();
    init_step(&mut s, &config(2), &backends).unwrap();
    let r = finalize(&mut s, &config(2), &backends).unwrap();
    assert!(r.mask.is_none());

    // one tampered box fills exactly its rectangle
    let (backends, _) = with_chat(&[reply(0, &[[3, 4, 13, 9]], Some("tampered"))]);
    let mut s = state();
    init_step(&mut s, &config(2), &backends).unwrap();
    let r = finalize(&mut s, &config(2), &backends).unwrap();
    assert_eq!(r.mask.as_ref().unwrap().count_ones(), 50);
    assert_eq!(r.final_boxes, [BoundingBox::new(3, 4, 13, 9)]);

    // two overlapping boxes give their union
    let (backends, _) = with_chat(&[reply(0, &[[0, 0, 10, 10], [5, 5, 15, 15]], Some("tampered"))]);
    let mut s = state();
    init_step(&mut s, &config(2), &backends).unwrap();
    let r = finalize(&mut s, &config(2), &backends).unwrap();
    assert_eq!(r.mask.as_ref().unwrap().count_ones(), 100 + 100 - 25);

    // no label on the last message: one consolidation call decides
    let (backends, chat) = with_chat(&[reply(0, &[[0, 0, 10, 10]], None), reply(1, &[[0, 0, 8, 8]], Some("tampered"))]);
    let mut s = state();
    init_step(&mut s, &config(2), &backends).unwrap();
    let r = finalize(&mut s, &config(2), &backends).unwrap();
    assert_eq!(chat.remaining(), 0);
    assert_eq!(r.mask.unwrap().count_ones(), 64);
    assert_eq!(r.messages.len(), 2);
}

#[test]
fn non_stabilizing_run_uses_every_step() {
    let replies = [
        reply(0, &[[0, 0, 20, 20], [30, 20, 60, 40]], None),
        reply(1, &[[2, 2, 18, 18]], None),
        reply(2, &[[6, 6, 14, 14]], Some("tampered")),
    ];
    let (res, chat) = run_scripted(&replies, &config(2), stub());
    let res = res.unwrap();
    let steps: Vec<u32> = res.messages.iter().map(|m| m.step).collect();
    assert_eq!(steps, [0, 1, 2]);
    assert_eq!(chat.remaining(), 0);
    assert_eq!(res.trace.calls_to("chat"), 3);
    assert_eq!(res.trace.calls_to("segment"), 1);
    // the segmentation call is the last backend call
    let last_call = res
        .trace
        .events()
        .iter()
        .rev()
        .find_map(|e| match &e.kind {
            EventKind::BackendCall { service, .. } => Some(service.clone()),
            _ => None,
        })
        .unwrap();
    assert_eq!(last_call, "segment");
    assert_eq!(res.mask.unwrap().count_ones(), 64);
}

#[test]
fn repeated_boxes_stop_early() {
    let a = [8, 8, 24, 24];
    let replies = [
        reply(0, &[a, [40, 10, 60, 30]], None),
        reply(1, &[a], Some("tampered")),
        reply(2, &[a], Some("tampered")),
        reply(3, &[[0, 0, 4, 4]], Some("tampered")),
        reply(4, &[[0, 0, 4, 4]], Some("tampered")),
    ];
    let (res, chat) = run_scripted(&replies, &config(4), stub());
    let res = res.unwrap();
    assert_eq!(res.messages.len(), 3, "R_0, R_1, R_2");
    assert_eq!(chat.remaining(), 2);
    assert_eq!(res.final_boxes, [BoundingBox::from(a)]);
    let stabilized: Vec<bool> = res
        .trace
        .events()
        .iter()
        .filter_map(|e| match e.kind {
            EventKind::Stabilization { stabilized, .. } => Some(stabilized),
            _ => None,
        })
        .collect();
    assert_eq!(stabilized, [false, true]);
}

#[test]
fn chat_calls_are_bounded_by_steps_plus_two() {
    for n in 1..=4u32 {
        // never stabilizes and never labels: n updates plus one consolidation
        let mut replies: Vec<String> = (0..=n).map(|i| reply(i, &[[i as i64, 0, i as i64 + 10, 10]], None)).collect();
        replies.push(reply(n + 1, &[[0, 0, 5, 5]], Some("tampered")));
        let (res, _) = run_scripted(&replies, &config(n), stub());
        let res = res.unwrap();
        assert_eq!(res.trace.calls_to("chat"), n as usize + 2);
        assert_eq!(res.trace.calls_to("segment"), 1);
    }
}

#[test]
fn runs_are_byte_identical() {
    let replies = [
        reply(0, &[[0, 0, 20, 20], [30, 20, 60, 40]], None),
        reply(1, &[[2, 2, 18, 18]], None),
        reply(2, &[[6, 6, 14, 14]], Some("tampered")),
    ];
    let render = || {
        let (res, _) = run_scripted(&replies, &config(2), stub());
        let res = res.unwrap();
        let doc = serde_json::to_string(&res.document(Some("mask.png"))).unwrap();
        (doc, res.trace.to_jsonl(), res.mask.unwrap().encode_png().unwrap())
    };
    assert_eq!(render(), render());
}

#[test]
fn trace_round_trips_through_jsonl() {
    let r = reply(0, &[[1, 1, 9, 9]], Some("tampered"));
    let (res, _) = run_scripted(&[r.clone(), r], &config(2), stub());
    let trace = res.unwrap().trace;
    let text = trace.to_jsonl();
    assert_eq!(Trace::from_jsonl(&text).unwrap().to_jsonl(), text);
    assert!(text.lines().all(|l| l.contains("\"ts_ms\":0")));
}

#[test]
fn empty_segmentation_falls_back_to_boxes() {
    let backends = stub().with_segmenter(Arc::new(EmptySegmenter));
    let r = reply(0, &[[1, 1, 9, 9]], Some("tampered"));
    let (res, _) = run_scripted(&[r.clone(), r], &config(2), backends);
    let res = res.unwrap();
    assert_eq!(res.mask.as_ref().unwrap(), &MaskImage::from_boxes(W, H, &[BoundingBox::new(1, 1, 9, 9)]));
    assert!(res.trace.events().iter().any(|e| matches!(e.kind, EventKind::SegmentationFallback { .. })));
}

#[test]
fn embedding_model_mismatch_is_rejected() {
    let backends = Backends {
        embedder: Arc::new(HashEmbedder {
            dim: 64,
            model_id: "other".into(),
        }),
        ..stub()
    };
    let (res, _) = run_scripted(&[reply(0, &[], Some("authentic"))], &config(2), backends);
    assert!(matches!(res.unwrap_err().error, ChainError::Config(_)));
}

#[test]
fn label_and_mask_agree_across_random_scripts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut completed = 0;
    for case in 0..300 {
        let n = 1 + case % 4;
        let mut prev = Vec::new();
        let replies: Vec<String> = (0..n + 2).map(|i| scripts::random_reply(&mut rng, i, &mut prev)).collect();
        let backends = if case % 5 == 0 { stub().with_segmenter(Arc::new(EmptySegmenter)) } else { stub() };
        let (res, _) = run_scripted(&replies, &config(n), backends);
        let res = match res {
            Ok(r) => r,
            // a consolidation reply without a label is a reported error, not a result
            Err(f) if matches!(f.error, ChainError::MissingLabel { .. }) => continue,
            Err(f) => panic!("case {case}: {f}\n{replies:#?}"),
        };
        completed += 1;
        assert!(res.is_consistent(), "case {case}");
        assert!(res.trace.calls_to("chat") <= n as usize + 2);
        match res.label {
            Label::Tampered => assert!(res.mask.as_ref().unwrap().count_ones() > 0),
            Label::Authentic => assert!(res.mask.is_none()),
        }
    }
    assert!(completed > 250, "{completed}");
}
