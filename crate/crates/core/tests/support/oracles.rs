//! Brute-force reference implementations. Every function here works pixel
//! by pixel or pair by pair, with no shared code paths with the library.
#![allow(dead_code)]

use forensic_core::messages::{BoundingBox, Label};
use forensic_core::tools::ImageBuffer;

fn inside(b: &BoundingBox, x: i64, y: i64) -> bool {
    b.x1 <= x && x < b.x2 && b.y1 <= y && y < b.y2
}

/// IoU by counting pixels over the window `[lo, hi)^2`.
pub fn raster_iou(a: &BoundingBox, b: &BoundingBox, lo: i64, hi: i64) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for y in lo..hi {
        for x in lo..hi {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Image pixels covered by `b`, in row-major order.
pub fn raster_clip(b: &BoundingBox, w: u32, h: u32) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for y in 0..i64::from(h) {
        for x in 0..i64::from(w) {
            if inside(b, x, y) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Pixels of a box over the window `[lo, hi)^2`.
pub fn raster_box(b: &BoundingBox, lo: i64, hi: i64) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for y in lo..hi {
        for x in lo..hi {
            if inside(b, x, y) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Crop by scanning the whole image and keeping pixels inside `b`. `None`
/// when `b` is empty or reaches outside the image.
pub fn raster_crop(img: &ImageBuffer, b: &BoundingBox) -> Option<(u32, u32, Vec<u8>)> {
    let (w, h) = img.dims();
    let covered = raster_clip(b, w, h);
    let lo = b.x1.min(b.y1).min(0);
    let hi = b.x2.max(b.y2).max(i64::from(w.max(h)));
    let full = raster_box(b, lo, hi);
    if covered.is_empty() || covered.len() != full.len() {
        return None;
    }
    let mut xs: Vec<i64> = covered.iter().map(|p| p.0).collect();
    let mut ys: Vec<i64> = covered.iter().map(|p| p.1).collect();
    xs.sort_unstable();
    xs.dedup();
    ys.sort_unstable();
    ys.dedup();
    let mut bytes = Vec::new();
    for (x, y) in covered {
        bytes.extend_from_slice(&img.pixel(x as u32, y as u32));
    }
    Some((xs.len() as u32, ys.len() as u32, bytes))
}

pub fn raster_union(masks: &[Vec<bool>]) -> Vec<bool> {
    let n = masks[0].len();
    (0..n).map(|i| masks.iter().any(|m| m[i])).collect()
}

/// Fraction of (positive, negative) pairs ordered correctly, ties counting half.
pub fn auc_pairs(scores: &[f64], gt: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0u64);
    for (i, &gi) in gt.iter().enumerate() {
        if !gi {
            continue;
        }
        for (j, &gj) in gt.iter().enumerate() {
            if gj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Sum of precision times recall increment over every distinct threshold,
/// predicting positive where `score >= t`.
pub fn ap_sweep(scores: &[f64], gt: &[bool]) -> Option<f64> {
    let positives = gt.iter().filter(|&&g| g).count();
    if positives == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let tp = scores.iter().zip(gt).filter(|(&s, &g)| s >= t && g).count();
        let fp = scores.iter().zip(gt).filter(|(&s, &g)| s >= t && !g).count();
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

pub fn f1_counts(pred: &[bool], gt: &[bool]) -> Option<f64> {
    let tp = pred.iter().zip(gt).filter(|(&p, &g)| p && g).count() as f64;
    let fp = pred.iter().zip(gt).filter(|(&p, &g)| p && !g).count() as f64;
    let fn_ = pred.iter().zip(gt).filter(|(&p, &g)| !p && g).count() as f64;
    (tp + fp + fn_ > 0.0).then(|| {
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    })
}

pub fn image_f1_counts(pred: &[Label], gt: &[Label]) -> f64 {
    let t = Label::Tampered;
    let pb: Vec<bool> = pred.iter().map(|&l| l == t).collect();
    let gb: Vec<bool> = gt.iter().map(|&l| l == t).collect();
    f1_counts(&pb, &gb).unwrap_or(0.0)
}

pub fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Whether some one-to-one pairing of `a` with `b` has every IoU >= tau,
/// trying every permutation.
pub fn exists_stable_pairing(a: &[BoundingBox], b: &[BoundingBox], tau: f64) -> bool {
    let all = a.iter().chain(b);
    let lo = all.clone().flat_map(|r| [r.x1, r.y1]).min().unwrap_or(0);
    let hi = all.flat_map(|r| [r.x2, r.y2]).max().unwrap_or(0);
    fn go(a: &[BoundingBox], b: &[BoundingBox], used: &mut Vec<bool>, i: usize, w: (i64, i64, f64)) -> bool {
        let (lo, hi, tau) = w;
        if i == a.len() {
            return true;
        }
        for j in 0..b.len() {
            if !used[j] && raster_iou(&a[i], &b[j], lo, hi) >= tau {
                used[j] = true;
                if go(a, b, used, i + 1, w) {
                    return true;
                }
                used[j] = false;
            }
        }
        false
    }
    !a.is_empty() && a.len() == b.len() && go(a, b, &mut vec![false; b.len()], 0, (lo, hi, tau))
}
