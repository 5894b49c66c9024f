//! Pixel- and image-level detection metrics.

use thiserror::Error;

use crate::messages::Label;
use crate::tools::MaskImage;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((u32, u32), (u32, u32)),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    /// The metric is undefined for this sample; it is skipped, not failed.
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
}

/// Per-pixel scores in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    width: u32,
    height: u32,
    values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Option<Self> {
        (values.len() == width as usize * height as usize && values.iter().all(|v| (0.0..=1.0).contains(v)))
            .then_some(Self { width, height, values })
    }

    /// 1.0 inside the mask, 0.0 outside.
    pub fn from_mask(mask: &MaskImage) -> Self {
        Self {
            width: mask.width(),
            height: mask.height(),
            values: mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Binary mask of scores `>= threshold`.
    pub fn threshold(&self, threshold: f64) -> MaskImage {
        MaskImage::from_bits(self.width, self.height, self.values.iter().map(|&v| v >= threshold).collect())
            .expect("dims match")
    }
}

fn check_dims(scores: (u32, u32), gt: &MaskImage) -> Result<(), MetricError> {
    if scores != gt.dims() {
        return Err(MetricError::DimensionMismatch(scores, gt.dims()));
    }
    Ok(())
}

/// ROC-AUC of scores against the mask via the Mann-Whitney rank statistic,
/// with tied scores sharing their mid-rank.
pub fn pixel_auc(scores: &ScoreMap, gt: &MaskImage) -> Result<f64, MetricError> {
    check_dims(scores.dims(), gt)?;
    let positives = gt.count_ones();
    let negatives = gt.bits().len() - positives;
    if positives == 0 {
        return Err(MetricError::Undefined("ground truth has no positive pixels"));
    }
    if negatives == 0 {
        return Err(MetricError::Undefined("ground truth has no negative pixels"));
    }
    let mut order: Vec<usize> = (0..scores.values.len()).collect();
    order.sort_by(|&a, &b| scores.values[a].total_cmp(&scores.values[b]));

    let bits = gt.bits();
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let v = scores.values[order[i]];
        let mut j = i;
        while j < order.len() && scores.values[order[j]] == v {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        let block_pos = order[i..j].iter().filter(|&&k| bits[k]).count();
        positive_rank_sum += mid_rank * block_pos as f64;
        i = j;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: sweep thresholds from high to low, treating tied
/// scores as one block, and sum precision times the recall gained at each
/// block.
pub fn pixel_ap(scores: &ScoreMap, gt: &MaskImage) -> Result<f64, MetricError> {
    check_dims(scores.dims(), gt)?;
    let positives = gt.count_ones();
    if positives == 0 {
        return Err(MetricError::Undefined("ground truth has no positive pixels"));
    }
    let mut order: Vec<usize> = (0..scores.values.len()).collect();
    order.sort_by(|&a, &b| scores.values[b].total_cmp(&scores.values[a]));

    let bits = gt.bits();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let v = scores.values[order[i]];
        let mut block_tp = 0;
        let mut j = i;
        while j < order.len() && scores.values[order[j]] == v {
            if bits[order[j]] {
                block_tp += 1;
            }
            j += 1;
        }
        tp += block_tp;
        fp += (j - i) - block_tp;
        if block_tp > 0 {
            ap += (block_tp as f64 / positives as f64) * (tp as f64 / (tp + fp) as f64);
        }
        i = j;
    }
    Ok(ap)
}

/// `2TP / (2TP + FP + FN)`; undefined when both masks are empty.
pub fn pixel_f1(pred: &MaskImage, gt: &MaskImage) -> Result<f64, MetricError> {
    check_dims(pred.dims(), gt)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return Err(MetricError::Undefined("prediction and ground truth are both empty"));
    }
    Ok(2.0 * tp as f64 / denom as f64)
}

/// Binary F1 with `tampered` as the positive class. Returns 0 when there are
/// no positives in either list.
pub fn image_f1(pred: &[Label], gt: &[Label]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::Undefined("no samples"));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (Label::Tampered, Label::Tampered) => tp += 1,
            (Label::Tampered, Label::Authentic) => fp += 1,
            (Label::Authentic, Label::Tampered) => fn_ += 1,
            (Label::Authentic, Label::Authentic) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}
