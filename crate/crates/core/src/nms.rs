//! Classical greedy non-maximum suppression.

use crate::error::{validation, Result};
use crate::geometry::{iou, BBox};

/// Boxes, their scores, and the suppression threshold.
#[derive(Debug, Clone)]
pub struct NmsInput {
    boxes: Vec<BBox>,
    scores: Vec<f64>,
    threshold: f64,
}

impl NmsInput {
    pub fn new(boxes: Vec<BBox>, scores: Vec<f64>, threshold: f64) -> Result<Self> {
        if boxes.len() != scores.len() {
            return Err(validation(format!("{} boxes but {} scores", boxes.len(), scores.len())));
        }
        validate_threshold(threshold)?;
        if let Some(i) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
            return Err(validation(format!("score {} at index {i} outside [0, 1]", scores[i])));
        }
        Ok(Self { boxes, scores, threshold })
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

pub(crate) fn validate_threshold(nt: f64) -> Result<()> {
    if !(nt > 0.0 && nt < 1.0) {
        return Err(validation(format!("NMS threshold {nt} must lie in (0, 1)")));
    }
    Ok(())
}

/// Visiting order of greedy NMS: descending score, ties by lowest index.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps lower index first among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy NMS. Returns the kept original indices in selection order.
///
/// A remaining box is removed when its IoU with the newly kept box is
/// `>= threshold`.
pub fn nms_greedy(input: &NmsInput) -> Vec<usize> {
    let order = score_order(&input.scores);
    let mut alive = vec![true; order.len()];
    let mut kept = Vec::new();
    for pos in 0..order.len() {
        if !alive[pos] {
            continue;
        }
        let m = order[pos];
        kept.push(m);
        let bm = &input.boxes[m];
        for (later, flag) in alive.iter_mut().enumerate().skip(pos + 1) {
            if *flag && iou(bm, &input.boxes[order[later]]) >= input.threshold {
                *flag = false;
            }
        }
    }
    kept
}
