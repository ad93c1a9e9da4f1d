//! Flat-buffer entry point for foreign callers.
//!
//! Detections travel as a row-major `n x 6` array
//! `[x1, y1, x2, y2, score, gt]` with `gt = -1` for unassigned, ground truth
//! as an `m x 4` array. Gradients come back dense. Every malformed input maps
//! to an error code; nothing here panics on caller data.

use std::fmt;

use crate::geometry::BBox;
use crate::nms_loss::{nms_loss_forward_backward, Detection, LossConfig, Reduction};

pub const DET_STRIDE: usize = 6;
pub const GT_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct FlatSceneBuffer<'a> {
    pub detections: &'a [f64],
    pub gt_boxes: &'a [f64],
    pub nt: f64,
    pub lambda_pull: f64,
    pub lambda_push: f64,
    pub iou_clamp_eps: f64,
    pub reduction: Reduction,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatLossOutput {
    pub l_pull: f64,
    pub l_push: f64,
    pub l_nms: f64,
    pub kept: Vec<i64>,
    /// `n x 4`, row-major.
    pub coord_grads: Vec<f64>,
    pub score_grads: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i32)]
pub enum FlatErrorCode {
    Shape = 1,
    InvalidBox = 2,
    InvalidScore = 3,
    GtIndex = 4,
    InvalidConfig = 5,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatError {
    pub code: FlatErrorCode,
    pub message: String,
}

impl fmt::Display for FlatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error {}: {}", self.code as i32, self.message)
    }
}

impl std::error::Error for FlatError {}

fn err(code: FlatErrorCode, message: impl Into<String>) -> FlatError {
    FlatError { code, message: message.into() }
}

/// Decodes the buffers into detections and ground-truth boxes.
pub fn decode(buf: &FlatSceneBuffer) -> Result<(Vec<Detection>, Vec<BBox>), FlatError> {
    if !buf.detections.len().is_multiple_of(DET_STRIDE) {
        return Err(err(
            FlatErrorCode::Shape,
            format!("detection buffer length {} is not a multiple of 6", buf.detections.len()),
        ));
    }
    if !buf.gt_boxes.len().is_multiple_of(GT_STRIDE) {
        return Err(err(
            FlatErrorCode::Shape,
            format!("ground-truth buffer length {} is not a multiple of 4", buf.gt_boxes.len()),
        ));
    }
    let gts = buf
        .gt_boxes
        .chunks_exact(GT_STRIDE)
        .enumerate()
        .map(|(i, c)| {
            BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| err(FlatErrorCode::InvalidBox, format!("gt {i}: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let m = gts.len();
    let dets = buf
        .detections
        .chunks_exact(DET_STRIDE)
        .enumerate()
        .map(|(i, r)| {
            let b = BBox::new(r[0], r[1], r[2], r[3])
                .map_err(|e| err(FlatErrorCode::InvalidBox, format!("detection {i}: {e}")))?;
            let g = r[5];
            let gt = if g == -1.0 {
                None
            } else if g.fract() == 0.0 && g >= 0.0 && g < m as f64 {
                Some(g as usize)
            } else {
                return Err(err(FlatErrorCode::GtIndex, format!("detection {i}: gt index {g} outside [-1, {m})")));
            };
            Detection::new(b, r[4], gt).map_err(|e| err(FlatErrorCode::InvalidScore, format!("detection {i}: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((dets, gts))
}

pub fn encode(detections: &[Detection], gt_boxes: &[BBox]) -> (Vec<f64>, Vec<f64>) {
    let dets = detections
        .iter()
        .flat_map(|d| {
            let [x1, y1, x2, y2] = d.bbox.to_array();
            [x1, y1, x2, y2, d.score(), d.gt.map_or(-1.0, |g| g as f64)]
        })
        .collect();
    let gts = gt_boxes.iter().flat_map(|b| b.to_array()).collect();
    (dets, gts)
}

/// NMS loss forward/backward on flat buffers. Stateless and re-entrant.
pub fn nms_loss_flat(buf: &FlatSceneBuffer) -> Result<FlatLossOutput, FlatError> {
    let cfg = LossConfig {
        nt: buf.nt,
        lambda_pull: buf.lambda_pull,
        lambda_push: buf.lambda_push,
        iou_clamp_eps: buf.iou_clamp_eps,
        reduction: buf.reduction,
    };
    cfg.validate().map_err(|e| err(FlatErrorCode::InvalidConfig, e.to_string()))?;
    let (dets, gts) = decode(buf)?;
    let r = nms_loss_forward_backward(&dets, &gts, &cfg).map_err(|e| err(FlatErrorCode::GtIndex, e.to_string()))?;
    Ok(FlatLossOutput {
        l_pull: r.l_pull,
        l_push: r.l_push,
        l_nms: r.l_nms,
        kept: r.kept.iter().map(|&k| k as i64).collect(),
        coord_grads: r.coord_grads.iter().flatten().copied().collect(),
        score_grads: r.score_grads,
    })
}
