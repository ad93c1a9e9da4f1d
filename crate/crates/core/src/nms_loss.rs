//! NMS sweep with in-loop pull/push losses and their analytic gradients.
//!
//! The sweep is greedy NMS in descending score order. Two kinds of error are
//! recorded while it runs:
//!
//! * a *pull* event when the box being kept is not the first kept box of its
//!   ground truth (a duplicate NMS failed to remove). The loss
//!   `-ln(1 - nt + iou(b_max, b_m)) * s_m` draws the duplicate toward the
//!   ground truth's first kept box and lowers its score.
//! * a *push* event when a kept box removes a box assigned to a different
//!   ground truth, and the two boxes overlap more than their ground truths
//!   do. The loss `-ln(1 - iou(b_i, b_m)) * s_i` drives the removed box away;
//!   its score is a constant weight.
//!
//! Gradients only reach the lower-scoring member of each pair. Which events
//! fire is a constant of the forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::geometry::{iou, iou_grad, BBox};
use crate::nms::{score_order, validate_threshold};

/// A predicted box with its confidence and optional ground-truth assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    score: f64,
    pub gt: Option<usize>,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64, gt: Option<usize>) -> Result<Self> {
        if !(score > 0.0 && score <= 1.0) {
            return Err(validation(format!("detection score {score} outside (0, 1]")));
        }
        Ok(Self { bbox, score, gt })
    }

    #[inline]
    pub fn score(&self) -> f64 {
        self.score
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    /// Mean over events within a scene, separately for pull and push.
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub nt: f64,
    pub lambda_pull: f64,
    pub lambda_push: f64,
    pub iou_clamp_eps: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { nt: 0.5, lambda_pull: 0.1, lambda_push: 0.1, iou_clamp_eps: 1e-6, reduction: Reduction::Mean }
    }
}

impl LossConfig {
    /// Weights for heavily overlapped crowds: push is down-weighted to 0.001.
    pub fn crowded() -> Self {
        Self { lambda_push: 0.001, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        validate_threshold(self.nt)?;
        for (name, v) in [("lambda_pull", self.lambda_pull), ("lambda_push", self.lambda_push)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(validation(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if !(self.iou_clamp_eps > 0.0 && self.iou_clamp_eps <= 1e-3) {
            return Err(validation(format!("iou_clamp_eps = {} must lie in (0, 1e-3]", self.iou_clamp_eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PullEvent {
    pub fp_index: usize,
    pub max_index: usize,
    pub gt: usize,
    pub iou: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PushEvent {
    pub fn_index: usize,
    pub suppressor_index: usize,
    pub iou: f64,
    pub gt_pair_iou: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NmsLossResult {
    pub kept: Vec<usize>,
    pub pull_events: Vec<PullEvent>,
    pub push_events: Vec<PushEvent>,
    pub l_pull: f64,
    pub l_push: f64,
    pub l_nms: f64,
    pub coord_grads: Vec<[f64; 4]>,
    pub score_grads: Vec<f64>,
}

/// Pull loss for one duplicate; zero once the pair overlaps by `nt` or more.
pub fn pull_loss(iou_max_m: f64, s_m: f64, nt: f64) -> f64 {
    if iou_max_m >= nt {
        return 0.0;
    }
    -(1.0 - nt + iou_max_m).ln() * s_m
}

/// `(dL/d iou, dL/d s_m)` of [`pull_loss`].
pub fn pull_loss_grad(iou_max_m: f64, s_m: f64, nt: f64) -> (f64, f64) {
    if iou_max_m >= nt {
        return (0.0, 0.0);
    }
    let arg = 1.0 - nt + iou_max_m;
    (-s_m / arg, -arg.ln())
}

/// Push loss for one wrongly removed box. The IoU is capped at `1 - eps`.
pub fn push_loss(iou_i_m: f64, s_i: f64, eps: f64) -> f64 {
    -(1.0 - iou_i_m.min(1.0 - eps)).ln() * s_i
}

/// `dL/d iou` of [`push_loss`]; zero in the capped region. The score is a
/// weight only and has no gradient.
pub fn push_loss_grad(iou_i_m: f64, s_i: f64, eps: f64) -> f64 {
    if iou_i_m >= 1.0 - eps {
        return 0.0;
    }
    s_i / (1.0 - iou_i_m)
}

/// Raw outcome of one NMS sweep: selection order plus the pairs that fired.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct Sweep {
    pub kept: Vec<usize>,
    /// `(fp_index, max_index, gt, iou)`
    pub pulls: Vec<(usize, usize, usize, f64)>,
    /// `(fn_index, suppressor_index, iou, gt_pair_iou)`, grouped by suppressor
    /// in selection order, then by `fn_index`.
    pub pushes: Vec<(usize, usize, f64, f64)>,
}

pub(crate) fn validate_inputs(detections: &[Detection], gt_boxes: &[BBox]) -> Result<()> {
    for (i, d) in detections.iter().enumerate() {
        if let Some(g) = d.gt {
            if g >= gt_boxes.len() {
                return Err(validation(format!(
                    "detection {i} references ground truth {g}, but only {} exist",
                    gt_boxes.len()
                )));
            }
        }
    }
    Ok(())
}

pub(crate) fn sweep(detections: &[Detection], gt_boxes: &[BBox], nt: f64) -> Sweep {
    let scores: Vec<f64> = detections.iter().map(|d| d.score).collect();
    let order = score_order(&scores);
    let mut alive = vec![true; order.len()];
    // first kept detection per ground truth; written once
    let mut first_kept: Vec<Option<usize>> = vec![None; gt_boxes.len()];
    let mut out = Sweep::default();

    for pos in 0..order.len() {
        if !alive[pos] {
            continue;
        }
        let m = order[pos];
        let dm = &detections[m];
        if let Some(g) = dm.gt {
            match first_kept[g] {
                None => first_kept[g] = Some(m),
                Some(max_index) => {
                    let v = iou(&detections[max_index].bbox, &dm.bbox);
                    out.pulls.push((m, max_index, g, v));
                }
            }
        }
        out.kept.push(m);

        // pushes for one suppressor are emitted in input order
        let first_push = out.pushes.len();
        for later in pos + 1..order.len() {
            if !alive[later] {
                continue;
            }
            let i = order[later];
            let di = &detections[i];
            let v = iou(&dm.bbox, &di.bbox);
            if v < nt {
                continue;
            }
            alive[later] = false;
            if let (Some(gm), Some(gi)) = (dm.gt, di.gt) {
                if gm != gi {
                    let gt_pair = iou(&gt_boxes[gi], &gt_boxes[gm]);
                    if v > gt_pair {
                        out.pushes.push((i, m, v, gt_pair));
                    }
                }
            }
        }
        out.pushes[first_push..].sort_by_key(|p| p.0);
    }
    out
}

/// Runs the NMS sweep, computes the pull/push losses and accumulates their
/// gradients per detection.
pub fn nms_loss_forward_backward(
    detections: &[Detection],
    gt_boxes: &[BBox],
    cfg: &LossConfig,
) -> Result<NmsLossResult> {
    cfg.validate()?;
    validate_inputs(detections, gt_boxes)?;
    let sw = sweep(detections, gt_boxes, cfg.nt);
    Ok(losses_from_sweep(detections, sw, cfg))
}

fn losses_from_sweep(detections: &[Detection], sw: Sweep, cfg: &LossConfig) -> NmsLossResult {
    let n = detections.len();
    let mut coord_grads = vec![[0.0; 4]; n];
    let mut score_grads = vec![0.0; n];

    let pull_w = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean if sw.pulls.is_empty() => 0.0,
        Reduction::Mean => 1.0 / sw.pulls.len() as f64,
    };
    let push_w = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean if sw.pushes.is_empty() => 0.0,
        Reduction::Mean => 1.0 / sw.pushes.len() as f64,
    };

    let mut pull_events = Vec::with_capacity(sw.pulls.len());
    let mut pull_sum = 0.0;
    for &(fp_index, max_index, gt, v) in &sw.pulls {
        let s_m = detections[fp_index].score;
        let loss = pull_loss(v, s_m, cfg.nt);
        pull_sum += loss;
        pull_events.push(PullEvent { fp_index, max_index, gt, iou: v, loss });

        let coeff = cfg.lambda_pull * pull_w;
        let (d_iou, d_score) = pull_loss_grad(v, s_m, cfg.nt);
        // b_max is the stop-gradient side
        let g = iou_grad(&detections[max_index].bbox, &detections[fp_index].bbox);
        for (acc, d) in coord_grads[fp_index].iter_mut().zip(g.d_b) {
            *acc += coeff * d_iou * d;
        }
        score_grads[fp_index] += coeff * d_score;
    }

    let mut push_events = Vec::with_capacity(sw.pushes.len());
    let mut push_sum = 0.0;
    for &(fn_index, suppressor_index, v, gt_pair_iou) in &sw.pushes {
        let s_i = detections[fn_index].score;
        let loss = push_loss(v, s_i, cfg.iou_clamp_eps);
        push_sum += loss;
        push_events.push(PushEvent { fn_index, suppressor_index, iou: v, gt_pair_iou, loss });

        let coeff = cfg.lambda_push * push_w;
        let d_iou = push_loss_grad(v, s_i, cfg.iou_clamp_eps);
        let g = iou_grad(&detections[suppressor_index].bbox, &detections[fn_index].bbox);
        for (acc, d) in coord_grads[fn_index].iter_mut().zip(g.d_b) {
            *acc += coeff * d_iou * d;
        }
    }

    let l_pull = pull_sum * pull_w;
    let l_push = push_sum * push_w;
    NmsLossResult {
        kept: sw.kept,
        pull_events,
        push_events,
        l_pull,
        l_push,
        l_nms: cfg.lambda_pull * l_pull + cfg.lambda_push * l_push,
        coord_grads,
        score_grads,
    }
}
