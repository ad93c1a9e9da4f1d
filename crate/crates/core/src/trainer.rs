//! Toy end-to-end optimisation: every detection's corners and score logit
//! are free parameters, updated by plain gradient descent on a SmoothL1
//! regression term plus the NMS loss.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nms_loss::{nms_loss_forward_backward, Detection, LossConfig};
use crate::par::{self, Execution};
use crate::scenegen::Scene;

const MIN_SIZE: f64 = 1.0;
const LOGIT_LIMIT: f64 = 30.0;
/// Per-step logit decay of unassigned detections, as a fraction of `lr`.
const BACKGROUND_DECAY: f64 = 0.01;
/// SmoothL1 transition point, in pixels.
const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub iters: usize,
    pub lambda_reg: f64,
    #[serde(rename = "loss")]
    pub loss_cfg: LossConfig,
    pub enable_pull: bool,
    pub enable_push: bool,
    /// Recorded with the run; descent itself draws no random numbers.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            iters: 200,
            lambda_reg: 1.0,
            loss_cfg: LossConfig::default(),
            enable_pull: true,
            enable_push: true,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!("lr {} must be positive", self.lr)));
        }
        if self.iters == 0 {
            return Err(Error::Validation("iters must be at least 1".into()));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::Validation(format!("lambda_reg {} must be non-negative", self.lambda_reg)));
        }
        self.loss_cfg.validate()
    }

    /// Loss config with the weights of disabled terms zeroed.
    pub fn gated_loss_cfg(&self) -> LossConfig {
        LossConfig {
            lambda_pull: if self.enable_pull { self.loss_cfg.lambda_pull } else { 0.0 },
            lambda_push: if self.enable_push { self.loss_cfg.lambda_push } else { 0.0 },
            ..self.loss_cfg
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub iter: usize,
    pub l_reg: f64,
    /// Unweighted pull term, reported even when pull is disabled.
    pub l_pull: f64,
    /// Unweighted push term, reported even when push is disabled.
    pub l_push: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub coords: Vec<[f64; 4]>,
    pub logits: Vec<f64>,
    pub iter: usize,
    /// One record per step, evaluated before the update, plus the final one.
    pub history: Vec<LossRecord>,
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn logit(s: f64) -> f64 {
    (s / (1.0 - s)).ln().clamp(-LOGIT_LIMIT, LOGIT_LIMIT)
}

impl TrainState {
    pub fn from_scene(scene: &Scene) -> Self {
        Self {
            coords: scene.detections.iter().map(|d| d.bbox.to_array()).collect(),
            logits: scene.detections.iter().map(|d| logit(d.score())).collect(),
            iter: 0,
            history: Vec::new(),
        }
    }

    /// Current parameters as detections, keeping the frozen assignments.
    pub fn detections(&self, template: &[Detection]) -> Result<Vec<Detection>> {
        self.coords
            .iter()
            .zip(&self.logits)
            .zip(template)
            .map(|((c, &z), d)| Detection::new(BBox::from_array(*c)?, logistic(z), d.gt))
            .collect()
    }

    /// `iter,l_reg,l_pull,l_push,l_total` rows.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("iter,l_reg,l_pull,l_push,l_total\n");
        for r in &self.history {
            let _ = writeln!(out, "{},{},{},{},{}", r.iter, r.l_reg, r.l_pull, r.l_push, r.l_total);
        }
        out
    }
}

/// Loss terms and gradients at one parameter point.
#[derive(Debug, Clone)]
pub struct Objective {
    pub l_reg: f64,
    pub l_pull: f64,
    pub l_push: f64,
    pub l_total: f64,
    pub coord_grads: Vec<[f64; 4]>,
    /// Gradient with respect to each detection's score (not its logit).
    pub score_grads: Vec<f64>,
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < SMOOTH_L1_BETA {
        (0.5 * d * d / SMOOTH_L1_BETA, d / SMOOTH_L1_BETA)
    } else {
        (d.abs() - 0.5 * SMOOTH_L1_BETA, d.signum())
    }
}

/// Regression plus gated NMS loss. Regression is SmoothL1 summed over the
/// four corners and averaged over assigned detections.
pub fn objective(detections: &[Detection], gt_boxes: &[BBox], cfg: &TrainConfig) -> Result<Objective> {
    let nms = nms_loss_forward_backward(detections, gt_boxes, &cfg.gated_loss_cfg())?;
    let mut coord_grads = nms.coord_grads;

    let n_assigned = detections.iter().filter(|d| d.gt.is_some()).count();
    let mut l_reg = 0.0;
    if n_assigned > 0 {
        let w = 1.0 / n_assigned as f64;
        for (d, grad) in detections.iter().zip(coord_grads.iter_mut()) {
            let Some(g) = d.gt else { continue };
            let target = gt_boxes[g].to_array();
            for ((c, t), gk) in d.bbox.to_array().iter().zip(target).zip(grad.iter_mut()) {
                let (v, dv) = smooth_l1(c - t);
                l_reg += w * v;
                *gk += cfg.lambda_reg * w * dv;
            }
        }
    }

    Ok(Objective {
        l_reg,
        l_pull: nms.l_pull,
        l_push: nms.l_push,
        l_total: cfg.lambda_reg * l_reg + nms.l_nms,
        coord_grads,
        score_grads: nms.score_grads,
    })
}

fn record(iter: usize, o: &Objective) -> LossRecord {
    LossRecord { iter, l_reg: o.l_reg, l_pull: o.l_pull, l_push: o.l_push, l_total: o.l_total }
}

/// One descent step in place. Returns the objective evaluated before it.
pub fn step(state: &mut TrainState, template: &[Detection], gt_boxes: &[BBox], cfg: &TrainConfig) -> Result<Objective> {
    let dets = state.detections(template)?;
    let obj = objective(&dets, gt_boxes, cfg)?;
    for (i, d) in dets.iter().enumerate() {
        let c = &mut state.coords[i];
        for (ck, gk) in c.iter_mut().zip(obj.coord_grads[i]) {
            *ck -= cfg.lr * gk;
        }
        if c[2] - c[0] < MIN_SIZE {
            let mid = 0.5 * (c[0] + c[2]);
            c[0] = mid - 0.5 * MIN_SIZE;
            c[2] = mid + 0.5 * MIN_SIZE;
        }
        if c[3] - c[1] < MIN_SIZE {
            let mid = 0.5 * (c[1] + c[3]);
            c[1] = mid - 0.5 * MIN_SIZE;
            c[3] = mid + 0.5 * MIN_SIZE;
        }

        let s = d.score();
        let mut dz = obj.score_grads[i] * s * (1.0 - s);
        if d.gt.is_none() {
            dz += BACKGROUND_DECAY;
        }
        state.logits[i] = (state.logits[i] - cfg.lr * dz).clamp(-LOGIT_LIMIT, LOGIT_LIMIT);
    }
    state.iter += 1;
    Ok(obj)
}

/// Trains one scene and returns the final state plus the scene rewritten
/// with the optimised detections.
pub fn train_scene(scene: &Scene, cfg: &TrainConfig) -> Result<(TrainState, Scene)> {
    cfg.validate()?;
    if !scene.detections.iter().any(|d| d.gt.is_some()) {
        return Err(Error::Training(format!("scene {} has no assigned detections", scene.id)));
    }
    let gt_boxes = scene.gt_boxes();
    let mut state = TrainState::from_scene(scene);
    for t in 0..cfg.iters {
        let obj = step(&mut state, &scene.detections, &gt_boxes, cfg)?;
        check_finite(&scene.id, t, &obj)?;
        state.history.push(record(t, &obj));
    }
    let dets = state.detections(&scene.detections)?;
    let last = objective(&dets, &gt_boxes, cfg)?;
    check_finite(&scene.id, cfg.iters, &last)?;
    state.history.push(record(cfg.iters, &last));
    log::debug!(
        "{}: l_total {:.6} -> {:.6} over {} iters",
        scene.id,
        state.history[0].l_total,
        last.l_total,
        cfg.iters
    );

    let trained = Scene { detections: dets, ..scene.clone() };
    Ok((state, trained))
}

fn check_finite(id: &str, iter: usize, o: &Objective) -> Result<()> {
    if o.l_total.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("{id}: non-finite loss at iteration {iter}")))
    }
}

/// Trains scenes independently; results come back in input order.
pub fn train_suite(scenes: &[Scene], cfg: &TrainConfig, exec: Execution) -> Result<Vec<(TrainState, Scene)>> {
    par::try_map(scenes, exec, |s| train_scene(s, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, GtBox, SceneSpec};

    fn scene(gts: &[[f64; 4]], dets: &[([f64; 4], f64, Option<usize>)]) -> Scene {
        Scene {
            id: "fixture".into(),
            image_w: 200.0,
            image_h: 200.0,
            gt: gts.iter().map(|c| GtBox::new(BBox::from_array(*c).unwrap(), 1.0, false).unwrap()).collect(),
            detections: dets
                .iter()
                .map(|(c, s, g)| Detection::new(BBox::from_array(*c).unwrap(), *s, *g).unwrap())
                .collect(),
        }
    }

    #[test]
    fn regression_baseline_reduces_corner_error() {
        let spec = SceneSpec { crowd_iou: 0.0, n_background: 0, ..SceneSpec::default() };
        let s = generate_scene(&spec).unwrap();
        let cfg = TrainConfig { enable_pull: false, enable_push: false, lr: 0.5, iters: 200, ..Default::default() };
        let err = |sc: &Scene| -> f64 {
            let gts = sc.gt_boxes();
            let mut total = 0.0;
            let mut n = 0.0;
            for d in sc.detections.iter() {
                if let Some(g) = d.gt {
                    for (a, b) in d.bbox.to_array().iter().zip(gts[g].to_array()) {
                        total += (a - b).abs();
                        n += 1.0;
                    }
                }
            }
            total / n
        };
        let (state, trained) = train_scene(&s, &cfg).unwrap();
        assert!(err(&trained) < err(&s));
        assert_eq!(state.history.len(), 201);
        assert!(state.history.iter().all(|r| r.l_total.is_finite()));
    }

    #[test]
    fn disabled_losses_leave_only_regression_gradient() {
        let s = scene(
            &[[0.0, 0.0, 20.0, 40.0]],
            &[([0.0, 0.0, 20.0, 40.0], 0.9, Some(0)), ([6.0, 4.0, 26.0, 44.0], 0.8, Some(0))],
        );
        let cfg = TrainConfig { enable_pull: false, enable_push: false, lambda_reg: 0.0, ..Default::default() };
        let o = objective(&s.detections, &s.gt_boxes(), &cfg).unwrap();
        assert!(o.l_pull > 0.0, "the pull event still exists");
        assert!(o.coord_grads.iter().flatten().all(|&g| g == 0.0));
        assert!(o.score_grads.iter().all(|&g| g == 0.0));
        assert_eq!(o.l_total, 0.0);
    }

    #[test]
    fn pull_only_keeps_b_max_fixed() {
        let s = scene(
            &[[0.0, 0.0, 20.0, 40.0]],
            &[([0.0, 0.0, 20.0, 40.0], 0.9, Some(0)), ([10.0, 8.0, 30.0, 48.0], 0.8, Some(0))],
        );
        let cfg = TrainConfig { enable_push: false, lambda_reg: 0.0, lr: 200.0, iters: 100, ..Default::default() };
        let init = TrainState::from_scene(&s);
        let (state, _) = train_scene(&s, &cfg).unwrap();
        assert_eq!(state.coords[0], init.coords[0]);
        assert_eq!(state.logits[0], init.logits[0]);
        assert_ne!(state.coords[1], init.coords[1]);
    }

    #[test]
    fn background_scores_decay() {
        let s = scene(
            &[[0.0, 0.0, 20.0, 40.0]],
            &[([0.0, 0.0, 20.0, 40.0], 0.9, Some(0)), ([100.0, 100.0, 120.0, 140.0], 0.8, None)],
        );
        let cfg = TrainConfig { iters: 10, ..Default::default() };
        let (_, trained) = train_scene(&s, &cfg).unwrap();
        assert!(trained.detections[1].score() < 0.8);
        assert_eq!(trained.detections[1].bbox, s.detections[1].bbox);
    }

    #[test]
    fn errors_without_assigned_detections() {
        let s = scene(&[[0.0, 0.0, 20.0, 40.0]], &[([100.0, 100.0, 120.0, 140.0], 0.8, None)]);
        assert!(matches!(train_scene(&s, &TrainConfig::default()), Err(Error::Training(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { iters: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn history_csv_header() {
        let s = scene(&[[0.0, 0.0, 20.0, 40.0]], &[([1.0, 0.0, 21.0, 40.0], 0.9, Some(0))]);
        let (state, _) = train_scene(&s, &TrainConfig { iters: 2, ..Default::default() }).unwrap();
        let csv = state.history_csv();
        assert!(csv.starts_with("iter,l_reg,l_pull,l_push,l_total\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
