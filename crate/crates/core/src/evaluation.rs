//! Pedestrian-detection evaluation: Reasonable-subset filtering, greedy
//! score-ordered matching, and log-average miss rate over FPPI.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::nms::{nms_greedy, NmsInput};
use crate::nms_loss::{sweep, validate_inputs, Detection, LossConfig};
use crate::par::{self, Execution};
use crate::scenegen::{GtBox, Scene};

/// Miss rates are floored here before taking logs.
pub const MISS_RATE_FLOOR: f64 = 1e-10;
/// Relative slack when comparing an achieved FPPI against a reference point.
const FPPI_REL_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub match_iou: f64,
    pub min_height: f64,
    pub min_visibility: f64,
    pub fppi_points: usize,
    pub fppi_range: (f64, f64),
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { match_iou: 0.5, min_height: 50.0, min_visibility: 0.65, fppi_points: 9, fppi_range: (1e-2, 1e0) }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.match_iou > 0.0 && self.match_iou < 1.0) {
            return Err(Error::Validation(format!("match_iou {} must lie in (0, 1)", self.match_iou)));
        }
        if self.fppi_points < 2 {
            return Err(Error::Validation("fppi_points must be at least 2".into()));
        }
        let (lo, hi) = self.fppi_range;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::Validation(format!("fppi_range ({lo}, {hi}) must be positive and increasing")));
        }
        Ok(())
    }

    /// Reference FPPI values, evenly spaced in log10 over `fppi_range`.
    pub fn reference_points(&self) -> Vec<f64> {
        let (lo, hi) = (self.fppi_range.0.log10(), self.fppi_range.1.log10());
        let steps = (self.fppi_points - 1) as f64;
        (0..self.fppi_points).map(|k| 10f64.powf(lo + (hi - lo) * k as f64 / steps)).collect()
    }
}

/// Ground-truth indices split into evaluated and ignored.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GtPartition {
    pub evaluated: Vec<usize>,
    pub ignored: Vec<usize>,
}

pub fn reasonable_filter(gt: &[GtBox], cfg: &EvalConfig) -> GtPartition {
    let mut p = GtPartition::default();
    for (i, g) in gt.iter().enumerate() {
        if !g.ignore && g.height >= cfg.min_height && g.visibility >= cfg.min_visibility {
            p.evaluated.push(i);
        } else {
            p.ignored.push(i);
        }
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchLabel {
    Tp,
    Fp,
    IgnoredMatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub labels: Vec<MatchLabel>,
    /// Indexed like the ground-truth list; ignored ground truth stays false.
    pub gt_matched: Vec<bool>,
}

fn best_candidate<'a>(
    det: &BBox,
    candidates: impl Iterator<Item = &'a usize>,
    gt: &[GtBox],
    min_iou: f64,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &g in candidates {
        let v = iou(det, &gt[g].bbox);
        if v >= min_iou && best.is_none_or(|(_, b)| v > b) {
            best = Some((g, v));
        }
    }
    best.map(|(g, _)| g)
}

/// Greedy matching of score-sorted detections. Each evaluated ground truth
/// absorbs at most one detection; ignored ground truth absorbs any number.
pub fn match_detections(
    dets: &[Detection],
    gt: &[GtBox],
    partition: &GtPartition,
    cfg: &EvalConfig,
) -> Result<Matching> {
    if let Some(w) = dets.windows(2).position(|w| w[0].score() < w[1].score()) {
        return Err(Error::Validation(format!(
            "detections must be sorted by descending score (index {} < index {})",
            w,
            w + 1
        )));
    }
    let mut gt_matched = vec![false; gt.len()];
    let mut labels = Vec::with_capacity(dets.len());
    for d in dets {
        let open = partition.evaluated.iter().filter(|&&g| !gt_matched[g]);
        if let Some(g) = best_candidate(&d.bbox, open, gt, cfg.match_iou) {
            gt_matched[g] = true;
            labels.push(MatchLabel::Tp);
        } else if best_candidate(&d.bbox, partition.ignored.iter(), gt, cfg.match_iou).is_some() {
            labels.push(MatchLabel::IgnoredMatch);
        } else {
            labels.push(MatchLabel::Fp);
        }
    }
    Ok(Matching { labels, gt_matched })
}

/// Matched detections of one image, the input to [`mr_fppi`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMatches {
    pub scores: Vec<f64>,
    pub labels: Vec<MatchLabel>,
    pub n_evaluated_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mr_log_average: f64,
    /// `(reference fppi, miss rate)` samples.
    pub curve: Vec<(f64, f64)>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub nms_fp_count: usize,
    pub nms_fn_count: usize,
}

impl EvalReport {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("fppi,miss_rate\n");
        for (f, m) in &self.curve {
            let _ = writeln!(out, "{f},{m}");
        }
        out
    }
}

/// Log-average miss rate over the reference FPPI points.
///
/// The score threshold sweeps every distinct detection score. For each
/// reference point the operating point with the largest FPPI not above it is
/// used; when none qualifies the largest observed miss rate is used.
/// NMS counts are left at zero; [`evaluate_scenes`] fills them in.
pub fn mr_fppi(scenes: &[SceneMatches], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Evaluation("no scenes to evaluate".into()));
    }
    let total_gt: usize = scenes.iter().map(|s| s.n_evaluated_gt).sum();
    if total_gt == 0 {
        return Err(Error::Evaluation("no evaluated ground truth".into()));
    }
    let n_images = scenes.len() as f64;

    let mut scored: Vec<(f64, MatchLabel)> = scenes
        .iter()
        .flat_map(|s| s.scores.iter().copied().zip(s.labels.iter().copied()))
        .filter(|(_, l)| *l != MatchLabel::IgnoredMatch)
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    // (fppi, miss rate) per distinct threshold, descending threshold
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &(score, label)) in scored.iter().enumerate() {
        match label {
            MatchLabel::Tp => tp += 1,
            MatchLabel::Fp => fp += 1,
            MatchLabel::IgnoredMatch => unreachable!(),
        }
        let last_at_threshold = scored.get(k + 1).is_none_or(|next| next.0 != score);
        if last_at_threshold {
            points.push((fp as f64 / n_images, 1.0 - tp as f64 / total_gt as f64));
        }
    }

    let worst = points.iter().map(|p| p.1).fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |a| a.max(m))));
    let curve: Vec<(f64, f64)> = cfg
        .reference_points()
        .into_iter()
        .map(|r| {
            // fppi is non-decreasing and miss non-increasing along `points`
            let mr =
                points.iter().rev().find(|p| p.0 <= r * (1.0 + FPPI_REL_SLACK)).map(|p| p.1).or(worst).unwrap_or(1.0);
            (r, mr)
        })
        .collect();
    let mean_log = curve.iter().map(|(_, m)| m.max(MISS_RATE_FLOOR).ln()).sum::<f64>() / curve.len() as f64;

    let tp_all = scenes.iter().flat_map(|s| &s.labels).filter(|l| **l == MatchLabel::Tp).count();
    let fp_all = scenes.iter().flat_map(|s| &s.labels).filter(|l| **l == MatchLabel::Fp).count();
    Ok(EvalReport {
        mr_log_average: mean_log.exp(),
        curve,
        tp: tp_all,
        fp: fp_all,
        fn_: total_gt - tp_all,
        nms_fp_count: 0,
        nms_fn_count: 0,
    })
}

/// `(kept duplicates, cross-ground-truth suppressions passing the crowd
/// exception)` of one NMS sweep.
pub fn nms_event_counts(scene: &Scene, cfg: &LossConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    let gt_boxes = scene.gt_boxes();
    validate_inputs(&scene.detections, &gt_boxes)?;
    let sw = sweep(&scene.detections, &gt_boxes, cfg.nt);
    Ok((sw.pulls.len(), sw.pushes.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneEval {
    pub matches: SceneMatches,
    pub nms_fp: usize,
    pub nms_fn: usize,
}

/// NMS at `loss_cfg.nt`, then matching of the kept detections.
pub fn evaluate_scene(scene: &Scene, loss_cfg: &LossConfig, cfg: &EvalConfig) -> Result<SceneEval> {
    let boxes = scene.detections.iter().map(|d| d.bbox).collect();
    let scores = scene.detections.iter().map(|d| d.score()).collect();
    let kept = nms_greedy(&NmsInput::new(boxes, scores, loss_cfg.nt)?);
    // selection order is already descending score with index tie-break
    let dets: Vec<Detection> = kept.iter().map(|&i| scene.detections[i]).collect();
    let partition = reasonable_filter(&scene.gt, cfg);
    let m = match_detections(&dets, &scene.gt, &partition, cfg)?;
    let (nms_fp, nms_fn) = nms_event_counts(scene, loss_cfg)?;
    Ok(SceneEval {
        matches: SceneMatches {
            scores: dets.iter().map(|d| d.score()).collect(),
            labels: m.labels,
            n_evaluated_gt: partition.evaluated.len(),
        },
        nms_fp,
        nms_fn,
    })
}

pub fn evaluate_scenes(
    scenes: &[Scene],
    loss_cfg: &LossConfig,
    cfg: &EvalConfig,
    exec: Execution,
) -> Result<EvalReport> {
    let evals = par::try_map(scenes, exec, |s| evaluate_scene(s, loss_cfg, cfg))?;
    let matches: Vec<SceneMatches> = evals.iter().map(|e| e.matches.clone()).collect();
    let mut report = mr_fppi(&matches, cfg)?;
    report.nms_fp_count = evals.iter().map(|e| e.nms_fp).sum();
    report.nms_fn_count = evals.iter().map(|e| e.nms_fn).sum();
    Ok(report)
}
