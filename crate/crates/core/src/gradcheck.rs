//! Finite-difference gradient oracle and the two gradient suites built on
//! it (box IoU, and the NMS loss with its event set frozen).
//!
//! The NMS-loss oracle re-evaluates the loss straight from the event list:
//! the live member of each pair is perturbed, the stop-gradient member keeps
//! its original box, and push scores stay at their original values. A probe
//! point is only used when the events are identical at `x - h` and `x + h`
//! and no competing min/max edge is closer than `tie_margin`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, iou_grad, BBox};
use crate::nms_loss::{nms_loss_forward_backward, Detection, LossConfig, NmsLossResult, Reduction};
use crate::par::{self, Execution};
use crate::scenegen::{derive_seed, generate_scene, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FdScheme {
    #[default]
    Central,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FDConfig {
    pub h: f64,
    pub scheme: FdScheme,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub tie_margin: f64,
}

impl Default for FDConfig {
    fn default() -> Self {
        Self { h: 1e-6, scheme: FdScheme::Central, rel_tol: 1e-5, abs_tol: 1e-8, tie_margin: 1e-3 }
    }
}

impl FDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.rel_tol > 0.0 && self.abs_tol > 0.0 && self.tie_margin >= 0.0) {
            return Err(Error::Validation("finite-difference step and tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], cfg: &FDConfig) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + cfg.h;
        let up = f(&probe);
        probe[i] = x[i] - cfg.h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Gradcheck(format!("non-finite evaluation while probing coordinate {i}")));
        }
        out.push((up - down) / (2.0 * cfg.h));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradComparison {
    pub passed: bool,
    pub worst_index: Option<usize>,
    pub worst_abs_err: f64,
    /// `|a - n| / (abs_tol + rel_tol * max(|a|, |n|))`; at most 1 on a pass.
    pub worst_ratio: f64,
}

/// Passes iff every coordinate has `|a - n| <= abs_tol + rel_tol * max(|a|, |n|)`.
pub fn check_grads(analytic: &[f64], numeric: &[f64], cfg: &FDConfig) -> Result<GradComparison> {
    if analytic.len() != numeric.len() {
        return Err(Error::Validation(format!(
            "gradient lengths differ: {} analytic vs {} numeric",
            analytic.len(),
            numeric.len()
        )));
    }
    let mut cmp = GradComparison { passed: true, worst_index: None, worst_abs_err: 0.0, worst_ratio: 0.0 };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs();
        let allowed = cfg.abs_tol + cfg.rel_tol * a.abs().max(n.abs());
        let ratio = err / allowed;
        if err.is_nan() || err > allowed {
            cmp.passed = false;
        }
        if cmp.worst_index.is_none() || ratio.is_nan() || ratio > cmp.worst_ratio {
            cmp.worst_index = Some(i);
            cmp.worst_ratio = ratio;
            cmp.worst_abs_err = err;
        }
    }
    Ok(cmp)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub checked: usize,
    pub passed: usize,
    /// Probe points discarded for ties or unstable event sets.
    pub rejected: usize,
    pub worst_ratio: f64,
    /// Violations of exact-zero requirements (stop-gradient, push scores).
    pub zero_violations: usize,
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.checked > 0 && self.passed == self.checked && self.zero_violations == 0
    }

    pub fn rejection_rate(&self) -> f64 {
        let total = self.checked + self.rejected;
        if total == 0 {
            0.0
        } else {
            self.rejected as f64 / total as f64
        }
    }

    fn absorb(&mut self, other: SuiteReport) {
        self.checked += other.checked;
        self.passed += other.passed;
        self.rejected += other.rejected;
        self.zero_violations += other.zero_violations;
        self.worst_ratio = self.worst_ratio.max(other.worst_ratio);
        for f in other.failures {
            if self.failures.len() < 20 {
                self.failures.push(f);
            }
        }
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: {}/{} passed, {} rejected ({:.2}%), worst error ratio {:.3e}, {} exact-zero violations -> {}",
            self.name,
            self.passed,
            self.checked,
            self.rejected,
            100.0 * self.rejection_rate(),
            self.worst_ratio,
            self.zero_violations,
            if self.all_passed() { "PASS" } else { "FAIL" }
        )?;
        for line in &self.failures {
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

/// Whether every min/max pair of the intersection of `a` and `b` is
/// separated by more than `margin`, and the overlap is not near empty.
pub fn tie_free(a: &BBox, b: &BBox, margin: f64) -> bool {
    let iw = a.x2().min(b.x2()) - a.x1().max(b.x1());
    let ih = a.y2().min(b.y2()) - a.y1().max(b.y1());
    let separated = (a.x1() - b.x1()).abs() > margin
        && (a.x2() - b.x2()).abs() > margin
        && (a.y1() - b.y1()).abs() > margin
        && (a.y2() - b.y2()).abs() > margin;
    // either clearly overlapping or clearly apart
    let away_from_touching = (iw.abs() > margin) && (ih.abs() > margin);
    separated && away_from_touching
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0.0..10.0);
    let y = rng.random_range(0.0..10.0);
    let w = rng.random_range(0.5..6.0);
    let h = rng.random_range(0.5..6.0);
    BBox::new(x, y, x + w, y + h).expect("positive size")
}

/// Draws random overlapping, tie-free box pairs. Returns the pairs and the
/// number of rejected draws.
pub fn random_overlapping_pairs(n: usize, seed: u64, margin: f64) -> (Vec<(BBox, BBox)>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    let mut rejected = 0;
    while pairs.len() < n {
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        if iou(&a, &b) > 0.0 && tie_free(&a, &b, margin) {
            pairs.push((a, b));
        } else {
            rejected += 1;
        }
    }
    (pairs, rejected)
}

/// Analytic IoU partials against central differences on random tie-free
/// overlapping pairs.
pub fn geometry_suite(n_pairs: usize, seed: u64, cfg: &FDConfig) -> SuiteReport {
    let (pairs, rejected) = random_overlapping_pairs(n_pairs, seed, cfg.tie_margin);
    let mut report = SuiteReport { name: "geometry".into(), rejected, ..Default::default() };
    for (k, (a, b)) in pairs.iter().enumerate() {
        let g = iou_grad(a, b);
        let analytic: Vec<f64> = g.d_a.iter().chain(&g.d_b).copied().collect();
        let x: Vec<f64> = a.to_array().iter().chain(&b.to_array()).copied().collect();
        let f = |p: &[f64]| match (BBox::new(p[0], p[1], p[2], p[3]), BBox::new(p[4], p[5], p[6], p[7])) {
            (Ok(a), Ok(b)) => iou(&a, &b),
            _ => f64::NAN,
        };
        report.checked += 1;
        match fd_gradient(f, &x, cfg).and_then(|n| check_grads(&analytic, &n, cfg)) {
            Ok(c) => {
                report.worst_ratio = report.worst_ratio.max(c.worst_ratio);
                if c.passed {
                    report.passed += 1;
                } else if report.failures.len() < 20 {
                    report
                        .failures
                        .push(format!("pair {k}: coordinate {:?} off by {:.3e}", c.worst_index, c.worst_abs_err));
                }
            }
            Err(e) => report.failures.push(format!("pair {k}: {e}")),
        }
    }
    report
}

/// Pair structure of a sweep, used to decide whether events are stable.
type EventKey = (Vec<usize>, Vec<(usize, usize)>, Vec<(usize, usize)>);

fn event_key(r: &NmsLossResult) -> EventKey {
    (
        r.kept.clone(),
        r.pull_events.iter().map(|e| (e.fp_index, e.max_index)).collect(),
        r.push_events.iter().map(|e| (e.fn_index, e.suppressor_index)).collect(),
    )
}

/// Reduced NMS loss recomputed from a frozen event list, with detection
/// `live` replaced by `(live_box, live_score)` only where it is the
/// gradient-receiving member of a pair.
pub fn frozen_event_loss(
    base: &[Detection],
    events: &NmsLossResult,
    cfg: &LossConfig,
    live: usize,
    live_box: &BBox,
    live_score: f64,
) -> f64 {
    let mut pull = 0.0;
    for e in &events.pull_events {
        let (b, s) = if e.fp_index == live {
            (*live_box, live_score)
        } else {
            (base[e.fp_index].bbox, base[e.fp_index].score())
        };
        let v = iou(&base[e.max_index].bbox, &b);
        if v < cfg.nt {
            pull += -(1.0 - cfg.nt + v).ln() * s;
        }
    }
    let mut push = 0.0;
    for e in &events.push_events {
        let b = if e.fn_index == live { *live_box } else { base[e.fn_index].bbox };
        let v = iou(&base[e.suppressor_index].bbox, &b).min(1.0 - cfg.iou_clamp_eps);
        push += -(1.0 - v).ln() * base[e.fn_index].score();
    }
    let (np, nq) = (events.pull_events.len() as f64, events.push_events.len() as f64);
    if cfg.reduction == Reduction::Mean {
        if np > 0.0 {
            pull /= np;
        }
        if nq > 0.0 {
            push /= nq;
        }
    }
    cfg.lambda_pull * pull + cfg.lambda_push * push
}

/// Checks one scene's analytic NMS-loss gradients against the frozen-event
/// oracle, plus the exact-zero requirements.
pub fn check_scene_gradients(
    dets: &[Detection],
    gt_boxes: &[BBox],
    cfg: &LossConfig,
    fd: &FDConfig,
    label: &str,
) -> Result<SuiteReport> {
    let base = nms_loss_forward_backward(dets, gt_boxes, cfg)?;
    let key = event_key(&base);
    let mut report = SuiteReport { name: label.to_string(), ..Default::default() };

    let mut live_partner: Vec<Vec<usize>> = vec![Vec::new(); dets.len()];
    for e in &base.pull_events {
        live_partner[e.fp_index].push(e.max_index);
    }
    for e in &base.push_events {
        live_partner[e.fn_index].push(e.suppressor_index);
    }
    let pull_live: Vec<bool> = (0..dets.len()).map(|j| base.pull_events.iter().any(|e| e.fp_index == j)).collect();

    for (j, partners) in live_partner.iter().enumerate() {
        if partners.is_empty() {
            // stop-gradient side or uninvolved
            if base.coord_grads[j] != [0.0; 4] || base.score_grads[j] != 0.0 {
                report.zero_violations += 1;
                report.failures.push(format!("{label}: detection {j} has no live role but non-zero gradient"));
            }
            continue;
        }
        if !pull_live[j] && base.score_grads[j] != 0.0 {
            report.zero_violations += 1;
            report.failures.push(format!("{label}: push-only detection {j} has score gradient"));
        }
        if !partners.iter().all(|&p| tie_free(&dets[p].bbox, &dets[j].bbox, fd.tie_margin)) {
            report.rejected += 5;
            continue;
        }

        let x0: Vec<f64> = dets[j].bbox.to_array().into_iter().chain([dets[j].score()]).collect();
        let analytic: Vec<f64> = base.coord_grads[j].into_iter().chain([base.score_grads[j]]).collect();
        for k in 0..5 {
            // event set must not flip inside the probe interval
            let stable = [-fd.h, fd.h].iter().all(|&d| {
                let mut p = x0.clone();
                p[k] += d;
                let Ok(b) = BBox::new(p[0], p[1], p[2], p[3]) else { return false };
                let Ok(dj) = Detection::new(b, p[4], dets[j].gt) else { return false };
                let mut moved = dets.to_vec();
                moved[j] = dj;
                nms_loss_forward_backward(&moved, gt_boxes, cfg).is_ok_and(|r| event_key(&r) == key)
            });
            if !stable {
                report.rejected += 1;
                continue;
            }
            let f = |p: &[f64]| match BBox::new(p[0], p[1], p[2], p[3]) {
                Ok(b) => frozen_event_loss(dets, &base, cfg, j, &b, p[4]),
                Err(_) => f64::NAN,
            };
            let numeric = fd_gradient(f, &x0, fd)?;
            let c = check_grads(&analytic[k..=k], &numeric[k..=k], fd)?;
            report.checked += 1;
            report.worst_ratio = report.worst_ratio.max(c.worst_ratio);
            if c.passed {
                report.passed += 1;
            } else if report.failures.len() < 20 {
                report.failures.push(format!(
                    "{label}: detection {j} param {k}: analytic {:.6e} vs numeric {:.6e}",
                    analytic[k], numeric[k]
                ));
            }
        }
    }
    Ok(report)
}

/// Scene spec of the `k`-th gradient-suite scene: varied crowding, noise and
/// density so pull and push events both occur.
pub fn gradient_scene_spec(seed: u64, k: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k));
    SceneSpec {
        seed: derive_seed(seed ^ 0x5eed, k),
        n_gt: rng.random_range(2..=8),
        crowd_iou: rng.random_range(0.2..0.6),
        preds_per_gt: rng.random_range(2..=5),
        coord_noise_sigma: rng.random_range(3.0..10.0),
        n_background: rng.random_range(0..=2),
        ..SceneSpec::default()
    }
}

/// NMS-loss gradients on `n_scenes` generated scenes.
pub fn nms_loss_suite(
    n_scenes: usize,
    seed: u64,
    loss: &LossConfig,
    fd: &FDConfig,
    exec: Execution,
) -> Result<SuiteReport> {
    let ks: Vec<u64> = (0..n_scenes as u64).collect();
    let reports = par::try_map(&ks, exec, |&k| {
        let scene = generate_scene(&gradient_scene_spec(seed, k))?;
        check_scene_gradients(&scene.detections, &scene.gt_boxes(), loss, fd, &format!("scene {k}"))
    })?;
    let mut total = SuiteReport { name: "nms_loss".into(), ..Default::default() };
    for r in reports {
        total.absorb(r);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub geometry: SuiteReport,
    pub nms_loss: SuiteReport,
    pub passed: bool,
}

/// Both suites at the standard sizes (1000 box pairs, 200 scenes).
pub fn run_gradcheck(seed: u64, loss: &LossConfig, fd: &FDConfig, exec: Execution) -> Result<GradcheckSummary> {
    fd.validate()?;
    loss.validate()?;
    let geometry = geometry_suite(1000, seed, fd);
    let nms_loss = nms_loss_suite(200, seed, loss, fd, exec)?;
    let passed = geometry.all_passed() && nms_loss.all_passed();
    Ok(GradcheckSummary { geometry, nms_loss, passed })
}
