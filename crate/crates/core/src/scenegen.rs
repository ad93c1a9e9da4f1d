//! Seeded synthetic crowded scenes.
//!
//! Ground truth is a horizontal chain of pedestrian-shaped boxes standing on
//! a common ground line, each consecutive pair overlapping at the requested
//! IoU. Every ground truth spawns jittered predictions whose scores are
//! ranked by how little they were jittered. Background boxes are placed away
//! from all ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assignment::{assign_one, AssignConfig};
use crate::error::{validation, Error, Result};
use crate::geometry::{iou, BBox};
use crate::nms_loss::Detection;

/// Width / height of a standing pedestrian box.
pub const PERSON_ASPECT: f64 = 0.41;

const PLACEMENT_ATTEMPTS: usize = 64;
const BACKGROUND_ATTEMPTS: usize = 2000;
const VISIBILITY_GRID: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VisibilityModel {
    #[default]
    Full,
    PairwiseOcclusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub image_w: f64,
    pub image_h: f64,
    pub n_gt: usize,
    pub crowd_iou: f64,
    pub preds_per_gt: usize,
    pub coord_noise_sigma: f64,
    pub score_range: (f64, f64),
    pub n_background: usize,
    pub gt_height_range: (f64, f64),
    pub visibility_model: VisibilityModel,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            image_w: 640.0,
            image_h: 480.0,
            n_gt: 6,
            crowd_iou: 0.4,
            preds_per_gt: 4,
            coord_noise_sigma: 6.0,
            score_range: (0.3, 0.95),
            n_background: 2,
            gt_height_range: (60.0, 120.0),
            visibility_model: VisibilityModel::Full,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_gt == 0 {
            return Err(validation("n_gt must be at least 1"));
        }
        if !(self.image_w > 0.0 && self.image_h > 0.0) {
            return Err(validation("image dimensions must be positive"));
        }
        if !(0.0..=0.8).contains(&self.crowd_iou) {
            return Err(validation(format!("crowd_iou {} outside [0, 0.8]", self.crowd_iou)));
        }
        if !(self.coord_noise_sigma >= 0.0 && self.coord_noise_sigma.is_finite()) {
            return Err(validation("coord_noise_sigma must be finite and non-negative"));
        }
        let (lo, hi) = self.score_range;
        if !(lo > 0.0 && lo < hi && hi <= 1.0) {
            return Err(validation(format!("score_range ({lo}, {hi}) must satisfy 0 < low < high <= 1")));
        }
        let (hmin, hmax) = self.gt_height_range;
        if !(hmin > 0.0 && hmin <= hmax && hmax.is_finite()) {
            return Err(validation(format!("gt_height_range ({hmin}, {hmax}) is invalid")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: BBox,
    pub height: f64,
    pub visibility: f64,
    pub ignore: bool,
}

impl GtBox {
    pub fn new(bbox: BBox, visibility: f64, ignore: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&visibility) {
            return Err(validation(format!("visibility {visibility} outside [0, 1]")));
        }
        Ok(Self { bbox, height: bbox.height(), visibility, ignore })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image_w: f64,
    pub image_h: f64,
    pub gt: Vec<GtBox>,
    pub detections: Vec<Detection>,
}

impl Scene {
    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.gt.iter().map(|g| g.bbox).collect()
    }

    /// Mean IoU over consecutive ground-truth pairs (the chain neighbours).
    pub fn mean_neighbor_iou(&self) -> f64 {
        if self.gt.len() < 2 {
            return 0.0;
        }
        let sum: f64 = self.gt.windows(2).map(|w| iou(&w[0].bbox, &w[1].bbox)).sum();
        sum / (self.gt.len() - 1) as f64
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(SceneDoc::from(self)).expect("scene documents always serialize")
    }

    pub fn from_json_value(v: serde_json::Value) -> Result<Self> {
        let doc: SceneDoc = serde_json::from_value(v)?;
        doc.try_into()
    }
}

// Wire format of one scene.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    id: String,
    image: ImageDoc,
    gt: Vec<GtDoc>,
    detections: Vec<DetDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageDoc {
    w: f64,
    h: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GtDoc {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    height: f64,
    visibility: f64,
    ignore: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetDoc {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    score: f64,
    gt: Option<usize>,
}

impl From<&Scene> for SceneDoc {
    fn from(s: &Scene) -> Self {
        SceneDoc {
            id: s.id.clone(),
            image: ImageDoc { w: s.image_w, h: s.image_h },
            gt: s
                .gt
                .iter()
                .map(|g| GtDoc {
                    x1: g.bbox.x1(),
                    y1: g.bbox.y1(),
                    x2: g.bbox.x2(),
                    y2: g.bbox.y2(),
                    height: g.height,
                    visibility: g.visibility,
                    ignore: g.ignore,
                })
                .collect(),
            detections: s
                .detections
                .iter()
                .map(|d| DetDoc {
                    x1: d.bbox.x1(),
                    y1: d.bbox.y1(),
                    x2: d.bbox.x2(),
                    y2: d.bbox.y2(),
                    score: d.score(),
                    gt: d.gt,
                })
                .collect(),
        }
    }
}

impl TryFrom<SceneDoc> for Scene {
    type Error = Error;

    fn try_from(doc: SceneDoc) -> Result<Self> {
        let gt = doc
            .gt
            .iter()
            .map(|g| GtBox::new(BBox::new(g.x1, g.y1, g.x2, g.y2)?, g.visibility, g.ignore))
            .collect::<Result<Vec<_>>>()?;
        let detections = doc
            .detections
            .iter()
            .map(|d| Detection::new(BBox::new(d.x1, d.y1, d.x2, d.y2)?, d.score, d.gt))
            .collect::<Result<Vec<_>>>()?;
        if let Some(d) = detections.iter().find(|d| d.gt.is_some_and(|g| g >= gt.len())) {
            return Err(validation(format!("scene {}: detection references missing ground truth {:?}", doc.id, d.gt)));
        }
        Ok(Scene { id: doc.id, image_w: doc.image.w, image_h: doc.image.h, gt, detections })
    }
}

/// Serializes scenes as a JSON array of scene documents.
pub fn scenes_to_json(scenes: &[Scene]) -> String {
    let docs: Vec<SceneDoc> = scenes.iter().map(SceneDoc::from).collect();
    serde_json::to_string_pretty(&docs).expect("scene documents always serialize")
}

pub fn scenes_from_json(text: &str) -> Result<Vec<Scene>> {
    let docs: Vec<SceneDoc> = serde_json::from_str(text)?;
    docs.into_iter().map(Scene::try_from).collect()
}

/// Seed of the `index`-th scene of a suite (splitmix64 of base and index).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let gt_boxes = place_chain(spec, &mut rng)?;
    let visibility = match spec.visibility_model {
        VisibilityModel::Full => vec![1.0; gt_boxes.len()],
        VisibilityModel::PairwiseOcclusion => occlusion_visibility(&gt_boxes),
    };
    let gt = gt_boxes.iter().zip(&visibility).map(|(b, &v)| GtBox::new(*b, v, false)).collect::<Result<Vec<_>>>()?;

    let assign_cfg = AssignConfig::default();
    let mut detections = Vec::with_capacity(spec.n_gt * spec.preds_per_gt + spec.n_background);
    let noise =
        Normal::new(0.0, spec.coord_noise_sigma).map_err(|e| Error::Generation(format!("noise distribution: {e}")))?;
    let (lo, hi) = spec.score_range;

    for gt_box in &gt_boxes {
        let mut copies = Vec::with_capacity(spec.preds_per_gt);
        for _ in 0..spec.preds_per_gt {
            copies.push(jittered_copy(gt_box, &noise, spec, &mut rng)?);
        }
        let mut scores: Vec<f64> = (0..spec.preds_per_gt).map(|_| rng.random_range(lo..hi)).collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        // least jittered copy takes the highest score
        copies.sort_by(|a, b| a.1.total_cmp(&b.1));
        for ((bbox, _), score) in copies.into_iter().zip(scores) {
            let g = assign_one(&bbox, &gt_boxes, &assign_cfg);
            detections.push(Detection::new(bbox, score, g)?);
        }
    }

    for _ in 0..spec.n_background {
        let bbox = background_box(spec, &gt_boxes, &mut rng)?;
        let score = rng.random_range(lo..hi);
        let g = assign_one(&bbox, &gt_boxes, &assign_cfg);
        detections.push(Detection::new(bbox, score, g)?);
    }

    Ok(Scene { id: format!("seed-{}", spec.seed), image_w: spec.image_w, image_h: spec.image_h, gt, detections })
}

/// Generates `n_scenes` scenes with per-scene seeds derived from `spec.seed`.
pub fn generate_suite(spec: &SceneSpec, n_scenes: usize) -> Result<Vec<Scene>> {
    (0..n_scenes)
        .map(|k| {
            let s = SceneSpec { seed: derive_seed(spec.seed, k as u64), ..spec.clone() };
            let mut scene = generate_scene(&s)?;
            scene.id = format!("scene-{k:04}");
            Ok(scene)
        })
        .collect()
}

fn person_box(left: f64, bottom: f64, height: f64) -> Result<BBox> {
    BBox::new(left, bottom - height, left + PERSON_ASPECT * height, bottom)
}

/// Horizontal offset of `next` relative to `prev`'s left edge (both on the
/// same ground line) giving the requested IoU. `prev` is at least as tall
/// as required for the target to be reachable at zero offset.
fn offset_for_iou(prev_h: f64, next_h: f64, target: f64) -> Result<f64> {
    let prev = person_box(0.0, 0.0, prev_h)?;
    let at = |dx: f64| person_box(dx, 0.0, next_h).map(|b| iou(&prev, &b));
    let (mut lo, mut hi) = (0.0, prev.width());
    if at(lo)? < target {
        return Err(Error::Generation(format!("heights {prev_h} and {next_h} cannot reach IoU {target}")));
    }
    // iou is non-increasing in dx on [0, prev width]
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if at(mid)? >= target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn place_chain(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<BBox>> {
    let (hmin, hmax) = spec.gt_height_range;
    if hmax > spec.image_h {
        return Err(Error::Generation(format!(
            "tallest ground truth ({hmax}px) does not fit image height {}",
            spec.image_h
        )));
    }
    // heights of neighbours must stay close enough for the target IoU to be
    // reachable: left-aligned same-aspect boxes overlap at (h_small / h_big)^2
    let ratio_floor = (spec.crowd_iou + 0.02).min(1.0).sqrt();

    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut heights = Vec::with_capacity(spec.n_gt);
        let mut offsets = vec![0.0];
        let mut prev_h = rng.random_range(hmin..=hmax);
        heights.push(prev_h);
        let mut ok = true;
        for _ in 1..spec.n_gt {
            let lo = hmin.max(prev_h * ratio_floor);
            let hi = hmax.min(prev_h / ratio_floor);
            let h = if lo < hi { rng.random_range(lo..=hi) } else { prev_h };
            let dx = if spec.crowd_iou == 0.0 {
                PERSON_ASPECT * prev_h + rng.random_range(2.0..10.0)
            } else {
                match offset_for_iou(prev_h, h, spec.crowd_iou) {
                    Ok(dx) => dx,
                    Err(_) => {
                        ok = false;
                        break;
                    }
                }
            };
            offsets.push(offsets.last().unwrap() + dx);
            heights.push(h);
            prev_h = h;
        }
        if !ok {
            continue;
        }
        let right_extent = offsets.iter().zip(&heights).map(|(x, h)| x + PERSON_ASPECT * h).fold(f64::MIN, f64::max);
        let slack_x = spec.image_w - right_extent;
        if slack_x < 0.0 {
            continue;
        }
        let tallest = heights.iter().copied().fold(f64::MIN, f64::max);
        let left = rng.random_range(0.0..=slack_x);
        let ground = rng.random_range(tallest..=spec.image_h);
        return offsets.iter().zip(&heights).map(|(x, h)| person_box(left + x, ground, *h)).collect();
    }
    Err(Error::Generation(format!(
        "could not place {} ground truths at IoU {} within {}x{} after {PLACEMENT_ATTEMPTS} attempts",
        spec.n_gt, spec.crowd_iou, spec.image_w, spec.image_h
    )))
}

/// Returns the jittered box and its squared corner displacement.
fn jittered_copy(gt: &BBox, noise: &Normal<f64>, spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<(BBox, f64)> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut c = gt.to_array();
        for v in c.iter_mut() {
            *v += noise.sample(rng);
        }
        if c[2] - c[0] < 1.0 {
            c[2] = c[0] + 1.0;
        }
        if c[3] - c[1] < 1.0 {
            c[3] = c[1] + 1.0;
        }
        let Ok(b) = BBox::from_array(c).and_then(|b| b.clip(spec.image_w, spec.image_h)) else {
            continue;
        };
        let disp: f64 = b.to_array().iter().zip(gt.to_array()).map(|(a, g)| (a - g) * (a - g)).sum();
        return Ok((b, disp));
    }
    Err(Error::Generation("jittered prediction repeatedly fell outside the image".into()))
}

fn background_box(spec: &SceneSpec, gts: &[BBox], rng: &mut ChaCha8Rng) -> Result<BBox> {
    let (hmin, hmax) = spec.gt_height_range;
    for _ in 0..BACKGROUND_ATTEMPTS {
        let h = rng.random_range(hmin..=hmax).min(spec.image_h);
        let w = (PERSON_ASPECT * h).min(spec.image_w);
        let x = rng.random_range(0.0..=(spec.image_w - w));
        let y = rng.random_range(0.0..=(spec.image_h - h));
        let b = BBox::new(x, y, x + w, y + h)?;
        if gts.iter().all(|g| iou(&b, g) < 0.1) {
            return Ok(b);
        }
    }
    Err(Error::Generation(format!(
        "no background location with IoU < 0.1 against all ground truth after {BACKGROUND_ATTEMPTS} tries"
    )))
}

/// Fraction of each box not covered by boxes placed after it, sampled at
/// the cell centres of a 64x64 grid over the box.
fn occlusion_visibility(boxes: &[BBox]) -> Vec<f64> {
    let n = VISIBILITY_GRID;
    boxes
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let nearer = &boxes[k + 1..];
            let mut visible = 0usize;
            for iy in 0..n {
                let y = b.y1() + (iy as f64 + 0.5) * b.height() / n as f64;
                for ix in 0..n {
                    let x = b.x1() + (ix as f64 + 0.5) * b.width() / n as f64;
                    let covered = nearer.iter().any(|o| x >= o.x1() && x <= o.x2() && y >= o.y1() && y <= o.y2());
                    if !covered {
                        visible += 1;
                    }
                }
            }
            visible as f64 / (n * n) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_single_prediction_matches_gt() {
        let spec =
            SceneSpec { n_gt: 1, preds_per_gt: 1, coord_noise_sigma: 0.0, n_background: 0, ..SceneSpec::default() };
        let s = generate_scene(&spec).unwrap();
        assert_eq!(s.gt.len(), 1);
        assert_eq!(s.detections.len(), 1);
        assert_eq!(s.detections[0].bbox, s.gt[0].bbox);
        assert_eq!(s.detections[0].gt, Some(0));
    }

    #[test]
    fn zero_crowd_gives_disjoint_gt() {
        let spec = SceneSpec { crowd_iou: 0.0, n_gt: 8, ..SceneSpec::default() };
        let s = generate_scene(&spec).unwrap();
        for i in 0..s.gt.len() {
            for j in i + 1..s.gt.len() {
                assert_eq!(iou(&s.gt[i].bbox, &s.gt[j].bbox), 0.0);
            }
        }
    }

    #[test]
    fn neighbour_iou_hits_target() {
        let spec = SceneSpec { seed: 7, n_gt: 6, crowd_iou: 0.4, preds_per_gt: 4, ..SceneSpec::default() };
        let s = generate_scene(&spec).unwrap();
        let m = s.mean_neighbor_iou();
        assert!((0.35..=0.45).contains(&m), "mean neighbour IoU {m}");
    }

    #[test]
    fn high_crowd_is_reachable() {
        let spec = SceneSpec { crowd_iou: 0.8, ..SceneSpec::default() };
        let s = generate_scene(&spec).unwrap();
        assert!((s.mean_neighbor_iou() - 0.8).abs() < 0.05);
    }

    #[test]
    fn infeasible_spec_errors() {
        let spec = SceneSpec { n_gt: 40, crowd_iou: 0.0, image_w: 200.0, ..SceneSpec::default() };
        assert!(matches!(generate_scene(&spec), Err(Error::Generation(_))));
        let tall = SceneSpec { gt_height_range: (600.0, 700.0), ..SceneSpec::default() };
        assert!(matches!(generate_scene(&tall), Err(Error::Generation(_))));
    }

    #[test]
    fn background_stays_clear_of_gt() {
        let spec = SceneSpec { n_background: 10, ..SceneSpec::default() };
        let s = generate_scene(&spec).unwrap();
        let gts = s.gt_boxes();
        for d in &s.detections[s.detections.len() - 10..] {
            assert!(gts.iter().all(|g| iou(&d.bbox, g) < 0.1));
            assert_eq!(d.gt, None);
        }
    }

    #[test]
    fn occlusion_lowers_visibility_of_farther_boxes() {
        let spec =
            SceneSpec { crowd_iou: 0.4, visibility_model: VisibilityModel::PairwiseOcclusion, ..SceneSpec::default() };
        let s = generate_scene(&spec).unwrap();
        assert_eq!(s.gt.last().unwrap().visibility, 1.0);
        assert!(s.gt[0].visibility < 1.0);
        assert!(s.gt.iter().all(|g| (0.0..=1.0).contains(&g.visibility)));
    }

    #[test]
    fn least_jittered_copy_scores_highest() {
        let spec = SceneSpec { n_background: 0, ..SceneSpec::default() };
        let s = generate_scene(&spec).unwrap();
        for (k, g) in s.gt.iter().enumerate() {
            let mut copies: Vec<_> = s.detections[k * spec.preds_per_gt..(k + 1) * spec.preds_per_gt]
                .iter()
                .map(|d| {
                    let disp: f64 = d.bbox.to_array().iter().zip(g.bbox.to_array()).map(|(a, b)| (a - b).powi(2)).sum();
                    (d.score(), disp)
                })
                .collect();
            copies.sort_by(|a, b| b.0.total_cmp(&a.0));
            assert!(copies.windows(2).all(|w| w[0].1 <= w[1].1), "{copies:?}");
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let s = generate_scene(&SceneSpec::default()).unwrap();
        let text = scenes_to_json(std::slice::from_ref(&s));
        let back = scenes_from_json(&text).unwrap();
        assert_eq!(back, vec![s]);
        assert_eq!(scenes_to_json(&back), text);
    }

    #[test]
    fn json_rejects_dangling_gt_reference() {
        let text = r#"[{"id":"x","image":{"w":10,"h":10},"gt":[],
            "detections":[{"x1":0,"y1":0,"x2":1,"y2":1,"score":0.5,"gt":0}]}]"#;
        assert!(scenes_from_json(text).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(SceneSpec { n_gt: 0, ..SceneSpec::default() }.validate().is_err());
        assert!(SceneSpec { crowd_iou: 0.9, ..SceneSpec::default() }.validate().is_err());
        assert!(SceneSpec { score_range: (0.5, 0.5), ..SceneSpec::default() }.validate().is_err());
        assert!(SceneSpec { coord_noise_sigma: -1.0, ..SceneSpec::default() }.validate().is_err());
    }
}
