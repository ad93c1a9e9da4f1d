#![allow(dead_code)]

use nmsloss::scenegen::{GtBox, Scene};
use nmsloss::{BBox, Detection};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..100.0f64, 0.0..100.0f64, 0.5..50.0f64, 0.5..50.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

/// Boxes packed into a small window so that many pairs overlap.
pub fn crowded_bbox() -> impl Strategy<Value = BBox> {
    (0.0..30.0f64, 0.0..30.0f64, 5.0..30.0f64, 5.0..30.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

/// Detections over `1..=n_gt` ground-truth boxes, some unassigned.
pub fn detection_set(max_dets: usize) -> impl Strategy<Value = (Vec<Detection>, Vec<BBox>)> {
    prop::collection::vec(crowded_bbox(), 1..6).prop_flat_map(move |gts| {
        let m = gts.len();
        let det = (crowded_bbox(), 0.01..=1.0f64, prop::option::weighted(0.85, 0..m))
            .prop_map(|(b, s, g)| Detection::new(b, s, g).unwrap());
        (prop::collection::vec(det, 1..=max_dets), Just(gts))
    })
}

pub fn scene(gts: &[[f64; 4]], dets: &[([f64; 4], f64, Option<usize>)]) -> Scene {
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

/// Random NMS instance: jittered copies of a few ground-truth boxes, some
/// background boxes, and scores with deliberate ties.
pub struct Instance {
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
    pub gts: Vec<Option<usize>>,
    pub gt_boxes: Vec<[f64; 4]>,
    pub nt: f64,
}

impl Instance {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let n_gt = rng.random_range(1..=8);
        let gt_boxes: Vec<[f64; 4]> = (0..n_gt)
            .map(|_| {
                let w = rng.random_range(10.0..40.0);
                let x = rng.random_range(0.0..150.0);
                let y = rng.random_range(0.0..30.0);
                [x, y, x + w, y + w / 0.41]
            })
            .collect();
        let n = rng.random_range(1..=50);
        let mut boxes = Vec::with_capacity(n);
        let mut gts = Vec::with_capacity(n);
        let mut scores = Vec::with_capacity(n);
        for _ in 0..n {
            if rng.random_bool(0.85) {
                let g = rng.random_range(0..n_gt);
                let s = rng.random_range(0.5..8.0);
                let base = gt_boxes[g];
                let mut c = [0.0; 4];
                for (ck, bk) in c.iter_mut().zip(base) {
                    *ck = bk + rng.random_range(-s..s);
                }
                c[2] = c[2].max(c[0] + 1.0);
                c[3] = c[3].max(c[1] + 1.0);
                boxes.push(c);
                gts.push(Some(g));
            } else {
                let x = rng.random_range(0.0..180.0);
                let y = rng.random_range(0.0..80.0);
                boxes.push([x, y, x + rng.random_range(5.0..40.0), y + rng.random_range(10.0..80.0)]);
                gts.push(None);
            }
            let score = if rng.random_bool(0.5) {
                rng.random_range(0.01..=1.0)
            } else {
                [0.3, 0.5, 0.7, 0.9][rng.random_range(0..4)]
            };
            scores.push(score);
        }
        Self { boxes, scores, gts, gt_boxes, nt: rng.random_range(0.3..0.7) }
    }

    pub fn detections(&self) -> Vec<Detection> {
        self.boxes
            .iter()
            .zip(&self.scores)
            .zip(&self.gts)
            .map(|((b, s), g)| Detection::new(BBox::from_array(*b).unwrap(), *s, *g).unwrap())
            .collect()
    }

    pub fn bboxes(&self, v: &[[f64; 4]]) -> Vec<BBox> {
        v.iter().map(|b| BBox::from_array(*b).unwrap()).collect()
    }
}
