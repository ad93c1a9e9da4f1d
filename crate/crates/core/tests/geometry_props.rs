mod common;

use common::{bbox, crowded_bbox};
use nmsloss::gradcheck::{fd_gradient, tie_free, FDConfig};
use nmsloss::{iou, iou_grad, BBox};
use proptest::prelude::*;

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn self_iou_is_one(a in bbox()) {
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_translation_invariant(a in bbox(), b in bbox(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
        let moved = iou(&a.translate(dx, dy).unwrap(), &b.translate(dx, dy).unwrap());
        prop_assert!((moved - iou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn iou_is_scale_invariant(a in bbox(), b in bbox(), s in 0.1..10.0f64) {
        let scaled = iou(&a.scale(s).unwrap(), &b.scale(s).unwrap());
        prop_assert!((scaled - iou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn iou_grad_matches_central_differences(a in crowded_bbox(), b in crowded_bbox()) {
        let fd = FDConfig::default();
        prop_assume!(iou(&a, &b) > 0.0 && tie_free(&a, &b, fd.tie_margin));
        let g = iou_grad(&a, &b);
        let x: Vec<f64> = a.to_array().into_iter().chain(b.to_array()).collect();
        let f = |p: &[f64]| iou(&BBox::new(p[0], p[1], p[2], p[3]).unwrap(), &BBox::new(p[4], p[5], p[6], p[7]).unwrap());
        let numeric = fd_gradient(f, &x, &fd).unwrap();
        for (k, n) in numeric.iter().enumerate() {
            let an = if k < 4 { g.d_a[k] } else { g.d_b[k - 4] };
            prop_assert!((an - n).abs() <= fd.abs_tol + fd.rel_tol * an.abs().max(n.abs()), "coord {}: {} vs {}", k, an, n);
        }
    }

    #[test]
    fn disjoint_boxes_have_zero_gradient(a in bbox(), gap in 0.0..20.0f64) {
        let b = a.translate(a.width() + gap, 0.0).unwrap();
        let g = iou_grad(&a, &b);
        prop_assert_eq!(g.d_a, [0.0; 4]);
        prop_assert_eq!(g.d_b, [0.0; 4]);
    }
}

#[test]
fn invalid_boxes_are_rejected() {
    assert!(BBox::new(2.0, 0.0, 1.0, 1.0).is_err());
    assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
    assert!(BBox::new(0.0, f64::NAN, 1.0, 1.0).is_err());
    assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
}
