//! Axis-aligned boxes, IoU, and the analytic partials of IoU with respect to
//! both boxes' corners.

use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates, stored as corners.
///
/// Construction validates `x1 < x2`, `y1 < y2` and finiteness, so every
/// `BBox` in circulation has strictly positive width, height and area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    /// Builds a box from its center and size.
    pub fn from_center_size(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.x1
    }
    #[inline]
    pub fn y1(&self) -> f64 {
        self.y1
    }
    #[inline]
    pub fn x2(&self) -> f64 {
        self.x2
    }
    #[inline]
    pub fn y2(&self) -> f64 {
        self.y2
    }

    #[inline]
    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        Self::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    /// Clips to `[0, w] x [0, h]`. Fails if nothing of the box remains.
    pub fn clip(&self, w: f64, h: f64) -> Result<Self> {
        Self::new(self.x1.clamp(0.0, w), self.y1.clamp(0.0, h), self.x2.clamp(0.0, w), self.y2.clamp(0.0, h))
    }

    /// Area of the overlap with `other`, zero when disjoint or touching.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.x2.min(other.x2) - self.x1.max(other.x1);
        let ih = self.y2.min(other.y2) - self.y1.max(other.y1);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

/// Partials of `iou(a, b)` with respect to `(x1, y1, x2, y2)` of each box.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IoUGrad {
    pub d_a: [f64; 4],
    pub d_b: [f64; 4],
}

/// Intersection over union. Symmetric in its arguments bit-for-bit.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Analytic gradient of [`iou`].
///
/// Intersection edges are `max(a.x1, b.x1)`, `min(a.x2, b.x2)` and the same
/// in y. When the two arguments of one of those are equal the whole
/// subgradient goes to box `a`. A non-positive intersection width or height
/// gives an all-zero gradient, including the touching case.
pub fn iou_grad(a: &BBox, b: &BBox) -> IoUGrad {
    let left = a.x1.max(b.x1);
    let right = a.x2.min(b.x2);
    let top = a.y1.max(b.y1);
    let bottom = a.y2.min(b.y2);
    let iw = right - left;
    let ih = bottom - top;
    if iw <= 0.0 || ih <= 0.0 {
        return IoUGrad::default();
    }

    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let u2 = union * union;
    // d(I/U)/dI with U = Aa + Ab - I, and d(I/U)/dA for either area.
    let d_inter = (union + inter) / u2;
    let d_area = -inter / u2;

    let mut g = IoUGrad::default();

    // Own-area terms.
    let (aw, ah) = (a.width(), a.height());
    g.d_a[0] += d_area * -ah;
    g.d_a[2] += d_area * ah;
    g.d_a[1] += d_area * -aw;
    g.d_a[3] += d_area * aw;
    let (bw, bh) = (b.width(), b.height());
    g.d_b[0] += d_area * -bh;
    g.d_b[2] += d_area * bh;
    g.d_b[1] += d_area * -bw;
    g.d_b[3] += d_area * bw;

    // Intersection terms: dI/dleft = -ih, dI/dright = ih, dI/dtop = -iw, dI/dbottom = iw.
    let d_left = d_inter * -ih;
    let d_right = d_inter * ih;
    let d_top = d_inter * -iw;
    let d_bottom = d_inter * iw;

    if a.x1 >= b.x1 {
        g.d_a[0] += d_left;
    } else {
        g.d_b[0] += d_left;
    }
    if a.x2 <= b.x2 {
        g.d_a[2] += d_right;
    } else {
        g.d_b[2] += d_right;
    }
    if a.y1 >= b.y1 {
        g.d_a[1] += d_top;
    } else {
        g.d_b[1] += d_top;
    }
    if a.y2 <= b.y2 {
        g.d_a[3] += d_bottom;
    } else {
        g.d_b[3] += d_bottom;
    }
    g
}
