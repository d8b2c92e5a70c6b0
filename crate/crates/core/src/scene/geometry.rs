use serde::{Deserialize, Serialize};

use super::layout::Glyph;

/// Airplane outline in box-normalised coordinates (`u, v` in `[-0.5, 0.5]`),
/// nose at `v = -0.5`, symmetric about `u = 0`.
pub const AIRPLANE_OUTLINE: [(f64, f64); 20] = [
    (0.0, -0.5),
    (0.1, -0.42),
    (0.14, -0.3),
    (0.14, -0.14),
    (0.5, 0.02),
    (0.5, 0.24),
    (0.14, 0.16),
    (0.14, 0.3),
    (0.3, 0.4),
    (0.3, 0.5),
    (-0.3, 0.5),
    (-0.3, 0.4),
    (-0.14, 0.3),
    (-0.14, 0.16),
    (-0.5, 0.24),
    (-0.5, 0.02),
    (-0.14, -0.14),
    (-0.14, -0.3),
    (-0.1, -0.42),
    (0.0, -0.5),
];

/// Rotated rectangle: center, full extents, and angle in `[-pi/2, pi/2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    pub angle: f64,
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, width: f64, height: f64, angle: f64) -> Self {
        OrientedBox {
            cx,
            cy,
            width,
            height,
            angle,
        }
    }

    /// Box-local coordinates of a canvas point (inverse rotation about the center).
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.angle.sin_cos();
        let (hw, hh) = (self.width / 2.0, self.height / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(u, v)| (self.cx + c * u - s * v, self.cy + s * u + c * v))
    }

    /// Half-extents of the axis-aligned hull.
    pub fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (
            (self.width * c.abs() + self.height * s.abs()) / 2.0,
            (self.width * s.abs() + self.height * c.abs()) / 2.0,
        )
    }

    /// Integer pixel bounds `(x0, y0, w, h)` of the axis-aligned hull,
    /// rounded outward.
    pub fn pixel_bounds(&self) -> (isize, isize, usize, usize) {
        let (ex, ey) = self.half_extents();
        let x0 = (self.cx - ex).floor() as isize;
        let y0 = (self.cy - ey).floor() as isize;
        let x1 = (self.cx + ex).ceil() as isize;
        let y1 = (self.cy + ey).ceil() as isize;
        (x0, y0, (x1 - x0).max(1) as usize, (y1 - y0).max(1) as usize)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.to_local(x, y);
        u.abs() <= self.width / 2.0 && v.abs() <= self.height / 2.0
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.cx, self.cy, self.width, self.height, self.angle]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }
}

/// Crossing-number test.
pub fn point_in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Whether the glyph drawn in `b` covers canvas point `(x, y)`.
pub fn glyph_covers(glyph: Glyph, b: &OrientedBox, x: f64, y: f64) -> bool {
    let (u, v) = b.to_local(x, y);
    match glyph {
        Glyph::Rectangle => u.abs() <= b.width / 2.0 && v.abs() <= b.height / 2.0,
        Glyph::Circle => {
            let r = b.width.min(b.height) / 2.0;
            u * u + v * v <= r * r
        }
        Glyph::Airplane => point_in_polygon(&AIRPLANE_OUTLINE, u / b.width, v / b.height),
    }
}
