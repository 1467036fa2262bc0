use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{CameraModel, GeometryError};

/// Axis-aligned image box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let b = Self { x1, y1, x2, y2 };
        if [x1, y1, x2, y2].iter().all(|v| v.is_finite()) && x1 < x2 && y1 < y2 {
            Ok(b)
        } else {
            Err(GeometryError::InvalidBox2D(b))
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x1 && u <= self.x2 && v >= self.y1 && v <= self.y2
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { x1: self.x1 * s, y1: self.y1 * s, x2: self.x2 * s, y2: self.y2 * s }
    }

    pub fn clamp_to(&self, width: u32, height: u32) -> Self {
        let (w, h) = (width as f64, height as f64);
        Self { x1: self.x1.clamp(0.0, w), y1: self.y1.clamp(0.0, h), x2: self.x2.clamp(0.0, w), y2: self.y2.clamp(0.0, h) }
    }
}

/// Intersection over union of two image boxes.
pub fn box2d_iou(a: &Box2D, b: &Box2D) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Object size in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Size3 {
    pub h: f64,
    pub w: f64,
    pub l: f64,
}

impl Size3 {
    pub fn new(h: f64, w: f64, l: f64) -> Self {
        Self { h, w, l }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.h, self.w, self.l]
    }

    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }
}

/// Wraps an angle into `[0, π)`.
pub fn normalize_heading(theta: f64) -> f64 {
    let r = theta.rem_euclid(PI);
    // rem_euclid can round up to exactly PI for tiny negative inputs
    if r >= PI {
        0.0
    } else {
        r
    }
}

/// Oriented 3D box in the rectified camera frame (x right, y down, z forward).
///
/// `center` is the volumetric centre. `heading` rotates the length axis about
/// the vertical: the length direction is `(cos θ, 0, -sin θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vector3<f64>,
    pub size: Size3,
    pub heading: f64,
}

impl Box3D {
    pub fn new(center: Vector3<f64>, size: Size3, heading: f64) -> Result<Self, GeometryError> {
        let ok = center.iter().all(|v| v.is_finite()) && size.as_array().iter().all(|v| v.is_finite() && *v > 0.0) && heading.is_finite();
        if !ok {
            return Err(GeometryError::InvalidBox3D(format!("{center:?} {size:?} {heading}")));
        }
        Ok(Self { center, size, heading: normalize_heading(heading) })
    }

    /// Unit vectors of the box's length and width axes in the rectified frame.
    pub fn axes(&self) -> (Vector3<f64>, Vector3<f64>) {
        let (s, c) = self.heading.sin_cos();
        (Vector3::new(c, 0.0, -s), Vector3::new(s, 0.0, c))
    }

    /// Box-local coordinates `(along length, vertical, along width)`.
    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let d = p - self.center;
        let (ax_l, ax_w) = self.axes();
        Vector3::new(d.dot(&ax_l), d.y, d.dot(&ax_w))
    }

    pub fn from_local(&self, q: &Vector3<f64>) -> Vector3<f64> {
        let (ax_l, ax_w) = self.axes();
        self.center + ax_l * q.x + Vector3::new(0.0, q.y, 0.0) + ax_w * q.z
    }

    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        let q = self.to_local(p);
        q.x.abs() <= 0.5 * self.size.l + tol && q.y.abs() <= 0.5 * self.size.h + tol && q.z.abs() <= 0.5 * self.size.w + tol
    }

    /// The eight corners; bit 0 picks the length sign, bit 1 the vertical sign, bit 2 the width sign.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let Size3 { h, w, l } = self.size;
        std::array::from_fn(|i| {
            let sl = if i & 1 != 0 { 0.5 } else { -0.5 };
            let sh = if i & 2 != 0 { 0.5 } else { -0.5 };
            let sw = if i & 4 != 0 { 0.5 } else { -0.5 };
            self.from_local(&Vector3::new(sl * l, sh * h, sw * w))
        })
    }

    /// Footprint polygon in the bird's-eye `(x, z)` plane, counter-clockwise.
    pub fn bev_polygon(&self) -> [Vector2<f64>; 4] {
        let (ax_l, ax_w) = self.axes();
        let hl = 0.5 * self.size.l;
        let hw = 0.5 * self.size.w;
        let c = Vector2::new(self.center.x, self.center.z);
        let l = Vector2::new(ax_l.x, ax_l.z) * hl;
        let w = Vector2::new(ax_w.x, ax_w.z) * hw;
        let mut poly = [c + l + w, c - l + w, c - l - w, c + l - w];
        if signed_area(&poly) < 0.0 {
            poly.reverse();
        }
        poly
    }

    pub fn y_range(&self) -> (f64, f64) {
        (self.center.y - 0.5 * self.size.h, self.center.y + 0.5 * self.size.h)
    }

    pub fn volume(&self) -> f64 {
        self.size.volume()
    }

    pub fn translated(&self, delta: &Vector3<f64>) -> Self {
        Self { center: self.center + delta, ..*self }
    }
}

pub(crate) fn signed_area(poly: &[Vector2<f64>]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let a = poly[i];
            let b = poly[(i + 1) % n];
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
        * 0.5
}

/// Axis-aligned envelope of the eight projected corners.
pub fn project_box3d(cam: &CameraModel, b: &Box3D, clamp: bool) -> Result<Box2D, GeometryError> {
    let mut x1 = f64::INFINITY;
    let mut y1 = f64::INFINITY;
    let mut x2 = f64::NEG_INFINITY;
    let mut y2 = f64::NEG_INFINITY;
    for (i, c) in b.corners().iter().enumerate() {
        let uv = cam.project_point(c).map_err(|_| GeometryError::CornerBehindCamera(i))?;
        x1 = x1.min(uv.x);
        y1 = y1.min(uv.y);
        x2 = x2.max(uv.x);
        y2 = y2.max(uv.y);
    }
    let out = Box2D { x1, y1, x2, y2 };
    Ok(if clamp { out.clamp_to(cam.image_width(), cam.image_height()) } else { out })
}

/// Box parameters in the order used by [`project_box3d_jacobian`]:
/// `[cx, cy, cz, h, w, l, heading]`.
pub const BOX_PARAMS: usize = 7;

/// Projection together with `d(x1, y1, x2, y2) / d[cx, cy, cz, h, w, l, heading]`.
///
/// The envelope is piecewise smooth; each coordinate differentiates through the
/// corner attaining the extremum (first such corner on ties).
pub fn project_box3d_jacobian(cam: &CameraModel, b: &Box3D) -> Result<(Box2D, [[f64; BOX_PARAMS]; 4]), GeometryError> {
    let p = cam.projection();
    let Size3 { h, w, l } = b.size;
    let (s, c) = b.heading.sin_cos();
    let ax_l = Vector3::new(c, 0.0, -s);
    let ax_w = Vector3::new(s, 0.0, c);
    let dax_l = Vector3::new(-s, 0.0, -c);
    let dax_w = Vector3::new(c, 0.0, -s);

    let mut uv = [(0.0f64, 0.0f64); 8];
    let mut duv = [([0.0f64; BOX_PARAMS], [0.0f64; BOX_PARAMS]); 8];
    for i in 0..8 {
        let sl = if i & 1 != 0 { 0.5 } else { -0.5 };
        let sh = if i & 2 != 0 { 0.5 } else { -0.5 };
        let sw = if i & 4 != 0 { 0.5 } else { -0.5 };
        let corner = b.center + ax_l * (sl * l) + Vector3::new(0.0, sh * h, 0.0) + ax_w * (sw * w);
        let hom = cam.project_homogeneous(&corner);
        if !(hom.z > 0.0) {
            return Err(GeometryError::CornerBehindCamera(i));
        }
        let u = hom.x / hom.z;
        let v = hom.y / hom.z;
        uv[i] = (u, v);
        // d corner / d params, one column per parameter
        let dth = dax_l * (sl * l) + dax_w * (sw * w);
        let cols: [Vector3<f64>; BOX_PARAMS] =
            [Vector3::x(), Vector3::y(), Vector3::z(), Vector3::new(0.0, sh, 0.0), ax_w * sw, ax_l * sl, dth];
        let gu = Vector3::new(p[(0, 0)] - u * p[(2, 0)], p[(0, 1)] - u * p[(2, 1)], p[(0, 2)] - u * p[(2, 2)]) / hom.z;
        let gv = Vector3::new(p[(1, 0)] - v * p[(2, 0)], p[(1, 1)] - v * p[(2, 1)], p[(1, 2)] - v * p[(2, 2)]) / hom.z;
        for (k, col) in cols.iter().enumerate() {
            duv[i].0[k] = gu.dot(col);
            duv[i].1[k] = gv.dot(col);
        }
    }
    let pick = |better: fn(f64, f64) -> bool, use_v: bool| -> usize {
        let mut best = 0;
        for i in 1..8 {
            let (a, b) = if use_v { (uv[i].1, uv[best].1) } else { (uv[i].0, uv[best].0) };
            if better(a, b) {
                best = i;
            }
        }
        best
    };
    let ix1 = pick(|a, b| a < b, false);
    let iy1 = pick(|a, b| a < b, true);
    let ix2 = pick(|a, b| a > b, false);
    let iy2 = pick(|a, b| a > b, true);
    let out = Box2D { x1: uv[ix1].0, y1: uv[iy1].1, x2: uv[ix2].0, y2: uv[iy2].1 };
    Ok((out, [duv[ix1].0, duv[iy1].1, duv[ix2].0, duv[iy2].1]))
}
