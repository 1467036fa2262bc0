//! Cuboid proxy objects, LiDAR-visible surface sampling, object injection,
//! catalog placement and frustum-crop augmentation.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{FrustumSample, SampleOrigin};
use crate::geometry::{
    bin_center, box2d_iou, frustum_filter, project_box3d, Box2D, Box3D, CameraModel, Frame, Frustum, GeometryError, PointCloud, Size3,
    NUM_HEADING_BINS,
};
use crate::kitti_io::WeakLabel;
use crate::losses::Supervision;
use crate::seed;
use crate::weak_geometry::SizePrior;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProxyError {
    #[error("every candidate heading puts a box corner behind the camera")]
    AllProjectionsInvalid,
    #[error("sensor origin lies inside the box")]
    SensorInsideBox,
    #[error("no catalog entry within {tol_deg:.2} degrees of azimuth {azimuth_deg:.2}")]
    NoAzimuthMatch { azimuth_deg: f64, tol_deg: f64 },
    #[error("only {0} object points survive the crop")]
    CropTooAggressive(usize),
    #[error("sample has no 3D ground truth")]
    MissingGroundTruth,
    #[error("invalid point budget {0}")]
    InvalidBudget(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Proxy,
    Pseudo,
}

/// An object that can be dropped into a scene: a box and the points on it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyObject {
    pub box3d: Box3D,
    pub points: PointCloud,
    pub class_name: String,
    pub provenance: Provenance,
}

pub const MIN_PROXY_POINTS: usize = 50;
pub const MAX_PROXY_POINTS: usize = 200;
pub const PROXY_LINES: usize = 6;

/// Draws `(h, w, l)` from the prior: normal, truncated at ±2σ, floored at 0.1 m.
pub fn sample_proxy_size(prior: &SizePrior, seed: u64) -> Size3 {
    sample_proxy_size_with(prior, &mut seed::rng(seed))
}

pub fn sample_proxy_size_with<R: Rng>(prior: &SizePrior, rng: &mut R) -> Size3 {
    let mean = prior.mean.as_array();
    let std = prior.std.as_array();
    let dims: [f64; 3] = std::array::from_fn(|k| {
        if std[k] == 0.0 {
            return mean[k].max(0.1);
        }
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let z = loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 {
                break z;
            }
        };
        (mean[k] + z * std[k]).max(0.1)
    });
    Size3::new(dims[0], dims[1], dims[2])
}

/// Number of surface points for one proxy, uniform in `[50, 200]`.
pub fn sample_point_budget<R: Rng>(rng: &mut R) -> usize {
    rng.gen_range(MIN_PROXY_POINTS..=MAX_PROXY_POINTS)
}

/// IoUs closer than this are treated as ties, so the smaller bin wins.
const HEADING_TIE_EPS: f64 = 1e-12;

/// Picks the bin-centre heading whose projected box best overlaps `gt_box2d`.
pub fn select_heading(cam: &CameraModel, gt_box2d: &Box2D, center: &Vector3<f64>, size: Size3) -> Result<f64, ProxyError> {
    let mut best: Option<(f64, f64)> = None;
    for k in 0..NUM_HEADING_BINS {
        let heading = bin_center(k);
        let candidate = Box3D { center: *center, size, heading };
        let Ok(proj) = project_box3d(cam, &candidate, true) else { continue };
        let iou = box2d_iou(&proj, gt_box2d);
        match best {
            Some((_, b)) if iou <= b + HEADING_TIE_EPS => {}
            _ => best = Some((heading, iou)),
        }
    }
    best.map(|(h, _)| h).ok_or(ProxyError::AllProjectionsInvalid)
}

/// Which of the four vertical faces see the sensor: `[+l, -l, +w, -w]`.
pub fn visible_faces(b: &Box3D, sensor: &Vector3<f64>) -> [bool; 4] {
    let (ax_l, ax_w) = b.axes();
    let faces = [(ax_l, 0.5 * b.size.l), (-ax_l, 0.5 * b.size.l), (ax_w, 0.5 * b.size.w), (-ax_w, 0.5 * b.size.w)];
    faces.map(|(n, half)| {
        let face_center = b.center + n * half;
        let to_sensor = sensor - face_center;
        // horizontal component only; the faces are vertical
        n.x * to_sensor.x + n.z * to_sensor.z > 0.0
    })
}

/// Samples `n_points` on `n_lines` horizontal rings restricted to sensor-facing vertical faces.
///
/// Ring `i` sits at height `h·(i+0.5)/n_lines` above the bottom face, jittered
/// by up to a quarter of the ring spacing. Points are uniform along the
/// concatenated visible face segments.
pub fn sample_visible_surface(
    b: &Box3D,
    sensor_origin: &Vector3<f64>,
    seed: u64,
    n_points: usize,
    n_lines: usize,
) -> Result<PointCloud, ProxyError> {
    if n_points == 0 || n_lines == 0 {
        return Err(ProxyError::InvalidBudget(n_points));
    }
    if b.contains(sensor_origin, 0.0) {
        return Err(ProxyError::SensorInsideBox);
    }
    let vis = visible_faces(b, sensor_origin);
    let (hl, hw, hh) = (0.5 * b.size.l, 0.5 * b.size.w, 0.5 * b.size.h);
    // visible segments in local (length, width) coordinates: start, end
    let mut segments: Vec<([f64; 2], [f64; 2])> = Vec::new();
    if vis[0] {
        segments.push(([hl, -hw], [hl, hw]));
    }
    if vis[1] {
        segments.push(([-hl, -hw], [-hl, hw]));
    }
    if vis[2] {
        segments.push(([-hl, hw], [hl, hw]));
    }
    if vis[3] {
        segments.push(([-hl, -hw], [hl, -hw]));
    }
    if segments.is_empty() {
        return Err(ProxyError::SensorInsideBox);
    }
    let lengths: Vec<f64> = segments.iter().map(|(a, c)| ((c[0] - a[0]).powi(2) + (c[1] - a[1]).powi(2)).sqrt()).collect();
    let total: f64 = lengths.iter().sum();

    let mut rng = seed::rng(seed);
    let spacing = b.size.h / n_lines as f64;
    let mut points = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let line = i % n_lines;
        let jitter = rng.gen_range(-0.25..=0.25) * spacing;
        let above_bottom = spacing * (line as f64 + 0.5) + jitter;
        let local_y = hh - above_bottom;
        let mut s = rng.gen_range(0.0..total);
        let mut seg = 0;
        while seg + 1 < segments.len() && s > lengths[seg] {
            s -= lengths[seg];
            seg += 1;
        }
        let (a, c) = segments[seg];
        let t = (s / lengths[seg]).clamp(0.0, 1.0);
        let mut lx = a[0] + (c[0] - a[0]) * t;
        let mut lz = a[1] + (c[1] - a[1]) * t;
        // pin the face coordinate exactly
        if a[0] == c[0] {
            lx = a[0];
        } else {
            lz = a[1];
        }
        points.push(b.from_local(&Vector3::new(lx, local_y, lz)));
    }
    Ok(PointCloud::new(points, Frame::RectifiedCamera)?)
}

/// Distance from `p` to the nearest face plane of `b`, negative outside the box; zero on the surface.
pub fn surface_residual(b: &Box3D, p: &Vector3<f64>) -> f64 {
    let q = b.to_local(p);
    let d = [0.5 * b.size.l - q.x.abs(), 0.5 * b.size.h - q.y.abs(), 0.5 * b.size.w - q.z.abs()];
    d.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Builds a proxy: sizes from the prior, heading aligned with `gt_box2d`, points on the visible faces.
pub fn build_proxy(
    prior: &SizePrior,
    cam: &CameraModel,
    gt_box2d: &Box2D,
    center: &Vector3<f64>,
    sensor_origin: &Vector3<f64>,
    seed_base: u64,
) -> Result<ProxyObject, ProxyError> {
    let size = sample_proxy_size(prior, seed::derive(seed_base, &[seed::purpose::PROXY_SIZE]));
    let heading = select_heading(cam, gt_box2d, center, size)?;
    let box3d = Box3D { center: *center, size, heading };
    let mut rng = seed::rng(seed::derive(seed_base, &[seed::purpose::PROXY_SURFACE]));
    let n = sample_point_budget(&mut rng);
    let points = sample_visible_surface(&box3d, sensor_origin, rng.gen(), n, PROXY_LINES)?;
    Ok(ProxyObject { box3d, points, class_name: prior.class_name.clone(), provenance: Provenance::Proxy })
}

/// Moves `object` so its box centre sits at `center`, merges it into `background`
/// and keeps the points inside the frustum of the moved box's projection.
///
/// The returned sample carries the moved box as 3D truth and its projection
/// as an exact 2D label.
pub fn inject_object(
    background: &PointCloud,
    object: &ProxyObject,
    center: &Vector3<f64>,
    cam: &CameraModel,
    sensor_origin: &Vector3<f64>,
) -> Result<FrustumSample, ProxyError> {
    let delta = center - object.box3d.center;
    let moved_box = object.box3d.translated(&delta);
    let moved =
        PointCloud { points: object.points.points.iter().map(|p| p + delta).collect(), intensity: None, frame: Frame::RectifiedCamera };
    let box2d = project_box3d(cam, &moved_box, true)?;
    let box2d = Box2D::new(box2d.x1, box2d.y1, box2d.x2, box2d.y2)?;
    let bg = PointCloud { points: background.points.clone(), intensity: None, frame: Frame::RectifiedCamera };
    let points = frustum_filter(&Frustum::new(cam.clone(), box2d), &bg.merged(&moved))?;
    Ok(FrustumSample {
        frame_id: 0,
        object_index: 0,
        points,
        weak: WeakLabel::oracle(object.class_name.clone(), box2d),
        camera: cam.clone(),
        sensor_origin: *sensor_origin,
        supervision: Supervision::Injected,
        gt3d: Some(moved_box),
        origin: match object.provenance {
            Provenance::Proxy => SampleOrigin::Proxy,
            Provenance::Pseudo => SampleOrigin::Pseudo,
        },
    })
}

/// Bird's-eye angle from the sensor to `p`, measured from the forward axis towards +x.
pub fn azimuth(p: &Vector3<f64>, sensor: &Vector3<f64>) -> f64 {
    (p.x - sensor.x).atan2(p.z - sensor.z)
}

fn angle_diff(a: f64, b: f64) -> f64 {
    ((a - b + PI).rem_euclid(2.0 * PI) - PI).abs()
}

/// A trusted pseudo-labeled object; points are stored in box-local coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogEntry {
    pub box3d: Box3D,
    pub local_points: Vec<Vector3<f64>>,
    pub class_name: String,
    pub azimuth: f64,
    pub agreement_iou: f64,
    pub frame_id: u32,
    pub object_index: usize,
    pub iteration: usize,
}

impl CatalogEntry {
    pub fn new(
        box3d: Box3D,
        world_points: &[Vector3<f64>],
        class_name: impl Into<String>,
        sensor: &Vector3<f64>,
        agreement_iou: f64,
        (frame_id, object_index, iteration): (u32, usize, usize),
    ) -> Self {
        Self {
            box3d,
            local_points: world_points.iter().map(|p| box3d.to_local(p)).collect(),
            class_name: class_name.into(),
            azimuth: azimuth(&box3d.center, sensor),
            agreement_iou,
            frame_id,
            object_index,
            iteration,
        }
    }

    pub fn to_object(&self) -> ProxyObject {
        let points = self.local_points.iter().map(|q| self.box3d.from_local(q)).collect();
        ProxyObject {
            box3d: self.box3d,
            points: PointCloud { points, intensity: None, frame: Frame::RectifiedCamera },
            class_name: self.class_name.clone(),
            provenance: Provenance::Pseudo,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    pub entries: Vec<CatalogEntry>,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub const DEFAULT_AZIMUTH_TOL: f64 = 5.0 * PI / 180.0;

/// Picks an entry of `class_name` whose azimuth is within `tol` of `target_azimuth` and
/// slides it along its own azimuth ray to the bird's-eye range of `new_center`.
pub fn place_from_catalog<R: Rng>(
    catalog: &Catalog,
    class_name: &str,
    target_azimuth: f64,
    new_center: &Vector3<f64>,
    sensor: &Vector3<f64>,
    tol: f64,
    rng: &mut R,
) -> Result<ProxyObject, ProxyError> {
    let matches: Vec<&CatalogEntry> =
        catalog.entries.iter().filter(|e| e.class_name == class_name && angle_diff(e.azimuth, target_azimuth) <= tol).collect();
    if matches.is_empty() {
        return Err(ProxyError::NoAzimuthMatch { azimuth_deg: target_azimuth.to_degrees(), tol_deg: tol.to_degrees() });
    }
    let entry = matches[rng.gen_range(0..matches.len())];
    let c = entry.box3d.center;
    let (dx, dz) = (c.x - sensor.x, c.z - sensor.z);
    let range = (dx * dx + dz * dz).sqrt();
    let target_range = ((new_center.x - sensor.x).powi(2) + (new_center.z - sensor.z).powi(2)).sqrt();
    let scale = if range > 0.0 { target_range / range } else { 1.0 };
    let moved_center = Vector3::new(sensor.x + dx * scale, c.y, sensor.z + dz * scale);
    let mut object = entry.to_object();
    let delta = moved_center - c;
    object.box3d = object.box3d.translated(&delta);
    for p in &mut object.points.points {
        *p += delta;
    }
    Ok(object)
}

/// Crop settings: each cropped side loses a uniform fraction in `[0, max_fraction]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    pub max_fraction: f64,
    pub max_sides: usize,
    pub min_object_points: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { max_fraction: 0.3, max_sides: 2, min_object_points: 10 }
    }
}

/// Shrinks the 2D label of an injected sample and rebuilds its frustum from the smaller box.
/// The 3D truth is kept as is.
pub fn crop_augment(sample: &FrustumSample, seed: u64, cfg: &CropConfig) -> Result<FrustumSample, ProxyError> {
    let gt = sample.gt3d.ok_or(ProxyError::MissingGroundTruth)?;
    let mut rng = seed::rng(seed);
    let b = sample.weak.box2d;
    let mut sides = [0usize, 1, 2, 3];
    let n_sides = if cfg.max_sides == 0 { 0 } else { rng.gen_range(1..=cfg.max_sides.min(4)) };
    for i in 0..n_sides {
        let j = rng.gen_range(i..4);
        sides.swap(i, j);
    }
    let (w, h) = (b.width(), b.height());
    let mut c = b.as_array();
    for &side in &sides[..n_sides] {
        let f = if cfg.max_fraction > 0.0 { rng.gen_range(0.0..=cfg.max_fraction) } else { 0.0 };
        match side {
            0 => c[0] += f * w,
            1 => c[1] += f * h,
            2 => c[2] -= f * w,
            _ => c[3] -= f * h,
        }
    }
    let cropped = Box2D::new(c[0], c[1], c[2], c[3])?;
    if cropped == b {
        return Ok(sample.clone());
    }
    let frustum = Frustum::new(sample.camera.clone(), cropped);
    let points = frustum_filter(&frustum, &sample.points)?;
    let inside = points.points.iter().filter(|p| gt.contains(p, 1e-6)).count();
    if inside < cfg.min_object_points {
        return Err(ProxyError::CropTooAggressive(inside));
    }
    let mut out = sample.clone();
    out.points = points;
    out.weak.box2d = cropped;
    Ok(out)
}
