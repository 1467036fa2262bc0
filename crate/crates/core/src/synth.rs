//! Synthetic KITTI-like scenes with known 3D truth: a flat ground plane, a few
//! boxes per scene, optional occluders, and a raycast 64-beam LiDAR.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{bev_iou, box2d_iou, project_box3d, Box2D, Box3D, CameraModel, Frame, PointCloud, Size3};
use crate::kitti_io::{box3d_to_label, CalibRecord, LabelRecord, LabelSource, WeakLabel};
use crate::seed;
use crate::weak_geometry::PriorTable;

pub const KITTI_FOCAL: f64 = 721.5377;
pub const KITTI_CX: f64 = 609.5593;
pub const KITTI_CY: f64 = 172.854;
pub const KITTI_WIDTH: u32 = 1242;
pub const KITTI_HEIGHT: u32 = 375;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that an object gets an occluder between it and the sensor.
    pub occluded_fraction: f64,
    /// Relative class frequencies; classes must exist in the prior table.
    pub class_weights: Vec<(String, f64)>,
    pub depth_range: (f64, f64),
    /// Camera height above the ground plane.
    pub camera_height: f64,
    pub beams: usize,
    pub azimuth_step_deg: f64,
    pub range_noise: f64,
    pub max_range: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scenes: 200,
            min_objects: 1,
            max_objects: 4,
            occluded_fraction: 0.2,
            class_weights: vec![("Car".into(), 0.7), ("Pedestrian".into(), 0.15), ("Cyclist".into(), 0.15)],
            depth_range: (6.0, 40.0),
            camera_height: 1.65,
            beams: 64,
            azimuth_step_deg: 0.2,
            range_noise: 0.01,
            max_range: 80.0,
            seed: 7,
        }
    }
}

/// One generated object with its truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthObject {
    pub class_name: String,
    pub box3d: Box3D,
    /// Full-extent projection clamped to the image.
    pub box2d: Box2D,
    pub label: LabelRecord,
    pub occluded: bool,
    /// Confidence a 2D detector would report; low for occluded objects.
    pub detector_confidence: f64,
    /// Detector box: the oracle box with pixel jitter.
    pub detector_box: Box2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub frame_id: u32,
    pub calib: CalibRecord,
    pub camera: CameraModel,
    /// LiDAR returns in the sensor frame.
    pub cloud: PointCloud,
    pub objects: Vec<SynthObject>,
    pub occluders: Vec<Box3D>,
}

impl SynthScene {
    pub fn oracle_labels(&self) -> Vec<WeakLabel> {
        self.objects.iter().map(|o| WeakLabel::oracle(o.class_name.clone(), o.box2d)).collect()
    }

    pub fn detector_labels(&self) -> Vec<WeakLabel> {
        self.objects
            .iter()
            .map(|o| WeakLabel {
                class_name: o.class_name.clone(),
                box2d: o.detector_box,
                source: LabelSource::Detector,
                confidence: o.detector_confidence,
            })
            .collect()
    }

    pub fn truth_labels(&self) -> Vec<LabelRecord> {
        self.objects.iter().map(|o| o.label.clone()).collect()
    }
}

/// Velodyne axes (x forward, y left, z up) to camera axes (x right, y down, z forward).
pub fn velo_to_cam() -> Matrix3x4<f64> {
    Matrix3x4::new(0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0, -0.08, 1.0, 0.0, 0.0, -0.27)
}

pub fn kitti_calib() -> CalibRecord {
    let mut p2 = Matrix3x4::zeros();
    p2[(0, 0)] = KITTI_FOCAL;
    p2[(0, 2)] = KITTI_CX;
    p2[(1, 1)] = KITTI_FOCAL;
    p2[(1, 2)] = KITTI_CY;
    p2[(2, 2)] = 1.0;
    CalibRecord { p2, r0_rect: Matrix3::identity(), tr_velo_to_cam: velo_to_cam(), extra: Default::default() }
}

/// Sensor position in the rectified camera frame.
pub fn sensor_origin(calib: &CalibRecord) -> Vector3<f64> {
    calib.r0_rect * calib.tr_velo_to_cam.column(3)
}

fn ray_box(origin: &Vector3<f64>, dir: &Vector3<f64>, b: &Box3D) -> Option<f64> {
    let o = b.to_local(origin);
    let (ax_l, ax_w) = b.axes();
    let d = Vector3::new(dir.dot(&ax_l), dir.y, dir.dot(&ax_w));
    let half = [0.5 * b.size.l, 0.5 * b.size.h, 0.5 * b.size.w];
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((-half[a] - o[a]) / d[a], (half[a] - o[a]) / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    (t0 > 0.0).then_some(t0)
}

/// Nearest hit among boxes and the ground plane `y = ground_y`.
fn cast(origin: &Vector3<f64>, dir: &Vector3<f64>, boxes: &[Box3D], ground_y: f64, max_range: f64) -> Option<f64> {
    let mut best = if dir.y > 1e-9 { Some((ground_y - origin.y) / dir.y) } else { None };
    for b in boxes {
        if let Some(t) = ray_box(origin, dir, b) {
            if best.map_or(true, |bt| t < bt) {
                best = Some(t);
            }
        }
    }
    best.filter(|&t| t > 0.0 && t <= max_range)
}

fn pick_class<'a>(weights: &'a [(String, f64)], rng: &mut ChaCha8Rng) -> &'a str {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let mut r = rng.gen_range(0.0..total);
    for (name, w) in weights {
        if r < *w {
            return name;
        }
        r -= w;
    }
    &weights[weights.len() - 1].0
}

/// Fraction of a grid over the object's image box whose camera rays hit another box first.
fn occlusion_ratio(cam: &CameraModel, b: &Box3D, box2d: &Box2D, others: &[Box3D]) -> f64 {
    let origin = cam.center();
    let (mut hidden, mut total) = (0usize, 0usize);
    for i in 0..10 {
        for j in 0..10 {
            let u = box2d.x1 + (i as f64 + 0.5) / 10.0 * box2d.width();
            let v = box2d.y1 + (j as f64 + 0.5) / 10.0 * box2d.height();
            let Ok(p) = cam.backproject_at_depth(u, v, 1.0) else { continue };
            let dir = (p - origin).normalize();
            let Some(t) = ray_box(&origin, &dir, b) else { continue };
            total += 1;
            if others.iter().any(|o| ray_box(&origin, &dir, o).is_some_and(|to| to < t)) {
                hidden += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hidden as f64 / total as f64
    }
}

fn truncation(cam: &CameraModel, b: &Box3D) -> f64 {
    match (project_box3d(cam, b, false), project_box3d(cam, b, true)) {
        (Ok(raw), Ok(clamped)) if raw.area() > 0.0 => (1.0 - clamped.area() / raw.area()).clamp(0.0, 1.0),
        _ => 1.0,
    }
}

pub fn generate_scene(cfg: &SynthConfig, priors: &PriorTable, frame_id: u32) -> SynthScene {
    let mut rng = seed::rng(seed::derive(cfg.seed, &[seed::purpose::SCENE, frame_id as u64]));
    let calib = kitti_calib();
    let camera = calib.camera(KITTI_WIDTH, KITTI_HEIGHT).expect("valid intrinsics");
    let sensor = sensor_origin(&calib);
    let ground_y = cfg.camera_height;
    let n_objects = rng.gen_range(cfg.min_objects..=cfg.max_objects.max(cfg.min_objects));

    let mut boxes: Vec<(String, Box3D)> = Vec::new();
    let mut occluders: Vec<Box3D> = Vec::new();
    let mut occluded_flags = Vec::new();
    let mut attempts = 0;
    while boxes.len() < n_objects && attempts < 200 {
        attempts += 1;
        let class = pick_class(&cfg.class_weights, &mut rng).to_string();
        let Some(prior) = priors.get(&class) else { continue };
        let mut dims = [0.0; 3];
        for (k, (m, s)) in prior.mean.as_array().iter().zip(prior.std.as_array()).enumerate() {
            let n = if s > 0.0 { Normal::new(*m, s).expect("positive std").sample(&mut rng) } else { *m };
            dims[k] = n.clamp(m - 2.0 * s, m + 2.0 * s).max(0.2);
        }
        let size = Size3::new(dims[0], dims[1], dims[2]);
        let z = rng.gen_range(cfg.depth_range.0..cfg.depth_range.1);
        let x = z * rng.gen_range(-0.55..0.55);
        let heading = rng.gen_range(0.0..PI);
        let b = Box3D { center: Vector3::new(x, ground_y - 0.5 * size.h, z), size, heading };
        let Ok(proj) = project_box3d(&camera, &b, false) else { continue };
        let clamped = proj.clamp_to(KITTI_WIDTH, KITTI_HEIGHT);
        if clamped.width() < 8.0 || clamped.height() < 8.0 || truncation(&camera, &b) > 0.3 {
            continue;
        }
        let margin = Box3D { size: Size3::new(size.h, size.w + 1.0, size.l + 1.0), ..b };
        if boxes.iter().any(|(_, o)| bev_iou(&margin, o) > 0.0) || occluders.iter().any(|o| bev_iou(&margin, o) > 0.0) {
            continue;
        }
        let mut occluded = false;
        if rng.gen_bool(cfg.occluded_fraction) {
            // a low wall part way along the sensor ray, shifted sideways so it covers part of the object
            let t = rng.gen_range(0.45..0.7);
            let along = sensor + (b.center - sensor) * t;
            let lateral = Vector3::new(b.center.z - sensor.z, 0.0, -(b.center.x - sensor.x)).normalize();
            let shift = rng.gen_range(-0.4..0.4) * b.size.l.max(b.size.w);
            let oh = rng.gen_range(0.8..1.6_f64).min(size.h + 0.3);
            let osize = Size3::new(oh, 0.4, rng.gen_range(1.0..2.5));
            let ray_heading = (b.center.x - sensor.x).atan2(b.center.z - sensor.z);
            let occ = Box3D::new(
                Vector3::new(along.x + lateral.x * shift, ground_y - 0.5 * oh, along.z + lateral.z * shift),
                osize,
                ray_heading + PI / 2.0,
            )
            .expect("positive size");
            if boxes.iter().all(|(_, o)| bev_iou(&occ, o) == 0.0) && occ.center.z - sensor.z > 2.0 {
                occluders.push(occ);
                occluded = true;
            }
        }
        boxes.push((class, b));
        occluded_flags.push(occluded);
    }

    let all_solids: Vec<Box3D> = boxes.iter().map(|(_, b)| *b).chain(occluders.iter().copied()).collect();
    let noise = Normal::new(0.0, cfg.range_noise.max(0.0)).expect("finite");
    let r = velo_to_cam().fixed_view::<3, 3>(0, 0).into_owned();
    let r_inv = r.transpose();
    let mut points = Vec::new();
    let n_az = (90.0 / cfg.azimuth_step_deg).round() as usize;
    for beam in 0..cfg.beams {
        let el = (2.0 - 26.8 * beam as f64 / (cfg.beams.max(2) - 1) as f64).to_radians();
        for a in 0..=n_az {
            let az = (-45.0 + a as f64 * cfg.azimuth_step_deg).to_radians();
            let dv = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let dir = r * dv;
            if let Some(t) = cast(&sensor, &dir, &all_solids, ground_y, cfg.max_range) {
                let t = t + if cfg.range_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                // store in the sensor frame
                points.push(r_inv * (dir * t));
            }
        }
    }
    let cloud = PointCloud::new(points, Frame::Sensor).expect("finite returns");

    let mut objects = Vec::with_capacity(boxes.len());
    for (i, (class, b)) in boxes.iter().enumerate() {
        let box2d = project_box3d(&camera, b, true).expect("checked at placement");
        let others: Vec<Box3D> = all_solids.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, o)| *o).collect();
        let occ = occlusion_ratio(&camera, b, &box2d, &others);
        let mut label = box3d_to_label(b, class, box2d, None);
        label.truncation = (truncation(&camera, b) * 100.0).round() / 100.0;
        label.occlusion = if occ < 0.1 {
            0
        } else if occ < 0.5 {
            1
        } else {
            2
        };
        let hidden = occluded_flags[i] || occ >= 0.1;
        let detector_confidence = if hidden { rng.gen_range(0.5..0.95) } else { rng.gen_range(0.95..1.0) };
        let j = |rng: &mut ChaCha8Rng| rng.gen_range(-2.0..2.0);
        let jittered = Box2D::new(box2d.x1 + j(&mut rng), box2d.y1 + j(&mut rng), box2d.x2 + j(&mut rng), box2d.y2 + j(&mut rng))
            .map(|d| d.clamp_to(KITTI_WIDTH, KITTI_HEIGHT))
            .ok()
            .filter(|d| box2d_iou(d, &box2d) > 0.5 && d.width() > 1.0 && d.height() > 1.0)
            .unwrap_or(box2d);
        objects.push(SynthObject {
            class_name: class.clone(),
            box3d: *b,
            box2d,
            label,
            occluded: hidden,
            detector_confidence,
            detector_box: jittered,
        });
    }
    SynthScene { frame_id, calib, camera, cloud, objects, occluders }
}

pub fn generate_corpus(cfg: &SynthConfig, priors: &PriorTable) -> Vec<SynthScene> {
    use rayon::prelude::*;
    (0..cfg.n_scenes as u32).into_par_iter().map(|i| generate_scene(cfg, priors, i)).collect()
}
