//! Readers and writers for KITTI calibration, label, detection and LiDAR files.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_heading, Box2D, Box3D, CameraModel, Frame, GeometryError, PointCloud, Size3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KittiError {
    #[error("missing calibration key `{0}`")]
    MissingKey(String),
    #[error("line {line}: malformed number `{token}`")]
    MalformedNumber { line: usize, token: String },
    #[error("line {line}: expected {expected} fields, found {found}")]
    FieldCountMismatch { line: usize, expected: String, found: usize },
    #[error("line {line}: invalid object: {reason}")]
    InvalidObject { line: usize, reason: String },
    #[error("velodyne buffer length {0} is not a multiple of 16")]
    LengthNotMultiple(usize),
    #[error("point cloud is already in the rectified camera frame")]
    FrameMismatch,
    #[error("R0_rect is not orthonormal (deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Calibration matrices of one frame. Unused keys are kept verbatim for re-serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibRecord {
    pub p2: Matrix3x4<f64>,
    pub r0_rect: Matrix3<f64>,
    pub tr_velo_to_cam: Matrix3x4<f64>,
    pub extra: BTreeMap<String, Vec<f64>>,
}

impl CalibRecord {
    pub fn identity() -> Self {
        Self { p2: Matrix3x4::identity(), r0_rect: Matrix3::identity(), tr_velo_to_cam: Matrix3x4::identity(), extra: BTreeMap::new() }
    }

    pub fn camera(&self, image_width: u32, image_height: u32) -> Result<CameraModel, GeometryError> {
        CameraModel::new(self.p2, image_width, image_height)
    }
}

fn parse_f64(token: &str, line: usize) -> Result<f64, KittiError> {
    token.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| KittiError::MalformedNumber { line, token: token.to_string() })
}

pub fn parse_calib(text: &str) -> Result<CalibRecord, KittiError> {
    let mut entries: BTreeMap<String, (usize, Vec<f64>)> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, rest)) = line.split_once(':') else {
            return Err(KittiError::FieldCountMismatch { line: line_no, expected: "KEY: values".into(), found: 0 });
        };
        let values = rest.split_whitespace().map(|t| parse_f64(t, line_no)).collect::<Result<Vec<_>, _>>()?;
        entries.insert(key.trim().to_string(), (line_no, values));
    }

    let mut take = |key: &str, n: usize| -> Result<Vec<f64>, KittiError> {
        let (line, values) = entries.remove(key).ok_or_else(|| KittiError::MissingKey(key.to_string()))?;
        if values.len() != n {
            return Err(KittiError::FieldCountMismatch { line, expected: n.to_string(), found: values.len() });
        }
        Ok(values)
    };
    let p2 = Matrix3x4::from_row_slice(&take("P2", 12)?);
    let r0_rect = Matrix3::from_row_slice(&take("R0_rect", 9)?);
    let tr_velo_to_cam = Matrix3x4::from_row_slice(&take("Tr_velo_to_cam", 12)?);

    let deviation = (r0_rect.transpose() * r0_rect - Matrix3::identity()).amax();
    if deviation >= 1e-3 {
        return Err(KittiError::NotOrthonormal(deviation));
    }
    let extra = entries.into_iter().map(|(k, (_, v))| (k, v)).collect();
    Ok(CalibRecord { p2, r0_rect, tr_velo_to_cam, extra })
}

fn write_row(out: &mut String, key: &str, values: impl IntoIterator<Item = f64>) {
    out.push_str(key);
    out.push(':');
    for v in values {
        // `{:e}` prints the shortest representation that parses back to the same f64
        let _ = write!(out, " {v:e}");
    }
    out.push('\n');
}

pub fn write_calib(calib: &CalibRecord) -> String {
    let mut out = String::new();
    for key in ["P0", "P1"] {
        if let Some(v) = calib.extra.get(key) {
            write_row(&mut out, key, v.iter().copied());
        }
    }
    write_row(&mut out, "P2", calib.p2.transpose().iter().copied());
    if let Some(v) = calib.extra.get("P3") {
        write_row(&mut out, "P3", v.iter().copied());
    }
    write_row(&mut out, "R0_rect", calib.r0_rect.transpose().iter().copied());
    write_row(&mut out, "Tr_velo_to_cam", calib.tr_velo_to_cam.transpose().iter().copied());
    for (k, v) in &calib.extra {
        if !matches!(k.as_str(), "P0" | "P1" | "P3") {
            write_row(&mut out, k, v.iter().copied());
        }
    }
    out
}

/// One KITTI object line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub class_name: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    pub box2d: Box2D,
    /// `(h, w, l)` in meters.
    pub dimensions: Size3,
    /// Bottom-centre of the box in the rectified camera frame.
    pub location: Vector3<f64>,
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl LabelRecord {
    pub fn is_dont_care(&self) -> bool {
        self.class_name == "DontCare"
    }
}

fn parse_label_line(line: &str, line_no: usize) -> Result<LabelRecord, KittiError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 15 && fields.len() != 16 {
        return Err(KittiError::FieldCountMismatch { line: line_no, expected: "15 or 16".into(), found: fields.len() });
    }
    let num = |i: usize| parse_f64(fields[i], line_no);
    let occlusion = fields[2]
        .parse::<f64>()
        .ok()
        .filter(|v| v.fract() == 0.0)
        .map(|v| v as i32)
        .ok_or_else(|| KittiError::MalformedNumber { line: line_no, token: fields[2].to_string() })?;
    let class_name = fields[0].to_string();
    // DontCare rows carry placeholder geometry (-1 dims, -1000 locations); keep them as written
    let box2d = Box2D { x1: num(4)?, y1: num(5)?, x2: num(6)?, y2: num(7)? };
    let dimensions = Size3::new(num(8)?, num(9)?, num(10)?);
    if class_name != "DontCare" && dimensions.as_array().iter().any(|d| *d <= 0.0) {
        return Err(KittiError::InvalidObject { line: line_no, reason: "non-positive dimensions".into() });
    }
    Ok(LabelRecord {
        class_name,
        truncation: num(1)?,
        occlusion,
        alpha: num(3)?,
        box2d,
        dimensions,
        location: Vector3::new(num(11)?, num(12)?, num(13)?),
        rotation_y: num(14)?,
        score: if fields.len() == 16 { Some(num(15)?) } else { None },
    })
}

pub fn parse_labels(text: &str) -> Result<Vec<LabelRecord>, KittiError> {
    text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| parse_label_line(l, i + 1)).collect()
}

/// Decimal places used when writing label files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelPrecision {
    pub pixels: usize,
    pub meters: usize,
    pub angles: usize,
    pub score: usize,
}

impl Default for LabelPrecision {
    fn default() -> Self {
        Self { pixels: 2, meters: 2, angles: 2, score: 4 }
    }
}

/// Formats `v` with `prec` decimals, mapping negative zero to zero so output is stable.
fn fmt_fixed(v: f64, prec: usize) -> String {
    let s = format!("{v:.prec$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

pub fn write_labels(records: &[LabelRecord]) -> String {
    write_labels_with(records, LabelPrecision::default())
}

pub fn write_labels_with(records: &[LabelRecord], prec: LabelPrecision) -> String {
    let mut out = String::new();
    for r in records {
        let px = |v: f64| fmt_fixed(v, prec.pixels);
        let m = |v: f64| fmt_fixed(v, prec.meters);
        let a = |v: f64| fmt_fixed(v, prec.angles);
        let _ = write!(
            out,
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            r.class_name,
            fmt_fixed(r.truncation, 2),
            r.occlusion,
            a(r.alpha),
            px(r.box2d.x1),
            px(r.box2d.y1),
            px(r.box2d.x2),
            px(r.box2d.y2),
            m(r.dimensions.h),
            m(r.dimensions.w),
            m(r.dimensions.l),
            m(r.location.x),
            m(r.location.y),
            m(r.location.z),
            a(r.rotation_y),
        );
        if let Some(s) = r.score {
            let _ = write!(out, " {}", fmt_fixed(s, prec.score));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSource {
    Oracle,
    Detector,
}

/// A 2D box label with no 3D information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLabel {
    pub class_name: String,
    pub box2d: Box2D,
    pub source: LabelSource,
    pub confidence: f64,
}

impl WeakLabel {
    pub fn oracle(class_name: impl Into<String>, box2d: Box2D) -> Self {
        Self { class_name: class_name.into(), box2d, source: LabelSource::Oracle, confidence: 1.0 }
    }

    pub fn detector(class_name: impl Into<String>, box2d: Box2D, confidence: f64) -> Self {
        Self { class_name: class_name.into(), box2d, source: LabelSource::Detector, confidence: confidence.clamp(0.0, 1.0) }
    }
}

/// Oracle weak labels from ground-truth label records; `DontCare` rows are skipped.
pub fn weak_labels_from_records(records: &[LabelRecord]) -> Result<Vec<WeakLabel>, KittiError> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.is_dont_care())
        .map(|(i, r)| {
            let b = Box2D::new(r.box2d.x1, r.box2d.y1, r.box2d.x2, r.box2d.y2)
                .map_err(|_| KittiError::InvalidObject { line: i + 1, reason: "degenerate 2D box".into() })?;
            Ok(WeakLabel::oracle(r.class_name.clone(), b))
        })
        .collect()
}

/// Detector output: either full 16-field KITTI lines or short `class x1 y1 x2 y2 score` lines.
pub fn parse_detections(text: &str) -> Result<Vec<WeakLabel>, KittiError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        let (class, coords, score) = match fields.len() {
            0 => continue,
            6 => (fields[0], &fields[1..5], fields[5]),
            16 => (fields[0], &fields[4..8], fields[15]),
            n => return Err(KittiError::FieldCountMismatch { line: line_no, expected: "6 or 16".into(), found: n }),
        };
        if class == "DontCare" {
            continue;
        }
        let c = coords.iter().map(|t| parse_f64(t, line_no)).collect::<Result<Vec<_>, _>>()?;
        let conf = parse_f64(score, line_no)?;
        if !(0.0..=1.0).contains(&conf) {
            return Err(KittiError::InvalidObject { line: line_no, reason: format!("confidence {conf} outside [0, 1]") });
        }
        let b = Box2D::new(c[0], c[1], c[2], c[3])
            .map_err(|_| KittiError::InvalidObject { line: line_no, reason: "degenerate 2D box".into() })?;
        out.push(WeakLabel::detector(class, b, conf));
    }
    Ok(out)
}

pub fn read_velodyne(bytes: &[u8]) -> Result<PointCloud, KittiError> {
    if bytes.len() % 16 != 0 {
        return Err(KittiError::LengthNotMultiple(bytes.len()));
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(chunk[4 * i..4 * i + 4].try_into().unwrap());
        points.push(Vector3::new(f(0) as f64, f(1) as f64, f(2) as f64));
        intensity.push(f(3));
    }
    let mut cloud = PointCloud::new(points, Frame::Sensor)?;
    cloud.intensity = Some(intensity);
    Ok(cloud)
}

pub fn write_velodyne(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points.iter().enumerate() {
        let inten = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p.x as f32, p.y as f32, p.z as f32, inten] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Moves a sensor-frame cloud into the rectified camera frame.
pub fn to_rectified(cloud: &PointCloud, calib: &CalibRecord) -> Result<PointCloud, KittiError> {
    if cloud.frame != Frame::Sensor {
        return Err(KittiError::FrameMismatch);
    }
    let points = cloud.points.iter().map(|p| calib.r0_rect * (calib.tr_velo_to_cam * Vector4::new(p.x, p.y, p.z, 1.0))).collect();
    Ok(PointCloud { points, intensity: cloud.intensity.clone(), frame: Frame::RectifiedCamera })
}

/// Representative of a `[0, π)` heading in `[-π/2, π/2)`.
pub fn heading_to_rotation_y(heading: f64) -> f64 {
    let h = normalize_heading(heading);
    if h < FRAC_PI_2 {
        h
    } else {
        h - PI
    }
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Export a box as a label row. `box2d` is the image box to record alongside it.
pub fn box3d_to_label(b: &Box3D, class_name: &str, box2d: Box2D, score: Option<f64>) -> LabelRecord {
    let location = Vector3::new(b.center.x, b.center.y + 0.5 * b.size.h, b.center.z);
    let rotation_y = heading_to_rotation_y(b.heading);
    LabelRecord {
        class_name: class_name.to_string(),
        truncation: 0.0,
        occlusion: 0,
        alpha: wrap_angle(rotation_y - location.x.atan2(location.z)),
        box2d,
        dimensions: b.size,
        location,
        rotation_y,
        score,
    }
}

pub fn label_to_box3d(r: &LabelRecord) -> Result<Box3D, GeometryError> {
    let center = Vector3::new(r.location.x, r.location.y - 0.5 * r.dimensions.h, r.location.z);
    Box3D::new(center, r.dimensions, r.rotation_y)
}

/// Zero-padded frame file stem, e.g. `000042`.
pub fn frame_stem(frame_id: u32) -> String {
    format!("{frame_id:06}")
}

#[cfg(test)]
mod tests {
    use super::*;

    const CALIB: &str = "P0: 1 0 0 0 0 1 0 0 0 0 1 0\n\
        P2: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03\n\
        R0_rect: 1 0 0 0 1 0 0 0 1\n\
        Tr_velo_to_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0\n";

    #[test]
    fn parses_calib() {
        let c = parse_calib(CALIB).unwrap();
        assert_eq!(c.p2[(0, 0)], 721.5377);
        assert_eq!(c.p2[(2, 3)], 2.745884e-03);
        assert!(c.extra.contains_key("P0"));
    }

    #[test]
    fn identity_p2() {
        let text = "P2: 1 0 0 0 0 1 0 0 0 0 1 0\nR0_rect: 1 0 0 0 1 0 0 0 1\nTr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n";
        let c = parse_calib(text).unwrap();
        assert_eq!(c.p2, Matrix3x4::identity());
    }

    #[test]
    fn calib_missing_key() {
        let text = "R0_rect: 1 0 0 0 1 0 0 0 1\nTr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n";
        assert_eq!(parse_calib(text), Err(KittiError::MissingKey("P2".into())));
    }

    #[test]
    fn calib_bad_number_reports_line() {
        let text = CALIB.replace("7.215377e+02", "7.2x");
        assert!(matches!(parse_calib(&text), Err(KittiError::MalformedNumber { line: 2, .. })));
    }

    #[test]
    fn calib_roundtrip_fixed_point() {
        let c = parse_calib(CALIB).unwrap();
        let again = parse_calib(&write_calib(&c)).unwrap();
        assert_eq!(c, again);
        assert_eq!(write_calib(&again), write_calib(&c));
    }

    const CAR: &str = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59";

    #[test]
    fn parses_car_line() {
        let r = parse_labels(CAR).unwrap().remove(0);
        assert_eq!(r.class_name, "Car");
        assert_eq!(r.occlusion, 0);
        assert_eq!(r.box2d.as_array(), [587.01, 173.33, 614.12, 200.12]);
        assert_eq!(r.dimensions, Size3::new(1.65, 1.67, 3.64));
        assert_eq!(r.location, Vector3::new(-0.65, 1.71, 46.70));
        assert_eq!(r.rotation_y, -1.59);
        assert_eq!(r.score, None);
    }

    #[test]
    fn empty_label_file() {
        assert!(parse_labels("").unwrap().is_empty());
        assert!(parse_labels("\n\n").unwrap().is_empty());
    }

    #[test]
    fn label_field_count_error() {
        let err = parse_labels("Car 0 0 1 2 3").unwrap_err();
        assert!(matches!(err, KittiError::FieldCountMismatch { line: 1, found: 6, .. }));
    }

    #[test]
    fn dont_care_preserved() {
        let text = format!("{CAR}\nDontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n");
        let recs = parse_labels(&text).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs[1].is_dont_care());
        assert_eq!(parse_labels(&write_labels(&recs)).unwrap(), recs);
        assert_eq!(weak_labels_from_records(&recs).unwrap().len(), 1);
    }

    #[test]
    fn label_writer_is_stable() {
        let recs = parse_labels(CAR).unwrap();
        assert_eq!(write_labels(&recs).trim_end(), CAR.replace("46.70", "46.70"));
        let mut r = recs[0].clone();
        r.location.x = -0.001;
        assert!(write_labels(&[r]).contains(" 0.00 1.71"));
    }

    #[test]
    fn detections_with_confidence() {
        let text = "Car 10 20 110 80 0.99\nPedestrian 5 5 15 40 0.90\nDontCare 0 0 1 1 0.5\n";
        let d = parse_detections(text).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].source, LabelSource::Detector);
        assert_eq!(d[1].confidence, 0.90);
        let long = format!("{CAR} 0.97");
        assert_eq!(parse_detections(&long).unwrap()[0].confidence, 0.97);
        assert!(parse_detections("Car 1 2 3 4 1.5").is_err());
    }

    #[test]
    fn velodyne_single_point() {
        let bytes: Vec<u8> = [1.0f32, 2.0, 3.0, 0.5].iter().flat_map(|v| v.to_le_bytes()).collect();
        let c = read_velodyne(&bytes).unwrap();
        assert_eq!(c.points, vec![Vector3::new(1.0, 2.0, 3.0)]);
        assert_eq!(c.intensity, Some(vec![0.5]));
        assert_eq!(c.frame, Frame::Sensor);
        assert_eq!(write_velodyne(&c), bytes);
    }

    #[test]
    fn velodyne_lengths() {
        assert!(read_velodyne(&[]).unwrap().is_empty());
        assert_eq!(read_velodyne(&[0u8; 15]), Err(KittiError::LengthNotMultiple(15)));
    }

    #[test]
    fn rectify_identity_and_translation() {
        let cloud = PointCloud::new(vec![Vector3::new(1.0, 2.0, 3.0)], Frame::Sensor).unwrap();
        let same = to_rectified(&cloud, &CalibRecord::identity()).unwrap();
        assert_eq!(same.points, cloud.points);
        assert_eq!(same.frame, Frame::RectifiedCamera);

        let mut calib = CalibRecord::identity();
        calib.tr_velo_to_cam[(0, 3)] = 0.5;
        calib.tr_velo_to_cam[(2, 3)] = -2.0;
        let moved = to_rectified(&cloud, &calib).unwrap();
        assert_eq!(moved.points[0], Vector3::new(1.5, 2.0, 1.0));
        assert_eq!(to_rectified(&moved, &calib), Err(KittiError::FrameMismatch));
    }

    #[test]
    fn label_bottom_center_convention() {
        let b = Box3D::new(Vector3::new(0.0, 0.0, 10.0), Size3::new(2.0, 1.0, 1.0), 0.0).unwrap();
        let bb = Box2D::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let r = box3d_to_label(&b, "Car", bb, None);
        assert_eq!(r.location, Vector3::new(0.0, 1.0, 10.0));
        assert_eq!(r.rotation_y, 0.0);
        let back = label_to_box3d(&r).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn rotation_y_representative() {
        assert_eq!(heading_to_rotation_y(0.3), 0.3);
        assert!((heading_to_rotation_y(2.0) - (2.0 - PI)).abs() < 1e-15);
        assert_eq!(heading_to_rotation_y(FRAC_PI_2), FRAC_PI_2 - PI);
    }
}
