//! 3D reasoning driven by a 2D box and class size priors: depth from an
//! assumed object height, cylinder segmentation of a frustum, and the
//! placement centre for injected objects.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Box2D, CameraModel, GeometryError, PointCloud, Size3, DEFAULT_DEPTH_RANGE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeakGeometryError {
    #[error("2D box height {0:.3} px is too small to estimate depth")]
    DegenerateBox(f64),
    #[error("augmented projection matrix is not invertible")]
    SingularK,
    #[error("prior height must be positive, got {0}")]
    InvalidHeight(f64),
    #[error("cannot take the centre of an empty point set")]
    EmptyRemovedSet,
    #[error("invalid size prior for `{0}`")]
    InvalidPrior(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Per-class mean and standard deviation of `(h, w, l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizePrior {
    pub class_name: String,
    pub mean: Size3,
    pub std: Size3,
}

impl SizePrior {
    pub fn new(class_name: impl Into<String>, mean: Size3, std: Size3) -> Result<Self, WeakGeometryError> {
        let class_name = class_name.into();
        let ok = mean.as_array().iter().all(|v| v.is_finite() && *v > 0.0) && std.as_array().iter().all(|v| v.is_finite() && *v >= 0.0);
        if !ok {
            return Err(WeakGeometryError::InvalidPrior(class_name));
        }
        Ok(Self { class_name, mean, std })
    }
}

/// Class name to size prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriorTable(pub BTreeMap<String, SizePriorEntry>);

/// Serialized form of a prior: `mean = [h, w, l]`, `std = [h, w, l]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizePriorEntry {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl PriorTable {
    pub fn get(&self, class_name: &str) -> Option<SizePrior> {
        self.0.get(class_name).map(|e| SizePrior {
            class_name: class_name.to_string(),
            mean: Size3::new(e.mean[0], e.mean[1], e.mean[2]),
            std: Size3::new(e.std[0], e.std[1], e.std[2]),
        })
    }

    pub fn validate(&self) -> Result<(), WeakGeometryError> {
        for name in self.0.keys() {
            let p = self.get(name).expect("key present");
            SizePrior::new(name.clone(), p.mean, p.std)?;
        }
        Ok(())
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    /// Per-class mean and population standard deviation of `(class, h, w, l)` samples.
    pub fn from_sizes<'a>(sizes: impl IntoIterator<Item = (&'a str, Size3)>) -> Self {
        let mut groups: BTreeMap<String, Vec<[f64; 3]>> = BTreeMap::new();
        for (class, s) in sizes {
            groups.entry(class.to_string()).or_default().push(s.as_array());
        }
        let table = groups
            .into_iter()
            .map(|(class, v)| {
                let n = v.len() as f64;
                let mean: [f64; 3] = std::array::from_fn(|k| v.iter().map(|s| s[k]).sum::<f64>() / n);
                let std: [f64; 3] = std::array::from_fn(|k| (v.iter().map(|s| (s[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt());
                (class, SizePriorEntry { mean, std })
            })
            .collect();
        Self(table)
    }
}

impl Default for PriorTable {
    /// KITTI-like statistics. Only the Car length (3.88 m, std 0.40 m) is a
    /// published value; everything else is a configurable starting point.
    fn default() -> Self {
        let mut m = BTreeMap::new();
        m.insert("Car".to_string(), SizePriorEntry { mean: [1.53, 1.63, 3.88], std: [0.14, 0.10, 0.40] });
        m.insert("Pedestrian".to_string(), SizePriorEntry { mean: [1.76, 0.66, 0.84], std: [0.11, 0.14, 0.23] });
        m.insert("Cyclist".to_string(), SizePriorEntry { mean: [1.74, 0.60, 1.76], std: [0.09, 0.12, 0.18] });
        Self(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthEstimate {
    /// Depth clamped into the operating range.
    pub depth: f64,
    /// Depth before clamping.
    pub raw_depth: f64,
    /// Homogeneous scale of the bottom image point.
    pub scale: f64,
    pub out_of_range: bool,
}

/// Depth of an object whose image box spans `box2d` and whose real height is `height`.
///
/// The top and bottom of the object's vertical centre line project to
/// `(u, y1)` and `(u, y2)`. Writing both projections with the projection
/// column `c` of the vertical axis gives the bottom point's homogeneous scale
/// `s = height * (c1 - y1 * c0 / u) / (y2 - y1)`; the 3D point is then
/// `K⁻¹ · s · [u, y2, 1, 1/s]` where `K` is the projection with a `[0 0 0 1]`
/// row appended, and the depth is its `z` component.
pub fn estimate_depth(cam: &CameraModel, box2d: &Box2D, height: f64) -> Result<DepthEstimate, WeakGeometryError> {
    estimate_depth_in_range(cam, box2d, height, DEFAULT_DEPTH_RANGE)
}

pub fn estimate_depth_in_range(
    cam: &CameraModel,
    box2d: &Box2D,
    height: f64,
    range: (f64, f64),
) -> Result<DepthEstimate, WeakGeometryError> {
    if !(height > 0.0 && height.is_finite()) {
        return Err(WeakGeometryError::InvalidHeight(height));
    }
    let (y1, y2) = (box2d.y1, box2d.y2);
    if !((y2 - y1).abs() >= 1.0) {
        return Err(WeakGeometryError::DegenerateBox((y2 - y1).abs()));
    }
    let u = 0.5 * (box2d.x1 + box2d.x2);
    let p = cam.projection();
    let (c0, c1, c2) = (p[(0, 1)], p[(1, 1)], p[(2, 1)]);
    let scale = if c0 == 0.0 {
        height * c1 / (y2 - y1)
    } else if u.abs() > 1e-6 {
        height * (c1 - y1 * c0 / u) / (y2 - y1)
    } else {
        // skewed camera with the box centred on u = 0: use the third row instead of the first
        height * (c1 - y1 * c2) / (y2 - y1)
    };
    let k_inv = cam.augmented().try_inverse().ok_or(WeakGeometryError::SingularK)?;
    let bottom = k_inv * nalgebra::Vector4::new(scale * u, scale * y2, scale, 1.0);
    let raw_depth = bottom[2];
    let out_of_range = !(raw_depth >= range.0 && raw_depth <= range.1);
    Ok(DepthEstimate { depth: raw_depth.clamp(range.0, range.1), raw_depth, scale, out_of_range })
}

/// Point on the ray through the box centre at depth `depth`.
pub fn optical_axis_point(cam: &CameraModel, box2d: &Box2D, depth: f64) -> Result<Vector3<f64>, GeometryError> {
    let c = box2d.center();
    cam.backproject_at_depth(c.x, c.y, depth)
}

/// Splits frustum points into those within horizontal distance `radius` of the
/// vertical line through the optical-axis point at `depth` and the rest.
pub fn extract_background(
    frustum_points: &PointCloud,
    cam: &CameraModel,
    box2d: &Box2D,
    depth: f64,
    radius: f64,
) -> Result<(PointCloud, PointCloud), WeakGeometryError> {
    let (inside, outside) = cylinder_partition(frustum_points, cam, box2d, depth, radius)?;
    Ok((frustum_points.select(&inside), frustum_points.select(&outside)))
}

/// Index form of [`extract_background`].
pub fn cylinder_partition(
    points: &PointCloud,
    cam: &CameraModel,
    box2d: &Box2D,
    depth: f64,
    radius: f64,
) -> Result<(Vec<usize>, Vec<usize>), WeakGeometryError> {
    if points.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let axis = optical_axis_point(cam, box2d, depth)?;
    let r2 = radius * radius;
    Ok((0..points.len()).partition(|&i| {
        let p = &points.points[i];
        let dx = p.x - axis.x;
        let dz = p.z - axis.z;
        dx * dx + dz * dz <= r2
    }))
}

/// Component-wise lower median.
pub fn injection_center(removed: &PointCloud) -> Result<Vector3<f64>, WeakGeometryError> {
    let n = removed.len();
    if n == 0 {
        return Err(WeakGeometryError::EmptyRemovedSet);
    }
    let mut out = Vector3::zeros();
    let mut buf = Vec::with_capacity(n);
    for d in 0..3 {
        buf.clear();
        buf.extend(removed.points.iter().map(|p| p[d]));
        let k = (n - 1) / 2;
        let (_, median, _) = buf.select_nth_unstable_by(k, f64::total_cmp);
        out[d] = *median;
    }
    Ok(out)
}

/// Fewer removed points than this and the placement falls back to the depth estimate.
pub const MIN_REMOVED_POINTS: usize = 5;

/// Centre for an injected object: the median of the removed points, or the
/// optical-axis point at the estimated depth when too few points were removed.
pub fn placement_center(removed: &PointCloud, cam: &CameraModel, box2d: &Box2D, depth: f64) -> Result<Vector3<f64>, WeakGeometryError> {
    if removed.len() >= MIN_REMOVED_POINTS {
        injection_center(removed)
    } else {
        Ok(optical_axis_point(cam, box2d, depth)?)
    }
}
