use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Box2D, CameraModel, GeometryError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    Sensor,
    RectifiedCamera,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub intensity: Option<Vec<f32>>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, frame: Frame) -> Result<Self, GeometryError> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(GeometryError::NonFinitePoint(i));
        }
        Ok(Self { points, intensity: None, frame })
    }

    pub fn empty(frame: Frame) -> Self {
        Self { points: Vec::new(), intensity: None, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the points at `indices`, carrying intensity along.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            intensity: self.intensity.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect()),
            frame: self.frame,
        }
    }

    /// Concatenation; intensity is kept only if both sides carry it.
    pub fn merged(&self, other: &PointCloud) -> Self {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        let intensity = match (&self.intensity, &other.intensity) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Self { points, intensity, frame: self.frame }
    }
}

pub const DEFAULT_DEPTH_RANGE: (f64, f64) = (0.0, 70.0);

/// Truncated pyramid of space behind an image box.
#[derive(Debug, Clone, PartialEq)]
pub struct Frustum {
    pub camera: CameraModel,
    pub box2d: Box2D,
    pub depth_range: (f64, f64),
}

impl Frustum {
    pub fn new(camera: CameraModel, box2d: Box2D) -> Self {
        Self { camera, box2d, depth_range: DEFAULT_DEPTH_RANGE }
    }

    pub fn with_depth_range(mut self, z_min: f64, z_max: f64) -> Result<Self, GeometryError> {
        if !(z_min >= 0.0 && z_max > z_min) {
            return Err(GeometryError::InvalidDepthRange(z_min, z_max));
        }
        self.depth_range = (z_min, z_max);
        Ok(self)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let (z_min, z_max) = self.depth_range;
        if p.z < z_min || p.z > z_max {
            return false;
        }
        match self.camera.project_point(p) {
            Ok(uv) => self.box2d.contains(uv.x, uv.y),
            Err(_) => false,
        }
    }

    pub fn indices(&self, cloud: &PointCloud) -> Vec<usize> {
        cloud.points.iter().enumerate().filter(|(_, p)| self.contains(p)).map(|(i, _)| i).collect()
    }
}

pub fn frustum_filter(frustum: &Frustum, cloud: &PointCloud) -> Result<PointCloud, GeometryError> {
    if cloud.frame != Frame::RectifiedCamera {
        return Err(GeometryError::FrameMismatch);
    }
    Ok(cloud.select(&frustum.indices(cloud)))
}
