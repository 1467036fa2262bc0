//! Camera projection, boxes, frustums, heading bins and overlap measures.

mod boxes;
mod camera;
mod cloud;
mod heading;
mod iou;

pub use boxes::{box2d_iou, normalize_heading, project_box3d, project_box3d_jacobian, Box2D, Box3D, Size3, BOX_PARAMS};
pub use camera::CameraModel;
pub use cloud::{frustum_filter, Frame, Frustum, PointCloud, DEFAULT_DEPTH_RANGE};
pub use heading::{bin_center, heading_decode, heading_encode, HeadingCode, HEADING_BIN_WIDTH, NUM_HEADING_BINS};
pub use iou::{bev_iou, box3d_iou, clip_convex, convex_intersection_area};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point projects to non-positive depth (homogeneous scale {0})")]
    NonPositiveDepth(f64),
    #[error("box corner {0} lies behind the camera")]
    CornerBehindCamera(usize),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid 2D box {0:?}")]
    InvalidBox2D(Box2D),
    #[error("invalid 3D box: {0}")]
    InvalidBox3D(String),
    #[error("invalid depth range [{0}, {1}]")]
    InvalidDepthRange(f64, f64),
    #[error("non-finite coordinate in point {0}")]
    NonFinitePoint(usize),
    #[error("point cloud is in the wrong frame")]
    FrameMismatch,
}
