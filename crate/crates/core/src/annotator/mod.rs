//! Per-frustum 3D box estimation.
//!
//! [`Annotator`] is the pluggable interface. Two implementations ship with the
//! crate: [`DirectAnnotator`], a deterministic optimizer over the box
//! parameters, and [`LearnedAnnotator`], a small regressor trained on mixed
//! 2D/3D supervision.

mod direct;
mod features;
mod learned;

pub use direct::{
    agreement_iou, annotate_direct, box_to_params, descend, optimize_restarts, params_to_box, CalibrationConfig, CalibrationReport,
    DescentResult, DirectAnnotator, DirectObjective, ObjectiveWeights, Params,
};
pub use features::{frustum_features, FeatureContext, FEATURE_DIM};
pub use learned::{
    annotate_learned, train_learned, train_learned_with_reference, LearnedAnnotator, Mlp, SizeReferenceSource, TrainConfig, TrainReport,
};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Box3D, CameraModel, GeometryError, PointCloud};
use crate::kitti_io::WeakLabel;
use crate::losses::{LossError, Supervision};
use crate::proxy::{select_heading, ProxyError};
use crate::weak_geometry::{estimate_depth, extract_background, placement_center, DepthEstimate, PriorTable, SizePrior, WeakGeometryError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotatorError {
    #[error("frustum contains no points")]
    EmptyFrustum,
    #[error("optimization produced non-finite values")]
    NonFinite,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("no size prior for class `{0}`")]
    UnknownClass(String),
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    WeakGeometry(#[from] WeakGeometryError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleOrigin {
    Target,
    Proxy,
    Pseudo,
}

/// One frustum and everything known about it.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumSample {
    pub frame_id: u32,
    pub object_index: usize,
    /// Frustum points in the rectified camera frame.
    pub points: PointCloud,
    pub weak: WeakLabel,
    pub camera: CameraModel,
    pub sensor_origin: Vector3<f64>,
    pub supervision: Supervision,
    /// Present iff `supervision` is `Injected`.
    pub gt3d: Option<Box3D>,
    pub origin: SampleOrigin,
}

impl FrustumSample {
    pub fn is_injected(&self) -> bool {
        self.supervision == Supervision::Injected
    }
}

/// An annotated object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub box3d: Box3D,
    pub class_name: String,
    pub confidence: f64,
    pub agreement_iou: f64,
}

/// Settings of the direct optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotatorConfig {
    pub max_iters: usize,
    pub initial_step: f64,
    /// Halve the step after this many iterations without improvement.
    pub plateau_patience: usize,
    /// Stop once the step has been halved this many times.
    pub max_halvings: usize,
    pub tol: f64,
    pub restarts: usize,
    /// Weight of the smooth-L1 pull of the sizes towards the prior mean.
    pub size_weight: f64,
    /// Weight of the penalty on candidate points that fall outside the box.
    pub containment_weight: f64,
    /// Smooth-L1 transition (meters) of the containment hinge.
    pub containment_beta: f64,
    /// Per-point cap on the containment penalty; points beyond it stop pulling.
    pub containment_cap: f64,
    /// Candidate points are subsampled to at most this many.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            initial_step: 1e-2,
            plateau_patience: 10,
            max_halvings: 6,
            tol: 1e-6,
            restarts: 12,
            size_weight: 1.0,
            containment_weight: 0.1,
            containment_beta: 0.2,
            containment_cap: 1.0,
            max_points: 512,
            seed: 0,
        }
    }
}

/// Points of a frustum split by the height-prior cylinder.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSplit {
    pub depth: DepthEstimate,
    pub candidates: PointCloud,
    pub background: PointCloud,
}

pub fn split_candidates(sample: &FrustumSample, prior: &SizePrior) -> Result<CandidateSplit, AnnotatorError> {
    let depth = estimate_depth(&sample.camera, &sample.weak.box2d, prior.mean.h)?;
    let (candidates, background) = extract_background(&sample.points, &sample.camera, &sample.weak.box2d, depth.depth, prior.mean.l)?;
    Ok(CandidateSplit { depth, candidates, background })
}

/// Starting box: median of the cylinder candidates (or the depth-prior point on the
/// optical ray when there are too few), prior mean size, best 2D-aligned heading.
pub fn init_box(sample: &FrustumSample, prior: &SizePrior) -> Result<Box3D, AnnotatorError> {
    if sample.points.is_empty() {
        return Err(AnnotatorError::EmptyFrustum);
    }
    let split = split_candidates(sample, prior)?;
    let center = placement_center(&split.candidates, &sample.camera, &sample.weak.box2d, split.depth.depth)?;
    let heading = select_heading(&sample.camera, &sample.weak.box2d, &center, prior.mean).unwrap_or(0.0);
    Ok(Box3D { center, size: prior.mean, heading })
}

/// The interface every 3D annotator implements.
pub trait Annotator: Send + Sync {
    fn name(&self) -> &'static str;

    /// Adapts the annotator to a training set of target and injected frustums.
    fn fit(&mut self, samples: &[FrustumSample], priors: &PriorTable, seed: u64) -> Result<(), AnnotatorError>;

    fn annotate(&self, sample: &FrustumSample, priors: &PriorTable) -> Result<PseudoLabel, AnnotatorError>;

    /// One line on the state left by the last `fit`, for run manifests.
    fn summary(&self) -> String {
        String::new()
    }
}

pub fn prior_for(priors: &PriorTable, class_name: &str) -> Result<SizePrior, AnnotatorError> {
    priors.get(class_name).ok_or_else(|| AnnotatorError::UnknownClass(class_name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Frame, Size3};
    use crate::kitti_io::WeakLabel;

    #[test]
    fn empty_frustum_rejected() {
        let cam = CameraModel::pinhole(721.5, 609.6, 172.9, 1242, 375).unwrap();
        let sample = FrustumSample {
            frame_id: 0,
            object_index: 0,
            points: PointCloud::empty(Frame::RectifiedCamera),
            weak: WeakLabel::oracle("Car", crate::geometry::Box2D::new(500.0, 150.0, 600.0, 220.0).unwrap()),
            camera: cam,
            sensor_origin: Vector3::zeros(),
            supervision: Supervision::Target,
            gt3d: None,
            origin: SampleOrigin::Target,
        };
        let prior = SizePrior::new("Car", Size3::new(1.5, 1.6, 3.9), Size3::new(0.1, 0.1, 0.4)).unwrap();
        assert_eq!(init_box(&sample, &prior), Err(AnnotatorError::EmptyFrustum));
    }
}
