//! Fixed-length frustum descriptors for the learned annotator.

use nalgebra::Vector3;

use super::{split_candidates, AnnotatorError, FrustumSample};
use crate::weak_geometry::{optical_axis_point, PriorTable, SizePrior};

/// Number of class slots in the one-hot block; classes beyond it share the last slot.
pub const MAX_CLASSES: usize = 4;
const BASE_DIM: usize = 1 + 12 + 4 + 1;
pub const FEATURE_DIM: usize = BASE_DIM + MAX_CLASSES;

/// Class ordering shared by features and class logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureContext {
    pub classes: Vec<String>,
}

impl FeatureContext {
    pub fn from_priors(priors: &PriorTable) -> Self {
        Self { classes: priors.classes().map(str::to_string).collect() }
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name).map(|i| i.min(MAX_CLASSES - 1))
    }
}

/// Descriptor plus the anchor point the regressor predicts offsets from.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumFeatures {
    pub values: [f64; FEATURE_DIM],
    /// Point on the box-centre ray at the height-prior depth.
    pub anchor: Vector3<f64>,
    pub depth: f64,
}

/// Layout: log point count; mean, std, min, max of candidate points minus the
/// anchor, per axis, in units of the prior length; weak box centre and extent
/// over the image size; depth over 70 m; class one-hot.
pub fn frustum_features(sample: &FrustumSample, prior: &SizePrior, ctx: &FeatureContext) -> Result<FrustumFeatures, AnnotatorError> {
    let split = split_candidates(sample, prior)?;
    let anchor = optical_axis_point(&sample.camera, &sample.weak.box2d, split.depth.depth)?;
    let mut v = [0.0; FEATURE_DIM];
    let pts = &split.candidates.points;
    v[0] = (pts.len() as f64).ln_1p();
    if !pts.is_empty() {
        let scale = prior.mean.l.max(1e-3);
        let n = pts.len() as f64;
        for a in 0..3 {
            let rel: Vec<f64> = pts.iter().map(|p| (p[a] - anchor[a]) / scale).collect();
            let mean = rel.iter().sum::<f64>() / n;
            let var = rel.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
            v[1 + 4 * a] = mean;
            v[2 + 4 * a] = var.sqrt();
            v[3 + 4 * a] = rel.iter().copied().fold(f64::INFINITY, f64::min);
            v[4 + 4 * a] = rel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let (w, h) = (sample.camera.image_width() as f64, sample.camera.image_height() as f64);
    let c = sample.weak.box2d.center();
    v[13] = c.x / w;
    v[14] = c.y / h;
    v[15] = sample.weak.box2d.width() / w;
    v[16] = sample.weak.box2d.height() / h;
    v[17] = split.depth.depth / 70.0;
    if let Some(k) = ctx.class_index(&sample.weak.class_name) {
        v[BASE_DIM + k] = 1.0;
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(AnnotatorError::NonFinite);
    }
    Ok(FrustumFeatures { values: v, anchor, depth: split.depth.depth })
}
