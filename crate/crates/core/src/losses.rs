//! Multi-task loss stack with analytic gradients.
//!
//! Every function returns its value together with the derivative with respect
//! to the predicted quantities, so the annotators can run plain gradient
//! descent without an autodiff framework.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    bin_center, heading_encode, normalize_heading, project_box3d_jacobian, Box2D, Box3D, CameraModel, GeometryError, Size3, BOX_PARAMS,
    NUM_HEADING_BINS,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("ground-truth 2D box has non-positive width or height")]
    DegenerateGtBox,
    #[error("size regularization needs at least 2 predictions, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Elementwise {
    Absolute,
    SmoothL1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub box2d: f64,
    pub focal: f64,
    pub center: f64,
    pub size: f64,
    pub heading_bin: f64,
    pub heading_residual: f64,
    pub size_regu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { box2d: 1.0, focal: 1.0, center: 1.0, size: 1.0, heading_bin: 1.0, heading_residual: 1.0, size_regu: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub smooth_l1_beta: f64,
    pub huber_delta: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub weights: LossWeights,
    pub elementwise_2d: Elementwise,
    /// Divide the 2D terms by the ground-truth box extent.
    pub normalize_2d: bool,
    pub size_regularization: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            smooth_l1_beta: 1.0,
            huber_delta: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            weights: LossWeights::default(),
            elementwise_2d: Elementwise::SmoothL1,
            normalize_2d: true,
            size_regularization: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.smooth_l1_beta > 0.0 && self.huber_delta > 0.0) {
            return Err(LossError::InvalidConfig("beta and delta must be positive".into()));
        }
        let w = &self.weights;
        let all = [w.box2d, w.focal, w.center, w.size, w.heading_bin, w.heading_residual, w.size_regu];
        if all.iter().any(|v| !(*v >= 0.0)) {
            return Err(LossError::InvalidConfig("term weights must be non-negative".into()));
        }
        if !(self.focal_gamma >= 0.0 && (0.0..=1.0).contains(&self.focal_alpha)) {
            return Err(LossError::InvalidConfig("focal alpha must be in [0, 1] and gamma >= 0".into()));
        }
        Ok(())
    }
}

/// Smooth L1 and its derivative with respect to `pred`.
pub fn smooth_l1(pred: f64, target: f64, beta: f64) -> (f64, f64) {
    let d = pred - target;
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

/// Huber loss and its derivative with respect to `pred`.
pub fn huber(pred: f64, target: f64, delta: f64) -> (f64, f64) {
    let d = pred - target;
    if d.abs() <= delta {
        (0.5 * d * d, d)
    } else {
        (delta * (d.abs() - 0.5 * delta), delta * d.signum())
    }
}

pub fn absolute(pred: f64, target: f64) -> (f64, f64) {
    let d = pred - target;
    let g = if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    };
    (d.abs(), g)
}

fn elementwise(kind: Elementwise, pred: f64, target: f64, beta: f64) -> (f64, f64) {
    match kind {
        Elementwise::Absolute => absolute(pred, target),
        Elementwise::SmoothL1 => smooth_l1(pred, target, beta),
    }
}

/// Unnormalized sum of elementwise terms over the four box coordinates.
pub fn loss_2d(pred: &Box2D, gt: &Box2D, cfg: &LossConfig) -> (f64, [f64; 4]) {
    let p = pred.as_array();
    let g = gt.as_array();
    let mut grad = [0.0; 4];
    let mut value = 0.0;
    for i in 0..4 {
        let (v, d) = elementwise(cfg.elementwise_2d, p[i], g[i], cfg.smooth_l1_beta);
        value += v;
        grad[i] = d;
    }
    (value, grad)
}

/// Depth-normalized 2D loss: x terms divided by the ground-truth width, y terms by its height.
pub fn loss_2d_norm(pred: &Box2D, gt: &Box2D, cfg: &LossConfig) -> Result<(f64, [f64; 4]), LossError> {
    let (w, h) = (gt.width(), gt.height());
    if !(w > 0.0 && h > 0.0) {
        return Err(LossError::DegenerateGtBox);
    }
    let p = pred.as_array();
    let g = gt.as_array();
    let norm = [w, h, w, h];
    let mut x_sum = 0.0;
    let mut y_sum = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let (v, d) = elementwise(cfg.elementwise_2d, p[i], g[i], cfg.smooth_l1_beta);
        if i % 2 == 0 {
            x_sum += v;
        } else {
            y_sum += v;
        }
        grad[i] = d / norm[i];
    }
    Ok((x_sum / w + y_sum / h, grad))
}

/// Whichever 2D loss `cfg` selects.
pub fn loss_box2d(pred: &Box2D, gt: &Box2D, cfg: &LossConfig) -> Result<(f64, [f64; 4]), LossError> {
    if cfg.normalize_2d {
        loss_2d_norm(pred, gt, cfg)
    } else {
        Ok(loss_2d(pred, gt, cfg))
    }
}

/// Softmax cross-entropy from logits; gradient is `softmax - onehot`.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let probs = softmax(logits);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let mut grad = probs;
    grad[target] -= 1.0;
    (lse - logits[target], grad)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

const FOCAL_CLAMP: f64 = 1e-7;

/// Focal loss `-α (1 - p_t)^γ ln p_t` of a probability vector, with `d/dp_t`.
pub fn focal_loss(probs: &[f64], target: usize, alpha: f64, gamma: f64) -> (f64, f64) {
    let raw = probs[target];
    let p = raw.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
    let q = 1.0 - p;
    let value = -alpha * q.powf(gamma) * p.ln();
    let grad = if raw != p {
        0.0
    } else {
        let dq = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * p.ln() };
        alpha * (dq - q.powf(gamma) / p)
    };
    (value, grad)
}

/// Focal loss on softmax probabilities, with the gradient taken through the softmax.
pub fn focal_loss_logits(logits: &[f64], target: usize, alpha: f64, gamma: f64) -> (f64, Vec<f64>) {
    let probs = softmax(logits);
    let (value, dp) = focal_loss(&probs, target, alpha, gamma);
    let pt = probs[target];
    let grad = probs.iter().enumerate().map(|(j, pj)| dp * pt * (if j == target { 1.0 } else { 0.0 } - pj)).collect();
    (value, grad)
}

/// Raw 3D head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Box3dPrediction {
    pub center: Vector3<f64>,
    pub size: Size3,
    pub heading_logits: [f64; NUM_HEADING_BINS],
    pub heading_residuals: [f64; NUM_HEADING_BINS],
}

impl Box3dPrediction {
    pub fn from_box(b: &Box3D, confidence_logit: f64) -> Self {
        let code = heading_encode(b.heading);
        let mut heading_logits = [0.0; NUM_HEADING_BINS];
        heading_logits[code.bin] = confidence_logit;
        let mut heading_residuals = [0.0; NUM_HEADING_BINS];
        heading_residuals[code.bin] = code.residual;
        Self { center: b.center, size: b.size, heading_logits, heading_residuals }
    }

    pub fn best_bin(&self) -> usize {
        let mut best = 0;
        for k in 1..NUM_HEADING_BINS {
            if self.heading_logits[k] > self.heading_logits[best] {
                best = k;
            }
        }
        best
    }

    pub fn heading(&self) -> f64 {
        let k = self.best_bin();
        bin_center(k) + self.heading_residuals[k]
    }

    /// Decoded box; sizes are floored to stay strictly positive.
    pub fn decode(&self) -> Box3D {
        let size = Size3::new(self.size.h.max(1e-3), self.size.w.max(1e-3), self.size.l.max(1e-3));
        Box3D { center: self.center, size, heading: normalize_heading(self.heading()) }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Box3dGrad {
    pub center: [f64; 3],
    /// `(h, w, l)` order.
    pub size: [f64; 3],
    pub heading_logits: [f64; NUM_HEADING_BINS],
    pub heading_residuals: [f64; NUM_HEADING_BINS],
}

impl Box3dGrad {
    fn add_scaled(&mut self, other: &Box3dGrad, s: f64) {
        for i in 0..3 {
            self.center[i] += s * other.center[i];
            self.size[i] += s * other.size[i];
        }
        for k in 0..NUM_HEADING_BINS {
            self.heading_logits[k] += s * other.heading_logits[k];
            self.heading_residuals[k] += s * other.heading_residuals[k];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Box3dLoss {
    pub center: f64,
    pub size: f64,
    pub heading_bin: f64,
    pub heading_residual: f64,
    pub total: f64,
    pub grad: Box3dGrad,
}

/// Center Huber + size smooth L1 + heading-bin cross-entropy + residual smooth L1 on the true bin.
pub fn loss_3d_box(pred: &Box3dPrediction, gt: &Box3D, cfg: &LossConfig) -> Box3dLoss {
    let w = &cfg.weights;
    let mut grad = Box3dGrad::default();

    let mut center = 0.0;
    for i in 0..3 {
        let (v, d) = huber(pred.center[i], gt.center[i], cfg.huber_delta);
        center += v;
        grad.center[i] = w.center * d;
    }

    let mut size = 0.0;
    let ps = pred.size.as_array();
    let gs = gt.size.as_array();
    for i in 0..3 {
        let (v, d) = smooth_l1(ps[i], gs[i], cfg.smooth_l1_beta);
        size += v;
        grad.size[i] = w.size * d;
    }

    let code = heading_encode(gt.heading);
    let (heading_bin, dlogits) = cross_entropy(&pred.heading_logits, code.bin);
    for k in 0..NUM_HEADING_BINS {
        grad.heading_logits[k] = w.heading_bin * dlogits[k];
    }
    let (heading_residual, dres) = smooth_l1(pred.heading_residuals[code.bin], code.residual, cfg.smooth_l1_beta);
    grad.heading_residuals[code.bin] = w.heading_residual * dres;

    let total = w.center * center + w.size * size + w.heading_bin * heading_bin + w.heading_residual * heading_residual;
    Box3dLoss { center, size, heading_bin, heading_residual, total, grad }
}

/// Batch and reference size statistics, `(h, w, l)` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSizeStats {
    pub batch_mean: [f64; 3],
    pub batch_std: [f64; 3],
    pub ref_mean: [f64; 3],
    pub ref_std: [f64; 3],
}

impl BatchSizeStats {
    /// Sample mean and (n - 1) standard deviation of the batch.
    pub fn from_batch(sizes: &[Size3], ref_mean: Size3, ref_std: Size3) -> Result<Self, LossError> {
        let n = sizes.len();
        if n < 2 {
            return Err(LossError::BatchTooSmall(n));
        }
        let mut mean = [0.0; 3];
        for s in sizes {
            for (m, v) in mean.iter_mut().zip(s.as_array()) {
                *m += v / n as f64;
            }
        }
        let mut var = [0.0; 3];
        for s in sizes {
            for (k, v) in s.as_array().iter().enumerate() {
                var[k] += (v - mean[k]).powi(2) / (n - 1) as f64;
            }
        }
        Ok(Self { batch_mean: mean, batch_std: var.map(f64::sqrt), ref_mean: ref_mean.as_array(), ref_std: ref_std.as_array() })
    }
}

pub fn loss_size_regu(stats: &BatchSizeStats, cfg: &LossConfig) -> f64 {
    (0..3)
        .map(|k| {
            smooth_l1(stats.batch_std[k], stats.ref_std[k], cfg.smooth_l1_beta).0
                + smooth_l1(stats.batch_mean[k], stats.ref_mean[k], cfg.smooth_l1_beta).0
        })
        .sum()
}

/// Size regularization with the gradient for every size in the batch.
pub fn size_regularization(sizes: &[Size3], ref_mean: Size3, ref_std: Size3, cfg: &LossConfig) -> Result<(f64, Vec<[f64; 3]>), LossError> {
    let stats = BatchSizeStats::from_batch(sizes, ref_mean, ref_std)?;
    let n = sizes.len() as f64;
    let value = loss_size_regu(&stats, cfg);
    let mut dmean = [0.0; 3];
    let mut dstd = [0.0; 3];
    for k in 0..3 {
        dmean[k] = smooth_l1(stats.batch_mean[k], stats.ref_mean[k], cfg.smooth_l1_beta).1;
        dstd[k] = smooth_l1(stats.batch_std[k], stats.ref_std[k], cfg.smooth_l1_beta).1;
    }
    let grads = sizes
        .iter()
        .map(|s| {
            let a = s.as_array();
            std::array::from_fn(|k| {
                let std_term =
                    if stats.batch_std[k] > 0.0 { dstd[k] * (a[k] - stats.batch_mean[k]) / ((n - 1.0) * stats.batch_std[k]) } else { 0.0 };
                dmean[k] / n + std_term
            })
        })
        .collect();
    Ok((value, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Weakly labeled object: 2D supervision only.
    Target,
    /// Injected object with a known 3D box.
    Injected,
}

/// What a single frustum is supervised with.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTarget {
    pub supervision: Supervision,
    pub camera: CameraModel,
    pub box2d: Box2D,
    pub gt3d: Option<Box3D>,
    pub class_index: usize,
}

/// Full network-style prediction for one frustum.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub box3d: Box3dPrediction,
    pub class_logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionGrad {
    pub box3d: Box3dGrad,
    pub class_logits: Vec<f64>,
}

/// Named loss terms (unweighted) and their weighted sum.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub terms: BTreeMap<&'static str, f64>,
    pub total: f64,
}

impl LossBreakdown {
    fn push(&mut self, name: &'static str, value: f64, weight: f64) {
        *self.terms.entry(name).or_insert(0.0) += value;
        self.total += weight * value;
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }

    pub fn has_3d_terms(&self) -> bool {
        ["center", "size", "heading_bin", "heading_residual"].iter().any(|t| self.terms.contains_key(t))
    }
}

/// Per-frustum loss: 2D box + focal for every sample, 3D box terms for injected samples.
pub fn total_loss(target: &LossTarget, pred: &Prediction, cfg: &LossConfig) -> Result<(LossBreakdown, PredictionGrad), LossError> {
    let w = &cfg.weights;
    let mut out = LossBreakdown::default();
    let mut grad = PredictionGrad { box3d: Box3dGrad::default(), class_logits: vec![0.0; pred.class_logits.len()] };

    // 2D term through the projection of the decoded box
    let decoded = pred.box3d.decode();
    let (proj, jac) = project_box3d_jacobian(&target.camera, &decoded)?;
    let (l2d, d2d) = loss_box2d(&proj, &target.box2d, cfg)?;
    out.push("box2d", l2d, w.box2d);
    let mut dparams = [0.0; BOX_PARAMS];
    for (r, row) in jac.iter().enumerate() {
        for k in 0..BOX_PARAMS {
            dparams[k] += w.box2d * d2d[r] * row[k];
        }
    }
    for i in 0..3 {
        grad.box3d.center[i] += dparams[i];
    }
    // Size3 is (h, w, l) and so is the parameter block
    let floors = [pred.box3d.size.h, pred.box3d.size.w, pred.box3d.size.l];
    for i in 0..3 {
        if floors[i] > 1e-3 {
            grad.box3d.size[i] += dparams[3 + i];
        }
    }
    grad.box3d.heading_residuals[pred.box3d.best_bin()] += dparams[6];

    let (lf, dfl) = focal_loss_logits(&pred.class_logits, target.class_index, cfg.focal_alpha, cfg.focal_gamma);
    out.push("focal", lf, w.focal);
    for (g, d) in grad.class_logits.iter_mut().zip(dfl) {
        *g += w.focal * d;
    }

    if target.supervision == Supervision::Injected {
        if let Some(gt) = &target.gt3d {
            let l3 = loss_3d_box(&pred.box3d, gt, cfg);
            out.push("center", l3.center, w.center);
            out.push("size", l3.size, w.size);
            out.push("heading_bin", l3.heading_bin, w.heading_bin);
            out.push("heading_residual", l3.heading_residual, w.heading_residual);
            grad.box3d.add_scaled(&l3.grad, 1.0);
        }
    }
    Ok((out, grad))
}

/// Reference statistics for one class in the size regularizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeReference {
    pub mean: Size3,
    pub std: Size3,
}

/// Loss over a batch: the per-sample terms plus one size regularizer per class with at least two members.
pub fn batch_loss(
    items: &[(LossTarget, Prediction)],
    references: &[SizeReference],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<LossBreakdown>, Vec<PredictionGrad>), LossError> {
    let mut total = LossBreakdown::default();
    let mut per_sample = Vec::with_capacity(items.len());
    let mut grads = Vec::with_capacity(items.len());
    for (t, p) in items {
        let (b, g) = total_loss(t, p, cfg)?;
        for (name, v) in &b.terms {
            *total.terms.entry(name).or_insert(0.0) += v;
        }
        total.total += b.total;
        per_sample.push(b);
        grads.push(g);
    }
    if cfg.size_regularization {
        let mut regu = 0.0;
        for (class, reference) in references.iter().enumerate() {
            let idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].0.class_index == class).collect();
            if idx.len() < 2 {
                continue;
            }
            let sizes: Vec<Size3> = idx.iter().map(|&i| items[i].1.box3d.size).collect();
            let (v, g) = size_regularization(&sizes, reference.mean, reference.std, cfg)?;
            regu += v;
            for (j, &i) in idx.iter().enumerate() {
                for k in 0..3 {
                    grads[i].box3d.size[k] += cfg.weights.size_regu * g[j][k];
                }
            }
        }
        total.terms.insert("size_regu", regu);
        total.total += cfg.weights.size_regu * regu;
    }
    Ok((total, per_sample, grads))
}
