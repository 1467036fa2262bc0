//! Direct optimization of box parameters against the 2D label, the size prior
//! and the candidate points of the frustum.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{init_box, prior_for, split_candidates, Annotator, AnnotatorConfig, AnnotatorError, FrustumSample, PseudoLabel};
use crate::geometry::{
    bin_center, box2d_iou, box3d_iou, normalize_heading, project_box3d, project_box3d_jacobian, Box2D, Box3D, CameraModel, Size3,
    BOX_PARAMS,
};
use crate::losses::{loss_box2d, smooth_l1, LossConfig};
use crate::weak_geometry::{PriorTable, SizePrior};

/// IoU of the image-clamped projection of `b` with the weak box.
pub fn agreement_iou(cam: &CameraModel, b: &Box3D, weak: &Box2D) -> f64 {
    match project_box3d(cam, b, true) {
        Ok(p) => box2d_iou(&p, weak),
        Err(_) => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub size: f64,
    pub containment: f64,
    pub containment_beta: f64,
    pub containment_cap: f64,
}

impl From<&AnnotatorConfig> for ObjectiveWeights {
    fn from(c: &AnnotatorConfig) -> Self {
        Self {
            size: c.size_weight,
            containment: c.containment_weight,
            containment_beta: c.containment_beta,
            containment_cap: c.containment_cap,
        }
    }
}

/// Parameter vector layout: `[cx, cy, cz, ln h, ln w, ln l, heading]`.
pub type Params = [f64; BOX_PARAMS];

pub fn box_to_params(b: &Box3D) -> Params {
    [b.center.x, b.center.y, b.center.z, b.size.h.ln(), b.size.w.ln(), b.size.l.ln(), b.heading]
}

pub fn params_to_box(x: &Params) -> Box3D {
    Box3D { center: Vector3::new(x[0], x[1], x[2]), size: Size3::new(x[3].exp(), x[4].exp(), x[5].exp()), heading: normalize_heading(x[6]) }
}

/// The scalar objective minimized by the direct annotator.
#[derive(Debug, Clone)]
pub struct DirectObjective {
    pub camera: CameraModel,
    pub weak: Box2D,
    pub prior: SizePrior,
    pub points: Vec<Vector3<f64>>,
    pub weights: ObjectiveWeights,
    pub loss: LossConfig,
}

impl DirectObjective {
    /// Candidate points are put in a canonical order and evenly subsampled, so the
    /// result does not depend on the input point order.
    pub fn new(
        camera: CameraModel,
        weak: Box2D,
        prior: SizePrior,
        mut points: Vec<Vector3<f64>>,
        weights: ObjectiveWeights,
        loss: LossConfig,
        max_points: usize,
    ) -> Self {
        points.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z)));
        if max_points > 0 && points.len() > max_points {
            let n = points.len();
            points = (0..max_points).map(|i| points[i * n / max_points]).collect();
        }
        Self { camera, weak, prior, points, weights, loss }
    }

    /// Value and gradient; `None` when a corner falls behind the camera.
    pub fn evaluate(&self, x: &Params) -> Option<(f64, Params)> {
        let b = params_to_box(x);
        let sizes = [b.size.h, b.size.w, b.size.l];
        let mut grad = [0.0; BOX_PARAMS];

        let (proj, jac) = project_box3d_jacobian(&self.camera, &b).ok()?;
        let (w, h) = (self.camera.image_width() as f64, self.camera.image_height() as f64);
        let raw = proj.as_array();
        let limits = [w, h, w, h];
        let mut clamped = raw;
        let mut live = [true; 4];
        for r in 0..4 {
            if raw[r] < 0.0 || raw[r] > limits[r] {
                clamped[r] = raw[r].clamp(0.0, limits[r]);
                live[r] = false;
            }
        }
        let proj_c = Box2D { x1: clamped[0], y1: clamped[1], x2: clamped[2], y2: clamped[3] };
        let (l2d, g2d) = loss_box2d(&proj_c, &self.weak, &self.loss).ok()?;
        let mut value = self.loss.weights.box2d * l2d;
        for r in 0..4 {
            if !live[r] {
                continue;
            }
            for k in 0..BOX_PARAMS {
                grad[k] += self.loss.weights.box2d * g2d[r] * jac[r][k];
            }
        }
        // chain rule through the log-size parametrization
        for k in 0..3 {
            grad[3 + k] *= sizes[k];
        }

        let means = self.prior.mean.as_array();
        for k in 0..3 {
            let (v, d) = smooth_l1(sizes[k], means[k], self.loss.smooth_l1_beta);
            value += self.weights.size * v;
            grad[3 + k] += self.weights.size * d * sizes[k];
        }

        if self.weights.containment > 0.0 && !self.points.is_empty() {
            let (c_val, c_grad) = self.containment(&b);
            value += self.weights.containment * c_val;
            for k in 0..BOX_PARAMS {
                grad[k] += self.weights.containment * c_grad[k];
            }
        }
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        Some((value, grad))
    }

    /// Mean capped smooth-L1 hinge of the distance by which points leave the box.
    fn containment(&self, b: &Box3D) -> (f64, Params) {
        let (ax_l, ax_w) = b.axes();
        let half = [0.5 * b.size.l, 0.5 * b.size.h, 0.5 * b.size.w];
        let beta = self.weights.containment_beta;
        let cap = self.weights.containment_cap;
        let mut total = 0.0;
        let mut grad = [0.0; BOX_PARAMS];
        for p in &self.points {
            let d = p - b.center;
            let q = [d.dot(&ax_l), d.y, d.dot(&ax_w)];
            let mut pen = 0.0;
            let mut g = [0.0; BOX_PARAMS];
            for a in 0..3 {
                let e = q[a].abs() - half[a];
                if e <= 0.0 {
                    continue;
                }
                let (v, dv) = smooth_l1(e, 0.0, beta);
                pen += v;
                let s = q[a].signum();
                match a {
                    0 => {
                        // q_x = d·ax_l, dq_x/dθ = -q_z
                        for i in 0..3 {
                            g[i] -= dv * s * ax_l[i];
                        }
                        g[5] -= dv * 0.5 * b.size.l;
                        g[6] += dv * s * -q[2];
                    }
                    1 => {
                        g[1] -= dv * s;
                        g[3] -= dv * 0.5 * b.size.h;
                    }
                    _ => {
                        // q_z = d·ax_w, dq_z/dθ = q_x
                        for i in 0..3 {
                            g[i] -= dv * s * ax_w[i];
                        }
                        g[4] -= dv * 0.5 * b.size.w;
                        g[6] += dv * s * q[0];
                    }
                }
            }
            if pen > cap {
                total += cap;
            } else {
                total += pen;
                for k in 0..BOX_PARAMS {
                    grad[k] += g[k];
                }
            }
        }
        let n = self.points.len() as f64;
        (total / n, grad.map(|v| v / n))
    }
}

/// Outcome of one descent run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentResult {
    pub params: Params,
    pub loss: f64,
    pub initial_loss: f64,
    pub iterations: usize,
}

/// Adam descent with step halving on plateaus. Returns the best iterate, so the
/// final loss never exceeds the initial one.
pub fn descend(obj: &DirectObjective, start: Params, cfg: &AnnotatorConfig) -> Option<DescentResult> {
    let (initial_loss, mut grad) = obj.evaluate(&start)?;
    let mut x = start;
    let mut best = (start, initial_loss);
    let mut m = [0.0; BOX_PARAMS];
    let mut v = [0.0; BOX_PARAMS];
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut step = cfg.initial_step;
    let mut halvings = 0;
    let mut since_improve = 0;
    let mut t = 0;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        t += 1;
        for k in 0..BOX_PARAMS {
            m[k] = b1 * m[k] + (1.0 - b1) * grad[k];
            v[k] = b2 * v[k] + (1.0 - b2) * grad[k] * grad[k];
            let mh = m[k] / (1.0 - f64::powi(b1, t));
            let vh = v[k] / (1.0 - f64::powi(b2, t));
            x[k] -= step * mh / (vh.sqrt() + eps);
        }
        match obj.evaluate(&x) {
            Some((loss, g)) => {
                grad = g;
                if loss < best.1 - cfg.tol {
                    best = (x, loss);
                    since_improve = 0;
                } else {
                    if loss < best.1 {
                        best = (x, loss);
                    }
                    since_improve += 1;
                }
            }
            None => since_improve = cfg.plateau_patience,
        }
        if since_improve >= cfg.plateau_patience {
            halvings += 1;
            if halvings > cfg.max_halvings {
                break;
            }
            step *= 0.5;
            since_improve = 0;
            x = best.0;
            m = [0.0; BOX_PARAMS];
            v = [0.0; BOX_PARAMS];
            t = 0;
            grad = obj.evaluate(&x).map(|(_, g)| g)?;
        }
    }
    Some(DescentResult { params: best.0, loss: best.1, initial_loss, iterations })
}

/// Restarts the descent from every heading bin centre (or fewer, per config) and keeps the lowest final loss.
pub fn optimize_restarts(obj: &DirectObjective, init: &Box3D, cfg: &AnnotatorConfig) -> Option<(DescentResult, Vec<DescentResult>)> {
    let n = cfg.restarts.clamp(1, crate::geometry::NUM_HEADING_BINS);
    let runs: Vec<DescentResult> = (0..n)
        .filter_map(|k| {
            let heading = if n == 1 { init.heading } else { bin_center(k * crate::geometry::NUM_HEADING_BINS / n) };
            descend(obj, box_to_params(&Box3D { heading, ..*init }), cfg)
        })
        .collect();
    let best = runs.iter().copied().reduce(|a, b| if b.loss < a.loss { b } else { a })?;
    Some((best, runs))
}

pub fn build_objective(
    sample: &FrustumSample,
    prior: &SizePrior,
    loss_cfg: &LossConfig,
    cfg: &AnnotatorConfig,
) -> Result<(DirectObjective, Box3D), AnnotatorError> {
    let init = init_box(sample, prior)?;
    let split = split_candidates(sample, prior)?;
    let obj = DirectObjective::new(
        sample.camera.clone(),
        sample.weak.box2d,
        prior.clone(),
        split.candidates.points,
        ObjectiveWeights::from(cfg),
        *loss_cfg,
        cfg.max_points,
    );
    Ok((obj, init))
}

pub fn annotate_direct(
    sample: &FrustumSample,
    prior: &SizePrior,
    loss_cfg: &LossConfig,
    cfg: &AnnotatorConfig,
) -> Result<PseudoLabel, AnnotatorError> {
    let (obj, init) = build_objective(sample, prior, loss_cfg, cfg)?;
    let (best, _) = optimize_restarts(&obj, &init, cfg).ok_or(AnnotatorError::NonFinite)?;
    let b = params_to_box(&best.params);
    if !b.center.iter().all(|v| v.is_finite()) {
        return Err(AnnotatorError::NonFinite);
    }
    let agreement = agreement_iou(&sample.camera, &b, &sample.weak.box2d);
    Ok(PseudoLabel { box3d: b, class_name: sample.weak.class_name.clone(), confidence: agreement, agreement_iou: agreement })
}

/// Candidate objective settings tried by [`DirectAnnotator::fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub enabled: bool,
    pub containment_weights: Vec<f64>,
    /// Injected samples used per fit; larger sets are strided down deterministically.
    pub max_samples: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { enabled: true, containment_weights: vec![0.1, 0.3, 1.0, 3.0, 10.0], max_samples: 200 }
    }
}

/// Mean 3D IoU on the injected samples for every candidate weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_samples: usize,
    pub scores: Vec<(f64, f64)>,
    pub chosen: f64,
}

/// Deterministic optimizer behind the [`Annotator`] interface.
///
/// `fit` does not learn parameters; it picks the containment weight that best
/// recovers the known boxes of the injected samples in the training set.
#[derive(Debug, Clone, Default)]
pub struct DirectAnnotator {
    pub config: AnnotatorConfig,
    pub loss: LossConfig,
    pub calibration: CalibrationConfig,
    pub last_calibration: Option<CalibrationReport>,
}

impl DirectAnnotator {
    pub fn new(config: AnnotatorConfig, loss: LossConfig) -> Self {
        Self { config, loss, calibration: CalibrationConfig::default(), last_calibration: None }
    }

    pub fn with_calibration(mut self, calibration: CalibrationConfig) -> Self {
        self.calibration = calibration;
        self
    }

    /// Mean 3D IoU of the annotations of `samples` against their truth; failures count as zero.
    pub fn score(&self, samples: &[&FrustumSample], priors: &PriorTable, config: &AnnotatorConfig) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let total: f64 = samples
            .par_iter()
            .map(|s| {
                let gt = s.gt3d.expect("injected samples carry truth");
                prior_for(priors, &s.weak.class_name)
                    .and_then(|p| annotate_direct(s, &p, &self.loss, config))
                    .map(|l| box3d_iou(&l.box3d, &gt))
                    .unwrap_or(0.0)
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        total / samples.len() as f64
    }
}

impl Annotator for DirectAnnotator {
    fn name(&self) -> &'static str {
        "direct"
    }

    fn fit(&mut self, samples: &[FrustumSample], priors: &PriorTable, _seed: u64) -> Result<(), AnnotatorError> {
        if !self.calibration.enabled || self.calibration.containment_weights.is_empty() {
            return Ok(());
        }
        let injected: Vec<&FrustumSample> = samples.iter().filter(|s| s.gt3d.is_some()).collect();
        if injected.is_empty() {
            return Ok(());
        }
        let n = injected.len();
        let keep = self.calibration.max_samples.max(1).min(n);
        let subset: Vec<&FrustumSample> = (0..keep).map(|i| injected[i * n / keep]).collect();
        let mut scores = Vec::with_capacity(self.calibration.containment_weights.len());
        let mut best: Option<(f64, f64)> = None;
        for &w in &self.calibration.containment_weights {
            let cfg = AnnotatorConfig { containment_weight: w, ..self.config };
            let score = self.score(&subset, priors, &cfg);
            scores.push((w, score));
            // strictly better only, so ties keep the earlier candidate
            if best.map_or(true, |(_, b)| score > b) {
                best = Some((w, score));
            }
        }
        let (chosen, _) = best.expect("non-empty grid");
        self.config.containment_weight = chosen;
        self.last_calibration = Some(CalibrationReport { n_samples: subset.len(), scores, chosen });
        Ok(())
    }

    fn annotate(&self, sample: &FrustumSample, priors: &PriorTable) -> Result<PseudoLabel, AnnotatorError> {
        let prior = prior_for(priors, &sample.weak.class_name)?;
        annotate_direct(sample, &prior, &self.loss, &self.config)
    }

    fn summary(&self) -> String {
        match &self.last_calibration {
            Some(c) => {
                let scores: Vec<String> = c.scores.iter().map(|(w, s)| format!("{w}:{s:.4}")).collect();
                format!("containment_weight={} calibration=[{}] n={}", c.chosen, scores.join(" "), c.n_samples)
            }
            None => format!("containment_weight={}", self.config.containment_weight),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Frame;
    use crate::geometry::PointCloud;

    fn objective(points: Vec<Vector3<f64>>) -> (DirectObjective, Box3D) {
        let cam = CameraModel::pinhole(721.5, 609.6, 172.9, 1242, 375).unwrap();
        let truth = Box3D::new(Vector3::new(2.0, 0.9, 20.0), Size3::new(1.5, 1.6, 3.9), 0.6).unwrap();
        let weak = project_box3d(&cam, &truth, true).unwrap();
        let prior = SizePrior::new("Car", Size3::new(1.5, 1.6, 3.9), Size3::new(0.1, 0.1, 0.4)).unwrap();
        let w = ObjectiveWeights { size: 1.0, containment: 0.5, containment_beta: 0.2, containment_cap: 1.0 };
        (DirectObjective::new(cam, weak, prior, points, w, LossConfig::default(), 512), truth)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let pts: Vec<Vector3<f64>> =
            (0..40).map(|i| Vector3::new(1.0 + 0.1 * i as f64, 0.5 + 0.02 * i as f64, 18.5 + 0.07 * i as f64)).collect();
        let (obj, truth) = objective(pts);
        let mut x = box_to_params(&truth);
        x[0] += 0.3;
        x[2] -= 0.7;
        x[5] -= 0.1;
        x[6] += 0.2;
        let (_, g) = obj.evaluate(&x).unwrap();
        let h = 1e-6;
        for k in 0..BOX_PARAMS {
            let mut hi = x;
            let mut lo = x;
            hi[k] += h;
            lo[k] -= h;
            let fd = (obj.evaluate(&hi).unwrap().0 - obj.evaluate(&lo).unwrap().0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-4 * (1.0 + fd.abs()), "param {k}: fd {fd} analytic {}", g[k]);
        }
    }

    #[test]
    fn truth_is_near_stationary_without_points() {
        let (obj, truth) = objective(vec![]);
        let (v, _) = obj.evaluate(&box_to_params(&truth)).unwrap();
        assert!(v < 1e-9);
    }

    #[test]
    fn descent_never_increases_loss() {
        let (obj, truth) = objective(vec![Vector3::new(2.0, 0.9, 19.0)]);
        let start = Box3D { center: truth.center + Vector3::new(1.0, 0.2, 3.0), heading: 1.4, ..truth };
        let r = descend(&obj, box_to_params(&start), &AnnotatorConfig::default()).unwrap();
        assert!(r.loss <= r.initial_loss);
    }

    #[test]
    fn permutation_invariant_objective() {
        let pts: Vec<Vector3<f64>> = (0..30).map(|i| Vector3::new(0.1 * i as f64, 0.5, 19.0 + 0.05 * i as f64)).collect();
        let mut rev = pts.clone();
        rev.reverse();
        let (a, truth) = objective(pts);
        let (b, _) = objective(rev);
        let x = box_to_params(&truth);
        assert_eq!(a.evaluate(&x), b.evaluate(&x));
        let _ = PointCloud::empty(Frame::RectifiedCamera);
    }
}
