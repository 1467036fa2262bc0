//! A small multilayer perceptron trained with 2D supervision on target frustums
//! and full 3D supervision on injected ones.

use std::io::{Read, Write};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::features::{frustum_features, FeatureContext, FrustumFeatures, FEATURE_DIM, MAX_CLASSES};
use super::{agreement_iou, prior_for, Annotator, AnnotatorError, FrustumSample, PseudoLabel};
use crate::geometry::{Size3, NUM_HEADING_BINS};
use crate::losses::{batch_loss, Box3dPrediction, LossConfig, LossTarget, Prediction, PredictionGrad, SizeReference};
use crate::seed;
use crate::weak_geometry::{PriorTable, SizePrior};

const OUT_CENTER: usize = 0;
const OUT_SIZE: usize = 3;
const OUT_LOGITS: usize = 6;
const OUT_RESIDUALS: usize = OUT_LOGITS + NUM_HEADING_BINS;
const OUT_CLASS: usize = OUT_RESIDUALS + NUM_HEADING_BINS;
pub const OUTPUT_DIM: usize = OUT_CLASS + MAX_CLASSES;

const MAGIC: &[u8; 8] = b"AL3DMLP\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs × inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Fully connected network with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    /// He-initialized network; the output layer starts near zero so fresh models predict the anchor box.
    pub fn new(dims: &[usize], seed: u64) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        let mut rng = seed::rng(seed);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let std = (2.0 / d[0] as f64).sqrt() * if i == last { 0.01 } else { 1.0 };
                let normal = Normal::new(0.0, std).expect("finite std");
                Layer {
                    inputs: d[0],
                    outputs: d[1],
                    weights: (0..d[0] * d[1]).map(|_| normal.sample(&mut rng)).collect(),
                    bias: vec![0.0; d[1]],
                }
            })
            .collect();
        Self { layers }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].inputs];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Activations of every layer, input first.
    fn forward_all(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for (i, l) in self.layers.iter().enumerate() {
            let a = acts.last().expect("input present");
            let mut z: Vec<f64> = (0..l.outputs)
                .map(|o| l.bias[o] + l.weights[o * l.inputs..(o + 1) * l.inputs].iter().zip(a).map(|(w, v)| w * v).sum::<f64>())
                .collect();
            if i + 1 < self.layers.len() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_all(x).pop().expect("output present")
    }

    /// Accumulates parameter gradients for one input into `grad` (flattened like [`Mlp::params`]).
    fn backward(&self, acts: &[Vec<f64>], dout: &[f64], grad: &mut [f64]) {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.weights.len() + l.bias.len();
        }
        let mut delta = dout.to_vec();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let a = &acts[i];
            let base = offsets[i];
            for o in 0..l.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for j in 0..l.inputs {
                    grad[base + o * l.inputs + j] += d * a[j];
                }
                grad[base + l.weights.len() + o] += d;
            }
            if i > 0 {
                let mut prev = vec![0.0; l.inputs];
                for o in 0..l.outputs {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for j in 0..l.inputs {
                        prev[j] += d * l.weights[o * l.inputs + j];
                    }
                }
                // ReLU mask of the previous layer
                for j in 0..l.inputs {
                    if a[j] <= 0.0 {
                        prev[j] = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// Versioned little-endian format: magic, version, layer count, dims, then per layer weights and biases as f32.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let dims = self.dims();
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.bias) {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, AnnotatorError> {
        let err = |m: &str| AnnotatorError::ModelFormat(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| err("truncated header"))?;
        if &magic != MAGIC {
            return Err(err("bad magic"));
        }
        let read_u32 = |r: &mut dyn Read| -> Result<u32, AnnotatorError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| err("truncated header"))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(AnnotatorError::ModelFormat(format!("unsupported version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        if !(2..=64).contains(&n) {
            return Err(err("bad layer count"));
        }
        let dims = (0..n).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if dims.iter().any(|&d| d == 0 || d > 1 << 16) {
            return Err(err("bad layer size"));
        }
        let mut layers = Vec::with_capacity(n - 1);
        for d in dims.windows(2) {
            let mut vals = vec![0.0; d[0] * d[1] + d[1]];
            for v in vals.iter_mut() {
                let mut b = [0u8; 4];
                r.read_exact(&mut b).map_err(|_| err("truncated weights"))?;
                *v = f32::from_le_bytes(b) as f64;
            }
            let bias = vals.split_off(d[0] * d[1]);
            layers.push(Layer { inputs: d[0], outputs: d[1], weights: vals, bias });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|_| err("read failure"))?;
        if !rest.is_empty() {
            return Err(err("trailing bytes"));
        }
        Ok(Self { layers })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiply the learning rate by `lr_decay` every `lr_step_epochs` epochs.
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub hidden: usize,
    /// Where the size regularizer's per-class reference statistics come from.
    pub size_reference: SizeReferenceSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeReferenceSource {
    /// The class size priors.
    #[default]
    Priors,
    /// Statistics of held-out 3D labels, supplied with [`LearnedAnnotator::with_size_reference`].
    Labels,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-4,
            lr_decay: 0.1,
            lr_step_epochs: 20,
            weight_decay: 1e-4,
            batch_size: 32,
            hidden: 64,
            size_reference: SizeReferenceSource::Priors,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_step_epochs.max(1)) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss of every epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
    pub n_target: usize,
    pub n_injected: usize,
    /// Samples dropped because features or the 2D term could not be evaluated.
    pub n_skipped: usize,
    /// True iff some batch carried a 3D loss term.
    pub saw_3d_terms: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedAnnotator {
    pub mlp: Mlp,
    pub context: FeatureContext,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub report: Option<TrainReport>,
    /// Replaces the priors as size-regularizer reference; classes it lacks fall back to the priors.
    pub size_reference: Option<PriorTable>,
}

impl LearnedAnnotator {
    pub fn new(priors: &PriorTable, train: TrainConfig, loss: LossConfig, seed: u64) -> Self {
        let mlp = Mlp::new(&[FEATURE_DIM, train.hidden, train.hidden, OUTPUT_DIM], seed);
        Self { mlp, context: FeatureContext::from_priors(priors), train, loss, report: None, size_reference: None }
    }

    pub fn with_size_reference(mut self, table: PriorTable) -> Self {
        self.size_reference = Some(table);
        self
    }

    fn predict(&self, f: &FrustumFeatures, prior: &SizePrior) -> (Prediction, Vec<f64>) {
        let out = self.mlp.forward(&f.values);
        (decode_output(&out, f, prior), out)
    }
}

fn decode_output(out: &[f64], f: &FrustumFeatures, prior: &SizePrior) -> Prediction {
    let center = f.anchor + Vector3::new(out[OUT_CENTER], out[OUT_CENTER + 1], out[OUT_CENTER + 2]);
    let m = prior.mean;
    let size = Size3::new(m.h * out[OUT_SIZE].exp(), m.w * out[OUT_SIZE + 1].exp(), m.l * out[OUT_SIZE + 2].exp());
    let mut heading_logits = [0.0; NUM_HEADING_BINS];
    let mut heading_residuals = [0.0; NUM_HEADING_BINS];
    heading_logits.copy_from_slice(&out[OUT_LOGITS..OUT_RESIDUALS]);
    heading_residuals.copy_from_slice(&out[OUT_RESIDUALS..OUT_CLASS]);
    Prediction {
        box3d: Box3dPrediction { center, size, heading_logits, heading_residuals },
        class_logits: out[OUT_CLASS..OUTPUT_DIM].to_vec(),
    }
}

/// Gradient with respect to the raw network output.
fn output_grad(g: &PredictionGrad, pred: &Prediction) -> Vec<f64> {
    let mut d = vec![0.0; OUTPUT_DIM];
    let s = pred.box3d.size.as_array();
    for i in 0..3 {
        d[OUT_CENTER + i] = g.box3d.center[i];
        d[OUT_SIZE + i] = g.box3d.size[i] * s[i];
    }
    d[OUT_LOGITS..OUT_RESIDUALS].copy_from_slice(&g.box3d.heading_logits);
    d[OUT_RESIDUALS..OUT_CLASS].copy_from_slice(&g.box3d.heading_residuals);
    for (k, v) in g.class_logits.iter().enumerate().take(MAX_CLASSES) {
        d[OUT_CLASS + k] = *v;
    }
    d
}

struct Prepared {
    features: FrustumFeatures,
    prior: SizePrior,
    target: LossTarget,
}

/// Trains a fresh model with Adam on the mixed training set.
pub fn train_learned(
    samples: &[FrustumSample],
    priors: &PriorTable,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    seed_base: u64,
) -> Result<(LearnedAnnotator, TrainReport), AnnotatorError> {
    train_learned_with_reference(samples, priors, None, loss_cfg, cfg, seed_base)
}

pub fn train_learned_with_reference(
    samples: &[FrustumSample],
    priors: &PriorTable,
    size_reference: Option<&PriorTable>,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    seed_base: u64,
) -> Result<(LearnedAnnotator, TrainReport), AnnotatorError> {
    if samples.is_empty() {
        return Err(AnnotatorError::EmptyTrainingSet);
    }
    let mut model = LearnedAnnotator::new(priors, *cfg, *loss_cfg, seed::derive(seed_base, &[seed::purpose::TRAIN, 0]));
    let mut report = TrainReport::default();
    let mut prepared = Vec::with_capacity(samples.len());
    for s in samples {
        let prior = prior_for(priors, &s.weak.class_name)?;
        let class_index = model.context.class_index(&s.weak.class_name).unwrap_or(0);
        let Ok(features) = frustum_features(s, &prior, &model.context) else {
            report.n_skipped += 1;
            continue;
        };
        if s.is_injected() {
            report.n_injected += 1;
        } else {
            report.n_target += 1;
        }
        let target = LossTarget { supervision: s.supervision, camera: s.camera.clone(), box2d: s.weak.box2d, gt3d: s.gt3d, class_index };
        prepared.push(Prepared { features, prior, target });
    }
    if prepared.is_empty() {
        return Err(AnnotatorError::EmptyTrainingSet);
    }
    let references: Vec<SizeReference> = model
        .context
        .classes
        .iter()
        .take(MAX_CLASSES)
        .map(|c| {
            let p = size_reference.and_then(|t| t.get(c)).or_else(|| priors.get(c)).expect("context built from the table");
            SizeReference { mean: p.mean, std: p.std }
        })
        .collect();

    let n_params = model.mlp.num_params();
    let (mut m, mut v) = (vec![0.0; n_params], vec![0.0; n_params]);
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let mut rng = seed::rng(seed::derive(seed_base, &[seed::purpose::TRAIN, 1, epoch as u64]));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for chunk in order.chunks(batch) {
            let mut items = Vec::with_capacity(chunk.len());
            let mut acts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let p = &prepared[i];
                let a = model.mlp.forward_all(&p.features.values);
                let pred = decode_output(a.last().expect("output"), &p.features, &p.prior);
                items.push((p.target.clone(), pred));
                acts.push(a);
            }
            // drop samples whose 2D term cannot be evaluated (box behind the camera)
            let keep: Vec<usize> =
                (0..items.len()).filter(|&j| crate::losses::total_loss(&items[j].0, &items[j].1, loss_cfg).is_ok()).collect();
            report.n_skipped += items.len() - keep.len();
            if keep.is_empty() {
                continue;
            }
            let items: Vec<_> = keep.iter().map(|&j| items[j].clone()).collect();
            let (total, _, grads) = batch_loss(&items, &references, loss_cfg)?;
            if !total.total.is_finite() {
                return Err(AnnotatorError::NonFinite);
            }
            report.saw_3d_terms |= total.terms.contains_key("center");
            epoch_loss += total.total;
            epoch_count += items.len();
            let mut grad = vec![0.0; n_params];
            for (k, &j) in keep.iter().enumerate() {
                let dout = output_grad(&grads[k], &items[k].1);
                model.mlp.backward(&acts[j], &dout, &mut grad);
            }
            let scale = 1.0 / items.len() as f64;
            step += 1;
            let (c1, c2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
            for (((p, g), mi), vi) in model.mlp.params_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * scale + cfg.weight_decay * *p;
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        report.epoch_losses.push(if epoch_count > 0 { epoch_loss / epoch_count as f64 } else { f64::NAN });
    }
    model.report = Some(report.clone());
    Ok((model, report))
}

pub fn annotate_learned(model: &LearnedAnnotator, sample: &FrustumSample, priors: &PriorTable) -> Result<PseudoLabel, AnnotatorError> {
    let prior = prior_for(priors, &sample.weak.class_name)?;
    let f = frustum_features(sample, &prior, &model.context)?;
    let (pred, out) = model.predict(&f, &prior);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(AnnotatorError::NonFinite);
    }
    let b = pred.box3d.decode();
    let agreement = agreement_iou(&sample.camera, &b, &sample.weak.box2d);
    Ok(PseudoLabel { box3d: b, class_name: sample.weak.class_name.clone(), confidence: agreement, agreement_iou: agreement })
}

impl Annotator for LearnedAnnotator {
    fn name(&self) -> &'static str {
        "learned"
    }

    fn fit(&mut self, samples: &[FrustumSample], priors: &PriorTable, seed: u64) -> Result<(), AnnotatorError> {
        let (model, _) = train_learned_with_reference(samples, priors, self.size_reference.as_ref(), &self.loss, &self.train, seed)?;
        let reference = self.size_reference.take();
        *self = LearnedAnnotator { size_reference: reference, ..model };
        Ok(())
    }

    fn annotate(&self, sample: &FrustumSample, priors: &PriorTable) -> Result<PseudoLabel, AnnotatorError> {
        annotate_learned(self, sample, priors)
    }

    fn summary(&self) -> String {
        match &self.report {
            Some(r) => format!(
                "epochs={} final_loss={:.6} targets={} injected={} skipped={}",
                r.epoch_losses.len(),
                r.epoch_losses.last().copied().unwrap_or(f64::NAN),
                r.n_target,
                r.n_injected,
                r.n_skipped
            ),
            None => "untrained".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_matches_finite_differences() {
        let mut mlp = Mlp::new(&[5, 7, 3], 11);
        // move biases off zero so no ReLU sits at its kink
        for (i, p) in mlp.params_mut().enumerate() {
            *p += 0.01 * ((i % 5) as f64 - 2.0);
        }
        let x = [0.3, -0.2, 0.9, 0.1, -0.7];
        let dout = [0.5, -1.0, 2.0];
        let f = |m: &Mlp| m.forward(&x).iter().zip(&dout).map(|(a, b)| a * b).sum::<f64>();
        let mut grad = vec![0.0; mlp.num_params()];
        mlp.backward(&mlp.forward_all(&x), &dout, &mut grad);
        let base = mlp.params();
        for k in 0..base.len() {
            let mut hi = mlp.clone();
            let mut lo = mlp.clone();
            *hi.params_mut().nth(k).unwrap() += 1e-6;
            *lo.params_mut().nth(k).unwrap() -= 1e-6;
            let fd = (f(&hi) - f(&lo)) / 2e-6;
            assert!((fd - grad[k]).abs() < 1e-5 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn serialization_roundtrip_and_rejects_garbage() {
        let mlp = Mlp::new(&[4, 6, 2], 3);
        let mut bytes = Vec::new();
        mlp.write_to(&mut bytes).unwrap();
        let back = Mlp::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.dims(), vec![4, 6, 2]);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
        assert!(matches!(Mlp::read_from(&b"nonsense"[..]), Err(AnnotatorError::ModelFormat(_))));
        assert!(Mlp::read_from(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn schedule_decays_every_twenty_epochs() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate_at(0), 1e-4);
        assert_eq!(c.learning_rate_at(19), 1e-4);
        assert!((c.learning_rate_at(20) - 1e-5).abs() < 1e-20);
        assert!((c.learning_rate_at(45) - 1e-6).abs() < 1e-20);
    }
}
