//! Iterative pseudo-labeling: training-set assembly, trust filtering, catalog
//! upkeep, refinement and export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{Annotator, AnnotatorError, FrustumSample, PseudoLabel, SampleOrigin};
use crate::dataset::{Dataset, FrameData};
use crate::eval::mean_best_iou;
use crate::geometry::{project_box3d, Box2D};
use crate::kitti_io::{box3d_to_label, frame_stem, label_to_box3d, write_labels_with, LabelPrecision, LabelSource, WeakLabel};
use crate::proxy::{azimuth, build_proxy, crop_augment, inject_object, place_from_catalog, Catalog, CatalogEntry, CropConfig};
use crate::seed::{self, purpose};
use crate::weak_geometry::{cylinder_partition, estimate_depth, placement_center, PriorTable};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid iteration config: {0}")]
    InvalidConfig(String),
    #[error("annotator fit failed at stage {stage}: {source}")]
    Fit { stage: String, source: AnnotatorError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest serialization: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterationConfig {
    /// Number of pseudo-labeling iterations, counting iteration 0.
    pub n_iterations: usize,
    /// Per-iteration probability that an injection slot uses a catalog object.
    pub pseudo_mix: Vec<f64>,
    pub trust_iou: f64,
    pub detector_conf_threshold: f64,
    /// Run a final full-set pass after the last iteration.
    pub refinement: bool,
    pub azimuth_tol_deg: f64,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            n_iterations: 3,
            pseudo_mix: vec![0.0, 0.3, 0.3],
            trust_iou: 0.7,
            detector_conf_threshold: 0.95,
            refinement: true,
            azimuth_tol_deg: 5.0,
        }
    }
}

impl IterationConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.n_iterations == 0 {
            return bad("n_iterations must be at least 1");
        }
        if self.pseudo_mix.len() < self.n_iterations {
            return bad("pseudo_mix needs one entry per iteration");
        }
        if self.pseudo_mix.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("pseudo_mix entries must lie in [0, 1]");
        }
        if !(self.trust_iou >= 0.0) || !(0.0..=1.0).contains(&self.detector_conf_threshold) {
            return bad("trust_iou must be >= 0 and detector_conf_threshold in [0, 1]");
        }
        if !(self.azimuth_tol_deg >= 0.0) {
            return bad("azimuth_tol_deg must be non-negative");
        }
        Ok(())
    }
}

/// Drops labels whose confidence is below `threshold`; oracle labels always pass.
pub fn filter_detector_labels(labels: &[WeakLabel], threshold: f64) -> Vec<WeakLabel> {
    labels.iter().filter(|l| passes(l, threshold)).cloned().collect()
}

fn passes(l: &WeakLabel, threshold: f64) -> bool {
    l.source == LabelSource::Oracle || l.confidence >= threshold
}

/// The 2D boxes in force for one frame at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets {
    pub frame_id: u32,
    pub labels: Vec<WeakLabel>,
    /// False for frustums excluded from training by the confidence filter.
    pub in_training: Vec<bool>,
}

/// Iteration 0 uses the given boxes. Later iterations replace detector boxes by the
/// clamped projections of the previous pseudo-labels, where those exist.
pub fn stage_targets(frame: &FrameData, previous: Option<&FrameLabels>, threshold: f64) -> FrameTargets {
    let mut labels = frame.weak.clone();
    let in_training = frame.weak.iter().map(|l| passes(l, threshold)).collect();
    if let Some(prev) = previous {
        for (label, p) in labels.iter_mut().zip(&prev.labels) {
            if label.source != LabelSource::Detector {
                continue;
            }
            if let Some(b) = p.as_ref().and_then(|p| project_box3d(&frame.camera, &p.box3d, true).ok()) {
                if b.width() > 0.0 && b.height() > 0.0 {
                    label.box2d = b;
                }
            }
        }
    }
    FrameTargets { frame_id: frame.frame_id, labels, in_training }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingSetStats {
    pub targets: usize,
    pub excluded: usize,
    pub slots: usize,
    pub proxies: usize,
    /// Slots that drew the catalog branch.
    pub pseudo_requested: usize,
    pub pseudo_injected: usize,
    /// Catalog draws with no azimuth match, filled with a proxy.
    pub catalog_misses: usize,
    /// Pseudo injections kept uncropped because the crop removed too much.
    pub crop_fallbacks: usize,
    pub slot_failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub samples: Vec<FrustumSample>,
    pub stats: TrainingSetStats,
}

/// Everything that parameterizes one training-set build.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildParams<'a> {
    pub priors: &'a PriorTable,
    pub crop: CropConfig,
    pub pseudo_mix: f64,
    pub azimuth_tol: f64,
    pub stage: usize,
    pub seed: u64,
}

enum Slot {
    Proxy(FrustumSample),
    Pseudo { sample: FrustumSample, crop_fallback: bool },
    PseudoMiss(FrustumSample),
    Failed { pseudo_requested: bool },
}

fn injection_slot(frame: &FrameData, target: &FrustumSample, catalog: &Catalog, p: &BuildParams) -> Slot {
    let key = [frame.frame_id as u64, target.object_index as u64, p.stage as u64];
    let mut mix_rng = seed::rng(seed::derive(p.seed, &[purpose::MIX, key[0], key[1], key[2]]));
    let want_pseudo = p.pseudo_mix > 0.0 && mix_rng.gen_bool(p.pseudo_mix.min(1.0));
    let failed = Slot::Failed { pseudo_requested: want_pseudo };
    let Some(prior) = p.priors.get(&target.weak.class_name) else { return failed };
    let Ok(depth) = estimate_depth(&frame.camera, &target.weak.box2d, prior.mean.h) else { return failed };
    let Ok((removed_idx, _)) = cylinder_partition(&target.points, &frame.camera, &target.weak.box2d, depth.depth, prior.mean.l) else {
        return failed;
    };
    let removed = target.points.select(&removed_idx);
    let Ok(center) = placement_center(&removed, &frame.camera, &target.weak.box2d, depth.depth) else { return failed };
    // the whole sweep minus the object cylinder, so injected objects of any extent find their background
    let Ok((_, bg_idx)) = cylinder_partition(&frame.cloud, &frame.camera, &target.weak.box2d, depth.depth, prior.mean.l) else {
        return failed;
    };
    let background = frame.cloud.select(&bg_idx);

    let mut object = None;
    let mut missed = false;
    if want_pseudo {
        match place_from_catalog(
            catalog,
            &prior.class_name,
            azimuth(&center, &frame.sensor_origin),
            &center,
            &frame.sensor_origin,
            p.azimuth_tol,
            &mut mix_rng,
        ) {
            Ok(o) => object = Some(o),
            Err(_) => missed = true,
        }
    }
    let object = match object {
        Some(o) => o,
        None => {
            let proxy_seed = seed::derive(p.seed, &[purpose::PROXY_SIZE, key[0], key[1], key[2]]);
            match build_proxy(&prior, &frame.camera, &target.weak.box2d, &center, &frame.sensor_origin, proxy_seed) {
                Ok(o) => o,
                Err(_) => return failed,
            }
        }
    };
    let Ok(mut sample) = inject_object(&background, &object, &object.box3d.center, &frame.camera, &frame.sensor_origin) else {
        return failed;
    };
    sample.frame_id = frame.frame_id;
    sample.object_index = target.object_index;
    if sample.origin == SampleOrigin::Pseudo {
        let crop_seed = seed::derive(p.seed, &[purpose::CROP, key[0], key[1], key[2]]);
        return match crop_augment(&sample, crop_seed, &p.crop) {
            Ok(cropped) => Slot::Pseudo { sample: cropped, crop_fallback: false },
            Err(_) => Slot::Pseudo { sample, crop_fallback: true },
        };
    }
    if missed {
        Slot::PseudoMiss(sample)
    } else {
        Slot::Proxy(sample)
    }
}

/// Target frustums of every frame, in frame order.
pub fn target_samples(dataset: &Dataset, targets: &[FrameTargets]) -> Vec<Vec<Option<FrustumSample>>> {
    dataset
        .frames
        .par_iter()
        .zip(targets.par_iter())
        .map(|(f, t)| t.labels.iter().enumerate().map(|(i, l)| f.target_sample(i, l).ok()).collect())
        .collect()
}

/// Target samples for the frustums in training plus one injected sample per such frustum.
pub fn build_training_set(
    dataset: &Dataset,
    targets: &[FrameTargets],
    samples: &[Vec<Option<FrustumSample>>],
    catalog: &Catalog,
    params: &BuildParams,
) -> TrainingSet {
    let per_frame: Vec<(Vec<FrustumSample>, Vec<FrustumSample>, TrainingSetStats)> = dataset
        .frames
        .par_iter()
        .zip(targets.par_iter())
        .zip(samples.par_iter())
        .map(|((frame, t), frame_samples)| {
            let mut stats = TrainingSetStats::default();
            let mut tgt = Vec::new();
            let mut inj = Vec::new();
            for (i, s) in frame_samples.iter().enumerate() {
                if !t.in_training[i] {
                    stats.excluded += 1;
                    continue;
                }
                let Some(s) = s else {
                    stats.slot_failures += 1;
                    continue;
                };
                stats.targets += 1;
                tgt.push(s.clone());
                stats.slots += 1;
                match injection_slot(frame, s, catalog, params) {
                    Slot::Proxy(x) => {
                        stats.proxies += 1;
                        inj.push(x);
                    }
                    Slot::PseudoMiss(x) => {
                        stats.pseudo_requested += 1;
                        stats.catalog_misses += 1;
                        stats.proxies += 1;
                        inj.push(x);
                    }
                    Slot::Pseudo { sample, crop_fallback } => {
                        stats.pseudo_requested += 1;
                        stats.pseudo_injected += 1;
                        stats.crop_fallbacks += crop_fallback as usize;
                        inj.push(sample);
                    }
                    Slot::Failed { pseudo_requested } => {
                        stats.pseudo_requested += pseudo_requested as usize;
                        stats.slot_failures += 1;
                    }
                }
            }
            (tgt, inj, stats)
        })
        .collect();
    let mut out = TrainingSet { samples: Vec::new(), stats: TrainingSetStats::default() };
    let mut injected = Vec::new();
    for (tgt, inj, s) in per_frame {
        out.samples.extend(tgt);
        injected.extend(inj);
        let o = &mut out.stats;
        o.targets += s.targets;
        o.excluded += s.excluded;
        o.slots += s.slots;
        o.proxies += s.proxies;
        o.pseudo_requested += s.pseudo_requested;
        o.pseudo_injected += s.pseudo_injected;
        o.catalog_misses += s.catalog_misses;
        o.crop_fallbacks += s.crop_fallbacks;
        o.slot_failures += s.slot_failures;
    }
    out.samples.extend(injected);
    out
}

/// Pseudo-labels of one frame, indexed like its weak labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    pub frame_id: u32,
    pub labels: Vec<Option<PseudoLabel>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFailure {
    pub frame_id: u32,
    pub object_index: usize,
    pub message: String,
}

/// Annotates every target frustum; failures are recorded, never fatal.
pub fn annotate_all(
    annotator: &dyn Annotator,
    samples: &[Vec<Option<FrustumSample>>],
    dataset: &Dataset,
    priors: &PriorTable,
) -> (Vec<FrameLabels>, Vec<AnnotationFailure>) {
    let results: Vec<(FrameLabels, Vec<AnnotationFailure>)> = dataset
        .frames
        .par_iter()
        .zip(samples.par_iter())
        .map(|(frame, frame_samples)| {
            let mut failures = Vec::new();
            let labels = frame_samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let result = match s {
                        Some(s) => annotator.annotate(s, priors),
                        None => Err(AnnotatorError::EmptyFrustum),
                    };
                    result
                        .map_err(|e| failures.push(AnnotationFailure { frame_id: frame.frame_id, object_index: i, message: e.to_string() }))
                        .ok()
                })
                .collect();
            (FrameLabels { frame_id: frame.frame_id, labels }, failures)
        })
        .collect();
    let mut labels = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (l, f) in results {
        labels.push(l);
        failures.extend(f);
    }
    (labels, failures)
}

/// Catalog of pseudo-labels with `agreement_iou >= trust_iou`, with the frustum points inside each box.
pub fn build_catalog(
    labels: &[FrameLabels],
    samples: &[Vec<Option<FrustumSample>>],
    dataset: &Dataset,
    trust_iou: f64,
    stage: usize,
) -> Catalog {
    let mut entries = Vec::new();
    for ((fl, frame_samples), frame) in labels.iter().zip(samples).zip(&dataset.frames) {
        for (i, (label, sample)) in fl.labels.iter().zip(frame_samples).enumerate() {
            let (Some(label), Some(sample)) = (label, sample) else { continue };
            if label.agreement_iou < trust_iou {
                continue;
            }
            let inside: Vec<_> = sample.points.points.iter().filter(|p| label.box3d.contains(p, 0.0)).copied().collect();
            entries.push(CatalogEntry::new(
                label.box3d,
                &inside,
                label.class_name.clone(),
                &frame.sensor_origin,
                label.agreement_iou,
                (fl.frame_id, i, stage),
            ));
        }
    }
    Catalog { entries }
}

/// TOML integers are signed, so derived seeds are stored as hex strings.
mod hex_seed {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map_err(D::Error::custom)
    }
}

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub stage: usize,
    /// `iteration` or `refinement`.
    pub kind: String,
    pub pseudo_mix: f64,
    #[serde(with = "hex_seed")]
    pub build_seed: u64,
    #[serde(with = "hex_seed")]
    pub fit_seed: u64,
    pub training: TrainingSetStats,
    pub annotated: usize,
    pub failed: usize,
    pub trusted: usize,
    /// Catalog size after this stage.
    pub catalog: usize,
    /// Per class, counts of agreement IoU in ten equal bins over `[0, 1]`.
    pub agreement_histogram: BTreeMap<String, Vec<usize>>,
    /// Mean best 3D IoU against truth, when the dataset carries truth.
    pub truth_mean_iou: Option<f64>,
    pub annotator_note: String,
    pub failures: Vec<AnnotationFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    #[serde(with = "hex_seed")]
    pub seed: u64,
    pub annotator: String,
    pub frames: usize,
    pub objects: usize,
    pub trust_iou: f64,
    pub iterations: Vec<IterationRecord>,
}

impl IterationRecord {
    /// Single-line `key=value` summary, tab separated.
    pub fn summary_line(&self) -> String {
        let truth = self.truth_mean_iou.map(|v| format!("{v:.6}")).unwrap_or_else(|| "none".into());
        let t = &self.training;
        format!(
            "stage={}\tkind={}\tpseudo_mix={}\ttargets={}\texcluded={}\tproxies={}\tpseudo={}\tannotated={}\tfailed={}\ttrusted={}\ttruth_mean_iou={}",
            self.stage, self.kind, self.pseudo_mix, t.targets, t.excluded, t.proxies, t.pseudo_injected, self.annotated, self.failed, self.trusted, truth
        )
    }
}

impl RunManifest {
    pub fn to_toml(&self) -> Result<String, PipelineError> {
        toml::to_string(self).map_err(|e| PipelineError::Manifest(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Manifest(e.to_string()))
    }
}

/// One completed stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub targets: Vec<FrameTargets>,
    pub labels: Vec<FrameLabels>,
    pub catalog: Catalog,
    pub record: IterationRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub stages: Vec<StageOutput>,
    pub manifest: RunManifest,
}

impl PipelineOutput {
    pub fn final_labels(&self) -> &[FrameLabels] {
        &self.stages.last().expect("at least one stage").labels
    }
}

/// Inputs of [`run_pipeline`] other than the data and the annotator.
#[derive(Debug, Clone, PartialEq)]
pub struct RunParams<'a> {
    pub priors: &'a PriorTable,
    pub iteration: &'a IterationConfig,
    pub crop: CropConfig,
    pub seed: u64,
    pub config_hash: String,
}

/// One stage: build the training set, fit, annotate every target, refresh the catalog.
#[allow(clippy::too_many_arguments)]
pub fn run_iteration(
    dataset: &Dataset,
    annotator: &mut dyn Annotator,
    catalog: &Catalog,
    previous: Option<&[FrameLabels]>,
    stage: usize,
    pseudo_mix: f64,
    trust_iou: f64,
    params: &RunParams,
) -> Result<StageOutput, PipelineError> {
    let targets: Vec<FrameTargets> = dataset
        .frames
        .iter()
        .enumerate()
        .map(|(k, f)| stage_targets(f, previous.map(|p| &p[k]), params.iteration.detector_conf_threshold))
        .collect();
    let samples = target_samples(dataset, &targets);
    let build_seed = seed::derive(params.seed, &[purpose::MIX, stage as u64]);
    let fit_seed = seed::derive(params.seed, &[purpose::TRAIN, stage as u64]);
    let build = BuildParams {
        priors: params.priors,
        crop: params.crop,
        pseudo_mix,
        azimuth_tol: params.iteration.azimuth_tol_deg.to_radians(),
        stage,
        seed: build_seed,
    };
    let training = build_training_set(dataset, &targets, &samples, catalog, &build);
    annotator.fit(&training.samples, params.priors, fit_seed).map_err(|source| PipelineError::Fit { stage: stage.to_string(), source })?;
    let (labels, failures) = annotate_all(annotator, &samples, dataset, params.priors);
    let next_catalog = build_catalog(&labels, &samples, dataset, trust_iou, stage);

    let mut histogram: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut annotated = 0;
    for l in labels.iter().flat_map(|f| f.labels.iter().flatten()) {
        annotated += 1;
        let bin = ((l.agreement_iou * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histogram.entry(l.class_name.clone()).or_insert_with(|| vec![0; HISTOGRAM_BINS])[bin] += 1;
    }
    let record = IterationRecord {
        stage,
        kind: "iteration".into(),
        pseudo_mix,
        build_seed,
        fit_seed,
        training: training.stats,
        annotated,
        failed: failures.len(),
        trusted: next_catalog.len(),
        catalog: next_catalog.len(),
        agreement_histogram: histogram,
        truth_mean_iou: truth_iou(dataset, &labels),
        annotator_note: String::new(),
        failures,
    };
    Ok(StageOutput { targets, labels, catalog: next_catalog, record })
}

/// Mean best 3D IoU of the pseudo-labels against the truth of every frame, if all frames have truth.
pub fn truth_iou(dataset: &Dataset, labels: &[FrameLabels]) -> Option<f64> {
    let mut truth = Vec::new();
    let mut preds = Vec::new();
    for (frame, fl) in dataset.frames.iter().zip(labels) {
        let t = frame.truth.as_ref()?;
        truth.push(
            t.iter()
                .filter(|r| !r.is_dont_care())
                .filter_map(|r| label_to_box3d(r).ok().map(|b| (r.class_name.clone(), b)))
                .collect::<Vec<_>>(),
        );
        preds.push(fl.labels.iter().flatten().map(|l| (l.class_name.clone(), l.box3d)).collect::<Vec<_>>());
    }
    mean_best_iou(&truth, &preds)
}

/// Runs iterations `0..n_iterations` and, if enabled, the refinement pass.
///
/// Refinement fits once more with every slot drawing from a catalog of all
/// final pseudo-labels, trusted or not, then re-annotates the whole set.
pub fn run_pipeline(dataset: &Dataset, annotator: &mut dyn Annotator, params: &RunParams) -> Result<PipelineOutput, PipelineError> {
    run_pipeline_observed(dataset, annotator, params, &mut |_| {})
}

/// As [`run_pipeline`], calling `on_stage` as soon as each stage's record is final.
pub fn run_pipeline_observed(
    dataset: &Dataset,
    annotator: &mut dyn Annotator,
    params: &RunParams,
    on_stage: &mut dyn FnMut(&IterationRecord),
) -> Result<PipelineOutput, PipelineError> {
    let it = params.iteration;
    it.validate()?;
    let mut stages: Vec<StageOutput> = Vec::new();
    let mut catalog = Catalog::default();
    for k in 0..it.n_iterations {
        log::info!("stage {k}: catalog of {} objects", catalog.len());
        let prev = stages.last().map(|s| s.labels.as_slice());
        let mut out = run_iteration(dataset, annotator, &catalog, prev, k, it.pseudo_mix[k], it.trust_iou, params)?;
        out.record.annotator_note = annotator.summary();
        on_stage(&out.record);
        catalog = out.catalog.clone();
        stages.push(out);
    }
    if it.refinement {
        let k = it.n_iterations;
        let last = stages.last().expect("n_iterations >= 1");
        let everything =
            build_catalog(&last.labels, &target_samples(dataset, &last.targets), dataset, f64::NEG_INFINITY, last.record.stage);
        let prev = Some(last.labels.as_slice());
        let mut out = run_iteration(dataset, annotator, &everything, prev, k, 1.0, it.trust_iou, params)?;
        out.record.kind = "refinement".into();
        out.record.annotator_note = annotator.summary();
        on_stage(&out.record);
        stages.push(out);
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: params.config_hash.clone(),
        seed: params.seed,
        annotator: annotator.name().to_string(),
        frames: dataset.frames.len(),
        objects: dataset.num_objects(),
        trust_iou: it.trust_iou,
        iterations: stages.iter().map(|s| s.record.clone()).collect(),
    };
    Ok(PipelineOutput { stages, manifest })
}

/// KITTI label lines for one frame. The score column carries `agreement_iou`;
/// a label is trusted iff its score is at least the manifest's `trust_iou`.
pub fn export_frame_text(frame: &FrameData, labels: &FrameLabels) -> String {
    let records: Vec<_> = labels
        .labels
        .iter()
        .flatten()
        .map(|l| {
            let box2d = project_box3d(&frame.camera, &l.box3d, true)
                .ok()
                .filter(|b| b.width() > 0.0 && b.height() > 0.0)
                .unwrap_or(Box2D { x1: 0.0, y1: 0.0, x2: 0.0, y2: 0.0 });
            box3d_to_label(&l.box3d, &l.class_name, box2d, Some(l.agreement_iou))
        })
        .collect();
    write_labels_with(&records, LabelPrecision::default())
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| PipelineError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, text).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
}

/// Writes `label_2/<frame>.txt` for every frame (empty when nothing was annotated) and `manifest.toml`.
pub fn export(out_dir: &Path, dataset: &Dataset, labels: &[FrameLabels], manifest: &RunManifest) -> Result<(), PipelineError> {
    for (frame, fl) in dataset.frames.iter().zip(labels) {
        write(&out_dir.join("label_2").join(format!("{}.txt", frame_stem(frame.frame_id))), &export_frame_text(frame, fl))?;
    }
    write(&out_dir.join("manifest.toml"), &manifest.to_toml()?)
}
