//! Glue shared by the command-line tool and the C interface.

use std::path::Path;

use thiserror::Error;

use crate::annotator::{Annotator, DirectAnnotator, LearnedAnnotator, SizeReferenceSource};
use crate::config::{AnnotatorKind, Config, ConfigError};
use crate::dataset::{load_dataset, Dataset, DatasetError};
use crate::pipeline::{export, run_pipeline_observed, IterationRecord, PipelineError, PipelineOutput, RunParams};
use crate::synth::generate_corpus;
use crate::weak_geometry::PriorTable;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("train.size_reference = \"labels\" needs 3D labels, but frame {0} has none")]
    MissingLabels(u32),
}

/// The configured dataset, or the synthetic corpus when no root is set.
pub fn dataset_for(cfg: &Config) -> Result<Dataset, AppError> {
    Ok(match &cfg.dataset.root {
        Some(root) => load_dataset(root, cfg.dataset.label_mode)?,
        None => Dataset::from_synth(&generate_corpus(&cfg.synth, &cfg.priors), cfg.dataset.label_mode)?,
    })
}

pub fn build_annotator(cfg: &Config, dataset: &Dataset) -> Result<Box<dyn Annotator>, AppError> {
    Ok(match cfg.annotator_kind {
        AnnotatorKind::Direct => Box::new(DirectAnnotator::new(cfg.annotator, cfg.loss).with_calibration(cfg.calibration.clone())),
        AnnotatorKind::Learned => {
            let model = LearnedAnnotator::new(&cfg.priors, cfg.train, cfg.loss, cfg.seed);
            match cfg.train.size_reference {
                SizeReferenceSource::Priors => Box::new(model),
                SizeReferenceSource::Labels => Box::new(model.with_size_reference(label_size_table(dataset)?)),
            }
        }
    })
}

/// Size statistics of the dataset's 3D labels, the held-out reference of the size regularizer.
pub fn label_size_table(dataset: &Dataset) -> Result<PriorTable, AppError> {
    let mut sizes = Vec::new();
    for f in &dataset.frames {
        let truth = f.truth.as_ref().ok_or(AppError::MissingLabels(f.frame_id))?;
        sizes.extend(truth.iter().filter(|r| !r.is_dont_care()).map(|r| (r.class_name.as_str(), r.dimensions)));
    }
    Ok(PriorTable::from_sizes(sizes))
}

pub fn run_on(cfg: &Config, dataset: &Dataset, on_stage: &mut dyn FnMut(&IterationRecord)) -> Result<PipelineOutput, AppError> {
    cfg.validate()?;
    let mut annotator = build_annotator(cfg, dataset)?;
    let params = RunParams { priors: &cfg.priors, iteration: &cfg.iteration, crop: cfg.crop, seed: cfg.seed, config_hash: cfg.hash() };
    Ok(run_pipeline_observed(dataset, annotator.as_mut(), &params, on_stage)?)
}

/// Runs the pipeline and writes `label_2/` plus `manifest.toml` under `out_dir`.
pub fn run_to_dir(cfg: &Config, out_dir: &Path, on_stage: &mut dyn FnMut(&IterationRecord)) -> Result<PipelineOutput, AppError> {
    let dataset = dataset_for(cfg)?;
    let out = run_on(cfg, &dataset, on_stage)?;
    export(out_dir, &dataset, out.final_labels(), &out.manifest)?;
    Ok(out)
}
