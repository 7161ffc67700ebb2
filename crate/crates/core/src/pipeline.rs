//! End-to-end helpers: preprocess a manifest split, train, and score.
//!
//! Test cases are preprocessed with the statistics and target spacing fitted
//! on the training cases, and scored at the target spacing against their
//! reference labels resampled the same way.

use std::path::Path;

use rayon::prelude::*;

use crate::backbone::BackboneConfig;
use crate::dataset::{load_cases, Case, Preprocessing};
use crate::error::Result;
use crate::infer::{argmax_labels, predict_ensemble, SegmentationModel, SlidingWindowConfig};
use crate::metrics::{default_tau, evaluate_case, HecSpec, MetricReport};
use crate::synth::Manifest;
use crate::train::{EpochLog, TrainConfig, Trainer};
use crate::volume::Volume;

#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub preprocessing: Preprocessing,
    pub train: Vec<Case>,
    pub test: Vec<Case>,
}

pub fn prepare_split(manifest_path: &Path, num_classes: usize) -> Result<PreparedSplit> {
    let manifest = Manifest::load(manifest_path)?;
    let train_raw = load_cases(manifest_path, &manifest, &manifest.split.train)?;
    let test_raw = load_cases(manifest_path, &manifest, &manifest.split.test)?;
    let preprocessing = Preprocessing::fit(&train_raw)?;
    let apply = |raw: &[(Volume, Volume)]| -> Result<Vec<Case>> {
        raw.par_iter()
            .map(|(img, lab)| preprocessing.apply(img, lab, num_classes))
            .collect()
    };
    Ok(PreparedSplit {
        train: apply(&train_raw)?,
        test: apply(&test_raw)?,
        preprocessing,
    })
}

pub fn train_model(
    model_cfg: &BackboneConfig,
    train_cfg: &TrainConfig,
    cases: &[Case],
    on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<(Trainer, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(model_cfg, train_cfg.clone())?;
    let logs = trainer.train_until(cases, train_cfg.epochs, on_epoch)?;
    Ok((trainer, logs))
}

/// Predicted labels for one case from the mean probability of `models`.
pub fn segment<M: SegmentationModel>(models: &[M], case: &Case, swc: &SlidingWindowConfig) -> Result<Vec<u16>> {
    argmax_labels(&predict_ensemble(models, &case.image, swc)?)
}

/// Per-case reports and their aggregate. `tau` defaults to one voxel at the
/// finest spacing of each case.
pub fn evaluate_cases<M: SegmentationModel>(
    models: &[M],
    cases: &[Case],
    swc: &SlidingWindowConfig,
    num_classes: usize,
    hec: Option<&HecSpec>,
    tau: Option<f64>,
) -> Result<(Vec<MetricReport>, MetricReport)> {
    let reports = cases
        .iter()
        .map(|case| {
            let pred = Volume::labels(case.spatial, segment(models, case, swc)?, case.spacing)?;
            let gt = Volume::labels(case.spatial, case.labels.clone(), case.spacing)?;
            evaluate_case(&pred, &gt, num_classes, hec, tau.unwrap_or_else(|| default_tau(case.spacing)), case.spacing)
        })
        .collect::<Result<Vec<_>>>()?;
    let agg = MetricReport::aggregate(&reports);
    Ok((reports, agg))
}
