//! Accuracy, attack success rate, and attention-similarity metrics.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{AttentionTensor, DistanceKind, ToyVlm};
use crate::purify::attention_distance;
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Exact-match accuracy of the model on a dataset, in [0, 100].
pub fn accuracy(model: &ToyVlm, dataset: &Dataset) -> Result<f64> {
    if dataset.samples.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let images: Vec<&Tensor> = dataset.samples.iter().map(|s| &s.image).collect();
    let preds = predictions(model, dataset, &images)?;
    let correct = preds
        .iter()
        .zip(&dataset.samples)
        .filter(|(p, s)| **p == s.answer_label)
        .count();
    Ok(100.0 * correct as f64 / dataset.samples.len() as f64)
}

/// Argmax predictions for per-sample replacement images aligned with the
/// dataset's questions.
pub fn predictions(
    model: &ToyVlm,
    dataset: &Dataset,
    images: &[&Tensor],
) -> Result<Vec<usize>> {
    if images.len() != dataset.samples.len() {
        return Err(Error::Config(format!(
            "{} images for {} samples",
            images.len(),
            dataset.samples.len()
        )));
    }
    dataset
        .samples
        .par_iter()
        .zip(images)
        .enumerate()
        .map(|(i, (sample, image))| {
            model
                .predict(image, &sample.question)
                .map_err(|e| Error::in_stage("predict", i, e))
        })
        .collect()
}

/// Per-sample (mse, kl) attention distances of replacement images against
/// the clean images' attention.
pub fn attention_metrics(
    model: &ToyVlm,
    dataset: &Dataset,
    images: &[&Tensor],
) -> Result<Vec<(f64, f64)>> {
    if images.len() != dataset.samples.len() {
        return Err(Error::Config(format!(
            "{} images for {} samples",
            images.len(),
            dataset.samples.len()
        )));
    }
    dataset
        .samples
        .par_iter()
        .zip(images)
        .enumerate()
        .map(|(i, (sample, image))| {
            (|| -> crate::error::Result<(f64, f64)> {
                let (_, a_clean) = model.forward(&sample.image, &sample.question)?;
                let (_, a) = model.forward(image, &sample.question)?;
                Ok((
                    attention_distance(&a_clean, &a, DistanceKind::Mse)?,
                    attention_distance(&a_clean, &a, DistanceKind::Kl)?,
                ))
            })()
            .map_err(|e| Error::in_stage("attention_metrics", i, e))
        })
        .collect()
}

/// One row of an attention-similarity table.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub label: String,
    pub mean_mse: f64,
    pub mean_kl: f64,
}

/// Mean attention distances of each variant set against the clean set.
/// Variant sets must be index-aligned with the clean dataset.
pub fn attention_report(
    model: &ToyVlm,
    clean: &Dataset,
    variant_sets: &[(String, Vec<&Tensor>)],
) -> Result<Vec<AttentionRow>> {
    let mut rows = Vec::with_capacity(variant_sets.len());
    for (label, images) in variant_sets {
        let metrics = attention_metrics(model, clean, images)?;
        let n = metrics.len() as f64;
        rows.push(AttentionRow {
            label: label.clone(),
            mean_mse: metrics.iter().map(|m| m.0).sum::<f64>() / n,
            mean_kl: metrics.iter().map(|m| m.1).sum::<f64>() / n,
        });
    }
    Ok(rows)
}

/// Attention of the model on one image, for heatmap export.
pub fn attention_of(model: &ToyVlm, dataset: &Dataset, index: usize, image: &Tensor) -> Result<AttentionTensor> {
    let sample = dataset
        .samples
        .get(index)
        .ok_or_else(|| Error::Config(format!("sample index {index} out of range")))?;
    let (_, a) = model.forward(image, &sample.question)?;
    Ok(a)
}
