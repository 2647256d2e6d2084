//! Turns trained models into per-sample [`EvalRecord`]s.
//!
//! Scoring runs per test sample. Sample `i` draws its noise from substream
//! `i` of `eval.epsilon`, so results are identical for any thread count.

use crate::autodiff::DistanceMode;
use crate::confidence::score_embedding;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::EvalRecord;
use crate::model::{DbleModel, VanillaModel};
use crate::proto::{centers_from_embeddings, distance_to_center, embed_all, full_centers, predict, CenterTable, EMBED_CHUNK};
use crate::rng::{RngStreams, EVAL_EPSILON};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct DbleEval {
    pub samples: usize,
    pub mode: DistanceMode,
    pub seed: u64,
    pub exec: Exec,
}

fn check_width(what: &str, expected: usize, ds: &Dataset) -> Result<()> {
    if ds.num_features() != expected {
        return Err(Error::Consistency(format!(
            "{what} expects {expected} features, dataset has {}",
            ds.num_features()
        )));
    }
    Ok(())
}

/// Inference-mode sigma for each row, batched like the embeddings.
fn sigma_all(model: &DbleModel, h: &Tensor, exec: Exec) -> Result<Tensor> {
    let n = h.rows();
    let parts = exec.try_map(n.div_ceil(EMBED_CHUNK), |c| {
        model.sigma(&h.slice_rows(c * EMBED_CHUNK, ((c + 1) * EMBED_CHUNK).min(n))?)
    })?;
    Tensor::vstack(&parts)
}

/// Scores `test` against centers computed from `train`.
pub fn evaluate_dble(model: &DbleModel, train: &Dataset, test: &Dataset, opts: &DbleEval) -> Result<Vec<EvalRecord>> {
    check_width("model", model.encoder.input_dim, train)?;
    let centers = full_centers(&model.encoder, &model.theta, train, opts.exec)?;
    evaluate_dble_with(model, &centers, test, opts)
}

pub fn evaluate_dble_with(
    model: &DbleModel,
    centers: &CenterTable,
    test: &Dataset,
    opts: &DbleEval,
) -> Result<Vec<EvalRecord>> {
    check_width("model", model.encoder.input_dim, test)?;
    if test.num_classes() > centers.len() {
        return Err(Error::Consistency(format!(
            "test set has {} classes, model knows {}",
            test.num_classes(),
            centers.len()
        )));
    }
    let h = embed_all(&model.encoder, &model.theta, test.features(), opts.exec)?;
    let sigma = sigma_all(model, &h, opts.exec)?;
    let predicted = predict(&h, centers)?;
    let d_true = distance_to_center(&h, centers, test.labels())?;
    let d_pred = distance_to_center(&h, centers, &predicted)?;
    let streams = RngStreams::new(opts.seed);
    opts.exec.try_map(test.len(), |i| {
        let mut rng = streams.substream(EVAL_EPSILON, i as u64);
        let s = score_embedding(h.row(i), sigma.row(i), centers, opts.samples, opts.mode, &mut rng)?;
        debug_assert_eq!(s.predicted, predicted[i]);
        let sig = sigma.row(i);
        Ok(EvalRecord {
            label: test.labels()[i],
            predicted: s.predicted,
            confidence: s.confidence,
            distribution: s.distribution,
            d_true: d_true[i],
            d_pred: d_pred[i],
            sigma_mean: Some(sig.iter().sum::<f64>() / sig.len() as f64),
        })
    })
}

fn softmax_row(z: &[f64], t: f64) -> Vec<f64> {
    let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scaled.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = k;
        }
    }
    best
}

/// Logits for every row of `ds`.
pub fn vanilla_logits(model: &VanillaModel, ds: &Dataset, exec: Exec) -> Result<Tensor> {
    check_width("model", model.encoder.input_dim, ds)?;
    let h = embed_all(&model.encoder, &model.theta, ds.features(), exec)?;
    model.logits_from_embeddings(&h)
}

/// Max-softmax confidence at the model's temperature (1 when unset).
/// Distances are measured in the encoder's embedding space against centers
/// of `train`.
pub fn evaluate_vanilla(model: &VanillaModel, train: &Dataset, test: &Dataset, exec: Exec) -> Result<Vec<EvalRecord>> {
    check_width("model", model.encoder.input_dim, test)?;
    if test.num_classes() > model.num_classes {
        return Err(Error::Consistency(format!(
            "test set has {} classes, model has {}",
            test.num_classes(),
            model.num_classes
        )));
    }
    check_width("model", model.encoder.input_dim, train)?;
    let t = model.temperature.unwrap_or(1.0);
    let train_h = embed_all(&model.encoder, &model.theta, train.features(), exec)?;
    let centers = centers_from_embeddings(&train_h, train)?;
    let h = embed_all(&model.encoder, &model.theta, test.features(), exec)?;
    let logits = model.logits_from_embeddings(&h)?;
    let d_true = distance_to_center(&h, &centers, test.labels())?;
    let mut records = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let p = softmax_row(logits.row(i), t);
        let predicted = argmax(&p);
        let d_pred = distance_to_center(&h.slice_rows(i, i + 1)?, &centers, &[predicted])?[0];
        records.push(EvalRecord {
            label: test.labels()[i],
            predicted,
            confidence: p[predicted],
            distribution: p,
            d_true: d_true[i],
            d_pred,
            sigma_mean: None,
        });
    }
    Ok(records)
}
