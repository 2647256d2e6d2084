use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EpochLog, Optim, SgdMomentum, TrainLog};
use crate::autodiff::{DistanceMode, Graph};
use crate::confidence::{collect_errors, confidence_loss, Selection};
use crate::data::{sample_episode, Dataset, Episode};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dble, DbleEval};
use crate::exec::Exec;
use crate::metrics::CalibrationReport;
use crate::model::{ConfidenceConfig, DbleModel, EncoderConfig};
use crate::proto::{proto_loss, CenterSource, CenterTable};
use crate::rng::{RngStreams, DROPOUT, EPISODES, EPSILON, INIT_CONFIDENCE, INIT_ENCODER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbleTrainConfig {
    pub encoder: EncoderConfig,
    pub confidence: ConfidenceConfig,
    pub n_way: usize,
    pub shots: usize,
    pub queries: usize,
    pub epochs: usize,
    pub optim: Optim,
    pub mode: DistanceMode,
    pub selection: Selection,
    /// Monte Carlo samples for validation scoring.
    pub samples: usize,
    pub bins: usize,
}

impl DbleTrainConfig {
    pub fn mnist() -> Self {
        Self {
            encoder: EncoderConfig::mnist(),
            confidence: ConfidenceConfig::default(),
            n_way: 10,
            shots: 10,
            queries: 10,
            epochs: 30,
            optim: Optim::default(),
            mode: DistanceMode::Euclidean,
            selection: Selection::ErrorsOnly,
            samples: 20,
            bins: 15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.confidence.validate()?;
        self.optim.validate()?;
        for (name, v) in [
            ("n_way", self.n_way),
            ("shots", self.shots),
            ("queries", self.queries),
            ("epochs", self.epochs),
            ("samples", self.samples),
            ("bins", self.bins),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn episodes_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.n_way * (self.shots + self.queries))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub proto_loss: f64,
    pub confidence_loss: Option<f64>,
    pub errors: usize,
}

/// One update on `episode`: the encoder steps on the prototypical loss, and
/// the confidence head steps on the loss over the episode's selected queries
/// (skipped when there are none). The two losses live in separate graphs.
/// `UpdateStats::confidence_loss` is the per-sample mean; the gradient is
/// taken of the episode-normalized sum.
#[allow(clippy::too_many_arguments)]
pub fn dble_update<R: Rng>(
    model: &mut DbleModel,
    episode: &Episode,
    ds: &Dataset,
    opt_theta: &mut SgdMomentum,
    opt_phi: &mut SgdMomentum,
    mode: DistanceMode,
    selection: Selection,
    eps_rng: &mut R,
    dropout_rng: &mut R,
) -> Result<UpdateStats> {
    let mut g = Graph::new();
    let theta = g.bind(&model.theta);
    let fwd = proto_loss(&mut g, &model.encoder, &theta, episode, ds, mode)?;
    let proto = g.value(fwd.loss).data()[0];
    g.backward(fwd.loss)?;
    model.theta.accumulate_grads(&g, &theta)?;

    let centers = CenterTable::new(episode.classes.clone(), g.value(fwd.centers).clone(), CenterSource::Episode)?;
    let batch = collect_errors(g.value(fwd.queries), &episode.query_labels, &centers, selection)?;
    drop(g);

    let mut conf = None;
    if !batch.is_empty() {
        let mut g = Graph::new();
        let phi = g.bind(&model.phi);
        let loss = confidence_loss(&mut g, &model.confidence, &phi, &batch, mode, eps_rng, dropout_rng)?;
        conf = Some(g.value(loss).data()[0]);
        // Sum over the batch divided by the episode's query count, so the
        // step shrinks as errors become rare.
        let scaled = g.scale(loss, batch.len() as f64 / episode.query.len() as f64)?;
        g.backward(scaled)?;
        model.phi.accumulate_grads(&g, &phi)?;
    }

    opt_theta.step(&mut model.theta)?;
    if conf.is_some() {
        opt_phi.step(&mut model.phi)?;
    }
    Ok(UpdateStats {
        proto_loss: proto,
        confidence_loss: conf,
        errors: batch.len(),
    })
}

/// Episodic training with per-epoch validation. Parameters are rounded to
/// `f32` at the end so the returned model equals its checkpoint.
pub fn train_dble(
    train: &Dataset,
    val: &Dataset,
    cfg: &DbleTrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<(DbleModel, TrainLog)> {
    cfg.validate()?;
    if train.num_features() != cfg.encoder.input_dim {
        return Err(Error::Consistency(format!(
            "encoder expects {} features, data has {}",
            cfg.encoder.input_dim,
            train.num_features()
        )));
    }
    let start = Instant::now();
    let streams = RngStreams::new(seed);
    let mut model = DbleModel::init(
        cfg.encoder.clone(),
        cfg.confidence.clone(),
        &mut streams.stream(INIT_ENCODER),
        &mut streams.stream(INIT_CONFIDENCE),
    )?;
    let mut opt_theta = SgdMomentum::new(&model.theta, cfg.optim.lr, cfg.optim.momentum);
    let mut opt_phi = SgdMomentum::new(&model.phi, cfg.optim.lr, cfg.optim.momentum);
    let mut episode_rng = streams.stream(EPISODES);
    let mut eps_rng = streams.stream(EPSILON);
    let mut dropout_rng = streams.stream(DROPOUT);
    let per_epoch = cfg.episodes_per_epoch(train.len());
    let eval = DbleEval {
        samples: cfg.samples,
        mode: cfg.mode,
        seed,
        exec,
    };

    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.optim.schedule.lr(cfg.optim.lr, epoch, cfg.epochs);
        opt_theta.lr = lr;
        opt_phi.lr = lr;
        let mut loss_sum = 0.0;
        let mut errors = 0;
        for e in 0..per_epoch {
            let episode = sample_episode(train, cfg.n_way, cfg.shots, cfg.queries, &mut episode_rng)?;
            let stats = dble_update(
                &mut model,
                &episode,
                train,
                &mut opt_theta,
                &mut opt_phi,
                cfg.mode,
                cfg.selection,
                &mut eps_rng,
                &mut dropout_rng,
            )
            .map_err(|err| match err {
                Error::Numeric(m) => Error::Numeric(format!("seed {seed}, epoch {}, episode {e}: {m}", epoch + 1)),
                other => other,
            })?;
            loss_sum += stats.proto_loss;
            errors += stats.errors;
        }
        let records = evaluate_dble(&model, train, val, &eval)?;
        let report = CalibrationReport::from_records(&records, cfg.bins)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / per_epoch as f64,
            val_acc: report.accuracy,
            val_ece: report.ece,
            val_nll: report.nll,
            lr,
        };
        log::info!(
            "epoch {} loss {:.5} errors {} val acc {:.4} ece {:.4} nll {:.4} ({:.1}s)",
            entry.epoch,
            entry.train_loss,
            errors,
            entry.val_acc,
            entry.val_ece,
            entry.val_nll,
            start.elapsed().as_secs_f64()
        );
        log.epochs.push(entry);
    }
    if let Some(e) = log.converged_at() {
        log::info!("train loss converged at epoch {e}");
    }
    model.theta.round_to_f32();
    model.phi.round_to_f32();
    log.wall_secs = start.elapsed().as_secs_f64();
    Ok((model, log))
}
