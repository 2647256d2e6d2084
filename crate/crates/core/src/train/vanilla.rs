use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{EpochLog, Optim, SgdMomentum, TrainLog};
use crate::autodiff::{Graph, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::vanilla_logits;
use crate::exec::Exec;
use crate::metrics::{CalibrationReport, EvalRecord};
use crate::model::{encode, head_logits, EncoderConfig, VanillaModel};
use crate::rng::{RngStreams, INIT_ENCODER, INIT_HEAD, SHUFFLE};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanillaTrainConfig {
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: Optim,
    pub bins: usize,
}

impl VanillaTrainConfig {
    pub fn mnist() -> Self {
        Self {
            encoder: EncoderConfig::mnist(),
            epochs: 30,
            batch_size: 128,
            optim: Optim::default(),
            bins: 15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.optim.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.bins == 0 {
            return Err(Error::Parameter("epochs, batch_size and bins must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy of `logits` against `labels`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let lse = g.log_sum_exp(logits)?;
    let own = g.gather(logits, labels)?;
    let per = g.sub(lse, own)?;
    g.mean(per)
}

/// Max-softmax records without distance diagnostics, for per-epoch logging.
fn softmax_records(logits: &Tensor, labels: &[usize]) -> Vec<EvalRecord> {
    (0..logits.rows())
        .map(|i| {
            let z = logits.row(i);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let p: Vec<f64> = e.into_iter().map(|v| v / s).collect();
            let predicted = (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
            EvalRecord {
                label: labels[i],
                predicted,
                confidence: p[predicted],
                distribution: p,
                d_true: 0.0,
                d_pred: 0.0,
                sigma_mean: None,
            }
        })
        .collect()
}

/// Mini-batch softmax training of encoder plus linear head.
pub fn train_vanilla(
    train: &Dataset,
    val: &Dataset,
    cfg: &VanillaTrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<(VanillaModel, TrainLog)> {
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
    let mut model = VanillaModel::init(
        cfg.encoder.clone(),
        train.num_classes(),
        &mut streams.stream(INIT_ENCODER),
        &mut streams.stream(INIT_HEAD),
    )?;
    let mut opt_theta = SgdMomentum::new(&model.theta, cfg.optim.lr, cfg.optim.momentum);
    let mut opt_head = SgdMomentum::new(&model.head, cfg.optim.lr, cfg.optim.momentum);
    let mut shuffle_rng = streams.stream(SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.optim.schedule.lr(cfg.optim.lr, epoch, cfg.epochs);
        opt_theta.lr = lr;
        opt_head.lr = lr;
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let batches = order.chunks(cfg.batch_size);
        let n_batches = batches.len();
        for (b, rows) in batches.enumerate() {
            let x = train.features().select_rows(rows)?;
            let y: Vec<usize> = rows.iter().map(|&r| train.labels()[r]).collect();
            let mut g = Graph::new();
            let theta = g.bind(&model.theta);
            let head = g.bind(&model.head);
            let xv = g.constant(x);
            let h = encode(&mut g, &model.encoder, &theta, xv)?;
            let z = head_logits(&mut g, &head, h)?;
            let loss = cross_entropy(&mut g, z, &y)?;
            loss_sum += g.value(loss).data()[0];
            g.backward(loss).map_err(|err| match err {
                Error::Numeric(m) => Error::Numeric(format!("seed {seed}, epoch {}, batch {b}: {m}", epoch + 1)),
                other => other,
            })?;
            model.theta.accumulate_grads(&g, &theta)?;
            model.head.accumulate_grads(&g, &head)?;
            opt_theta.step(&mut model.theta)?;
            opt_head.step(&mut model.head)?;
        }
        let records = softmax_records(&vanilla_logits(&model, val, exec)?, val.labels());
        let report = CalibrationReport::from_records(&records, cfg.bins)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / n_batches as f64,
            val_acc: report.accuracy,
            val_ece: report.ece,
            val_nll: report.nll,
            lr,
        };
        log::info!(
            "epoch {} loss {:.5} val acc {:.4} ece {:.4} nll {:.4} ({:.1}s)",
            entry.epoch,
            entry.train_loss,
            entry.val_acc,
            entry.val_ece,
            entry.val_nll,
            start.elapsed().as_secs_f64()
        );
        log.epochs.push(entry);
    }
    model.theta.round_to_f32();
    model.head.round_to_f32();
    log.wall_secs = start.elapsed().as_secs_f64();
    Ok((model, log))
}
