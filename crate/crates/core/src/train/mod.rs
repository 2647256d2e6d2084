//! Training loops: episodic DBLE, the softmax baseline, and temperature
//! scaling.

mod dble;
mod optim;
mod temperature;
mod vanilla;

use serde::{Deserialize, Serialize};

pub use dble::{dble_update, train_dble, DbleTrainConfig, UpdateStats};
pub use optim::{Schedule, SgdMomentum};
pub use temperature::{fit_temperature, temperature_nll, Temperature};
pub use vanilla::{cross_entropy, train_vanilla, VanillaTrainConfig};

use crate::error::{Error, Result};

/// Train-loss change below this over [`CONVERGENCE_WINDOW`] epochs counts as
/// converged.
pub const CONVERGENCE_TOL: f64 = 1e-4;
pub const CONVERGENCE_WINDOW: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optim {
    pub lr: f64,
    pub momentum: f64,
    pub schedule: Schedule,
}

impl Default for Optim {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            schedule: Schedule::default(),
        }
    }
}

impl Optim {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter("momentum must be in [0, 1)".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_ece: f64,
    pub val_nll: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub wall_secs: f64,
}

impl TrainLog {
    /// First epoch (1-based) whose train loss is within
    /// [`CONVERGENCE_TOL`] of the value [`CONVERGENCE_WINDOW`] epochs earlier.
    pub fn converged_at(&self) -> Option<usize> {
        self.epochs
            .windows(CONVERGENCE_WINDOW + 1)
            .find(|w| (w[CONVERGENCE_WINDOW].train_loss - w[0].train_loss).abs() < CONVERGENCE_TOL)
            .map(|w| w[CONVERGENCE_WINDOW].epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_acc,val_ece,val_nll,lr\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_acc, e.val_ece, e.val_nll, e.lr
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(losses: &[f64]) -> TrainLog {
        TrainLog {
            epochs: losses
                .iter()
                .enumerate()
                .map(|(i, &l)| EpochLog {
                    epoch: i + 1,
                    train_loss: l,
                    val_acc: 0.0,
                    val_ece: 0.0,
                    val_nll: 0.0,
                    lr: 0.1,
                })
                .collect(),
            wall_secs: 0.0,
        }
    }

    #[test]
    fn convergence_indicator() {
        assert_eq!(log(&[1.0, 0.5, 0.3, 0.2, 0.2, 0.2, 0.2]).converged_at(), Some(7));
        assert_eq!(log(&[1.0, 0.5, 0.3]).converged_at(), None);
    }

    #[test]
    fn csv_header_and_rows() {
        let csv = log(&[0.5, 0.25]).to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,val_acc,val_ece,val_nll,lr");
        assert_eq!(lines[1], "1,0.5,0,0,0,0.1");
        assert_eq!(lines.len(), 3);
    }
}
