//! Flat `key = value` run configuration.
//!
//! Precedence is defaults, then a config file, then command-line flags. The
//! parser also accepts a JSON object with the same keys, so an emitted
//! `config.json` can be fed straight back in.

use std::path::{Path, PathBuf};

use crate::autodiff::DistanceMode;
use crate::confidence::Selection;
use crate::data::{BlobSpec, SplitSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{ConfidenceConfig, EncoderConfig};
use crate::train::{DbleTrainConfig, Optim, Schedule, VanillaTrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Blobs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Dble,
    Vanilla,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecKind {
    Parallel,
    Sequential,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub mnist_dir: PathBuf,
    pub val_fraction: f64,
    pub blobs_classes: usize,
    pub blobs_per_class: usize,
    pub blobs_dims: usize,
    pub blobs_spread: f64,
    pub blobs_separation: f64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub method: Method,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub conf_hidden: usize,
    pub dropout: f64,
    pub sigma_floor: f64,
    pub n_way: usize,
    pub shots: usize,
    pub queries: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub milestones: Vec<f64>,
    pub gamma: f64,
    pub batch_size: usize,
    pub temperature_scaling: bool,
    pub samples: usize,
    pub bins: usize,
    pub curve_bins: usize,
    pub distance: DistanceMode,
    pub ablation: Selection,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub exec: ExecKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            val_fraction: 0.1,
            blobs_classes: 10,
            blobs_per_class: 100,
            blobs_dims: 16,
            blobs_spread: 1.0,
            blobs_separation: 20.0,
            split_train: 0.6,
            split_val: 0.2,
            split_test: 0.2,
            method: Method::Dble,
            hidden_dims: vec![256, 128],
            embed_dim: 64,
            conf_hidden: 128,
            dropout: 0.5,
            sigma_floor: 1e-6,
            n_way: 10,
            shots: 10,
            queries: 10,
            epochs: 30,
            lr: 0.1,
            momentum: 0.9,
            milestones: vec![0.6, 0.8],
            gamma: 0.1,
            batch_size: 128,
            temperature_scaling: false,
            samples: 20,
            bins: 15,
            curve_bins: 20,
            distance: DistanceMode::Euclidean,
            ablation: Selection::ErrorsOnly,
            seed: 0,
            out_dir: PathBuf::from("out"),
            exec: ExecKind::Parallel,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::config(key, format!("cannot parse {value:?}: {e}")))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn choice<T>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T>
where
    T: Copy,
{
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<_> = options.iter().map(|(n, _)| *n).collect();
            Error::config(key, format!("expected one of {}, got {value:?}", names.join("|")))
        })
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "dataset",
        "mnist_dir",
        "val_fraction",
        "blobs_classes",
        "blobs_per_class",
        "blobs_dims",
        "blobs_spread",
        "blobs_separation",
        "split_train",
        "split_val",
        "split_test",
        "method",
        "hidden_dims",
        "embed_dim",
        "conf_hidden",
        "dropout",
        "sigma_floor",
        "n_way",
        "shots",
        "queries",
        "epochs",
        "lr",
        "momentum",
        "milestones",
        "gamma",
        "batch_size",
        "temperature_scaling",
        "samples",
        "bins",
        "curve_bins",
        "distance",
        "ablation",
        "seed",
        "out_dir",
        "exec",
    ];

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = choice(key, v, &[("mnist", DatasetKind::Mnist), ("blobs", DatasetKind::Blobs)])?,
            "mnist_dir" => self.mnist_dir = PathBuf::from(v),
            "val_fraction" => self.val_fraction = num(key, v)?,
            "blobs_classes" => self.blobs_classes = num(key, v)?,
            "blobs_per_class" => self.blobs_per_class = num(key, v)?,
            "blobs_dims" => self.blobs_dims = num(key, v)?,
            "blobs_spread" => self.blobs_spread = num(key, v)?,
            "blobs_separation" => self.blobs_separation = num(key, v)?,
            "split_train" => self.split_train = num(key, v)?,
            "split_val" => self.split_val = num(key, v)?,
            "split_test" => self.split_test = num(key, v)?,
            "method" => self.method = choice(key, v, &[("dble", Method::Dble), ("vanilla", Method::Vanilla)])?,
            "hidden_dims" => self.hidden_dims = list(key, v)?,
            "embed_dim" => self.embed_dim = num(key, v)?,
            "conf_hidden" => self.conf_hidden = num(key, v)?,
            "dropout" => self.dropout = num(key, v)?,
            "sigma_floor" => self.sigma_floor = num(key, v)?,
            "n_way" => self.n_way = num(key, v)?,
            "shots" => self.shots = num(key, v)?,
            "queries" => self.queries = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "milestones" => self.milestones = list(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "temperature_scaling" => self.temperature_scaling = num(key, v)?,
            "samples" => self.samples = num(key, v)?,
            "bins" => self.bins = num(key, v)?,
            "curve_bins" => self.curve_bins = num(key, v)?,
            "distance" => {
                self.distance = choice(key, v, &[("euclidean", DistanceMode::Euclidean), ("squared", DistanceMode::Squared)])?
            }
            "ablation" => {
                self.ablation = choice(
                    key,
                    v,
                    &[("errors_only", Selection::ErrorsOnly), ("all_samples", Selection::AllSamples)],
                )?
            }
            "seed" => self.seed = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "exec" => self.exec = choice(key, v, &[("parallel", ExecKind::Parallel), ("sequential", ExecKind::Sequential)])?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Every field in [`RunConfig::KEYS`] order, in the form `set` accepts.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let value = |key: &str| -> String {
            match key {
                "dataset" => match self.dataset {
                    DatasetKind::Mnist => "mnist".into(),
                    DatasetKind::Blobs => "blobs".into(),
                },
                "mnist_dir" => self.mnist_dir.display().to_string(),
                "val_fraction" => self.val_fraction.to_string(),
                "blobs_classes" => self.blobs_classes.to_string(),
                "blobs_per_class" => self.blobs_per_class.to_string(),
                "blobs_dims" => self.blobs_dims.to_string(),
                "blobs_spread" => self.blobs_spread.to_string(),
                "blobs_separation" => self.blobs_separation.to_string(),
                "split_train" => self.split_train.to_string(),
                "split_val" => self.split_val.to_string(),
                "split_test" => self.split_test.to_string(),
                "method" => match self.method {
                    Method::Dble => "dble".into(),
                    Method::Vanilla => "vanilla".into(),
                },
                "hidden_dims" => join(&self.hidden_dims),
                "embed_dim" => self.embed_dim.to_string(),
                "conf_hidden" => self.conf_hidden.to_string(),
                "dropout" => self.dropout.to_string(),
                "sigma_floor" => self.sigma_floor.to_string(),
                "n_way" => self.n_way.to_string(),
                "shots" => self.shots.to_string(),
                "queries" => self.queries.to_string(),
                "epochs" => self.epochs.to_string(),
                "lr" => self.lr.to_string(),
                "momentum" => self.momentum.to_string(),
                "milestones" => join(&self.milestones),
                "gamma" => self.gamma.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "temperature_scaling" => self.temperature_scaling.to_string(),
                "samples" => self.samples.to_string(),
                "bins" => self.bins.to_string(),
                "curve_bins" => self.curve_bins.to_string(),
                "distance" => self.distance.as_str().into(),
                "ablation" => self.ablation.as_str().into(),
                "seed" => self.seed.to_string(),
                "out_dir" => self.out_dir.display().to_string(),
                "exec" => match self.exec {
                    ExecKind::Parallel => "parallel".into(),
                    ExecKind::Sequential => "sequential".into(),
                },
                _ => unreachable!("key list and match agree"),
            }
        };
        Self::KEYS.iter().map(|&k| (k, value(k))).collect()
    }

    /// Applies `key = value` lines (or a JSON object) on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        if text.trim_start().starts_with('{') {
            let mut obj: serde_json::Map<String, serde_json::Value> =
                serde_json::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
            // Emitted config.json and report.json nest the keys under "config".
            if let Some(serde_json::Value::Object(inner)) = obj.remove("config") {
                obj = inner;
            }
            for (k, v) in obj {
                let s = match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Array(items) => items
                        .iter()
                        .map(|i| i.as_str().map(str::to_string).unwrap_or_else(|| i.to_string()))
                        .collect::<Vec<_>>()
                        .join(","),
                    other => other.to_string(),
                };
                self.set(&k, &s)?;
            }
            return Ok(());
        }
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(&format!("line {}", n + 1), format!("expected key = value, got {raw:?}")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| match Error::io(path, e) {
            Error::FileNotFound(p) => Error::config("config", format!("file not found: {}", p.display())),
            other => other,
        })?;
        self.apply_text(&text)
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.pairs()
                .into_iter()
                .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
                .collect(),
        )
    }

    /// [`RunConfig::to_json`] without where output goes or how many threads
    /// run; embedded in checkpoints and reports so those depend only on the
    /// experiment.
    pub fn provenance_json(&self) -> serde_json::Value {
        let mut v = self.to_json();
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
            obj.remove("exec");
        }
        v
    }

    /// Rebuilds a config from [`RunConfig::to_json`] output.
    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&value.to_string())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blobs_classes", self.blobs_classes),
            ("blobs_per_class", self.blobs_per_class),
            ("blobs_dims", self.blobs_dims),
            ("embed_dim", self.embed_dim),
            ("conf_hidden", self.conf_hidden),
            ("n_way", self.n_way),
            ("shots", self.shots),
            ("queries", self.queries),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("samples", self.samples),
            ("bins", self.bins),
            ("curve_bins", self.curve_bins),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be at least 1"));
            }
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden_dims", "layer widths must be at least 1"));
        }
        let fractions = [
            ("val_fraction", self.val_fraction),
            ("split_train", self.split_train),
            ("split_val", self.split_val),
            ("split_test", self.split_test),
        ];
        for (k, v) in fractions {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(k, format!("must be in (0, 1), got {v}")));
            }
        }
        if ((self.split_train + self.split_val + self.split_test) - 1.0).abs() > 1e-9 {
            return Err(Error::config("split_train", "split fractions must sum to 1"));
        }
        let pos_real = [
            ("blobs_spread", self.blobs_spread),
            ("blobs_separation", self.blobs_separation),
            ("sigma_floor", self.sigma_floor),
            ("lr", self.lr),
            ("gamma", self.gamma),
        ];
        for (k, v) in pos_real {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(k, format!("must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::config("milestones", "must be fractions in [0, 1]"));
        }
        if self.dataset == DatasetKind::Blobs && self.n_way > self.blobs_classes {
            return Err(Error::config("n_way", "exceeds blobs_classes"));
        }
        #[cfg(not(feature = "parallel"))]
        if self.exec == ExecKind::Parallel {
            log::warn!("built without the `parallel` feature; running sequentially");
        }
        Ok(())
    }

    pub fn exec(&self) -> Exec {
        match self.exec {
            ExecKind::Sequential => Exec::Sequential,
            ExecKind::Parallel => Exec::default(),
        }
    }

    pub fn blob_spec(&self) -> BlobSpec {
        BlobSpec {
            classes: self.blobs_classes,
            per_class: self.blobs_per_class,
            dims: self.blobs_dims,
            spread: self.blobs_spread,
            separation: self.blobs_separation,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.split_train,
            validation: self.split_val,
            test: self.split_test,
            seed: self.seed,
        }
    }

    pub fn encoder(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            embed_dim: self.embed_dim,
        }
    }

    pub fn optim(&self) -> Optim {
        Optim {
            lr: self.lr,
            momentum: self.momentum,
            schedule: Schedule {
                milestones: self.milestones.clone(),
                gamma: self.gamma,
            },
        }
    }

    pub fn dble_config(&self, input_dim: usize) -> DbleTrainConfig {
        DbleTrainConfig {
            encoder: self.encoder(input_dim),
            confidence: ConfidenceConfig {
                hidden_dim: self.conf_hidden,
                dropout_rate: self.dropout,
                sigma_floor: self.sigma_floor,
            },
            n_way: self.n_way,
            shots: self.shots,
            queries: self.queries,
            epochs: self.epochs,
            optim: self.optim(),
            mode: self.distance,
            selection: self.ablation,
            samples: self.samples,
            bins: self.bins,
        }
    }

    pub fn vanilla_config(&self, input_dim: usize) -> VanillaTrainConfig {
        VanillaTrainConfig {
            encoder: self.encoder(input_dim),
            epochs: self.epochs,
            batch_size: self.batch_size,
            optim: self.optim(),
            bins: self.bins,
        }
    }
}
