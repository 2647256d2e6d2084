use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DatasetKind, Method, RunConfig};
use crate::confidence::Selection;
use crate::data::{holdout, load_idx, make_blobs, split, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dble, evaluate_vanilla, vanilla_logits, DbleEval};
use crate::metrics::{accuracy_by_distance, CalibrationReport, CurvePoint, DistanceKind, EvalRecord, SigmaStats};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, DbleModel, SavedModel, TrainingMeta, VanillaModel, FORMAT_VERSION};
use crate::rng::{RngStreams, BLOBS};
use crate::train::{fit_temperature, temperature_nll, train_dble, train_vanilla, TrainLog};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RECORDS_HEADER: &str = "y_t,y_prime_t,confidence,p_y_t,d_t,d_prime_t,sigma_mean";
pub const CURVE_HEADER: &str = "bin_center,accuracy,count";

const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Train, validation and test parts of one configured dataset.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Hash of the three part fingerprints.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for ds in [&self.train, &self.val, &self.test] {
            h.update(ds.fingerprint().as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Finds `name` or `name.gz` inside `dir`.
fn mnist_file(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(Error::FileNotFound(plain))
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    match cfg.dataset {
        DatasetKind::Mnist => {
            let paths = MNIST_FILES
                .iter()
                .map(|n| mnist_file(&cfg.mnist_dir, n))
                .collect::<Result<Vec<_>>>()?;
            let full = load_idx(&paths[0], &paths[1])?;
            let test = load_idx(&paths[2], &paths[3])?;
            let (train, val) = holdout(&full, cfg.val_fraction, cfg.seed)?;
            log::info!("mnist: {} train, {} val, {} test", train.len(), val.len(), test.len());
            Ok(Splits { train, val, test })
        }
        DatasetKind::Blobs => {
            let ds = make_blobs(&cfg.blob_spec(), &mut RngStreams::new(cfg.seed).stream(BLOBS))?;
            let (train, val, test) = split(&ds, &cfg.split_spec())?;
            Ok(Splits { train, val, test })
        }
    }
}

/// Output failures are runtime errors even when a directory is missing.
fn output_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| output_error(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| output_error(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, s.as_bytes())
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| output_error(&cfg.out_dir, e))
}

fn write_config(cfg: &RunConfig) -> Result<()> {
    write_json(
        &cfg.out_dir.join("config.json"),
        &serde_json::json!({ "format_version": FORMAT_VERSION, "config": cfg.to_json() }),
    )
}

pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut s = format!("{RECORDS_HEADER}\n");
    for r in records {
        let sigma = r.sigma_mean.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label,
            r.predicted,
            r.confidence,
            r.p_true(),
            r.d_true,
            r.d_pred,
            sigma
        ));
    }
    s
}

/// `(distance, correct)` pairs read from a records file.
pub fn read_curve_samples(text: &str, which: DistanceKind) -> Result<Vec<(f64, bool)>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format("records file is empty".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Format(format!("records file has no `{name}` column")))
    };
    let dist_name = match which {
        DistanceKind::DTrue => "d_t",
        DistanceKind::DPred => "d_prime_t",
    };
    let (cy, cp, cd) = (col("y_t")?, col("y_prime_t")?, col(dist_name)?);
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        let get = |c: usize| {
            fields
                .get(c)
                .map(|f| f.trim())
                .ok_or_else(|| Error::Format(format!("row {} is short", n + 2)))
        };
        let parse = |c: usize| -> Result<f64> {
            let f = get(c)?;
            f.parse().map_err(|_| Error::Format(format!("row {}: bad number {f:?}", n + 2)))
        };
        out.push((parse(cd)?, get(cy)? == get(cp)?));
    }
    Ok(out)
}

pub fn curve_to_csv(points: &[CurvePoint]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.bin_center, p.accuracy, p.count));
    }
    s
}

fn check_input_dim(expected: usize, splits: &Splits) -> Result<()> {
    if splits.train.num_features() != expected {
        return Err(Error::Consistency(format!(
            "checkpoint expects {expected} input features, dataset has {}",
            splits.train.num_features()
        )));
    }
    Ok(())
}

fn metrics_map(prefix: &str, r: &CalibrationReport) -> BTreeMap<String, f64> {
    BTreeMap::from([
        (format!("{prefix}_accuracy"), r.accuracy),
        (format!("{prefix}_ece"), r.ece),
        (format!("{prefix}_nll"), r.nll),
    ])
}

/// Evaluates any saved model on the test split of `splits`.
pub fn evaluate_model(model: &SavedModel, splits: &Splits, cfg: &RunConfig) -> Result<Vec<EvalRecord>> {
    check_input_dim(model.encoder().input_dim, splits)?;
    match model {
        SavedModel::Dble(m) => evaluate_dble(m, &splits.train, &splits.test, &dble_eval(cfg)),
        SavedModel::Vanilla(m) => evaluate_vanilla(m, &splits.train, &splits.test, cfg.exec()),
    }
}

fn dble_eval(cfg: &RunConfig) -> DbleEval {
    DbleEval {
        samples: cfg.samples,
        mode: cfg.distance,
        seed: cfg.seed,
        exec: cfg.exec(),
    }
}

/// Fits a temperature on validation logits and reports validation NLL and
/// accuracy before and after.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub val_nll_before: f64,
    pub val_nll_after: f64,
    pub val_accuracy_before: f64,
    pub val_accuracy_after: f64,
}

fn argmax_accuracy(logits: &crate::Tensor, labels: &[usize], t: f64) -> f64 {
    let hits = (0..logits.rows())
        .filter(|&i| {
            let row: Vec<f64> = logits.row(i).iter().map(|v| v / t).collect();
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            best == labels[i]
        })
        .count();
    hits as f64 / labels.len() as f64
}

pub fn fit_vanilla_temperature(model: &mut VanillaModel, val: &Dataset, cfg: &RunConfig) -> Result<TemperatureFit> {
    let logits = vanilla_logits(model, val, cfg.exec())?;
    let t = fit_temperature(&logits, val.labels())?.value();
    model.temperature = Some(t);
    Ok(TemperatureFit {
        temperature: t,
        val_nll_before: temperature_nll(&logits, val.labels(), 1.0),
        val_nll_after: temperature_nll(&logits, val.labels(), t),
        val_accuracy_before: argmax_accuracy(&logits, val.labels(), 1.0),
        val_accuracy_after: argmax_accuracy(&logits, val.labels(), t),
    })
}

/// Result of [`run_train`].
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub test_records: Vec<EvalRecord>,
    pub test_report: CalibrationReport,
}

/// Trains the configured method and scores it on the test split.
pub fn run_train(cfg: &RunConfig, splits: &Splits) -> Result<TrainOutcome> {
    let dim = splits.train.num_features();
    let (mut model, log) = match cfg.method {
        Method::Dble => {
            let (m, log) = train_dble(&splits.train, &splits.val, &cfg.dble_config(dim), cfg.seed, cfg.exec())?;
            (SavedModel::Dble(m), log)
        }
        Method::Vanilla => {
            let (m, log) = train_vanilla(&splits.train, &splits.val, &cfg.vanilla_config(dim), cfg.seed, cfg.exec())?;
            (SavedModel::Vanilla(m), log)
        }
    };
    if let (SavedModel::Vanilla(m), true) = (&mut model, cfg.temperature_scaling) {
        let fit = fit_vanilla_temperature(m, &splits.val, cfg)?;
        log::info!("temperature {:.4}: val nll {:.5} -> {:.5}", fit.temperature, fit.val_nll_before, fit.val_nll_after);
    }
    let test_records = evaluate_model(&model, splits, cfg)?;
    let test_report = CalibrationReport::from_records(&test_records, cfg.bins)?;
    let checkpoint = Checkpoint {
        model,
        training: TrainingMeta {
            epochs: cfg.epochs,
            seed: cfg.seed,
            final_metrics: metrics_map("test", &test_report),
            config: cfg.provenance_json(),
        },
    };
    Ok(TrainOutcome {
        checkpoint,
        log,
        test_records,
        test_report,
    })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    RngStreams::new(cfg.seed).log_streams();
    let splits = load_splits(cfg)?;
    let out = run_train(cfg, &splits)?;
    ensure_out_dir(cfg)?;
    save_checkpoint(cfg.out_dir.join(CHECKPOINT_FILE), &out.checkpoint)?;
    write(&cfg.out_dir.join("trainlog.csv"), out.log.to_csv().as_bytes())?;
    write_config(cfg)?;
    log::info!(
        "test accuracy {:.4} ece {:.4} nll {:.4}; wrote {}",
        out.test_report.accuracy,
        out.test_report.ece,
        out.test_report.nll,
        cfg.out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct Report<'a> {
    format_version: u32,
    method: &'a str,
    n: usize,
    accuracy: f64,
    ece: f64,
    nll: f64,
    #[serde(rename = "U")]
    samples: usize,
    #[serde(rename = "L")]
    bins: usize,
    seed: u64,
    temperature: Option<f64>,
    data_fingerprint: String,
    reliability: &'a [crate::metrics::BinStats],
    config: serde_json::Value,
}

/// Base configuration for evaluating `checkpoint`: the config it was trained
/// with, overlaid by `overrides`.
pub fn config_for_checkpoint(checkpoint: &Checkpoint, overrides: impl FnOnce(&mut RunConfig) -> Result<()>) -> Result<RunConfig> {
    let mut cfg = if checkpoint.training.config.is_object() {
        RunConfig::from_json(&checkpoint.training.config)?
    } else {
        RunConfig::default()
    };
    overrides(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_evaluate(checkpoint_path: &Path, overrides: impl FnOnce(&mut RunConfig) -> Result<()>) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let cfg = config_for_checkpoint(&ckpt, overrides)?;
    let splits = load_splits(&cfg)?;
    let records = evaluate_model(&ckpt.model, &splits, &cfg)?;
    let report = CalibrationReport::from_records(&records, cfg.bins)?;
    let (method, temperature) = match &ckpt.model {
        SavedModel::Dble(_) => ("dble", None),
        SavedModel::Vanilla(m) => ("vanilla", m.temperature),
    };
    write(&cfg.out_dir.join("records.csv"), records_to_csv(&records).as_bytes())?;
    write_json(
        &cfg.out_dir.join("report.json"),
        &Report {
            format_version: FORMAT_VERSION,
            method,
            n: report.n,
            accuracy: report.accuracy,
            ece: report.ece,
            nll: report.nll,
            samples: cfg.samples,
            bins: cfg.bins,
            seed: cfg.seed,
            temperature,
            data_fingerprint: splits.fingerprint(),
            reliability: &report.bins,
            config: cfg.provenance_json(),
        },
    )?;
    log::info!(
        "accuracy {:.4} ece {:.4} nll {:.4}; wrote {}",
        report.accuracy,
        report.ece,
        report.nll,
        cfg.out_dir.display()
    );
    Ok(())
}

pub fn cmd_curve(records: &Path, which: DistanceKind, bins: usize, out: &Path) -> Result<()> {
    if bins == 0 {
        return Err(Error::config("bins", "must be at least 1"));
    }
    let text = std::fs::read_to_string(records).map_err(|e| Error::io(records, e))?;
    let points = accuracy_by_distance(&read_curve_samples(&text, which)?, bins)?;
    write(out, curve_to_csv(&points).as_bytes())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SigmaSummary {
    #[serde(flatten)]
    pub stats: SigmaStats,
    /// Mean per-sample sigma over misclassified and correctly classified
    /// test samples.
    pub mean_errors: Option<f64>,
    pub mean_correct: Option<f64>,
}

impl SigmaSummary {
    fn from_records(records: &[EvalRecord]) -> Result<Option<Self>> {
        let means: Option<Vec<f64>> = records.iter().map(|r| r.sigma_mean).collect();
        let Some(means) = means else { return Ok(None) };
        let avg = |keep: bool| {
            let v: Vec<f64> = records
                .iter()
                .filter(|r| r.correct() == keep)
                .filter_map(|r| r.sigma_mean)
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Ok(Some(Self {
            stats: SigmaStats::from_sample_means(&means)?,
            mean_errors: avg(false),
            mean_correct: avg(true),
        }))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
    pub data_fingerprint: String,
    pub sigma: Option<SigmaSummary>,
    pub temperature: Option<TemperatureFit>,
    pub train_secs: f64,
}

/// Everything one ablation produced, including per-arm test records.
pub struct Ablation {
    pub arms: Vec<ArmSummary>,
    pub records: BTreeMap<String, Vec<EvalRecord>>,
    pub logs: BTreeMap<String, TrainLog>,
    pub dble_models: BTreeMap<String, DbleModel>,
}

pub const ARM_ERRORS_ONLY: &str = "dble_errors_only";
pub const ARM_ALL_SAMPLES: &str = "dble_all_samples";
pub const ARM_VANILLA: &str = "vanilla";
pub const ARM_TEMPERATURE: &str = "vanilla_temperature_scaled";

fn arm(name: &str, records: &[EvalRecord], splits: &Splits, cfg: &RunConfig, secs: f64) -> Result<ArmSummary> {
    let r = CalibrationReport::from_records(records, cfg.bins)?;
    Ok(ArmSummary {
        name: name.to_string(),
        accuracy: r.accuracy,
        ece: r.ece,
        nll: r.nll,
        data_fingerprint: splits.fingerprint(),
        sigma: SigmaSummary::from_records(records)?,
        temperature: None,
        train_secs: secs,
    })
}

/// Trains both DBLE arms and the vanilla baseline on the same data and
/// seed, then scores all four arms on the test split.
pub fn run_ablation(cfg: &RunConfig, splits: &Splits) -> Result<Ablation> {
    cfg.validate()?;
    let mut out = Ablation {
        arms: Vec::new(),
        records: BTreeMap::new(),
        logs: BTreeMap::new(),
        dble_models: BTreeMap::new(),
    };
    let dim = splits.train.num_features();
    for (name, selection) in [(ARM_ERRORS_ONLY, Selection::ErrorsOnly), (ARM_ALL_SAMPLES, Selection::AllSamples)] {
        let mut c = cfg.dble_config(dim);
        c.selection = selection;
        let t = Instant::now();
        let (m, log) = train_dble(&splits.train, &splits.val, &c, cfg.seed, cfg.exec())?;
        let records = evaluate_dble(&m, &splits.train, &splits.test, &dble_eval(cfg))?;
        let summary = arm(name, &records, splits, cfg, t.elapsed().as_secs_f64())?;
        log::info!("{name}: acc {:.4} ece {:.4} nll {:.4}", summary.accuracy, summary.ece, summary.nll);
        out.arms.push(summary);
        out.records.insert(name.into(), records);
        out.logs.insert(name.into(), log);
        out.dble_models.insert(name.into(), m);
    }

    let t = Instant::now();
    let (mut vanilla, log) = train_vanilla(&splits.train, &splits.val, &cfg.vanilla_config(dim), cfg.seed, cfg.exec())?;
    let secs = t.elapsed().as_secs_f64();
    let records = evaluate_vanilla(&vanilla, &splits.train, &splits.test, cfg.exec())?;
    out.arms.push(arm(ARM_VANILLA, &records, splits, cfg, secs)?);
    out.records.insert(ARM_VANILLA.into(), records);
    out.logs.insert(ARM_VANILLA.into(), log);

    let fit = fit_vanilla_temperature(&mut vanilla, &splits.val, cfg)?;
    let records = evaluate_vanilla(&vanilla, &splits.train, &splits.test, cfg.exec())?;
    let mut ts = arm(ARM_TEMPERATURE, &records, splits, cfg, secs)?;
    ts.temperature = Some(fit);
    out.arms.push(ts);
    out.records.insert(ARM_TEMPERATURE.into(), records);
    for a in &out.arms[2..] {
        log::info!("{}: acc {:.4} ece {:.4} nll {:.4}", a.name, a.accuracy, a.ece, a.nll);
    }
    Ok(out)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    RngStreams::new(cfg.seed).log_streams();
    let splits = load_splits(cfg)?;
    let ablation = run_ablation(cfg, &splits)?;
    write_json(
        &cfg.out_dir.join("ablation.json"),
        &serde_json::json!({
            "format_version": FORMAT_VERSION,
            "seed": cfg.seed,
            "arms": ablation.arms,
            "config": cfg.provenance_json(),
        }),
    )?;
    for (name, records) in &ablation.records {
        write(&cfg.out_dir.join(format!("records_{name}.csv")), records_to_csv(records).as_bytes())?;
    }
    write_config(cfg)
}
