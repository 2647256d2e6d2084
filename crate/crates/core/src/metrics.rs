//! Calibration metrics, reliability bins, distance-accuracy curves and
//! sigma statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::DbleModel;
use crate::tensor::Tensor;

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
pub const SIGMA_BIN_WIDTH: f64 = 0.05;
pub const SIGMA_HIST_MAX: f64 = 3.0;

/// One evaluated test sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub label: usize,
    pub predicted: usize,
    pub confidence: f64,
    /// Predictive distribution indexed by class.
    pub distribution: Vec<f64>,
    pub d_true: f64,
    pub d_pred: f64,
    pub sigma_mean: Option<f64>,
}

impl EvalRecord {
    pub fn correct(&self) -> bool {
        self.label == self.predicted
    }

    pub fn p_true(&self) -> f64 {
        self.distribution.get(self.label).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

fn check_nonempty<T>(records: &[T]) -> Result<()> {
    if records.is_empty() {
        Err(Error::Metric("no records".into()))
    } else {
        Ok(())
    }
}

/// Bin of `c` among `l` right-inclusive bins over `[0, 1]`; 0 goes to the
/// first bin. Compares against `k / l` directly so that boundary values such
/// as 0.2 land where the bounds say rather than where `ceil` rounds them.
pub fn bin_index(c: f64, l: usize) -> usize {
    let lf = l as f64;
    let mut k = ((c * lf).ceil() as isize - 1).clamp(0, l as isize - 1) as usize;
    while k > 0 && c <= k as f64 / lf {
        k -= 1;
    }
    while k + 1 < l && c > (k + 1) as f64 / lf {
        k += 1;
    }
    k
}

fn check_conf(records: &[EvalRecord], l: usize) -> Result<()> {
    check_nonempty(records)?;
    if l == 0 {
        return Err(Error::Parameter("need at least one bin".into()));
    }
    if let Some(r) = records.iter().find(|r| !(0.0..=1.0).contains(&r.confidence)) {
        return Err(Error::Metric(format!("confidence {} outside [0, 1]", r.confidence)));
    }
    Ok(())
}

/// Expected calibration error over `l` equal-width bins.
pub fn ece(records: &[EvalRecord], l: usize) -> Result<f64> {
    check_conf(records, l)?;
    let mut conf = vec![0.0; l];
    let mut hits = vec![0.0; l];
    for r in records {
        let k = bin_index(r.confidence, l);
        conf[k] += r.confidence;
        if r.correct() {
            hits[k] += 1.0;
        }
    }
    let gap: f64 = conf.iter().zip(&hits).map(|(c, h)| (c - h).abs()).sum();
    Ok(gap / records.len() as f64)
}

pub fn reliability_bins(records: &[EvalRecord], l: usize) -> Result<Vec<BinStats>> {
    check_conf(records, l)?;
    let mut bins: Vec<BinStats> = (0..l)
        .map(|k| BinStats {
            lower: k as f64 / l as f64,
            upper: (k + 1) as f64 / l as f64,
            count: 0,
            mean_confidence: 0.0,
            accuracy: 0.0,
        })
        .collect();
    for r in records {
        let b = &mut bins[bin_index(r.confidence, l)];
        b.count += 1;
        b.mean_confidence += r.confidence;
        if r.correct() {
            b.accuracy += 1.0;
        }
    }
    for b in &mut bins {
        if b.count > 0 {
            b.mean_confidence /= b.count as f64;
            b.accuracy /= b.count as f64;
        }
    }
    Ok(bins)
}

pub fn nll(records: &[EvalRecord]) -> Result<f64> {
    check_nonempty(records)?;
    let s: f64 = records.iter().map(|r| -r.p_true().max(PROB_FLOOR).ln()).sum();
    Ok(s / records.len() as f64)
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    check_nonempty(records)?;
    Ok(records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64)
}

/// Headline metrics for one evaluated model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
    pub bins: Vec<BinStats>,
}

impl CalibrationReport {
    pub fn from_records(records: &[EvalRecord], l: usize) -> Result<Self> {
        Ok(Self {
            n: records.len(),
            accuracy: accuracy(records)?,
            ece: ece(records, l)?,
            nll: nll(records)?,
            bins: reliability_bins(records, l)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    /// Distance to the ground-truth center.
    DTrue,
    /// Distance to the predicted center.
    DPred,
}

impl std::str::FromStr for DistanceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "d_t" | "d_true" => Ok(DistanceKind::DTrue),
            "d_prime_t" | "d_pred" => Ok(DistanceKind::DPred),
            other => Err(format!("expected d_t or d_prime_t, got {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bin_center: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Accuracy per equal-width distance bin over `[min, max]`; empty bins are
/// left out.
pub fn accuracy_by_distance(samples: &[(f64, bool)], bins: usize) -> Result<Vec<CurvePoint>> {
    check_nonempty(samples)?;
    if bins == 0 {
        return Err(Error::Parameter("need at least one bin".into()));
    }
    if samples.iter().any(|(d, _)| !d.is_finite()) {
        return Err(Error::Metric("non-finite distance".into()));
    }
    let min = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let max = samples.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / bins as f64;
    if width == 0.0 {
        let hits = samples.iter().filter(|s| s.1).count();
        return Ok(vec![CurvePoint {
            bin_center: min,
            accuracy: hits as f64 / samples.len() as f64,
            count: samples.len(),
        }]);
    }
    let mut counts = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    for &(d, ok) in samples {
        let k = (((d - min) / width).floor() as usize).min(bins - 1);
        counts[k] += 1;
        hits[k] += ok as usize;
    }
    Ok((0..bins)
        .filter(|&k| counts[k] > 0)
        .map(|k| CurvePoint {
            bin_center: min + (k as f64 + 0.5) * width,
            accuracy: hits[k] as f64 / counts[k] as f64,
            count: counts[k],
        })
        .collect())
}

pub fn distance_accuracy_curve(records: &[EvalRecord], bins: usize, which: DistanceKind) -> Result<Vec<CurvePoint>> {
    let samples: Vec<(f64, bool)> = records
        .iter()
        .map(|r| {
            let d = match which {
                DistanceKind::DTrue => r.d_true,
                DistanceKind::DPred => r.d_pred,
            };
            (d, r.correct())
        })
        .collect();
    accuracy_by_distance(&samples, bins)
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when fewer than two points or either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaStats {
    pub mean: f64,
    pub bin_width: f64,
    /// Counts over `[k * bin_width, (k + 1) * bin_width)`; the last bin also
    /// takes everything at or above the upper edge.
    pub histogram: Vec<usize>,
}

impl SigmaStats {
    /// From per-sample mean sigma values.
    pub fn from_sample_means(means: &[f64]) -> Result<Self> {
        check_nonempty(means)?;
        let nbins = (SIGMA_HIST_MAX / SIGMA_BIN_WIDTH).round() as usize;
        let mut histogram = vec![0usize; nbins];
        for &m in means {
            let k = ((m / SIGMA_BIN_WIDTH).floor().max(0.0) as usize).min(nbins - 1);
            histogram[k] += 1;
        }
        Ok(Self {
            mean: means.iter().sum::<f64>() / means.len() as f64,
            bin_width: SIGMA_BIN_WIDTH,
            histogram,
        })
    }
}

/// Per-sample mean of inference-mode sigma for every row of `features`.
pub fn sigma_means(model: &DbleModel, features: &Tensor, exec: Exec) -> Result<Vec<f64>> {
    let h = crate::proto::embed_all(&model.encoder, &model.theta, features, exec)?;
    let chunk = crate::proto::EMBED_CHUNK;
    let parts = exec.try_map(h.rows().div_ceil(chunk), |c| {
        let rows = h.slice_rows(c * chunk, ((c + 1) * chunk).min(h.rows()))?;
        let s = model.sigma(&rows)?;
        Ok::<_, Error>((0..s.rows()).map(|i| s.row(i).iter().sum::<f64>() / s.cols() as f64).collect::<Vec<_>>())
    })?;
    Ok(parts.concat())
}

pub fn sigma_stats(model: &DbleModel, features: &Tensor, exec: Exec) -> Result<SigmaStats> {
    SigmaStats::from_sample_means(&sigma_means(model, features, exec)?)
}
