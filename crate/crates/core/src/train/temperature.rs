use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LOG_T_RANGE: (f64, f64) = (-3.0, 3.0);
const ITERATIONS: usize = 200;

/// Positive logit divisor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t.is_finite() {
            Ok(Self(t))
        } else {
            Err(Error::Parameter(format!("temperature must be positive, got {t}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Mean NLL of `softmax(logits / t)` at the true labels.
pub fn temperature_nll(logits: &Tensor, labels: &[usize], t: f64) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().map(|v| v / t).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v / t - m).exp()).sum::<f64>().ln();
        total += lse - row[y] / t;
    }
    total / labels.len() as f64
}

/// Golden-section search for the validation-NLL-minimizing temperature over
/// `ln T` in `[-3, 3]`.
pub fn fit_temperature(logits: &Tensor, labels: &[usize]) -> Result<Temperature> {
    if labels.is_empty() || labels.len() != logits.rows() {
        return Err(Error::Fit(format!("{} labels for {} logit rows", labels.len(), logits.rows())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::Fit(format!("label {y} outside {} logits", logits.cols())));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::Fit("labels contain a single class".into()));
    }
    let f = |x: f64| temperature_nll(logits, labels, x.exp());
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = LOG_T_RANGE;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..ITERATIONS {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    Temperature::new(((a + b) / 2.0).exp())
}
