use rand::seq::SliceRandom;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{RngStreams, SPLIT};

/// Train/validation/test fractions (positive, summing to 1) and the seed of
/// the shuffle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    fn validate(&self) -> Result<()> {
        let f = [self.train, self.validation, self.test];
        if f.iter().any(|v| !(*v > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "split fractions must be positive and sum to 1, got {f:?}"
            )));
        }
        Ok(())
    }
}

/// Stratified partition into `fractions.len()` parts. The first part takes
/// whatever rounding leaves over. Rows keep their original order in each part.
fn stratified(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    let mut rng = RngStreams::new(seed).stream(SPLIT);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for k in 0..ds.num_classes() {
        let mut rows = ds.class_rows(k).to_vec();
        rows.shuffle(&mut rng);
        let n = rows.len();
        let mut sizes: Vec<usize> = fractions.iter().map(|f| (f * n as f64).round() as usize).collect();
        let rest: usize = sizes[1..].iter().sum();
        if rest >= n {
            return Err(Error::Split(format!("class {k} has {n} samples, too few for {} parts", fractions.len())));
        }
        sizes[0] = n - rest;
        if let Some(p) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Split(format!(
                "class {k} has {n} samples; part {p} would receive none"
            )));
        }
        let mut at = 0;
        for (part, s) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&rows[at..at + s]);
            at += s;
        }
    }
    parts
        .into_iter()
        .map(|mut rows| {
            rows.sort_unstable();
            ds.subset(&rows)
        })
        .collect()
}

/// Deterministic stratified three-way split. Every class appears in every part.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let mut parts = stratified(ds, &[spec.train, spec.validation, spec.test], spec.seed)?;
    let test = parts.pop().expect("three parts");
    let val = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    Ok((train, val, test))
}

/// Two-way stratified split used when a separate test set already exists.
pub fn holdout(ds: &Dataset, validation: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(validation > 0.0 && validation < 1.0) {
        return Err(Error::Parameter(format!(
            "validation fraction must be in (0, 1), got {validation}"
        )));
    }
    let mut parts = stratified(ds, &[1.0 - validation, validation], seed)?;
    let val = parts.pop().expect("two parts");
    let train = parts.pop().expect("two parts");
    Ok((train, val))
}
