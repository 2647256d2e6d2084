use rand::Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Isotropic Gaussian clusters with a guaranteed minimum gap between centers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dims: usize,
    pub spread: f64,
    pub separation: f64,
}

/// Draws the blobs, then applies one global affine map so all features fall
/// in `[0, 1]`; the map is isotropic, so the gap/spread ratio is preserved.
pub fn make_blobs<R: Rng>(spec: &BlobSpec, rng: &mut R) -> Result<Dataset> {
    let BlobSpec {
        classes,
        per_class,
        dims,
        spread,
        separation,
    } = *spec;
    if classes == 0 || per_class == 0 || dims == 0 || !(spread > 0.0) || !(separation > 0.0) {
        return Err(Error::Parameter(format!("blob parameters must be positive: {spec:?}")));
    }

    let mut radius = separation * (classes as f64).powf(1.0 / dims as f64);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut misses = 0;
    while centers.len() < classes {
        let c: Vec<f64> = (0..dims).map(|_| rng.random_range(-radius..=radius)).collect();
        let ok = centers.iter().all(|o| {
            o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= separation
        });
        if ok {
            centers.push(c);
        } else {
            misses += 1;
            if misses % 1000 == 0 {
                radius *= 1.5;
            }
        }
    }

    let mut data = Vec::with_capacity(classes * per_class * dims);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &ck in c {
                let e: f64 = rng.sample(StandardNormal);
                data.push(ck + spread * e);
            }
            labels.push(k);
        }
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    for v in &mut data {
        *v = ((*v - lo) / span).clamp(0.0, 1.0);
    }
    Dataset::new(Tensor::matrix(labels.len(), dims, data)?, labels, classes)
}
