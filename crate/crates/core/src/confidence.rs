//! Error-driven confidence: sampling around misclassified embeddings and the
//! Monte Carlo confidence score used at inference.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{distance_matrix, Bound, DistanceMode, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{confidence_forward, ConfidenceConfig, DbleModel};
use crate::proto::{nearest, softmax_neg_rows, CenterTable};
use crate::tensor::Tensor;

/// Which queries feed the confidence loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    ErrorsOnly,
    AllSamples,
}

impl Selection {
    pub fn as_str(self) -> &'static str {
        match self {
            Selection::ErrorsOnly => "errors_only",
            Selection::AllSamples => "all_samples",
        }
    }
}

impl std::str::FromStr for Selection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "errors_only" => Ok(Selection::ErrorsOnly),
            "all_samples" => Ok(Selection::AllSamples),
            other => Err(format!("expected errors_only or all_samples, got {other:?}")),
        }
    }
}

/// Detached query embeddings selected for the confidence loss.
#[derive(Clone, Debug)]
pub struct ErrorBatch {
    /// `None` when nothing was selected.
    pub embeddings: Option<Tensor>,
    pub labels: Vec<usize>,
    pub targets: Vec<usize>,
    pub centers: CenterTable,
}

impl ErrorBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Picks the queries whose nearest center disagrees with their label (or all
/// queries under [`Selection::AllSamples`]).
pub fn collect_errors(
    queries: &Tensor,
    labels: &[usize],
    centers: &CenterTable,
    selection: Selection,
) -> Result<ErrorBatch> {
    if labels.len() != queries.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} queries",
            labels.len(),
            queries.rows()
        )));
    }
    let predicted = crate::proto::predict(queries, centers)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, (&y, &p)) in labels.iter().zip(&predicted).enumerate() {
        if selection == Selection::AllSamples || y != p {
            rows.push(i);
            targets.push(centers.position(y).ok_or(Error::Lookup(y))?);
        }
    }
    let embeddings = if rows.is_empty() {
        None
    } else {
        Some(queries.select_rows(&rows)?)
    };
    Ok(ErrorBatch {
        embeddings,
        labels: rows.iter().map(|&i| labels[i]).collect(),
        targets,
        centers: centers.clone(),
    })
}

/// `h + eps * sigma` with one standard normal draw per entry.
pub fn sample_z<R: Rng>(g: &mut Graph, h: Var, sigma: Var, rng: &mut R) -> Result<Var> {
    let shape = g.value(sigma).shape().to_vec();
    let n = g.value(sigma).len();
    let eps = Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())?;
    sample_z_with(g, h, sigma, eps)
}

/// [`sample_z`] with a given noise tensor.
pub fn sample_z_with(g: &mut Graph, h: Var, sigma: Var, eps: Tensor) -> Result<Var> {
    if let Some(bad) = g.value(sigma).data().iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Contract(format!("sigma must be positive, got {bad}")));
    }
    let scaled = g.mul_const(sigma, eps)?;
    g.add(h, scaled)
}

/// Mean NLL of the sampled embeddings under the distance softmax over fixed
/// centers. Only `phi` receives gradients.
#[allow(clippy::too_many_arguments)]
pub fn confidence_loss<R1: Rng, R2: Rng>(
    g: &mut Graph,
    cfg: &ConfidenceConfig,
    phi: &Bound,
    batch: &ErrorBatch,
    mode: DistanceMode,
    eps_rng: &mut R1,
    dropout_rng: &mut R2,
) -> Result<Var> {
    let emb = batch
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::Contract("confidence loss over an empty error set".into()))?;
    let h = g.constant(emb.clone());
    let sigma = confidence_forward(g, cfg, phi, h, true, dropout_rng)?;
    let z = sample_z(g, h, sigma, eps_rng)?;
    let c = g.constant(batch.centers.centers().clone());
    crate::proto::nll_over_centers(g, z, c, &batch.targets, mode)
}

/// Inference output for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceScore {
    pub predicted: usize,
    pub confidence: f64,
    pub distribution: Vec<f64>,
    pub samples: usize,
}

/// Averages the distance softmax over `samples` draws of `h + eps * sigma`;
/// the confidence is the averaged mass on the nearest class of `h`.
pub fn score_embedding<R: Rng>(
    h: &[f64],
    sigma: &[f64],
    centers: &CenterTable,
    samples: usize,
    mode: DistanceMode,
    rng: &mut R,
) -> Result<ConfidenceScore> {
    if samples == 0 {
        return Err(Error::Parameter("U must be at least 1".into()));
    }
    if h.len() != sigma.len() || h.len() != centers.dim() {
        return Err(Error::Dimension("embedding, sigma and centers differ in width".into()));
    }
    if centers.is_empty() {
        return Err(Error::Contract("empty center table".into()));
    }
    let d = h.len();
    let mut z = Vec::with_capacity(samples * d);
    for _ in 0..samples {
        for (hi, si) in h.iter().zip(sigma) {
            let e: f64 = rng.sample(StandardNormal);
            z.push(hi + e * si);
        }
    }
    let z = Tensor::matrix(samples, d, z)?;
    let p = softmax_neg_rows(&distance_matrix(&z, centers.centers(), mode)?);
    let k = centers.len();
    let mut avg = vec![0.0; k];
    for u in 0..samples {
        for (a, v) in avg.iter_mut().zip(p.row(u)) {
            *a += v;
        }
    }
    for a in &mut avg {
        *a /= samples as f64;
    }
    let predicted = nearest(h, centers);
    let pos = centers.position(predicted).expect("predicted class is in the table");
    Ok(ConfidenceScore {
        predicted,
        confidence: avg[pos],
        distribution: avg,
        samples,
    })
}

/// Scores a single input row with full-training-set centers.
pub fn confidence_score<R: Rng>(
    model: &DbleModel,
    x: &Tensor,
    centers: &CenterTable,
    samples: usize,
    mode: DistanceMode,
    rng: &mut R,
) -> Result<ConfidenceScore> {
    if x.rows() != 1 {
        return Err(Error::Dimension(format!("expected one input row, got {}", x.rows())));
    }
    let h = model.embed(x)?;
    let sigma = model.sigma(&h)?;
    score_embedding(h.row(0), sigma.row(0), centers, samples, mode, rng)
}
