//! Prototypical classification: class centers, the distance softmax, the
//! episodic loss, nearest-center prediction and distance diagnostics.

use crate::autodiff::{Bound, DistanceMode, Graph, Var};
use crate::data::{Dataset, Episode};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::autodiff::{distance_matrix, log_sum_exp_row};
use crate::model::{encode, EncoderConfig};
use crate::tensor::Tensor;
use crate::autodiff::ParamSet;

/// Rows are embedded in fixed-size chunks so results do not depend on
/// whether the chunks run in parallel.
pub const EMBED_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CenterSource {
    Episode,
    FullTrainingSet,
}

/// One center per class, row `i` belonging to `classes[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterTable {
    classes: Vec<usize>,
    centers: Tensor,
    source: CenterSource,
}

impl CenterTable {
    pub fn new(classes: Vec<usize>, centers: Tensor, source: CenterSource) -> Result<Self> {
        if classes.len() != centers.rows() {
            return Err(Error::Dimension(format!(
                "{} classes but {} center rows",
                classes.len(),
                centers.rows()
            )));
        }
        let mut sorted = classes.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("duplicate class in center table".into()));
        }
        Ok(Self {
            classes,
            centers,
            source,
        })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn source(&self) -> CenterSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn position(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }
}

/// `[N x N*K]` matrix averaging support rows into their class center.
fn averaging_matrix(episode: &Episode) -> Result<Tensor> {
    let n = episode.num_classes();
    let positions = episode.support_positions();
    let mut counts = vec![0usize; n];
    for &p in &positions {
        counts[p] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Contract(format!(
            "class {} has no supports",
            episode.classes[empty]
        )));
    }
    let cols = positions.len();
    let mut a = vec![0.0; n * cols];
    for (j, &p) in positions.iter().enumerate() {
        a[p * cols + j] = 1.0 / counts[p] as f64;
    }
    Tensor::matrix(n, cols, a)
}

/// Centers of the episode's classes as a differentiable `[N x d]` node, in
/// `episode.classes` order.
pub fn episode_centers(
    g: &mut Graph,
    cfg: &EncoderConfig,
    theta: &Bound,
    episode: &Episode,
    ds: &Dataset,
) -> Result<Var> {
    let avg = g.constant(averaging_matrix(episode)?);
    let xs = g.constant(episode.support_features(ds)?);
    let hs = encode(g, cfg, theta, xs)?;
    g.matmul(avg, hs)
}

/// Embeds every row of `features` without gradient tracking.
pub fn embed_all(cfg: &EncoderConfig, theta: &ParamSet, features: &Tensor, exec: Exec) -> Result<Tensor> {
    embed_all_chunked(cfg, theta, features, EMBED_CHUNK, exec)
}

pub fn embed_all_chunked(
    cfg: &EncoderConfig,
    theta: &ParamSet,
    features: &Tensor,
    chunk: usize,
    exec: Exec,
) -> Result<Tensor> {
    let n = features.rows();
    let chunk = chunk.max(1);
    let parts = exec.try_map(n.div_ceil(chunk), |c| {
        let (s, e) = (c * chunk, ((c + 1) * chunk).min(n));
        crate::model::embed(cfg, theta, &features.slice_rows(s, e)?)
    })?;
    Tensor::vstack(&parts)
}

/// Mean embedding of all training samples of every class.
pub fn full_centers(cfg: &EncoderConfig, theta: &ParamSet, train: &Dataset, exec: Exec) -> Result<CenterTable> {
    let h = embed_all(cfg, theta, train.features(), exec)?;
    centers_from_embeddings(&h, train)
}

/// Class means of precomputed embeddings (rows aligned with `train`).
pub fn centers_from_embeddings(h: &Tensor, train: &Dataset) -> Result<CenterTable> {
    let d = h.cols();
    let m = train.num_classes();
    let mut data = Vec::with_capacity(m * d);
    for k in 0..m {
        let rows = train.class_rows(k);
        if rows.is_empty() {
            return Err(Error::Contract(format!("class {k} has no training samples")));
        }
        let mut acc = vec![0.0; d];
        for &r in rows {
            for (a, v) in acc.iter_mut().zip(h.row(r)) {
                *a += v;
            }
        }
        data.extend(acc.iter().map(|a| a / rows.len() as f64));
    }
    CenterTable::new((0..m).collect(), Tensor::matrix(m, d, data)?, CenterSource::FullTrainingSet)
}

/// Row `i` is `softmax_k(-d(h_i, c_k))`.
pub fn predictive_distribution(h: &Tensor, centers: &CenterTable, mode: DistanceMode) -> Result<Tensor> {
    let d = distance_matrix(h, centers.centers(), mode)?;
    Ok(softmax_neg_rows(&d))
}

pub(crate) fn softmax_neg_rows(d: &Tensor) -> Tensor {
    let n = d.cols();
    let mut out = Vec::with_capacity(d.len());
    let mut neg = vec![0.0; n];
    for i in 0..d.rows() {
        for (x, v) in neg.iter_mut().zip(d.row(i)) {
            *x = -v;
        }
        let lse = log_sum_exp_row(&neg);
        out.extend(neg.iter().map(|x| (x - lse).exp()));
    }
    Tensor::matrix(d.rows(), n, out).expect("same shape as input")
}

/// Mean over rows of `d(z_i, c_{t_i}) + log sum_k exp(-d(z_i, c_k))`, the
/// negative log-likelihood of the distance softmax.
pub fn nll_over_centers(
    g: &mut Graph,
    z: Var,
    centers: Var,
    targets: &[usize],
    mode: DistanceMode,
) -> Result<Var> {
    let d = g.pairwise_distance(z, centers, mode)?;
    let neg = g.scale(d, -1.0)?;
    let lse = g.log_sum_exp(neg)?;
    let own = g.gather(d, targets)?;
    let per = g.add(own, lse)?;
    g.mean(per)
}

/// Episodic loss: mean NLL of the queries under the distance softmax over
/// centers built from the supports. Gradients reach the encoder through both
/// query embeddings and centers.
pub fn proto_loss(
    g: &mut Graph,
    cfg: &EncoderConfig,
    theta: &Bound,
    episode: &Episode,
    ds: &Dataset,
    mode: DistanceMode,
) -> Result<ProtoForward> {
    let centers = episode_centers(g, cfg, theta, episode, ds)?;
    let xq = g.constant(episode.query_features(ds)?);
    let queries = encode(g, cfg, theta, xq)?;
    let loss = nll_over_centers(g, queries, centers, &episode.query_positions(), mode)?;
    Ok(ProtoForward {
        loss,
        centers,
        queries,
    })
}

/// Handles into the graph built by [`proto_loss`].
#[derive(Clone, Copy, Debug)]
pub struct ProtoForward {
    pub loss: Var,
    pub centers: Var,
    pub queries: Var,
}

fn squared(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center per row; exact ties go to the lowest class index.
pub fn predict(h: &Tensor, centers: &CenterTable) -> Result<Vec<usize>> {
    if centers.is_empty() {
        return Err(Error::Contract("empty center table".into()));
    }
    if h.cols() != centers.dim() {
        return Err(Error::Dimension(format!(
            "embedding dim {} vs center dim {}",
            h.cols(),
            centers.dim()
        )));
    }
    Ok((0..h.rows())
        .map(|i| nearest(h.row(i), centers))
        .collect())
}

pub(crate) fn nearest(h: &[f64], centers: &CenterTable) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for (j, &class) in centers.classes().iter().enumerate() {
        let d = squared(h, centers.centers().row(j));
        if d < best.0 || (d == best.0 && class < best.1) {
            best = (d, class);
        }
    }
    best.1
}

/// Plain Euclidean distance from each row to the center of its label.
pub fn distance_to_center(h: &Tensor, centers: &CenterTable, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != h.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} embeddings",
            labels.len(),
            h.rows()
        )));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let p = centers.position(y).ok_or(Error::Lookup(y))?;
            Ok(squared(h.row(i), centers.centers().row(p)).sqrt())
        })
        .collect()
}
