//! Encoder, confidence head, vanilla classifier head and their parameters.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, SavedModel, TrainingMeta, FORMAT_VERSION};

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl EncoderConfig {
    /// 784 -> 256 -> 128 -> 64 MLP for 28x28 digits.
    pub fn mnist() -> Self {
        Self {
            input_dim: 784,
            hidden_dims: vec![256, 128],
            embed_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Parameter(format!("encoder dims must be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// Expected `(name, shape)` of every encoder tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        linear_shapes("encoder", &self.layer_dims())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceConfig {
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    pub sigma_floor: f64,
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            dropout_rate: 0.5,
            sigma_floor: 1e-6,
        }
    }
}

impl ConfidenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Parameter("confidence hidden_dim must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Parameter(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Parameter(format!(
                "sigma_floor must be positive, got {}",
                self.sigma_floor
            )));
        }
        Ok(())
    }

    pub fn param_shapes(&self, embed_dim: usize) -> Vec<(String, Vec<usize>)> {
        linear_shapes("confidence", &[embed_dim, self.hidden_dim, embed_dim])
    }
}

pub fn head_shapes(embed_dim: usize, num_classes: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        ("head.weight".into(), vec![embed_dim, num_classes]),
        ("head.bias".into(), vec![1, num_classes]),
    ]
}

fn linear_shapes(prefix: &str, dims: &[usize]) -> Vec<(String, Vec<usize>)> {
    dims.windows(2)
        .enumerate()
        .flat_map(|(i, w)| {
            [
                (format!("{prefix}.{i}.weight"), vec![w[0], w[1]]),
                (format!("{prefix}.{i}.bias"), vec![1, w[1]]),
            ]
        })
        .collect()
}

/// He-scaled normal weights (std = sqrt(2 / fan_in)) and zero biases.
fn init_linear<R: Rng>(
    shapes: &[(String, Vec<usize>)],
    zero_last_layer: bool,
    rng: &mut R,
) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    let last_weight = shapes.len().saturating_sub(2);
    for (i, (name, shape)) in shapes.iter().enumerate() {
        let is_weight = name.ends_with(".weight");
        let t = if is_weight && !(zero_last_layer && i == last_weight) {
            let std = (2.0 / shape[0] as f64).sqrt();
            let n = shape[0] * shape[1];
            let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::new(shape.clone(), data)?
        } else {
            Tensor::zeros(shape)
        };
        p.insert(name.clone(), t)?;
    }
    Ok(p)
}

pub fn init_encoder<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Result<ParamSet> {
    cfg.validate()?;
    init_linear(&cfg.param_shapes(), false, rng)
}

/// The output layer starts at zero, so the initial raw output is zero and
/// every sigma starts at softplus(0) = ln 2.
pub fn init_confidence<R: Rng>(cfg: &ConfidenceConfig, embed_dim: usize, rng: &mut R) -> Result<ParamSet> {
    cfg.validate()?;
    init_linear(&cfg.param_shapes(embed_dim), true, rng)
}

pub fn init_head<R: Rng>(embed_dim: usize, num_classes: usize, rng: &mut R) -> Result<ParamSet> {
    init_linear(&head_shapes(embed_dim, num_classes), false, rng)
}

fn linear(g: &mut Graph, params: &Bound, prefix: &str, i: usize, x: Var) -> Result<Var> {
    let w = params.var(&format!("{prefix}.{i}.weight"))?;
    let b = params.var(&format!("{prefix}.{i}.bias"))?;
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

/// MLP forward; ReLU between layers, linear output.
pub fn encode(g: &mut Graph, cfg: &EncoderConfig, theta: &Bound, x: Var) -> Result<Var> {
    if g.value(x).cols() != cfg.input_dim {
        return Err(Error::Dimension(format!(
            "encoder expects {} inputs, got {}",
            cfg.input_dim,
            g.value(x).cols()
        )));
    }
    let mut h = x;
    for i in 0..cfg.num_layers() {
        h = linear(g, theta, "encoder", i, h)?;
        if i + 1 < cfg.num_layers() {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Per-dimension sigma: `max(softplus(mlp(h)), sigma_floor)`. Dropout with
/// inverted scaling is applied between the two layers only when `training`.
pub fn confidence_forward<R: Rng>(
    g: &mut Graph,
    cfg: &ConfidenceConfig,
    phi: &Bound,
    h: Var,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let dropout: Option<&mut dyn RngCore> = if training { Some(rng) } else { None };
    sigma_graph(g, cfg, phi, h, dropout)
}

fn sigma_graph(
    g: &mut Graph,
    cfg: &ConfidenceConfig,
    phi: &Bound,
    h: Var,
    dropout: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let hidden = linear(g, phi, "confidence", 0, h)?;
    let mut hidden = g.relu(hidden)?;
    if let Some(rng) = dropout.filter(|_| cfg.dropout_rate > 0.0) {
        let keep = 1.0 - cfg.dropout_rate;
        let mask_data = (0..g.value(hidden).len())
            .map(|_| if rng.random::<f64>() < cfg.dropout_rate { 0.0 } else { 1.0 / keep })
            .collect();
        let mask = Tensor::new(g.value(hidden).shape().to_vec(), mask_data)?;
        hidden = g.mul_const(hidden, mask)?;
    }
    let raw = linear(g, phi, "confidence", 1, hidden)?;
    if g.value(raw).cols() != g.value(h).cols() {
        return Err(Error::Dimension("confidence output must match embedding width".into()));
    }
    let sp = g.softplus(raw)?;
    g.clamp_min(sp, cfg.sigma_floor)
}

/// Penultimate features -> class logits for the vanilla baseline.
pub fn head_logits(g: &mut Graph, head: &Bound, embedding: Var) -> Result<Var> {
    let a = g.relu(embedding)?;
    let w = head.var("head.weight")?;
    let b = head.var("head.bias")?;
    let z = g.matmul(a, w)?;
    g.add_bias(z, b)
}

/// Encoder plus confidence head.
#[derive(Clone, Debug, PartialEq)]
pub struct DbleModel {
    pub encoder: EncoderConfig,
    pub confidence: ConfidenceConfig,
    pub theta: ParamSet,
    pub phi: ParamSet,
}

impl DbleModel {
    pub fn init<R: Rng>(encoder: EncoderConfig, confidence: ConfidenceConfig, enc_rng: &mut R, conf_rng: &mut R) -> Result<Self> {
        let theta = init_encoder(&encoder, enc_rng)?;
        let phi = init_confidence(&confidence, encoder.embed_dim, conf_rng)?;
        Ok(Self {
            encoder,
            confidence,
            theta,
            phi,
        })
    }

    /// Embeddings without gradient tracking.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        embed(&self.encoder, &self.theta, x)
    }

    /// Inference-mode sigma (no dropout).
    pub fn sigma(&self, h: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let phi = g.bind_frozen(&self.phi);
        let hv = g.constant(h.clone());
        let s = sigma_graph(&mut g, &self.confidence, &phi, hv, None)?;
        Ok(g.value(s).clone())
    }
}

/// Encoder plus linear softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct VanillaModel {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    pub theta: ParamSet,
    pub head: ParamSet,
    pub temperature: Option<f64>,
}

impl VanillaModel {
    pub fn init<R: Rng>(encoder: EncoderConfig, num_classes: usize, enc_rng: &mut R, head_rng: &mut R) -> Result<Self> {
        let theta = init_encoder(&encoder, enc_rng)?;
        let head = init_head(encoder.embed_dim, num_classes, head_rng)?;
        Ok(Self {
            encoder,
            num_classes,
            theta,
            head,
            temperature: None,
        })
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        embed(&self.encoder, &self.theta, x)
    }

    /// Logits computed from precomputed embeddings.
    pub fn logits_from_embeddings(&self, h: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let head = g.bind_frozen(&self.head);
        let hv = g.constant(h.clone());
        let z = head_logits(&mut g, &head, hv)?;
        Ok(g.value(z).clone())
    }
}

pub(crate) fn embed(cfg: &EncoderConfig, theta: &ParamSet, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let t = g.bind_frozen(theta);
    let xv = g.constant(x.clone());
    let h = encode(&mut g, cfg, &t, xv)?;
    Ok(g.value(h).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::rng::{RngStreams, DROPOUT, INIT_CONFIDENCE, INIT_ENCODER};
    use approx::assert_abs_diff_eq;

    fn small_encoder() -> EncoderConfig {
        EncoderConfig {
            input_dim: 3,
            hidden_dims: vec![4],
            embed_dim: 2,
        }
    }

    #[test]
    fn biases_zero_and_seeded() {
        let s = RngStreams::new(1);
        let a = init_encoder(&EncoderConfig::mnist(), &mut s.stream(INIT_ENCODER)).unwrap();
        let b = init_encoder(&EncoderConfig::mnist(), &mut s.stream(INIT_ENCODER)).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.iter() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let c = init_confidence(&ConfidenceConfig::default(), 64, &mut s.stream(INIT_CONFIDENCE)).unwrap();
        for (name, t) in c.iter() {
            if name.ends_with("bias") || name == "confidence.1.weight" {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn he_scaled_first_layer() {
        let p = init_encoder(&EncoderConfig::mnist(), &mut RngStreams::new(3).stream(INIT_ENCODER)).unwrap();
        let w = p.get("encoder.0.weight").unwrap();
        assert_eq!(w.shape(), &[784, 256]);
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let want = (2.0f64 / 784.0).sqrt();
        assert!((std - want).abs() / want < 0.1, "{std} vs {want}");
    }

    #[test]
    fn zero_weights_give_zero_embeddings() {
        let cfg = small_encoder();
        let mut theta = init_encoder(&cfg, &mut RngStreams::new(0).stream(INIT_ENCODER)).unwrap();
        let names: Vec<String> = theta.names().map(str::to_string).collect();
        for n in names {
            theta.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let h = embed(&cfg, &theta, &x).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_independence() {
        let cfg = EncoderConfig {
            input_dim: 5,
            hidden_dims: vec![7, 6],
            embed_dim: 3,
        };
        let theta = init_encoder(&cfg, &mut RngStreams::new(2).stream(INIT_ENCODER)).unwrap();
        let x = Tensor::matrix(8, 5, (0..40).map(|i| (i as f64 * 0.37).sin().abs()).collect()).unwrap();
        let all = embed(&cfg, &theta, &x).unwrap();
        for i in 0..8 {
            let one = embed(&cfg, &theta, &x.slice_rows(i, i + 1).unwrap()).unwrap();
            for (a, b) in one.data().iter().zip(all.row(i)) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn encoder_rejects_wrong_width() {
        let cfg = small_encoder();
        let theta = init_encoder(&cfg, &mut RngStreams::new(0).stream(INIT_ENCODER)).unwrap();
        let x = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        assert!(matches!(embed(&cfg, &theta, &x), Err(Error::Dimension(_))));
    }

    #[test]
    fn encoder_gradient_check() {
        let cfg = small_encoder();
        let theta = init_encoder(&cfg, &mut RngStreams::new(5).stream(INIT_ENCODER)).unwrap();
        let x = Tensor::matrix(3, 3, vec![0.9, 0.1, 0.4, 0.2, 0.8, 0.3, 0.5, 0.5, 0.7]).unwrap();
        let r = finite_diff_check(&theta, 1e-5, |g, b| {
            let xv = g.constant(x.clone());
            let h = encode(g, &cfg, b, xv)?;
            let sq = g.mul(h, h)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    fn dble() -> DbleModel {
        let s = RngStreams::new(4);
        DbleModel::init(
            small_encoder(),
            ConfidenceConfig {
                hidden_dim: 5,
                ..Default::default()
            },
            &mut s.stream(INIT_ENCODER),
            &mut s.stream(INIT_CONFIDENCE),
        )
        .unwrap()
    }

    #[test]
    fn initial_sigma_is_ln2() {
        let m = dble();
        let h = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 3.0, 0.0, 0.0]).unwrap();
        let s = m.sigma(&h).unwrap();
        for v in s.data() {
            assert_abs_diff_eq!(*v, 2f64.ln(), epsilon = 1e-15);
        }
    }

    #[test]
    fn sigma_floor_in_the_negative_limit() {
        let mut m = dble();
        m.phi.get_mut("confidence.1.bias").unwrap().data_mut().fill(-1e4);
        let h = Tensor::matrix(1, 2, vec![0.3, 0.3]).unwrap();
        let s = m.sigma(&h).unwrap();
        assert!(s.data().iter().all(|&v| v == 1e-6));
    }

    #[test]
    fn inference_sigma_is_deterministic_training_is_not() {
        let mut m = dble();
        let mut rng = RngStreams::new(0).stream(INIT_CONFIDENCE);
        let w = init_encoder(
            &EncoderConfig {
                input_dim: 5,
                hidden_dims: vec![],
                embed_dim: 2,
            },
            &mut rng,
        )
        .unwrap();
        *m.phi.get_mut("confidence.1.weight").unwrap() = w.get("encoder.0.weight").unwrap().clone();
        let h = Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        assert_eq!(m.sigma(&h).unwrap(), m.sigma(&h).unwrap());

        let run = |seed| {
            let mut g = Graph::new();
            let phi = g.bind_frozen(&m.phi);
            let hv = g.constant(h.clone());
            let mut r = RngStreams::new(seed).stream(DROPOUT);
            let s = confidence_forward(&mut g, &m.confidence, &phi, hv, true, &mut r).unwrap();
            g.value(s).clone()
        };
        assert_eq!(run(1), run(1));
        assert!((0..20).any(|s| run(s) != m.sigma(&h).unwrap()));
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let s = RngStreams::new(0);
        let mut m = VanillaModel::init(small_encoder(), 4, &mut s.stream(INIT_ENCODER), &mut s.stream(INIT_CONFIDENCE)).unwrap();
        m.head.get_mut("head.weight").unwrap().data_mut().fill(0.0);
        let h = m.embed(&Tensor::matrix(1, 3, vec![0.2, 0.4, 0.6]).unwrap()).unwrap();
        let z = m.logits_from_embeddings(&h).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }
}
