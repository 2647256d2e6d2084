use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Added under the square root so the Euclidean distance has a finite
/// (zero) gradient at coincident points.
pub const DISTANCE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    #[default]
    Euclidean,
    Squared,
}

impl DistanceMode {
    pub fn from_squared(self, sq: f64) -> f64 {
        match self {
            DistanceMode::Euclidean => (sq + DISTANCE_EPS).sqrt(),
            DistanceMode::Squared => sq,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DistanceMode::Euclidean => "euclidean",
            DistanceMode::Squared => "squared",
        }
    }
}

impl std::str::FromStr for DistanceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "euclidean" => Ok(DistanceMode::Euclidean),
            "squared" => Ok(DistanceMode::Squared),
            other => Err(format!("expected `euclidean` or `squared`, got `{other}`")),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Relu(Var),
    Softplus(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    LogSumExp(Var),
    Distance(Var, Var, DistanceMode),
    Gather(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rowwise `log(sum(exp(row)))` with the max shifted out.
pub(crate) fn log_sum_exp_row(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Distance matrix between the rows of `x` and the rows of `c`.
pub(crate) fn distance_matrix(x: &Tensor, c: &Tensor, mode: DistanceMode) -> Result<Tensor> {
    if x.cols() != c.cols() {
        return Err(Error::Dimension(format!(
            "distance feature dims {} vs {}",
            x.cols(),
            c.cols()
        )));
    }
    let (q, n) = (x.rows(), c.rows());
    let mut out = Vec::with_capacity(q * n);
    for i in 0..q {
        let xi = x.row(i);
        for j in 0..n {
            out.push(mode.from_squared(squared_distance(xi, c.row(j))));
        }
    }
    Tensor::matrix(q, n, out)?.check_finite("pairwise_distance")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if it was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        let value = value.check_finite(what)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Distance(a, b, _) => self.requires_grad(*a) || self.requires_grad(*b),
            Op::MulConst(a, _)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::ClampMin(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::LogSumExp(a)
            | Op::Gather(a, _) => self.requires_grad(*a),
        };
        Ok(self.push(value, op, requires_grad))
    }

    /// Gradient-tracking leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a constant, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push_op(out, Op::MatMul(a, b), "matmul")
    }

    /// `x [m x n] + b [1 x n]`, broadcasting `b` over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Dimension(format!(
                "bias {:?} does not broadcast over {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        let n = xv.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % n];
        }
        self.push_op(out, Op::AddBias(x, b), "add_bias")
    }

    fn zip_values(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, what)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values(a, b, "add", |x, y| x + y)?;
        self.push_op(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values(a, b, "sub", |x, y| x - y)?;
        self.push_op(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values(a, b, "mul", |x, y| x * y)?;
        self.push_op(out, Op::Mul(a, b), "mul")
    }

    /// Elementwise product with a fixed tensor (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let av = self.value(a);
        av.same_shape(&mask, "mul_const")?;
        let data = av.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push_op(out, Op::MulConst(a, mask), "mul_const")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        self.push_op(out, Op::Scale(a, c), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push_op(out, Op::Relu(a), "relu")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        self.push_op(out, Op::Softplus(a), "softplus")
    }

    /// `max(a, floor)` elementwise; gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(floor));
        self.push_op(out, Op::ClampMin(a, floor), "clamp_min")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(out, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push_op(out, Op::Mean(a), "mean")
    }

    /// Rowwise log-sum-exp: `[rows x n] -> [rows x 1]`.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let data = (0..v.rows()).map(|i| log_sum_exp_row(v.row(i))).collect();
        let out = Tensor::matrix(v.rows(), 1, data)?;
        self.push_op(out, Op::LogSumExp(a), "log_sum_exp")
    }

    /// `[q x d] , [n x d] -> [q x n]` distances between rows.
    pub fn pairwise_distance(&mut self, x: Var, c: Var, mode: DistanceMode) -> Result<Var> {
        let out = distance_matrix(self.value(x), self.value(c), mode)?;
        self.push_op(out, Op::Distance(x, c, mode), "pairwise_distance")
    }

    /// Picks `a[i, cols[i]]` for each row: `[m x n] -> [m x 1]`.
    pub fn gather(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if cols.len() != v.rows() {
            return Err(Error::Dimension(format!(
                "gather needs {} indices, got {}",
                v.rows(),
                cols.len()
            )));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= v.cols()) {
            return Err(Error::Dimension(format!(
                "gather column {bad} out of range for {} columns",
                v.cols()
            )));
        }
        let data = cols.iter().enumerate().map(|(i, &j)| v.get(i, j)).collect();
        let out = Tensor::matrix(v.rows(), 1, data)?;
        self.push_op(out, Op::Gather(a, cols.to_vec()), "gather")
    }

    /// Reverse pass from a scalar `loss`. A graph supports exactly one
    /// backward pass; rebuild it for the next update.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; gradients must be zeroed and the graph rebuilt".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g.check_finite("backward").map_err(|_| {
                Error::Numeric(format!("gradient of node {i} is not finite"))
            })?);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, av);
                    gemm(1.0, g.view2(), bv.view2().t(), 1.0, ga.view2_mut());
                }
                if self.requires_grad(*b) {
                    let gb = slot(grads, *b, bv);
                    gemm(1.0, av.view2().t(), g.view2(), 1.0, gb.view2_mut());
                }
            }
            Op::AddBias(x, b) => {
                if self.requires_grad(*x) {
                    slot(grads, *x, out).add_assign(g);
                }
                if self.requires_grad(*b) {
                    let colsum = g.view2().sum_axis(Axis(0));
                    let gb = slot(grads, *b, self.value(*b));
                    for (d, s) in gb.data_mut().iter_mut().zip(colsum.iter()) {
                        *d += s;
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        slot(grads, v, out).add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    slot(grads, *a, out).add_assign(g);
                }
                if self.requires_grad(*b) {
                    axpy(slot(grads, *b, out), -1.0, g.data());
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.requires_grad(v) {
                        let ov = self.value(other);
                        let dst = slot(grads, v, out);
                        for ((d, gi), o) in dst.data_mut().iter_mut().zip(g.data()).zip(ov.data()) {
                            *d += gi * o;
                        }
                    }
                }
            }
            Op::MulConst(a, mask) => {
                let dst = slot(grads, *a, out);
                for ((d, gi), m) in dst.data_mut().iter_mut().zip(g.data()).zip(mask.data()) {
                    *d += gi * m;
                }
            }
            Op::Scale(a, c) => axpy(slot(grads, *a, out), *c, g.data()),
            Op::Relu(a) => {
                let av = self.value(*a);
                let dst = slot(grads, *a, av);
                for ((d, gi), x) in dst.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    if *x > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Softplus(a) => {
                let av = self.value(*a);
                let dst = slot(grads, *a, av);
                for ((d, gi), x) in dst.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *d += gi * sigmoid(*x);
                }
            }
            Op::ClampMin(a, floor) => {
                let av = self.value(*a);
                let dst = slot(grads, *a, av);
                for ((d, gi), x) in dst.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    if *x > *floor {
                        *d += gi;
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let av = self.value(*a);
                let mut s = g.data()[0];
                if matches!(node.op, Op::Mean(_)) {
                    s /= av.len() as f64;
                }
                for d in slot(grads, *a, av).data_mut() {
                    *d += s;
                }
            }
            Op::LogSumExp(a) => {
                let av = self.value(*a);
                let n = av.cols();
                let dst = slot(grads, *a, av);
                for r in 0..av.rows() {
                    let lse = out.data()[r];
                    let gr = g.data()[r];
                    for j in 0..n {
                        dst.data_mut()[r * n + j] += gr * (av.data()[r * n + j] - lse).exp();
                    }
                }
            }
            Op::Distance(x, c, mode) => self.distance_backward(*x, *c, *mode, out, g, grads),
            Op::Gather(a, cols) => {
                let av = self.value(*a);
                let n = av.cols();
                let dst = slot(grads, *a, av);
                for (r, &j) in cols.iter().enumerate() {
                    dst.data_mut()[r * n + j] += g.data()[r];
                }
            }
        }
        Ok(())
    }

    fn distance_backward(
        &self,
        x: Var,
        c: Var,
        mode: DistanceMode,
        dist: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (xv, cv) = (self.value(x), self.value(c));
        let (q, n, d) = (xv.rows(), cv.rows(), xv.cols());
        // d dist_ij / d x_i = w_ij * (x_i - c_j), with w = 1/dist or 2.
        let weight = |i: usize, j: usize| -> f64 {
            let gij = g.data()[i * n + j];
            match mode {
                DistanceMode::Euclidean => gij / dist.data()[i * n + j],
                DistanceMode::Squared => 2.0 * gij,
            }
        };
        if self.requires_grad(x) {
            let dst = slot(grads, x, xv);
            for i in 0..q {
                let xi = xv.row(i);
                for j in 0..n {
                    let w = weight(i, j);
                    let cj = cv.row(j);
                    for k in 0..d {
                        dst.data_mut()[i * d + k] += w * (xi[k] - cj[k]);
                    }
                }
            }
        }
        if self.requires_grad(c) {
            let dst = slot(grads, c, cv);
            for i in 0..q {
                let xi = xv.row(i);
                for j in 0..n {
                    let w = weight(i, j);
                    let cj = cv.row(j);
                    for k in 0..d {
                        dst.data_mut()[j * d + k] += w * (cj[k] - xi[k]);
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

fn axpy(dst: &mut Tensor, a: f64, x: &[f64]) {
    for (d, xi) in dst.data_mut().iter_mut().zip(x) {
        *d += a * xi;
    }
}
