use super::{Bound, Graph, ParamSet, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    /// max over scalars of |analytic - numeric| / (|numeric| + 1e-8)
    pub max_rel_error: f64,
    /// parameter name and flat index of the worst scalar
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the reverse-mode gradient of `f` against central differences
/// with step `h`, one scalar parameter at a time.
///
/// `f` must be deterministic: re-seed any randomness inside the closure.
pub fn finite_diff_check<F>(params: &ParamSet, h: f64, f: F) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step h must be positive, got {h}")));
    }
    let mut analytic = params.clone();
    analytic.zero_grad();
    {
        let mut g = Graph::new();
        let bound = g.bind(params);
        let loss = f(&mut g, &bound)?;
        g.backward(loss)?;
        analytic.accumulate_grads(&g, &bound)?;
    }

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let bound = g.bind_frozen(p);
        let loss = f(&mut g, &bound)?;
        Ok(g.value(loss).data()[0])
    };

    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut probe = params.clone();
    for (pi, name) in names.iter().enumerate() {
        let n = params.get(name).map_or(0, |t| t.len());
        for k in 0..n {
            let orig = params.get(name).expect("name from this set").data()[k];
            probe.value_at_mut(pi).data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe.value_at_mut(pi).data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe.value_at_mut(pi).data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * h);
            let exact = analytic.grad(name).expect("same names").data()[k];
            let rel = (exact - numeric).abs() / (numeric.abs() + 1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::DistanceMode;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::matrix(1, 3, vec![0.5, -1.5, 2.0]).unwrap())
            .unwrap();
        let r = finite_diff_check(&p, 1e-4, |g, b| {
            let w = b.var("w")?;
            let sq = g.mul(w, w)?;
            let s = g.scale(sq, 3.0)?;
            g.sum(s)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn matmul_sum_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        p.insert("a", random(3, 4, &mut rng)).unwrap();
        let b = random(4, 2, &mut rng);
        let r = finite_diff_check(&p, 1e-4, |g, bound| {
            let a = bound.var("a")?;
            let bb = g.constant(b.clone());
            let out = g.matmul(a, bb)?;
            g.sum(out)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn mixed_graph_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = ParamSet::new();
        p.insert("x", random(3, 4, &mut rng)).unwrap();
        p.insert("c", random(2, 4, &mut rng)).unwrap();
        p.insert("b", random(1, 2, &mut rng)).unwrap();
        for mode in [DistanceMode::Euclidean, DistanceMode::Squared] {
            let r = finite_diff_check(&p, 1e-5, |g, bound| {
                let x = bound.var("x")?;
                let c = bound.var("c")?;
                let b = bound.var("b")?;
                let d = g.pairwise_distance(x, c, mode)?;
                let d = g.add_bias(d, b)?;
                let s = g.softplus(d)?;
                let n = g.scale(s, -1.0)?;
                let l = g.log_sum_exp(n)?;
                let pick = g.gather(d, &[0, 1, 1])?;
                let t = g.sub(l, pick)?;
                g.mean(t)
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{mode:?}: {r:?}");
        }
    }
}
