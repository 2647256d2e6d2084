use rand::seq::index;
use rand::Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One training update's task: `N` classes with `K` supports and `K_Q`
/// queries each, disjoint within every class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
    pub shots: usize,
    pub queries_per_class: usize,
}

impl Episode {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Position of `label` within `classes`.
    pub fn position(&self, label: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }

    pub fn support_positions(&self) -> Vec<usize> {
        self.positions(&self.support_labels)
    }

    pub fn query_positions(&self) -> Vec<usize> {
        self.positions(&self.query_labels)
    }

    fn positions(&self, labels: &[usize]) -> Vec<usize> {
        labels
            .iter()
            .map(|&y| self.position(y).expect("episode labels belong to its classes"))
            .collect()
    }

    pub fn support_features(&self, ds: &Dataset) -> Result<Tensor> {
        ds.features().select_rows(&self.support)
    }

    pub fn query_features(&self, ds: &Dataset) -> Result<Tensor> {
        ds.features().select_rows(&self.query)
    }
}

/// Picks `n` distinct classes, then per class `k` supports and `k_query`
/// queries drawn without replacement from the rest of that class.
pub fn sample_episode<R: Rng>(
    ds: &Dataset,
    n: usize,
    k: usize,
    k_query: usize,
    rng: &mut R,
) -> Result<Episode> {
    let m = ds.num_classes();
    if n == 0 || k == 0 || k_query == 0 {
        return Err(Error::Parameter(format!(
            "episode sizes must be positive (N={n}, K={k}, K_Q={k_query})"
        )));
    }
    if n > m {
        return Err(Error::Parameter(format!("N={n} exceeds class count {m}")));
    }
    let classes = index::sample(rng, m, n).into_vec();
    let mut ep = Episode {
        classes: classes.clone(),
        support: Vec::with_capacity(n * k),
        support_labels: Vec::with_capacity(n * k),
        query: Vec::with_capacity(n * k_query),
        query_labels: Vec::with_capacity(n * k_query),
        shots: k,
        queries_per_class: k_query,
    };
    for &c in &classes {
        let rows = ds.class_rows(c);
        if rows.len() < k + k_query {
            return Err(Error::Sampling(format!(
                "class {c} has {} samples, episode needs {}",
                rows.len(),
                k + k_query
            )));
        }
        let picked = index::sample(rng, rows.len(), k + k_query).into_vec();
        for (i, &p) in picked.iter().enumerate() {
            if i < k {
                ep.support.push(rows[p]);
                ep.support_labels.push(c);
            } else {
                ep.query.push(rows[p]);
                ep.query_labels.push(c);
            }
        }
    }
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngStreams, EPISODES};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn dataset(per_class: &[usize]) -> Dataset {
        let labels: Vec<usize> = per_class
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect();
        let n = labels.len();
        let f = Tensor::matrix(n, 1, (0..n).map(|i| i as f64 / n as f64).collect()).unwrap();
        Dataset::new(f, labels, per_class.len()).unwrap()
    }

    #[test]
    fn forced_episode_uses_both_samples() {
        let ds = dataset(&[2, 2, 2]);
        let ep = sample_episode(&ds, 3, 1, 1, &mut RngStreams::new(0).stream(EPISODES)).unwrap();
        let mut all: Vec<usize> = ep.support.iter().chain(&ep.query).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        for (s, q) in ep.support.iter().zip(&ep.query) {
            assert_eq!(ds.labels()[*s], ds.labels()[*q]);
        }
    }

    #[test]
    fn seeded_episode_is_reproducible() {
        let ds = dataset(&[20, 20, 20, 20]);
        let a = sample_episode(&ds, 3, 2, 4, &mut RngStreams::new(9).stream(EPISODES)).unwrap();
        let b = sample_episode(&ds, 3, 2, 4, &mut RngStreams::new(9).stream(EPISODES)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_and_sampling_errors() {
        let ds = dataset(&[5, 1]);
        let mut rng = RngStreams::new(0).stream(EPISODES);
        assert!(matches!(sample_episode(&ds, 3, 1, 1, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(sample_episode(&ds, 2, 1, 1, &mut rng), Err(Error::Sampling(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn episode_invariants(
            sizes in proptest::collection::vec(4usize..12, 2..7),
            n_frac in 0.0f64..1.0,
            k in 1usize..3,
            kq in 1usize..3,
            seed in any::<u64>(),
        ) {
            let ds = dataset(&sizes);
            let n = 1 + ((sizes.len() - 1) as f64 * n_frac) as usize;
            let ep = sample_episode(&ds, n, k, kq, &mut RngStreams::new(seed).stream(EPISODES)).unwrap();
            prop_assert_eq!(ep.support.len(), n * k);
            prop_assert_eq!(ep.query.len(), n * kq);
            let s: HashSet<_> = ep.support.iter().collect();
            prop_assert!(ep.query.iter().all(|q| !s.contains(q)));
            let classes: HashSet<_> = ep.classes.iter().collect();
            prop_assert_eq!(classes.len(), n);
            for (&row, &y) in ep.support.iter().zip(&ep.support_labels).chain(ep.query.iter().zip(&ep.query_labels)) {
                prop_assert!(classes.contains(&y));
                prop_assert_eq!(ds.labels()[row], y);
            }
            for &c in &ep.classes {
                prop_assert_eq!(ep.support_labels.iter().filter(|&&y| y == c).count(), k);
                prop_assert_eq!(ep.query_labels.iter().filter(|&&y| y == c).count(), kq);
            }
        }
    }
}
