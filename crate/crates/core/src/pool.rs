//! Labeled/unlabeled partition of a dataset.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Sorted, disjoint index sets covering `0..n`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PoolState {
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
}

impl PoolState {
    /// Uniformly random `m`-subset of `0..n` becomes the labeled pool.
    pub fn init(n: usize, m: usize, rng: &mut Rng) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("initial pool size must be positive"));
        }
        if m > n {
            return Err(Error::invalid(format!("initial pool {m} exceeds dataset size {n}")));
        }
        let picked = index::sample(rng, n, m).into_vec();
        Self::from_labeled(n, picked)
    }

    /// Pool whose labeled side is exactly `labeled` (any order, no duplicates).
    pub fn from_labeled(n: usize, mut labeled: Vec<usize>) -> Result<Self> {
        labeled.sort_unstable();
        if labeled.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate labeled index"));
        }
        if labeled.last().is_some_and(|&i| i >= n) {
            return Err(Error::invalid(format!("labeled index out of range {n}")));
        }
        let unlabeled = complement(n, &labeled);
        Ok(PoolState { labeled, unlabeled })
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Moves `selected` from the unlabeled to the labeled side. The simulated
    /// oracle's answers are the dataset's own labels, so nothing else changes.
    pub fn annotate(&self, selected: &[usize]) -> Result<PoolState> {
        if selected.is_empty() {
            return Ok(self.clone());
        }
        let mut sel = selected.to_vec();
        sel.sort_unstable();
        if sel.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("selection contains duplicates"));
        }
        for &i in &sel {
            if self.unlabeled.binary_search(&i).is_err() {
                return Err(Error::invalid(format!("index {i} is not in the unlabeled pool")));
            }
        }
        let mut labeled = self.labeled.clone();
        labeled.extend_from_slice(&sel);
        labeled.sort_unstable();
        let unlabeled = self
            .unlabeled
            .iter()
            .copied()
            .filter(|i| sel.binary_search(i).is_err())
            .collect();
        Ok(PoolState { labeled, unlabeled })
    }
}

fn complement(n: usize, sorted: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(n - sorted.len());
    let mut it = sorted.iter().peekable();
    for i in 0..n {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}
