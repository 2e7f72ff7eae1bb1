//! Random near-equal partition of subjects for cross-fitting.

use rand::seq::SliceRandom;

use crate::error::{invalid_config, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    fold_of: Vec<usize>,
    num_folds: usize,
}

impl FoldAssignment {
    pub fn num_folds(&self) -> usize {
        self.num_folds
    }

    pub fn len(&self) -> usize {
        self.fold_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fold_of.is_empty()
    }

    pub fn fold_of(&self, i: usize) -> usize {
        self.fold_of[i]
    }

    /// Members of fold `s` (`I_s`), ascending.
    pub fn members(&self, s: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] == s)
            .collect()
    }

    /// Complement of fold `s` (`I_s^c`), ascending.
    pub fn complement(&self, s: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] != s)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_folds];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Uniformly random partition of `0..n` into `s` folds whose sizes differ by
/// at most one.
pub fn split_folds(n: usize, s: usize, rng: &RngStream) -> Result<FoldAssignment> {
    if s == 0 || s > n {
        return Err(invalid_config(format!(
            "fold count must satisfy 1 <= S <= N (got S={s}, N={n})"
        )));
    }
    if n % s != 0 {
        log::warn!("{n} subjects do not split evenly into {s} folds; sizes will differ by one");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng.generator());
    let mut fold_of = vec![0; n];
    // position p in the shuffled order goes to fold p mod s: first n mod s folds get the extra one
    for (p, &i) in order.iter().enumerate() {
        fold_of[i] = p % s;
    }
    Ok(FoldAssignment {
        fold_of,
        num_folds: s,
    })
}
