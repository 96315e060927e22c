//! Breiman-style random forests over [`crate::tree`].
//!
//! Trees are grown on independent observation-level bootstrap resamples, with
//! per-tree rng streams derived deterministically from the master seed and the
//! tree index. Fitting and the per-tree out-of-bag passes run in parallel but
//! reduce in fixed tree order, so any thread count produces bit-identical
//! results.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, derive_seed2};
use crate::tree::{fit_tree_with, PresortedColumns, RegressionTree, TreeParams};

/// Default `mtry` for forests: `⌈3p/4⌉`, large enough to keep the ensemble
/// stable inside iterative fitting loops.
pub fn default_mtry(p: usize) -> usize {
    (3 * p).div_ceil(4).max(1)
}

/// Parameters for fitting a forest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub mtry: usize,
    pub min_node_size: usize,
    /// Observation-level bootstrap resampling (size N, with replacement).
    pub bootstrap: bool,
    pub seed: u64,
}

impl ForestParams {
    /// Standalone defaults: 500 trees, `mtry = ⌈3p/4⌉`, node-size floor 5.
    pub fn standalone(p: usize, seed: u64) -> Self {
        Self {
            n_trees: 500,
            mtry: default_mtry(p),
            min_node_size: 5,
            bootstrap: true,
            seed,
        }
    }
}

/// A fitted ensemble of regression trees.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Forest {
    trees: Vec<RegressionTree>,
    n_features: usize,
    params: ForestParams,
}

/// Out-of-bag mean squared error, with the number of observations that had no
/// out-of-bag tree and were skipped.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OobError {
    pub mse: f64,
    pub n_scored: usize,
    pub n_skipped: usize,
}

/// Fit `n_trees` trees on independent bootstrap resamples of `(x, y)`.
pub fn fit_forest(x: &DMatrix<f64>, y: &DVector<f64>, params: &ForestParams) -> Result<Forest> {
    if params.n_trees == 0 {
        return Err(Error::InvalidParameter("n_trees must be at least 1".into()));
    }
    let tree_params = TreeParams {
        mtry: params.mtry,
        min_node_size: params.min_node_size,
        bootstrap: params.bootstrap,
    };
    let presorted = PresortedColumns::new(x);
    let trees: Vec<RegressionTree> = (0..params.n_trees)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, k as u64));
            fit_tree_with(x, y, &tree_params, &mut rng, &presorted)
        })
        .collect::<Result<_>>()?;
    Ok(Forest {
        trees,
        n_features: x.ncols(),
        params: params.clone(),
    })
}

impl Forest {
    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn trees_mut(&mut self) -> &mut [RegressionTree] {
        &mut self.trees
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    /// Rebuild a forest from parts (model deserialization).
    pub fn from_parts(
        trees: Vec<RegressionTree>,
        n_features: usize,
        params: ForestParams,
    ) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::EmptyInput("forest has no trees".into()));
        }
        if trees.iter().any(|t| t.n_features() != n_features) {
            return Err(Error::InvalidParameter(
                "trees disagree on the number of features".into(),
            ));
        }
        Ok(Self {
            trees,
            n_features,
            params,
        })
    }

    /// Mean of the per-tree predictions for every row of `x`.
    pub fn predict_rows(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let mut acc = DVector::zeros(x.nrows());
        for tree in &self.trees {
            acc += tree.predict_rows(x)?;
        }
        Ok(acc / self.trees.len() as f64)
    }

    /// Mean of the per-tree predictions for a single covariate vector.
    pub fn predict_point(&self, x: &DVector<f64>) -> Result<f64> {
        let mut acc = 0.0;
        for tree in &self.trees {
            acc += tree.predict_point(x)?;
        }
        Ok(acc / self.trees.len() as f64)
    }

    /// Out-of-bag error on the training sample: each observation is predicted
    /// by aggregating only the trees whose bootstrap sample excluded it.
    pub fn oob_error(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OobError> {
        let n = x.nrows();
        if y.len() != n {
            return Err(Error::DimensionMismatch {
                context: "oob responses".into(),
                expected: n,
                actual: y.len(),
            });
        }
        let mut sums = vec![0.0f64; n];
        let mut counts = vec![0u32; n];
        for tree in &self.trees {
            if tree.in_bag().len() != n {
                return Err(Error::DimensionMismatch {
                    context: "in-bag bookkeeping".into(),
                    expected: n,
                    actual: tree.in_bag().len(),
                });
            }
            let pred = tree.predict_rows(x)?;
            for r in 0..n {
                if tree.in_bag()[r] == 0 {
                    sums[r] += pred[r];
                    counts[r] += 1;
                }
            }
        }
        let mut sse = 0.0;
        let mut scored = 0usize;
        for r in 0..n {
            if counts[r] > 0 {
                let err = y[r] - sums[r] / counts[r] as f64;
                sse += err * err;
                scored += 1;
            }
        }
        if scored == 0 {
            return Err(Error::NoOobSamples);
        }
        Ok(OobError {
            mse: sse / scored as f64,
            n_scored: scored,
            n_skipped: n - scored,
        })
    }

    /// Permutation variable importance.
    ///
    /// For each variable: the increase of a tree's error on its out-of-bag
    /// sample after permuting that variable's values within the sample,
    /// averaged over trees. The permutation is redrawn per tree from a stream
    /// derived from `vi_seed`. Variables a tree never splits on contribute
    /// exactly zero for that tree.
    pub fn variable_importance(
        &self,
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        vi_seed: u64,
    ) -> Result<Vec<f64>> {
        let n = x.nrows();
        if y.len() != n {
            return Err(Error::DimensionMismatch {
                context: "importance responses".into(),
                expected: n,
                actual: y.len(),
            });
        }
        let per_tree: Vec<Option<Vec<(usize, f64)>>> = self
            .trees
            .par_iter()
            .enumerate()
            .map(|(k, tree)| {
                let oob: Vec<usize> = (0..n).filter(|&r| tree.in_bag()[r] == 0).collect();
                if oob.is_empty() {
                    return Ok(None);
                }
                let m = oob.len();
                let baseline: f64 = oob
                    .iter()
                    .map(|&r| {
                        let e = y[r] - tree.predict_rows_one(x, r);
                        e * e
                    })
                    .sum::<f64>()
                    / m as f64;
                let mut diffs = Vec::new();
                for var in tree.used_variables() {
                    let mut perm: Vec<usize> = oob.clone();
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed2(
                        vi_seed,
                        k as u64,
                        var as u64,
                    ));
                    for i in (1..m).rev() {
                        let j = rng.random_range(0..=i);
                        perm.swap(i, j);
                    }
                    let permuted: f64 = (0..m)
                        .map(|i| {
                            let row = oob[i];
                            let src = perm[i];
                            let pred = tree.predict_with_substitute(x, row, var, src);
                            let e = y[row] - pred;
                            e * e
                        })
                        .sum::<f64>()
                        / m as f64;
                    diffs.push((var, permuted - baseline));
                }
                Ok(Some(diffs))
            })
            .collect::<Result<_>>()?;

        let mut vi = vec![0.0; self.n_features];
        let mut trees_with_oob = 0usize;
        for entry in per_tree {
            if let Some(diffs) = entry {
                trees_with_oob += 1;
                for (var, d) in diffs {
                    vi[var] += d;
                }
            }
        }
        if trees_with_oob == 0 {
            return Err(Error::NoOobSamples);
        }
        for v in &mut vi {
            *v /= trees_with_oob as f64;
        }
        Ok(vi)
    }
}

/// Rank variables by importance, descending; ties break toward the smaller
/// variable index. Returns variable indices.
pub fn rank_by_importance(vi: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..vi.len()).collect();
    order.sort_by(|&a, &b| {
        vi[b]
            .partial_cmp(&vi[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

impl RegressionTree {
    /// Prediction for one row of a matrix.
    fn predict_rows_one(&self, x: &DMatrix<f64>, row: usize) -> f64 {
        self.predict_row_with(|v| x[(row, v)])
    }

    /// Prediction for `row` with the value of `var` taken from row `src`.
    fn predict_with_substitute(&self, x: &DMatrix<f64>, row: usize, var: usize, src: usize) -> f64 {
        self.predict_row_with(|v| if v == var { x[(src, v)] } else { x[(row, v)] })
    }
}
