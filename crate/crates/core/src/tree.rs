//! Randomized maximal regression trees.
//!
//! Trees are grown without pruning: a node is split as long as it holds at
//! least `2 * min_node_size` observations, its response is not constant and
//! some sampled candidate variable still varies. The split criterion is
//! within-node variance reduction, optimized over `mtry` variables drawn
//! without replacement per node. Thresholds sit at the midpoint of adjacent
//! observed values and ties route left (`<=` goes to the left child).
//!
//! [`gls_refit_leaves`] replaces the in-bag leaf means with the generalized
//! least-squares solution against the intra-individual covariance, which
//! turns a plain tree into its REEM variant.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BlockCovariance, IndividualBlock, LongitudinalDataset};
use crate::error::{Error, Result};

/// One node of a fitted tree. Children always have larger indices than their
/// parent; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Internal {
        variable: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        leaf_id: usize,
        value: f64,
    },
}

/// Parameters for growing one tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeParams {
    /// Number of candidate split variables sampled per node.
    pub mtry: usize,
    /// Nodes smaller than `2 * min_node_size` are not split.
    pub min_node_size: usize,
    /// Grow on a bootstrap resample (observation level, size N with
    /// replacement) instead of the full sample.
    pub bootstrap: bool,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            mtry: 1,
            min_node_size: 5,
            bootstrap: false,
        }
    }
}

/// A fitted regression tree with its bootstrap bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
    n_leaves: usize,
    n_features: usize,
    mtry: usize,
    /// In-bag multiplicity per training observation.
    in_bag: Vec<u32>,
}

/// Per-individual leaf membership: row `j` of the dense form has a single 1
/// at the leaf containing that observation.
#[derive(Debug, Clone)]
pub struct LeafIndicator {
    pub assignments: Vec<usize>,
    pub n_leaves: usize,
}

impl LeafIndicator {
    /// Materialize the `n_i × L` 0/1 matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.assignments.len(), self.n_leaves);
        for (row, &leaf) in self.assignments.iter().enumerate() {
            m[(row, leaf)] = 1.0;
        }
        m
    }
}

impl RegressionTree {
    /// Rebuild a tree from raw parts, validating the structural invariants:
    /// children follow their parent, every non-root node is referenced exactly
    /// once and leaf ids are `0..L-1` without gaps.
    pub fn from_parts(
        nodes: Vec<Node>,
        n_features: usize,
        mtry: usize,
        in_bag: Vec<u32>,
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::EmptyInput("tree has no nodes".into()));
        }
        let mut referenced = vec![0usize; nodes.len()];
        let mut leaf_ids = Vec::new();
        for (i, node) in nodes.iter().enumerate() {
            match *node {
                Node::Internal {
                    variable,
                    left,
                    right,
                    ..
                } => {
                    if variable >= n_features {
                        return Err(Error::InvalidParameter(format!(
                            "split variable {variable} out of range"
                        )));
                    }
                    for child in [left, right] {
                        if child <= i || child >= nodes.len() {
                            return Err(Error::InvalidParameter(format!(
                                "child index {child} of node {i} is invalid"
                            )));
                        }
                        referenced[child] += 1;
                    }
                }
                Node::Leaf { leaf_id, .. } => leaf_ids.push(leaf_id),
            }
        }
        if referenced[0] != 0 || referenced[1..].iter().any(|&r| r != 1) {
            return Err(Error::InvalidParameter(
                "tree nodes are not a single rooted binary tree".into(),
            ));
        }
        let n_leaves = leaf_ids.len();
        leaf_ids.sort_unstable();
        if leaf_ids != (0..n_leaves).collect::<Vec<_>>() {
            return Err(Error::InvalidParameter(
                "leaf ids must be 0..L-1 without gaps".into(),
            ));
        }
        Ok(Self {
            nodes,
            n_leaves,
            n_features,
            mtry,
            in_bag,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_leaves(&self) -> usize {
        self.n_leaves
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn mtry(&self) -> usize {
        self.mtry
    }

    /// In-bag multiplicity per training observation.
    pub fn in_bag(&self) -> &[u32] {
        &self.in_bag
    }

    /// Current value of every leaf, indexed by leaf id.
    pub fn leaf_values(&self) -> Vec<f64> {
        let mut values = vec![0.0; self.n_leaves];
        for node in &self.nodes {
            if let Node::Leaf { leaf_id, value } = *node {
                values[leaf_id] = value;
            }
        }
        values
    }

    pub(crate) fn set_leaf_values(&mut self, values: &[f64]) {
        for node in &mut self.nodes {
            if let Node::Leaf { leaf_id, value } = node {
                *value = values[*leaf_id];
            }
        }
    }

    /// Variables used by at least one split.
    pub fn used_variables(&self) -> Vec<usize> {
        let mut used: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Internal { variable, .. } => Some(*variable),
                Node::Leaf { .. } => None,
            })
            .collect();
        used.sort_unstable();
        used.dedup();
        used
    }

    /// Prediction with covariate access through a closure (used for the
    /// permutation importance pass, which substitutes single coordinates).
    #[inline]
    pub(crate) fn predict_row_with(&self, get: impl Fn(usize) -> f64) -> f64 {
        self.route(get).1
    }

    #[inline]
    fn route(&self, get: impl Fn(usize) -> f64) -> (usize, f64) {
        let mut node = 0;
        loop {
            match self.nodes[node] {
                Node::Internal {
                    variable,
                    threshold,
                    left,
                    right,
                } => {
                    node = if get(variable) <= threshold { left } else { right };
                }
                Node::Leaf { leaf_id, value } => return (leaf_id, value),
            }
        }
    }

    fn check_columns(&self, ncols: usize) -> Result<()> {
        if ncols != self.n_features {
            return Err(Error::DimensionMismatch {
                context: "prediction covariates".into(),
                expected: self.n_features,
                actual: ncols,
            });
        }
        Ok(())
    }

    /// Predict every row of `x`.
    pub fn predict_rows(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_columns(x.ncols())?;
        Ok(DVector::from_fn(x.nrows(), |r, _| {
            self.route(|v| x[(r, v)]).1
        }))
    }

    /// Predict a single covariate vector.
    pub fn predict_point(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_columns(x.len())?;
        Ok(self.route(|v| x[v]).1)
    }

    /// Leaf id of every row of `x`.
    pub fn leaf_assignments(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        self.check_columns(x.ncols())?;
        Ok((0..x.nrows())
            .map(|r| self.route(|v| x[(r, v)]).0)
            .collect())
    }
}

/// Leaf membership of one individual's observations.
pub fn leaf_indicator(tree: &RegressionTree, block: &IndividualBlock) -> Result<LeafIndicator> {
    Ok(LeafIndicator {
        assignments: tree.leaf_assignments(&block.x)?,
        n_leaves: tree.n_leaves(),
    })
}

/// Per-column row orderings of a covariate matrix, computed once and shared
/// by every tree grown on it.
#[derive(Debug, Clone)]
pub struct PresortedColumns {
    columns: Vec<Vec<u32>>,
    n_rows: usize,
}

impl PresortedColumns {
    pub fn new(x: &DMatrix<f64>) -> Self {
        let n = x.nrows();
        let columns = (0..x.ncols())
            .map(|c| {
                let col = x.column(c);
                let mut order: Vec<u32> = (0..n as u32).collect();
                order.sort_unstable_by(|&a, &b| {
                    col[a as usize].total_cmp(&col[b as usize])
                });
                order
            })
            .collect();
        Self { columns, n_rows: n }
    }
}

struct Builder<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    mtry: usize,
    min_node_size: usize,
    idx: Vec<u32>,
    var_pool: Vec<u32>,
    scratch: Vec<(f64, f64)>,
    presorted: &'a PresortedColumns,
    // node-membership multiplicities, epoch-stamped to avoid clearing
    member_count: Vec<u32>,
    member_epoch: Vec<u32>,
    epoch: u32,
    nodes: Vec<Node>,
    n_leaves: usize,
}

enum SplitDecision {
    Leaf(f64),
    Split {
        variable: usize,
        threshold: f64,
        mid: usize,
    },
}

impl<'a> Builder<'a> {
    fn decide(&mut self, start: usize, end: usize, rng: &mut ChaCha8Rng) -> SplitDecision {
        let m = end - start;
        let mut sum = 0.0;
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        for &r in &self.idx[start..end] {
            let v = self.y[r as usize];
            sum += v;
            y_min = y_min.min(v);
            y_max = y_max.max(v);
        }
        let mean = sum / m as f64;
        if m < 2 * self.min_node_size || y_min == y_max {
            return SplitDecision::Leaf(mean);
        }

        let p = self.x.ncols();
        for k in 0..self.mtry {
            let j = rng.random_range(k..p);
            self.var_pool.swap(k, j);
        }

        // For large nodes, filtering the presorted column order beats
        // re-sorting the node's values; for small nodes the sort wins.
        let use_presorted = m * m.ilog2().max(1) as usize > 2 * self.presorted.n_rows;
        if use_presorted {
            self.epoch += 1;
            for &r in &self.idx[start..end] {
                let r = r as usize;
                if self.member_epoch[r] != self.epoch {
                    self.member_epoch[r] = self.epoch;
                    self.member_count[r] = 0;
                }
                self.member_count[r] += 1;
            }
        }

        // Maximizing Σ_left y² / m_left + Σ_right y² / m_right is equivalent to
        // maximizing the variance reduction; the parent term is constant.
        let mut best_proxy = sum * sum / m as f64;
        let mut best: Option<(usize, f64)> = None;
        for ci in 0..self.mtry {
            let var = self.var_pool[ci] as usize;
            self.scratch.clear();
            let col = self.x.column(var);
            if use_presorted {
                for &r in &self.presorted.columns[var] {
                    let r = r as usize;
                    if self.member_epoch[r] == self.epoch {
                        let pair = (col[r], self.y[r]);
                        for _ in 0..self.member_count[r] {
                            self.scratch.push(pair);
                        }
                    }
                }
                if self.scratch[0].0 == self.scratch[m - 1].0 {
                    continue;
                }
            } else {
                let mut v_min = f64::INFINITY;
                let mut v_max = f64::NEG_INFINITY;
                for &r in &self.idx[start..end] {
                    let xv = col[r as usize];
                    v_min = v_min.min(xv);
                    v_max = v_max.max(xv);
                    self.scratch.push((xv, self.y[r as usize]));
                }
                if v_min == v_max {
                    continue;
                }
                self.scratch
                    .sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            }
            let mut left_sum = 0.0;
            for i in 1..m {
                left_sum += self.scratch[i - 1].1;
                let (a, b) = (self.scratch[i - 1].0, self.scratch[i].0);
                if b > a {
                    let right_sum = sum - left_sum;
                    let proxy = left_sum * left_sum / i as f64
                        + right_sum * right_sum / (m - i) as f64;
                    if proxy > best_proxy {
                        best_proxy = proxy;
                        let mut threshold = 0.5 * (a + b);
                        if threshold >= b {
                            // midpoint rounded up to the right value; the left
                            // value partitions the node identically
                            threshold = a;
                        }
                        best = Some((var, threshold));
                    }
                }
            }
        }

        match best {
            None => SplitDecision::Leaf(mean),
            Some((variable, threshold)) => {
                let col = self.x.column(variable);
                let (mut i, mut j) = (start, end);
                while i < j {
                    if col[self.idx[i] as usize] <= threshold {
                        i += 1;
                    } else {
                        j -= 1;
                        self.idx.swap(i, j);
                    }
                }
                debug_assert!(i > start && i < end);
                SplitDecision::Split {
                    variable,
                    threshold,
                    mid: i,
                }
            }
        }
    }

    fn push_leaf(&mut self, value: f64) -> usize {
        let leaf_id = self.n_leaves;
        self.n_leaves += 1;
        self.nodes.push(Node::Leaf { leaf_id, value });
        self.nodes.len() - 1
    }

    fn build(&mut self, rng: &mut ChaCha8Rng) {
        // (start, end, parent slot + which side), processed left-first so leaf
        // ids come out in depth-first order
        let mut stack: Vec<(usize, usize, Option<(usize, bool)>)> =
            vec![(0, self.idx.len(), None)];
        while let Some((start, end, parent)) = stack.pop() {
            let node_idx = match self.decide(start, end, rng) {
                SplitDecision::Leaf(value) => self.push_leaf(value),
                SplitDecision::Split {
                    variable,
                    threshold,
                    mid,
                } => {
                    self.nodes.push(Node::Internal {
                        variable,
                        threshold,
                        left: 0,
                        right: 0,
                    });
                    let idx = self.nodes.len() - 1;
                    stack.push((mid, end, Some((idx, false))));
                    stack.push((start, mid, Some((idx, true))));
                    idx
                }
            };
            if let Some((slot, is_left)) = parent {
                if let Node::Internal { left, right, .. } = &mut self.nodes[slot] {
                    if is_left {
                        *left = node_idx;
                    } else {
                        *right = node_idx;
                    }
                }
            }
        }
    }
}

/// Grow a maximal randomized regression tree on `(x, y)`.
///
/// Deterministic given the rng stream: the same stream always yields the same
/// tree. Leaf values are the in-bag means of `y`.
pub fn fit_tree(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    params: &TreeParams,
    rng: &mut ChaCha8Rng,
) -> Result<RegressionTree> {
    fit_tree_with(x, y, params, rng, &PresortedColumns::new(x))
}

/// [`fit_tree`] with column orderings computed once by the caller; ensembles
/// share them across trees.
pub fn fit_tree_with(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    params: &TreeParams,
    rng: &mut ChaCha8Rng,
    presorted: &PresortedColumns,
) -> Result<RegressionTree> {
    let n = x.nrows();
    let p = x.ncols();
    if n == 0 || p == 0 {
        return Err(Error::EmptyInput("tree training data".into()));
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            context: "tree responses".into(),
            expected: n,
            actual: y.len(),
        });
    }
    if params.mtry < 1 || params.mtry > p {
        return Err(Error::InvalidParameter(format!(
            "mtry must lie in [1, {p}], got {}",
            params.mtry
        )));
    }
    if params.min_node_size < 1 {
        return Err(Error::InvalidParameter(
            "min_node_size must be at least 1".into(),
        ));
    }

    let mut in_bag = vec![0u32; n];
    if params.bootstrap {
        for _ in 0..n {
            in_bag[rng.random_range(0..n)] += 1;
        }
    } else {
        in_bag.fill(1);
    }
    let mut idx = Vec::with_capacity(n);
    for (r, &c) in in_bag.iter().enumerate() {
        for _ in 0..c {
            idx.push(r as u32);
        }
    }

    let mut builder = Builder {
        x,
        y,
        mtry: params.mtry,
        min_node_size: params.min_node_size,
        idx,
        var_pool: (0..p as u32).collect(),
        scratch: Vec::with_capacity(n),
        presorted,
        member_count: vec![0; n],
        member_epoch: vec![0; n],
        epoch: 0,
        nodes: Vec::new(),
        n_leaves: 0,
    };
    builder.build(rng);

    Ok(RegressionTree {
        nodes: builder.nodes,
        n_leaves: builder.n_leaves,
        n_features: p,
        mtry: params.mtry,
        in_bag,
    })
}

/// Replace the leaf values of `tree` by the generalized least-squares solution
///
/// ```text
/// μ̂ = (Σ_i Φ_iᵀ V_i⁻¹ Φ_i)⁻¹ (Σ_i Φ_iᵀ V_i⁻¹ Y_i)
/// ```
///
/// over all individuals of `dataset`, weighting by the factored marginal
/// covariances `covs`. Leaves that no observation of the dataset reaches keep
/// their in-bag mean and are excluded from the system. Returns the full
/// leaf-value vector.
pub fn gls_refit_leaves(
    tree: &mut RegressionTree,
    dataset: &LongitudinalDataset,
    covs: &[BlockCovariance],
) -> Result<Vec<f64>> {
    if covs.len() != dataset.n() {
        return Err(Error::DimensionMismatch {
            context: "covariance factorizations".into(),
            expected: dataset.n(),
            actual: covs.len(),
        });
    }
    let n_leaves = tree.n_leaves();
    let assignments: Vec<Vec<usize>> = dataset
        .individuals()
        .iter()
        .map(|b| tree.leaf_assignments(&b.x))
        .collect::<Result<_>>()?;

    let mut occupancy = vec![0usize; n_leaves];
    for a in &assignments {
        for &leaf in a {
            occupancy[leaf] += 1;
        }
    }
    let active: Vec<usize> = (0..n_leaves).filter(|&l| occupancy[l] > 0).collect();
    let mut position = vec![usize::MAX; n_leaves];
    for (pos, &leaf) in active.iter().enumerate() {
        position[leaf] = pos;
    }

    let la = active.len();
    let mut gram = DMatrix::zeros(la, la);
    let mut rhs = DVector::zeros(la);
    for (bi, block) in dataset.individuals().iter().enumerate() {
        if covs[bi].n() != block.n_obs() {
            return Err(Error::DimensionMismatch {
                context: format!("covariance of individual `{}`", block.id),
                expected: block.n_obs(),
                actual: covs[bi].n(),
            });
        }
        let w = covs[bi].inverse();
        let vy = covs[bi].solve(&block.y);
        let a = &assignments[bi];
        for j in 0..block.n_obs() {
            let lj = position[a[j]];
            rhs[lj] += vy[j];
            for k in 0..block.n_obs() {
                gram[(lj, position[a[k]])] += w[(j, k)];
            }
        }
    }

    let chol = Cholesky::new(gram).ok_or_else(|| {
        Error::SingularLeafSystem("leaf Gram matrix is not positive definite".into())
    })?;
    let mu = chol.solve(&rhs);

    let mut values = tree.leaf_values();
    for (pos, &leaf) in active.iter().enumerate() {
        values[leaf] = mu[pos];
    }
    tree.set_leaf_values(&values);
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{marginal_covariance, VarianceComponents};
    use crate::kernel::KernelSpec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_xy(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut r = rng(seed);
        let x = DMatrix::from_fn(n, p, |_, _| r.random::<f64>() * 10.0);
        let y = DVector::from_fn(n, |_, _| r.random::<f64>() * 4.0 - 2.0);
        (x, y)
    }

    #[test]
    fn constant_response_gives_single_leaf() {
        let x = DMatrix::from_fn(10, 3, |r, c| (r * 3 + c) as f64);
        let y = DVector::from_element(10, 7.5);
        let tree = fit_tree(&x, &y, &TreeParams::default(), &mut rng(1)).unwrap();
        assert_eq!(tree.n_leaves(), 1);
        assert_eq!(tree.predict_point(&DVector::zeros(3)).unwrap(), 7.5);
    }

    #[test]
    fn perfect_binary_split() {
        let x = DMatrix::from_fn(8, 1, |r, _| if r < 4 { 0.0 } else { 1.0 });
        let y = DVector::from_fn(8, |r, _| if r < 4 { 0.0 } else { 10.0 });
        let params = TreeParams {
            mtry: 1,
            min_node_size: 1,
            bootstrap: false,
        };
        let tree = fit_tree(&x, &y, &params, &mut rng(3)).unwrap();
        assert_eq!(tree.n_leaves(), 2);
        let mut leaves = tree.leaf_values();
        leaves.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(leaves, vec![0.0, 10.0]);
        assert_eq!(
            tree.predict_point(&DVector::from_element(1, 0.2)).unwrap(),
            0.0
        );
    }

    #[test]
    fn maximal_tree_memorizes_training_data() {
        let (x, y) = random_xy(50, 4, 11);
        let params = TreeParams {
            mtry: 4,
            min_node_size: 1,
            bootstrap: false,
        };
        let tree = fit_tree(&x, &y, &params, &mut rng(5)).unwrap();
        let pred = tree.predict_rows(&x).unwrap();
        for r in 0..50 {
            assert_eq!(pred[r], y[r], "row {r}");
        }
    }

    #[test]
    fn tie_at_threshold_routes_left() {
        let x = DMatrix::from_vec(4, 1, vec![1.0, 1.0, 3.0, 3.0]);
        let y = DVector::from_vec(vec![0.0, 0.0, 8.0, 8.0]);
        let params = TreeParams {
            mtry: 1,
            min_node_size: 1,
            bootstrap: false,
        };
        let tree = fit_tree(&x, &y, &params, &mut rng(2)).unwrap();
        // threshold is the midpoint 2.0; a query exactly there goes left
        assert_eq!(
            tree.predict_point(&DVector::from_element(1, 2.0)).unwrap(),
            0.0
        );
    }

    #[test]
    fn fit_is_deterministic_given_stream() {
        let (x, y) = random_xy(60, 5, 21);
        let params = TreeParams {
            mtry: 3,
            min_node_size: 2,
            bootstrap: true,
        };
        let t1 = fit_tree(&x, &y, &params, &mut rng(9)).unwrap();
        let t2 = fit_tree(&x, &y, &params, &mut rng(9)).unwrap();
        assert_eq!(t1.nodes(), t2.nodes());
        assert_eq!(t1.in_bag(), t2.in_bag());
    }

    #[test]
    fn mtry_out_of_range_is_rejected() {
        let (x, y) = random_xy(10, 2, 1);
        let params = TreeParams {
            mtry: 3,
            min_node_size: 1,
            bootstrap: false,
        };
        assert!(fit_tree(&x, &y, &params, &mut rng(0)).is_err());
        assert!(fit_tree(&DMatrix::zeros(0, 2), &DVector::zeros(0), &TreeParams::default(), &mut rng(0)).is_err());
    }

    #[test]
    fn prediction_rejects_column_mismatch() {
        let (x, y) = random_xy(10, 3, 2);
        let tree = fit_tree(&x, &y, &TreeParams { mtry: 3, min_node_size: 2, bootstrap: false }, &mut rng(0)).unwrap();
        assert!(tree.predict_rows(&DMatrix::zeros(2, 4)).is_err());
    }

    fn block_from(x: DMatrix<f64>, y: Vec<f64>, id: &str) -> IndividualBlock {
        let n = x.nrows();
        IndividualBlock {
            id: id.into(),
            times: (1..=n).map(|t| t as f64).collect(),
            x,
            z: DMatrix::from_element(n, 1, 1.0),
            y: DVector::from_vec(y),
        }
    }

    #[test]
    fn leaf_indicator_single_leaf_is_ones() {
        let (x, y) = random_xy(6, 2, 3);
        let tree = fit_tree(
            &x,
            &y,
            &TreeParams { mtry: 2, min_node_size: 10, bootstrap: false },
            &mut rng(4),
        )
        .unwrap();
        assert_eq!(tree.n_leaves(), 1);
        let block = block_from(DMatrix::from_fn(3, 2, |r, c| (r + c) as f64), vec![1.0; 3], "a");
        let phi = leaf_indicator(&tree, &block).unwrap().to_dense();
        assert_eq!(phi, DMatrix::from_element(3, 1, 1.0));
    }

    #[test]
    fn leaf_indicator_two_leaf_column_sums() {
        let x = DMatrix::from_vec(4, 1, vec![0.0, 0.0, 4.0, 4.0]);
        let y = DVector::from_vec(vec![1.0, 1.0, 9.0, 9.0]);
        let tree = fit_tree(
            &x,
            &y,
            &TreeParams { mtry: 1, min_node_size: 1, bootstrap: false },
            &mut rng(4),
        )
        .unwrap();
        assert_eq!(tree.n_leaves(), 2);
        let block = block_from(DMatrix::from_vec(3, 1, vec![0.5, 1.0, 5.0]), vec![0.0; 3], "b");
        let phi = leaf_indicator(&tree, &block).unwrap().to_dense();
        let row_sums: Vec<f64> = (0..3).map(|r| phi.row(r).sum()).collect();
        assert_eq!(row_sums, vec![1.0; 3]);
        let mut col_sums: Vec<f64> = (0..2).map(|c| phi.column(c).sum()).collect();
        col_sums.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(col_sums, vec![1.0, 2.0]);
    }

    #[test]
    fn gls_refit_identity_covariance_gives_leaf_means() {
        let (x, y) = random_xy(12, 2, 17);
        let mut tree = fit_tree(
            &x,
            &y,
            &TreeParams { mtry: 2, min_node_size: 2, bootstrap: false },
            &mut rng(6),
        )
        .unwrap();
        let before = tree.leaf_values();
        // dataset = the training sample split into 4 individuals of 3 rows
        let blocks: Vec<IndividualBlock> = (0..4)
            .map(|i| {
                let rows: Vec<usize> = (0..3).map(|j| i * 3 + j).collect();
                block_from(
                    DMatrix::from_fn(3, 2, |r, c| x[(rows[r], c)]),
                    rows.iter().map(|&r| y[r]).collect(),
                    &format!("i{i}"),
                )
            })
            .collect();
        let ds = LongitudinalDataset::new(blocks).unwrap();
        let vc = VarianceComponents::new(DMatrix::zeros(1, 1), 0.0, 1.0).unwrap();
        let covs: Vec<_> = ds
            .individuals()
            .iter()
            .map(|b| marginal_covariance(b, &vc, &KernelSpec::None).unwrap())
            .collect();
        let after = gls_refit_leaves(&mut tree, &ds, &covs).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn gls_refit_scalar_weighted_example() {
        // one leaf, two individuals with n_i = 1, V_1 = [2], V_2 = [1],
        // Y = (4, 1)  →  μ̂ = (4/2 + 1/1) / (1/2 + 1/1) = 2
        let nodes = vec![Node::Leaf { leaf_id: 0, value: 0.0 }];
        let mut tree = RegressionTree::from_parts(nodes, 1, 1, vec![1, 1]).unwrap();
        let b1 = block_from(DMatrix::from_element(1, 1, 0.0), vec![4.0], "1");
        let b2 = block_from(DMatrix::from_element(1, 1, 1.0), vec![1.0], "2");
        let ds = LongitudinalDataset::new(vec![b1, b2]).unwrap();
        let vc1 = VarianceComponents::new(DMatrix::zeros(1, 1), 0.0, 2.0).unwrap();
        let vc2 = VarianceComponents::new(DMatrix::zeros(1, 1), 0.0, 1.0).unwrap();
        let covs = vec![
            marginal_covariance(&ds.individuals()[0], &vc1, &KernelSpec::None).unwrap(),
            marginal_covariance(&ds.individuals()[1], &vc2, &KernelSpec::None).unwrap(),
        ];
        let mu = gls_refit_leaves(&mut tree, &ds, &covs).unwrap();
        assert_relative_eq!(mu[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(tree.leaf_values()[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn from_parts_rejects_malformed_trees() {
        // gap in leaf ids
        let nodes = vec![
            Node::Internal { variable: 0, threshold: 0.5, left: 1, right: 2 },
            Node::Leaf { leaf_id: 0, value: 1.0 },
            Node::Leaf { leaf_id: 2, value: 2.0 },
        ];
        assert!(RegressionTree::from_parts(nodes, 1, 1, vec![]).is_err());
        // child pointing backwards
        let nodes = vec![
            Node::Internal { variable: 0, threshold: 0.5, left: 0, right: 1 },
            Node::Leaf { leaf_id: 0, value: 1.0 },
        ];
        assert!(RegressionTree::from_parts(nodes, 1, 1, vec![]).is_err());
    }

    proptest! {
        // every observation lands in exactly one leaf, ids within range
        #[test]
        fn assignments_partition_rows(seed in 0u64..200, n in 5usize..40, p in 1usize..5) {
            let (x, y) = random_xy(n, p, seed);
            let params = TreeParams { mtry: p, min_node_size: 2, bootstrap: seed % 2 == 0 };
            let tree = fit_tree(&x, &y, &params, &mut rng(seed)).unwrap();
            let assignments = tree.leaf_assignments(&x).unwrap();
            prop_assert_eq!(assignments.len(), n);
            for a in assignments {
                prop_assert!(a < tree.n_leaves());
            }
        }

        // the training SSE of a maximal tree never exceeds the root SSE
        #[test]
        fn splits_do_not_increase_sse(seed in 0u64..100) {
            let (x, y) = random_xy(30, 3, seed);
            let params = TreeParams { mtry: 2, min_node_size: 3, bootstrap: false };
            let tree = fit_tree(&x, &y, &params, &mut rng(seed)).unwrap();
            let pred = tree.predict_rows(&x).unwrap();
            let mean = y.mean();
            let sse_tree: f64 = (0..30).map(|r| (y[r] - pred[r]).powi(2)).sum();
            let sse_root: f64 = (0..30).map(|r| (y[r] - mean).powi(2)).sum();
            prop_assert!(sse_tree <= sse_root + 1e-9);
        }
    }
}
