//! Simulation benchmark: longitudinal data generation with temporal covariate
//! groups, squared-bias and prediction-error metrics, and ranking stability
//! scores.
//!
//! Covariates come in six groups with distinct temporal dynamics plus pure
//! Gaussian noise columns; outcomes follow the mixed model with a random
//! intercept, a random slope on a per-individual scalar, an optional Brownian
//! serial-correlation process and i.i.d. noise. Every draw is derived
//! deterministically from the master seed and a replicate index, so whole
//! benchmark runs are reproducible.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{split_train_test, IndividualBlock, LongitudinalDataset, VarianceComponents};
use crate::em::{fit, FittedModel, MethodSpec};
use crate::error::{Error, Result};
use crate::forest::{fit_forest, rank_by_importance, Forest, ForestParams};
use crate::predict::PredictionQuery;
use crate::rng::{derive_seed, derive_seed2};

const TAG_STRUCTURE: u64 = 1;
const TAG_TIMES: u64 = 2;
const TAG_COVARIATES: u64 = 3;
const TAG_OUTCOME: u64 = 4;
const TAG_EVAL: u64 = 5;
const TAG_SPLIT: u64 = 6;
const TAG_FIT: u64 = 7;
const TAG_IMPORTANCE: u64 = 8;

/// Whether outcomes include the Brownian serial-correlation process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    NonStochastic,
    Stochastic,
}

/// Low dimension: 6 covariates, one per temporal group, and the mean function
/// reads two covariates directly. High dimension: the mean function reads
/// 20-variable averages over random subsets of the first two groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Low,
    High,
}

/// Configuration of one simulation scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Number of individuals.
    pub n: usize,
    /// Inclusive range for the per-individual observation count.
    pub n_obs_range: (usize, usize),
    /// Total number of covariates.
    pub p: usize,
    /// Size of each of the six temporal groups.
    pub group_size: usize,
    pub scheme: Scheme,
    pub dimension: Dimension,
    /// True random-effect covariance (2×2: intercept and slope).
    pub b: DMatrix<f64>,
    /// True Brownian volatility (used only under the stochastic scheme).
    pub gamma2: f64,
    /// True residual variance.
    pub sigma2: f64,
    /// Pool of candidate measurement times; each individual gets a sorted
    /// random subset.
    pub time_pool: Vec<f64>,
    pub master_seed: u64,
}

fn default_b() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.5, 0.6, 0.6, 3.0])
}

fn default_time_pool() -> Vec<f64> {
    (1..=12).map(|t| t as f64).collect()
}

impl SimulationConfig {
    /// Low-dimensional scenario: 17 individuals, 8–11 observations each,
    /// 6 covariates (one per temporal group).
    pub fn low_dim(scheme: Scheme, master_seed: u64) -> Self {
        Self {
            n: 17,
            n_obs_range: (8, 11),
            p: 6,
            group_size: 1,
            scheme,
            dimension: Dimension::Low,
            b: default_b(),
            gamma2: 0.8,
            sigma2: 0.5,
            time_pool: default_time_pool(),
            master_seed,
        }
    }

    /// Desk-scale high-dimensional scenario: p = 800 with six temporal groups
    /// of 27.
    pub fn high_dim(scheme: Scheme, master_seed: u64) -> Self {
        Self {
            n: 17,
            n_obs_range: (8, 11),
            p: 800,
            group_size: 27,
            scheme,
            dimension: Dimension::High,
            b: default_b(),
            gamma2: 0.8,
            sigma2: 0.5,
            time_pool: default_time_pool(),
            master_seed,
        }
    }

    /// Full-scale high-dimensional scenario: p = 8000 with groups of 266.
    pub fn high_dim_full(scheme: Scheme, master_seed: u64) -> Self {
        Self {
            p: 8000,
            group_size: 266,
            ..Self::high_dim(scheme, master_seed)
        }
    }

    /// The γ² realized by the generative model (0 without the process).
    pub fn effective_gamma2(&self) -> f64 {
        match self.scheme {
            Scheme::NonStochastic => 0.0,
            Scheme::Stochastic => self.gamma2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("n must be at least 1".into()));
        }
        let (lo, hi) = self.n_obs_range;
        if lo < 1 || lo > hi {
            return Err(Error::InvalidParameter(format!(
                "invalid observation range {lo}..={hi}"
            )));
        }
        if hi > self.time_pool.len() {
            return Err(Error::InvalidParameter(format!(
                "observation range reaches {hi} but the time pool has {} entries",
                self.time_pool.len()
            )));
        }
        let mut pool = self.time_pool.clone();
        pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if pool.windows(2).any(|w| w[0] == w[1]) || pool.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::InvalidParameter(
                "time pool must hold distinct positive times".into(),
            ));
        }
        if 6 * self.group_size > self.p {
            return Err(Error::InvalidParameter(format!(
                "6 groups of {} do not fit into p = {}",
                self.group_size, self.p
            )));
        }
        if self.dimension == Dimension::Low && (self.p != 6 || self.group_size != 1) {
            return Err(Error::InvalidParameter(
                "low dimension requires p = 6 with one variable per group".into(),
            ));
        }
        if self.b.nrows() != 2 || self.b.ncols() != 2 {
            return Err(Error::InvalidParameter(
                "the generative random-effect covariance is 2×2".into(),
            ));
        }
        VarianceComponents::new(self.b.clone(), self.gamma2, self.sigma2)?;
        Ok(())
    }
}

/// Covariate layout shared by every replicate of a configuration: group
/// membership per covariate (0 = pure noise) and, in high dimension, the two
/// 20-variable subsets the mean function averages over.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimStructure {
    pub group_labels: Vec<u8>,
    pub f_groups: Option<(Vec<usize>, Vec<usize>)>,
}

/// Derive the covariate structure of a configuration.
pub fn structure(config: &SimulationConfig) -> Result<SimStructure> {
    config.validate()?;
    let mut labels = vec![0u8; config.p];
    for g in 0..6 {
        for k in 0..config.group_size {
            labels[g * config.group_size + k] = (g + 1) as u8;
        }
    }
    let f_groups = match config.dimension {
        Dimension::Low => None,
        Dimension::High => {
            if config.group_size < 20 {
                return Err(Error::InvalidParameter(format!(
                    "high dimension needs at least 20 variables per group, got {}",
                    config.group_size
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                config.master_seed,
                TAG_STRUCTURE,
            ));
            let mut pick = |offset: usize, size: usize| -> Vec<usize> {
                let mut pool: Vec<usize> = (offset..offset + size).collect();
                for k in 0..20 {
                    let j = rng.random_range(k..size);
                    pool.swap(k, j);
                }
                let mut sel = pool[..20].to_vec();
                sel.sort_unstable();
                sel
            };
            let g1 = pick(0, config.group_size);
            let g2 = pick(config.group_size, config.group_size);
            Some((g1, g2))
        }
    };
    Ok(SimStructure {
        group_labels: labels,
        f_groups,
    })
}

/// Group mean trajectory `C_g(t)` for groups 1..6.
pub fn temporal_mean(group: u8, t: f64) -> Result<f64> {
    Ok(match group {
        1 => {
            if t == 0.0 {
                return Err(Error::InvalidParameter(
                    "group 1 dynamics are undefined at t = 0".into(),
                ));
            }
            2.44 - 0.04 * (t - 3.0 * (t - 6.0).powi(2) / t)
        }
        2 => 0.5 * t - 0.1 * (t - 5.0).powi(2),
        3 => 0.25 * t - 0.05 * (t - 6.0).powi(2),
        4 => ((t - 1.0) / 3.0).cos(),
        5 => 0.1 * t + (0.6 * t + 1.3).sin(),
        6 => -0.1 * t * t,
        other => {
            return Err(Error::InvalidParameter(format!(
                "temporal group must be 1..6, got {other}"
            )))
        }
    })
}

struct CovariateGen {
    zeta: Vec<f64>,
    group_labels: Vec<u8>,
    p: usize,
    jitter: Normal<f64>,
    noise: Normal<f64>,
}

impl CovariateGen {
    fn new(config: &SimulationConfig, structure: &SimStructure, rng: &mut ChaCha8Rng) -> Self {
        let n_temporal = 6 * config.group_size;
        let unit = Normal::new(0.0, 1.0).unwrap();
        let zeta: Vec<f64> = (0..n_temporal).map(|_| unit.sample(rng)).collect();
        Self {
            zeta,
            group_labels: structure.group_labels.clone(),
            p: config.p,
            jitter: Normal::new(0.0, 0.4f64.sqrt()).unwrap(),
            noise: Normal::new(0.0, 3.0f64.sqrt()).unwrap(),
        }
    }

    fn fill_row(&self, t: f64, rng: &mut ChaCha8Rng, mut set: impl FnMut(usize, f64)) {
        for k in 0..self.p {
            let value = if k < self.zeta.len() {
                let c = temporal_mean(self.group_labels[k], t)
                    .expect("temporal group is valid and t > 0");
                c + self.zeta[k] + self.jitter.sample(rng)
            } else {
                self.noise.sample(rng)
            };
            set(k, value);
        }
    }
}

/// Draw the covariate matrices (one `n_i × p` matrix per individual) for the
/// given measurement times.
///
/// The first `6 * group_size` covariates follow their group trajectory with a
/// per-covariate `N(0,1)` offset shared across observations plus `N(0, 0.4)`
/// per-observation jitter; the remaining covariates are i.i.d. `N(0, 3)`.
pub fn simulate_covariates(
    config: &SimulationConfig,
    structure: &SimStructure,
    times: &[Vec<f64>],
    seed: u64,
) -> Vec<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = CovariateGen::new(config, structure, &mut rng);
    times
        .iter()
        .map(|ts| {
            let mut x = DMatrix::zeros(ts.len(), config.p);
            for (row, &t) in ts.iter().enumerate() {
                gen.fill_row(t, &mut rng, |k, v| x[(row, k)] = v);
            }
            x
        })
        .collect()
}

/// Evaluate the true mean function on one covariate row.
pub fn mean_function(x: &[f64], structure: &SimStructure, dimension: Dimension) -> f64 {
    match dimension {
        Dimension::Low => 1.3 * x[0] * x[0] + 2.0 * x[1].abs().sqrt(),
        Dimension::High => {
            let (g1, g2) = structure
                .f_groups
                .as_ref()
                .expect("high-dimensional structure carries the f subsets");
            let m1: f64 = g1.iter().map(|&k| x[k]).sum::<f64>() / g1.len() as f64;
            let m2: f64 = g2.iter().map(|&k| x[k]).sum::<f64>() / g2.len() as f64;
            1.3 * m1 * m1 + 2.0 * m2.abs().sqrt()
        }
    }
}

/// Ground truth stored next to a simulated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    /// True mean-function values per individual.
    pub f: Vec<DVector<f64>>,
    /// Random-effect draws `(b_0, b_1)` per individual.
    pub b: Vec<DVector<f64>>,
    /// Serial-correlation paths per individual (zeros without the process).
    pub omega: Vec<DVector<f64>>,
    /// Noise draws per individual.
    pub eps: Vec<DVector<f64>>,
    /// Per-individual exogenous scalar carrying the random slope.
    pub z_scalar: Vec<f64>,
    pub group_labels: Vec<u8>,
    pub f_groups: Option<(Vec<usize>, Vec<usize>)>,
    pub b_true: DMatrix<f64>,
    pub gamma2_true: f64,
    pub sigma2_true: f64,
}

/// A dataset together with everything that generated it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulatedDataset {
    pub dataset: LongitudinalDataset,
    pub truth: GroundTruth,
}

/// Draw outcomes for pre-generated covariates:
/// `Y = f(X) + b_0 + z b_1 (+ ω) + ε` with `(b_0, b_1) ~ N(0, B)`,
/// `z ~ U[0, 3]`, a Brownian `ω` with `Var(ω(t)) = γ² t` under the stochastic
/// scheme, and `ε ~ N(0, σ²)`.
pub fn simulate_outcome(
    config: &SimulationConfig,
    structure: &SimStructure,
    times: &[Vec<f64>],
    covariates: &[DMatrix<f64>],
    seed: u64,
) -> Result<SimulatedDataset> {
    config.validate()?;
    if config.dimension == Dimension::High && structure.f_groups.is_none() {
        return Err(Error::InvalidParameter(
            "high-dimensional outcomes need the f subsets in the structure".into(),
        ));
    }
    if covariates.len() != times.len() || covariates.len() != config.n {
        return Err(Error::DimensionMismatch {
            context: "covariate matrices".into(),
            expected: config.n,
            actual: covariates.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let eps_dist = Normal::new(0.0, config.sigma2.sqrt()).unwrap();

    let z_scalar: Vec<f64> = (0..config.n).map(|_| rng.random_range(0.0..3.0)).collect();

    let b_chol = if config.b.iter().all(|&v| v == 0.0) {
        None
    } else {
        Some(Cholesky::new(config.b.clone()).ok_or_else(|| {
            Error::NotPositiveDefinite("generative random-effect covariance".into())
        })?)
    };
    let b_draws: Vec<DVector<f64>> = (0..config.n)
        .map(|_| {
            let raw = DVector::from_fn(2, |_, _| unit.sample(&mut rng));
            match &b_chol {
                Some(chol) => chol.l() * raw,
                None => DVector::zeros(2),
            }
        })
        .collect();

    let omega: Vec<DVector<f64>> = times
        .iter()
        .map(|ts| match config.scheme {
            Scheme::NonStochastic => DVector::zeros(ts.len()),
            Scheme::Stochastic => {
                // exact discrete Brownian motion via independent increments
                let mut path = DVector::zeros(ts.len());
                let mut prev_t = 0.0;
                let mut value = 0.0;
                for (j, &t) in ts.iter().enumerate() {
                    value += (config.gamma2 * (t - prev_t)).sqrt() * unit.sample(&mut rng);
                    path[j] = value;
                    prev_t = t;
                }
                path
            }
        })
        .collect();

    let eps: Vec<DVector<f64>> = times
        .iter()
        .map(|ts| DVector::from_fn(ts.len(), |_, _| eps_dist.sample(&mut rng)))
        .collect();

    let mut blocks = Vec::with_capacity(config.n);
    let mut f_values = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let n_i = times[i].len();
        if covariates[i].nrows() != n_i || covariates[i].ncols() != config.p {
            return Err(Error::DimensionMismatch {
                context: format!("covariate matrix of individual {i}"),
                expected: n_i,
                actual: covariates[i].nrows(),
            });
        }
        let f_i = DVector::from_fn(n_i, |j, _| {
            let row: Vec<f64> = (0..config.p).map(|k| covariates[i][(j, k)]).collect();
            mean_function(&row, structure, config.dimension)
        });
        let y = DVector::from_fn(n_i, |j, _| {
            f_i[j] + b_draws[i][0] + z_scalar[i] * b_draws[i][1] + omega[i][j] + eps[i][j]
        });
        blocks.push(IndividualBlock {
            id: (i + 1).to_string(),
            times: times[i].clone(),
            x: covariates[i].clone(),
            z: DMatrix::from_fn(n_i, 2, |_, c| if c == 0 { 1.0 } else { z_scalar[i] }),
            y,
        });
        f_values.push(f_i);
    }

    Ok(SimulatedDataset {
        dataset: LongitudinalDataset::new(blocks)?,
        truth: GroundTruth {
            f: f_values,
            b: b_draws,
            omega,
            eps,
            z_scalar,
            group_labels: structure.group_labels.clone(),
            f_groups: structure.f_groups.clone(),
            b_true: config.b.clone(),
            gamma2_true: config.effective_gamma2(),
            sigma2_true: config.sigma2,
        },
    })
}

/// Draw measurement times for every individual: `n_i` uniform in the
/// configured range, times a sorted distinct sample from the pool.
pub fn simulate_times(config: &SimulationConfig, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = config.n_obs_range;
    (0..config.n)
        .map(|_| {
            let n_i = rng.random_range(lo..=hi);
            let mut pool: Vec<f64> = config.time_pool.clone();
            for k in 0..n_i {
                let j = rng.random_range(k..pool.len());
                pool.swap(k, j);
            }
            let mut ts = pool[..n_i].to_vec();
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ts
        })
        .collect()
}

/// Simulate replicate `replicate` of a configuration.
///
/// Replicates share the covariate design (times and covariate matrices are
/// deterministic in the master seed alone) and redraw the outcome parts:
/// random effects, serial-correlation paths, noise and the exogenous scalar.
/// A fixed design is what makes the across-replicate mean prediction at a
/// design point — and hence the squared-bias metric — well defined.
pub fn simulate_dataset(config: &SimulationConfig, replicate: u64) -> Result<SimulatedDataset> {
    let structure = structure(config)?;
    let times = simulate_times(config, derive_seed(config.master_seed, TAG_TIMES));
    let covariates = simulate_covariates(
        config,
        &structure,
        &times,
        derive_seed(config.master_seed, TAG_COVARIATES),
    );
    simulate_outcome(
        config,
        &structure,
        &times,
        &covariates,
        derive_seed2(config.master_seed, TAG_OUTCOME, replicate),
    )
}

/// Default evaluation grid: 20 equispaced times on [1.25, 11.75], offset from
/// the integer measurement times.
pub fn default_eval_grid() -> Vec<f64> {
    let (lo, hi, count) = (1.25, 11.75, 20);
    (0..count)
        .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
        .collect()
}

/// Fixed evaluation design for the squared-bias metric: fresh covariate rows
/// for every (individual, grid time) pair with the true `f` at each row.
#[derive(Debug, Clone)]
pub struct EvalDesign {
    pub grid: Vec<f64>,
    /// `(n * grid.len()) × p` covariate rows, individual-major.
    pub x: DMatrix<f64>,
    pub f_true: DVector<f64>,
}

/// Build the evaluation design of a configuration (deterministic in the
/// master seed, independent of the replicate draws).
///
/// The rows extend the shared covariate design to the grid times: the
/// per-covariate group offsets are the same ones the training covariates
/// carry, only the per-observation jitter is fresh, so evaluation rows stay
/// inside the support the replicates were fit on.
pub fn eval_design(
    config: &SimulationConfig,
    structure: &SimStructure,
    grid: &[f64],
) -> Result<EvalDesign> {
    config.validate()?;
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if grid.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidParameter(
            "evaluation grid times must be positive".into(),
        ));
    }
    // recover the shared group offsets; they are the first draws of the
    // covariate stream
    let mut cov_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.master_seed, TAG_COVARIATES));
    let gen = CovariateGen::new(config, structure, &mut cov_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.master_seed, TAG_EVAL));
    let rows = config.n * grid.len();
    let mut x = DMatrix::zeros(rows, config.p);
    let mut f_true = DVector::zeros(rows);
    let mut row = 0;
    let mut scratch = vec![0.0; config.p];
    for _individual in 0..config.n {
        for &t in grid {
            gen.fill_row(t, &mut rng, |k, v| {
                x[(row, k)] = v;
                scratch[k] = v;
            });
            f_true[row] = mean_function(&scratch, structure, config.dimension);
            row += 1;
        }
    }
    Ok(EvalDesign {
        grid: grid.to_vec(),
        x,
        f_true,
    })
}

/// One replicate's contribution to the bias metrics: mean-function
/// predictions on the evaluation design plus the estimated variance
/// components.
#[derive(Debug, Clone)]
pub struct ReplicateEstimates {
    pub f_pred: DVector<f64>,
    pub vc: VarianceComponents,
}

/// Evaluate a fitted model on the design, checking that no grid time collides
/// with a measurement time of the fit.
pub fn replicate_estimates(model: &FittedModel, eval: &EvalDesign) -> Result<ReplicateEstimates> {
    for &t in &eval.grid {
        if model
            .individuals
            .iter()
            .any(|e| e.times.iter().any(|&s| s == t))
        {
            return Err(Error::GridOverlapsMeasurements(t));
        }
    }
    Ok(ReplicateEstimates {
        f_pred: model.mean_model.predict_rows(&eval.x)?,
        vc: model.vc.clone(),
    })
}

/// Squared biases of the across-replicate mean estimates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BiasReport {
    pub f: f64,
    pub b: f64,
    pub gamma2: f64,
    pub sigma2: f64,
}

/// Aggregate replicate estimates into squared biases:
///
/// * `bias²(f̂)` averages `(f̂^M − f)²` over the design rows, `f̂^M` being the
///   across-replicate mean prediction,
/// * `bias²(B̂) = (1/q²) Σ_kl (B̂^M_kl − B_kl)²` with `B̂^M` the mean estimate,
/// * scalar analogues for `γ²` and `σ²` against the generative values.
pub fn squared_bias_report(
    reps: &[ReplicateEstimates],
    config: &SimulationConfig,
    eval: &EvalDesign,
) -> Result<BiasReport> {
    if reps.is_empty() {
        return Err(Error::EmptyInput("no replicate estimates".into()));
    }
    let rows = eval.f_true.len();
    let m = reps.len() as f64;
    let mut mean_pred = DVector::zeros(rows);
    for rep in reps {
        if rep.f_pred.len() != rows {
            return Err(Error::DimensionMismatch {
                context: "replicate predictions".into(),
                expected: rows,
                actual: rep.f_pred.len(),
            });
        }
        mean_pred += &rep.f_pred;
    }
    mean_pred /= m;
    let bias_f = (0..rows)
        .map(|r| (mean_pred[r] - eval.f_true[r]).powi(2))
        .sum::<f64>()
        / rows as f64;

    let q = config.b.nrows();
    let mut mean_b = DMatrix::zeros(q, q);
    let mut mean_gamma2 = 0.0;
    let mut mean_sigma2 = 0.0;
    for rep in reps {
        if rep.vc.q() != q {
            return Err(Error::DimensionMismatch {
                context: "replicate variance components".into(),
                expected: q,
                actual: rep.vc.q(),
            });
        }
        mean_b += &rep.vc.b;
        mean_gamma2 += rep.vc.gamma2;
        mean_sigma2 += rep.vc.sigma2;
    }
    mean_b /= m;
    mean_gamma2 /= m;
    mean_sigma2 /= m;

    let bias_b = (&mean_b - &config.b).map(|d| d * d).sum() / (q * q) as f64;
    Ok(BiasReport {
        f: bias_f,
        b: bias_b,
        gamma2: (mean_gamma2 - config.effective_gamma2()).powi(2),
        sigma2: (mean_sigma2 - config.sigma2).powi(2),
    })
}

/// Prediction error over repeated random train/test splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionErrorReport {
    /// `(1 / (holdout · n · M')) Σ_ℓ Σ_i Σ_j (Y_ij − Ŷ_ij)²`
    pub overall_mse: f64,
    pub per_split: Vec<f64>,
}

/// Core split-fit-predict loop. `fit_predict` receives the train set, the
/// test set and a derived seed, and returns one prediction per test row (in
/// block-row order).
pub fn prediction_error_with<F>(
    dataset: &LongitudinalDataset,
    n_splits: usize,
    holdout: usize,
    seed: u64,
    fit_predict: F,
) -> Result<PredictionErrorReport>
where
    F: Fn(&LongitudinalDataset, &LongitudinalDataset, u64) -> Result<Vec<f64>>,
{
    if n_splits == 0 {
        return Err(Error::InvalidParameter(
            "need at least one train/test split".into(),
        ));
    }
    let mut per_split = Vec::with_capacity(n_splits);
    for split in 0..n_splits {
        let (train, test) = split_train_test(
            dataset,
            holdout,
            derive_seed2(seed, TAG_SPLIT, split as u64),
        )?;
        let predictions = fit_predict(&train, &test, derive_seed2(seed, TAG_FIT, split as u64))?;
        let n_test = test.total_obs();
        if predictions.len() != n_test {
            return Err(Error::DimensionMismatch {
                context: "test predictions".into(),
                expected: n_test,
                actual: predictions.len(),
            });
        }
        let mut sse = 0.0;
        let mut row = 0;
        for block in test.individuals() {
            for j in 0..block.n_obs() {
                let err = block.y[j] - predictions[row];
                sse += err * err;
                row += 1;
            }
        }
        per_split.push(sse / n_test as f64);
    }
    let overall = per_split.iter().sum::<f64>() / n_splits as f64;
    Ok(PredictionErrorReport {
        overall_mse: overall,
        per_split,
    })
}

/// Prediction error of one estimator variant: fit on each train set, predict
/// the held-out observations of each (known) individual at their actual times.
pub fn prediction_error(
    dataset: &LongitudinalDataset,
    spec: &MethodSpec,
    n_splits: usize,
    holdout: usize,
    seed: u64,
) -> Result<PredictionErrorReport> {
    prediction_error_with(dataset, n_splits, holdout, seed, |train, test, fit_seed| {
        let model = fit(train, spec, fit_seed)?;
        let mut predictions = Vec::with_capacity(test.total_obs());
        for block in test.individuals() {
            for j in 0..block.n_obs() {
                let query = PredictionQuery {
                    individual: Some(block.id.clone()),
                    time: block.times[j],
                    x: block.x.row(j).transpose(),
                    z: block.z.row(j).transpose(),
                };
                predictions.push(model.predict(&query)?);
            }
        }
        Ok(predictions)
    })
}

/// Prediction error of a plain forest that ignores the longitudinal structure
/// (all observations treated as independent).
pub fn rf_prediction_error(
    dataset: &LongitudinalDataset,
    params: &ForestParams,
    n_splits: usize,
    holdout: usize,
    seed: u64,
) -> Result<PredictionErrorReport> {
    prediction_error_with(dataset, n_splits, holdout, seed, |train, test, fit_seed| {
        let forest = fit_forest(
            &train.stacked_x(),
            &train.stacked_y(),
            &ForestParams {
                seed: fit_seed,
                ..params.clone()
            },
        )?;
        let pred = forest.predict_rows(&test.stacked_x())?;
        Ok(pred.iter().cloned().collect())
    })
}

fn score_lists(v: &[usize], v_prime: &[usize], eta: usize) -> f64 {
    let p = v.len();
    let mut hits = 0usize;
    for i in 0..p {
        let lo = i.saturating_sub(eta);
        let hi = (i + eta).min(p - 1);
        if v_prime[lo..=hi].contains(&v[i]) {
            hits += 1;
        }
    }
    hits as f64 / p as f64
}

fn check_rank_list(v: &[usize]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::EmptyInput("rank list".into()));
    }
    let mut sorted = v.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::NotPermutations);
    }
    Ok(())
}

/// Stability score of two importance rankings: the proportion of variables
/// ranked within ±`eta` positions of each other,
/// `SS^η = (1/p) Σ_i 1{ V_(i) ∈ {V'_((i−η)₊), …, V'_((i+η)₋)} }` with index
/// clamping at the ends. The lists must rank the same variable set.
pub fn stability_score(v: &[usize], v_prime: &[usize], eta: usize) -> Result<f64> {
    check_rank_list(v)?;
    check_rank_list(v_prime)?;
    if v.len() != v_prime.len() {
        return Err(Error::NotPermutations);
    }
    let mut a = v.to_vec();
    let mut b = v_prime.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(Error::NotPermutations);
    }
    Ok(score_lists(v, v_prime, eta))
}

/// Stability score restricted to the top `k` entries of two full rankings.
/// The truncated lists may cover different variable sets; variables absent
/// from the other list simply never match.
pub fn stability_score_topk(
    v: &[usize],
    v_prime: &[usize],
    k: usize,
    eta: usize,
) -> Result<f64> {
    check_rank_list(v)?;
    check_rank_list(v_prime)?;
    if k == 0 || k > v.len() || k > v_prime.len() {
        return Err(Error::InvalidParameter(format!(
            "top-k truncation {k} out of range"
        )));
    }
    Ok(score_lists(&v[..k], &v_prime[..k], eta))
}

/// One cell of the stability sweep output.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StabilityCell {
    pub eta: usize,
    pub mtry: usize,
    pub mean_score: f64,
}

/// Re-run a forest-based method `pairs + 1` times per `mtry` value on one
/// dataset, rank variables by the importance of the converged forest, and
/// score consecutive ranking pairs truncated to the top `k` variables.
pub fn stability_sweep(
    dataset: &LongitudinalDataset,
    base_spec: &MethodSpec,
    mtry_grid: &[usize],
    eta_grid: &[usize],
    pairs: usize,
    top_k: usize,
    seed: u64,
) -> Result<Vec<StabilityCell>> {
    if mtry_grid.is_empty() || eta_grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if pairs == 0 {
        return Err(Error::InvalidParameter(
            "need at least one ranking pair".into(),
        ));
    }
    if base_spec.learner != crate::em::Learner::Forest {
        return Err(Error::InvalidParameter(
            "the stability sweep needs a forest-based method".into(),
        ));
    }
    let x = dataset.stacked_x();
    let mut cells = Vec::new();
    for (mi, &mtry) in mtry_grid.iter().enumerate() {
        let rankings: Vec<Vec<usize>> = (0..=pairs)
            .map(|run| {
                let mut spec = base_spec.clone();
                spec.learner_params.mtry = Some(mtry);
                let fit_seed = derive_seed2(seed, TAG_FIT + 100 * mi as u64, run as u64);
                let model = fit(dataset, &spec, fit_seed)?;
                let forest = model.mean_model.as_forest().expect("forest learner");
                let ytilde = model.debiased_responses(dataset)?;
                let vi = forest.variable_importance(
                    &x,
                    &ytilde,
                    derive_seed2(seed, TAG_IMPORTANCE + 100 * mi as u64, run as u64),
                )?;
                Ok(rank_by_importance(&vi))
            })
            .collect::<Result<_>>()?;
        for &eta in eta_grid {
            let mut total = 0.0;
            for r in 0..pairs {
                total += stability_score_topk(&rankings[r], &rankings[r + 1], top_k, eta)?;
            }
            cells.push(StabilityCell {
                eta,
                mtry,
                mean_score: total / pairs as f64,
            });
        }
    }
    Ok(cells)
}

/// Convenience for the benchmark drivers: plain forest fit on a whole dataset
/// (ignoring the longitudinal structure), returning the fitted forest.
pub fn fit_plain_forest(dataset: &LongitudinalDataset, params: &ForestParams) -> Result<Forest> {
    fit_forest(&dataset.stacked_x(), &dataset.stacked_y(), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn temporal_means_match_closed_forms() {
        assert_eq!(temporal_mean(6, 0.0).unwrap(), 0.0);
        assert_relative_eq!(temporal_mean(1, 6.0).unwrap(), 2.2, epsilon = 1e-12);
        assert_eq!(temporal_mean(4, 1.0).unwrap(), 1.0);
        assert!(temporal_mean(1, 0.0).is_err());
        assert!(temporal_mean(7, 1.0).is_err());
    }

    #[test]
    fn low_dim_mean_function_values() {
        let s = SimStructure {
            group_labels: vec![1, 2, 3, 4, 5, 6],
            f_groups: None,
        };
        assert_eq!(mean_function(&[0.0, 0.0, 1.0, 1.0, 1.0, 1.0], &s, Dimension::Low), 0.0);
        assert_relative_eq!(
            mean_function(&[1.0, 4.0, 0.0, 0.0, 0.0, 0.0], &s, Dimension::Low),
            5.3,
            epsilon = 1e-12
        );
    }

    #[test]
    fn simulation_is_deterministic() {
        let config = SimulationConfig::low_dim(Scheme::Stochastic, 42);
        let a = simulate_dataset(&config, 3).unwrap();
        let b = simulate_dataset(&config, 3).unwrap();
        for (ba, bb) in a.dataset.individuals().iter().zip(b.dataset.individuals()) {
            assert_eq!(ba.times, bb.times);
            assert!(ba.x.iter().zip(bb.x.iter()).all(|(u, v)| u == v));
            assert!(ba.y.iter().zip(bb.y.iter()).all(|(u, v)| u == v));
        }
        // different replicates differ
        let c = simulate_dataset(&config, 4).unwrap();
        assert!(a.dataset.individuals()[0].y != c.dataset.individuals()[0].y);
    }

    #[test]
    fn ground_truth_reconstructs_response() {
        for scheme in [Scheme::NonStochastic, Scheme::Stochastic] {
            let config = SimulationConfig::low_dim(scheme, 7);
            let sim = simulate_dataset(&config, 0).unwrap();
            for (i, block) in sim.dataset.individuals().iter().enumerate() {
                for j in 0..block.n_obs() {
                    let rebuilt = sim.truth.f[i][j]
                        + sim.truth.b[i][0]
                        + sim.truth.z_scalar[i] * sim.truth.b[i][1]
                        + sim.truth.omega[i][j]
                        + sim.truth.eps[i][j];
                    assert!((block.y[j] - rebuilt).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn covariate_law_statistics() {
        // a scaled-up draw to check the generative variances
        let mut config = SimulationConfig::low_dim(Scheme::NonStochastic, 11);
        config.dimension = Dimension::High; // p > 6 allowed
        config.p = 8;
        config.n = 1250;
        let s = SimStructure {
            group_labels: vec![1, 2, 3, 4, 5, 6, 0, 0],
            f_groups: None,
        };
        let times: Vec<Vec<f64>> = (0..config.n)
            .map(|i| {
                let start = 1.0 + (i % 4) as f64;
                (0..8).map(|j| start + j as f64 * 0.9).collect()
            })
            .collect();
        let covs = simulate_covariates(&config, &s, &times, 99);
        let total: usize = times.iter().map(|t| t.len()).sum();
        assert_eq!(total, 10_000);

        // noise covariate (index 6): variance close to 3
        let noise: Vec<f64> = covs.iter().flat_map(|x| x.column(6).iter().cloned().collect::<Vec<_>>()).collect();
        let mean = noise.iter().sum::<f64>() / noise.len() as f64;
        let var = noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (noise.len() - 1) as f64;
        assert!((2.7..=3.3).contains(&var), "noise variance {var}");

        // group-1 covariate: detrended by C₁(t), residual variance close to 0.4
        let mut resid = Vec::with_capacity(total);
        for (x, ts) in covs.iter().zip(&times) {
            for (j, &t) in ts.iter().enumerate() {
                resid.push(x[(j, 0)] - temporal_mean(1, t).unwrap());
            }
        }
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let var = resid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (resid.len() - 1) as f64;
        assert!((0.3..=0.5).contains(&var), "detrended variance {var}");
    }

    #[test]
    fn brownian_paths_have_the_right_scale_and_independent_increments() {
        let mut config = SimulationConfig::low_dim(Scheme::Stochastic, 13);
        config.n = 10_000;
        let sim = simulate_dataset(&config, 0).unwrap();
        // ω(t₁)/√t₁ ~ N(0, γ²) independently across individuals
        let standardized: Vec<f64> = sim
            .dataset
            .individuals()
            .iter()
            .zip(&sim.truth.omega)
            .map(|(b, w)| w[0] / b.times[0].sqrt())
            .collect();
        let mean = standardized.iter().sum::<f64>() / standardized.len() as f64;
        let var = standardized.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / (standardized.len() - 1) as f64;
        assert!(
            (var - 0.8).abs() <= 0.08,
            "standardized path variance {var} not within 10% of 0.8"
        );

        // increments over disjoint intervals are uncorrelated
        let mut d1 = Vec::new();
        let mut d2 = Vec::new();
        for (b, w) in sim.dataset.individuals().iter().zip(&sim.truth.omega) {
            d1.push((w[1] - w[0]) / (b.times[1] - b.times[0]).sqrt());
            d2.push((w[2] - w[1]) / (b.times[2] - b.times[1]).sqrt());
        }
        let m1 = d1.iter().sum::<f64>() / d1.len() as f64;
        let m2 = d2.iter().sum::<f64>() / d2.len() as f64;
        let mut cov = 0.0;
        let mut v1 = 0.0;
        let mut v2 = 0.0;
        for i in 0..d1.len() {
            cov += (d1[i] - m1) * (d2[i] - m2);
            v1 += (d1[i] - m1).powi(2);
            v2 += (d2[i] - m2).powi(2);
        }
        let corr = cov / (v1.sqrt() * v2.sqrt());
        assert!(corr.abs() < 0.05, "increment correlation {corr}");
    }

    #[test]
    fn bias_report_closed_cases() {
        let config = SimulationConfig::low_dim(Scheme::Stochastic, 21);
        let s = structure(&config).unwrap();
        let eval = eval_design(&config, &s, &default_eval_grid()).unwrap();
        let vc_truth =
            VarianceComponents::new(config.b.clone(), config.gamma2, config.sigma2).unwrap();

        // perfect predictions in every replicate → zero f bias
        let reps: Vec<ReplicateEstimates> = (0..3)
            .map(|_| ReplicateEstimates {
                f_pred: eval.f_true.clone(),
                vc: vc_truth.clone(),
            })
            .collect();
        let report = squared_bias_report(&reps, &config, &eval).unwrap();
        assert!(report.f < 1e-28, "f bias {}", report.f);
        assert!(report.b < 1e-28, "B bias {}", report.b);

        // single replicate with B̂ = B + I → bias²(B̂) = 2/q² = 0.5
        let off = ReplicateEstimates {
            f_pred: eval.f_true.clone(),
            vc: VarianceComponents::new(
                &config.b + DMatrix::identity(2, 2),
                config.gamma2,
                config.sigma2,
            )
            .unwrap(),
        };
        let report = squared_bias_report(&[off], &config, &eval).unwrap();
        assert_relative_eq!(report.b, 0.5, epsilon = 1e-12);

        // γ̂² replicates (0.6, 0.8, 1.0) average to the truth → zero bias
        let reps: Vec<ReplicateEstimates> = [0.6, 0.8, 1.0]
            .iter()
            .map(|&g| ReplicateEstimates {
                f_pred: eval.f_true.clone(),
                vc: VarianceComponents::new(config.b.clone(), g, config.sigma2).unwrap(),
            })
            .collect();
        let report = squared_bias_report(&reps, &config, &eval).unwrap();
        assert!(report.gamma2 < 1e-28);

        assert!(squared_bias_report(&[], &config, &eval).is_err());
    }

    #[test]
    fn default_grid_avoids_integer_times() {
        for t in default_eval_grid() {
            assert!((t - t.round()).abs() > 1e-9, "grid time {t} is integral");
        }
    }

    #[test]
    fn prediction_error_oracle_and_constant() {
        let config = SimulationConfig::low_dim(Scheme::NonStochastic, 31);
        let sim = simulate_dataset(&config, 0).unwrap();
        let ds = &sim.dataset;

        // oracle predictor reproduces the held-out responses exactly
        let report = prediction_error_with(ds, 3, 2, 17, |_train, test, _seed| {
            Ok(test
                .individuals()
                .iter()
                .flat_map(|b| b.y.iter().cloned().collect::<Vec<_>>())
                .collect())
        })
        .unwrap();
        assert_eq!(report.overall_mse, 0.0);

        // constant predictor: hand-computed mean squared error
        let report = prediction_error_with(ds, 1, 2, 17, |train, test, _seed| {
            let mean = train.stacked_y().mean();
            Ok(vec![mean; test.total_obs()])
        })
        .unwrap();
        let (train, test) = split_train_test(ds, 2, derive_seed2(17, TAG_SPLIT, 0)).unwrap();
        let mean = train.stacked_y().mean();
        let hand: f64 = test
            .individuals()
            .iter()
            .flat_map(|b| b.y.iter().map(move |&y| (y - mean).powi(2)))
            .sum::<f64>()
            / test.total_obs() as f64;
        assert_relative_eq!(report.overall_mse, hand, epsilon = 1e-12);

        // determinism
        let r1 = prediction_error_with(ds, 2, 2, 23, |train, test, _| {
            let mean = train.stacked_y().mean();
            Ok(vec![mean; test.total_obs()])
        })
        .unwrap();
        let r2 = prediction_error_with(ds, 2, 2, 23, |train, test, _| {
            let mean = train.stacked_y().mean();
            Ok(vec![mean; test.total_obs()])
        })
        .unwrap();
        assert_eq!(r1.per_split, r2.per_split);
    }

    #[test]
    fn stability_score_examples() {
        // identical rankings
        assert_eq!(stability_score(&[0, 1, 2], &[0, 1, 2], 0).unwrap(), 1.0);
        // (a,b,c) vs (b,a,c)
        let v = [0, 1, 2];
        let vp = [1, 0, 2];
        assert_relative_eq!(stability_score(&v, &vp, 0).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(stability_score(&v, &vp, 1).unwrap(), 1.0);
        // neighborhood covering the whole list
        assert_eq!(stability_score(&[2, 0, 1], &[1, 2, 0], 2).unwrap(), 1.0);
        // not permutations of the same set
        assert!(matches!(
            stability_score(&[0, 1], &[0, 2], 1).unwrap_err(),
            Error::NotPermutations
        ));
        // truncated lists may cover different sets
        let full_a = [5, 3, 1, 0, 2, 4];
        let full_b = [3, 5, 2, 1, 0, 4];
        let s = stability_score_topk(&full_a, &full_b, 3, 1).unwrap();
        assert!((0.0..=1.0).contains(&s));
    }

    proptest! {
        #[test]
        fn stability_score_monotone_in_eta(seed in 0u64..200, p in 2usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v: Vec<usize> = (0..p).collect();
            let mut vp: Vec<usize> = (0..p).collect();
            for i in (1..p).rev() {
                v.swap(i, rng.random_range(0..=i));
                vp.swap(i, rng.random_range(0..=i));
            }
            let mut prev = 0.0;
            for eta in 0..p {
                let s = stability_score(&v, &vp, eta).unwrap();
                prop_assert!(s + 1e-15 >= prev, "score decreased at eta = {eta}");
                prev = s;
            }
            // self-comparison is perfect at every eta
            prop_assert_eq!(stability_score(&v, &v, 0).unwrap(), 1.0);
            // maximal neighborhood covers everything
            prop_assert_eq!(stability_score(&v, &vp, p - 1).unwrap(), 1.0);
        }
    }
}
