//! Longitudinal data model: per-individual observation blocks, variance
//! components, marginal covariance assembly and train/test splitting.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;

/// Observations of one individual, sorted by time.
///
/// `x` holds the fixed-effect covariates (one row per observation), `z` the
/// random-effect covariates, `y` the responses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndividualBlock {
    pub id: String,
    pub times: Vec<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl IndividualBlock {
    /// Number of observations in this block.
    pub fn n_obs(&self) -> usize {
        self.times.len()
    }

    /// Extract the observations at the given (ascending) row positions.
    fn subset(&self, rows: &[usize]) -> IndividualBlock {
        IndividualBlock {
            id: self.id.clone(),
            times: rows.iter().map(|&r| self.times[r]).collect(),
            x: DMatrix::from_fn(rows.len(), self.x.ncols(), |i, j| self.x[(rows[i], j)]),
            z: DMatrix::from_fn(rows.len(), self.z.ncols(), |i, j| self.z[(rows[i], j)]),
            y: DVector::from_fn(rows.len(), |i, _| self.y[rows[i]]),
        }
    }
}

/// A collection of individual blocks sharing the same covariate layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LongitudinalDataset {
    individuals: Vec<IndividualBlock>,
    p: usize,
    q: usize,
}

impl LongitudinalDataset {
    /// Build a dataset from blocks, validating all structural invariants:
    /// consistent lengths within blocks, strictly increasing times, identical
    /// `p`/`q` across blocks, unique ids, finite values and at least one
    /// observation overall.
    pub fn new(individuals: Vec<IndividualBlock>) -> Result<Self> {
        if individuals.is_empty() {
            return Err(Error::EmptyInput("dataset has no individuals".into()));
        }
        let p = individuals[0].x.ncols();
        let q = individuals[0].z.ncols();
        let mut seen = HashMap::new();
        for block in &individuals {
            let n_i = block.times.len();
            if n_i == 0 {
                return Err(Error::EmptyInput(format!(
                    "individual `{}` has no observations",
                    block.id
                )));
            }
            for (name, len) in [
                ("x rows", block.x.nrows()),
                ("z rows", block.z.nrows()),
                ("y entries", block.y.len()),
            ] {
                if len != n_i {
                    return Err(Error::DimensionMismatch {
                        context: format!("{name} of individual `{}`", block.id),
                        expected: n_i,
                        actual: len,
                    });
                }
            }
            if block.x.ncols() != p {
                return Err(Error::DimensionMismatch {
                    context: format!("fixed-effect covariates of `{}`", block.id),
                    expected: p,
                    actual: block.x.ncols(),
                });
            }
            if block.z.ncols() != q {
                return Err(Error::DimensionMismatch {
                    context: format!("random-effect covariates of `{}`", block.id),
                    expected: q,
                    actual: block.z.ncols(),
                });
            }
            for w in block.times.windows(2) {
                if !(w[1] > w[0]) {
                    return Err(Error::DuplicateTime {
                        id: block.id.clone(),
                        time: w[1],
                    });
                }
            }
            let finite = block.times.iter().all(|v| v.is_finite())
                && block.x.iter().all(|v| v.is_finite())
                && block.z.iter().all(|v| v.is_finite())
                && block.y.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidParameter(format!(
                    "non-finite value in individual `{}`",
                    block.id
                )));
            }
            if seen.insert(block.id.clone(), ()).is_some() {
                return Err(Error::InvalidParameter(format!(
                    "duplicate individual id `{}`",
                    block.id
                )));
            }
        }
        Ok(Self { individuals, p, q })
    }

    pub fn individuals(&self) -> &[IndividualBlock] {
        &self.individuals
    }

    /// Number of individuals `n`.
    pub fn n(&self) -> usize {
        self.individuals.len()
    }

    /// Number of fixed-effect covariates.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of random-effect covariates.
    pub fn q(&self) -> usize {
        self.q
    }

    /// Total number of observations `N = Σ n_i`.
    pub fn total_obs(&self) -> usize {
        self.individuals.iter().map(|b| b.n_obs()).sum()
    }

    /// Row range of each block in the stacked representation.
    pub fn block_row_ranges(&self) -> Vec<Range<usize>> {
        let mut ranges = Vec::with_capacity(self.n());
        let mut start = 0;
        for block in &self.individuals {
            let end = start + block.n_obs();
            ranges.push(start..end);
            start = end;
        }
        ranges
    }

    /// Stack all fixed-effect covariates into an `N × p` matrix.
    pub fn stacked_x(&self) -> DMatrix<f64> {
        let n_rows = self.total_obs();
        let mut x = DMatrix::zeros(n_rows, self.p);
        let mut row = 0;
        for block in &self.individuals {
            for r in 0..block.n_obs() {
                for c in 0..self.p {
                    x[(row, c)] = block.x[(r, c)];
                }
                row += 1;
            }
        }
        x
    }

    /// Stack all responses into an `N`-vector.
    pub fn stacked_y(&self) -> DVector<f64> {
        let mut y = DVector::zeros(self.total_obs());
        let mut row = 0;
        for block in &self.individuals {
            for r in 0..block.n_obs() {
                y[row] = block.y[r];
                row += 1;
            }
        }
        y
    }

    /// Index of the individual with the given id.
    pub fn find_individual(&self, id: &str) -> Option<usize> {
        self.individuals.iter().position(|b| b.id == id)
    }

    /// True if any block contains exactly this measurement time.
    pub fn contains_time(&self, t: f64) -> bool {
        self.individuals
            .iter()
            .any(|b| b.times.iter().any(|&s| s == t))
    }

    /// Write the dataset in long CSV format (`id,time,y,z1..zq,x1..xp`).
    /// `comments` are emitted first as `# `-prefixed lines.
    pub fn write_csv<W: Write>(&self, mut out: W, comments: &[String]) -> Result<()> {
        for line in comments {
            writeln!(out, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string(), "time".to_string(), "y".to_string()];
        header.extend((1..=self.q).map(|j| format!("z{j}")));
        header.extend((1..=self.p).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for block in &self.individuals {
            for r in 0..block.n_obs() {
                record.clear();
                record.push(block.id.clone());
                record.push(format!("{}", block.times[r]));
                record.push(format!("{}", block.y[r]));
                for c in 0..self.q {
                    record.push(format!("{}", block.z[(r, c)]));
                }
                for c in 0..self.p {
                    record.push(format!("{}", block.x[(r, c)]));
                }
                w.write_record(&record)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Variance components of the mixed model: random-effect covariance `B`,
/// process scale `γ²` and residual variance `σ²`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub b: DMatrix<f64>,
    pub gamma2: f64,
    pub sigma2: f64,
}

impl VarianceComponents {
    /// Validate and construct. `b` must be square, symmetric and positive
    /// semidefinite (to −1e-8), `sigma2 > 0`, `gamma2 ≥ 0` (0 means no
    /// serial-correlation process). Small asymmetries are symmetrized away.
    pub fn new(b: DMatrix<f64>, gamma2: f64, sigma2: f64) -> Result<Self> {
        if b.nrows() != b.ncols() {
            return Err(Error::DimensionMismatch {
                context: "random-effect covariance".into(),
                expected: b.nrows(),
                actual: b.ncols(),
            });
        }
        let asym = (&b - b.transpose()).abs().max();
        if asym > 1e-8 * (1.0 + b.abs().max()) {
            return Err(Error::InvalidParameter(format!(
                "B is not symmetric (max asymmetry {asym:.3e})"
            )));
        }
        let b = (&b + b.transpose()) * 0.5;
        let min_eig = b
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-8 {
            return Err(Error::NotPositiveDefinite(format!(
                "B has eigenvalue {min_eig:.3e}"
            )));
        }
        if !(sigma2 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma2 must be positive, got {sigma2}"
            )));
        }
        if !(gamma2 >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma2 must be nonnegative, got {gamma2}"
            )));
        }
        Ok(Self { b, gamma2, sigma2 })
    }

    /// Dimension `q` of the random-effect covariance.
    pub fn q(&self) -> usize {
        self.b.nrows()
    }
}

/// Marginal covariance `V_i = Z_i B Z_iᵀ + γ² K_i + σ² I` of one block,
/// together with its Cholesky factorization. The factorization is computed
/// once per (block, variance components, kernel) and reused for every solve
/// within an EM iteration.
#[derive(Debug, Clone)]
pub struct BlockCovariance {
    v: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    v_inv: DMatrix<f64>,
    log_det: f64,
}

impl BlockCovariance {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Explicit inverse `V⁻¹` (blocks are small, so this is cheap and reused
    /// in the leaf refit and the variance updates).
    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.v_inv
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Solve `V x = rhs`.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn n(&self) -> usize {
        self.v.nrows()
    }
}

/// Assemble the marginal covariance of one block and factorize it.
///
/// Errors if the assembled matrix is numerically non-positive-definite, which
/// signals degenerate inputs (for example near-duplicate times with
/// `gamma2 > 0` and a vanishing `sigma2`).
pub fn marginal_covariance(
    block: &IndividualBlock,
    vc: &VarianceComponents,
    kernel: &KernelSpec,
) -> Result<BlockCovariance> {
    if vc.q() != block.z.ncols() {
        return Err(Error::DimensionMismatch {
            context: "variance components vs random-effect design".into(),
            expected: block.z.ncols(),
            actual: vc.q(),
        });
    }
    let n = block.n_obs();
    let mut v = &block.z * &vc.b * block.z.transpose();
    if vc.gamma2 > 0.0 && !kernel.is_none() {
        let k = kernel.matrix(&block.times)?;
        v += k * vc.gamma2;
    }
    for j in 0..n {
        v[(j, j)] += vc.sigma2;
    }
    // matmul round-off can leave tiny asymmetries
    let v = (&v + v.transpose()) * 0.5;
    let chol = Cholesky::new(v.clone()).ok_or_else(|| {
        Error::NotPositiveDefinite(format!(
            "marginal covariance of individual `{}`",
            block.id
        ))
    })?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let v_inv = chol.inverse();
    Ok(BlockCovariance {
        v,
        chol,
        v_inv,
        log_det,
    })
}

/// Column-naming configuration for the long CSV format.
///
/// Empty `z`/`x` lists mean auto-detection: columns named `z<number>` are
/// random-effect covariates and columns named `x<number>` are fixed-effect
/// covariates, each ordered by their numeric suffix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub id: String,
    pub time: String,
    pub y: String,
    pub z: Vec<String>,
    pub x: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            id: "id".into(),
            time: "time".into(),
            y: "y".into(),
            z: Vec::new(),
            x: Vec::new(),
        }
    }
}

impl Schema {
    /// Parse a plain-text `key=value` schema file. Recognized keys: `id`,
    /// `time`, `y`, `z`, `x`; the last two take comma-separated column lists.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut schema = Schema::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "schema line {} is not key=value: `{line}`",
                    lineno + 1
                ))
            })?;
            let value = value.trim();
            match key.trim() {
                "id" => schema.id = value.into(),
                "time" => schema.time = value.into(),
                "y" => schema.y = value.into(),
                "z" => schema.z = split_list(value),
                "x" => schema.x = split_list(value),
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown schema key `{other}`"
                    )))
                }
            }
        }
        Ok(schema)
    }
}

fn split_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Columns named `<prefix><digits>`, ordered by the numeric suffix.
fn detect_columns(headers: &csv::StringRecord, prefix: &str) -> Vec<String> {
    let mut found: Vec<(u64, String)> = headers
        .iter()
        .filter_map(|h| {
            let rest = h.strip_prefix(prefix)?;
            if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            Some((rest.parse().ok()?, h.to_string()))
        })
        .collect();
    found.sort();
    found.iter().map(|(_, name)| name.clone()).collect()
}

/// Load a long-format CSV stream into a dataset.
///
/// Rows are grouped by id (in order of first appearance) and sorted by time
/// within each group. Lines starting with `#` are treated as comments.
pub fn load_dataset<R: Read>(reader: R, schema: &Schema) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::EmptyInput("csv stream has no header".into()));
    }

    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = col(&schema.id)?;
    let time_col = col(&schema.time)?;
    let y_col = col(&schema.y)?;
    let z_names = if schema.z.is_empty() {
        detect_columns(&headers, "z")
    } else {
        schema.z.clone()
    };
    let x_names = if schema.x.is_empty() {
        detect_columns(&headers, "x")
    } else {
        schema.x.clone()
    };
    if z_names.is_empty() {
        return Err(Error::MissingColumn(
            "z1 (no random-effect covariate columns found)".into(),
        ));
    }
    if x_names.is_empty() {
        return Err(Error::MissingColumn(
            "x1 (no fixed-effect covariate columns found)".into(),
        ));
    }
    let z_cols = z_names.iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;
    let x_cols = x_names.iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;

    struct Row {
        time: f64,
        y: f64,
        z: Vec<f64>,
        x: Vec<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();

    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let parse = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| Error::NonNumeric {
                column: headers.get(c).unwrap_or("?").to_string(),
                value: raw.to_string(),
                record: idx + 1,
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumeric {
                    column: headers.get(c).unwrap_or("?").to_string(),
                    value: raw.to_string(),
                    record: idx + 1,
                });
            }
            Ok(v)
        };
        let id = record
            .get(id_col)
            .ok_or_else(|| Error::MissingColumn(schema.id.clone()))?
            .to_string();
        let row = Row {
            time: parse(time_col)?,
            y: parse(y_col)?,
            z: z_cols.iter().map(|&c| parse(c)).collect::<Result<_>>()?,
            x: x_cols.iter().map(|&c| parse(c)).collect::<Result<_>>()?,
        };
        groups
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(row);
    }
    if order.is_empty() {
        return Err(Error::EmptyInput("csv stream has no data rows".into()));
    }

    let p = x_cols.len();
    let q = z_cols.len();
    let mut blocks = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).unwrap();
        rows.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
        for w in rows.windows(2) {
            if w[1].time == w[0].time {
                return Err(Error::DuplicateTime {
                    id,
                    time: w[0].time,
                });
            }
        }
        blocks.push(IndividualBlock {
            id,
            times: rows.iter().map(|r| r.time).collect(),
            x: DMatrix::from_fn(rows.len(), p, |i, j| rows[i].x[j]),
            z: DMatrix::from_fn(rows.len(), q, |i, j| rows[i].z[j]),
            y: DVector::from_fn(rows.len(), |i, _| rows[i].y),
        });
    }
    LongitudinalDataset::new(blocks)
}

/// Randomly hold out `holdout` observations of every individual.
///
/// Returns `(train, test)`; their rows partition the dataset exactly and the
/// split is deterministic given the seed.
pub fn split_train_test(
    dataset: &LongitudinalDataset,
    holdout: usize,
    seed: u64,
) -> Result<(LongitudinalDataset, LongitudinalDataset)> {
    if holdout == 0 {
        return Err(Error::InvalidParameter(
            "holdout must be at least 1".into(),
        ));
    }
    for block in dataset.individuals() {
        if block.n_obs() <= holdout {
            return Err(Error::InfeasibleSplit {
                id: block.id.clone(),
                available: block.n_obs(),
                requested: holdout,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_blocks = Vec::with_capacity(dataset.n());
    let mut test_blocks = Vec::with_capacity(dataset.n());
    for block in dataset.individuals() {
        let n_i = block.n_obs();
        let mut pos: Vec<usize> = (0..n_i).collect();
        for k in 0..holdout {
            let j = rng.random_range(k..n_i);
            pos.swap(k, j);
        }
        let mut test_rows: Vec<usize> = pos[..holdout].to_vec();
        let mut train_rows: Vec<usize> = pos[holdout..].to_vec();
        test_rows.sort_unstable();
        train_rows.sort_unstable();
        test_blocks.push(block.subset(&test_rows));
        train_blocks.push(block.subset(&train_rows));
    }
    Ok((
        LongitudinalDataset::new(train_blocks)?,
        LongitudinalDataset::new(test_blocks)?,
    ))
}
