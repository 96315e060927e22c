//! Out-of-sample response prediction at arbitrary times.
//!
//! For a known individual the prediction composes the fitted mean function,
//! the individual's random effects and the serial-correlation process carried
//! to the query time:
//!
//! ```text
//! Ŷ_i(t) = f̂(X_i(t)) + Z_i(t) b̂_i + ω̃_i(t)
//! ```
//!
//! Inside the observed time range `ω̃` interpolates linearly between the
//! fitted values; outside it decays from the nearest endpoint with the kernel
//! cross-covariance ratio `K(t, t_end) / K(t_end, t_end)` (the conditional
//! expectation given the endpoint value). Individuals unknown to the model
//! get the population-level prediction `f̂(X(t))` — random parts at their
//! zero prior means.

use std::io::Read;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::em::{FittedModel, IndividualEffects};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;

/// A single prediction request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionQuery {
    /// Individual id; `None` (or an id the model has never seen) requests the
    /// population-level prediction.
    pub individual: Option<String>,
    pub time: f64,
    /// Fixed-effect covariates at the query time (length `p`).
    pub x: DVector<f64>,
    /// Random-effect covariates at the query time (length `q`).
    pub z: DVector<f64>,
}

/// Carry a fitted serial-correlation path to an arbitrary time.
///
/// * `t` equal to an observed time returns the fitted value exactly;
/// * inside the observed range, linear interpolation between the bracketing
///   fitted values;
/// * before the first (after the last) observed time, the kernel ratio
///   `K(t, t_1)/K(t_1, t_1) · ω̂(t_1)` (symmetrically for the right end).
pub fn interpolate_omega(
    times: &[f64],
    omega: &[f64],
    t: f64,
    kernel: &KernelSpec,
) -> Result<f64> {
    if kernel.is_none() {
        return Err(Error::InvalidParameter(
            "serial-correlation interpolation needs a stochastic kernel".into(),
        ));
    }
    if times.is_empty() || times.len() != omega.len() {
        return Err(Error::DimensionMismatch {
            context: "fitted process path".into(),
            expected: times.len(),
            actual: omega.len(),
        });
    }
    let first = times[0];
    let last = times[times.len() - 1];
    if t < first {
        let denom = kernel.cross(first, first)?;
        if denom == 0.0 {
            return Err(Error::KernelDomain(format!(
                "zero kernel variance at anchor time {first}"
            )));
        }
        return Ok(kernel.cross(t, first)? / denom * omega[0]);
    }
    if t > last {
        let denom = kernel.cross(last, last)?;
        if denom == 0.0 {
            return Err(Error::KernelDomain(format!(
                "zero kernel variance at anchor time {last}"
            )));
        }
        return Ok(kernel.cross(t, last)? / denom * omega[omega.len() - 1]);
    }
    // inside the range: exact hit or linear interpolation between brackets
    match times.iter().position(|&s| s >= t) {
        Some(j) if times[j] == t => Ok(omega[j]),
        Some(j) => {
            let (t_lo, t_hi) = (times[j - 1], times[j]);
            let w = (t - t_lo) / (t_hi - t_lo);
            Ok((1.0 - w) * omega[j - 1] + w * omega[j])
        }
        None => unreachable!("t <= last implies a bracketing index exists"),
    }
}

impl FittedModel {
    fn check_query(&self, query: &PredictionQuery) -> Result<()> {
        if query.x.len() != self.p {
            return Err(Error::DimensionMismatch {
                context: "query fixed-effect covariates".into(),
                expected: self.p,
                actual: query.x.len(),
            });
        }
        if query.z.len() != self.q {
            return Err(Error::DimensionMismatch {
                context: "query random-effect covariates".into(),
                expected: self.q,
                actual: query.z.len(),
            });
        }
        Ok(())
    }

    fn predict_for(&self, effects: Option<&IndividualEffects>, query: &PredictionQuery) -> Result<f64> {
        let mut value = self.mean_model.predict_point(&query.x)?;
        if let Some(eff) = effects {
            value += query.z.dot(&eff.b_hat);
            if !self.spec.kernel.is_none() {
                value += interpolate_omega(
                    &eff.times,
                    eff.omega_hat.as_slice(),
                    query.time,
                    &self.spec.kernel,
                )?;
            }
        }
        Ok(value)
    }

    /// Predict a response. Unknown (or absent) individuals fall back to the
    /// population-level prediction.
    pub fn predict(&self, query: &PredictionQuery) -> Result<f64> {
        self.check_query(query)?;
        let effects = query
            .individual
            .as_deref()
            .and_then(|id| self.find_individual(id));
        self.predict_for(effects, query)
    }

    /// Predict a response for an individual that must be known to the model.
    pub fn predict_known(&self, id: &str, query: &PredictionQuery) -> Result<f64> {
        self.check_query(query)?;
        let effects = self
            .find_individual(id)
            .ok_or_else(|| Error::UnknownIndividual(id.to_string()))?;
        self.predict_for(Some(effects), query)
    }
}

/// Load prediction queries from a CSV stream (`id,time,z1..zq,x1..xp`,
/// covariate columns detected by name as in the dataset loader). `p` and `q`
/// come from the fitted model.
pub fn load_queries<R: Read>(reader: R, p: usize, q: usize) -> Result<Vec<PredictionQuery>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = col("id")?;
    let time_col = col("time")?;
    let z_cols: Vec<usize> = (1..=q)
        .map(|j| col(&format!("z{j}")))
        .collect::<Result<_>>()?;
    let x_cols: Vec<usize> = (1..=p)
        .map(|j| col(&format!("x{j}")))
        .collect::<Result<_>>()?;

    let mut queries = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let parse = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            raw.parse().map_err(|_| Error::NonNumeric {
                column: headers.get(c).unwrap_or("?").to_string(),
                value: raw.to_string(),
                record: idx + 1,
            })
        };
        queries.push(PredictionQuery {
            individual: Some(record.get(id_col).unwrap_or("").to_string()),
            time: parse(time_col)?,
            x: DVector::from_fn(p, |j, _| parse(x_cols[j]).unwrap_or(f64::NAN)),
            z: DVector::from_fn(q, |j, _| parse(z_cols[j]).unwrap_or(f64::NAN)),
        });
        let last = queries.last().unwrap();
        if last.x.iter().any(|v| !v.is_finite()) || last.z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonNumeric {
                column: "covariates".into(),
                value: "non-finite".into(),
                record: idx + 1,
            });
        }
    }
    if queries.is_empty() {
        return Err(Error::EmptyInput("query csv has no rows".into()));
    }
    Ok(queries)
}
