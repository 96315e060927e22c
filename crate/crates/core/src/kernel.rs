//! Serial-correlation covariance kernels.
//!
//! The within-individual process covariance factors as `γ² K(s, t)` where `K`
//! depends only on observation times (and possibly one shape parameter). The
//! supported families and their closed forms:
//!
//! * `none` — zero matrix; used by the non-stochastic methods so they share
//!   one code path with γ² pinned to 0,
//! * `bm` — standard Brownian motion, `K(s,t) = min(s,t)`,
//! * `fbm:h=<hurst>` — fractional Brownian motion,
//!   `K(s,t) = ½(s^{2h} + t^{2h} − |s−t|^{2h})` with `h ∈ (0, 1]`,
//! * `ou:alpha=<rate>` — Ornstein-Uhlenbeck with unit marginal variance,
//!   `K(s,t) = exp(−α|s−t|)` with `α > 0`.
//!
//! Brownian-family kernels require strictly positive times; callers with a
//! time origin at or below zero must shift it first.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Covariance kernel family for the serial-correlation process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelSpec {
    None,
    Brownian,
    FractionalBrownian { hurst: f64 },
    OrnsteinUhlenbeck { rate: f64 },
}

impl KernelSpec {
    /// True for the `none` family (no serial-correlation process).
    pub fn is_none(&self) -> bool {
        matches!(self, KernelSpec::None)
    }

    /// Brownian-family kernels are only defined for strictly positive times.
    pub fn requires_positive_times(&self) -> bool {
        matches!(
            self,
            KernelSpec::Brownian | KernelSpec::FractionalBrownian { .. }
        )
    }

    /// Check the shape parameter is in range.
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::FractionalBrownian { hurst } => {
                if !(hurst > 0.0 && hurst <= 1.0) {
                    return Err(Error::KernelDomain(format!(
                        "Hurst exponent must lie in (0, 1], got {hurst}"
                    )));
                }
            }
            KernelSpec::OrnsteinUhlenbeck { rate } => {
                if !(rate > 0.0) {
                    return Err(Error::KernelDomain(format!(
                        "Ornstein-Uhlenbeck rate must be positive, got {rate}"
                    )));
                }
            }
            KernelSpec::None | KernelSpec::Brownian => {}
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if self.requires_positive_times() && !(t > 0.0) {
            return Err(Error::KernelDomain(format!(
                "Brownian-family kernels require positive times, got t = {t}"
            )));
        }
        Ok(())
    }

    fn value(&self, s: f64, t: f64) -> f64 {
        match *self {
            KernelSpec::None => 0.0,
            KernelSpec::Brownian => s.min(t),
            KernelSpec::FractionalBrownian { hurst } => {
                // At h = 1/2 the closed form reduces to min(s, t); evaluate it
                // that way so fbm(0.5) and bm agree bit-for-bit.
                if hurst == 0.5 {
                    s.min(t)
                } else {
                    let e = 2.0 * hurst;
                    0.5 * (s.powf(e) + t.powf(e) - (s - t).abs().powf(e))
                }
            }
            KernelSpec::OrnsteinUhlenbeck { rate } => (-rate * (s - t).abs()).exp(),
        }
    }

    /// Kernel matrix `[K(t_j, t_k)]` on a strictly increasing time grid.
    pub fn matrix(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        self.validate()?;
        if times.is_empty() {
            return Err(Error::EmptyInput("kernel time grid".into()));
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::KernelDomain(format!(
                    "times must be strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        self.check_time(times[0])?;
        let n = times.len();
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            for l in j..n {
                let v = self.value(times[j], times[l]);
                k[(j, l)] = v;
                k[(l, j)] = v;
            }
        }
        Ok(k)
    }

    /// Cross-covariance `K(t, anchor)` between a query time and one grid time.
    pub fn cross(&self, t: f64, anchor: f64) -> Result<f64> {
        self.validate()?;
        self.check_time(t)?;
        self.check_time(anchor)?;
        Ok(self.value(t, anchor))
    }

    /// Replace the shape parameter (Hurst exponent or OU rate), keeping the
    /// family. Used by the likelihood grid search.
    pub fn with_param(&self, value: f64) -> Result<KernelSpec> {
        let spec = match self {
            KernelSpec::FractionalBrownian { .. } => {
                KernelSpec::FractionalBrownian { hurst: value }
            }
            KernelSpec::OrnsteinUhlenbeck { .. } => KernelSpec::OrnsteinUhlenbeck { rate: value },
            KernelSpec::None | KernelSpec::Brownian => {
                return Err(Error::InvalidParameter(format!(
                    "kernel `{self}` has no tunable parameter"
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::None => write!(f, "none"),
            KernelSpec::Brownian => write!(f, "bm"),
            KernelSpec::FractionalBrownian { hurst } => write!(f, "fbm:h={hurst}"),
            KernelSpec::OrnsteinUhlenbeck { rate } => write!(f, "ou:alpha={rate}"),
        }
    }
}

impl FromStr for KernelSpec {
    type Err = Error;

    /// Parse `none | bm | fbm:h=<value> | ou:alpha=<value>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: &str| Error::InvalidParameter(format!("kernel `{s}`: {msg}"));
        let spec = match s.trim() {
            "none" => KernelSpec::None,
            "bm" => KernelSpec::Brownian,
            other => {
                let (family, arg) = other
                    .split_once(':')
                    .ok_or_else(|| bad("expected none, bm, fbm:h=<v> or ou:alpha=<v>"))?;
                let (key, value) = arg
                    .split_once('=')
                    .ok_or_else(|| bad("expected key=value after `:`"))?;
                let value: f64 = value
                    .parse()
                    .map_err(|_| bad("parameter value is not a number"))?;
                match (family, key) {
                    ("fbm", "h") => KernelSpec::FractionalBrownian { hurst: value },
                    ("ou", "alpha") => KernelSpec::OrnsteinUhlenbeck { rate: value },
                    _ => return Err(bad("unknown family or parameter name")),
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}
