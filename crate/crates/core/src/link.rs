//! Inverse link functions for cumulative link models.
//!
//! Each [`LinkKind`] is a CDF-like map `g` from the latent axis onto `[0, 1]`.
//! Besides `g`, `g'` and `g''`, the log-space quantities `log g`, `log(1 - g)`
//! and `log g'` are provided so that interval probabilities far out in the
//! tails can be formed without subtracting two numbers close to one.
//!
//! Infinite arguments are the IEEE infinities.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    /// Logistic CDF.
    #[default]
    Logit,
    /// Standard normal CDF.
    Probit,
    /// Gumbel-min CDF, `1 - exp(-e^x)`.
    Cloglog,
}

impl LinkKind {
    pub const ALL: [LinkKind; 3] = [LinkKind::Logit, LinkKind::Probit, LinkKind::Cloglog];

    pub fn name(self) -> &'static str {
        match self {
            LinkKind::Logit => "logit",
            LinkKind::Probit => "probit",
            LinkKind::Cloglog => "cloglog",
        }
    }

    /// `1 - g(x) = g(-x)` holds for every `x`.
    pub fn is_symmetric(self) -> bool {
        matches!(self, LinkKind::Logit | LinkKind::Probit)
    }

    /// `g(x)`. NaN propagates.
    pub fn cdf(self, x: f64) -> f64 {
        match self {
            LinkKind::Logit => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            LinkKind::Probit => 0.5 * libm::erfc(-x * FRAC_1_SQRT_2),
            LinkKind::Cloglog => -(-x.exp()).exp_m1(),
        }
    }

    /// `g'(x)`, zero at both infinities.
    pub fn density(self, x: f64) -> f64 {
        if x.is_infinite() {
            return 0.0;
        }
        match self {
            LinkKind::Logit => {
                let e = (-x.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            LinkKind::Probit => INV_SQRT_2PI * (-0.5 * x * x).exp(),
            LinkKind::Cloglog => (x - x.exp()).exp(),
        }
    }

    /// `d/dx log g'(x)`, so that `g''(x) = g'(x) * score(x)`.
    pub fn score(self, x: f64) -> f64 {
        match self {
            LinkKind::Logit => -(0.5 * x).tanh(),
            LinkKind::Probit => -x,
            LinkKind::Cloglog => 1.0 - x.exp(),
        }
    }

    /// `g''(x)`, zero at both infinities.
    pub fn density_slope(self, x: f64) -> f64 {
        if x.is_infinite() {
            return 0.0;
        }
        self.density(x) * self.score(x)
    }

    /// `log g'(x)`; `-inf` at both infinities.
    pub fn log_density(self, x: f64) -> f64 {
        if x.is_infinite() {
            return f64::NEG_INFINITY;
        }
        match self {
            LinkKind::Logit => {
                let a = x.abs();
                -a - 2.0 * (-a).exp().ln_1p()
            }
            LinkKind::Probit => -0.5 * x * x - LN_SQRT_2PI,
            LinkKind::Cloglog => x - x.exp(),
        }
    }

    /// `log g(x)`, accurate in both tails.
    pub fn log_cdf(self, x: f64) -> f64 {
        match self {
            LinkKind::Logit => -softplus(-x),
            LinkKind::Probit => log_ndtr(x),
            LinkKind::Cloglog => {
                if x < -20.0 {
                    // log(1 - exp(-t)) = log t - t/2 + t^2/24 + O(t^4)
                    let t = x.exp();
                    x - 0.5 * t + t * t / 24.0
                } else {
                    (-(-x.exp()).exp_m1()).ln()
                }
            }
        }
    }

    /// `log(1 - g(x))`, accurate in both tails.
    pub fn log_sf(self, x: f64) -> f64 {
        match self {
            LinkKind::Logit => -softplus(x),
            LinkKind::Probit => log_ndtr(-x),
            LinkKind::Cloglog => -x.exp(),
        }
    }
}

impl fmt::Display for LinkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LinkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "logit" => Ok(LinkKind::Logit),
            "probit" => Ok(LinkKind::Probit),
            "cloglog" => Ok(LinkKind::Cloglog),
            other => Err(Error::invalid(format!(
                "unknown link '{other}' (expected logit, probit or cloglog)"
            ))),
        }
    }
}

fn check(x: f64, what: &'static str) -> Result<f64> {
    if x.is_nan() {
        Err(Error::NanInput(what))
    } else {
        Ok(x)
    }
}

/// `g(x)` with NaN rejected.
pub fn g(kind: LinkKind, x: f64) -> Result<f64> {
    Ok(kind.cdf(check(x, "g")?))
}

/// `g'(x)` with NaN rejected.
pub fn g_prime(kind: LinkKind, x: f64) -> Result<f64> {
    Ok(kind.density(check(x, "g_prime")?))
}

/// `g''(x)` with NaN rejected.
pub fn g_double_prime(kind: LinkKind, x: f64) -> Result<f64> {
    Ok(kind.density_slope(check(x, "g_double_prime")?))
}

pub fn is_symmetric(kind: LinkKind) -> bool {
    kind.is_symmetric()
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    LinkKind::Logit.cdf(x)
}

/// `log(1 - e^x)` for `x <= 0`.
pub fn log1mexp(x: f64) -> f64 {
    if x > -LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// `log Phi(x)`.
fn log_ndtr(x: f64) -> f64 {
    if x > 0.0 {
        (-0.5 * libm::erfc(x * FRAC_1_SQRT_2)).ln_1p()
    } else if x > -30.0 {
        (0.5 * libm::erfc(-x * FRAC_1_SQRT_2)).ln()
    } else if x == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        // Mills-ratio asymptotic series; at |x| >= 30 the terms below drop
        // under 1e-16 relative.
        let r = 1.0 / (x * x);
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..=8 {
            term *= -((2 * k - 1) as f64) * r;
            sum += term;
        }
        -0.5 * x * x - (-x).ln() - 0.5 * (2.0 * PI).ln() + sum.ln()
    }
}
