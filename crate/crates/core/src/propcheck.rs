//! Randomized checks of the structural properties the theory relies on:
//! convexity of the per-sample loss, monotonicity of the regularized
//! minimizer in the interval endpoints, and strict ordering of the solved
//! latents.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clm::{nll_point, Thresholds};
use crate::eos::{self, inner_minimizer, EosProblem, Phase};
use crate::error::{Error, Result};
use crate::link::LinkKind;
use crate::rng;

pub const CONVEXITY_TOL: f64 = 1e-8;
pub const MONOTONE_TOL: f64 = 1e-10;
pub const ORDERING_TOL: f64 = 1e-10;

const GRID_POINTS: usize = 41;
const FD_STEP: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    Convexity,
    MinimizerMonotonicity,
    StrictOrdering,
}

impl Property {
    pub const ALL: [Property; 3] = [
        Property::Convexity,
        Property::MinimizerMonotonicity,
        Property::StrictOrdering,
    ];

    fn code(self) -> u64 {
        match self {
            Property::Convexity => 1,
            Property::MinimizerMonotonicity => 2,
            Property::StrictOrdering => 3,
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Property::Convexity => CONVEXITY_TOL,
            Property::MinimizerMonotonicity => MONOTONE_TOL,
            Property::StrictOrdering => ORDERING_TOL,
        }
    }

    /// Convexity and monotonicity allow `-tol`; ordering needs a gap above `tol`.
    pub fn holds(self, margin: f64) -> bool {
        match self {
            Property::StrictOrdering => margin > ORDERING_TOL,
            _ => margin >= -self.tolerance(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub property: Property,
    pub kind: LinkKind,
    pub trials: usize,
    pub violations: usize,
    /// Trials that did not apply (a trivial-phase problem for the ordering
    /// check).
    pub not_applicable: usize,
    /// Smallest checked quantity: curvature, minimizer shift or latent gap.
    pub worst_margin: Option<f64>,
    pub tolerance: f64,
    pub seed: u64,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

enum Outcome {
    Margin(f64),
    NotApplicable,
}

fn trial_rng(seed: u64, property: Property, kind: LinkKind, trial: usize) -> rng::Rng {
    let kind_code = match kind {
        LinkKind::Logit => 0u64,
        LinkKind::Probit => 1,
        LinkKind::Cloglog => 2,
    };
    rng::stream(seed, (property.code() << 40) | (kind_code << 32) | trial as u64)
}

/// `a ~ U(-6, 6)`, `b = a + e^v` with `v ~ U(-3, 2)`.
pub fn sample_interval(rng: &mut rng::Rng) -> (f64, f64) {
    let a = rng.random_range(-6.0..6.0);
    let v: f64 = rng.random_range(-3.0..2.0);
    (a, a + v.exp())
}

fn run(
    property: Property,
    kind: LinkKind,
    trials: usize,
    seed: u64,
    trial: impl Fn(&mut rng::Rng) -> Result<Outcome> + Sync,
) -> Result<PropertyReport> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let outcomes = (0..trials)
        .into_par_iter()
        .map(|i| trial(&mut trial_rng(seed, property, kind, i)))
        .collect::<Result<Vec<_>>>()?;
    let mut report = PropertyReport {
        property,
        kind,
        trials,
        violations: 0,
        not_applicable: 0,
        worst_margin: None,
        tolerance: property.tolerance(),
        seed,
    };
    for o in outcomes {
        match o {
            Outcome::NotApplicable => report.not_applicable += 1,
            Outcome::Margin(m) => {
                if !property.holds(m) {
                    report.violations += 1;
                }
                report.worst_margin = Some(report.worst_margin.map_or(m, |w: f64| w.min(m)));
            }
        }
    }
    Ok(report)
}

/// On a grid over `[a - 5, b + 5]`: the analytic second derivative and the
/// three-point second difference with step `1e-2` must both be at least
/// `-1e-8`.
pub fn check_loss_convexity(kind: LinkKind, trials: usize, seed: u64) -> Result<PropertyReport> {
    run(Property::Convexity, kind, trials, seed, |rng| {
        let (a, b) = sample_interval(rng);
        let (lo, hi) = (a - 5.0, b + 5.0);
        let mut worst = f64::INFINITY;
        for k in 0..GRID_POINTS {
            let z = lo + (hi - lo) * k as f64 / (GRID_POINTS - 1) as f64;
            let mid = nll_point(kind, z, a, b);
            let left = nll_point(kind, z - FD_STEP, a, b);
            let right = nll_point(kind, z + FD_STEP, a, b);
            if mid.saturated || left.saturated || right.saturated {
                continue;
            }
            worst = worst.min(mid.hess);
            worst = worst.min(left.value + right.value - 2.0 * mid.value);
        }
        Ok(Outcome::Margin(worst))
    })
}

/// For nested endpoints `a <= a'`, `b <= b'`: `x̂(a, b) <= x̂(a', b') + 1e-10`,
/// where `x̂` minimizes `L(x, a, b) + (lambda/2) x²`.
pub fn check_minimizer_monotonicity(kind: LinkKind, lambda: f64, trials: usize, seed: u64) -> Result<PropertyReport> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    run(Property::MinimizerMonotonicity, kind, trials, seed, |rng| {
        let (a, b) = sample_interval(rng);
        // one in eight trials keeps an endpoint fixed
        let shift = |rng: &mut rng::Rng| -> f64 {
            if rng.random_range(0..8) == 0 {
                0.0
            } else {
                rng.random_range(0.0..3.0)
            }
        };
        let a2 = a + shift(rng);
        let mut b2 = b + shift(rng);
        if b2 <= a2 {
            b2 = a2 + (b - a);
        }
        let x = inner_minimizer(kind, a, b, lambda)?;
        let x2 = inner_minimizer(kind, a2, b2, lambda)?;
        Ok(Outcome::Margin(x2 - x))
    })
}

/// A random problem with 2 to 6 classes on a finite ladder, random class
/// weights, `λ_h = 1` and `λ_w` between `1e-4 C` and `0.3 C`.
pub fn sample_problem(kind: LinkKind, rng: &mut rng::Rng) -> Result<EosProblem> {
    let q = rng.random_range(2..=6);
    let mut b = vec![rng.random_range(-6.0..0.0)];
    for _ in 0..q {
        let gap: f64 = rng.random_range(-1.0f64..1.5).exp();
        b.push(b.last().expect("nonempty") + gap);
    }
    let weights: Vec<f64> = (0..q).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let alpha: Vec<f64> = weights.iter().map(|w| w / total).collect();
    // renormalize the last entry so the sum is exactly representable as 1
    let mut alpha = alpha;
    let head: f64 = alpha[..q - 1].iter().sum();
    alpha[q - 1] = 1.0 - head;
    let probe = EosProblem::new(kind, Thresholds::new(b.clone())?, alpha.clone(), 1.0, 1.0)?;
    let c = eos::phase_constant(&probe)?;
    let scale = 10f64.powf(rng.random_range(-4.0..-0.5));
    EosProblem::new(kind, Thresholds::new(b)?, alpha, (c * scale).max(1e-12), 1.0)
}

/// Solved latents must increase with margin above `1e-10`; problems that
/// land in the trivial phase are counted as not applicable.
pub fn check_strict_ordering(kind: LinkKind, trials: usize, seed: u64) -> Result<PropertyReport> {
    run(Property::StrictOrdering, kind, trials, seed, |rng| {
        let problem = sample_problem(kind, rng)?;
        Ok(ordering_margin(&problem)?.map_or(Outcome::NotApplicable, Outcome::Margin))
    })
}

/// Smallest consecutive gap of the solved latents, or `None` in the trivial
/// phase.
pub fn ordering_margin(problem: &EosProblem) -> Result<Option<f64>> {
    let sol = eos::solve(problem)?;
    if sol.phase == Phase::Trivial {
        return Ok(None);
    }
    Ok(Some(
        sol.z_star.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min),
    ))
}

/// Every property for every link.
pub fn check_all(trials: usize, seed: u64, lambda: f64) -> Result<Vec<PropertyReport>> {
    let mut out = Vec::new();
    for property in Property::ALL {
        for kind in LinkKind::ALL {
            out.push(match property {
                Property::Convexity => check_loss_convexity(kind, trials, seed)?,
                Property::MinimizerMonotonicity => check_minimizer_monotonicity(kind, lambda, trials, seed)?,
                Property::StrictOrdering => check_strict_ordering(kind, trials, seed)?,
            });
        }
    }
    Ok(out)
}
