//! Equations of state of the reduced feature-model objective.
//!
//! After collapsing features onto the classifier direction the objective
//! depends on the classifier norm `w` and one latent per class:
//!
//! ```text
//! F(w) = λ_w w²/2 + Σ_q α_q min_z [ L(z, b_{q-1}, b_q) + λ_h z² / (2 w²) ]
//! ```
//!
//! [`solve`] minimizes `F` over `w >= 0` and compares the best nontrivial
//! stationary point against the trivial solution `w = 0, z = 0`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clm::{nll_point, nll_term, Thresholds};
use crate::error::{Error, Result};
use crate::link::LinkKind;

const INNER_TOL: f64 = 1e-12;
const INNER_MAX_ITER: usize = 500;
const SCAN_POINTS: usize = 60;
const SCAN_LOG10_MIN: f64 = -6.0;
const SCAN_LOG10_MAX: f64 = 6.0;
const REFINE_BISECTIONS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EosProblem {
    pub kind: LinkKind,
    pub thresholds: Thresholds,
    /// Class proportions `α_q = n_q / N`.
    pub alpha: Vec<f64>,
    pub lambda_w: f64,
    pub lambda_h: f64,
}

impl EosProblem {
    pub fn new(kind: LinkKind, thresholds: Thresholds, alpha: Vec<f64>, lambda_w: f64, lambda_h: f64) -> Result<Self> {
        let p = Self {
            kind,
            thresholds,
            alpha,
            lambda_w,
            lambda_h,
        };
        p.validate()?;
        Ok(p)
    }

    /// Equal class proportions.
    pub fn uniform(kind: LinkKind, thresholds: Thresholds, lambda_w: f64, lambda_h: f64) -> Result<Self> {
        let q = thresholds.num_classes();
        Self::new(kind, thresholds, vec![1.0 / q as f64; q], lambda_w, lambda_h)
    }

    /// Proportions from per-class counts.
    pub fn from_counts(
        kind: LinkKind,
        thresholds: Thresholds,
        counts: &[usize],
        lambda_w: f64,
        lambda_h: f64,
    ) -> Result<Self> {
        let n: usize = counts.iter().sum();
        if n == 0 {
            return Err(Error::Empty("class counts"));
        }
        let alpha = counts.iter().map(|&c| c as f64 / n as f64).collect();
        Self::new(kind, thresholds, alpha, lambda_w, lambda_h)
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.thresholds.num_classes();
        if self.alpha.len() != q {
            return Err(Error::LengthMismatch {
                what: "alpha vs classes",
                left: self.alpha.len(),
                right: q,
            });
        }
        if self.alpha.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::invalid("class proportions must be positive"));
        }
        let total: f64 = self.alpha.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("class proportions sum to {total}, not 1")));
        }
        if !(self.lambda_w > 0.0 && self.lambda_w.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda_w must be positive, got {}",
                self.lambda_w
            )));
        }
        if !(self.lambda_h > 0.0 && self.lambda_h.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda_h must be positive, got {}",
                self.lambda_h
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.thresholds.num_classes()
    }

    pub fn with_lambda_w(&self, lambda_w: f64) -> Self {
        Self {
            lambda_w,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Trivial,
    Nontrivial,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Trivial => "trivial",
            Phase::Nontrivial => "nontrivial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EosSolution {
    pub w_star: f64,
    pub z_star: Vec<f64>,
    pub phase: Phase,
    pub objective: f64,
    /// `max_q |L_z(z_q) + λ_h z_q / w²|`; zero for the trivial phase.
    pub residual_z: f64,
    /// `|λ_w w - λ_h Σ α_q z_q² / w³|`; zero for the trivial phase.
    pub residual_w: f64,
    /// More than one descent basin was found in the scan over `w`.
    pub multimodal: bool,
}

impl EosSolution {
    fn trivial(problem: &EosProblem, objective: f64, multimodal: bool) -> Self {
        Self {
            w_star: 0.0,
            z_star: vec![0.0; problem.num_classes()],
            phase: Phase::Trivial,
            objective,
            residual_z: 0.0,
            residual_w: 0.0,
            multimodal,
        }
    }
}

/// `C = Σ_q α_q (L_z(0, b_{q-1}, b_q))²`; the trivial solution is optimal
/// iff `λ_h λ_w >= C`.
pub fn phase_constant(problem: &EosProblem) -> Result<f64> {
    let mut c = 0.0;
    for (q, &alpha) in problem.alpha.iter().enumerate() {
        let (a, b) = problem.thresholds.interval(q + 1);
        let p = nll_point(problem.kind, 0.0, a, b);
        if p.saturated {
            return Err(Error::Degenerate { class: q + 1 });
        }
        c += alpha * p.grad * p.grad;
    }
    Ok(c)
}

/// Minimizer of `L(x, a, b) + (mu/2) x²` for `mu > 0`.
///
/// The stationarity residual `r(x) = L_x + mu x` is increasing, and
/// convexity of `L` pins the root between `0` and `-L_x(0)/mu`; Newton steps
/// are taken inside that bracket and replaced by bisection when they leave it
/// or stop contracting.
pub fn inner_minimizer(kind: LinkKind, a: f64, b: f64, mu: f64) -> Result<f64> {
    if a >= b {
        return Err(Error::IntervalOrder { a, b });
    }
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::invalid(format!("curvature mu must be positive, got {mu}")));
    }
    let start = nll_point(kind, 0.0, a, b);
    if start.saturated || !start.grad.is_finite() {
        return Err(Error::Degenerate { class: 0 });
    }
    let d0 = start.grad;
    if d0 == 0.0 {
        return Ok(0.0);
    }
    let edge = -d0 / mu;
    let (mut lo, mut hi) = if edge < 0.0 { (edge, 0.0) } else { (0.0, edge) };
    let mut x = (-d0 / (start.hess + mu)).clamp(lo, hi);
    let mut best = (f64::INFINITY, x);
    let mut last_move = hi - lo;
    for _ in 0..INNER_MAX_ITER {
        let p = nll_point(kind, x, a, b);
        if p.saturated {
            // only reachable at huge |x|; pull back toward the origin
            if x < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            x = 0.5 * (lo + hi);
            continue;
        }
        let r = p.grad + mu * x;
        if r.abs() < best.0 {
            best = (r.abs(), x);
        }
        if r.abs() <= INNER_TOL {
            return Ok(x);
        }
        if r < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= 4.0 * f64::EPSILON * x.abs().max(1e-300) {
            return Ok(best.1);
        }
        let step = r / (p.hess + mu);
        let next = x - step;
        // Newton crawls linearly on exponential tails; bisect unless the
        // step at least halves the previous move
        let newton_ok = next > lo && next < hi && next.is_finite() && next != x && 2.0 * step.abs() <= last_move;
        let target = if newton_ok { next } else { 0.5 * (lo + hi) };
        last_move = (target - x).abs();
        x = target;
    }
    // bracket exhausted without reaching the tolerance; accept if the
    // remaining residual is at rounding level for this scale
    let (res, xb) = best;
    if res <= 1e-9 {
        Ok(xb)
    } else {
        Err(Error::NoConvergence {
            what: "inner latent solve",
            iterations: INNER_MAX_ITER,
            residual: res,
        })
    }
}

/// `z_q*(w)`, the optimal latent of class `q` (1-based) at classifier norm `w`.
pub fn solve_inner_z(problem: &EosProblem, w: f64, class: usize) -> Result<f64> {
    if !(w > 0.0) {
        return Err(Error::invalid(format!("w must be positive, got {w}")));
    }
    let (a, b) = problem.thresholds.interval(class);
    inner_minimizer(problem.kind, a, b, problem.lambda_h / (w * w))
}

fn inner_all(problem: &EosProblem, w: f64) -> Result<Vec<f64>> {
    (1..=problem.num_classes())
        .map(|q| solve_inner_z(problem, w, q))
        .collect()
}

/// `F(w)` with every latent at its inner optimum; `F(0) = Σ α_q L(0, ·)`.
pub fn reduced_objective(problem: &EosProblem, w: f64) -> Result<f64> {
    Ok(evaluate(problem, w)?.objective)
}

struct Eval {
    objective: f64,
}

fn evaluate(problem: &EosProblem, w: f64) -> Result<Eval> {
    if w == 0.0 {
        let mut f = 0.0;
        for (i, &alpha) in problem.alpha.iter().enumerate() {
            let (a, b) = problem.thresholds.interval(i + 1);
            f += alpha * nll_term(problem.kind, 0.0, a, b)?;
        }
        return Ok(Eval { objective: f });
    }
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::invalid(format!("w must be nonnegative and finite, got {w}")));
    }
    let z = inner_all(problem, w)?;
    let mu = problem.lambda_h / (w * w);
    let mut f = 0.5 * problem.lambda_w * w * w;
    for (i, (&alpha, &zq)) in problem.alpha.iter().zip(&z).enumerate() {
        let (a, b) = problem.thresholds.interval(i + 1);
        f += alpha * (nll_term(problem.kind, zq, a, b)? + 0.5 * mu * zq * zq);
    }
    Ok(Eval { objective: f })
}

/// `dF/dw = λ_w w - λ_h Σ α_q z_q² / w³` (envelope theorem), i.e. the
/// left-hand side of the `w` equation of state.
fn outer_gradient(problem: &EosProblem, w: f64, z: &[f64]) -> f64 {
    let s: f64 = problem.alpha.iter().zip(z).map(|(a, z)| a * z * z).sum();
    problem.lambda_w * w - problem.lambda_h * s / (w * w * w)
}

/// Residuals of both equations of state at `(w, z)`.
pub fn eos_residuals(problem: &EosProblem, w: f64, z: &[f64]) -> Result<(f64, f64)> {
    if !(w > 0.0) {
        return Err(Error::invalid("residuals need w > 0"));
    }
    let mu = problem.lambda_h / (w * w);
    let mut rz = 0.0f64;
    for (i, &zq) in z.iter().enumerate() {
        let (a, b) = problem.thresholds.interval(i + 1);
        let p = nll_point(problem.kind, zq, a, b);
        if p.saturated {
            return Err(Error::Degenerate { class: i + 1 });
        }
        rz = rz.max((p.grad + mu * zq).abs());
    }
    Ok((rz, outer_gradient(problem, w, z).abs()))
}

fn golden_section(f: &mut impl FnMut(f64) -> Result<f64>, mut a: f64, mut b: f64, tol: f64) -> Result<(f64, f64, f64)> {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    for _ in 0..200 {
        if (b - a).abs() <= tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d)?;
        }
    }
    let x = if fc <= fd { c } else { d };
    Ok((a, b, x))
}

/// Interval in `w` across which `dF/dw` goes from negative to positive,
/// grown outward from `[a, b]` (in `log w`) with doubling steps up to
/// `[lo, hi]`. Near the phase boundary `F` is too flat for golden section to
/// localize the minimum, while the gradient sign stays reliable.
fn gradient_bracket(problem: &EosProblem, a: f64, b: f64, lo: f64, hi: f64) -> Result<Option<(f64, f64)>> {
    let grad_at = |t: f64| -> Result<f64> {
        let w = t.exp();
        let z = inner_all(problem, w)?;
        Ok(outer_gradient(problem, w, &z))
    };
    let (mut a, mut b) = (a, b);
    let mut step = 1e-6f64.max(b - a);
    let mut ga = grad_at(a)?;
    let mut gb = grad_at(b)?;
    for _ in 0..64 {
        if ga <= 0.0 && gb >= 0.0 {
            return Ok(Some((a.exp(), b.exp())));
        }
        if ga > 0.0 {
            if a <= lo {
                return Ok(None);
            }
            a = (a - step).max(lo);
            ga = grad_at(a)?;
        }
        if gb < 0.0 {
            if b >= hi {
                return Ok(None);
            }
            b = (b + step).min(hi);
            gb = grad_at(b)?;
        }
        step *= 2.0;
    }
    Ok(None)
}

/// Sign-change root of `dF/dw` on `[lo, hi]` by bisection blended with secant
/// steps.
fn polish_root(problem: &EosProblem, mut lo: f64, mut hi: f64) -> Result<Option<f64>> {
    let grad_at = |w: f64| -> Result<f64> {
        let z = inner_all(problem, w)?;
        Ok(outer_gradient(problem, w, &z))
    };
    let mut glo = grad_at(lo)?;
    let mut ghi = grad_at(hi)?;
    if glo > 0.0 || ghi < 0.0 {
        return Ok(None);
    }
    for i in 0..200 {
        if hi - lo <= 2.0 * f64::EPSILON * hi {
            break;
        }
        // secant on even steps, bisection on odd steps keeps the bracket
        // shrinking geometrically
        let mut w = if i % 2 == 0 && ghi != glo {
            lo - glo * (hi - lo) / (ghi - glo)
        } else {
            0.5 * (lo + hi)
        };
        if !(w > lo && w < hi) {
            w = 0.5 * (lo + hi);
        }
        let g = grad_at(w)?;
        if g == 0.0 {
            return Ok(Some(w));
        }
        if g < 0.0 {
            lo = w;
            glo = g;
        } else {
            hi = w;
            ghi = g;
        }
    }
    Ok(Some(if -glo < ghi { lo } else { hi }))
}

/// `w ← ((λ_h/λ_w) Σ α_q z_q(w)²)^{1/4}`, kept only while it lowers the
/// residual of the `w` equation.
fn fixed_point_polish(problem: &EosProblem, mut w: f64) -> Result<f64> {
    let mut z = inner_all(problem, w)?;
    let mut res = outer_gradient(problem, w, &z).abs();
    let mut damping = 1.0;
    let mut last_step = 0.0f64;
    for _ in 0..20 {
        if res == 0.0 {
            break;
        }
        let s: f64 = problem.alpha.iter().zip(&z).map(|(a, z)| a * z * z).sum();
        let target = (problem.lambda_h / problem.lambda_w * s).powf(0.25);
        let step = target - w;
        if step * last_step < 0.0 {
            damping = 0.5;
        }
        let cand = w + damping * step;
        if !(cand > 0.0) {
            break;
        }
        let zc = inner_all(problem, cand)?;
        let rc = outer_gradient(problem, cand, &zc).abs();
        if rc >= res {
            break;
        }
        last_step = step;
        w = cand;
        z = zc;
        res = rc;
    }
    Ok(w)
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Solve the equations of state.
///
/// Scans `w` on a log grid over `[1e-6, 1e6]`, refines every descent basin by
/// golden section in `log w`, polishes with a bracketed root of `dF/dw` and
/// the fixed-point map, and returns the nontrivial point only if it beats the
/// trivial objective.
pub fn solve(problem: &EosProblem) -> Result<EosSolution> {
    problem.validate()?;
    let f0 = reduced_objective(problem, 0.0)?;
    let ws = log_grid(SCAN_LOG10_MIN, SCAN_LOG10_MAX, SCAN_POINTS);
    let fs = ws
        .iter()
        .map(|&w| reduced_objective(problem, w))
        .collect::<Result<Vec<_>>>()?;

    // local minima of the scan, with the trivial point as the left neighbour
    let mut basins = Vec::new();
    for i in 0..ws.len() {
        let left = if i == 0 { f0 } else { fs[i - 1] };
        let right = if i + 1 < ws.len() { fs[i + 1] } else { f64::INFINITY };
        if fs[i] < left && fs[i] <= right {
            basins.push(i);
        }
    }
    let multimodal = basins.len() > 1;

    let mut best: Option<(f64, f64)> = None;
    for &i in &basins {
        let lo = if i == 0 { ws[0].ln() - 10.0 } else { ws[i - 1].ln() };
        let hi = if i + 1 < ws.len() {
            ws[i + 1].ln()
        } else {
            ws[i].ln() + 10.0
        };
        let mut f_log = |t: f64| reduced_objective(problem, t.exp());
        let (a, b, t) = golden_section(&mut f_log, lo, hi, 1e-7)?;
        let mut w = t.exp();
        if let Some((wl, wh)) = gradient_bracket(problem, a.min(t), b.max(t), lo, hi)? {
            if let Some(root) = polish_root(problem, wl, wh)? {
                w = root;
            }
        }
        w = fixed_point_polish(problem, w)?;
        let f = reduced_objective(problem, w)?;
        if best.is_none_or(|(_, fb)| f < fb) {
            best = Some((w, f));
        }
    }

    match best {
        Some((w, f)) if f < f0 => {
            let z = inner_all(problem, w)?;
            let (residual_z, residual_w) = eos_residuals(problem, w, &z)?;
            Ok(EosSolution {
                w_star: w,
                z_star: z,
                phase: Phase::Nontrivial,
                objective: f,
                residual_z,
                residual_w,
                multimodal,
            })
        }
        _ => Ok(EosSolution::trivial(problem, f0, multimodal)),
    }
}

/// Latents in the vanishing-regularization limit: roots of
/// `g'(b_q - z) = g'(b_{q-1} - z)`. Requires finite thresholds.
pub fn zero_reg_limit_z(kind: LinkKind, thresholds: &Thresholds) -> Result<Vec<f64>> {
    if !thresholds.all_finite() {
        return Err(Error::InvalidThresholds(
            "the zero-regularization limit needs finite thresholds".into(),
        ));
    }
    (1..=thresholds.num_classes())
        .map(|q| {
            let (a, b) = thresholds.interval(q);
            if kind.is_symmetric() {
                Ok(0.5 * (a + b))
            } else {
                equal_density_point(kind, a, b)
            }
        })
        .collect()
}

/// Root of `log g'(b - z) - log g'(a - z)`, increasing in `z` for log-concave
/// `g'`.
fn equal_density_point(kind: LinkKind, a: f64, b: f64) -> Result<f64> {
    let phi = |z: f64| kind.log_density(b - z) - kind.log_density(a - z);
    let width = b - a;
    let (mut lo, mut hi) = (a, b);
    let mut k = 0;
    while phi(lo) > 0.0 || phi(hi) < 0.0 {
        k += 1;
        if k > 60 {
            return Err(Error::NoBracket("equal-density point"));
        }
        let grow = width * 2f64.powi(k);
        if phi(lo) > 0.0 {
            lo = a - grow;
        }
        if phi(hi) < 0.0 {
            hi = b + grow;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if phi(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let z = 0.5 * (lo + hi);
    let residual = (kind.density(b - z) - kind.density(a - z)).abs();
    if residual > 1e-12 {
        return Err(Error::NoConvergence {
            what: "equal-density bisection",
            iterations: 200,
            residual,
        });
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_w: f64,
    pub solution: EosSolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    /// Midpoint of the last nontrivial / first trivial cell after refinement.
    pub critical_lambda_w: Option<f64>,
    /// Least-squares slope of `log w*` against `log λ_w` over the smallest
    /// decade of nontrivial rows.
    pub slope: Option<f64>,
    #[serde(rename = "C")]
    pub c: f64,
    /// Width of the final bracketing cell.
    pub critical_bracket: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub summary: SweepSummary,
}

/// Solve over an ascending `λ_w` grid with `λ_h` fixed.
///
/// With `refine`, the cell holding the phase change is bisected
/// [`REFINE_BISECTIONS`] times before the critical estimate is taken.
pub fn sweep_lambda_w(problem: &EosProblem, grid: &[f64], refine: bool) -> Result<Sweep> {
    if grid.is_empty() {
        return Err(Error::Empty("lambda_w grid"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("lambda_w grid must be strictly ascending"));
    }
    let c = phase_constant(problem)?;
    let rows = grid
        .par_iter()
        .map(|&lw| {
            let p = problem.with_lambda_w(lw);
            p.validate()?;
            Ok(SweepRow {
                lambda_w: lw,
                solution: solve(&p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut bracket = None;
    for pair in rows.windows(2) {
        if pair[0].solution.phase == Phase::Nontrivial && pair[1].solution.phase == Phase::Trivial {
            bracket = Some((pair[0].lambda_w, pair[1].lambda_w));
        }
    }
    if refine {
        if let Some((mut lo, mut hi)) = bracket {
            for _ in 0..REFINE_BISECTIONS {
                let mid = 0.5 * (lo + hi);
                if solve(&problem.with_lambda_w(mid))?.phase == Phase::Nontrivial {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            bracket = Some((lo, hi));
        }
    }
    let critical_lambda_w = bracket.map(|(lo, hi)| 0.5 * (lo + hi));

    let slope = rows
        .iter()
        .find(|r| r.solution.phase == Phase::Nontrivial)
        .and_then(|first| fit_scaling_slope(&rows, first.lambda_w, 10.0 * first.lambda_w));

    Ok(Sweep {
        rows,
        summary: SweepSummary {
            critical_lambda_w,
            slope,
            c,
            critical_bracket: bracket,
        },
    })
}

/// Least-squares slope of `ln w*` on `ln λ_w` over nontrivial rows with
/// `λ_w ∈ [lo, hi]`; `None` with fewer than two such rows.
pub fn fit_scaling_slope(rows: &[SweepRow], lo: f64, hi: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.lambda_w >= lo && r.lambda_w <= hi && r.solution.phase == Phase::Nontrivial)
        .map(|r| (r.lambda_w.ln(), r.solution.w_star.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Some(sxy / sxx)
}

/// Log-spaced grid with `n` points from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    log_grid(lo.log10(), hi.log10(), n.max(2))
}
