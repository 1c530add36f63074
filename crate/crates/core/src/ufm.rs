//! Unconstrained feature model: features are free variables, optimized
//! jointly with the classifier by full-batch gradient descent.
//!
//! ```text
//! J(w, H) = (1/N) Σ_i L(wᵀh_i, b_{y_i-1}, b_{y_i}) + λ_w/2 ‖w‖² + λ_h/(2N) Σ_i ‖h_i‖²
//! ```

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clm::{nll_point, Thresholds};
use crate::eos::{EosProblem, EosSolution, Phase};
use crate::error::{Error, Result};
use crate::link::LinkKind;
use crate::metrics::{self, FeatureBatch};

const ARMIJO_C: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const GROW: f64 = 2.0;
const MAX_STEP: f64 = 1e6;
const DIVERGENCE_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UfmConfig {
    pub p: usize,
    pub counts: Vec<usize>,
    #[serde(rename = "link")]
    pub kind: LinkKind,
    pub thresholds: Thresholds,
    pub lambda_w: f64,
    pub lambda_h: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Initial step for the line search, or the fixed step without it.
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Heavy-ball coefficient; nonzero values use a fixed step.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_true")]
    pub line_search: bool,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    200_000
}
fn default_learning_rate() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_grad_tol() -> f64 {
    1e-8
}
fn default_log_every() -> usize {
    100
}

/// Logit link on the ladder `(-10, -8, 3, 10)` with `p = 8`, twenty
/// samples per class, `λ_w = 0.1` and `λ_h = 1`.
impl Default for UfmConfig {
    fn default() -> Self {
        let thresholds = Thresholds::new(vec![-10.0, -8.0, 3.0, 10.0]).expect("ordered");
        Self::new(8, vec![20; 3], LinkKind::Logit, thresholds, 0.1, 1.0)
    }
}

impl UfmConfig {
    /// Desk-scale defaults around the given problem.
    pub fn new(
        p: usize,
        counts: Vec<usize>,
        kind: LinkKind,
        thresholds: Thresholds,
        lambda_w: f64,
        lambda_h: f64,
    ) -> Self {
        Self {
            p,
            counts,
            kind,
            thresholds,
            lambda_w,
            lambda_h,
            steps: default_steps(),
            learning_rate: default_learning_rate(),
            momentum: 0.0,
            line_search: true,
            grad_tol: default_grad_tol(),
            log_every: default_log_every(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::invalid("feature dimension p must be at least 1"));
        }
        if self.counts.len() != self.thresholds.num_classes() {
            return Err(Error::LengthMismatch {
                what: "class counts vs threshold classes",
                left: self.counts.len(),
                right: self.thresholds.num_classes(),
            });
        }
        if self.counts.contains(&0) {
            return Err(Error::invalid("every class needs at least one sample"));
        }
        for (name, v) in [("lambda_w", self.lambda_w), ("lambda_h", self.lambda_h)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log_every must be at least 1"));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Labels in class-major order, matching the rows of `UfmState::h`.
    pub fn labels(&self) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(q, &n)| std::iter::repeat_n(q + 1, n))
            .collect()
    }

    /// The reduced problem with the same link, thresholds, proportions and
    /// regularization.
    pub fn eos_problem(&self) -> Result<EosProblem> {
        EosProblem::from_counts(
            self.kind,
            self.thresholds.clone(),
            &self.counts,
            self.lambda_w,
            self.lambda_h,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UfmState {
    pub w: Array1<f64>,
    /// One row per sample, grouped by class.
    pub h: Array2<f64>,
}

impl UfmState {
    pub fn zeros(config: &UfmConfig) -> Self {
        Self {
            w: Array1::zeros(config.p),
            h: Array2::zeros((config.num_samples(), config.p)),
        }
    }

    /// Entries uniform in `[-0.1, 0.1]`.
    pub fn random(config: &UfmConfig) -> Self {
        let mut rng = crate::rng::seeded(config.seed);
        let mut draw = || rng.random_range(-0.1..=0.1);
        let w = Array1::from_shape_simple_fn(config.p, &mut draw);
        let h = Array2::from_shape_simple_fn((config.num_samples(), config.p), &mut draw);
        Self { w, h }
    }

    fn check(&self, config: &UfmConfig) -> Result<()> {
        if self.w.len() != config.p || self.h.ncols() != config.p {
            return Err(Error::LengthMismatch {
                what: "state dimension vs p",
                left: self.h.ncols().max(self.w.len()),
                right: config.p,
            });
        }
        if self.h.nrows() != config.num_samples() {
            return Err(Error::LengthMismatch {
                what: "feature rows vs samples",
                left: self.h.nrows(),
                right: config.num_samples(),
            });
        }
        Ok(())
    }

    pub fn latents(&self) -> Array1<f64> {
        self.h.dot(&self.w)
    }

    fn axpy(&self, t: f64, dir: &Gradient) -> Self {
        Self {
            w: &self.w - &(t * &dir.w),
            h: &self.h - &(t * &dir.h),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w: Array1<f64>,
    pub h: Array2<f64>,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        (self.w.dot(&self.w) + self.h.iter().map(|x| x * x).sum::<f64>()).sqrt()
    }
}

/// `J(w, H)`; `+inf` when some interval probability underflows.
pub fn objective(state: &UfmState, config: &UfmConfig) -> Result<f64> {
    state.check(config)?;
    Ok(objective_unchecked(state, config, &config.labels()))
}

fn objective_unchecked(state: &UfmState, config: &UfmConfig, labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let z = state.latents();
    let mut loss = 0.0;
    for (&zi, &y) in z.iter().zip(labels) {
        let (a, b) = config.thresholds.interval(y);
        loss += nll_point(config.kind, zi, a, b).value;
    }
    let hh: f64 = state.h.iter().map(|x| x * x).sum();
    loss / n + 0.5 * config.lambda_w * state.w.dot(&state.w) + 0.5 * config.lambda_h * hh / n
}

pub fn gradients(state: &UfmState, config: &UfmConfig) -> Result<Gradient> {
    state.check(config)?;
    gradients_unchecked(state, config, &config.labels())
}

fn gradients_unchecked(state: &UfmState, config: &UfmConfig, labels: &[usize]) -> Result<Gradient> {
    let n = labels.len() as f64;
    let z = state.latents();
    let mut dz = Array1::<f64>::zeros(z.len());
    for (i, (&zi, &y)) in z.iter().zip(labels).enumerate() {
        let (a, b) = config.thresholds.interval(y);
        let pt = nll_point(config.kind, zi, a, b);
        if pt.saturated {
            return Err(Error::Degenerate { class: y });
        }
        dz[i] = pt.grad / n;
    }
    let gw = state.h.t().dot(&dz) + config.lambda_w * &state.w;
    let outer = dz.view().insert_axis(Axis(1)).dot(&state.w.view().insert_axis(Axis(0)));
    let gh = outer + (config.lambda_h / n) * &state.h;
    Ok(Gradient { w: gw, h: gh })
}

/// One logged point of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub onc1: f64,
    pub onc2_1: f64,
    pub onc2_2: f64,
    pub onc3: f64,
    /// Class-mean latents `wᵀh̄_q`.
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UfmRun {
    pub state: UfmState,
    pub trajectory: Vec<TrajectoryPoint>,
    pub steps: usize,
    pub converged: bool,
    pub objective: f64,
    pub grad_norm: f64,
}

/// Train from the seeded random initialization.
pub fn train(config: &UfmConfig) -> Result<UfmRun> {
    config.validate()?;
    train_from(config, UfmState::random(config))
}

/// Train from a given initial state.
///
/// Without momentum each step uses Armijo backtracking (or the fixed
/// `learning_rate` when `line_search` is off); the trial step doubles after
/// every accepted step. With momentum the step is fixed and the run fails if
/// the objective rises for 100 consecutive steps.
pub fn train_from(config: &UfmConfig, init: UfmState) -> Result<UfmRun> {
    config.validate()?;
    init.check(config)?;
    let labels = config.labels();
    let mut state = init;
    let mut f = objective_unchecked(&state, config, &labels);
    if !f.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            message: "objective is not finite at the initial state".into(),
        });
    }
    let mut g = gradients_unchecked(&state, config, &labels)?;
    let mut gnorm = g.norm();
    let mut trajectory = vec![log_point(config, &state, 0, f, gnorm, &labels)];
    let mut t = config.learning_rate;
    let mut velocity: Option<Gradient> = None;
    let mut rising = 0usize;
    let mut step = 0;

    while step < config.steps && gnorm > config.grad_tol {
        step += 1;
        let (next, f_next) = if config.momentum > 0.0 {
            let v = match velocity.take() {
                Some(v) => Gradient {
                    w: config.momentum * &v.w + &g.w,
                    h: config.momentum * &v.h + &g.h,
                },
                None => g.clone(),
            };
            let next = state.axpy(config.learning_rate, &v);
            velocity = Some(v);
            let f_next = objective_unchecked(&next, config, &labels);
            (next, f_next)
        } else if config.line_search {
            backtrack(config, &labels, &state, f, &g, gnorm, &mut t, step)?
        } else {
            let next = state.axpy(config.learning_rate, &g);
            let f_next = objective_unchecked(&next, config, &labels);
            (next, f_next)
        };

        if !f_next.is_finite() {
            return Err(Error::Diverged {
                step,
                message: "objective became non-finite; use a smaller learning_rate".into(),
            });
        }
        rising = if f_next > f { rising + 1 } else { 0 };
        if rising >= DIVERGENCE_WINDOW {
            return Err(Error::Diverged {
                step,
                message: format!(
                    "objective rose for {DIVERGENCE_WINDOW} consecutive steps; use a smaller learning_rate"
                ),
            });
        }
        state = next;
        f = f_next;
        g = gradients_unchecked(&state, config, &labels)?;
        gnorm = g.norm();
        if step % config.log_every == 0 {
            trajectory.push(log_point(config, &state, step, f, gnorm, &labels));
        }
    }
    if trajectory.last().map(|p| p.step) != Some(step) {
        trajectory.push(log_point(config, &state, step, f, gnorm, &labels));
    }
    Ok(UfmRun {
        state,
        trajectory,
        steps: step,
        converged: gnorm <= config.grad_tol,
        objective: f,
        grad_norm: gnorm,
    })
}

/// Armijo backtracking along `-g`. When the required decrease is below the
/// rounding level of `f`, the decrease is instead estimated by the trapezoid
/// rule on the directional derivative, `t/2 (g·g + g'·g)`, which involves no
/// cancellation.
#[allow(clippy::too_many_arguments)]
fn backtrack(
    config: &UfmConfig,
    labels: &[usize],
    state: &UfmState,
    f: f64,
    g: &Gradient,
    gnorm: f64,
    t: &mut f64,
    step: usize,
) -> Result<(UfmState, f64)> {
    let noise = 1e-12 * f.abs().max(1.0);
    let g2 = gnorm * gnorm;
    let mut trial = *t;
    for _ in 0..200 {
        let next = state.axpy(trial, g);
        let f_next = objective_unchecked(&next, config, labels);
        let required = ARMIJO_C * trial * g2;
        let accept = if required > noise || !f_next.is_finite() {
            f_next <= f - required
        } else {
            let gn = gradients_unchecked(&next, config, labels)?;
            let slope = gn.w.dot(&g.w) + (&gn.h * &g.h).sum();
            0.5 * trial * (g2 + slope) >= required
        };
        if accept {
            *t = (trial * GROW).min(MAX_STEP);
            return Ok((next, f_next));
        }
        trial *= SHRINK;
    }
    Err(Error::NoConvergence {
        what: "backtracking line search",
        iterations: step,
        residual: gnorm,
    })
}

fn log_point(
    config: &UfmConfig,
    state: &UfmState,
    step: usize,
    f: f64,
    gnorm: f64,
    labels: &[usize],
) -> TrajectoryPoint {
    let batch =
        FeatureBatch::new(state.h.clone(), labels.to_vec(), config.counts.len()).expect("state rows match labels");
    let z: Vec<f64> = batch
        .class_mean_latents(state.w.view())
        .expect("dimensions checked")
        .into_iter()
        .map(|z| z.unwrap_or(f64::NAN))
        .collect();
    let devs = batch.mean_deviations();
    let u = metrics::principal_direction(&devs).ok();
    TrajectoryPoint {
        step,
        objective: f,
        grad_norm: gnorm,
        onc1: metrics::onc1(&batch),
        onc2_1: u.as_ref().map_or(f64::NAN, |u| metrics::off_axis_fraction(&devs, u)),
        onc2_2: u
            .as_ref()
            .and_then(|u| metrics::onc2_2(state.w.view(), u.view()).ok())
            .unwrap_or(f64::NAN),
        onc3: metrics::onc3(&z, &config.thresholds).unwrap_or(f64::NAN),
        z,
    }
}

/// Features of a state as a batch, for the collapse indicators.
pub fn feature_batch(config: &UfmConfig, state: &UfmState) -> Result<FeatureBatch> {
    state.check(config)?;
    FeatureBatch::new(state.h.clone(), config.labels(), config.counts.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EosComparison {
    /// `max_q |wᵀh̄_q - z_q*|`.
    pub max_deviation: f64,
    pub ufm_trivial: bool,
    pub eos_phase: Phase,
    pub phase_match: bool,
}

/// Compare class-mean latents of a trained state with an EOS solution.
/// The UFM side counts as trivial when `‖w‖` and every `‖h_i‖` are at most
/// `trivial_tol`.
pub fn compare_to_eos(
    config: &UfmConfig,
    state: &UfmState,
    eos: &EosSolution,
    trivial_tol: f64,
) -> Result<EosComparison> {
    let batch = feature_batch(config, state)?;
    if eos.z_star.len() != config.counts.len() {
        return Err(Error::LengthMismatch {
            what: "EOS latents vs classes",
            left: eos.z_star.len(),
            right: config.counts.len(),
        });
    }
    let z = batch.class_mean_latents(state.w.view())?;
    let max_deviation = z
        .iter()
        .zip(&eos.z_star)
        .map(|(zq, zs)| (zq.expect("every class has samples") - zs).abs())
        .fold(0.0, f64::max);
    let ufm_trivial = state.w.dot(&state.w).sqrt() <= trivial_tol && max_row_norm(&state.h) <= trivial_tol;
    Ok(EosComparison {
        max_deviation,
        ufm_trivial,
        eos_phase: eos.phase,
        phase_match: ufm_trivial == (eos.phase == Phase::Trivial),
    })
}

pub fn max_row_norm(h: &Array2<f64>) -> f64 {
    h.outer_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max)
}
