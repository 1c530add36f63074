//! Cumulative link model: thresholds, the per-sample negative log-likelihood
//! `L(z, a, b) = -log[g(b - z) - g(a - z)]`, its derivatives in `z`, and the
//! decision rule.
//!
//! Labels are 1-based throughout (`1..=Q`); class `q` owns the latent interval
//! `(b_{q-1}, b_q]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::{log1mexp, sigmoid, softplus, LinkKind};

/// Strictly increasing cut points `b_0 < b_1 < ... < b_Q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Thresholds {
    values: Vec<f64>,
}

impl Thresholds {
    /// Only `b_0` may be `-inf` and only `b_Q` may be `+inf`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidThresholds(format!(
                "need at least two cut points, got {}",
                values.len()
            )));
        }
        let last = values.len() - 1;
        for (i, &b) in values.iter().enumerate() {
            let ok = if b.is_nan() {
                false
            } else if b == f64::NEG_INFINITY {
                i == 0
            } else if b == f64::INFINITY {
                i == last
            } else {
                true
            };
            if !ok {
                return Err(Error::InvalidThresholds(format!("b_{i} = {b} not allowed")));
            }
        }
        if let Some(i) = values.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::InvalidThresholds(format!(
                "not strictly increasing at b_{i} = {} >= b_{} = {}",
                values[i],
                i + 1,
                values[i + 1]
            )));
        }
        Ok(Self { values })
    }

    /// Evenly spaced ladder on `[-half_range, half_range]` with finite edges.
    pub fn fixed(num_classes: usize, half_range: f64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidThresholds(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if !(half_range > 0.0 && half_range.is_finite()) {
            return Err(Error::InvalidThresholds(format!(
                "half_range must be positive and finite, got {half_range}"
            )));
        }
        let step = 2.0 * half_range / num_classes as f64;
        let values = (0..=num_classes).map(|q| -half_range + q as f64 * step).collect();
        Self::new(values)
    }

    /// `Q`.
    pub fn num_classes(&self) -> usize {
        self.values.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(b_{q-1}, b_q)` for a 1-based class index.
    pub fn interval(&self, class: usize) -> (f64, f64) {
        (self.values[class - 1], self.values[class])
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|b| b.is_finite())
    }

    pub fn predict(&self, z: f64) -> usize {
        predict_label(z, self)
    }
}

impl TryFrom<Vec<f64>> for Thresholds {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<Thresholds> for Vec<f64> {
    fn from(t: Thresholds) -> Self {
        t.values
    }
}

/// Unconstrained parameters `s ∈ R^{Q-1}` of learnable thresholds.
///
/// Interior cut points are cumulative softplus sums of `s`, shifted by the
/// mean of the cumulative sum taken at `Q-1`; the outer edges are `±inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParams {
    pub s: Vec<f64>,
}

impl ThresholdParams {
    pub fn new(s: Vec<f64>) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::invalid("threshold parameters need Q - 1 >= 1 entries"));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("threshold parameters must be finite"));
        }
        Ok(Self { s })
    }

    pub fn zeros(num_classes: usize) -> Result<Self> {
        Self::new(vec![0.0; num_classes.saturating_sub(1)])
    }

    pub fn num_classes(&self) -> usize {
        self.s.len() + 1
    }

    pub fn to_thresholds(&self) -> Thresholds {
        thresholds_from_params(self)
    }
}

pub fn build_fixed_thresholds(num_classes: usize, half_range: f64) -> Result<Thresholds> {
    Thresholds::fixed(num_classes, half_range)
}

pub fn thresholds_from_params(params: &ThresholdParams) -> Thresholds {
    let m = params.s.len();
    let mut values = Vec::with_capacity(m + 2);
    values.push(f64::NEG_INFINITY);
    let mut acc = 0.0;
    for &s in &params.s {
        acc += softplus(s);
        values.push(acc);
    }
    let shift = acc / m as f64;
    for v in &mut values[1..] {
        *v -= shift;
    }
    values.push(f64::INFINITY);
    Thresholds { values }
}

fn check_interval(z: f64, a: f64, b: f64) -> Result<()> {
    if z.is_nan() || a.is_nan() || b.is_nan() {
        return Err(Error::NanInput("nll_term"));
    }
    if !z.is_finite() {
        return Err(Error::invalid(format!("latent must be finite, got {z}")));
    }
    if a >= b {
        return Err(Error::IntervalOrder { a, b });
    }
    Ok(())
}

/// `log(g(u) - g(v))` for `u > v`, formed in log space.
///
/// Returns `-inf` when the difference underflows.
pub fn log_interval_prob(kind: LinkKind, u: f64, v: f64) -> f64 {
    if v == f64::NEG_INFINITY {
        return kind.log_cdf(u);
    }
    if u == f64::INFINITY {
        return kind.log_sf(v);
    }
    if u <= v {
        return f64::NEG_INFINITY;
    }
    if u + v <= 0.0 {
        let lu = kind.log_cdf(u);
        let lv = kind.log_cdf(v);
        if lu == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        lu + log1mexp((lv - lu).min(0.0))
    } else {
        let su = kind.log_sf(u);
        let sv = kind.log_sf(v);
        if sv == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        sv + log1mexp((su - sv).min(0.0))
    }
}

/// Value and first two `z`-derivatives of `L(z, a, b)` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllPoint {
    pub value: f64,
    pub grad: f64,
    pub hess: f64,
    /// `g'(b - z) / P`, used for threshold gradients.
    pub upper_ratio: f64,
    /// `g'(a - z) / P`.
    pub lower_ratio: f64,
    /// Interval probability underflowed; `value` is `+inf`.
    pub saturated: bool,
}

/// Evaluate `L`, `L_z` and `L_zz` together. Inputs are assumed validated.
pub(crate) fn nll_point(kind: LinkKind, z: f64, a: f64, b: f64) -> NllPoint {
    let u = b - z;
    let v = a - z;
    let log_p = log_interval_prob(kind, u, v);
    if log_p == f64::NEG_INFINITY {
        return NllPoint {
            value: f64::INFINITY,
            grad: f64::NAN,
            hess: f64::NAN,
            upper_ratio: f64::NAN,
            lower_ratio: f64::NAN,
            saturated: true,
        };
    }
    let ru = (kind.log_density(u) - log_p).exp();
    let rv = (kind.log_density(v) - log_p).exp();
    let grad = ru - rv;
    let mut slope = 0.0;
    if ru != 0.0 {
        slope += ru * kind.score(u);
    }
    if rv != 0.0 {
        slope -= rv * kind.score(v);
    }
    NllPoint {
        value: -log_p,
        grad,
        hess: grad * grad - slope,
        upper_ratio: ru,
        lower_ratio: rv,
        saturated: false,
    }
}

/// `L(z, a, b) = -log[g(b - z) - g(a - z)]`.
///
/// Returns `+inf` (not an error) when the interval probability underflows.
pub fn nll_term(kind: LinkKind, z: f64, a: f64, b: f64) -> Result<f64> {
    check_interval(z, a, b)?;
    Ok(-log_interval_prob(kind, b - z, a - z))
}

/// `L_z = (g'(b - z) - g'(a - z)) / (g(b - z) - g(a - z))`.
pub fn nll_grad_z(kind: LinkKind, z: f64, a: f64, b: f64) -> Result<f64> {
    check_interval(z, a, b)?;
    let p = nll_point(kind, z, a, b);
    if p.saturated {
        return Err(Error::Degenerate { class: 0 });
    }
    Ok(p.grad)
}

/// `L_zz`, nonnegative for log-concave `g'`.
pub fn nll_hess_z(kind: LinkKind, z: f64, a: f64, b: f64) -> Result<f64> {
    check_interval(z, a, b)?;
    let p = nll_point(kind, z, a, b);
    if p.saturated {
        return Err(Error::Degenerate { class: 0 });
    }
    Ok(p.hess)
}

fn check_batch(latents: &[f64], labels: &[usize], num_classes: usize) -> Result<()> {
    if latents.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "latents vs labels",
            left: latents.len(),
            right: labels.len(),
        });
    }
    if latents.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if let Some(&label) = labels.iter().find(|&&y| y == 0 || y > num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    Ok(())
}

/// Mean of `L(z_i, b_{y_i - 1}, b_{y_i})` over the batch.
pub fn batch_nll(kind: LinkKind, latents: &[f64], labels: &[usize], thr: &Thresholds) -> Result<f64> {
    check_batch(latents, labels, thr.num_classes())?;
    let mut sum = 0.0;
    for (&z, &y) in latents.iter().zip(labels) {
        let (a, b) = thr.interval(y);
        sum += nll_term(kind, z, a, b)?;
    }
    Ok(sum / latents.len() as f64)
}

/// Batch loss with gradients with respect to each latent and each cut point.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrad {
    pub mean: f64,
    /// `d mean / d z_i`, already divided by the batch size.
    pub latents: Vec<f64>,
    /// `d mean / d b_q` for `q = 0..=Q` (zero at infinite edges).
    pub thresholds: Vec<f64>,
    /// Number of samples whose interval probability underflowed.
    pub saturated: usize,
}

pub fn batch_nll_grad(kind: LinkKind, latents: &[f64], labels: &[usize], thr: &Thresholds) -> Result<BatchGrad> {
    check_batch(latents, labels, thr.num_classes())?;
    let n = latents.len() as f64;
    let mut out = BatchGrad {
        mean: 0.0,
        latents: vec![0.0; latents.len()],
        thresholds: vec![0.0; thr.values().len()],
        saturated: 0,
    };
    for (i, (&z, &y)) in latents.iter().zip(labels).enumerate() {
        let (a, b) = thr.interval(y);
        check_interval(z, a, b)?;
        let p = nll_point(kind, z, a, b);
        if p.saturated {
            out.saturated += 1;
            out.mean = f64::INFINITY;
            continue;
        }
        out.mean += p.value / n;
        out.latents[i] = p.grad / n;
        // dL/db = -g'(b - z)/P, dL/da = g'(a - z)/P
        out.thresholds[y] -= p.upper_ratio / n;
        out.thresholds[y - 1] += p.lower_ratio / n;
    }
    let last = out.thresholds.len() - 1;
    if !thr.values()[0].is_finite() {
        out.thresholds[0] = 0.0;
    }
    if !thr.values()[last].is_finite() {
        out.thresholds[last] = 0.0;
    }
    Ok(out)
}

/// Chain `d/db` through the softplus parameterization.
pub fn threshold_param_grad(params: &ThresholdParams, grad_thresholds: &[f64]) -> Vec<f64> {
    let m = params.s.len();
    // interior cut points b_1..b_{Q-1}
    let interior = &grad_thresholds[1..=m];
    let total: f64 = interior.iter().sum();
    // suffix[j] = sum_{q >= j} dL/db_q
    let mut suffix = vec![0.0; m + 1];
    for q in (0..m).rev() {
        suffix[q] = suffix[q + 1] + interior[q];
    }
    params
        .s
        .iter()
        .enumerate()
        .map(|(j, &s)| sigmoid(s) * (suffix[j] - total / m as f64))
        .collect()
}

/// Gradient of `batch_nll(thresholds_from_params(s))` with respect to `s`.
pub fn nll_grad_threshold_params(
    kind: LinkKind,
    latents: &[f64],
    labels: &[usize],
    params: &ThresholdParams,
) -> Result<Vec<f64>> {
    let thr = params.to_thresholds();
    let g = batch_nll_grad(kind, latents, labels, &thr)?;
    Ok(threshold_param_grad(params, &g.thresholds))
}

/// The class `q` with `b_{q-1} < z <= b_q`; latents beyond finite outer edges
/// fall into classes 1 and `Q`.
pub fn predict_label(z: f64, thr: &Thresholds) -> usize {
    let q = thr.num_classes();
    let interior = &thr.values()[1..q];
    1 + interior.partition_point(|&b| b < z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::LN_2;

    const INF: f64 = f64::INFINITY;

    #[test]
    fn fixed_ladders() {
        assert_eq!(
            build_fixed_thresholds(4, 2.0).unwrap().values(),
            &[-2.0, -1.0, 0.0, 1.0, 2.0]
        );
        assert_eq!(build_fixed_thresholds(2, 20.0).unwrap().values(), &[-20.0, 0.0, 20.0]);
        assert_eq!(
            build_fixed_thresholds(3, 3.0).unwrap().values(),
            &[-3.0, -1.0, 1.0, 3.0]
        );
        assert!(build_fixed_thresholds(1, 2.0).is_err());
        assert!(build_fixed_thresholds(3, 0.0).is_err());
        assert!(build_fixed_thresholds(3, -1.0).is_err());
    }

    #[test]
    fn threshold_validation() {
        assert!(Thresholds::new(vec![0.0, 0.0]).is_err());
        assert!(Thresholds::new(vec![1.0, 0.0]).is_err());
        assert!(Thresholds::new(vec![0.0, -INF]).is_err());
        assert!(Thresholds::new(vec![-INF, INF, 3.0]).is_err());
        assert!(Thresholds::new(vec![0.0]).is_err());
        assert!(Thresholds::new(vec![-INF, 0.0, INF]).is_ok());
        let t: Thresholds = serde_json::from_str("[-1.0, 0.5, 2.0]").unwrap();
        assert_eq!(t.num_classes(), 2);
        assert!(serde_json::from_str::<Thresholds>("[1.0, 0.5]").is_err());
    }

    #[test]
    fn params_to_thresholds() {
        let t = thresholds_from_params(&ThresholdParams::zeros(5).unwrap());
        let v = t.values();
        assert_eq!(v[0], -INF);
        assert_eq!(v[5], INF);
        for (q, expected) in [0.0, LN_2, 2.0 * LN_2, 3.0 * LN_2].iter().enumerate() {
            assert_relative_eq!(v[q + 1], *expected, epsilon = 1e-15);
        }

        let t = thresholds_from_params(&ThresholdParams::new(vec![0.0]).unwrap());
        assert_eq!(t.values(), &[-INF, 0.0, INF]);

        // direct evaluation of the displayed formula
        let sp = |x: f64| (1.0 + x.exp()).ln();
        let m = (sp(2.0) + sp(-2.0)) / 2.0;
        let t = thresholds_from_params(&ThresholdParams::new(vec![2.0, -2.0]).unwrap());
        assert_relative_eq!(t.values()[1], sp(2.0) - m, epsilon = 1e-14);
        assert_relative_eq!(t.values()[2], sp(2.0) + sp(-2.0) - m, epsilon = 1e-14);
        assert_relative_eq!(t.values()[1], 1.0, epsilon = 1e-14);
        assert_relative_eq!(t.values()[2], 1.126_928_011_042_972_6, epsilon = 1e-12);
    }

    #[test]
    fn nll_examples() {
        assert_eq!(nll_term(LinkKind::Logit, 0.0, -INF, INF).unwrap(), 0.0);
        assert_relative_eq!(nll_term(LinkKind::Logit, 0.0, 0.0, INF).unwrap(), LN_2, epsilon = 1e-15);
        // mpmath, 30 digits
        assert_relative_eq!(
            nll_term(LinkKind::Probit, 1.0, -1.0, 1.0).unwrap(),
            0.739_715_092_852_335_5,
            max_relative = 1e-14
        );
        assert!(matches!(
            nll_term(LinkKind::Logit, 0.0, 1.0, 1.0),
            Err(Error::IntervalOrder { .. })
        ));
        assert!(nll_term(LinkKind::Logit, f64::NAN, 0.0, 1.0).is_err());
    }

    #[test]
    fn nll_underflow_saturates() {
        // interval of width 1e-300 at the origin: the probability is below the
        // smallest normal float
        let v = nll_term(LinkKind::Probit, 0.0, 0.0, 1e-320).unwrap();
        assert!(v.is_infinite() && v > 0.0);
        let p = nll_point(LinkKind::Probit, 0.0, 0.0, 1e-320);
        assert!(p.saturated);
        assert!(nll_grad_z(LinkKind::Probit, 0.0, 0.0, 1e-320).is_err());
    }

    #[test]
    fn nll_far_tails_stay_finite() {
        for kind in LinkKind::ALL {
            for z in [-1e4, -300.0, -40.0, 40.0, 300.0, 1e4] {
                if kind == LinkKind::Cloglog && z < -1000.0 {
                    // -log S(a - z) = e^{a - z} overflows for real
                    assert_eq!(nll_term(kind, z, -20.0, 20.0).unwrap(), INF);
                    continue;
                }
                let v = nll_term(kind, z, -20.0, 20.0).unwrap();
                assert!(v.is_finite() && v > 0.0, "{kind} at {z}: {v}");
                let g = nll_grad_z(kind, z, -20.0, 20.0).unwrap();
                assert!(g.is_finite(), "{kind} at {z}: {g}");
                assert!(g.signum() == z.signum());
            }
        }
        // logit in the wide-threshold regime: naive subtraction gives 0
        let v = nll_term(LinkKind::Logit, 60.0, -20.0, 20.0).unwrap();
        assert_relative_eq!(v, 40.0, max_relative = 1e-6);
    }

    #[test]
    fn grad_examples() {
        for c in [0.1, 1.0, 7.0] {
            assert!(nll_grad_z(LinkKind::Logit, 0.0, -c, c).unwrap().abs() < 1e-15);
        }
        assert_relative_eq!(
            nll_grad_z(LinkKind::Logit, 0.0, 0.0, INF).unwrap(),
            -0.5,
            epsilon = 1e-15
        );
        let f = |z: f64| nll_term(LinkKind::Probit, z, -1.0, 2.0).unwrap();
        let h = 1e-5;
        let fd = (f(0.3 + h) - f(0.3 - h)) / (2.0 * h);
        assert_relative_eq!(
            nll_grad_z(LinkKind::Probit, 0.3, -1.0, 2.0).unwrap(),
            fd,
            max_relative = 1e-8
        );
    }

    #[test]
    fn hess_examples() {
        let f = |z: f64| nll_term(LinkKind::Logit, z, -1.0, 1.0).unwrap();
        let h = 1e-4;
        let fd = (f(h) - 2.0 * f(0.0) + f(-h)) / (h * h);
        let v = nll_hess_z(LinkKind::Logit, 0.0, -1.0, 1.0).unwrap();
        assert!(v > 0.0);
        assert_relative_eq!(v, fd, max_relative = 1e-6);
        assert_eq!(nll_hess_z(LinkKind::Probit, 0.0, -INF, INF).unwrap(), 0.0);
        assert!(nll_hess_z(LinkKind::Logit, 5.0, -1.0, 1.0).unwrap() > 0.0);
    }

    #[test]
    fn batch_examples() {
        let thr = Thresholds::new(vec![-INF, 0.0, INF]).unwrap();
        assert_relative_eq!(
            batch_nll(LinkKind::Logit, &[0.0], &[1], &thr).unwrap(),
            LN_2,
            epsilon = 1e-15
        );
        assert!(matches!(
            batch_nll(LinkKind::Logit, &[], &[], &thr),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            batch_nll(LinkKind::Logit, &[0.0], &[3], &thr),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
        assert!(matches!(
            batch_nll(LinkKind::Logit, &[0.0], &[0], &thr),
            Err(Error::LabelOutOfRange { label: 0, .. })
        ));
        assert!(batch_nll(LinkKind::Logit, &[0.0, 1.0], &[1], &thr).is_err());

        let l1 = nll_term(LinkKind::Logit, -1.3, -INF, 0.0).unwrap();
        let l2 = nll_term(LinkKind::Logit, 1.3, 0.0, INF).unwrap();
        assert_relative_eq!(l1, l2, epsilon = 1e-15);
    }

    #[test]
    fn threshold_param_gradient_examples() {
        // Q = 2: the single interior cut point is pinned at zero
        let s = ThresholdParams::new(vec![0.0]).unwrap();
        let g = nll_grad_threshold_params(LinkKind::Logit, &[-1.0, 1.0], &[1, 2], &s).unwrap();
        assert_eq!(g, vec![0.0]);

        // all labels 1 with latents above b_1: raising b_1 lowers the loss,
        // so dL/db_1 < 0, and b_1 moves with s_1 with weight (1 - 1/(Q-1))
        let s = ThresholdParams::new(vec![0.3, -0.2, 0.5]).unwrap();
        let latents = [0.5, 0.8, 1.1];
        let labels = [1, 1, 1];
        let thr = s.to_thresholds();
        let g = batch_nll_grad(LinkKind::Logit, &latents, &labels, &thr).unwrap();
        assert!(g.thresholds[1] < 0.0);
        let gs = nll_grad_threshold_params(LinkKind::Logit, &latents, &labels, &s).unwrap();
        let h = 1e-6;
        for (j, &gj) in gs.iter().enumerate() {
            let mut plus = s.clone();
            plus.s[j] += h;
            let mut minus = s.clone();
            minus.s[j] -= h;
            let fp = batch_nll(LinkKind::Logit, &latents, &labels, &plus.to_thresholds()).unwrap();
            let fm = batch_nll(LinkKind::Logit, &latents, &labels, &minus.to_thresholds()).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert_relative_eq!(gj, fd, max_relative = 1e-5, epsilon = 1e-9);
        }
    }

    #[test]
    fn prediction_rule() {
        let thr = Thresholds::new(vec![-10.0, -8.0, 3.0, 10.0]).unwrap();
        assert_eq!(predict_label(-9.0, &thr), 1);
        assert_eq!(predict_label(3.0, &thr), 2);
        assert_eq!(predict_label(-8.0, &thr), 1);
        assert_eq!(predict_label(-50.0, &thr), 1);
        assert_eq!(predict_label(50.0, &thr), 3);
        let two = Thresholds::new(vec![-INF, 0.0, INF]).unwrap();
        assert_eq!(predict_label(0.5, &two), 2);
        assert_eq!(predict_label(0.0, &two), 1);
    }
}
