//! Collapse indicators, MAE and the class-mean geometry they are built on.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::clm::{batch_nll, predict_label, Thresholds};
use crate::error::{Error, Result};
use crate::link::LinkKind;

const POWER_TOL: f64 = 1e-10;
const POWER_STEPS: usize = 2_000;
const SQUARINGS: usize = 64;

/// Features (one row per sample) with 1-based labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl FeatureBatch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::LengthMismatch {
                what: "feature rows vs labels",
                left: features.nrows(),
                right: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::Empty("feature batch"));
        }
        if features.ncols() == 0 {
            return Err(Error::Empty("feature dimension"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y == 0 || y > num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        if features.iter().any(|v| v.is_nan()) {
            return Err(Error::NanInput("feature batch"));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y - 1] += 1;
        }
        counts
    }

    /// Per-class means in class order; `None` for classes with no samples.
    pub fn class_means(&self) -> Vec<Option<Array1<f64>>> {
        let p = self.dim();
        let mut sums = vec![Array1::<f64>::zeros(p); self.num_classes];
        let counts = self.class_counts();
        for (row, &y) in self.features.outer_iter().zip(&self.labels) {
            sums[y - 1] += &row;
        }
        sums.into_iter()
            .zip(counts)
            .map(|(s, n)| (n > 0).then(|| s / n as f64))
            .collect()
    }

    pub fn global_mean(&self) -> Array1<f64> {
        self.features
            .mean_axis(Axis(0))
            .expect("batch is nonempty by construction")
    }

    /// `h̄_q - h̄` for every represented class.
    pub fn mean_deviations(&self) -> Vec<Array1<f64>> {
        let g = self.global_mean();
        self.class_means().into_iter().flatten().map(|m| m - &g).collect()
    }

    /// Class-mean latents `w·h̄_q`; `None` for absent classes.
    pub fn class_mean_latents(&self, w: ArrayView1<f64>) -> Result<Vec<Option<f64>>> {
        self.check_w(w)?;
        Ok(self.class_means().into_iter().map(|m| m.map(|m| m.dot(&w))).collect())
    }

    pub fn latents(&self, w: ArrayView1<f64>) -> Result<Vec<f64>> {
        self.check_w(w)?;
        Ok(self.features.dot(&w).to_vec())
    }

    fn check_w(&self, w: ArrayView1<f64>) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::LengthMismatch {
                what: "classifier vs feature dimension",
                left: w.len(),
                right: self.dim(),
            });
        }
        Ok(())
    }
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

fn fix_sign(mut u: Array1<f64>) -> Array1<f64> {
    let mut best = 0;
    for (i, x) in u.iter().enumerate() {
        if x.abs() > u[best].abs() {
            best = i;
        }
    }
    if u[best] < 0.0 {
        u.mapv_inplace(|x| -x);
    }
    u
}

fn relative_residual(m: &Array2<f64>, u: &Array1<f64>, scale: f64) -> f64 {
    let mu = m.dot(u);
    let rho = u.dot(&mu);
    norm((&mu - &(rho * u)).view()) / scale
}

/// Unit top eigenvector of `Σ d dᵀ`, sign-fixed so the largest-magnitude
/// component is positive.
///
/// Plain power iteration from `(1, …, 1)/√p`; if the spectral gap is too small
/// for that to settle, the iteration continues on repeated squarings of the
/// normalized matrix.
pub fn principal_direction(deviations: &[Array1<f64>]) -> Result<Array1<f64>> {
    let p = match deviations.first() {
        Some(d) => d.len(),
        None => return Err(Error::Empty("deviations")),
    };
    if deviations.iter().any(|d| d.len() != p) {
        return Err(Error::invalid("deviation vectors differ in length"));
    }
    let mut m = Array2::<f64>::zeros((p, p));
    for d in deviations {
        let col = d.view().insert_axis(Axis(1));
        let row = d.view().insert_axis(Axis(0));
        m += &col.dot(&row);
    }
    let trace: f64 = m.diag().sum();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(Error::invalid("class-mean deviations are all zero"));
    }

    let mut u = Array1::from_elem(p, 1.0 / (p as f64).sqrt());
    for k in 0..=p {
        let mu = m.dot(&u);
        if norm(mu.view()) > 1e-12 * trace {
            break;
        }
        // start orthogonal to the range; restart on a coordinate axis
        if k == p {
            return Err(Error::invalid("moment matrix has no usable direction"));
        }
        u = Array1::zeros(p);
        u[k] = 1.0;
    }

    for _ in 0..POWER_STEPS {
        let mu = m.dot(&u);
        let n = norm(mu.view());
        u = mu / n;
        if relative_residual(&m, &u, trace) <= POWER_TOL {
            return Ok(fix_sign(u));
        }
    }

    let mut b = &m / trace;
    for _ in 0..SQUARINGS {
        let b2 = b.dot(&b);
        let s = b2.diag().sum();
        b = b2 / s;
        // B tends to the projector onto the top eigenspace; its largest
        // column lies in that space whatever the starting vector
        let col = (0..p)
            .max_by(|&i, &j| norm(b.column(i)).total_cmp(&norm(b.column(j))))
            .expect("p >= 1");
        let cand = b.column(col).to_owned();
        let cand = &cand / norm(cand.view());
        if relative_residual(&m, &cand, trace) <= POWER_TOL {
            return Ok(fix_sign(cand));
        }
    }
    Err(Error::NoConvergence {
        what: "principal direction",
        iterations: POWER_STEPS + SQUARINGS,
        residual: relative_residual(&m, &u, trace),
    })
}

/// Within-class spread relative to total spread; zero when every feature is
/// identical.
pub fn onc1(batch: &FeatureBatch) -> f64 {
    let g = batch.global_mean();
    let means = batch.class_means();
    let counts = batch.class_counts();
    let mut within = vec![0.0; batch.num_classes()];
    let mut total = 0.0;
    for (row, &y) in batch.features.outer_iter().zip(&batch.labels) {
        let mean = means[y - 1].as_ref().expect("label present");
        within[y - 1] += norm((&row - mean).view());
        total += norm((&row - &g).view());
    }
    let denom = total / batch.len() as f64;
    if denom == 0.0 {
        return 0.0;
    }
    let present: Vec<f64> = within
        .iter()
        .zip(&counts)
        .filter(|(_, &n)| n > 0)
        .map(|(s, &n)| s / n as f64)
        .collect();
    present.iter().sum::<f64>() / present.len() as f64 / denom
}

/// Fraction of class-mean deviation energy off the principal axis.
pub fn onc2_1(batch: &FeatureBatch) -> Result<f64> {
    let devs = batch.mean_deviations();
    let u = principal_direction(&devs)?;
    Ok(off_axis_fraction(&devs, &u))
}

/// `Σ ‖d - (uᵀd)u‖² / Σ ‖d‖²` for a unit `u`.
pub fn off_axis_fraction(deviations: &[Array1<f64>], u: &Array1<f64>) -> f64 {
    let mut off = 0.0;
    let mut total = 0.0;
    for d in deviations {
        let along = u.dot(d);
        let rest = d - &(along * u);
        off += rest.dot(&rest);
        total += d.dot(d);
    }
    (off / total).clamp(0.0, 1.0)
}

/// `1 - |cos ∠(w, u)|`.
pub fn onc2_2(w: ArrayView1<f64>, u: ArrayView1<f64>) -> Result<f64> {
    if w.len() != u.len() {
        return Err(Error::LengthMismatch {
            what: "w vs u",
            left: w.len(),
            right: u.len(),
        });
    }
    let nw = norm(w);
    if nw == 0.0 {
        return Err(Error::invalid("classifier vector is zero"));
    }
    let nu = norm(u);
    if nu == 0.0 {
        return Err(Error::invalid("direction vector is zero"));
    }
    Ok((1.0 - (w.dot(&u) / (nw * nu)).abs()).clamp(0.0, 1.0))
}

/// Distance of interior thresholds from the midpoints of adjacent class-mean
/// latents, normalized by the finite threshold span `Σ (b_{q+1} - b_q)`.
///
/// Infinite outer gaps are left out of the denominator. Pairs involving an
/// absent class (`NaN` latent) are skipped.
pub fn onc3(z_means: &[f64], thr: &Thresholds) -> Result<f64> {
    let q = thr.num_classes();
    if z_means.len() != q {
        return Err(Error::LengthMismatch {
            what: "class latents vs classes",
            left: z_means.len(),
            right: q,
        });
    }
    let b = thr.values();
    let mut num = 0.0;
    for k in 1..q {
        let (lo, hi) = (z_means[k - 1], z_means[k]);
        if lo.is_nan() || hi.is_nan() {
            continue;
        }
        num += (b[k] - 0.5 * (lo + hi)).abs();
    }
    let denom: f64 = (1..q).map(|k| b[k + 1] - b[k]).filter(|g| g.is_finite()).sum();
    if !(denom > 0.0) {
        return Err(Error::invalid("threshold span for the midpoint indicator is zero"));
    }
    Ok(num / denom)
}

pub fn mae(predicted: &[usize], actual: &[usize]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::LengthMismatch {
            what: "predicted vs actual labels",
            left: predicted.len(),
            right: actual.len(),
        });
    }
    if actual.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let total: usize = predicted.iter().zip(actual).map(|(&p, &a)| p.abs_diff(a)).sum();
    Ok(total as f64 / actual.len() as f64)
}

/// Collapse indicators plus fit quality. Indicators that are undefined for
/// the batch (for example a zero classifier) are `NaN`, serialized as `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OncReport {
    #[serde(with = "nan_as_null")]
    pub onc1: f64,
    #[serde(with = "nan_as_null")]
    pub onc2_1: f64,
    #[serde(with = "nan_as_null")]
    pub onc2_2: f64,
    #[serde(with = "nan_as_null")]
    pub onc3: f64,
    #[serde(with = "nan_as_null")]
    pub nll: f64,
    #[serde(with = "nan_as_null")]
    pub mae: f64,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Evaluate every indicator on `batch` with classifier `w`.
pub fn report(batch: &FeatureBatch, w: ArrayView1<f64>, thr: &Thresholds, kind: LinkKind) -> Result<OncReport> {
    if thr.num_classes() != batch.num_classes() {
        return Err(Error::LengthMismatch {
            what: "threshold classes vs batch classes",
            left: thr.num_classes(),
            right: batch.num_classes(),
        });
    }
    let latents = batch.latents(w)?;
    let predicted: Vec<usize> = latents.iter().map(|&z| predict_label(z, thr)).collect();
    let devs = batch.mean_deviations();
    let u = principal_direction(&devs).ok();
    let onc2_1 = u.as_ref().map_or(f64::NAN, |u| off_axis_fraction(&devs, u));
    let onc2_2 = u.as_ref().and_then(|u| onc2_2(w, u.view()).ok()).unwrap_or(f64::NAN);
    let z_means: Vec<f64> = batch
        .class_mean_latents(w)?
        .into_iter()
        .map(|z| z.unwrap_or(f64::NAN))
        .collect();
    Ok(OncReport {
        onc1: onc1(batch),
        onc2_1,
        onc2_2,
        onc3: onc3(&z_means, thr).unwrap_or(f64::NAN),
        nll: batch_nll(kind, &latents, batch.labels(), thr)?,
        mae: mae(&predicted, batch.labels())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array};
    use rand::Rng;

    fn batch(rows: Vec<Vec<f64>>, labels: Vec<usize>, q: usize) -> FeatureBatch {
        let p = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        FeatureBatch::new(Array2::from_shape_vec((labels.len(), p), flat).unwrap(), labels, q).unwrap()
    }

    #[test]
    fn principal_direction_examples() {
        let u = principal_direction(&[array![-2.0, 0.0, 0.0], array![3.0, 0.0, 0.0]]).unwrap();
        assert_eq!(u, array![1.0, 0.0, 0.0]);
        let v = array![1.0, -2.0, 0.5];
        let u = principal_direction(&[v.clone(), -&v]).unwrap();
        let expect = &v / norm(v.view());
        assert!((&u + &expect).iter().all(|x| x.abs() < 1e-12), "{u}");
        assert!(principal_direction(&[array![0.0, 0.0], array![0.0, 0.0]]).is_err());
        // start vector orthogonal to the range
        let u = principal_direction(&[array![1.0, -1.0], array![-2.0, 2.0]]).unwrap();
        assert_relative_eq!(u[0].abs(), 0.5f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn principal_direction_matches_dense_eigensolver() {
        let mut rng = crate::rng::seeded(7);
        let devs: Vec<Array1<f64>> = (0..4)
            .map(|_| Array::from_iter((0..6).map(|_| rng.random_range(-1.0..1.0))))
            .collect();
        let mut m = nalgebra::DMatrix::<f64>::zeros(6, 6);
        for d in &devs {
            let v = nalgebra::DVector::from_iterator(6, d.iter().copied());
            m += &v * v.transpose();
        }
        let eig = m.symmetric_eigen();
        let top = eig.eigenvalues.iamax();
        let oracle = eig.eigenvectors.column(top);
        let u = principal_direction(&devs).unwrap();
        let sign = if oracle.dot(&nalgebra::DVector::from_iterator(6, u.iter().copied())) < 0.0 {
            -1.0
        } else {
            1.0
        };
        for i in 0..6 {
            assert!((u[i] - sign * oracle[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn principal_direction_near_degenerate_gap() {
        let devs = [array![1.0, 0.0, 0.0], array![0.0, 1.0 + 1e-9, 0.0]];
        let u = principal_direction(&devs).unwrap();
        assert!((u[1] - 1.0).abs() < 1e-6, "{u}");
        let devs = [array![1.0, 0.0], array![0.0, 1.0]];
        let u = principal_direction(&devs).unwrap();
        assert_relative_eq!(norm(u.view()), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn onc1_examples() {
        let b = batch(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 2.0]], vec![1, 1, 2], 2);
        assert_eq!(onc1(&b), 0.0);

        let b = batch(vec![vec![0.0], vec![2.0], vec![5.0], vec![-1.0]], vec![1, 1, 1, 1], 1);
        assert_relative_eq!(onc1(&b), 1.0, epsilon = 1e-15);

        // class 1: {0, 2} mean 1, spread 1; class 2: {4, 4, 7} mean 5, spread 4/3
        // global mean 17/5; distances 3.4, 1.4, 0.6, 0.6, 3.6
        let b = batch(
            vec![vec![0.0], vec![2.0], vec![4.0], vec![4.0], vec![7.0]],
            vec![1, 1, 2, 2, 2],
            2,
        );
        let expected = 0.5 * (1.0 + 4.0 / 3.0) / (9.6 / 5.0);
        assert_relative_eq!(onc1(&b), expected, epsilon = 1e-14);

        let b = batch(vec![vec![3.0, 3.0], vec![3.0, 3.0]], vec![1, 2], 2);
        assert_eq!(onc1(&b), 0.0);
    }

    #[test]
    fn onc2_examples() {
        let b = batch(vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![4.0, 4.0]], vec![1, 2, 3], 3);
        assert!(onc2_1(&b).unwrap() < 1e-15);
        let devs = [array![1.0, 0.0], array![0.0, 1.0]];
        let u = principal_direction(&devs).unwrap();
        assert_relative_eq!(off_axis_fraction(&devs, &u), 0.5, epsilon = 1e-12);
        let b = batch(vec![vec![1.0, 2.0], vec![-1.0, -2.0]], vec![1, 2], 2);
        assert!(onc2_1(&b).unwrap() < 1e-15);

        let u = array![1.0, 0.0];
        assert_eq!(onc2_2(array![3.0, 0.0].view(), u.view()).unwrap(), 0.0);
        assert_eq!(onc2_2(array![0.0, 2.0].view(), u.view()).unwrap(), 1.0);
        let c = 60f64.to_radians();
        let v = onc2_2(array![c.cos(), c.sin()].view(), u.view()).unwrap();
        assert_relative_eq!(v, 0.5, epsilon = 1e-12);
        assert!(onc2_2(array![0.0, 0.0].view(), u.view()).is_err());
    }

    #[test]
    fn onc3_examples() {
        let thr = Thresholds::new(vec![-3.0, -1.0, 1.0, 3.0]).unwrap();
        assert_eq!(onc3(&[-2.0, 0.0, 2.0], &thr).unwrap(), 0.0);
        // latents on the thresholds b_1..b_3 themselves: each midpoint is off by h/2
        let v = onc3(&[-1.0, 1.0, 3.0], &thr).unwrap();
        assert_relative_eq!(v, (1.0 + 1.0) / 4.0, epsilon = 1e-15);

        let thr = Thresholds::new(vec![-10.0, -8.0, 3.0, 10.0]).unwrap();
        let v = onc3(&[-9.0, -2.5, 6.5], &thr).unwrap();
        assert_relative_eq!(v, 3.25 / 18.0, epsilon = 1e-15);

        let inf = f64::INFINITY;
        let thr = Thresholds::new(vec![-inf, -1.0, 0.5, inf]).unwrap();
        let v = onc3(&[-2.0, 0.0, 1.0], &thr).unwrap();
        assert_relative_eq!(v, (0.0 + 0.0) / 1.5, epsilon = 1e-15);
        let v = onc3(&[-2.0, 1.0, 2.0], &thr).unwrap();
        assert_relative_eq!(v, (0.5 + 1.0) / 1.5, epsilon = 1e-15);

        let thr = Thresholds::new(vec![-inf, 0.0, inf]).unwrap();
        assert!(onc3(&[-1.0, 1.0], &thr).is_err());
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(mae(&[1, 1], &[2, 3]).unwrap(), 1.5);
        assert_eq!(mae(&[2, 3, 4], &[1, 2, 3]).unwrap(), 1.0);
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn report_on_collapsed_features() {
        let thr = Thresholds::new(vec![-3.0, -1.0, 1.0, 3.0]).unwrap();
        let b = batch(
            vec![vec![-2.0, 0.0], vec![-2.0, 0.0], vec![0.0, 0.0], vec![2.0, 0.0]],
            vec![1, 1, 2, 3],
            3,
        );
        let r = report(&b, array![1.0, 0.0].view(), &thr, LinkKind::Logit).unwrap();
        assert_eq!(r.onc1, 0.0);
        assert!(r.onc2_1 < 1e-15);
        assert_eq!(r.onc2_2, 0.0);
        assert_eq!(r.onc3, 0.0);
        assert_eq!(r.mae, 0.0);
        assert!(r.nll > 0.0);

        let r = report(&b, array![0.0, 0.0].view(), &thr, LinkKind::Logit).unwrap();
        assert!(r.onc2_2.is_nan());
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"onc2_2\":null"), "{json}");
        let back: OncReport = serde_json::from_str(&json).unwrap();
        assert!(back.onc2_2.is_nan());
    }

    #[test]
    fn absent_classes_are_skipped() {
        let b = batch(vec![vec![-1.0], vec![1.0]], vec![1, 3], 3);
        assert_eq!(b.class_means()[1], None);
        assert_eq!(onc1(&b), 0.0);
        let z = b.class_mean_latents(array![1.0].view()).unwrap();
        assert_eq!(z, vec![Some(-1.0), None, Some(1.0)]);
    }

    #[test]
    fn batch_validation() {
        let f = Array2::zeros((2, 2));
        assert!(FeatureBatch::new(f.clone(), vec![1], 2).is_err());
        assert!(FeatureBatch::new(f.clone(), vec![1, 3], 2).is_err());
        assert!(FeatureBatch::new(Array2::zeros((0, 2)), vec![], 2).is_err());
        assert!(FeatureBatch::new(f, vec![1, 2], 2).is_ok());
    }
}
