//! Run configuration and artifact formats for the `onc` binary.
//!
//! A config file is TOML with one table per module. Every key has a default,
//! so an empty file is valid and `--print-config` shows the full set.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::clm::Thresholds;
use crate::data::{Normalization, SynthConfig};
use crate::eos::{EosProblem, EosSolution, Sweep};
use crate::error::{Error, Result};
use crate::link::LinkKind;
use crate::nn::{EpochRecord, MlpConfig, TrainConfig};
use crate::ufm::{TrajectoryPoint, UfmConfig};

pub const OUT_DIR_ENV: &str = "ONC_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "onc-out";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub eos: EosSection,
    pub sweep: SweepSection,
    pub ufm: UfmConfig,
    pub mlp: MlpConfig,
    pub nn: TrainConfig,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub metrics: MetricsSection,
    pub check: CheckSection,
}

fn fig1_thresholds() -> Thresholds {
    Thresholds::new(vec![-10.0, -8.0, 3.0, 10.0]).expect("ordered")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EosSection {
    pub link: LinkKind,
    pub thresholds: Thresholds,
    /// Class sizes; proportions are uniform when neither this nor `alpha`
    /// is given.
    pub counts: Option<Vec<usize>>,
    pub alpha: Option<Vec<f64>>,
    pub lambda_w: f64,
    pub lambda_h: f64,
}

impl Default for EosSection {
    fn default() -> Self {
        Self {
            link: LinkKind::Logit,
            thresholds: fig1_thresholds(),
            counts: None,
            alpha: None,
            lambda_w: 1e-6,
            lambda_h: 1.0,
        }
    }
}

impl EosSection {
    pub fn problem(&self) -> Result<EosProblem> {
        let thr = self.thresholds.clone();
        match (&self.counts, &self.alpha) {
            (Some(_), Some(_)) => Err(Error::Config("set at most one of eos.counts and eos.alpha".into())),
            (Some(c), None) => EosProblem::from_counts(self.link, thr, c, self.lambda_w, self.lambda_h),
            (None, Some(a)) => EosProblem::new(self.link, thr, a.clone(), self.lambda_w, self.lambda_h),
            (None, None) => EosProblem::uniform(self.link, thr, self.lambda_w, self.lambda_h),
        }
    }
}

/// Log grid in `λ_w`; the upper end is `lambda_w_max` when set and
/// `max_over_c · C / λ_h` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub lambda_w_min: f64,
    pub lambda_w_max: Option<f64>,
    pub max_over_c: f64,
    pub points: usize,
    pub refine: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            lambda_w_min: 1e-8,
            lambda_w_max: None,
            max_over_c: 10.0,
            points: 60,
            refine: true,
        }
    }
}

impl SweepSection {
    pub fn grid(&self, c: f64, lambda_h: f64) -> Result<Vec<f64>> {
        let hi = self.lambda_w_max.unwrap_or(self.max_over_c * c / lambda_h);
        if !(self.lambda_w_min > 0.0 && hi > self.lambda_w_min && hi.is_finite()) {
            return Err(Error::Config(format!(
                "sweep range must satisfy 0 < lambda_w_min < max, got [{}, {hi}]",
                self.lambda_w_min
            )));
        }
        if self.points < 2 {
            return Err(Error::Config("sweep.points must be at least 2".into()));
        }
        Ok(crate::eos::log_spaced(self.lambda_w_min, hi, self.points))
    }
}

/// Input for `nn train`: a CSV with its schema, or synthetic data from the
/// `[synth]` table when `path` is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub label_column: Option<String>,
    pub normalization: Normalization,
    /// Fraction kept for training; no validation split when absent.
    pub train_fraction: Option<f64>,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            schema: None,
            label_column: None,
            normalization: Normalization::Zscore,
            train_fraction: None,
            split_seed: 0,
        }
    }
}

/// Evaluation settings for a feature dump. Without explicit thresholds the
/// fixed ladder with the given half range is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub link: LinkKind,
    pub thresholds: Option<Thresholds>,
    pub half_range: f64,
    pub num_classes: Option<usize>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            link: LinkKind::Logit,
            thresholds: None,
            half_range: 20.0,
            num_classes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSection {
    pub trials: usize,
    /// Ridge weight for the minimizer monotonicity check.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for CheckSection {
    fn default() -> Self {
        Self {
            trials: 1000,
            lambda: 1.0,
            seed: 0,
        }
    }
}

impl CheckSection {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("check.trials must be at least 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "check.lambda must be positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Overwrite every seed with `seed`.
    pub fn apply_seed(&mut self, seed: u64) {
        self.ufm.seed = seed;
        self.mlp.seed = seed;
        self.nn.seed = seed;
        self.synth.seed = seed;
        self.data.split_seed = seed;
        self.check.seed = seed;
    }
}

pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.display().to_string()),
        _ => Error::Data(format!("{}: {e}", path.display())),
    })
}

/// `--out-dir`, then the environment, then `onc-out`.
pub fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| {
        std::env::var_os(OUT_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    })
    .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Write through a temporary file in the same directory and rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| Error::Data(format!("{}: {e}", path.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(contents).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

/// 17 significant digits; `inf`, `-inf` and `NaN` pass through.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn join_floats<'a>(xs: impl IntoIterator<Item = &'a f64> + 'a) -> impl Iterator<Item = String> + 'a {
    xs.into_iter().map(|&x| fmt_f64(x))
}

fn z_header(q: usize) -> Vec<String> {
    (1..=q).map(|k| format!("z_{k}")).collect()
}

fn eos_header(q: usize) -> String {
    let mut h = vec!["lambda_w".to_string(), "w_star".to_string()];
    h.extend(z_header(q));
    h.push("phase".into());
    h.push("objective".into());
    h.join(",")
}

fn eos_row(lambda_w: f64, s: &EosSolution) -> String {
    let mut cols = vec![fmt_f64(lambda_w), fmt_f64(s.w_star)];
    cols.extend(join_floats(&s.z_star));
    cols.push(s.phase.as_str().to_string());
    cols.push(fmt_f64(s.objective));
    cols.join(",")
}

pub fn solution_csv(lambda_w: f64, solution: &EosSolution) -> String {
    format!(
        "{}\n{}\n",
        eos_header(solution.z_star.len()),
        eos_row(lambda_w, solution)
    )
}

pub fn sweep_csv(sweep: &Sweep) -> String {
    let q = sweep.rows.first().map_or(0, |r| r.solution.z_star.len());
    let mut out = eos_header(q);
    out.push('\n');
    for r in &sweep.rows {
        out.push_str(&eos_row(r.lambda_w, &r.solution));
        out.push('\n');
    }
    out
}

pub fn trajectory_csv(points: &[TrajectoryPoint], num_classes: usize) -> String {
    let mut h: Vec<String> = ["step", "objective", "grad_norm", "onc1", "onc2_1", "onc2_2", "onc3"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(z_header(num_classes));
    let mut out = h.join(",");
    out.push('\n');
    for p in points {
        let mut cols = vec![p.step.to_string()];
        cols.extend(join_floats(&[
            p.objective,
            p.grad_norm,
            p.onc1,
            p.onc2_1,
            p.onc2_2,
            p.onc3,
        ]));
        cols.extend(join_floats(&p.z));
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    out
}

pub fn history_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,split,nll,mae,onc1,onc2_1,onc2_2,onc3,lr\n");
    for r in records {
        let m = &r.report;
        let mut cols = vec![r.epoch.to_string(), r.split.as_str().to_string()];
        cols.extend(join_floats(&[m.nll, m.mae, m.onc1, m.onc2_1, m.onc2_2, m.onc3, r.lr]));
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    out
}

/// Features with their labels and the classifier vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub w: Array1<f64>,
}

/// Header `label,f_1..f_p`, one row per sample, and a final row labelled
/// `w` holding the classifier.
pub fn feature_dump_csv(features: ArrayView2<f64>, labels: &[usize], w: ArrayView1<f64>) -> Result<String> {
    if features.nrows() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "feature rows vs labels",
            left: features.nrows(),
            right: labels.len(),
        });
    }
    if features.ncols() != w.len() {
        return Err(Error::LengthMismatch {
            what: "feature columns vs classifier",
            left: features.ncols(),
            right: w.len(),
        });
    }
    let mut h = vec!["label".to_string()];
    h.extend((1..=w.len()).map(|k| format!("f_{k}")));
    let mut out = h.join(",");
    out.push('\n');
    for (row, y) in features.outer_iter().zip(labels) {
        let mut cols = vec![y.to_string()];
        cols.extend(join_floats(row.iter()));
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    let mut cols = vec!["w".to_string()];
    cols.extend(join_floats(w.iter()));
    out.push_str(&cols.join(","));
    out.push('\n');
    Ok(out)
}

pub fn parse_feature_dump(text: &str) -> Result<FeatureDump> {
    let err = |m: String| Error::Data(format!("feature dump: {m}"));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| err(e.to_string()))?.clone();
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(err("header must start with `label` followed by feature columns".into()));
    }
    let p = header.len() - 1;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut w = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| err(format!("row {}: {e}", i + 1)))?;
        let values = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| err(format!("row {}: bad number {v:?}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        match &rec[0] {
            "w" => {
                if w.replace(values).is_some() {
                    return Err(err("more than one `w` row".into()));
                }
            }
            y => {
                let y = y
                    .parse::<usize>()
                    .map_err(|_| err(format!("row {}: bad label {y:?}", i + 1)))?;
                labels.push(y);
                rows.extend(values);
            }
        }
    }
    let w = w.ok_or_else(|| err("missing `w` row".into()))?;
    if labels.is_empty() {
        return Err(Error::Empty("feature dump samples"));
    }
    let features = Array2::from_shape_vec((labels.len(), p), rows).map_err(|e| err(e.to_string()))?;
    Ok(FeatureDump {
        features,
        labels,
        w: Array1::from_vec(w),
    })
}

/// Provenance record written next to every set of outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub command: String,
    pub version: String,
    pub timestamp_unix: u64,
    pub outputs: Vec<String>,
    pub config: RunConfig,
}

impl Meta {
    pub fn new(command: &str, config: &RunConfig, outputs: &[&str]) -> Self {
        let timestamp_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp_unix,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            config: config.clone(),
        }
    }
}

/// Serialize to pretty JSON.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn partial_sections_and_unknown_keys() {
        let cfg = RunConfig::from_toml_str("[eos]\nlink = \"probit\"\nlambda_w = 0.01\n").unwrap();
        assert_eq!(cfg.eos.link, LinkKind::Probit);
        assert_eq!(cfg.eos.thresholds, fig1_thresholds());
        assert!(matches!(
            RunConfig::from_toml_str("[eos]\nlamda_w = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::from_toml_str("[eos\n"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml_str("[eos]\nthresholds = [1.0, 0.0]\n").is_err());
    }

    #[test]
    fn infinite_thresholds_parse() {
        let cfg = RunConfig::from_toml_str("[metrics]\nthresholds = [-inf, 0.0, inf]\n").unwrap();
        assert_eq!(cfg.metrics.thresholds.unwrap().num_classes(), 2);
    }

    #[test]
    fn seed_override_reaches_every_section() {
        let mut cfg = RunConfig::default();
        cfg.apply_seed(42);
        assert_eq!(
            (cfg.ufm.seed, cfg.nn.seed, cfg.mlp.seed, cfg.synth.seed, cfg.check.seed),
            (42, 42, 42, 42, 42)
        );
    }

    #[test]
    fn eos_section_weights() {
        let mut s = EosSection::default();
        assert_eq!(s.problem().unwrap().alpha, vec![1.0 / 3.0; 3]);
        s.counts = Some(vec![1, 1, 2]);
        assert_eq!(s.problem().unwrap().alpha, vec![0.25, 0.25, 0.5]);
        s.alpha = Some(vec![0.2, 0.3, 0.5]);
        assert!(s.problem().is_err());
    }

    #[test]
    fn sweep_grid_uses_boundary() {
        let s = SweepSection::default();
        let g = s.grid(0.5, 2.0).unwrap();
        assert_eq!(g.len(), 60);
        assert!((g[0] - 1e-8).abs() < 1e-20);
        assert!((g[59] - 2.5).abs() < 1e-12);
        let bad = SweepSection {
            lambda_w_max: Some(1e-9),
            ..s
        };
        assert!(bad.grid(0.5, 1.0).is_err());
    }

    #[test]
    fn float_format_is_lossless() {
        for x in [0.1, -1.0 / 3.0, 6.02e23, 5e-324, 0.0] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert!(fmt_f64(f64::NAN).parse::<f64>().unwrap().is_nan());
    }

    #[test]
    fn feature_dump_round_trip() {
        let f = array![[1.0, -2.5], [0.125, 3.0], [1e-300, 7.0]];
        let labels = vec![1, 2, 2];
        let w = array![0.5, -0.25];
        let text = feature_dump_csv(f.view(), &labels, w.view()).unwrap();
        assert!(text.starts_with("label,f_1,f_2\n"));
        let d = parse_feature_dump(&text).unwrap();
        assert_eq!(d.features, f);
        assert_eq!(d.labels, labels);
        assert_eq!(d.w, w);
        assert!(parse_feature_dump("label,f_1\n1,2.0\n").is_err());
        assert!(parse_feature_dump("label,f_1\n1,2.0\nw,1\nw,2\n").is_err());
        assert!(parse_feature_dump("label,f_1\nx,2.0\nw,1\n").is_err());
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out.csv");
        write_atomic(&path, b"a\n").unwrap();
        write_atomic(&path, b"b\n").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "b\n");
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn missing_file_is_distinguished() {
        let e = RunConfig::from_file(Path::new("/definitely/not/here.toml")).unwrap_err();
        assert!(matches!(e, Error::MissingFile(_)));
    }
}
