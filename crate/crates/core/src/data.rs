//! Ordinal datasets: CSV ingestion with one-hot/standardized encoding,
//! stratified splitting and a seeded synthetic generator.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training-split label histogram of the ER benchmark, a 9-class imbalanced
/// ordinal dataset.
pub const ER_TRAIN_COUNTS: [usize; 9] = [69, 106, 136, 129, 118, 89, 66, 23, 14];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One encoded input row per sample.
    pub inputs: Array2<f64>,
    /// Labels in `1..=num_classes`.
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Name of each encoded column.
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        inputs: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::LengthMismatch {
                what: "input rows vs labels",
                left: inputs.nrows(),
                right: labels.len(),
            });
        }
        if feature_names.len() != inputs.ncols() {
            return Err(Error::LengthMismatch {
                what: "feature names vs input columns",
                left: feature_names.len(),
                right: inputs.ncols(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y == 0 || y > num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y - 1] += 1;
        }
        c
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(ndarray::Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            feature_names: self.feature_names.clone(),
        }
    }

    /// Write as CSV with the encoded columns followed by `label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        self.write_records(&mut w)?;
        w.flush().map_err(|e| Error::Data(e.to_string()))
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        self.write_records(&mut w)?;
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    fn write_records<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let map = |e: csv::Error| Error::Data(e.to_string());
        let mut header = self.feature_names.clone();
        header.push("label".into());
        w.write_record(&header).map_err(map)?;
        for (row, y) in self.inputs.outer_iter().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            rec.push(y.to_string());
            w.write_record(&rec).map_err(map)?;
        }
        Ok(())
    }

    /// Schema text matching [`Dataset::write_csv`] output.
    pub fn schema_text(&self) -> String {
        let mut s = String::new();
        for name in &self.feature_names {
            s.push_str(&format!("{name}: numeric\n"));
        }
        s.push_str("label: label\n");
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Categorical,
    Numeric,
    Label,
}

impl FromStr for ColumnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "categorical" => Ok(Self::Categorical),
            "numeric" => Ok(Self::Numeric),
            "label" => Ok(Self::Label),
            other => Err(Error::Data(format!("unknown column kind {other:?}"))),
        }
    }
}

/// Column kinds by name, parsed from `name: kind` lines. Blank lines and
/// lines starting with `#` are ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub columns: Vec<(String, ColumnKind)>,
}

impl Schema {
    pub fn parse(text: &str) -> Result<Self> {
        let mut columns = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, kind) = line
                .rsplit_once(':')
                .ok_or_else(|| Error::Data(format!("schema line {}: expected `name: kind`", lineno + 1)))?;
            let name = name.trim().to_string();
            if columns.iter().any(|(n, _)| *n == name) {
                return Err(Error::Data(format!("schema lists column {name:?} twice")));
            }
            columns.push((name, kind.parse()?));
        }
        let labels = columns.iter().filter(|(_, k)| *k == ColumnKind::Label).count();
        if labels > 1 {
            return Err(Error::Data("schema marks more than one label column".into()));
        }
        Ok(Self { columns })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn kind_of(&self, name: &str) -> Option<ColumnKind> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, k)| *k)
    }
}

/// Raw CSV cells with labels already mapped to `1..=Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub header: Vec<String>,
    /// Non-label cells, one row per sample, in header order.
    pub cells: Vec<Vec<String>>,
    pub kinds: Vec<ColumnKind>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Original label text for each class index.
    pub label_values: Vec<String>,
}

impl RawTable {
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            cells: rows.iter().map(|&i| self.cells[i].clone()).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }
}

/// Read a CSV file with a header row.
///
/// `label_column` overrides the schema's label column. Labels are remapped
/// to consecutive integers in ascending order: numerically if every label
/// parses as a number, otherwise lexicographically.
pub fn read_csv(path: &Path, schema: &Schema, label_column: Option<&str>) -> Result<RawTable> {
    let reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_csv(reader, schema, label_column)
}

pub fn read_csv_str(text: &str, schema: &Schema, label_column: Option<&str>) -> Result<RawTable> {
    let reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    parse_csv(reader, schema, label_column)
}

fn parse_csv<R: std::io::Read>(
    mut reader: csv::Reader<R>,
    schema: &Schema,
    label_column: Option<&str>,
) -> Result<RawTable> {
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let label_name = match label_column {
        Some(l) => l.to_string(),
        None => schema
            .columns
            .iter()
            .find(|(_, k)| *k == ColumnKind::Label)
            .map(|(n, _)| n.clone())
            .ok_or_else(|| Error::Data("no label column in schema or arguments".into()))?,
    };
    let label_idx = header
        .iter()
        .position(|h| *h == label_name)
        .ok_or_else(|| Error::Data(format!("label column {label_name:?} not in header")))?;
    let mut kinds = Vec::new();
    let mut names = Vec::new();
    for (i, h) in header.iter().enumerate() {
        if i == label_idx {
            continue;
        }
        match schema.kind_of(h) {
            Some(ColumnKind::Label) => {
                return Err(Error::Data(format!(
                    "column {h:?} is marked label but {label_name:?} is the label"
                )))
            }
            Some(k) => kinds.push(k),
            None => return Err(Error::Data(format!("column {h:?} missing from schema"))),
        }
        names.push(h.clone());
    }

    let mut cells = Vec::new();
    let mut raw_labels = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("row {}: {e}", r + 1)))?;
        if rec.len() != header.len() {
            return Err(Error::Data(format!(
                "row {}: expected {} fields, found {}",
                r + 1,
                header.len(),
                rec.len()
            )));
        }
        let mut row = Vec::with_capacity(kinds.len());
        for (i, v) in rec.iter().enumerate() {
            if i == label_idx {
                raw_labels.push(v.to_string());
            } else {
                row.push(v.to_string());
            }
        }
        cells.push(row);
    }
    if cells.is_empty() {
        return Err(Error::Data("CSV has no data rows".into()));
    }

    let (labels, label_values) = remap_labels(&raw_labels)?;
    Ok(RawTable {
        header: names,
        cells,
        kinds,
        labels,
        num_classes: label_values.len(),
        label_values,
    })
}

fn remap_labels(raw: &[String]) -> Result<(Vec<usize>, Vec<String>)> {
    let mut distinct: Vec<String> = raw.to_vec();
    distinct.sort();
    distinct.dedup();
    let numeric: Option<Vec<f64>> = distinct.iter().map(|s| s.parse::<f64>().ok()).collect();
    if let Some(vals) = numeric {
        let mut pairs: Vec<(f64, String)> = vals.into_iter().zip(distinct).collect();
        if pairs.iter().any(|(v, _)| v.is_nan()) {
            return Err(Error::Data("NaN label".into()));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // "1" and "1.0" name the same class
        pairs.dedup_by(|a, b| a.0 == b.0);
        let index: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels = raw
            .iter()
            .map(|s| {
                let v: f64 = s.parse().expect("checked above");
                index.iter().position(|&x| x == v).expect("present") + 1
            })
            .collect();
        return Ok((labels, pairs.into_iter().map(|p| p.1).collect()));
    }
    let index: HashMap<&str, usize> = distinct.iter().enumerate().map(|(i, s)| (s.as_str(), i + 1)).collect();
    let labels = raw.iter().map(|s| index[s.as_str()]).collect();
    Ok((labels, distinct))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Zscore,
    Minmax,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Zscore => "zscore",
            Self::Minmax => "minmax",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ColumnEncoder {
    OneHot { categories: Vec<String> },
    Scale { center: f64, scale: f64 },
}

/// Per-column encoding fitted on one table and applied to others.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    names: Vec<String>,
    columns: Vec<ColumnEncoder>,
    pub normalization: Normalization,
}

fn parse_numeric(v: &str, row: usize, col: &str) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::Data(format!("row {}, column {col:?}: {v:?} is not a finite number", row + 1)))
}

impl Encoder {
    /// Categories in first-appearance order; numeric centering and scale
    /// from the table's own statistics (population standard deviation, or
    /// range for min-max). A zero spread is replaced by one.
    pub fn fit(table: &RawTable, normalization: Normalization) -> Result<Self> {
        let mut columns = Vec::new();
        for (j, kind) in table.kinds.iter().enumerate() {
            let name = &table.header[j];
            match kind {
                ColumnKind::Categorical => {
                    let mut categories: Vec<String> = Vec::new();
                    for row in &table.cells {
                        if !categories.contains(&row[j]) {
                            categories.push(row[j].clone());
                        }
                    }
                    columns.push(ColumnEncoder::OneHot { categories });
                }
                ColumnKind::Numeric => {
                    let vals = table
                        .cells
                        .iter()
                        .enumerate()
                        .map(|(r, row)| parse_numeric(&row[j], r, name))
                        .collect::<Result<Vec<_>>>()?;
                    let (center, spread) = match normalization {
                        Normalization::Zscore => {
                            let n = vals.len() as f64;
                            let mean = vals.iter().sum::<f64>() / n;
                            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                            (mean, var.sqrt())
                        }
                        Normalization::Minmax => {
                            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            (lo, hi - lo)
                        }
                    };
                    let scale = if spread > 0.0 { spread } else { 1.0 };
                    columns.push(ColumnEncoder::Scale { center, scale });
                }
                ColumnKind::Label => unreachable!("label column is split off while reading"),
            }
        }
        Ok(Self {
            names: table.header.clone(),
            columns,
            normalization,
        })
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, col) in self.names.iter().zip(&self.columns) {
            match col {
                ColumnEncoder::OneHot { categories } => {
                    out.extend(categories.iter().map(|c| format!("{name}={c}")));
                }
                ColumnEncoder::Scale { .. } => out.push(name.clone()),
            }
        }
        out
    }

    pub fn apply(&self, table: &RawTable) -> Result<Dataset> {
        if table.header != self.names {
            return Err(Error::Data("table columns differ from the fitted encoder".into()));
        }
        let names = self.feature_names();
        let d = names.len();
        let mut inputs = Array2::<f64>::zeros((table.cells.len(), d));
        for (r, row) in table.cells.iter().enumerate() {
            let mut k = 0;
            for (j, col) in self.columns.iter().enumerate() {
                match col {
                    ColumnEncoder::OneHot { categories } => {
                        let pos = categories.iter().position(|c| *c == row[j]).ok_or_else(|| {
                            Error::Data(format!(
                                "row {}, column {:?}: unknown category {:?}",
                                r + 1,
                                self.names[j],
                                row[j]
                            ))
                        })?;
                        inputs[[r, k + pos]] = 1.0;
                        k += categories.len();
                    }
                    ColumnEncoder::Scale { center, scale } => {
                        inputs[[r, k]] = (parse_numeric(&row[j], r, &self.names[j])? - center) / scale;
                        k += 1;
                    }
                }
            }
        }
        Dataset::new(inputs, table.labels.clone(), table.num_classes, names)
    }
}

/// Read, fit the encoder on the whole file, and encode.
pub fn load_csv(
    path: &Path,
    schema: &Schema,
    label_column: Option<&str>,
    normalization: Normalization,
) -> Result<Dataset> {
    let table = read_csv(path, schema, label_column)?;
    Encoder::fit(&table, normalization)?.apply(&table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: T,
    pub validation: T,
    pub warnings: Vec<String>,
}

/// Read, split stratified by label, fit the encoder on the training part and
/// encode both parts with it.
pub fn load_csv_split(
    path: &Path,
    schema: &Schema,
    label_column: Option<&str>,
    normalization: Normalization,
    fraction: f64,
    seed: u64,
) -> Result<Split<Dataset>> {
    let table = read_csv(path, schema, label_column)?;
    let (train_idx, val_idx, warnings) = stratified_indices(&table.labels, table.num_classes, fraction, seed)?;
    let train = table.select(&train_idx);
    let validation = table.select(&val_idx);
    let enc = Encoder::fit(&train, normalization)?;
    Ok(Split {
        train: enc.apply(&train)?,
        validation: enc.apply(&validation)?,
        warnings,
    })
}

/// Per-class training size `floor(fraction·n_q + 1/2)`; a class with a
/// single sample goes entirely to training with a warning.
pub fn stratified_indices(
    labels: &[usize],
    num_classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<String>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y == 0 || y > num_classes {
            return Err(Error::LabelOutOfRange { label: y, num_classes });
        }
        by_class[y - 1].push(i);
    }
    let mut rng = crate::rng::seeded(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut warnings = Vec::new();
    for (q, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() == 1 {
            warnings.push(format!(
                "class {} has a single sample; kept in the training split",
                q + 1
            ));
            train.push(idx[0]);
            continue;
        }
        idx.shuffle(&mut rng);
        let n_train = ((fraction * idx.len() as f64 + 0.5).floor() as usize).min(idx.len());
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val, warnings))
}

pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Split<Dataset>> {
    let (t, v, warnings) = stratified_indices(&dataset.labels, dataset.num_classes, fraction, seed)?;
    Ok(Split {
        train: dataset.select(&t),
        validation: dataset.select(&v),
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub counts: Vec<usize>,
    pub input_dim: usize,
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.1
}

/// The ER training counts in 13 input dimensions.
impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            counts: ER_TRAIN_COUNTS.to_vec(),
            input_dim: 13,
            noise_scale: default_noise(),
            seed: 0,
        }
    }
}

/// Class midpoints `q - 1/2 - Q/2` of the unit ladder `b_q = q - Q/2`.
pub fn ladder_midpoints(num_classes: usize) -> Vec<f64> {
    (1..=num_classes)
        .map(|q| q as f64 - 0.5 - num_classes as f64 / 2.0)
        .collect()
}

/// Synthetic ordinal data.
///
/// Each sample gets a hidden score `t = m_q + noise_scale·ε` at its class
/// midpoint on the unit ladder, padded with standard normal nuisance
/// coordinates to `input_dim` and rotated by a seeded random orthogonal map.
/// Samples are ordered by class. Returns the dataset and the unit input
/// direction along which `t` can be read off.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Dataset, Array1<f64>)> {
    let q = cfg.counts.len();
    if q < 2 {
        return Err(Error::invalid("synthetic data needs at least two classes"));
    }
    if cfg.counts.contains(&0) {
        return Err(Error::invalid("every class count must be at least one"));
    }
    if cfg.input_dim == 0 {
        return Err(Error::invalid("input_dim must be at least 1"));
    }
    if !(cfg.noise_scale >= 0.0 && cfg.noise_scale.is_finite()) {
        return Err(Error::invalid("noise_scale must be nonnegative"));
    }
    let d = cfg.input_dim;
    let mut rng = crate::rng::seeded(cfg.seed);
    let rot = random_orthogonal(d, &mut rng);
    let mids = ladder_midpoints(q);
    let n: usize = cfg.counts.iter().sum();
    let mut hidden = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut r = 0;
    for (c, &count) in cfg.counts.iter().enumerate() {
        for _ in 0..count {
            let eps: f64 = StandardNormal.sample(&mut rng);
            hidden[[r, 0]] = mids[c] + cfg.noise_scale * eps;
            for k in 1..d {
                hidden[[r, k]] = StandardNormal.sample(&mut rng);
            }
            labels.push(c + 1);
            r += 1;
        }
    }
    // x = R v with v the hidden coordinates, so t = (first column of R)·x
    let inputs = hidden.dot(&rot.t());
    let direction = rot.column(0).to_owned();
    let names = (1..=d).map(|k| format!("x_{k}")).collect();
    Ok((Dataset::new(inputs, labels, q, names)?, direction))
}

/// Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut crate::rng::Rng) -> Array2<f64> {
    loop {
        let mut m = Array2::<f64>::from_shape_simple_fn((d, d), || StandardNormal.sample(rng));
        let mut ok = true;
        for j in 0..d {
            for k in 0..j {
                let proj = m.column(j).dot(&m.column(k));
                let prev = m.column(k).to_owned();
                m.column_mut(j).scaled_add(-proj, &prev);
            }
            let nrm = m.column(j).dot(&m.column(j)).sqrt();
            if nrm < 1e-8 {
                ok = false;
                break;
            }
            m.column_mut(j).mapv_inplace(|x| x / nrm);
        }
        if ok {
            return m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clm::{predict_label, Thresholds};
    use crate::metrics::mae;

    fn schema(s: &str) -> Schema {
        Schema::parse(s).unwrap()
    }

    #[test]
    fn encodes_two_row_example() {
        let t = read_csv_str(
            "c,x,y\na,0,1\nb,2,2\n",
            &schema("c: categorical\nx: numeric\ny: label"),
            None,
        )
        .unwrap();
        let d = Encoder::fit(&t, Normalization::Zscore).unwrap().apply(&t).unwrap();
        assert_eq!(d.inputs, ndarray::array![[1.0, 0.0, -1.0], [0.0, 1.0, 1.0]]);
        assert_eq!(d.feature_names, vec!["c=a", "c=b", "x"]);
        assert_eq!(d.labels, vec![1, 2]);
    }

    #[test]
    fn labels_remap_in_order() {
        let s = schema("x: numeric\ny: label");
        let t = read_csv_str("x,y\n0,8\n1,3\n2,5\n3,3\n", &s, None).unwrap();
        assert_eq!(t.labels, vec![3, 1, 2, 1]);
        assert_eq!(t.label_values, vec!["3", "5", "8"]);
        // numeric ordering, not string ordering
        let t = read_csv_str("x,y\n0,10\n1,9\n", &s, None).unwrap();
        assert_eq!(t.labels, vec![2, 1]);
        let t = read_csv_str("x,y\n0,mid\n1,high\n2,low\n", &s, None).unwrap();
        assert_eq!(t.labels, vec![3, 1, 2]);
    }

    #[test]
    fn constant_column_encodes_to_zero() {
        let t = read_csv_str("x,y\n4,1\n4,2\n4,1\n", &schema("x: numeric\ny: label"), None).unwrap();
        let d = Encoder::fit(&t, Normalization::Zscore).unwrap().apply(&t).unwrap();
        assert!(d.inputs.iter().all(|&v| v == 0.0));
        let d = Encoder::fit(&t, Normalization::Minmax).unwrap().apply(&t).unwrap();
        assert!(d.inputs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn minmax_maps_to_unit_interval() {
        let t = read_csv_str("x,y\n2,1\n6,2\n4,1\n", &schema("x: numeric\ny: label"), None).unwrap();
        let d = Encoder::fit(&t, Normalization::Minmax).unwrap().apply(&t).unwrap();
        assert_eq!(d.inputs.column(0).to_vec(), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn errors_name_the_offending_cell() {
        let s = schema("c: categorical\nx: numeric\ny: label");
        let train = read_csv_str("c,x,y\na,0,1\nb,2,2\n", &s, None).unwrap();
        let enc = Encoder::fit(&train, Normalization::Zscore).unwrap();
        let val = read_csv_str("c,x,y\nz,0,1\n", &s, None).unwrap();
        let err = enc.apply(&val).unwrap_err().to_string();
        assert!(err.contains("\"z\""), "{err}");
        let bad = read_csv_str("c,x,y\na,oops,1\n", &s, None).unwrap();
        let err = Encoder::fit(&bad, Normalization::Zscore).unwrap_err().to_string();
        assert!(err.contains("row 1") && err.contains("\"x\""), "{err}");
        assert!(read_csv_str("c,q,y\na,0,1\n", &s, None).is_err());
        assert!(Schema::parse("x numeric").is_err());
        assert!(Schema::parse("x: vector").is_err());
    }

    #[test]
    fn encoding_is_idempotent() {
        let s = schema("c: categorical\nx: numeric\nz: numeric\ny: label");
        let t = read_csv_str("c,x,z,y\na,0,5,1\nb,2,1,2\na,7,3,3\nc,1,1,1\n", &s, None).unwrap();
        let enc = Encoder::fit(&t, Normalization::Zscore).unwrap();
        assert_eq!(enc.apply(&t).unwrap(), enc.apply(&t).unwrap());
        let refit = Encoder::fit(&t, Normalization::Zscore).unwrap();
        assert_eq!(enc, refit);
    }

    #[test]
    fn stratified_split_counts() {
        let labels: Vec<usize> = (0..100).map(|i| i / 25 + 1).collect();
        let (tr, va, w) = stratified_indices(&labels, 4, 0.75, 1).unwrap();
        assert!(w.is_empty());
        let mut counts = [0; 4];
        for &i in &tr {
            counts[labels[i] - 1] += 1;
        }
        // 18.75 rounds to 19
        assert_eq!(counts, [19; 4]);
        assert_eq!(tr.len() + va.len(), 100);

        let labels: Vec<usize> = ER_TRAIN_COUNTS
            .iter()
            .enumerate()
            .flat_map(|(q, &n)| std::iter::repeat_n(q + 1, n))
            .collect();
        for seed in [0, 1, 2] {
            let (tr, _, _) = stratified_indices(&labels, 9, 0.75, seed).unwrap();
            let mut counts = [0usize; 9];
            for &i in &tr {
                counts[labels[i] - 1] += 1;
            }
            for (c, n) in counts.iter().zip(ER_TRAIN_COUNTS) {
                assert!((*c as f64 - 0.75 * n as f64).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn split_seed_changes_membership_only() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3 + 1).collect();
        let (a, _, _) = stratified_indices(&labels, 3, 0.5, 1).unwrap();
        let (b, _, _) = stratified_indices(&labels, 3, 0.5, 2).unwrap();
        assert_ne!(a, b);
        let count = |idx: &[usize], q| idx.iter().filter(|&&i| labels[i] == q).count();
        for q in 1..=3 {
            assert_eq!(count(&a, q), count(&b, q));
        }
    }

    #[test]
    fn singleton_class_goes_to_train() {
        let (tr, va, w) = stratified_indices(&[1, 1, 1, 1, 2], 2, 0.5, 0).unwrap();
        assert!(tr.contains(&4) && !va.contains(&4));
        assert_eq!(w.len(), 1);
        assert!(stratified_indices(&[1, 2], 2, 1.0, 0).is_err());
    }

    #[test]
    fn synth_histogram_and_determinism() {
        let cfg = SynthConfig {
            counts: ER_TRAIN_COUNTS.to_vec(),
            input_dim: 13,
            noise_scale: 0.1,
            seed: 4,
        };
        let (a, _) = synth_generate(&cfg).unwrap();
        assert_eq!(a.class_counts(), ER_TRAIN_COUNTS.to_vec());
        let (b, _) = synth_generate(&cfg).unwrap();
        assert_eq!(a, b);
        let (c, _) = synth_generate(&SynthConfig { seed: 5, ..cfg }).unwrap();
        assert_ne!(a.inputs, c.inputs);
    }

    #[test]
    fn noiseless_synth_is_linearly_separable() {
        let cfg = SynthConfig {
            counts: vec![5, 7, 3, 4],
            input_dim: 6,
            noise_scale: 0.0,
            seed: 9,
        };
        let (d, dir) = synth_generate(&cfg).unwrap();
        let thr = Thresholds::new(vec![-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
        let pred: Vec<usize> = d.inputs.dot(&dir).iter().map(|&t| predict_label(t, &thr)).collect();
        assert_eq!(mae(&pred, &d.labels).unwrap(), 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let (d, _) = synth_generate(&SynthConfig {
            counts: vec![2, 3],
            input_dim: 3,
            noise_scale: 0.5,
            seed: 1,
        })
        .unwrap();
        let text = d.to_csv_string().unwrap();
        let s = Schema::parse(&d.schema_text()).unwrap();
        let t = read_csv_str(&text, &s, None).unwrap();
        assert_eq!(t.labels, d.labels);
        for (row, orig) in t.cells.iter().zip(d.inputs.outer_iter()) {
            for (cell, v) in row.iter().zip(orig) {
                assert_eq!(cell.parse::<f64>().unwrap(), *v);
            }
        }
    }
}
