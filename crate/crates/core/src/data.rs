//! Synthetic two-domain datasets and CSV ingestion.
//!
//! Class means sit evenly spaced on the circle of radius `radius` in the
//! plane of the first two coordinates; features are the class mean plus
//! isotropic Gaussian noise of scale `spread`. The target domain is the same
//! class-conditional distribution with within-class deviations scaled by
//! `covariance_scale`, then rotated by `rotation_deg` in the first two
//! coordinates and translated.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Objective;
use crate::rng::{streams, substream};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    #[default]
    Multiclass,
    Multilabel,
}

impl LabelMode {
    pub fn objective(self) -> Objective {
        match self {
            LabelMode::Multiclass => Objective::Multiclass,
            LabelMode::Multilabel => Objective::Multilabel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Rotation in the plane of coordinates 0 and 1.
    pub rotation_deg: f64,
    /// Added to every target row; empty means no translation.
    #[serde(default)]
    pub translation: Vec<f64>,
    /// Multiplies within-class deviations in the target domain.
    pub covariance_scale: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self { rotation_deg: 0.0, translation: Vec::new(), covariance_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub radius: f64,
    pub spread: f64,
    #[serde(default)]
    pub shift: DomainShift,
    #[serde(default)]
    pub label_mode: LabelMode,
    /// Fraction of source labels replaced by a different class (multiclass)
    /// or flipped bits (multilabel).
    #[serde(default)]
    pub label_noise_rate: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::config("dim must be ≥ 2 so the rotation plane exists"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("samples_per_class must be ≥ 1"));
        }
        if !(self.radius > 0.0) || !(self.spread > 0.0) || !(self.shift.covariance_scale > 0.0) {
            return Err(Error::config("radius, spread and covariance_scale must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return Err(Error::config(format!("label_noise_rate must lie in [0, 1), got {}", self.label_noise_rate)));
        }
        if !self.shift.translation.is_empty() && self.shift.translation.len() != self.dim {
            return Err(Error::config(format!(
                "translation has {} entries for dim {}",
                self.shift.translation.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn class_means(&self) -> Vec<Vec<f64>> {
        (0..self.n_classes)
            .map(|c| {
                let theta = 2.0 * std::f64::consts::PI * c as f64 / self.n_classes as f64;
                let mut m = vec![0.0; self.dim];
                m[0] = self.radius * theta.cos();
                m[1] = self.radius * theta.sin();
                m
            })
            .collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes).map(|c| format!("c{c}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Multiclass(Vec<usize>),
    /// `rows × classes` matrix of 0/1.
    Multilabel(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Labels,
    pub class_names: Vec<String>,
    pub domain: String,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Labels, class_names: Vec<String>, domain: impl Into<String>) -> Result<Self> {
        let n_classes = class_names.len();
        match &labels {
            Labels::Multiclass(l) => {
                if l.len() != features.rows() {
                    return Err(Error::shape(format!("{} labels for {} rows", l.len(), features.rows())));
                }
                if let Some(bad) = l.iter().find(|&&c| c >= n_classes) {
                    return Err(Error::config(format!("label {bad} outside {n_classes} classes")));
                }
            }
            Labels::Multilabel(m) => {
                if m.rows() != features.rows() || m.cols() != n_classes {
                    return Err(Error::shape(format!(
                        "label matrix {:?} for {} rows and {n_classes} classes",
                        m.shape(),
                        features.rows()
                    )));
                }
                if m.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::config("multilabel entries must be 0 or 1"));
                }
            }
        }
        Ok(Self { features, labels, class_names, domain: domain.into() })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn label_mode(&self) -> LabelMode {
        match self.labels {
            Labels::Multiclass(_) => LabelMode::Multiclass,
            Labels::Multilabel(_) => LabelMode::Multilabel,
        }
    }

    /// One-hot (multiclass) or binary (multilabel) targets.
    pub fn targets(&self) -> Matrix {
        match &self.labels {
            Labels::Multiclass(l) => {
                let mut m = Matrix::zeros(l.len(), self.n_classes());
                for (i, &c) in l.iter().enumerate() {
                    m[(i, c)] = 1.0;
                }
                m
            }
            Labels::Multilabel(m) => m.clone(),
        }
    }

    /// Class index per row; for multilabel data the first positive class
    /// (or 0 when none).
    pub fn primary_labels(&self) -> Vec<usize> {
        match &self.labels {
            Labels::Multiclass(l) => l.clone(),
            Labels::Multilabel(m) => m.row_iter().map(|r| r.iter().position(|&v| v == 1.0).unwrap_or(0)).collect(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let labels = match &self.labels {
            Labels::Multiclass(l) => Labels::Multiclass(indices.iter().map(|&i| l[i]).collect()),
            Labels::Multilabel(m) => Labels::Multilabel(m.select_rows(indices)),
        };
        Dataset {
            features: self.features.select_rows(indices),
            labels,
            class_names: self.class_names.clone(),
            domain: self.domain.clone(),
        }
    }
}

/// Source and target domains for `spec`. Source labels carry the configured
/// noise; target labels are clean.
pub fn generate_pair(spec: &DomainSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let source = generate_domain(spec, false)?;
    let target = generate_domain(spec, true)?;
    Ok((source, target))
}

fn generate_domain(spec: &DomainSpec, shifted: bool) -> Result<Dataset> {
    let tag = if shifted { "target" } else { "source" };
    let mut rng = substream(spec.seed, streams::DATA, u64::from(shifted));
    let means = spec.class_means();
    let n = spec.n_classes * spec.samples_per_class;
    let scale = if shifted { spec.spread * spec.shift.covariance_scale } else { spec.spread };
    let (sin, cos) = spec.shift.rotation_deg.to_radians().sin_cos();
    let mut features = Matrix::zeros(n, spec.dim);
    let mut primary = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.n_classes;
        let row = features.row_mut(i);
        for (v, m) in row.iter_mut().zip(&means[c]) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = m + scale * z;
        }
        if shifted {
            let (x0, x1) = (row[0], row[1]);
            row[0] = cos * x0 - sin * x1;
            row[1] = sin * x0 + cos * x1;
            for (v, t) in row.iter_mut().zip(&spec.shift.translation) {
                *v += t;
            }
        }
        primary.push(c);
    }
    let noise = if shifted { 0.0 } else { spec.label_noise_rate };
    let labels = match spec.label_mode {
        LabelMode::Multiclass => {
            let mut labels = primary;
            for l in labels.iter_mut() {
                if rng.random::<f64>() < noise {
                    let other = rng.random_range(0..spec.n_classes - 1);
                    *l = if other >= *l { other + 1 } else { other };
                }
            }
            Labels::Multiclass(labels)
        }
        LabelMode::Multilabel => {
            // primary class always positive; class j positive with
            // probability exp(-|x - μ_j|² / 2r²) on the unshifted point
            let mut m = Matrix::zeros(n, spec.n_classes);
            for i in 0..n {
                let c = primary[i];
                let x = unshift(spec, features.row(i), shifted);
                for (j, mu) in means.iter().enumerate() {
                    let positive = if j == c {
                        true
                    } else {
                        let d2: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                        rng.random::<f64>() < (-d2 / (2.0 * spec.radius * spec.radius)).exp()
                    };
                    let flipped = rng.random::<f64>() < noise;
                    m[(i, j)] = f64::from(u8::from(positive ^ flipped));
                }
            }
            Labels::Multilabel(m)
        }
    };
    Dataset::new(features, labels, spec.class_names(), tag)
}

fn unshift(spec: &DomainSpec, row: &[f64], shifted: bool) -> Vec<f64> {
    let mut x = row.to_vec();
    if shifted {
        for (v, t) in x.iter_mut().zip(&spec.shift.translation) {
            *v -= t;
        }
        let (sin, cos) = spec.shift.rotation_deg.to_radians().sin_cos();
        let (x0, x1) = (x[0], x[1]);
        x[0] = cos * x0 + sin * x1;
        x[1] = -sin * x0 + cos * x1;
    }
    x
}

/// Label vocabulary for CSV parsing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsvSchema {
    /// Known class names in index order. When absent, multiclass labels are
    /// indexed in first-seen order.
    pub classes: Option<Vec<String>>,
}

/// Reads `feat_*` columns plus either a `label` column or `y_<class>` columns.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let domain = path.as_ref().file_stem().and_then(|s| s.to_str()).unwrap_or("data").to_string();
    parse_csv(&text, schema, &domain)
}

pub fn parse_csv(text: &str, schema: &CsvSchema, domain: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
    let mut feat_cols = Vec::new();
    let mut label_col = None;
    let mut y_cols: Vec<(usize, String)> = Vec::new();
    for (i, name) in header.iter().enumerate() {
        if let Some(idx) = name.strip_prefix("feat_") {
            let idx: usize =
                idx.parse().map_err(|_| Error::Parse { line: 1, message: format!("bad feature column `{name}`") })?;
            feat_cols.push((idx, i));
        } else if name == "label" {
            label_col = Some(i);
        } else if let Some(class) = name.strip_prefix("y_") {
            y_cols.push((i, class.to_string()));
        } else {
            return Err(Error::Parse { line: 1, message: format!("unexpected column `{name}`") });
        }
    }
    feat_cols.sort_unstable();
    if feat_cols.iter().enumerate().any(|(k, &(idx, _))| idx != k) || feat_cols.is_empty() {
        return Err(Error::Parse { line: 1, message: "feature columns must be feat_0..feat_{d-1}".into() });
    }
    if label_col.is_some() == !y_cols.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "expected exactly one of a `label` column or `y_<class>` columns".into(),
        });
    }
    let multilabel = !y_cols.is_empty();
    let mut class_names: Vec<String> = if multilabel {
        let names: Vec<String> = y_cols.iter().map(|(_, n)| n.clone()).collect();
        if let Some(known) = &schema.classes {
            if known != &names {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("label columns {names:?} differ from {known:?}"),
                });
            }
        }
        names
    } else {
        schema.classes.clone().unwrap_or_default()
    };
    let mut lookup: HashMap<String, usize> = class_names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    let d = feat_cols.len();
    let mut data = Vec::new();
    let mut class_labels = Vec::new();
    let mut binary = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse { line, message: e.to_string() }
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        for &(_, col) in &feat_cols {
            let raw = record.get(col).unwrap_or("");
            let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric feature `{raw}` in column {}", &header[col]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, message: format!("non-finite feature `{raw}`") });
            }
            data.push(v);
        }
        if let Some(col) = label_col {
            let name = record.get(col).unwrap_or("").trim().to_string();
            let idx = match lookup.get(&name) {
                Some(&i) => i,
                None if schema.classes.is_none() => {
                    class_names.push(name.clone());
                    lookup.insert(name, class_names.len() - 1);
                    class_names.len() - 1
                }
                None => {
                    return Err(Error::Parse { line, message: format!("unknown label `{name}`") });
                }
            };
            class_labels.push(idx);
        } else {
            for (col, _) in &y_cols {
                let raw = record.get(*col).unwrap_or("").trim();
                let v = match raw {
                    "0" => 0.0,
                    "1" => 1.0,
                    _ => return Err(Error::Parse { line, message: format!("label `{raw}` is not 0/1") }),
                };
                binary.push(v);
            }
        }
    }
    let n = data.len() / d;
    let features = Matrix::from_vec(n, d, data)?;
    let labels = if multilabel {
        Labels::Multilabel(Matrix::from_vec(n, class_names.len(), binary)?)
    } else {
        Labels::Multiclass(class_labels)
    };
    Dataset::new(features, labels, class_names, domain)
}

/// Inverse of [`parse_csv`]; floats use shortest round-trip formatting.
pub fn to_csv(dataset: &Dataset) -> String {
    let mut out = String::new();
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("feat_{j}")).collect();
    match &dataset.labels {
        Labels::Multiclass(_) => header.push("label".into()),
        Labels::Multilabel(_) => header.extend(dataset.class_names.iter().map(|c| format!("y_{c}"))),
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..dataset.len() {
        let mut fields: Vec<String> = dataset.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        match &dataset.labels {
            Labels::Multiclass(l) => fields.push(dataset.class_names[l[i]].clone()),
            Labels::Multilabel(m) => fields.extend(m.row(i).iter().map(|&v| format!("{}", v as u8))),
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_csv(dataset))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec() -> DomainSpec {
        DomainSpec {
            n_classes: 3,
            dim: 4,
            samples_per_class: 50,
            radius: 3.0,
            spread: 1.0,
            shift: DomainShift::default(),
            label_mode: LabelMode::Multiclass,
            label_noise_rate: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_pair(&small_spec()).unwrap();
        let b = generate_pair(&small_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec();
        other.seed = 2;
        assert_ne!(generate_pair(&other).unwrap().0, a.0);
    }

    #[test]
    fn spec_validation() {
        let mut s = small_spec();
        s.dim = 1;
        assert!(generate_pair(&s).is_err());
        let mut s = small_spec();
        s.label_noise_rate = 1.0;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.shift.translation = vec![1.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn rotation_moves_the_class_means() {
        let mut s = small_spec();
        s.samples_per_class = 2000;
        s.shift.rotation_deg = 90.0;
        let (_, target) = generate_pair(&s).unwrap();
        let rows: Vec<usize> = (0..target.len()).filter(|i| i % 3 == 0).collect();
        let m = target.features.select_rows(&rows).column_means();
        // class 0 mean (3, 0) rotated by 90° is (0, 3)
        assert!(m[0].abs() < 0.1 && (m[1] - 3.0).abs() < 0.1, "{m:?}");
    }

    #[test]
    fn two_row_file_parses() {
        let text = "feat_0,feat_1,label\n1.5,2,a\n-3,4e-1,b\n";
        let d = parse_csv(text, &CsvSchema::default(), "t").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.class_names, vec!["a", "b"]);
        assert_eq!(d.features.row(1), &[-3.0, 0.4]);
    }

    #[test]
    fn bad_feature_names_its_line() {
        let mut text = String::from("feat_0,feat_1,label\n");
        for _ in 0..5 {
            text.push_str("1,2,a\n");
        }
        text.push_str("1,oops,a\n");
        match parse_csv(&text, &CsvSchema::default(), "t") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ragged_and_unknown_labels_fail() {
        let ragged = "feat_0,label\n1,a\n1,2,a\n";
        assert!(matches!(parse_csv(ragged, &CsvSchema::default(), "t"), Err(Error::Parse { line: 3, .. })));
        let schema = CsvSchema { classes: Some(vec!["a".into()]) };
        assert!(matches!(parse_csv("feat_0,label\n1,b\n", &schema, "t"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn multilabel_round_trip() {
        let mut s = small_spec();
        s.label_mode = LabelMode::Multilabel;
        s.label_noise_rate = 0.05;
        let (src, _) = generate_pair(&s).unwrap();
        let back = parse_csv(&to_csv(&src), &CsvSchema::default(), "source").unwrap();
        assert_eq!(back, src);
    }
}
