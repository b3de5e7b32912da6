//! Labeled records, synthetic data generation, and CSV I/O.
//!
//! A [`Dataset`] is a flat list of [`Record`]s with a shared feature
//! dimension and class count. Synthetic data comes from class-conditional
//! isotropic Gaussians; a configurable fraction of records is drawn with an
//! inflated covariance and tagged as outliers in the id itself, so outlier
//! status survives any serialization boundary.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::rng_from_seed;
use crate::util::{csv_field, hex};

/// Suffix appended to the ids of records drawn from the outlier distribution.
pub const OUTLIER_MARKER: &str = "#out";

/// Outlier records are sampled with their noise scale inflated by this factor.
pub const OUTLIER_FEATURE_SCALE: f64 = 5.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("dataset is empty")]
    Empty,
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("split fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv parse error at line {line}: {msg}")]
    Csv { line: u64, msg: String },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One labeled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub features: Vec<f64>,
    pub label: usize,
}

impl Record {
    /// True when the id carries the outlier marker.
    pub fn is_outlier(&self) -> bool {
        self.id.ends_with(OUTLIER_MARKER)
    }
}

/// A collection of records sharing one feature dimension and class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    num_classes: usize,
    records: Vec<Record>,
}

impl Dataset {
    /// Validates shape constraints: `dim >= 1`, `num_classes >= 2`, every
    /// record has `dim` features and a label below `num_classes`, ids unique.
    pub fn new(dim: usize, num_classes: usize, records: Vec<Record>) -> Result<Self> {
        if dim == 0 {
            return Err(DatasetError::Invalid("feature dimension must be >= 1".into()));
        }
        if num_classes < 2 {
            return Err(DatasetError::Invalid(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let mut ids = BTreeSet::new();
        for r in &records {
            if r.features.len() != dim {
                return Err(DatasetError::Invalid(format!(
                    "record {} has {} features, expected {dim}",
                    r.id,
                    r.features.len()
                )));
            }
            if r.label >= num_classes {
                return Err(DatasetError::Invalid(format!(
                    "record {} has label {} but only {num_classes} classes exist",
                    r.id, r.label
                )));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(DatasetError::Invalid(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(Self { dim, num_classes, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.id.as_str()).collect()
    }

    /// New dataset containing the records at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut records = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = self.records.get(i).ok_or_else(|| {
                DatasetError::Invalid(format!("subset index {i} out of range ({} records)", self.len()))
            })?;
            records.push(r.clone());
        }
        Self::new(self.dim, self.num_classes, records)
    }

    /// Splits off the first `count` records (deterministic prefix partition).
    pub fn split_prefix(&self, count: usize) -> Result<(Self, Self)> {
        if count > self.len() {
            return Err(DatasetError::Invalid(format!(
                "cannot take {count} records from a dataset of {}",
                self.len()
            )));
        }
        let head = Self::new(self.dim, self.num_classes, self.records[..count].to_vec())?;
        let tail = Self::new(self.dim, self.num_classes, self.records[count..].to_vec())?;
        Ok((head, tail))
    }

    /// SHA-256 over the canonical CSV bytes plus the class count (the CSV
    /// header alone does not carry it). Hex encoded.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("classes={};", self.num_classes).as_bytes());
        hasher.update(self.to_csv_string().as_bytes());
        hex(&hasher.finalize())
    }

    /// Canonical CSV encoding: header `id,label,f0..f{dim-1}`, one row per
    /// record in order, floats printed with the shortest representation that
    /// parses back to the same value.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str("id,label");
        for d in 0..self.dim {
            let _ = write!(out, ",f{d}");
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&csv_field(&r.id));
            let _ = write!(out, ",{}", r.label);
            for v in &r.features {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Parameters for synthetic class-conditional Gaussian data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// One mean vector per class, each of length `dim`.
    pub class_means: Vec<Vec<f64>>,
    /// Isotropic noise scale (standard deviation per coordinate), > 0.
    pub cov_scale: f64,
    /// Fraction of records drawn as outliers, in [0, 1).
    pub outlier_fraction: f64,
    pub num_records: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(DatasetError::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.dim == 0 {
            return Err(DatasetError::InvalidSpec("dim must be >= 1".into()));
        }
        if self.class_means.len() != self.num_classes {
            return Err(DatasetError::InvalidSpec(format!(
                "{} class means for {} classes",
                self.class_means.len(),
                self.num_classes
            )));
        }
        for (c, m) in self.class_means.iter().enumerate() {
            if m.len() != self.dim {
                return Err(DatasetError::InvalidSpec(format!(
                    "class {c} mean has length {}, expected {}",
                    m.len(),
                    self.dim
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(DatasetError::InvalidSpec(format!("class {c} mean is not finite")));
            }
        }
        if !(self.cov_scale.is_finite() && self.cov_scale > 0.0) {
            return Err(DatasetError::InvalidSpec(format!(
                "cov_scale must be a positive finite number, got {}",
                self.cov_scale
            )));
        }
        if !(self.outlier_fraction >= 0.0 && self.outlier_fraction < 1.0) {
            return Err(DatasetError::InvalidSpec(format!(
                "outlier_fraction must lie in [0, 1), got {}",
                self.outlier_fraction
            )));
        }
        if self.num_records == 0 {
            return Err(DatasetError::InvalidSpec("num_records must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draws `spec.num_records` records. Exactly `floor(outlier_fraction * n)`
/// of them are outliers: same class mean, noise scale inflated by
/// [`OUTLIER_FEATURE_SCALE`], id suffixed with [`OUTLIER_MARKER`].
///
/// Draw order is fixed (outlier index choice, then per record: label, then
/// `dim` noise values), so a spec and seed pin the dataset bit for bit.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.num_records;
    let mut rng = rng_from_seed(spec.seed);

    let num_outliers = (spec.outlier_fraction * n as f64).floor() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    let outliers: BTreeSet<usize> = indices.into_iter().take(num_outliers).collect();

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let label = rng.random_range(0..spec.num_classes);
        let scale = if outliers.contains(&i) {
            spec.cov_scale * OUTLIER_FEATURE_SCALE
        } else {
            spec.cov_scale
        };
        let mut features = Vec::with_capacity(spec.dim);
        for d in 0..spec.dim {
            let z: f64 = rng.sample(StandardNormal);
            features.push(spec.class_means[label][d] + scale * z);
        }
        let mut id = format!("r{i:06}");
        if outliers.contains(&i) {
            id.push_str(OUTLIER_MARKER);
        }
        records.push(Record { id, features, label });
    }
    Dataset::new(spec.dim, spec.num_classes, records)
}

/// Random partition: the first part gets `floor(fraction * n)` records chosen
/// uniformly without replacement; both parts keep the original record order.
pub fn split(d: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if d.is_empty() {
        return Err(DatasetError::Empty);
    }
    if !(fraction.is_finite() && fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::BadFraction(fraction));
    }
    let n = d.len();
    let k = (fraction * n as f64).floor() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng_from_seed(seed));
    let chosen: BTreeSet<usize> = indices.into_iter().take(k).collect();

    let mut first = Vec::with_capacity(k);
    let mut second = Vec::with_capacity(n - k);
    for (i, r) in d.records.iter().enumerate() {
        if chosen.contains(&i) {
            first.push(r.clone());
        } else {
            second.push(r.clone());
        }
    }
    Ok((
        Dataset::new(d.dim, d.num_classes, first)?,
        Dataset::new(d.dim, d.num_classes, second)?,
    ))
}

/// Parses a dataset from CSV text. The header must be exactly
/// `id,label,f0..f{dim-1}`; the class count is inferred as
/// `max(label) + 1`, floored at 2, since the format does not carry it.
pub fn from_csv_str(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| csv_err(&e, 1))?
        .clone();
    let dim = validate_header(&headers)?;

    let mut records = Vec::new();
    let mut max_label = 0usize;
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            csv_err(&e, line)
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != dim + 2 {
            return Err(DatasetError::Csv {
                line,
                msg: format!("expected {} fields, found {}", dim + 2, row.len()),
            });
        }
        let id = row[0].to_string();
        if id.is_empty() {
            return Err(DatasetError::Csv { line, msg: "empty record id".into() });
        }
        let label: usize = row[1].parse().map_err(|_| DatasetError::Csv {
            line,
            msg: format!("label {:?} is not a non-negative integer", &row[1]),
        })?;
        max_label = max_label.max(label);
        let mut features = Vec::with_capacity(dim);
        for d in 0..dim {
            let v: f64 = row[d + 2].parse().map_err(|_| DatasetError::Csv {
                line,
                msg: format!("field f{d} value {:?} is not a float", &row[d + 2]),
            })?;
            features.push(v);
        }
        records.push(Record { id, features, label });
    }
    let num_classes = (max_label + 1).max(2);
    Dataset::new(dim, num_classes, records)
}

fn validate_header(headers: &csv::StringRecord) -> Result<usize> {
    if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "label" {
        return Err(DatasetError::Csv {
            line: 1,
            msg: "header must start with id,label and carry at least one feature column".into(),
        });
    }
    let dim = headers.len() - 2;
    for d in 0..dim {
        let expected = format!("f{d}");
        if &headers[d + 2] != expected.as_str() {
            return Err(DatasetError::Csv {
                line: 1,
                msg: format!("feature column {} is named {:?}, expected {expected:?}", d + 2, &headers[d + 2]),
            });
        }
    }
    Ok(dim)
}

fn csv_err(e: &csv::Error, line: u64) -> DatasetError {
    DatasetError::Csv { line, msg: e.to_string() }
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_csv_str(&text)
}

pub fn write_csv(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, d.to_csv_string()).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Checks that a dataset fits an externally declared shape; used when records
/// must conform to a model rather than to their own inferred class count.
pub fn check_conforms(d: &Dataset, dim: usize, num_classes: usize) -> Result<()> {
    if d.dim != dim {
        return Err(DatasetError::Invalid(format!(
            "dataset has dimension {}, expected {dim}",
            d.dim
        )));
    }
    for r in &d.records {
        if r.label >= num_classes {
            return Err(DatasetError::Invalid(format!(
                "record {} has label {} but the model only has {num_classes} classes",
                r.id, r.label
            )));
        }
    }
    Ok(())
}
