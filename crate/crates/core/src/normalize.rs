//! Feature normalization: per-dimension whitening with training statistics,
//! then projection onto the unit hypersphere.

use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::features::{FeatureError, FeatureMatrix};

pub const DEFAULT_EPSILON: f64 = 1e-8;
const NORM_MAGIC: &str = "AEC-NORM v1";

#[derive(Debug, Error)]
pub enum NormError {
    #[error("need at least 2 training rows, got {0}")]
    TooFewRows(usize),
    #[error("non-finite input at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("vector has zero norm{}", row.map(|r| format!(" (row {r})")).unwrap_or_default())]
    ZeroNorm { row: Option<usize> },
    #[error("malformed normalization file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Per-dimension training mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub epsilon: f64,
}

impl NormStats {
    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    /// `(x - mean) / (std + epsilon)` without length normalization.
    pub fn whiten(&self, x: &[f64]) -> Result<Vec<f64>, NormError> {
        if x.len() != self.dims() {
            return Err(NormError::DimMismatch {
                expected: self.dims(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / (s + self.epsilon))
            .collect())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), NormError> {
        writeln!(w, "{NORM_MAGIC} dim={}", self.dims())?;
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        writeln!(w, "mean: {}", join(&self.mean))?;
        writeln!(w, "std: {}", join(&self.std))?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, NormError> {
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String, NormError> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| NormError::Format(format!("missing {what} line")))
        };
        let header = next("header")?;
        let dim: usize = header
            .strip_prefix(NORM_MAGIC)
            .and_then(|rest| rest.trim().strip_prefix("dim="))
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| NormError::Format(format!("bad header {header:?}")))?;
        let parse = |line: String, key: &str| -> Result<Vec<f64>, NormError> {
            let body = line
                .strip_prefix(key)
                .ok_or_else(|| NormError::Format(format!("expected {key:?} line")))?;
            let v = body
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| NormError::Format(e.to_string()))?;
            if v.len() != dim {
                return Err(NormError::DimMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            Ok(v)
        };
        let mean = parse(next("mean")?, "mean:")?;
        let std = parse(next("std")?, "std:")?;
        if std.iter().any(|s| !(*s >= 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(NormError::Format("invalid statistics".into()));
        }
        Ok(Self {
            mean,
            std,
            epsilon: DEFAULT_EPSILON,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NormError> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NormError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

pub fn fit_norm_stats(train: &FeatureMatrix) -> Result<NormStats, NormError> {
    let n = train.rows();
    if n < 2 {
        return Err(NormError::TooFewRows(n));
    }
    let d = train.dims();
    let mut mean = vec![0.0; d];
    for (i, row) in train.iter_rows().enumerate() {
        for (j, (m, v)) in mean.iter_mut().zip(row).enumerate() {
            if !v.is_finite() {
                return Err(NormError::NonFinite { row: i, col: j });
            }
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in train.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    Ok(NormStats {
        mean,
        std: var.into_iter().map(|s| (s / n as f64).sqrt()).collect(),
        epsilon: DEFAULT_EPSILON,
    })
}

pub fn length_normalize(x: &[f64]) -> Result<Vec<f64>, NormError> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(NormError::ZeroNorm { row: None });
    }
    Ok(x.iter().map(|v| v / norm).collect())
}

/// Whitening followed by length normalization of a single vector.
pub fn normalize_vector(x: &[f64], stats: &NormStats) -> Result<Vec<f64>, NormError> {
    length_normalize(&stats.whiten(x)?)
}

/// Whitening followed by length normalization of every row.
pub fn apply_normalization(x: &FeatureMatrix, stats: &NormStats) -> Result<FeatureMatrix, NormError> {
    if x.dims() != stats.dims() {
        return Err(NormError::DimMismatch {
            expected: stats.dims(),
            got: x.dims(),
        });
    }
    let mut values = Vec::with_capacity(x.values().len());
    for (i, row) in x.iter_rows().enumerate() {
        let out = normalize_vector(row, stats).map_err(|e| match e {
            NormError::ZeroNorm { .. } => NormError::ZeroNorm { row: Some(i) },
            other => other,
        })?;
        values.extend(out);
    }
    Ok(FeatureMatrix::new(x.rows(), x.dims(), values, x.role())?)
}
