//! Extreme learning machines: kernel ridge on one-hot targets, and a random
//! sigmoid hidden layer with closed-form output weights.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::ladder::{argmax, get_f64s, get_u64};

pub const DEFAULT_C: f64 = 100.0;
pub const DEFAULT_HIDDEN_MULTIPLIER: usize = 10;
const ELM_MAGIC: &[u8] = b"AEC-ELM v1\n";

#[derive(Debug, Error)]
pub enum ElmError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("no training rows")]
    Empty,
    #[error("{labels} labels for {rows} rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("system is not positive definite (non-finite kernel values?)")]
    Factorization,
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Linear,
    Polynomial,
    Rbf,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Linear => "linear",
            KernelKind::Polynomial => "polynomial",
            KernelKind::Rbf => "rbf",
        }
    }

    fn tag(self) -> u64 {
        match self {
            KernelKind::Linear => 0,
            KernelKind::Polynomial => 1,
            KernelKind::Rbf => 2,
        }
    }

    fn from_tag(t: u64) -> Option<Self> {
        [KernelKind::Linear, KernelKind::Polynomial, KernelKind::Rbf]
            .into_iter()
            .find(|k| k.tag() == t)
    }
}

impl std::str::FromStr for KernelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(KernelKind::Linear),
            "polynomial" | "poly" => Ok(KernelKind::Polynomial),
            "rbf" => Ok(KernelKind::Rbf),
            _ => Err(format!("unknown kernel {s:?} (linear, polynomial, rbf)")),
        }
    }
}

/// `gamma = None` means `1 / d`, fixed when a model is trained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub gamma: Option<f64>,
    pub degree: u32,
    pub coef0: f64,
}

impl KernelSpec {
    pub fn linear() -> Self {
        Self {
            kind: KernelKind::Linear,
            gamma: None,
            degree: 2,
            coef0: 1.0,
        }
    }

    pub fn polynomial(degree: u32, coef0: f64) -> Self {
        Self {
            kind: KernelKind::Polynomial,
            degree,
            coef0,
            ..Self::linear()
        }
    }

    pub fn rbf(gamma: Option<f64>) -> Self {
        Self {
            kind: KernelKind::Rbf,
            gamma,
            ..Self::linear()
        }
    }

    pub fn of_kind(kind: KernelKind) -> Self {
        Self { kind, ..Self::linear() }
    }

    pub fn validate(&self) -> Result<(), ElmError> {
        if let Some(g) = self.gamma {
            if !(g > 0.0) || !g.is_finite() {
                return Err(ElmError::Param(format!("kernel gamma must be positive, got {g}")));
            }
        }
        if self.degree < 1 {
            return Err(ElmError::Param("polynomial degree must be at least 1".into()));
        }
        if !self.coef0.is_finite() {
            return Err(ElmError::Param("coef0 must be finite".into()));
        }
        Ok(())
    }

    /// Copy with the default width filled in for input dimension `d`.
    pub fn resolved(&self, d: usize) -> Self {
        Self {
            gamma: Some(self.gamma.unwrap_or(1.0 / d.max(1) as f64)),
            ..*self
        }
    }

    fn gamma_or_default(&self, d: usize) -> f64 {
        self.gamma.unwrap_or(1.0 / d.max(1) as f64)
    }
}

pub fn eval_kernel(x: &[f64], y: &[f64], spec: &KernelSpec) -> Result<f64, ElmError> {
    if x.len() != y.len() {
        return Err(ElmError::DimMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(kernel_unchecked(x, y, spec))
}

pub(crate) fn kernel_unchecked(x: &[f64], y: &[f64], spec: &KernelSpec) -> f64 {
    match spec.kind {
        KernelKind::Linear => dot(x, y),
        KernelKind::Polynomial => (dot(x, y) + spec.coef0).powi(spec.degree as i32),
        KernelKind::Rbf => {
            let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            (-spec.gamma_or_default(x.len()) * d2).exp()
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// `K[i][j] = k(a_i, b_j)`.
pub fn kernel_matrix(a: &FeatureMatrix, b: &FeatureMatrix, spec: &KernelSpec) -> DMatrix<f64> {
    DMatrix::from_fn(a.rows(), b.rows(), |i, j| kernel_unchecked(a.row(i), b.row(j), spec))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ElmModel {
    Kernel {
        train_x: FeatureMatrix,
        /// `n x n_classes`
        alpha: DMatrix<f64>,
        spec: KernelSpec,
        c: f64,
    },
    Random {
        /// `L x d`
        a: DMatrix<f64>,
        b: Vec<f64>,
        /// `L x n_classes`
        beta: DMatrix<f64>,
        c: f64,
    },
}

impl ElmModel {
    pub fn input_dim(&self) -> usize {
        match self {
            ElmModel::Kernel { train_x, .. } => train_x.dims(),
            ElmModel::Random { a, .. } => a.ncols(),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            ElmModel::Kernel { alpha, .. } => alpha.ncols(),
            ElmModel::Random { beta, .. } => beta.ncols(),
        }
    }
}

fn check_training(x: &FeatureMatrix, labels: &[usize], n_classes: usize, c: f64) -> Result<(), ElmError> {
    if x.rows() == 0 {
        return Err(ElmError::Empty);
    }
    if labels.len() != x.rows() {
        return Err(ElmError::LabelCount {
            labels: labels.len(),
            rows: x.rows(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(ElmError::Label { label, n_classes });
    }
    if !(c > 0.0) {
        return Err(ElmError::Param(format!("C must be positive, got {c}")));
    }
    Ok(())
}

pub fn one_hot(labels: &[usize], n_classes: usize) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(labels.len(), n_classes);
    for (i, &y) in labels.iter().enumerate() {
        t[(i, y)] = 1.0;
    }
    t
}

fn solve_spd(mut m: DMatrix<f64>, rhs: &DMatrix<f64>, c: f64) -> Result<DMatrix<f64>, ElmError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(ElmError::Factorization);
    }
    for i in 0..m.nrows() {
        m[(i, i)] += 1.0 / c;
    }
    let chol = Cholesky::new(m).ok_or(ElmError::Factorization)?;
    Ok(chol.solve(rhs))
}

/// Solves `(K + I/C) alpha = T` with `T` one-hot over `n_classes` columns.
pub fn train_kernel_elm(
    x: &FeatureMatrix,
    labels: &[usize],
    n_classes: usize,
    spec: &KernelSpec,
    c: f64,
) -> Result<ElmModel, ElmError> {
    check_training(x, labels, n_classes, c)?;
    spec.validate()?;
    let spec = spec.resolved(x.dims());
    let k = kernel_matrix(x, x, &spec);
    let alpha = solve_spd(k, &one_hot(labels, n_classes), c)?;
    Ok(ElmModel::Kernel {
        train_x: x.clone(),
        alpha,
        spec,
        c,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn hidden(a: &DMatrix<f64>, b: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut h = x * a.transpose();
    for (j, mut col) in h.column_iter_mut().enumerate() {
        col.apply(|v| *v = sigmoid(*v + b[j]));
    }
    h
}

/// Random sigmoid hidden layer of `hidden_multiplier * d` units; solves
/// `(H^T H + I/C) beta = H^T T`.
pub fn train_random_elm(
    x: &FeatureMatrix,
    labels: &[usize],
    n_classes: usize,
    hidden_multiplier: usize,
    c: f64,
    seed: u64,
) -> Result<ElmModel, ElmError> {
    check_training(x, labels, n_classes, c)?;
    if hidden_multiplier == 0 {
        return Err(ElmError::Param("hidden multiplier must be positive".into()));
    }
    let (d, l) = (x.dims(), hidden_multiplier * x.dims());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(l, d, |_, _| rng.random_range(-1.0..1.0));
    let b: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h = hidden(&a, &b, &x.to_dmatrix());
    let ht = h.transpose();
    let rhs = &ht * one_hot(labels, n_classes);
    let beta = solve_spd(&ht * &h, &rhs, c)?;
    Ok(ElmModel::Random { a, b, beta, c })
}

/// Raw scores and argmax classes (ties to the lower index).
pub fn predict_elm(model: &ElmModel, x: &FeatureMatrix) -> Result<(Vec<usize>, DMatrix<f64>), ElmError> {
    if x.dims() != model.input_dim() {
        return Err(ElmError::DimMismatch {
            expected: model.input_dim(),
            got: x.dims(),
        });
    }
    let scores = match model {
        ElmModel::Kernel {
            train_x, alpha, spec, ..
        } => kernel_matrix(x, train_x, spec) * alpha,
        ElmModel::Random { a, b, beta, .. } => hidden(a, b, &x.to_dmatrix()) * beta,
    };
    let classes = (0..scores.nrows())
        .map(|i| argmax(scores.row(i).iter().copied()))
        .collect();
    Ok((classes, scores))
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s<W: Write>(w: &mut W, v: &[f64]) -> std::io::Result<()> {
    v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))
}

pub(crate) fn write_kernel<W: Write>(w: &mut W, spec: &KernelSpec) -> std::io::Result<()> {
    put_u64(w, spec.kind.tag())?;
    put_u64(w, spec.degree as u64)?;
    put_f64s(w, &[spec.gamma.unwrap_or(0.0), spec.coef0])
}

pub(crate) fn read_kernel<R: Read>(r: &mut R) -> Result<KernelSpec, String> {
    let kind = get_u64(r).map_err(|e| e.to_string())?;
    let kind = KernelKind::from_tag(kind).ok_or_else(|| format!("unknown kernel tag {kind}"))?;
    let degree = get_u64(r).map_err(|e| e.to_string())?;
    let mut g = [0.0; 2];
    get_f64s(r, &mut g).map_err(|e| e.to_string())?;
    let spec = KernelSpec {
        kind,
        gamma: (g[0] > 0.0).then_some(g[0]),
        degree: u32::try_from(degree).map_err(|_| "bad degree".to_string())?,
        coef0: g[1],
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

pub(crate) fn read_matrix<R: Read>(r: &mut R, max: usize) -> Result<DMatrix<f64>, String> {
    let rows = get_u64(r).map_err(|e| e.to_string())? as usize;
    let cols = get_u64(r).map_err(|e| e.to_string())? as usize;
    if rows.checked_mul(cols).is_none_or(|n| n > max) {
        return Err(format!("implausible matrix shape {rows}x{cols}"));
    }
    let mut m = DMatrix::zeros(rows, cols);
    get_f64s(r, m.as_mut_slice()).map_err(|e| e.to_string())?;
    Ok(m)
}

pub(crate) fn write_matrix<W: Write>(w: &mut W, m: &DMatrix<f64>) -> std::io::Result<()> {
    put_u64(w, m.nrows() as u64)?;
    put_u64(w, m.ncols() as u64)?;
    put_f64s(w, m.as_slice())
}

const MAX_VALUES: usize = 1 << 30;

impl ElmModel {
    /// Layout: magic line, variant tag (0 kernel, 1 random), C, then either the
    /// kernel spec, training inputs and alpha, or A, b and beta. Matrices are
    /// stored as row and column counts followed by column-major values.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ElmError> {
        w.write_all(ELM_MAGIC)?;
        match self {
            ElmModel::Kernel {
                train_x, alpha, spec, c,
            } => {
                put_u64(&mut w, 0)?;
                put_f64s(&mut w, &[*c])?;
                write_kernel(&mut w, spec)?;
                write_matrix(&mut w, &train_x.to_dmatrix())?;
                write_matrix(&mut w, alpha)?;
            }
            ElmModel::Random { a, b, beta, c } => {
                put_u64(&mut w, 1)?;
                put_f64s(&mut w, &[*c])?;
                write_matrix(&mut w, a)?;
                write_matrix(&mut w, &DMatrix::from_column_slice(b.len(), 1, b))?;
                write_matrix(&mut w, beta)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ElmError> {
        let mut magic = vec![0u8; ELM_MAGIC.len()];
        r.read_exact(&mut magic)
            .map_err(|_| ElmError::Format("missing header".into()))?;
        if magic != ELM_MAGIC {
            return Err(ElmError::Format("not an AEC-ELM v1 file".into()));
        }
        let fmt = ElmError::Format;
        let tag = get_u64(&mut r).map_err(|e| fmt(e.to_string()))?;
        let mut c = [0.0];
        get_f64s(&mut r, &mut c).map_err(|e| fmt(e.to_string()))?;
        let c = c[0];
        let model = match tag {
            0 => {
                let spec = read_kernel(&mut r).map_err(fmt)?;
                let x = read_matrix(&mut r, MAX_VALUES).map_err(fmt)?;
                let alpha = read_matrix(&mut r, MAX_VALUES).map_err(fmt)?;
                if alpha.nrows() != x.nrows() {
                    return Err(fmt("alpha rows differ from training rows".into()));
                }
                ElmModel::Kernel {
                    train_x: FeatureMatrix::from_dmatrix(&x, crate::features::RowRole::Utterance)
                        .map_err(|e| fmt(e.to_string()))?,
                    alpha,
                    spec,
                    c,
                }
            }
            1 => {
                let a = read_matrix(&mut r, MAX_VALUES).map_err(fmt)?;
                let b = read_matrix(&mut r, MAX_VALUES).map_err(fmt)?;
                let beta = read_matrix(&mut r, MAX_VALUES).map_err(fmt)?;
                if b.nrows() != a.nrows() || beta.nrows() != a.nrows() {
                    return Err(fmt("hidden layer sizes disagree".into()));
                }
                ElmModel::Random {
                    a,
                    b: b.as_slice().to_vec(),
                    beta,
                    c,
                }
            }
            t => return Err(fmt(format!("unknown variant tag {t}"))),
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(fmt("trailing bytes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ElmError> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ElmError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
