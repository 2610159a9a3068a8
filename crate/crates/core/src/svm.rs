//! One-vs-all soft-margin SVMs trained by sequential minimal optimization with
//! second-order working-set selection.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::elm::{kernel_unchecked, read_kernel, read_matrix, write_kernel, write_matrix, KernelSpec};
use crate::features::{FeatureMatrix, RowRole};
use crate::ladder::{argmax, get_f64s, get_u64};

pub const DEFAULT_TOL: f64 = 1e-3;
pub const DEFAULT_MAX_ITER: u64 = 1_000_000;
pub const DEFAULT_C_GRID: [f64; 4] = [0.1, 1.0, 10.0, 100.0];
const TAU: f64 = 1e-12;
const SVM_MAGIC: &[u8] = b"AEC-SVM v1\n";

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("training data contains a single class")]
    SingleClass,
    #[error("class {0} has no training rows")]
    ClassAbsent(usize),
    #[error("class {class}: {source}")]
    InClass {
        class: usize,
        #[source]
        source: Box<SvmError>,
    },
    #[error("no convergence after {iterations} updates (KKT violation {residual:.3e})")]
    NonConvergence { iterations: u64, residual: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("{labels} labels for {rows} rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmParams {
    pub kernel: KernelSpec,
    pub c: f64,
    pub tol: f64,
    pub max_iter: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::linear(),
            c: 1.0,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

impl SvmParams {
    fn validate(&self) -> Result<(), SvmError> {
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(SvmError::Param(format!("C must be positive, got {}", self.c)));
        }
        if !(self.tol > 0.0) {
            return Err(SvmError::Param(format!("tolerance must be positive, got {}", self.tol)));
        }
        self.kernel.validate().map_err(|e| SvmError::Param(e.to_string()))
    }
}

/// Binary machine `f(x) = sum_i coef_i k(sv_i, x) + bias` with `coef_i = alpha_i y_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarySvm {
    pub support_vectors: FeatureMatrix,
    pub coef: Vec<f64>,
    pub bias: f64,
    pub kernel: KernelSpec,
    pub c: f64,
}

impl BinarySvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support_vectors
            .iter_rows()
            .zip(&self.coef)
            .map(|(sv, a)| a * kernel_unchecked(sv, x, &self.kernel))
            .sum::<f64>()
            + self.bias
    }

    /// Primal weights `sum_i coef_i sv_i`; meaningful for the linear kernel.
    pub fn linear_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.support_vectors.dims()];
        for (sv, a) in self.support_vectors.iter_rows().zip(&self.coef) {
            w.iter_mut().zip(sv).for_each(|(wi, s)| *wi += a * s);
        }
        w
    }
}

/// Full solver output for one binary problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    /// `sum alpha - 1/2 sum_ij alpha_i alpha_j y_i y_j k_ij`
    pub objective: f64,
    pub iterations: u64,
}

/// Called after every accepted pair update with the iteration count and the dual objective.
pub type Observer<'a> = &'a mut dyn FnMut(u64, f64);

fn is_upper(y: f64, a: f64, c: f64) -> bool {
    if y > 0.0 {
        a < c
    } else {
        a > 0.0
    }
}

fn is_lower(y: f64, a: f64, c: f64) -> bool {
    if y > 0.0 {
        a > 0.0
    } else {
        a < c
    }
}

fn dual_objective(alpha: &[f64], grad: &[f64]) -> f64 {
    // grad = Q alpha - e, so alpha^T Q alpha / 2 - e^T alpha = alpha^T (grad - e) / 2
    -0.5 * alpha.iter().zip(grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>()
}

/// Solves the dual on a precomputed kernel matrix.
pub fn solve_dual(
    k: &DMatrix<f64>,
    y: &[f64],
    c: f64,
    tol: f64,
    max_iter: u64,
    mut observer: Option<Observer<'_>>,
) -> Result<DualSolution, SvmError> {
    let n = y.len();
    let q = |i: usize, j: usize| y[i] * y[j] * k[(i, j)];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut iterations = 0u64;
    loop {
        // first index: maximal violation among the upper set
        let mut g_max = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            if is_upper(y[t], alpha[t], c) && -y[t] * grad[t] >= g_max {
                g_max = -y[t] * grad[t];
                i_sel = Some(t);
            }
        }
        let mut g_max2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut best = f64::INFINITY;
        if let Some(i) = i_sel {
            for t in 0..n {
                if !is_lower(y[t], alpha[t], c) {
                    continue;
                }
                g_max2 = g_max2.max(y[t] * grad[t]);
                let b = g_max + y[t] * grad[t];
                if b > 0.0 {
                    let mut a = q(i, i) + q(t, t) - 2.0 * y[i] * y[t] * q(i, t);
                    if a <= 0.0 {
                        a = TAU;
                    }
                    if -(b * b) / a <= best {
                        best = -(b * b) / a;
                        j_sel = Some(t);
                    }
                }
            }
        }
        let residual = g_max + g_max2;
        let (Some(i), Some(j)) = (i_sel, j_sel) else { break };
        if residual < tol {
            break;
        }
        if iterations >= max_iter {
            return Err(SvmError::NonConvergence { iterations, residual });
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let mut quad = q(i, i) + q(j, j) + 2.0 * q(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = q(i, i) + q(j, j) - 2.0 * q(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
        if let Some(obs) = observer.as_mut() {
            obs(iterations, dual_objective(&alpha, &grad));
        }
    }

    // bias from free vectors, else the midpoint of the feasible interval
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 { sum_free / n_free as f64 } else { (ub + lb) / 2.0 };
    Ok(DualSolution {
        objective: dual_objective(&alpha, &grad),
        alpha,
        bias: -rho,
        iterations,
    })
}

fn check_xy(x: &FeatureMatrix, n_labels: usize) -> Result<(), SvmError> {
    if n_labels != x.rows() {
        return Err(SvmError::LabelCount {
            labels: n_labels,
            rows: x.rows(),
        });
    }
    Ok(())
}

fn gram(x: &FeatureMatrix, kernel: &KernelSpec) -> DMatrix<f64> {
    let n = x.rows();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel_unchecked(x.row(i), x.row(j), kernel);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn binary_from_solution(x: &FeatureMatrix, y: &[f64], sol: &DualSolution, params: &SvmParams) -> BinarySvm {
    let sv: Vec<usize> = (0..y.len()).filter(|&i| sol.alpha[i] > 0.0).collect();
    BinarySvm {
        support_vectors: if sv.is_empty() {
            FeatureMatrix::new(0, x.dims(), Vec::new(), RowRole::Utterance).expect("empty matrix")
        } else {
            x.select(&sv).expect("indices in range")
        },
        coef: sv.iter().map(|&i| sol.alpha[i] * y[i]).collect(),
        bias: sol.bias,
        kernel: params.kernel,
        c: params.c,
    }
}

fn check_signs(y: &[f64]) -> Result<(), SvmError> {
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(SvmError::Param("labels must be +1 or -1".into()));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(SvmError::SingleClass);
    }
    Ok(())
}

/// Trains one machine on `+1 / -1` labels, optionally reporting every update.
pub fn train_binary_svm_observed(
    x: &FeatureMatrix,
    y: &[f64],
    params: &SvmParams,
    observer: Option<Observer<'_>>,
) -> Result<(BinarySvm, DualSolution), SvmError> {
    check_xy(x, y.len())?;
    check_signs(y)?;
    params.validate()?;
    let params = SvmParams {
        kernel: params.kernel.resolved(x.dims()),
        ..*params
    };
    let k = gram(x, &params.kernel);
    let sol = solve_dual(&k, y, params.c, params.tol, params.max_iter, observer)?;
    Ok((binary_from_solution(x, y, &sol, &params), sol))
}

pub fn train_binary_svm(x: &FeatureMatrix, y: &[f64], params: &SvmParams) -> Result<BinarySvm, SvmError> {
    Ok(train_binary_svm_observed(x, y, params, None)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub machines: Vec<BinarySvm>,
    pub input_dim: usize,
}

impl SvmModel {
    pub fn n_classes(&self) -> usize {
        self.machines.len()
    }
}

/// One machine per class, that class against the rest. The Gram matrix is shared.
pub fn train_ova_svm(
    x: &FeatureMatrix,
    labels: &[usize],
    n_classes: usize,
    params: &SvmParams,
) -> Result<SvmModel, SvmError> {
    check_xy(x, labels.len())?;
    params.validate()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(SvmError::Param(format!("label {bad} out of range for {n_classes} classes")));
    }
    if n_classes < 2 {
        return Err(SvmError::SingleClass);
    }
    if let Some(absent) = (0..n_classes).find(|c| !labels.contains(c)) {
        return Err(SvmError::ClassAbsent(absent));
    }
    let params = SvmParams {
        kernel: params.kernel.resolved(x.dims()),
        ..*params
    };
    let k = gram(x, &params.kernel);
    let machines = (0..n_classes)
        .into_par_iter()
        .map(|class| {
            let y: Vec<f64> = labels.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
            solve_dual(&k, &y, params.c, params.tol, params.max_iter, None)
                .map(|sol| binary_from_solution(x, &y, &sol, &params))
                .map_err(|e| SvmError::InClass {
                    class,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SvmModel {
        machines,
        input_dim: x.dims(),
    })
}

/// Decision values per class and their argmax (ties to the lower index).
pub fn predict_svm(model: &SvmModel, x: &FeatureMatrix) -> Result<(Vec<usize>, DMatrix<f64>), SvmError> {
    if x.dims() != model.input_dim {
        return Err(SvmError::DimMismatch {
            expected: model.input_dim,
            got: x.dims(),
        });
    }
    let values = DMatrix::from_fn(x.rows(), model.n_classes(), |i, c| model.machines[c].decision(x.row(i)));
    let classes = (0..x.rows()).map(|i| argmax(values.row(i).iter().copied())).collect();
    Ok((classes, values))
}

const MAX_VALUES: usize = 1 << 30;

impl SvmModel {
    /// Layout: magic line, input dimension, class count, then per class the
    /// kernel spec, C, bias, support vector matrix and coefficient column.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), SvmError> {
        w.write_all(SVM_MAGIC)?;
        w.write_all(&(self.input_dim as u64).to_le_bytes())?;
        w.write_all(&(self.machines.len() as u64).to_le_bytes())?;
        for m in &self.machines {
            write_kernel(&mut w, &m.kernel)?;
            w.write_all(&m.c.to_le_bytes())?;
            w.write_all(&m.bias.to_le_bytes())?;
            let sv = if m.coef.is_empty() {
                DMatrix::zeros(0, self.input_dim)
            } else {
                m.support_vectors.to_dmatrix()
            };
            write_matrix(&mut w, &sv)?;
            write_matrix(&mut w, &DMatrix::from_column_slice(m.coef.len(), 1, &m.coef))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, SvmError> {
        let mut magic = vec![0u8; SVM_MAGIC.len()];
        r.read_exact(&mut magic)
            .map_err(|_| SvmError::Format("missing header".into()))?;
        if magic != SVM_MAGIC {
            return Err(SvmError::Format("not an AEC-SVM v1 file".into()));
        }
        let fmt = |e: String| SvmError::Format(e);
        let io = |e: std::io::Error| SvmError::Format(e.to_string());
        let input_dim = get_u64(&mut r).map_err(io)? as usize;
        let n = get_u64(&mut r).map_err(io)? as usize;
        if n > 1 << 16 {
            return Err(fmt(format!("implausible class count {n}")));
        }
        let mut machines = Vec::with_capacity(n);
        for _ in 0..n {
            let kernel = read_kernel(&mut r).map_err(fmt)?;
            let mut cb = [0.0; 2];
            get_f64s(&mut r, &mut cb).map_err(io)?;
            let sv = read_matrix(&mut r, MAX_VALUES).map_err(fmt)?;
            let coef = read_matrix(&mut r, MAX_VALUES).map_err(fmt)?;
            if sv.nrows() != coef.nrows() || (sv.nrows() > 0 && sv.ncols() != input_dim) {
                return Err(fmt("support vector shape disagrees with coefficients".into()));
            }
            let support_vectors = if sv.nrows() == 0 {
                FeatureMatrix::new(0, input_dim, Vec::new(), RowRole::Utterance)
            } else {
                FeatureMatrix::from_dmatrix(&sv, RowRole::Utterance)
            }
            .map_err(|e| fmt(e.to_string()))?;
            machines.push(BinarySvm {
                support_vectors,
                coef: coef.as_slice().to_vec(),
                bias: cb[1],
                kernel,
                c: cb[0],
            });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(fmt("trailing bytes".into()));
        }
        Ok(Self { machines, input_dim })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SvmError> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SvmError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
