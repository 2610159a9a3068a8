//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the solvers it is used to check.
#![allow(dead_code)]

use aec::ladder::{
    init_ladder, ladder_gradients, ladder_loss_with_noise, LadderBatch, LadderConfig, LadderModel, Noise,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Dense solve by Gaussian elimination with partial pivoting; `None` when singular.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for k in col..n {
                a[r][k] -= f * a[col][k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Primal ridge regression `(X^T X + I/C) beta = X^T T`, returned as `d x k`.
pub fn primal_ridge(x: &[Vec<f64>], targets: &[Vec<f64>], c: f64) -> Vec<Vec<f64>> {
    let d = x[0].len();
    let k = targets[0].len();
    let mut gram = vec![vec![0.0; d]; d];
    for row in x {
        for i in 0..d {
            for j in 0..d {
                gram[i][j] += row[i] * row[j];
            }
        }
    }
    for (i, g) in gram.iter_mut().enumerate() {
        g[i] += 1.0 / c;
    }
    let mut beta = vec![vec![0.0; k]; d];
    for col in 0..k {
        let rhs: Vec<f64> = (0..d).map(|i| x.iter().zip(targets).map(|(r, t)| r[i] * t[col]).sum()).collect();
        let sol = gauss_solve(gram.clone(), rhs).expect("ridge system is positive definite");
        for i in 0..d {
            beta[i][col] = sol[i];
        }
    }
    beta
}

/// Exact SVM dual optimum by enumerating every active-set pattern.
pub struct BruteDual {
    pub alpha: Vec<f64>,
    /// Determined only when some multiplier is strictly inside `(0, C)`.
    pub bias: Option<f64>,
    pub objective: f64,
}

pub fn dual_objective(k: &[Vec<f64>], y: &[f64], alpha: &[f64]) -> f64 {
    let n = y.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * k[i][j];
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

/// Each point is at 0, at C, or free; free multipliers and the bias solve
/// `y_i f(x_i) = 1` together with `sum alpha_i y_i = 0`. The feasible
/// candidate with the largest objective is the optimum.
pub fn svm_brute_force(k: &[Vec<f64>], y: &[f64], c: f64) -> BruteDual {
    let n = y.len();
    let mut best: Option<BruteDual> = None;
    let patterns = 3usize.pow(n as u32);
    for code in 0..patterns {
        let mut state = vec![0u8; n];
        let mut rest = code;
        for s in state.iter_mut() {
            *s = (rest % 3) as u8;
            rest /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        let mut alpha: Vec<f64> = state.iter().map(|&s| if s == 1 { c } else { 0.0 }).collect();
        let mut bias = None;
        if free.is_empty() {
            let balance: f64 = alpha.iter().zip(y).map(|(a, y)| a * y).sum();
            if balance.abs() > 1e-9 {
                continue;
            }
        } else {
            // unknowns: alpha over the free set, then b
            let m = free.len();
            let mut a = vec![vec![0.0; m + 1]; m + 1];
            let mut rhs = vec![0.0; m + 1];
            for (r, &i) in free.iter().enumerate() {
                for (col, &j) in free.iter().enumerate() {
                    a[r][col] = y[i] * y[j] * k[i][j];
                }
                a[r][m] = y[i];
                let bound: f64 = (0..n).filter(|&j| state[j] == 1).map(|j| y[i] * y[j] * k[i][j] * c).sum();
                rhs[r] = 1.0 - bound;
            }
            for (col, &j) in free.iter().enumerate() {
                a[m][col] = y[j];
            }
            rhs[m] = -(0..n).filter(|&j| state[j] == 1).map(|j| y[j] * c).sum::<f64>();
            let Some(sol) = gauss_solve(a, rhs) else { continue };
            if free.iter().zip(&sol).any(|(_, &v)| !(v > -1e-12 && v < c + 1e-12)) {
                continue;
            }
            for (&i, &v) in free.iter().zip(&sol) {
                alpha[i] = v.clamp(0.0, c);
            }
            bias = Some(sol[m]);
        }
        let objective = dual_objective(k, y, &alpha);
        if best.as_ref().is_none_or(|b| objective > b.objective) {
            best = Some(BruteDual { alpha, bias, objective });
        }
    }
    best.expect("all-zero multipliers are always feasible")
}

/// Plain batch-normalized MLP with cross-entropy: `z = BN(h W^T)`,
/// `q = gamma (z + beta)`, ReLU below the top layer and softmax on top.
pub struct MlpOracle {
    pub loss: f64,
    pub dw: Vec<Vec<Vec<f64>>>,
    pub dgamma: Vec<Vec<f64>>,
    pub dbeta: Vec<Vec<f64>>,
}

pub const ORACLE_BN_EPSILON: f64 = 1e-6;

pub fn bn_mlp(
    w: &[Vec<Vec<f64>>],
    gamma: &[Vec<f64>],
    beta: &[Vec<f64>],
    x: &[Vec<f64>],
    labels: &[usize],
) -> MlpOracle {
    let n = x.len();
    let layers = w.len();
    let mut hs = vec![x.to_vec()];
    let mut zs = Vec::new();
    let mut qs = Vec::new();
    let mut stds = Vec::new();
    for l in 0..layers {
        let h = &hs[l];
        let out = w[l].len();
        let zpre: Vec<Vec<f64>> = h
            .iter()
            .map(|row| w[l].iter().map(|wr| wr.iter().zip(row).map(|(a, b)| a * b).sum()).collect())
            .collect();
        let mut z = vec![vec![0.0; out]; n];
        let mut s = vec![0.0; out];
        for j in 0..out {
            let mean = zpre.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let var = zpre.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
            s[j] = (var + ORACLE_BN_EPSILON).sqrt();
            for i in 0..n {
                z[i][j] = (zpre[i][j] - mean) / s[j];
            }
        }
        let q: Vec<Vec<f64>> = z
            .iter()
            .map(|r| (0..out).map(|j| gamma[l][j] * (r[j] + beta[l][j])).collect())
            .collect();
        let h_next: Vec<Vec<f64>> = if l + 1 == layers {
            q.iter()
                .map(|r| {
                    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
                    let t: f64 = e.iter().sum();
                    e.iter().map(|v| v / t).collect()
                })
                .collect()
        } else {
            q.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
        };
        zs.push(z);
        qs.push(q);
        stds.push(s);
        hs.push(h_next);
    }
    let p = &hs[layers];
    let loss = -labels.iter().enumerate().map(|(i, &y)| p[i][y].ln()).sum::<f64>() / n as f64;

    let mut dw = vec![Vec::new(); layers];
    let mut dgamma = vec![Vec::new(); layers];
    let mut dbeta = vec![Vec::new(); layers];
    let mut dq: Vec<Vec<f64>> = p
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64)
                .collect()
        })
        .collect();
    for l in (0..layers).rev() {
        let out = w[l].len();
        let z = &zs[l];
        dgamma[l] = (0..out).map(|j| (0..n).map(|i| dq[i][j] * (z[i][j] + beta[l][j])).sum()).collect();
        dbeta[l] = (0..out).map(|j| (0..n).map(|i| dq[i][j]).sum::<f64>() * gamma[l][j]).collect();
        let dz: Vec<Vec<f64>> = dq.iter().map(|r| (0..out).map(|j| r[j] * gamma[l][j]).collect()).collect();
        let mut dzpre = vec![vec![0.0; out]; n];
        for j in 0..out {
            let m1 = (0..n).map(|i| dz[i][j]).sum::<f64>() / n as f64;
            let m2 = (0..n).map(|i| dz[i][j] * z[i][j]).sum::<f64>() / n as f64;
            for i in 0..n {
                dzpre[i][j] = (dz[i][j] - m1 - z[i][j] * m2) / stds[l][j];
            }
        }
        let h = &hs[l];
        let inp = h[0].len();
        dw[l] = (0..out)
            .map(|r| (0..inp).map(|c| (0..n).map(|i| dzpre[i][r] * h[i][c]).sum()).collect())
            .collect();
        if l > 0 {
            let q_below = &qs[l - 1];
            dq = (0..n)
                .map(|i| {
                    (0..inp)
                        .map(|c| {
                            let dh: f64 = (0..out).map(|r| dzpre[i][r] * w[l][r][c]).sum();
                            if q_below[i][c] > 0.0 {
                                dh
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect();
        }
    }
    MlpOracle { loss, dw, dgamma, dbeta }
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn gradient_check_config() -> LadderConfig {
    LadderConfig {
        layer_dims: vec![5, 4, 3],
        noise_sigma: 0.3,
        denoise_costs: vec![1.0, 0.7, 0.4],
        batch_size: 7,
        epochs: 1,
        learning_rate: 0.01,
        decay_epochs: 0,
        seed: 3,
    }
}

/// A `[5, 4, 3]` model with combinators, scales and shifts moved away from
/// their initial values so every term of the gradient is exercised.
pub fn perturbed_model(rng: &mut ChaCha8Rng) -> LadderModel {
    let mut model = init_ladder(&gradient_check_config()).unwrap();
    for a in &mut model.params.comb {
        a.iter_mut().for_each(|v| *v += 0.5 * rng.sample::<f64, _>(StandardNormal));
    }
    for g in model.params.gamma.iter_mut().chain(model.params.beta.iter_mut()) {
        g.iter_mut().for_each(|v| *v += 0.3 * rng.sample::<f64, _>(StandardNormal));
    }
    model
}

/// Worst relative error `|a - n| / max(|a|, |n|, 1e-6)` between analytic and
/// central-difference gradients, with the parameter where it occurs.
pub fn worst_relative_error(batch: &LadderBatch, sigma: f64, costs: &[f64], seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = perturbed_model(&mut rng);
    let rows = batch.n_labeled() + batch.n_unlabeled();
    let noise = Noise::draw(model.layer_dims(), rows, &mut rng);
    let (_, grads) = ladder_gradients(&model, batch, sigma, costs, &noise).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();

    let h = 1e-5;
    let mut worst = (0.0, String::new());
    for (ti, (name, a)) in analytic.iter().enumerate() {
        for k in 0..a.len() {
            let mut plus = model.clone();
            plus.params.tensors_mut()[ti][k] += h;
            let mut minus = model.clone();
            minus.params.tensors_mut()[ti][k] -= h;
            let lp = ladder_loss_with_noise(&plus, batch, sigma, costs, &noise).unwrap().total;
            let lm = ladder_loss_with_noise(&minus, batch, sigma, costs, &noise).unwrap().total;
            let numeric = (lp - lm) / (2.0 * h);
            let err = (a[k] - numeric).abs() / a[k].abs().max(numeric.abs()).max(1e-6);
            if err > worst.0 {
                worst = (err, format!("{name}[{k}] analytic {} numeric {numeric}", a[k]));
            }
        }
    }
    worst
}

/// Largest absolute difference between the ladder's supervised loss and
/// gradients at `sigma = 0`, zero costs, and the plain MLP oracle on one
/// random labeled batch. Decoder gradients must vanish.
pub fn degeneration_gap(dims: &[usize], rows: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = *dims.last().unwrap();
    let config = LadderConfig {
        layer_dims: dims.to_vec(),
        denoise_costs: vec![0.0; dims.len()],
        seed,
        ..gradient_check_config()
    };
    let mut model = init_ladder(&config).unwrap();
    for g in model.params.gamma.iter_mut() {
        g.iter_mut().for_each(|v| *v = 0.5 + rng.random::<f64>());
    }
    for b in model.params.beta.iter_mut() {
        b.iter_mut().for_each(|v| *v = 0.3 * rng.sample::<f64, _>(StandardNormal));
    }
    let x = gaussian(rows, dims[0], &mut rng);
    let labels: Vec<usize> = (0..rows).map(|i| i % n_classes).collect();
    let batch = LadderBatch::labeled(x.clone(), labels.clone());
    let noise = Noise::draw(dims, rows, &mut rng);
    let (loss, grads) = ladder_gradients(&model, &batch, 0.0, &vec![0.0; dims.len()], &noise).unwrap();

    let w: Vec<Vec<Vec<f64>>> = model.params.w.iter().map(matrix_rows).collect();
    let oracle = bn_mlp(&w, &model.params.gamma, &model.params.beta, &matrix_rows(&x), &labels);
    let mut gap = (loss.total - oracle.loss).abs().max((loss.supervised - oracle.loss).abs());
    for l in 0..w.len() {
        for (r, row) in oracle.dw[l].iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                gap = gap.max((grads.w[l][(r, c)] - v).abs());
            }
        }
        for (a, b) in grads.gamma[l].iter().zip(&oracle.dgamma[l]) {
            gap = gap.max((a - b).abs());
        }
        for (a, b) in grads.beta[l].iter().zip(&oracle.dbeta[l]) {
            gap = gap.max((a - b).abs());
        }
    }
    for m in grads.v.iter().chain(&grads.comb) {
        gap = gap.max(m.amax());
    }
    gap
}
