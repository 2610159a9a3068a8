//! Semi-supervised ladder network.
//!
//! Three passes share one set of encoder weights: a clean encoder, a noisy
//! encoder with Gaussian noise added after every batch normalization, and a
//! decoder that walks back down combining the noisy lateral signal with the
//! top-down signal. The training objective is the cross-entropy of the noisy
//! encoder on labeled rows plus a weighted reconstruction cost per layer.
//!
//! Gradients are derived by hand. Labeled and unlabeled rows of a batch are
//! batch-normalized with separate statistics, so unlabeled rows never alter
//! the supervised term.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub const BN_EPSILON: f64 = 1e-6;
pub const RUNNING_MOMENTUM: f64 = 0.99;
const LADDER_MAGIC: &[u8] = b"AEC-LADDER v1\n";
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Number of per-unit combinator parameters.
pub const COMBINATOR_PARAMS: usize = 10;

#[derive(Debug, Error)]
pub enum LadderError {
    #[error("invalid ladder configuration: {0}")]
    Config(String),
    #[error("input has {got} columns, model expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },
    #[error("batch has neither labeled nor unlabeled rows")]
    EmptyBatch,
    #[error("training needs at least one labeled example")]
    NoLabels,
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderConfig {
    /// Input dimension first, number of classes last.
    pub layer_dims: Vec<usize>,
    pub noise_sigma: f64,
    /// Reconstruction weight per layer, input layer first.
    pub denoise_costs: Vec<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// The learning rate decays linearly to zero over this many final epochs.
    pub decay_epochs: usize,
    pub seed: u64,
}

impl LadderConfig {
    /// Hidden layers [2048, 1024, 256], sigma 0.2, costs [1000, 10, 0.1, 0.1, 0.1],
    /// batch 100, 101 epochs.
    pub fn with_defaults(input_dim: usize, n_classes: usize) -> Self {
        Self {
            layer_dims: vec![input_dim, 2048, 1024, 256, n_classes],
            noise_sigma: 0.2,
            denoise_costs: vec![1000.0, 10.0, 0.1, 0.1, 0.1],
            batch_size: 100,
            epochs: 101,
            learning_rate: 0.002,
            decay_epochs: 50,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), LadderError> {
        let bad = |m: &str| Err(LadderError::Config(m.to_string()));
        if self.layer_dims.len() < 2 {
            return bad("need at least an input and an output layer");
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return bad("layer dimensions must be positive");
        }
        if self.denoise_costs.len() != self.layer_dims.len() {
            return bad("one denoising cost per layer is required");
        }
        if self.denoise_costs.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return bad("denoising costs must be finite and non-negative");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise sigma must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

/// All trainable tensors. Layer `l` of the encoder (1-based) lives at index `l - 1`
/// of `w`, `gamma` and `beta`; decoder tensors are indexed by layer from 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderParams {
    /// `dims[l] x dims[l-1]`
    pub w: Vec<DMatrix<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    /// `dims[l] x dims[l+1]`, for l = 0..L-1
    pub v: Vec<DMatrix<f64>>,
    /// `10 x dims[l]`, row k holds combinator parameter a_{k+1}, for l = 0..=L
    pub comb: Vec<DMatrix<f64>>,
}

impl LadderParams {
    fn zeros_like(other: &Self) -> Self {
        Self {
            w: other.w.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect(),
            gamma: other.gamma.iter().map(|g| vec![0.0; g.len()]).collect(),
            beta: other.beta.iter().map(|g| vec![0.0; g.len()]).collect(),
            v: other.v.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect(),
            comb: other.comb.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect(),
        }
    }

    /// Named views of every tensor, in serialization order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, ((w, g), b)) in self.w.iter().zip(&self.gamma).zip(&self.beta).enumerate() {
            out.push((format!("W{}", i + 1), w.as_slice()));
            out.push((format!("gamma{}", i + 1), g));
            out.push((format!("beta{}", i + 1), b));
        }
        for (l, v) in self.v.iter().enumerate() {
            out.push((format!("V{l}"), v.as_slice()));
        }
        for (l, a) in self.comb.iter().enumerate() {
            out.push((format!("a{l}"), a.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for ((w, g), b) in self.w.iter_mut().zip(&mut self.gamma).zip(&mut self.beta) {
            out.push(w.as_mut_slice());
            out.push(g);
            out.push(b);
        }
        for v in &mut self.v {
            out.push(v.as_mut_slice());
        }
        for a in &mut self.comb {
            out.push(a.as_mut_slice());
        }
        out
    }

    pub fn n_values(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderModel {
    dims: Vec<usize>,
    pub params: LadderParams,
    /// Population estimates of each encoder layer's pre-activation statistics (index `l - 1`).
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub denoise_costs: Vec<f64>,
}

impl LadderModel {
    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn n_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }
}

/// Labeled rows, their labels, and optional unlabeled rows (may have zero rows).
#[derive(Debug, Clone)]
pub struct LadderBatch {
    pub labeled_x: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub unlabeled_x: DMatrix<f64>,
}

impl LadderBatch {
    pub fn labeled(x: DMatrix<f64>, labels: Vec<usize>) -> Self {
        let d = x.ncols();
        Self {
            labeled_x: x,
            labels,
            unlabeled_x: DMatrix::zeros(0, d),
        }
    }

    pub fn with_unlabeled(x: DMatrix<f64>, labels: Vec<usize>, unlabeled_x: DMatrix<f64>) -> Self {
        Self {
            labeled_x: x,
            labels,
            unlabeled_x,
        }
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled_x.nrows()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled_x.nrows()
    }

    fn stacked(&self) -> DMatrix<f64> {
        let (nl, nu) = (self.n_labeled(), self.n_unlabeled());
        let d = self.labeled_x.ncols().max(self.unlabeled_x.ncols());
        let mut x = DMatrix::zeros(nl + nu, d);
        if nl > 0 {
            x.rows_mut(0, nl).copy_from(&self.labeled_x);
        }
        if nu > 0 {
            x.rows_mut(nl, nu).copy_from(&self.unlabeled_x);
        }
        x
    }

    fn groups(&self) -> Vec<Range<usize>> {
        let (nl, nu) = (self.n_labeled(), self.n_unlabeled());
        [0..nl, nl..nl + nu].into_iter().filter(|r| !r.is_empty()).collect()
    }
}

/// Standard-normal draws for every layer of the noisy encoder (`rows x dims[l]`).
/// The effective noise is `sigma` times these values.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub per_layer: Vec<DMatrix<f64>>,
}

impl Noise {
    pub fn draw<R: Rng + ?Sized>(dims: &[usize], rows: usize, rng: &mut R) -> Self {
        Self {
            per_layer: dims
                .iter()
                .map(|&d| DMatrix::from_fn(rows, d, |_, _| rng.sample(StandardNormal)))
                .collect(),
        }
    }

    pub fn zeros(dims: &[usize], rows: usize) -> Self {
        Self {
            per_layer: dims.iter().map(|&d| DMatrix::zeros(rows, d)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderLoss {
    pub total: f64,
    pub supervised: f64,
    /// Weighted reconstruction cost per layer, input layer first.
    pub denoise_per_layer: Vec<f64>,
}

impl LadderLoss {
    pub fn denoise(&self) -> f64 {
        self.denoise_per_layer.iter().sum()
    }
}

/// Encoder quantities of one layer for one forward pass.
#[derive(Debug, Clone)]
pub struct LayerRecord {
    /// `W h` before normalization (the input itself at layer 0).
    pub z_pre: DMatrix<f64>,
    /// Batch-normalized pre-activation.
    pub z: DMatrix<f64>,
    /// `z` plus noise.
    pub z_noisy: DMatrix<f64>,
    /// Activation.
    pub h: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub layers: Vec<LayerRecord>,
    pub posteriors: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct GroupStats {
    rows: Range<usize>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

fn bn_forward(x: &DMatrix<f64>, groups: &[Range<usize>]) -> (DMatrix<f64>, Vec<GroupStats>) {
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    let stats = groups
        .iter()
        .map(|g| {
            let n = g.len() as f64;
            let mut mean = Vec::with_capacity(x.ncols());
            let mut std = Vec::with_capacity(x.ncols());
            for j in 0..x.ncols() {
                let col = x.column(j);
                let m = g.clone().map(|i| col[i]).sum::<f64>() / n;
                let var = g.clone().map(|i| (col[i] - m).powi(2)).sum::<f64>() / n;
                let s = (var + BN_EPSILON).sqrt();
                for i in g.clone() {
                    out[(i, j)] = (col[i] - m) / s;
                }
                mean.push(m);
                std.push(s);
            }
            GroupStats {
                rows: g.clone(),
                mean,
                std,
            }
        })
        .collect();
    (out, stats)
}

/// Backward pass of batch normalization given the normalized output `xhat`.
/// `ext` carries gradients arriving directly at the group means and standard deviations.
fn bn_backward(
    xhat: &DMatrix<f64>,
    stats: &[GroupStats],
    dz: &DMatrix<f64>,
    ext: Option<(&[Vec<f64>], &[Vec<f64>])>,
) -> DMatrix<f64> {
    let mut dx = DMatrix::zeros(xhat.nrows(), xhat.ncols());
    for (gi, st) in stats.iter().enumerate() {
        let n = st.rows.len() as f64;
        for j in 0..xhat.ncols() {
            let s = st.std[j];
            let (dz_col, xh_col) = (dz.column(j), xhat.column(j));
            let sum_dz: f64 = st.rows.clone().map(|i| dz_col[i]).sum();
            let sum_dz_xh: f64 = st.rows.clone().map(|i| dz_col[i] * xh_col[i]).sum();
            let (dmu_ext, ds_ext) = ext.map_or((0.0, 0.0), |(m, s)| (m[gi][j], s[gi][j]));
            let g_mu = dmu_ext - sum_dz / s;
            let g_s = ds_ext - sum_dz_xh / s;
            for i in st.rows.clone() {
                dx[(i, j)] = dz_col[i] / s + g_mu / n + xh_col[i] * g_s / n;
            }
        }
    }
    dx
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_rows(q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = q.clone();
    for i in 0..q.nrows() {
        let max = q.row(i).max();
        let mut sum = 0.0;
        for j in 0..q.ncols() {
            let e = (q[(i, j)] - max).exp();
            p[(i, j)] = e;
            sum += e;
        }
        for j in 0..q.ncols() {
            p[(i, j)] /= sum;
        }
    }
    p
}

/// `gamma * (z + beta)` per column.
fn scale_shift(z: &DMatrix<f64>, gamma: &[f64], beta: &[f64]) -> DMatrix<f64> {
    let mut q = z.clone();
    for (j, mut col) in q.column_iter_mut().enumerate() {
        col.apply(|v| *v = gamma[j] * (*v + beta[j]));
    }
    q
}

fn activate(q: &DMatrix<f64>, top: bool) -> DMatrix<f64> {
    if top {
        softmax_rows(q)
    } else {
        q.map(|v| v.max(0.0))
    }
}

fn check_finite(m: &DMatrix<f64>, layer: usize) -> Result<(), LadderError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LadderError::NonFinite { layer })
    }
}

/// Vanilla combinator: `zhat = (zt - mu(u)) * v(u) + mu(u)` with
/// `mu(u) = a1 sigmoid(a2 u + a3) + a4 u + a5`, `v(u) = a6 sigmoid(a7 u + a8) + a9 u + a10`.
fn combine(zt: &DMatrix<f64>, u: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(zt.nrows(), zt.ncols(), |i, j| {
        let p = a.column(j);
        let (uu, z) = (u[(i, j)], zt[(i, j)]);
        let mu = p[0] * sigmoid(p[1] * uu + p[2]) + p[3] * uu + p[4];
        let v = p[5] * sigmoid(p[6] * uu + p[7]) + p[8] * uu + p[9];
        (z - mu) * v + mu
    })
}

/// Returns `(d zt, d u)` and accumulates parameter gradients into `da`.
fn combine_backward(
    zt: &DMatrix<f64>,
    u: &DMatrix<f64>,
    a: &DMatrix<f64>,
    g: &DMatrix<f64>,
    da: &mut DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut dzt = DMatrix::zeros(zt.nrows(), zt.ncols());
    let mut du = DMatrix::zeros(zt.nrows(), zt.ncols());
    for j in 0..zt.ncols() {
        let p = a.column(j);
        let mut acc = [0.0; COMBINATOR_PARAMS];
        for i in 0..zt.nrows() {
            let (uu, z, gg) = (u[(i, j)], zt[(i, j)], g[(i, j)]);
            let s1 = sigmoid(p[1] * uu + p[2]);
            let s2 = sigmoid(p[6] * uu + p[7]);
            let mu = p[0] * s1 + p[3] * uu + p[4];
            let v = p[5] * s2 + p[8] * uu + p[9];
            dzt[(i, j)] = gg * v;
            let dmu = gg * (1.0 - v);
            let dv = gg * (z - mu);
            let ds1 = p[0] * s1 * (1.0 - s1);
            let ds2 = p[5] * s2 * (1.0 - s2);
            acc[0] += dmu * s1;
            acc[1] += dmu * ds1 * uu;
            acc[2] += dmu * ds1;
            acc[3] += dmu * uu;
            acc[4] += dmu;
            acc[5] += dv * s2;
            acc[6] += dv * ds2 * uu;
            acc[7] += dv * ds2;
            acc[8] += dv * uu;
            acc[9] += dv;
            du[(i, j)] = dmu * (ds1 * p[1] + p[3]) + dv * (ds2 * p[6] + p[8]);
        }
        for (k, v) in acc.iter().enumerate() {
            da[(k, j)] += v;
        }
    }
    (dzt, du)
}

struct EncoderPass {
    /// Index l: pre-activation of layer l (index 0 holds the input).
    z_pre: Vec<DMatrix<f64>>,
    /// Normalized pre-activation before noise (index 0: input).
    z_norm: Vec<DMatrix<f64>>,
    /// Batch statistics of layer l (index 0 empty).
    stats: Vec<Vec<GroupStats>>,
    /// After noise.
    z: Vec<DMatrix<f64>>,
    h: Vec<DMatrix<f64>>,
}

fn encode(
    model: &LadderModel,
    x: &DMatrix<f64>,
    groups: &[Range<usize>],
    sigma: f64,
    noise: Option<&Noise>,
) -> Result<EncoderPass, LadderError> {
    let n_layers = model.n_layers();
    let add_noise = |m: &DMatrix<f64>, l: usize| -> DMatrix<f64> {
        match noise {
            Some(n) if sigma > 0.0 => m + &n.per_layer[l] * sigma,
            _ => m.clone(),
        }
    };
    let z0 = add_noise(x, 0);
    let mut pass = EncoderPass {
        z_pre: vec![x.clone()],
        z_norm: vec![x.clone()],
        stats: vec![Vec::new()],
        h: vec![z0.clone()],
        z: vec![z0],
    };
    for l in 1..=n_layers {
        let p = &model.params;
        let z_pre = &pass.h[l - 1] * p.w[l - 1].transpose();
        let (z_norm, stats) = bn_forward(&z_pre, groups);
        let z = add_noise(&z_norm, l);
        let h = activate(&scale_shift(&z, &p.gamma[l - 1], &p.beta[l - 1]), l == n_layers);
        check_finite(&h, l)?;
        pass.z_pre.push(z_pre);
        pass.z_norm.push(z_norm);
        pass.stats.push(stats);
        pass.z.push(z);
        pass.h.push(h);
    }
    Ok(pass)
}

struct DecoderPass {
    /// Pre-normalization decoder input (noisy top output at L, `zhat V^T` below).
    u_pre: Vec<DMatrix<f64>>,
    u: Vec<DMatrix<f64>>,
    u_stats: Vec<Vec<GroupStats>>,
    zhat: Vec<DMatrix<f64>>,
    zhat_bn: Vec<DMatrix<f64>>,
}

fn decode(model: &LadderModel, noisy: &EncoderPass, clean: &EncoderPass, groups: &[Range<usize>]) -> DecoderPass {
    let n_layers = model.n_layers();
    let empty = || DMatrix::zeros(0, 0);
    let mut dec = DecoderPass {
        u_pre: (0..=n_layers).map(|_| empty()).collect(),
        u: (0..=n_layers).map(|_| empty()).collect(),
        u_stats: vec![Vec::new(); n_layers + 1],
        zhat: (0..=n_layers).map(|_| empty()).collect(),
        zhat_bn: (0..=n_layers).map(|_| empty()).collect(),
    };
    for l in (0..=n_layers).rev() {
        let u_pre = if l == n_layers {
            noisy.h[n_layers].clone()
        } else {
            &dec.zhat[l + 1] * model.params.v[l].transpose()
        };
        let (u, stats) = bn_forward(&u_pre, groups);
        let zhat = combine(&noisy.z[l], &u, &model.params.comb[l]);
        let zhat_bn = if l == 0 {
            zhat.clone()
        } else {
            let mut out = zhat.clone();
            for st in &clean.stats[l] {
                for j in 0..out.ncols() {
                    for i in st.rows.clone() {
                        out[(i, j)] = (zhat[(i, j)] - st.mean[j]) / st.std[j];
                    }
                }
            }
            out
        };
        dec.u_pre[l] = u_pre;
        dec.u[l] = u;
        dec.u_stats[l] = stats;
        dec.zhat[l] = zhat;
        dec.zhat_bn[l] = zhat_bn;
    }
    dec
}

fn check_batch(model: &LadderModel, batch: &LadderBatch) -> Result<(), LadderError> {
    if batch.n_labeled() + batch.n_unlabeled() == 0 {
        return Err(LadderError::EmptyBatch);
    }
    if batch.labels.len() != batch.n_labeled() {
        return Err(LadderError::Config(format!(
            "{} labels for {} labeled rows",
            batch.labels.len(),
            batch.n_labeled()
        )));
    }
    let d = model.dims[0];
    for m in [&batch.labeled_x, &batch.unlabeled_x] {
        if m.nrows() > 0 && m.ncols() != d {
            return Err(LadderError::DimMismatch {
                expected: d,
                got: m.ncols(),
            });
        }
    }
    let k = model.n_classes();
    if let Some(&label) = batch.labels.iter().find(|&&y| y >= k) {
        return Err(LadderError::Label { label, n_classes: k });
    }
    Ok(())
}

fn check_costs(model: &LadderModel, costs: &[f64]) -> Result<(), LadderError> {
    if costs.len() != model.dims.len() {
        return Err(LadderError::Config(format!(
            "{} denoising costs for {} layers",
            costs.len(),
            model.dims.len()
        )));
    }
    Ok(())
}

fn check_noise(model: &LadderModel, noise: &Noise, rows: usize) -> Result<(), LadderError> {
    let ok = noise.per_layer.len() == model.dims.len()
        && noise
            .per_layer
            .iter()
            .zip(&model.dims)
            .all(|(m, &d)| m.nrows() == rows && m.ncols() == d);
    if ok {
        Ok(())
    } else {
        Err(LadderError::Config("noise realization does not match batch shape".into()))
    }
}

struct Evaluated {
    loss: LadderLoss,
    noisy: EncoderPass,
    clean: EncoderPass,
    dec: DecoderPass,
    groups: Vec<Range<usize>>,
}

fn evaluate(
    model: &LadderModel,
    batch: &LadderBatch,
    sigma: f64,
    costs: &[f64],
    noise: &Noise,
) -> Result<Evaluated, LadderError> {
    check_batch(model, batch)?;
    check_costs(model, costs)?;
    let x = batch.stacked();
    check_noise(model, noise, x.nrows())?;
    let groups = batch.groups();
    let noisy = encode(model, &x, &groups, sigma, Some(noise))?;
    let clean = encode(model, &x, &groups, 0.0, None)?;
    let dec = decode(model, &noisy, &clean, &groups);

    let n_layers = model.n_layers();
    let n_lab = batch.n_labeled();
    let supervised = if n_lab == 0 {
        0.0
    } else {
        let p = &noisy.h[n_layers];
        -batch
            .labels
            .iter()
            .enumerate()
            .map(|(i, &y)| p[(i, y)].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n_lab as f64
    };
    let rows = x.nrows() as f64;
    let denoise_per_layer: Vec<f64> = (0..=n_layers)
        .map(|l| {
            if costs[l] == 0.0 {
                return 0.0;
            }
            let sq = (&dec.zhat_bn[l] - &clean.z[l]).norm_squared();
            costs[l] / model.dims[l] as f64 * sq / rows
        })
        .collect();
    let total = supervised + denoise_per_layer.iter().sum::<f64>();
    Ok(Evaluated {
        loss: LadderLoss {
            total,
            supervised,
            denoise_per_layer,
        },
        noisy,
        clean,
        dec,
        groups,
    })
}

fn backward(model: &LadderModel, batch: &LadderBatch, costs: &[f64], ev: &Evaluated) -> LadderParams {
    let n_layers = model.n_layers();
    let p = &model.params;
    let (noisy, clean, dec) = (&ev.noisy, &ev.clean, &ev.dec);
    let rows = ev.noisy.z[0].nrows();
    let mut grads = LadderParams::zeros_like(p);
    let zeros = |l: usize| DMatrix::<f64>::zeros(rows, model.dims[l]);

    let mut d_noisy_z: Vec<DMatrix<f64>> = (0..=n_layers).map(zeros).collect();
    let mut d_clean_z: Vec<DMatrix<f64>> = (0..=n_layers).map(zeros).collect();
    let mut d_zhat: Vec<DMatrix<f64>> = (0..=n_layers).map(zeros).collect();
    let n_groups = ev.groups.len();
    let mut d_clean_mean: Vec<Vec<Vec<f64>>> = (0..=n_layers)
        .map(|l| vec![vec![0.0; model.dims[l]]; n_groups])
        .collect();
    let mut d_clean_std = d_clean_mean.clone();

    // reconstruction costs
    for l in 0..=n_layers {
        if costs[l] == 0.0 {
            continue;
        }
        let coef = 2.0 * costs[l] / (model.dims[l] as f64 * rows as f64);
        let d_bn = (&dec.zhat_bn[l] - &clean.z[l]) * coef;
        d_clean_z[l] -= &d_bn;
        if l == 0 {
            d_zhat[0] += &d_bn;
            continue;
        }
        for (gi, st) in clean.stats[l].iter().enumerate() {
            for j in 0..model.dims[l] {
                let s = st.std[j];
                let mut sum = 0.0;
                let mut sum_bn = 0.0;
                for i in st.rows.clone() {
                    let g = d_bn[(i, j)];
                    d_zhat[l][(i, j)] += g / s;
                    sum += g;
                    sum_bn += g * dec.zhat_bn[l][(i, j)];
                }
                d_clean_mean[l][gi][j] -= sum / s;
                d_clean_std[l][gi][j] -= sum_bn / s;
            }
        }
    }

    // decoder, bottom to top
    let mut d_top_output = zeros(n_layers);
    for l in 0..=n_layers {
        let (dzt, du) = combine_backward(&noisy.z[l], &dec.u[l], &p.comb[l], &d_zhat[l], &mut grads.comb[l]);
        d_noisy_z[l] += dzt;
        let du_pre = bn_backward(&dec.u[l], &dec.u_stats[l], &du, None);
        if l < n_layers {
            grads.v[l] += du_pre.transpose() * &dec.zhat[l + 1];
            let back = &du_pre * &p.v[l];
            d_zhat[l + 1] += back;
        } else {
            d_top_output = du_pre;
        }
    }

    // noisy top: softmax, cross-entropy on labeled rows
    let probs = &noisy.h[n_layers];
    let mut dq = DMatrix::zeros(rows, model.dims[n_layers]);
    for i in 0..rows {
        let dot: f64 = (0..probs.ncols()).map(|j| d_top_output[(i, j)] * probs[(i, j)]).sum();
        for j in 0..probs.ncols() {
            dq[(i, j)] = probs[(i, j)] * (d_top_output[(i, j)] - dot);
        }
    }
    let n_lab = batch.n_labeled();
    for (i, &y) in batch.labels.iter().enumerate() {
        for j in 0..probs.ncols() {
            let target = if j == y { 1.0 } else { 0.0 };
            dq[(i, j)] += (probs[(i, j)] - target) / n_lab as f64;
        }
    }
    scale_shift_backward(&dq, &noisy.z[n_layers], n_layers, p, &mut grads, &mut d_noisy_z[n_layers]);

    // noisy encoder, top to bottom
    for l in (1..=n_layers).rev() {
        let d_pre = bn_backward(&noisy.z_norm[l], &noisy.stats[l], &d_noisy_z[l], None);
        grads.w[l - 1] += d_pre.transpose() * &noisy.h[l - 1];
        if l > 1 {
            let dh = &d_pre * &p.w[l - 1];
            let dq = relu_backward(&dh, &noisy.z[l - 1], &p.gamma[l - 2], &p.beta[l - 2]);
            scale_shift_backward(&dq, &noisy.z[l - 1], l - 1, p, &mut grads, &mut d_noisy_z[l - 1]);
        }
    }

    // clean encoder, top to bottom
    for l in (1..=n_layers).rev() {
        let d_pre = bn_backward(
            &clean.z_norm[l],
            &clean.stats[l],
            &d_clean_z[l],
            Some((&d_clean_mean[l], &d_clean_std[l])),
        );
        grads.w[l - 1] += d_pre.transpose() * &clean.h[l - 1];
        if l > 1 {
            let dh = &d_pre * &p.w[l - 1];
            let dq = relu_backward(&dh, &clean.z[l - 1], &p.gamma[l - 2], &p.beta[l - 2]);
            scale_shift_backward(&dq, &clean.z[l - 1], l - 1, p, &mut grads, &mut d_clean_z[l - 1]);
        }
    }
    grads
}

fn relu_backward(dh: &DMatrix<f64>, z: &DMatrix<f64>, gamma: &[f64], beta: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(dh.nrows(), dh.ncols(), |i, j| {
        if gamma[j] * (z[(i, j)] + beta[j]) > 0.0 {
            dh[(i, j)]
        } else {
            0.0
        }
    })
}

/// Backward through `q = gamma * (z + beta)` of encoder layer `l` (1-based).
fn scale_shift_backward(
    dq: &DMatrix<f64>,
    z: &DMatrix<f64>,
    l: usize,
    p: &LadderParams,
    grads: &mut LadderParams,
    dz: &mut DMatrix<f64>,
) {
    let (gamma, beta) = (&p.gamma[l - 1], &p.beta[l - 1]);
    for j in 0..dq.ncols() {
        let mut dg = 0.0;
        let mut db = 0.0;
        for i in 0..dq.nrows() {
            let g = dq[(i, j)];
            dg += g * (z[(i, j)] + beta[j]);
            db += g;
            dz[(i, j)] += g * gamma[j];
        }
        grads.gamma[l - 1][j] += dg;
        grads.beta[l - 1][j] += db * gamma[j];
    }
}

/// Builds a model with Gaussian weights of variance `1 / fan_in`, unit scale,
/// zero shift, and combinators starting at `zhat = 0` (a2 = a7 = 1, all others 0).
pub fn init_ladder(config: &LadderConfig) -> Result<LadderModel, LadderError> {
    config.validate()?;
    let dims = config.layer_dims.clone();
    let n_layers = dims.len() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut gauss = |rows: usize, cols: usize, fan_in: usize| {
        let scale = 1.0 / (fan_in as f64).sqrt();
        DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
    };
    let w = (1..=n_layers).map(|l| gauss(dims[l], dims[l - 1], dims[l - 1])).collect();
    let v = (0..n_layers).map(|l| gauss(dims[l], dims[l + 1], dims[l + 1])).collect();
    let comb = dims
        .iter()
        .map(|&d| {
            let mut a = DMatrix::zeros(COMBINATOR_PARAMS, d);
            for j in 0..d {
                a[(1, j)] = 1.0;
                a[(6, j)] = 1.0;
            }
            a
        })
        .collect();
    Ok(LadderModel {
        params: LadderParams {
            w,
            gamma: dims[1..].iter().map(|&d| vec![1.0; d]).collect(),
            beta: dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
            v,
            comb,
        },
        running_mean: dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
        running_var: dims[1..].iter().map(|&d| vec![1.0; d]).collect(),
        noise_sigma: config.noise_sigma,
        denoise_costs: config.denoise_costs.clone(),
        dims,
    })
}

fn check_input(model: &LadderModel, x: &DMatrix<f64>) -> Result<(), LadderError> {
    if x.ncols() != model.dims[0] {
        return Err(LadderError::DimMismatch {
            expected: model.dims[0],
            got: x.ncols(),
        });
    }
    if x.nrows() == 0 {
        return Err(LadderError::EmptyBatch);
    }
    Ok(())
}

/// Training-mode encoder pass over one batch (batch statistics), with a given noise realization.
pub fn ladder_forward_with_noise(
    model: &LadderModel,
    x: &DMatrix<f64>,
    sigma: f64,
    noise: &Noise,
) -> Result<ForwardRecord, LadderError> {
    check_input(model, x)?;
    check_noise(model, noise, x.nrows())?;
    let pass = encode(model, x, &[0..x.nrows()], sigma, Some(noise))?;
    let posteriors = pass.h[model.n_layers()].clone();
    let layers = (0..=model.n_layers())
        .map(|l| LayerRecord {
            z_pre: pass.z_pre[l].clone(),
            z: pass.z_norm[l].clone(),
            z_noisy: pass.z[l].clone(),
            h: pass.h[l].clone(),
        })
        .collect();
    Ok(ForwardRecord { layers, posteriors })
}

/// Training-mode encoder pass; `sigma = 0` gives the clean encoder.
pub fn ladder_forward<R: Rng + ?Sized>(
    model: &LadderModel,
    x: &DMatrix<f64>,
    sigma: f64,
    rng: &mut R,
) -> Result<ForwardRecord, LadderError> {
    check_input(model, x)?;
    let noise = if sigma > 0.0 {
        Noise::draw(&model.dims, x.nrows(), rng)
    } else {
        Noise::zeros(&model.dims, x.nrows())
    };
    ladder_forward_with_noise(model, x, sigma, &noise)
}

/// Supervised plus reconstruction loss for a fixed noise realization.
pub fn ladder_loss_with_noise(
    model: &LadderModel,
    batch: &LadderBatch,
    sigma: f64,
    costs: &[f64],
    noise: &Noise,
) -> Result<LadderLoss, LadderError> {
    Ok(evaluate(model, batch, sigma, costs, noise)?.loss)
}

pub fn ladder_loss<R: Rng + ?Sized>(
    model: &LadderModel,
    batch: &LadderBatch,
    sigma: f64,
    costs: &[f64],
    rng: &mut R,
) -> Result<LadderLoss, LadderError> {
    let noise = Noise::draw(&model.dims, batch.n_labeled() + batch.n_unlabeled(), rng);
    ladder_loss_with_noise(model, batch, sigma, costs, &noise)
}

/// Loss and its exact gradient with respect to every trainable tensor.
pub fn ladder_gradients(
    model: &LadderModel,
    batch: &LadderBatch,
    sigma: f64,
    costs: &[f64],
    noise: &Noise,
) -> Result<(LadderLoss, LadderParams), LadderError> {
    let ev = evaluate(model, batch, sigma, costs, noise)?;
    let grads = backward(model, batch, costs, &ev);
    Ok((ev.loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub total: f64,
    pub supervised: f64,
    pub denoise: f64,
    pub valid_accuracy: Option<f64>,
}

struct Adam {
    m: LadderParams,
    v: LadderParams,
    t: i32,
}

impl Adam {
    fn new(p: &LadderParams) -> Self {
        Self {
            m: LadderParams::zeros_like(p),
            v: LadderParams::zeros_like(p),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut LadderParams, grads: &LadderParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let g_all = grads.tensors();
        for (((p, m), v), (_, g)) in params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(g_all)
        {
            for k in 0..p.len() {
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Hands out indices cyclically from a permutation reshuffled after each pass.
struct CyclicSampler {
    perm: Vec<usize>,
    pos: usize,
}

impl CyclicSampler {
    fn new<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        Self { perm, pos: 0 }
    }

    fn take<R: Rng + ?Sized>(&mut self, k: usize, rng: &mut R) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.perm.len() {
                    self.perm.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.perm[self.pos - 1]
            })
            .collect()
    }
}

fn gather_rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)])
}

fn learning_rate(config: &LadderConfig, epoch: usize) -> f64 {
    let decay = config.decay_epochs.min(config.epochs);
    let remaining = config.epochs - epoch;
    if decay > 0 && remaining <= decay {
        config.learning_rate * remaining as f64 / decay as f64
    } else {
        config.learning_rate
    }
}

/// Running batch-norm estimates as bias-corrected exponential moving averages.
struct RunningStats {
    mean: Vec<Vec<f64>>,
    var: Vec<Vec<f64>>,
    steps: i32,
}

impl RunningStats {
    fn new(dims: &[usize]) -> Self {
        Self {
            mean: dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
            var: dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
            steps: 0,
        }
    }

    fn update(&mut self, clean: &EncoderPass, model: &mut LadderModel) {
        self.steps += 1;
        let correction = 1.0 - RUNNING_MOMENTUM.powi(self.steps);
        for l in 1..clean.z_pre.len() {
            let z = &clean.z_pre[l];
            let n = z.nrows() as f64;
            for (j, col) in z.column_iter().enumerate() {
                let m = col.sum() / n;
                let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
                let (em, ev) = (&mut self.mean[l - 1][j], &mut self.var[l - 1][j]);
                *em = RUNNING_MOMENTUM * *em + (1.0 - RUNNING_MOMENTUM) * m;
                *ev = RUNNING_MOMENTUM * *ev + (1.0 - RUNNING_MOMENTUM) * var;
                model.running_mean[l - 1][j] = *em / correction;
                model.running_var[l - 1][j] = *ev / correction;
            }
        }
    }
}

/// Labeled rows with their labels, used for validation during training.
pub type LabeledSet<'a> = (&'a DMatrix<f64>, &'a [usize]);

/// Mini-batch Adam training. Every batch holds up to `batch_size` labeled rows
/// and, when unlabeled data is present, up to `batch_size` unlabeled rows.
pub fn train_ladder(
    config: &LadderConfig,
    train: &LadderBatch,
    valid: Option<LabeledSet<'_>>,
) -> Result<(LadderModel, Vec<EpochStats>), LadderError> {
    let mut model = init_ladder(config)?;
    if train.n_labeled() == 0 {
        return Err(LadderError::NoLabels);
    }
    check_batch(&model, train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let (n_lab, n_unl) = (train.n_labeled(), train.n_unlabeled());
    let mut lab_sampler = CyclicSampler::new(n_lab, &mut rng);
    let mut unl_sampler = CyclicSampler::new(n_unl, &mut rng);
    let batches_per_epoch = n_lab.max(n_unl).div_ceil(config.batch_size);
    let mut adam = Adam::new(&model.params);
    let mut running = RunningStats::new(&config.layer_dims);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = learning_rate(config, epoch);
        let mut sums = (0.0, 0.0, 0.0);
        for _ in 0..batches_per_epoch {
            let li = lab_sampler.take(config.batch_size.min(n_lab), &mut rng);
            let ui = unl_sampler.take(config.batch_size.min(n_unl), &mut rng);
            let batch = LadderBatch::with_unlabeled(
                gather_rows(&train.labeled_x, &li),
                li.iter().map(|&i| train.labels[i]).collect(),
                gather_rows(&train.unlabeled_x, &ui),
            );
            let noise = Noise::draw(&config.layer_dims, li.len() + ui.len(), &mut rng);
            let ev = match evaluate(&model, &batch, config.noise_sigma, &config.denoise_costs, &noise) {
                Ok(ev) => ev,
                Err(LadderError::NonFinite { .. }) => return Err(LadderError::Diverged { epoch }),
                Err(e) => return Err(e),
            };
            if !ev.loss.total.is_finite() {
                return Err(LadderError::Diverged { epoch });
            }
            let grads = backward(&model, &batch, &config.denoise_costs, &ev);
            running.update(&ev.clean, &mut model);
            adam.step(&mut model.params, &grads, lr);
            sums.0 += ev.loss.total;
            sums.1 += ev.loss.supervised;
            sums.2 += ev.loss.denoise();
        }
        let nb = batches_per_epoch as f64;
        let valid_accuracy = match valid {
            Some((x, y)) => {
                let (pred, _) = predict_ladder(&model, x)?;
                Some(pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len().max(1) as f64)
            }
            None => None,
        };
        history.push(EpochStats {
            epoch,
            learning_rate: lr,
            total: sums.0 / nb,
            supervised: sums.1 / nb,
            denoise: sums.2 / nb,
            valid_accuracy,
        });
    }
    Ok((model, history))
}

/// Index of the largest value, ties to the lowest index.
pub(crate) fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (j, v) in row.enumerate() {
        if v > best_v {
            best = j;
            best_v = v;
        }
    }
    best
}

/// Clean-encoder inference using running batch-norm statistics.
pub fn predict_ladder(model: &LadderModel, x: &DMatrix<f64>) -> Result<(Vec<usize>, DMatrix<f64>), LadderError> {
    check_input(model, x)?;
    let n_layers = model.n_layers();
    let p = &model.params;
    let mut h = x.clone();
    for l in 1..=n_layers {
        let mut z = &h * p.w[l - 1].transpose();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            let m = model.running_mean[l - 1][j];
            let s = (model.running_var[l - 1][j] + BN_EPSILON).sqrt();
            col.apply(|v| *v = (*v - m) / s);
        }
        h = activate(&scale_shift(&z, &p.gamma[l - 1], &p.beta[l - 1]), l == n_layers);
        check_finite(&h, l)?;
    }
    let classes = (0..h.nrows()).map(|i| argmax(h.row(i).iter().copied())).collect();
    Ok((classes, h))
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s<W: Write>(w: &mut W, v: &[f64]) -> std::io::Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn get_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn get_f64s<R: Read>(r: &mut R, out: &mut [f64]) -> std::io::Result<()> {
    let mut b = [0u8; 8];
    for x in out {
        r.read_exact(&mut b)?;
        *x = f64::from_le_bytes(b);
    }
    Ok(())
}

impl LadderModel {
    /// Binary layout: magic line, layer count and dims (u64), sigma and costs,
    /// then every tensor of [`LadderParams::tensors`] followed by the running
    /// means and variances, all little-endian f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), LadderError> {
        w.write_all(LADDER_MAGIC)?;
        put_u64(&mut w, self.dims.len() as u64)?;
        for &d in &self.dims {
            put_u64(&mut w, d as u64)?;
        }
        put_f64s(&mut w, &[self.noise_sigma])?;
        put_f64s(&mut w, &self.denoise_costs)?;
        for (_, t) in self.params.tensors() {
            put_f64s(&mut w, t)?;
        }
        for t in self.running_mean.iter().chain(&self.running_var) {
            put_f64s(&mut w, t)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, LadderError> {
        let mut magic = vec![0u8; LADDER_MAGIC.len()];
        r.read_exact(&mut magic)
            .map_err(|_| LadderError::Format("missing header".into()))?;
        if magic != LADDER_MAGIC {
            return Err(LadderError::Format("not an AEC-LADDER v1 file".into()));
        }
        let fmt = |e: std::io::Error| LadderError::Format(format!("truncated: {e}"));
        let n = get_u64(&mut r).map_err(fmt)? as usize;
        if !(2..=64).contains(&n) {
            return Err(LadderError::Format(format!("implausible layer count {n}")));
        }
        let mut dims = Vec::with_capacity(n);
        for _ in 0..n {
            let d = get_u64(&mut r).map_err(fmt)? as usize;
            if d == 0 || d > 1 << 24 {
                return Err(LadderError::Format(format!("implausible layer size {d}")));
            }
            dims.push(d);
        }
        let mut sigma = [0.0];
        get_f64s(&mut r, &mut sigma).map_err(fmt)?;
        let mut costs = vec![0.0; n];
        get_f64s(&mut r, &mut costs).map_err(fmt)?;
        let config = LadderConfig {
            layer_dims: dims,
            noise_sigma: sigma[0],
            denoise_costs: costs,
            ..LadderConfig::with_defaults(1, 1)
        };
        let mut model = init_ladder(&config)?;
        for t in model.params.tensors_mut() {
            get_f64s(&mut r, t).map_err(fmt)?;
        }
        for t in model.running_mean.iter_mut().chain(model.running_var.iter_mut()) {
            get_f64s(&mut r, t).map_err(fmt)?;
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(LadderError::Format("trailing bytes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LadderError> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LadderError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dims: Vec<usize>, seed: u64) -> LadderConfig {
        let n = dims.len();
        LadderConfig {
            layer_dims: dims,
            noise_sigma: 0.3,
            denoise_costs: vec![1.0; n],
            batch_size: 8,
            epochs: 3,
            learning_rate: 0.01,
            decay_epochs: 1,
            seed,
        }
    }

    fn random_x(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn init_shapes_and_determinism() {
        let cfg = small_config(vec![4, 3, 2], 11);
        let m = init_ladder(&cfg).unwrap();
        assert_eq!(m.params.w[0].shape(), (3, 4));
        assert_eq!(m.params.w[1].shape(), (2, 3));
        assert_eq!(m.params.v[0].shape(), (4, 3));
        assert_eq!(m.params.comb[2].shape(), (10, 2));
        assert_eq!(init_ladder(&cfg).unwrap(), m);
        let bad = small_config(vec![4, 0, 2], 1);
        assert!(matches!(init_ladder(&bad), Err(LadderError::Config(_))));
    }

    #[test]
    fn zero_sigma_is_clean_path() {
        let m = init_ladder(&small_config(vec![5, 4, 3], 2)).unwrap();
        let x = random_x(6, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = ladder_forward(&m, &x, 0.0, &mut rng).unwrap();
        for layer in &rec.layers {
            assert_eq!(layer.z, layer.z_noisy);
        }
        for i in 0..6 {
            assert!((rec.posteriors.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_normalize_to_zero() {
        let m = init_ladder(&small_config(vec![3, 4, 2], 4)).unwrap();
        let x = DMatrix::from_fn(5, 3, |_, j| j as f64 + 0.5);
        let rec = ladder_forward(&m, &x, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(rec.layers[1].z.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn zero_costs_give_cross_entropy() {
        let m = init_ladder(&small_config(vec![5, 4, 3], 5)).unwrap();
        let x = random_x(7, 5, 6);
        let labels = vec![0, 1, 2, 0, 1, 2, 0];
        let batch = LadderBatch::labeled(x.clone(), labels.clone());
        let noise = Noise::draw(&[5, 4, 3], 7, &mut ChaCha8Rng::seed_from_u64(9));
        let loss = ladder_loss_with_noise(&m, &batch, 0.3, &[0.0; 3], &noise).unwrap();
        let rec = ladder_forward_with_noise(&m, &x, 0.3, &noise).unwrap();
        let ce = -labels
            .iter()
            .enumerate()
            .map(|(i, &y)| rec.posteriors[(i, y)].ln())
            .sum::<f64>()
            / 7.0;
        assert!((loss.total - ce).abs() < 1e-12);
        assert!(loss.denoise_per_layer.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn perfect_decoder_has_zero_reconstruction_cost() {
        // mu(u) = 0, v(u) = 1 makes zhat = z_noisy, which equals z when sigma = 0.
        let mut m = init_ladder(&small_config(vec![5, 4, 3], 6)).unwrap();
        for a in &mut m.params.comb {
            a.fill(0.0);
            a.row_mut(9).fill(1.0);
        }
        let batch = LadderBatch::labeled(random_x(7, 5, 1), vec![0; 7]);
        let noise = Noise::zeros(&[5, 4, 3], 7);
        let loss = ladder_loss_with_noise(&m, &batch, 0.0, &[1000.0, 10.0, 0.1], &noise).unwrap();
        // layer 0 compares zhat directly; upper layers compare the clean-normalized zhat
        assert!(loss.denoise_per_layer[0].abs() < 1e-20);
        let fwd = ladder_forward_with_noise(&m, &batch.labeled_x, 0.0, &noise).unwrap();
        assert!(fwd.layers[1].z_noisy == fwd.layers[1].z);
    }

    #[test]
    fn empty_batch_and_bad_labels() {
        let m = init_ladder(&small_config(vec![2, 3, 2], 1)).unwrap();
        let empty = LadderBatch::labeled(DMatrix::zeros(0, 2), vec![]);
        let noise = Noise::zeros(&[2, 3, 2], 0);
        assert!(matches!(
            ladder_loss_with_noise(&m, &empty, 0.1, &[1.0; 3], &noise),
            Err(LadderError::EmptyBatch)
        ));
        let bad = LadderBatch::labeled(random_x(2, 2, 1), vec![0, 5]);
        let noise = Noise::zeros(&[2, 3, 2], 2);
        assert!(matches!(
            ladder_loss_with_noise(&m, &bad, 0.1, &[1.0; 3], &noise),
            Err(LadderError::Label { label: 5, .. })
        ));
        assert!(matches!(
            predict_ladder(&m, &random_x(2, 3, 1)),
            Err(LadderError::DimMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = LadderConfig::with_defaults(4, 2);
        assert_eq!(learning_rate(&cfg, 0), 0.002);
        assert_eq!(learning_rate(&cfg, 50), 0.002);
        assert!((learning_rate(&cfg, 51) - 0.002).abs() < 1e-15);
        assert!((learning_rate(&cfg, 100) - 0.002 / 50.0).abs() < 1e-15);
    }

    #[test]
    fn model_file_roundtrip() {
        let mut m = init_ladder(&small_config(vec![3, 4, 2], 8)).unwrap();
        m.running_mean[0][1] = 0.25;
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"AEC-LADDER v1\n"));
        assert_eq!(LadderModel::read_from(&buf[..]).unwrap(), m);
        buf.truncate(buf.len() - 3);
        assert!(matches!(LadderModel::read_from(&buf[..]), Err(LadderError::Format(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let x = random_x(20, 4, 2);
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let batch = LadderBatch::with_unlabeled(x.clone(), labels, random_x(30, 4, 3));
        let cfg = small_config(vec![4, 6, 2], 21);
        let (m1, h1) = train_ladder(&cfg, &batch, None).unwrap();
        let (m2, h2) = train_ladder(&cfg, &batch, None).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
    }
}
