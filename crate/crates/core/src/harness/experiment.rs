use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{evaluate, make_splits, mean_std, DatasetManifest, EvalReport, HarnessError, SplitMode};
use crate::audio_prep::{load_wav, preprocess, PrepConfig};
use crate::elm::{
    predict_elm, train_kernel_elm, train_random_elm, ElmModel, KernelSpec, DEFAULT_C, DEFAULT_HIDDEN_MULTIPLIER,
};
use crate::features::{
    log_mel_segments, mfcc_zcr, pool_utterance, read_embeddings, FeatureMatrix, MelParams, RowRole,
    DEFAULT_N_MFCC, DEFAULT_SEGMENT_OVERLAP, DEFAULT_SEGMENT_S,
};
use crate::ladder::{predict_ladder, train_ladder, LadderBatch, LadderConfig, LadderModel};
use crate::normalize::{apply_normalization, fit_norm_stats};
use crate::svm::{predict_svm, train_ova_svm, SvmModel, SvmParams, DEFAULT_MAX_ITER, DEFAULT_TOL};

pub const REPORT_MAGIC: &str = "AEC-REPORT v1";
/// Fraction of the training portion used to fit candidates during C selection.
pub const GRID_TRAIN_FRACTION: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMode {
    LogMelPooled,
    MfccZcr,
    Embeddings(PathBuf),
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureMode::LogMelPooled => f.write_str("logmel-pooled"),
            FeatureMode::MfccZcr => f.write_str("mfcc-zcr"),
            FeatureMode::Embeddings(p) => write!(f, "embeddings:{}", p.display()),
        }
    }
}

impl FromStr for FeatureMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logmel-pooled" => Ok(FeatureMode::LogMelPooled),
            "mfcc-zcr" => Ok(FeatureMode::MfccZcr),
            _ => match s.strip_prefix("embeddings:") {
                Some(p) if !p.is_empty() => Ok(FeatureMode::Embeddings(PathBuf::from(p))),
                _ => Err(HarnessError::Config(format!(
                    "feature mode {s:?} (expected logmel-pooled, mfcc-zcr or embeddings:<path>)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub prep: PrepConfig,
    pub mel: MelParams,
    pub segment_s: f64,
    pub segment_overlap: f64,
    pub n_mfcc: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            prep: PrepConfig::default(),
            mel: MelParams::default(),
            segment_s: DEFAULT_SEGMENT_S,
            segment_overlap: DEFAULT_SEGMENT_OVERLAP,
            n_mfcc: DEFAULT_N_MFCC,
        }
    }
}

/// Utterance features of one WAV file after preprocessing.
pub fn clip_features(path: &Path, mode: &FeatureMode, cfg: &FeatureConfig) -> Result<Vec<f64>, HarnessError> {
    let clip = load_wav(path)?;
    let (clip, _) = preprocess(&clip, &cfg.prep)?;
    match mode {
        FeatureMode::LogMelPooled => {
            let seg = log_mel_segments(&clip, &cfg.mel, cfg.segment_s, cfg.segment_overlap)?;
            Ok(pool_utterance(&seg))
        }
        FeatureMode::MfccZcr => Ok(mfcc_zcr(&clip, &cfg.mel, cfg.n_mfcc)?),
        FeatureMode::Embeddings(_) => Err(HarnessError::Config("embeddings are read, not computed".into())),
    }
}

/// One row per manifest entry, in manifest order.
pub fn extract_features(
    manifest: &DatasetManifest,
    mode: &FeatureMode,
    cfg: &FeatureConfig,
) -> Result<FeatureMatrix, HarnessError> {
    let rows: Vec<Vec<f64>> = match mode {
        FeatureMode::Embeddings(path) => {
            let (ids, m) = read_embeddings(path)?;
            let by_id: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
            manifest
                .entries
                .iter()
                .map(|e| {
                    by_id
                        .get(e.clip_id.as_str())
                        .map(|&i| m.row(i).to_vec())
                        .ok_or_else(|| HarnessError::MissingEmbedding(e.clip_id.clone()))
                })
                .collect::<Result<_, _>>()?
        }
        _ => manifest
            .entries
            .par_iter()
            .map(|e| {
                clip_features(&e.path, mode, cfg).map_err(|err| HarnessError::Clip {
                    clip_id: e.clip_id.clone(),
                    source: Box::new(err),
                })
            })
            .collect::<Result<_, _>>()?,
    };
    Ok(FeatureMatrix::from_rows(&rows, RowRole::Utterance)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderSpec {
    pub hidden: Vec<usize>,
    pub noise_sigma: f64,
    /// `None` selects [`default_denoise_costs`].
    pub denoise_costs: Option<Vec<f64>>,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub decay_epochs: usize,
}

impl Default for LadderSpec {
    fn default() -> Self {
        let d = LadderConfig::with_defaults(1, 1);
        Self {
            hidden: d.layer_dims[1..d.layer_dims.len() - 1].to_vec(),
            noise_sigma: d.noise_sigma,
            denoise_costs: None,
            batch_size: d.batch_size,
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            decay_epochs: d.decay_epochs,
        }
    }
}

/// `[1000, 10, 0.1, ...]` over `n_layers` layers including input and output.
pub fn default_denoise_costs(n_layers: usize) -> Vec<f64> {
    (0..n_layers)
        .map(|l| match l {
            0 => 1000.0,
            1 => 10.0,
            _ => 0.1,
        })
        .collect()
}

impl LadderSpec {
    pub fn config(&self, input_dim: usize, n_classes: usize, seed: u64) -> LadderConfig {
        let mut layer_dims = vec![input_dim];
        layer_dims.extend(&self.hidden);
        layer_dims.push(n_classes);
        LadderConfig {
            denoise_costs: self
                .denoise_costs
                .clone()
                .unwrap_or_else(|| default_denoise_costs(layer_dims.len())),
            layer_dims,
            noise_sigma: self.noise_sigma,
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            decay_epochs: self.decay_epochs,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElmVariant {
    Kernel(KernelSpec),
    Random { hidden_multiplier: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Ladder(LadderSpec),
    Elm { variant: ElmVariant, c: f64 },
    Svm(SvmParams),
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Ladder(_) => "ladder",
            ModelSpec::Elm { .. } => "elm",
            ModelSpec::Svm(_) => "svm",
        }
    }

    /// Ladder with the default architecture, polynomial kernel ELM, linear SVM.
    pub fn default_for(name: &str) -> Result<Self, HarnessError> {
        match name {
            "ladder" => Ok(ModelSpec::Ladder(LadderSpec::default())),
            "elm" => Ok(ModelSpec::Elm {
                variant: ElmVariant::Kernel(KernelSpec::polynomial(2, 1.0)),
                c: DEFAULT_C,
            }),
            "svm" => Ok(ModelSpec::Svm(SvmParams::default())),
            _ => Err(HarnessError::Config(format!("unknown model {name:?} (ladder, elm, svm)"))),
        }
    }

    fn with_c(&self, c: f64) -> Self {
        match self {
            ModelSpec::Elm { variant, .. } => ModelSpec::Elm { variant: *variant, c },
            ModelSpec::Svm(p) => ModelSpec::Svm(SvmParams { c, ..*p }),
            ModelSpec::Ladder(_) => self.clone(),
        }
    }

    /// Flat parameter listing for reproducibility records.
    pub fn record(&self, out: &mut BTreeMap<String, String>) {
        let mut put = |k: &str, v: String| {
            out.insert(k.to_string(), v);
        };
        let kernel = |put: &mut dyn FnMut(&str, String), k: &KernelSpec| {
            put("kernel", k.kind.name().to_string());
            put("kernel_degree", k.degree.to_string());
            put("kernel_coef0", format!("{:?}", k.coef0));
            put("kernel_gamma", k.gamma.map_or("1/d".into(), |g| format!("{g:?}")));
        };
        put("model", self.name().to_string());
        match self {
            ModelSpec::Ladder(s) => {
                put("ladder_hidden", join(&s.hidden));
                put("ladder_noise_sigma", format!("{:?}", s.noise_sigma));
                put(
                    "ladder_denoise_costs",
                    s.denoise_costs.as_ref().map_or("default".into(), |c| join_f(c)),
                );
                put("ladder_batch_size", s.batch_size.to_string());
                put("ladder_epochs", s.epochs.to_string());
                put("ladder_learning_rate", format!("{:?}", s.learning_rate));
                put("ladder_decay_epochs", s.decay_epochs.to_string());
            }
            ModelSpec::Elm { variant, c } => {
                put("c", format!("{c:?}"));
                match variant {
                    ElmVariant::Kernel(k) => {
                        put("elm_variant", "kernel".into());
                        kernel(&mut put, k);
                    }
                    ElmVariant::Random { hidden_multiplier } => {
                        put("elm_variant", "random".into());
                        put("elm_hidden_multiplier", hidden_multiplier.to_string());
                    }
                }
            }
            ModelSpec::Svm(p) => {
                put("c", format!("{:?}", p.c));
                put("svm_tol", format!("{:?}", p.tol));
                put("svm_max_iter", p.max_iter.to_string());
                kernel(&mut put, &p.kernel);
            }
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn join_f(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Ladder(LadderModel),
    Elm(ElmModel),
    Svm(SvmModel),
}

impl TrainedModel {
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<usize>, HarnessError> {
        Ok(match self {
            TrainedModel::Ladder(m) => predict_ladder(m, &x.to_dmatrix())?.0,
            TrainedModel::Elm(m) => predict_elm(m, x)?.0,
            TrainedModel::Svm(m) => predict_svm(m, x)?.0,
        })
    }

    pub fn n_classes(&self) -> usize {
        match self {
            TrainedModel::Ladder(m) => m.n_classes(),
            TrainedModel::Elm(m) => m.n_classes(),
            TrainedModel::Svm(m) => m.n_classes(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), HarnessError> {
        match self {
            TrainedModel::Ladder(m) => m.save(path)?,
            TrainedModel::Elm(m) => m.save(path)?,
            TrainedModel::Svm(m) => m.save(path)?,
        }
        Ok(())
    }

    /// Dispatches on the file's header line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let mut head = [0u8; 16];
        let n = std::fs::File::open(path)?.read(&mut head)?;
        let head = &head[..n];
        if head.starts_with(b"AEC-LADDER v1\n") {
            Ok(TrainedModel::Ladder(LadderModel::load(path)?))
        } else if head.starts_with(b"AEC-ELM v1\n") {
            Ok(TrainedModel::Elm(ElmModel::load(path)?))
        } else if head.starts_with(b"AEC-SVM v1\n") {
            Ok(TrainedModel::Svm(SvmModel::load(path)?))
        } else {
            Err(HarnessError::Config(format!("{} is not a model file", path.display())))
        }
    }
}

/// Trains on labeled rows. The ladder also receives the same rows as its unlabeled stream.
pub fn train_model(
    spec: &ModelSpec,
    x: &FeatureMatrix,
    labels: &[usize],
    n_classes: usize,
    seed: u64,
) -> Result<TrainedModel, HarnessError> {
    Ok(match spec {
        ModelSpec::Ladder(s) => {
            let cfg = s.config(x.dims(), n_classes, seed);
            let xm = x.to_dmatrix();
            let batch = LadderBatch::with_unlabeled(xm.clone(), labels.to_vec(), xm);
            TrainedModel::Ladder(train_ladder(&cfg, &batch, None)?.0)
        }
        ModelSpec::Elm {
            variant: ElmVariant::Kernel(k),
            c,
        } => TrainedModel::Elm(train_kernel_elm(x, labels, n_classes, k, *c)?),
        ModelSpec::Elm {
            variant: ElmVariant::Random { hidden_multiplier },
            c,
        } => TrainedModel::Elm(train_random_elm(x, labels, n_classes, *hidden_multiplier, *c, seed)?),
        ModelSpec::Svm(p) => TrainedModel::Svm(train_ova_svm(x, labels, n_classes, p)?),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub features: FeatureMode,
    pub feature_cfg: FeatureConfig,
    pub normalize: bool,
    pub model: ModelSpec,
    pub split: SplitMode,
    pub seed: u64,
    /// Candidate C values chosen on an inner stratified split of each training portion.
    pub c_grid: Option<Vec<f64>>,
    /// Worker threads; 0 uses all cores. Results do not depend on it.
    pub jobs: usize,
}

impl ExperimentConfig {
    pub fn new(features: FeatureMode, model: ModelSpec, split: SplitMode, seed: u64) -> Self {
        Self {
            features,
            feature_cfg: FeatureConfig::default(),
            normalize: true,
            model,
            split,
            seed,
            c_grid: None,
            jobs: 0,
        }
    }

    /// Every parameter that influences the result.
    pub fn record(&self) -> BTreeMap<String, String> {
        let mut r = BTreeMap::new();
        let f = &self.feature_cfg;
        r.insert("features".into(), self.features.to_string());
        r.insert("normalize".into(), self.normalize.to_string());
        r.insert("split".into(), self.split.to_string());
        r.insert("seed".into(), self.seed.to_string());
        r.insert("c_grid".into(), self.c_grid.as_ref().map_or("none".into(), |g| join_f(g)));
        r.insert("prep_target_hz".into(), f.prep.target_hz.to_string());
        r.insert("prep_target_level_dba".into(), format!("{:?}", f.prep.target_level_dba));
        r.insert("mel_window_ms".into(), format!("{:?}", f.mel.window_ms));
        r.insert("mel_hop_ms".into(), format!("{:?}", f.mel.hop_ms));
        r.insert("mel_bands".into(), f.mel.n_mels.to_string());
        r.insert("mel_fmin_hz".into(), format!("{:?}", f.mel.fmin_hz));
        r.insert("mel_fmax_hz".into(), format!("{:?}", f.mel.fmax_hz));
        r.insert("segment_s".into(), format!("{:?}", f.segment_s));
        r.insert("segment_overlap".into(), format!("{:?}", f.segment_overlap));
        r.insert("n_mfcc".into(), f.n_mfcc.to_string());
        self.model.record(&mut r);
        r
    }

    fn validate(&self) -> Result<(), HarnessError> {
        self.split.validate()?;
        if let Some(grid) = &self.c_grid {
            if matches!(self.model, ModelSpec::Ladder(_)) {
                return Err(HarnessError::Config("C grid applies to elm and svm only".into()));
            }
            if grid.is_empty() || grid.iter().any(|c| !(*c > 0.0)) {
                return Err(HarnessError::Config("C grid needs positive values".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub selected_c: Option<f64>,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub format: String,
    pub class_names: Vec<String>,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub folds: Vec<FoldResult>,
    pub parameters: BTreeMap<String, String>,
}

impl ExperimentReport {
    /// `AEC-REPORT v1` line followed by a JSON document.
    pub fn to_text(&self) -> String {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        format!("{REPORT_MAGIC}\n{json}\n")
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for f in &self.folds {
            s += &format!(
                "fold {}: accuracy {:.4} ({} train, {} test{})\n",
                f.fold,
                f.eval.weighted_accuracy,
                f.n_train,
                f.n_test,
                f.selected_c.map_or(String::new(), |c| format!(", C = {c}"))
            );
        }
        s += &format!("mean accuracy {:.4} +/- {:.4}\n", self.mean_accuracy, self.std_accuracy);
        s
    }
}

/// Stratified `(train, validation)` positions within `labels`.
fn inner_split(labels: &[usize], n_classes: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>), HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < 2 {
            return Err(HarnessError::Config(format!(
                "C selection needs two training examples of class {c}"
            )));
        }
        idx.shuffle(&mut rng);
        let n_train = ((GRID_TRAIN_FRACTION * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..n_train]);
        valid.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    valid.sort_unstable();
    Ok((train, valid))
}

fn select_c(
    spec: &ModelSpec,
    grid: &[f64],
    x: &FeatureMatrix,
    labels: &[usize],
    n_classes: usize,
    seed: u64,
) -> Result<f64, HarnessError> {
    let (tr, va) = inner_split(labels, n_classes, seed)?;
    let (xt, xv) = (x.select(&tr)?, x.select(&va)?);
    let yt: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
    let yv: Vec<usize> = va.iter().map(|&i| labels[i]).collect();
    let mut best = (f64::NEG_INFINITY, grid[0]);
    for &c in grid {
        let model = train_model(&spec.with_c(c), &xt, &yt, n_classes, seed)?;
        let acc = evaluate(&model.predict(&xv)?, &yv, n_classes)?.weighted_accuracy;
        if acc > best.0 {
            best = (acc, c);
        }
    }
    Ok(best.1)
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add((fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Trains and scores one train/test partition of precomputed features.
pub fn run_fold(
    config: &ExperimentConfig,
    features: &FeatureMatrix,
    labels: &[usize],
    n_classes: usize,
    train: &[usize],
    test: &[usize],
    fold: usize,
) -> Result<FoldResult, HarnessError> {
    let mut x_train = features.select(train)?;
    let mut x_test = features.select(test)?;
    if config.normalize {
        let stats = fit_norm_stats(&x_train)?;
        x_train = apply_normalization(&x_train, &stats)?;
        x_test = apply_normalization(&x_test, &stats)?;
    }
    let y_train: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let y_test: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let seed = fold_seed(config.seed, fold);
    let (spec, selected_c) = match &config.c_grid {
        Some(grid) => {
            let c = select_c(&config.model, grid, &x_train, &y_train, n_classes, seed)?;
            (config.model.with_c(c), Some(c))
        }
        None => (config.model.clone(), None),
    };
    let model = train_model(&spec, &x_train, &y_train, n_classes, seed)?;
    let eval = evaluate(&model.predict(&x_test)?, &y_test, n_classes)?;
    Ok(FoldResult {
        fold,
        n_train: train.len(),
        n_test: test.len(),
        selected_c,
        eval,
    })
}

/// Assigns splits, extracts features once, then trains and scores every fold.
pub fn run_experiment(manifest: &DatasetManifest, config: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    pool.install(|| {
        let manifest = make_splits(manifest, config.split, config.seed)?;
        let features = extract_features(&manifest, &config.features, &config.feature_cfg)?;
        run_experiment_on_features(&manifest, &features, config)
    })
}

/// As [`run_experiment`] with splits already assigned and features given in manifest order.
pub fn run_experiment_on_features(
    manifest: &DatasetManifest,
    features: &FeatureMatrix,
    config: &ExperimentConfig,
) -> Result<ExperimentReport, HarnessError> {
    config.validate()?;
    if features.rows() != manifest.len() {
        return Err(HarnessError::LengthMismatch {
            predictions: features.rows(),
            truth: manifest.len(),
        });
    }
    let labels = manifest.labels();
    let n_classes = manifest.n_classes();
    let folds = manifest.folds()?;
    let results = folds
        .par_iter()
        .enumerate()
        .map(|(k, (train, test))| run_fold(config, features, &labels, n_classes, train, test, k))
        .collect::<Result<Vec<_>, _>>()?;
    let fold_accuracies: Vec<f64> = results.iter().map(|r| r.eval.weighted_accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&fold_accuracies);
    Ok(ExperimentReport {
        format: REPORT_MAGIC.to_string(),
        class_names: manifest.class_names.clone(),
        fold_accuracies,
        mean_accuracy,
        std_accuracy,
        folds: results,
        parameters: config.record(),
    })
}

pub fn svm_defaults() -> SvmParams {
    SvmParams {
        kernel: KernelSpec::linear(),
        c: 1.0,
        tol: DEFAULT_TOL,
        max_iter: DEFAULT_MAX_ITER,
    }
}

pub fn random_elm_defaults() -> ElmVariant {
    ElmVariant::Random {
        hidden_multiplier: DEFAULT_HIDDEN_MULTIPLIER,
    }
}
