//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
//! `--config FILE` injects `key=value` lines as flags placed before the
//! user's own flags, so explicit flags win.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use crate::audio_prep::{self, load_wav, preprocess, write_wav, AudioError, PrepConfig};
use crate::elm::{ElmError, KernelKind, KernelSpec};
use crate::features::{read_embeddings, write_embeddings, FeatureError, FeatureMatrix, MelParams};
use crate::harness::{
    self, consensus_label, evaluate, extract_features, generate_synthetic, human_accuracy, make_splits,
    read_annotations, read_manifest, read_manifest_from, run_experiment, write_manifest, train_model, DatasetManifest, ElmVariant, ExperimentConfig,
    FeatureConfig, FeatureMode, HarnessError, LadderSpec, ModelSpec, Split, SplitMode, SynthConfig, TrainedModel,
};
use crate::ladder::LadderError;
use crate::normalize::{apply_normalization, fit_norm_stats, NormError, NormStats};
use crate::svm::{SvmError, SvmParams, DEFAULT_MAX_ITER, DEFAULT_TOL};

pub const SEED_ENV: &str = "AEC_SEED";

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

fn invalid(m: impl Display) -> CliError {
    CliError::Validation(m.to_string())
}

fn runtime(m: impl Display) -> CliError {
    CliError::Runtime(m.to_string())
}

fn classify(validation: bool, e: impl Display) -> CliError {
    if validation {
        invalid(e)
    } else {
        runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        runtime(e)
    }
}

fn audio_runtime(e: &AudioError) -> bool {
    matches!(e, AudioError::Io { .. } | AudioError::Decode(_))
}

fn feature_runtime(e: &FeatureError) -> bool {
    matches!(e, FeatureError::Io(_))
}

fn norm_runtime(e: &NormError) -> bool {
    match e {
        NormError::Io(_) => true,
        NormError::Feature(f) => feature_runtime(f),
        _ => false,
    }
}

fn ladder_runtime(e: &LadderError) -> bool {
    matches!(e, LadderError::NonFinite { .. } | LadderError::Diverged { .. } | LadderError::Io(_))
}

fn elm_runtime(e: &ElmError) -> bool {
    matches!(e, ElmError::Factorization | ElmError::Io(_))
}

fn svm_runtime(e: &SvmError) -> bool {
    match e {
        SvmError::NonConvergence { .. } | SvmError::Io(_) => true,
        SvmError::InClass { source, .. } => svm_runtime(source),
        _ => false,
    }
}

fn harness_runtime(e: &HarnessError) -> bool {
    match e {
        HarnessError::Audio(a) => audio_runtime(a),
        HarnessError::Feature(f) => feature_runtime(f),
        HarnessError::Norm(n) => norm_runtime(n),
        HarnessError::Ladder(l) => ladder_runtime(l),
        HarnessError::Elm(x) => elm_runtime(x),
        HarnessError::Svm(s) => svm_runtime(s),
        HarnessError::Csv(c) => c.is_io_error(),
        HarnessError::Io(_) => true,
        HarnessError::Clip { source, .. } => harness_runtime(source),
        other => !other.is_validation(),
    }
}

macro_rules! classified {
    ($($ty:ty => $runtime:ident),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                classify(!$runtime(&e), e)
            }
        })*
    };
}

classified! {
    AudioError => audio_runtime,
    FeatureError => feature_runtime,
    NormError => norm_runtime,
    LadderError => ladder_runtime,
    ElmError => elm_runtime,
    SvmError => svm_runtime,
    HarnessError => harness_runtime,
}

#[derive(Debug, Parser)]
#[command(
    name = "aec",
    version,
    about = "Audio event classification pipeline",
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Offset correction, resampling and A-weighted loudness normalization of one WAV file.
    Prep(PrepArgs),
    /// Utterance features for every clip of a manifest.
    Features(FeaturesArgs),
    /// Fit whitening statistics on a feature file.
    FitNorm(FitNormArgs),
    /// Train a classifier on a feature file.
    Train(TrainArgs),
    /// Score predictions (or a model) against a manifest.
    Eval(EvalArgs),
    /// Split, extract, normalize, train and evaluate in one run.
    Experiment(ExperimentArgs),
    /// Generate the synthetic 13-class corpus.
    Synth(SynthArgs),
    /// Inter-judge accuracy of a three-judge annotation file.
    HumanAcc(HumanAccArgs),
}

#[derive(Debug, Args, Serialize)]
struct SeedArgs {
    /// Seed for all randomness; falls back to $AEC_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

impl SeedArgs {
    fn resolve(&mut self) -> Result<u64, CliError> {
        let seed = match self.seed {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
                Err(_) => 0,
            },
        };
        self.seed = Some(seed);
        Ok(seed)
    }
}

#[derive(Debug, Args, Serialize)]
struct PrepArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = audio_prep::DEFAULT_TARGET_HZ)]
    target_hz: u32,
    #[arg(long, default_value_t = audio_prep::DEFAULT_TARGET_LEVEL_DBA, allow_negative_numbers = true)]
    target_level: f64,
}

#[derive(Debug, Args, Serialize, Clone)]
struct FeatureOpts {
    #[arg(long, default_value_t = audio_prep::DEFAULT_TARGET_HZ)]
    target_hz: u32,
    #[arg(long, default_value_t = audio_prep::DEFAULT_TARGET_LEVEL_DBA, allow_negative_numbers = true)]
    target_level: f64,
    #[arg(long, default_value_t = 25.0)]
    window_ms: f64,
    #[arg(long, default_value_t = 10.0)]
    hop_ms: f64,
    #[arg(long, default_value_t = 64)]
    mel_bands: usize,
    #[arg(long, default_value_t = 50.0)]
    fmin: f64,
    #[arg(long, default_value_t = 8000.0)]
    fmax: f64,
    #[arg(long, default_value_t = crate::features::DEFAULT_SEGMENT_S)]
    segment_s: f64,
    #[arg(long, default_value_t = crate::features::DEFAULT_SEGMENT_OVERLAP)]
    segment_overlap: f64,
    #[arg(long, default_value_t = crate::features::DEFAULT_N_MFCC)]
    n_mfcc: usize,
}

impl FeatureOpts {
    fn config(&self) -> FeatureConfig {
        FeatureConfig {
            prep: PrepConfig {
                target_hz: self.target_hz,
                target_level_dba: self.target_level,
            },
            mel: MelParams {
                window_ms: self.window_ms,
                hop_ms: self.hop_ms,
                n_mels: self.mel_bands,
                fmin_hz: self.fmin,
                fmax_hz: self.fmax,
                ..MelParams::default()
            },
            segment_s: self.segment_s,
            segment_overlap: self.segment_overlap,
            n_mfcc: self.n_mfcc,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct FeaturesArgs {
    #[arg(long, default_value = "manifest.csv")]
    manifest: PathBuf,
    /// logmel-pooled or mfcc-zcr
    #[arg(long, default_value = "logmel-pooled")]
    mode: String,
    /// Output feature file (`.csv` for text, anything else binary).
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    features: FeatureOpts,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Debug, Args, Serialize)]
struct FitNormArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Restrict fitting to clips of this manifest in `--split`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args, Serialize, Clone)]
struct ModelOpts {
    /// ladder, elm or svm
    #[arg(long, default_value = "ladder")]
    model: String,
    /// Regularization (default 100 for elm, 1 for svm).
    #[arg(long)]
    c: Option<f64>,
    /// linear, polynomial or rbf (default polynomial for elm, linear for svm).
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long, default_value_t = 2)]
    degree: u32,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    coef0: f64,
    /// RBF width (default 1/d).
    #[arg(long)]
    gamma: Option<f64>,
    /// kernel or random
    #[arg(long, default_value = "kernel")]
    elm_variant: String,
    #[arg(long, default_value_t = crate::elm::DEFAULT_HIDDEN_MULTIPLIER)]
    hidden_multiplier: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: u64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![2048usize, 1024, 256])]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    /// One per layer including input and output (default 1000,10,0.1,...).
    #[arg(long, value_delimiter = ',')]
    costs: Option<Vec<f64>>,
    #[arg(long, default_value_t = 101)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    decay_epochs: usize,
}

impl ModelOpts {
    /// Fills model-dependent defaults and builds the specification.
    fn resolve(&mut self) -> Result<ModelSpec, CliError> {
        let kernel_kind = |k: &Option<String>, default: KernelKind| -> Result<KernelKind, CliError> {
            k.as_deref().map_or(Ok(default), |s| s.parse().map_err(invalid))
        };
        let kernel = |kind: KernelKind, me: &Self| KernelSpec {
            kind,
            gamma: me.gamma,
            degree: me.degree,
            coef0: me.coef0,
        };
        let spec = match self.model.as_str() {
            "ladder" => {
                if self.c.is_some() || self.kernel.is_some() {
                    return Err(invalid("--c and --kernel do not apply to the ladder model"));
                }
                ModelSpec::Ladder(LadderSpec {
                    hidden: self.hidden.clone(),
                    noise_sigma: self.sigma,
                    denoise_costs: self.costs.clone(),
                    batch_size: self.batch_size,
                    epochs: self.epochs,
                    learning_rate: self.lr,
                    decay_epochs: self.decay_epochs,
                })
            }
            "elm" => {
                let c = *self.c.get_or_insert(crate::elm::DEFAULT_C);
                let variant = match self.elm_variant.as_str() {
                    "kernel" => {
                        let kind = kernel_kind(&self.kernel, KernelKind::Polynomial)?;
                        self.kernel = Some(kind.name().into());
                        ElmVariant::Kernel(kernel(kind, self))
                    }
                    "random" => ElmVariant::Random {
                        hidden_multiplier: self.hidden_multiplier,
                    },
                    v => return Err(invalid(format!("unknown elm variant {v:?} (kernel, random)"))),
                };
                ModelSpec::Elm { variant, c }
            }
            "svm" => {
                let c = *self.c.get_or_insert(1.0);
                let kind = kernel_kind(&self.kernel, KernelKind::Linear)?;
                self.kernel = Some(kind.name().into());
                ModelSpec::Svm(SvmParams {
                    kernel: kernel(kind, self),
                    c,
                    tol: self.tol,
                    max_iter: self.max_iter,
                })
            }
            m => return Err(invalid(format!("unknown model {m:?} (ladder, elm, svm)"))),
        };
        self.validate(&spec)?;
        Ok(spec)
    }

    fn validate(&self, spec: &ModelSpec) -> Result<(), CliError> {
        match spec {
            ModelSpec::Ladder(s) => {
                if s.hidden.contains(&0) || s.batch_size == 0 || !(s.learning_rate > 0.0) || !(s.noise_sigma >= 0.0) {
                    return Err(invalid("ladder sizes, batch size and learning rate must be positive"));
                }
                if let Some(c) = &s.denoise_costs {
                    if c.len() != s.hidden.len() + 2 {
                        return Err(invalid(format!(
                            "--costs needs {} values (input, hidden layers, output)",
                            s.hidden.len() + 2
                        )));
                    }
                }
            }
            ModelSpec::Elm { variant, c } => {
                if !(*c > 0.0) {
                    return Err(invalid("--c must be positive"));
                }
                match variant {
                    ElmVariant::Kernel(k) => k.validate().map_err(invalid)?,
                    ElmVariant::Random { hidden_multiplier } if *hidden_multiplier == 0 => {
                        return Err(invalid("--hidden-multiplier must be positive"))
                    }
                    _ => {}
                }
            }
            ModelSpec::Svm(p) => {
                if !(p.c > 0.0) || !(p.tol > 0.0) {
                    return Err(invalid("--c and --tol must be positive"));
                }
                p.kernel.validate().map_err(invalid)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value = "manifest.csv")]
    manifest: PathBuf,
    /// Train on manifest clips in this split; `all` uses every clip.
    #[arg(long, default_value = "train")]
    split: String,
    /// Whitening statistics to apply before training.
    #[arg(long)]
    norm: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    #[serde(flatten)]
    seed: SeedArgs,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long, default_value = "manifest.csv")]
    manifest: PathBuf,
    /// Evaluate clips in this split; `all` uses every clip.
    #[arg(long, default_value = "test")]
    split: String,
    /// CSV of `clip_id,label` rows, in manifest order.
    #[arg(long, conflicts_with = "model")]
    predictions: Option<PathBuf>,
    #[arg(long, requires = "embeddings")]
    model: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    norm: Option<PathBuf>,
    /// Also write the report as JSON here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ExperimentArgs {
    #[arg(long, default_value = "manifest.csv")]
    manifest: PathBuf,
    /// logmel-pooled, mfcc-zcr or embeddings:<path>
    #[arg(long, default_value = "logmel-pooled")]
    features: String,
    /// Whiten and length-normalize with training statistics.
    #[arg(long)]
    normalize: bool,
    /// holdout[:fraction], kfold[:k] or manifest
    #[arg(long, default_value = "holdout:0.7")]
    split: String,
    /// Candidate C values picked on an inner split (elm and svm).
    #[arg(long, value_delimiter = ',')]
    c_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Report path; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    #[serde(flatten)]
    feature_opts: FeatureOpts,
    #[command(flatten)]
    #[serde(flatten)]
    seed: SeedArgs,
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value = "synth")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 13)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 5.0)]
    clip_s: f64,
    #[arg(long, default_value_t = 16000)]
    sample_rate: u32,
    #[arg(long, default_value_t = 20.0, allow_negative_numbers = true)]
    snr_db: f64,
    /// Also record split assignments in the manifest: holdout[:f] or kfold[:k].
    #[arg(long)]
    split: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    seed: SeedArgs,
}

#[derive(Debug, Args, Serialize)]
struct HumanAccArgs {
    /// CSV rows `clip_id,judge1,judge2,judge3`.
    #[arg(long)]
    annotations: PathBuf,
}

/// Resolved parameters as `key=value` lines, valid as a `--config` file.
fn resolved_lines<T: Serialize>(command: &str, args: &T) -> String {
    let mut out = format!("# aec {command} resolved parameters\n");
    let value = serde_json::to_value(args).expect("arguments serialize");
    let map: BTreeMap<String, serde_json::Value> = serde_json::from_value(value).expect("flat object");
    for (k, v) in map {
        let key = k.replace('_', "-");
        let text = match v {
            serde_json::Value::Null => continue,
            serde_json::Value::Bool(b) => b.to_string(),
            serde_json::Value::String(s) => s,
            serde_json::Value::Array(items) => items
                .iter()
                .map(|i| i.to_string().trim_matches('"').to_string())
                .collect::<Vec<_>>()
                .join(","),
            other => other.to_string(),
        };
        out += &format!("{key}={text}\n");
    }
    out
}

/// Reads `key=value` lines; blank lines and `#` comments are ignored.
fn config_flags(path: &Path) -> Result<Vec<OsString>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| invalid(format!("cannot read config file {}: {e}", path.display())))?;
    let mut flags = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| invalid(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        match value {
            "true" => flags.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => flags.push(OsString::from(format!("--{key}={value}"))),
        }
    }
    Ok(flags)
}

/// Removes `--config` from `argv` and splices the file's flags in right after the subcommand.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config = None;
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy().into_owned();
        if s == "--config" {
            config = Some(PathBuf::from(it.next().ok_or_else(|| invalid("--config needs a file"))?));
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = config else { return Ok(rest) };
    let flags = config_flags(&path)?;
    let sub = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|p| p + 2)
        .unwrap_or(rest.len());
    let mut out = rest[..sub.min(rest.len())].to_vec();
    out.extend(flags);
    out.extend_from_slice(&rest[sub.min(rest.len())..]);
    Ok(out)
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    dispatch_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn dispatch_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            return e.exit_code();
        }
    };
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return 1;
        }
    };
    match run(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

fn run(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Prep(a) => cmd_prep(a, out, err),
        Command::Features(a) => cmd_features(a, out, err),
        Command::FitNorm(a) => cmd_fit_norm(a, out, err),
        Command::Train(a) => cmd_train(a, out, err),
        Command::Eval(a) => cmd_eval(a, out, err),
        Command::Experiment(a) => cmd_experiment(a, out, err),
        Command::Synth(a) => cmd_synth(a, out, err),
        Command::HumanAcc(a) => cmd_human_acc(a, out, err),
    }
}

fn cmd_prep(a: PrepArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    write!(err, "{}", resolved_lines("prep", &a))?;
    let clip = load_wav(&a.input)?;
    let cfg = PrepConfig {
        target_hz: a.target_hz,
        target_level_dba: a.target_level,
    };
    let (clip, report) = preprocess(&clip, &cfg)?;
    write_wav(&a.output, &clip)?;
    writeln!(
        out,
        "median level {:.2} dBA, gain {:+.2} dB, {} frames, {} samples at {} Hz",
        report.median_level_dba,
        report.clip_gain_db,
        report.frame_levels_dba.len(),
        clip.len(),
        clip.sample_rate_hz()
    )?;
    Ok(())
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(runtime)
}

fn cmd_features(a: FeaturesArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    write!(err, "{}", resolved_lines("features", &a))?;
    let mode: FeatureMode = a.mode.parse()?;
    if matches!(mode, FeatureMode::Embeddings(_)) {
        return Err(invalid("--mode must be logmel-pooled or mfcc-zcr"));
    }
    let manifest = load_manifest(&a.manifest)?;
    let cfg = a.features.config();
    let feats = thread_pool(a.jobs)?.install(|| extract_features(&manifest, &mode, &cfg))?;
    let ids: Vec<String> = manifest.entries.iter().map(|e| e.clip_id.clone()).collect();
    write_embeddings(&a.output, &ids, &feats)?;
    writeln!(out, "wrote {} x {} features to {}", feats.rows(), feats.dims(), a.output.display())?;
    Ok(())
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    read_manifest(path).map_err(|e| match e {
        HarnessError::Io(io) => runtime(format!("cannot read manifest {}: {io}", path.display())),
        other => other.into(),
    })
}

fn parse_split_filter(s: &str) -> Result<Option<Split>, CliError> {
    if s == "all" {
        Ok(None)
    } else {
        s.parse::<Split>().map(Some).map_err(CliError::from)
    }
}

/// Manifest entries in `split` (all when `None`), as positions into the manifest.
fn manifest_subset(m: &DatasetManifest, split: Option<Split>) -> Result<Vec<usize>, CliError> {
    let idx: Vec<usize> = match split {
        None => (0..m.len()).collect(),
        Some(s) => m.indices_in(s),
    };
    if idx.is_empty() {
        return Err(invalid(format!(
            "manifest has no clips in split {}",
            split.map_or("all".into(), |s| s.to_string())
        )));
    }
    Ok(idx)
}

/// Feature rows for the given manifest entries, matched by clip id.
fn rows_for(m: &DatasetManifest, idx: &[usize], embeddings: &Path) -> Result<FeatureMatrix, CliError> {
    let (ids, feats) = read_embeddings(embeddings)?;
    let by_id: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let rows = idx
        .iter()
        .map(|&i| {
            let id = &m.entries[i].clip_id;
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| CliError::from(HarnessError::MissingEmbedding(id.clone())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(feats.select(&rows)?)
}

fn cmd_fit_norm(a: FitNormArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    write!(err, "{}", resolved_lines("fit-norm", &a))?;
    let feats = match &a.manifest {
        Some(mp) => {
            let m = load_manifest(mp)?;
            let idx = manifest_subset(&m, parse_split_filter(&a.split)?)?;
            rows_for(&m, &idx, &a.embeddings)?
        }
        None => read_embeddings(&a.embeddings)?.1,
    };
    let stats = fit_norm_stats(&feats)?;
    stats.save(&a.output)?;
    writeln!(out, "fitted {} dimensions on {} rows", stats.dims(), feats.rows())?;
    Ok(())
}

fn maybe_normalize(x: FeatureMatrix, norm: &Option<PathBuf>) -> Result<FeatureMatrix, CliError> {
    match norm {
        Some(p) => Ok(apply_normalization(&x, &NormStats::load(p)?)?),
        None => Ok(x),
    }
}

fn cmd_train(mut a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let seed = a.seed.resolve()?;
    let spec = a.model.resolve()?;
    write!(err, "{}", resolved_lines("train", &a))?;
    let m = load_manifest(&a.manifest)?;
    let split = parse_split_filter(&a.split)?;
    let idx = manifest_subset(&m, split)?;
    let x = maybe_normalize(rows_for(&m, &idx, &a.embeddings)?, &a.norm)?;
    let labels = m.labels();
    let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let model = train_model(&spec, &x, &y, m.n_classes(), seed)?;
    model.save(&a.output)?;
    writeln!(
        out,
        "trained {} on {} clips, {} classes; model written to {}",
        spec.name(),
        x.rows(),
        m.n_classes(),
        a.output.display()
    )?;
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| classify(!e.is_io_error(), e))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| classify(!e.is_io_error(), e))?;
        if rec.len() != 2 {
            return Err(invalid(format!("{}: row {} needs clip_id,label", path.display(), i + 1)));
        }
        if i == 0 && &rec[0] == "clip_id" {
            continue;
        }
        out.push((rec[0].to_string(), rec[1].to_string()));
    }
    Ok(out)
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    format: &'a str,
    class_names: &'a [String],
    report: &'a harness::EvalReport,
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    write!(err, "{}", resolved_lines("eval", &a))?;
    let m = load_manifest(&a.manifest)?;
    let idx = manifest_subset(&m, parse_split_filter(&a.split)?)?;
    let labels = m.labels();
    let truth: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let predicted: Vec<usize> = match (&a.predictions, &a.model) {
        (Some(p), None) => {
            let preds = read_predictions(p)?;
            if preds.len() != idx.len() {
                return Err(HarnessError::LengthMismatch {
                    predictions: preds.len(),
                    truth: idx.len(),
                }
                .into());
            }
            preds
                .iter()
                .zip(&idx)
                .map(|((id, label), &i)| {
                    if id != &m.entries[i].clip_id {
                        return Err(invalid(format!(
                            "prediction for {id:?} where the manifest has {:?}",
                            m.entries[i].clip_id
                        )));
                    }
                    m.class_index(label)
                        .ok_or_else(|| invalid(format!("unknown class {label:?} for clip {id:?}")))
                })
                .collect::<Result<_, _>>()?
        }
        (None, Some(model_path)) => {
            let emb = a.embeddings.as_ref().ok_or_else(|| invalid("--model needs --embeddings"))?;
            let model = TrainedModel::load(model_path)?;
            if model.n_classes() != m.n_classes() {
                return Err(invalid(format!(
                    "model has {} classes, manifest {}",
                    model.n_classes(),
                    m.n_classes()
                )));
            }
            let x = maybe_normalize(rows_for(&m, &idx, emb)?, &a.norm)?;
            model.predict(&x)?
        }
        _ => return Err(invalid("give either --predictions or --model with --embeddings")),
    };
    let report = evaluate(&predicted, &truth, m.n_classes())?;
    write!(out, "{}", report.summary(&m.class_names))?;
    if let Some(path) = &a.output {
        let doc = EvalOutput {
            format: harness::REPORT_MAGIC,
            class_names: &m.class_names,
            report: &report,
        };
        let text = serde_json::to_string_pretty(&doc).map_err(runtime)?;
        std::fs::write(path, format!("{}\n{text}\n", harness::REPORT_MAGIC))?;
    }
    Ok(())
}

fn cmd_experiment(mut a: ExperimentArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let seed = a.seed.resolve()?;
    let spec = a.model.resolve()?;
    let split: SplitMode = a.split.parse()?;
    let features: FeatureMode = a.features.parse()?;
    if let Some(grid) = &a.c_grid {
        if grid.is_empty() || grid.iter().any(|c| !(*c > 0.0)) {
            return Err(invalid("--c-grid values must be positive"));
        }
    }
    write!(err, "{}", resolved_lines("experiment", &a))?;
    let manifest = load_manifest(&a.manifest)?;
    let mut cfg = ExperimentConfig::new(features, spec, split, seed);
    cfg.feature_cfg = a.feature_opts.config();
    cfg.normalize = a.normalize;
    cfg.c_grid = a.c_grid.clone();
    cfg.jobs = a.jobs;
    let report = run_experiment(&manifest, &cfg)?;
    write!(err, "{}", report.summary())?;
    match &a.output {
        Some(p) => std::fs::write(p, report.to_text())?,
        None => write!(out, "{}", report.to_text())?,
    }
    Ok(())
}

fn cmd_synth(mut a: SynthArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let seed = a.seed.resolve()?;
    write!(err, "{}", resolved_lines("synth", &a))?;
    let cfg = SynthConfig {
        n_classes: a.classes,
        clips_per_class: a.per_class,
        clip_s: a.clip_s,
        sample_rate_hz: a.sample_rate,
        snr_db: a.snr_db,
    };
    let split: Option<SplitMode> = a.split.as_deref().map(str::parse).transpose()?;
    if split == Some(SplitMode::Predefined) {
        return Err(invalid("--split for synth must be holdout[:f] or kfold[:k]"));
    }
    let m = generate_synthetic(&cfg, &a.out_dir, seed)?;
    if let Some(mode) = split {
        let path = a.out_dir.join("manifest.csv");
        let raw = read_manifest_from(std::fs::File::open(&path)?)?;
        write_manifest(&path, &make_splits(&raw, mode, seed)?)?;
    }
    writeln!(
        out,
        "wrote {} clips in {} classes to {}",
        m.len(),
        m.n_classes(),
        a.out_dir.join("manifest.csv").display()
    )?;
    Ok(())
}

fn cmd_human_acc(a: HumanAccArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    write!(err, "{}", resolved_lines("human-acc", &a))?;
    let records = read_annotations(&a.annotations)?;
    let acc = human_accuracy(&records)?;
    let no_consensus = records.iter().filter(|r| consensus_label(r).is_none()).count();
    writeln!(out, "human accuracy {acc:.4} over {} records", records.len())?;
    writeln!(out, "records without consensus: {no_consensus}")?;
    Ok(())
}
