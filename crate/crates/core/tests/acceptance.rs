//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use aec::elm::{kernel_matrix, one_hot, predict_elm, train_kernel_elm, ElmModel, KernelSpec};
use aec::features::{write_embeddings, FeatureMatrix, RowRole};
use aec::harness::{
    default_denoise_costs, extract_features, generate_synthetic, human_accuracy, make_splits,
    run_experiment, run_experiment_on_features, AnnotationRecord, DatasetManifest, ExperimentConfig, FeatureMode,
    ManifestEntry, ModelSpec, SplitMode, SynthConfig,
};
use aec::ladder::{predict_ladder, train_ladder, LadderBatch, LadderConfig};
use aec::normalize::{apply_normalization, fit_norm_stats};
use aec::svm::{solve_dual, train_binary_svm, SvmParams};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit: Duration, o: Outcome) -> Outcome {
    let pass = o.pass && elapsed <= limit;
    outcome(pass, format!("{}; {:.2?} (limit {:?})", o.detail, elapsed, limit))
}

fn rows_of(x: &[Vec<f64>]) -> FeatureMatrix {
    FeatureMatrix::from_rows(x, RowRole::Utterance).unwrap()
}

fn uniform_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// Embeddings given as a file run through the whole protocol for every model.
fn criterion_1(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (classes, per_class, dim) = (4, 10, 1024);
    let mut entries = Vec::new();
    let mut rows = Vec::new();
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for (c, centre) in centres.iter().enumerate() {
        for i in 0..per_class {
            entries.push(ManifestEntry {
                clip_id: format!("clip-{c}-{i}"),
                path: dir.join("not-read.wav"),
                label: format!("class-{c}"),
                split: None,
            });
            rows.push(centre.iter().map(|m| m + 2.0 * rng.sample::<f64, _>(StandardNormal)).collect());
        }
    }
    let manifest = DatasetManifest::new(entries).unwrap();
    let path = dir.join("embeddings.emb");
    let ids: Vec<String> = manifest.entries.iter().map(|e| e.clip_id.clone()).collect();
    write_embeddings(&path, &ids, &rows_of(&rows)).unwrap();
    let mut details = Vec::new();
    for name in ["ladder", "elm", "svm"] {
        let mut model = ModelSpec::default_for(name).unwrap();
        if let ModelSpec::Ladder(spec) = &mut model {
            spec.hidden = vec![64, 32, 16];
            spec.epochs = 10;
        }
        let mut cfg = ExperimentConfig::new(
            FeatureMode::Embeddings(path.clone()),
            model,
            SplitMode::KFold { k: 5 },
            1,
        );
        cfg.normalize = true;
        match run_experiment(&manifest, &cfg) {
            Ok(r) if r.fold_accuracies.len() == 5 => details.push(format!("{name} mean {:.3}", r.mean_accuracy)),
            Ok(r) => return outcome(false, format!("{name}: {} folds", r.fold_accuracies.len())),
            Err(e) => return outcome(false, format!("{name}: {e}")),
        }
    }
    outcome(true, format!("1024-dim embeddings, 5 folds: {}", details.join(", ")))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<Vec<f64>> = (0..1000)
        .map(|_| (0..64).map(|j| j as f64 * 0.5 + (1.0 + j as f64 * 0.1) * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let x = rows_of(&x);
    let stats = fit_norm_stats(&x).unwrap();
    let out = apply_normalization(&x, &stats).unwrap();
    let norm_err = out
        .iter_rows()
        .map(|r| (r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max);
    let white: Vec<Vec<f64>> = x.iter_rows().map(|r| stats.whiten(r).unwrap()).collect();
    let n = white.len() as f64;
    let (mut mean_err, mut var_err) = (0.0f64, 0.0f64);
    for j in 0..x.dims() {
        let m = white.iter().map(|r| r[j]).sum::<f64>() / n;
        let v = white.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
        mean_err = mean_err.max(m.abs());
        var_err = var_err.max((v - 1.0).abs());
    }
    let pass = norm_err < 1e-6 && mean_err < 1e-6 && var_err < 1e-4;
    within(
        start.elapsed(),
        Duration::from_secs(1),
        outcome(
            pass,
            format!("max |norm-1| {norm_err:.1e}, max |mean| {mean_err:.1e}, max |var-1| {var_err:.1e}"),
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labeled = LadderBatch::labeled(common::gaussian(7, 5, &mut rng), vec![0, 1, 2, 0, 1, 2, 1]);
    let mixed = LadderBatch::with_unlabeled(common::gaussian(4, 5, &mut rng), vec![2, 0, 1, 1], common::gaussian(3, 5, &mut rng));
    let cases = [
        (&labeled, 0.3, vec![1.0, 0.7, 0.4]),
        (&mixed, 0.2, vec![1000.0, 10.0, 0.1]),
        (&labeled, 0.0, vec![0.0; 3]),
    ];
    let mut worst = (0.0, String::new());
    for (i, (batch, sigma, costs)) in cases.iter().enumerate() {
        let r = common::worst_relative_error(batch, *sigma, costs, 30 + i as u64);
        if r.0 > worst.0 {
            worst = r;
        }
    }
    within(
        start.elapsed(),
        Duration::from_secs(10),
        outcome(worst.0 < 1e-4, format!("worst relative error {:.2e} ({})", worst.0, worst.1)),
    )
}

fn criterion_4() -> Outcome {
    let gap = (0..20).map(|s| common::degeneration_gap(&[6, 5, 4, 3], 8, 400 + s)).fold(0.0, f64::max);
    outcome(gap < 1e-10, format!("max |ladder - plain MLP| over 20 batches {gap:.1e}"))
}

/// Two Gaussian classes separated along the first axis, passed through the
/// same whitening and length normalization the pipeline applies.
fn two_class_task(seed: u64) -> (LadderBatch, DMatrix<f64>, Vec<usize>) {
    let (d, sep) = (20, 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| {
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = DMatrix::from_fn(n, d, |i, j| {
            let shift = if j == 0 { if labels[i] == 0 { -sep } else { sep } } else { 0.0 };
            shift + rng.sample::<f64, _>(StandardNormal)
        });
        (x, labels)
    };
    let (xl, yl) = draw(10);
    let (xu, _) = draw(500);
    let (xt, yt) = draw(1000);
    let as_features = |m: &DMatrix<f64>| FeatureMatrix::from_dmatrix(m, RowRole::Utterance).unwrap();
    let train = DMatrix::from_fn(510, d, |i, j| if i < 10 { xl[(i, j)] } else { xu[(i - 10, j)] });
    let stats = fit_norm_stats(&as_features(&train)).unwrap();
    let norm = |m: &DMatrix<f64>| apply_normalization(&as_features(m), &stats).unwrap().to_dmatrix();
    (LadderBatch::with_unlabeled(norm(&xl), yl, norm(&xu)), norm(&xt), yt)
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let (mut ladder, mut supervised) = (0.0, 0.0);
    for seed in 0..10u64 {
        let (batch, xt, yt) = two_class_task(500 + seed);
        let accuracy = |costs: Vec<f64>| {
            let config = LadderConfig {
                layer_dims: vec![20, 64, 32, 2],
                denoise_costs: costs,
                seed,
                ..LadderConfig::with_defaults(20, 2)
            };
            let (model, _) = train_ladder(&config, &batch, None).unwrap();
            let (pred, _) = predict_ladder(&model, &xt).unwrap();
            pred.iter().zip(&yt).filter(|(p, t)| p == t).count() as f64 / yt.len() as f64
        };
        ladder += accuracy(default_denoise_costs(4)) / 10.0;
        supervised += accuracy(vec![0.0; 4]) / 10.0;
    }
    within(
        start.elapsed(),
        Duration::from_secs(300),
        outcome(
            ladder >= supervised,
            format!("mean accuracy ladder {ladder:.4} vs supervised-only {supervised:.4}"),
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ridge_gap = 0.0f64;
    for trial in 0..20 {
        let n = rng.random_range(2..=20);
        let d = rng.random_range(1..=5);
        let c = [0.1, 1.0, 100.0][trial % 3];
        let x = uniform_rows(n, d, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let model = train_kernel_elm(&rows_of(&x), &labels, 3, &KernelSpec::linear(), c).unwrap();
        let t = one_hot(&labels, 3);
        let beta = common::primal_ridge(&x, &common::matrix_rows(&t), c);
        let probe = uniform_rows(5, d, &mut rng);
        let (_, scores) = predict_elm(&model, &rows_of(&probe)).unwrap();
        for (i, row) in probe.iter().enumerate() {
            for j in 0..3 {
                let expected: f64 = row.iter().zip(&beta).map(|(v, b)| v * b[j]).sum();
                ridge_gap = ridge_gap.max((scores[(i, j)] - expected).abs());
            }
        }
    }
    let x = uniform_rows(15, 3, &mut rng);
    let labels: Vec<usize> = (0..15).map(|i| i % 3).collect();
    let spec = KernelSpec::rbf(Some(2.0));
    let model = train_kernel_elm(&rows_of(&x), &labels, 3, &spec, 1e8).unwrap();
    let ElmModel::Kernel { alpha, .. } = &model else { unreachable!() };
    let residual = (kernel_matrix(&rows_of(&x), &rows_of(&x), &spec) * alpha - one_hot(&labels, 3)).amax();
    let xor = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
    let xor_model = train_kernel_elm(&rows_of(&xor), &[0, 0, 1, 1], 2, &KernelSpec::rbf(Some(1.0)), 100.0).unwrap();
    let xor_ok = predict_elm(&xor_model, &rows_of(&xor)).unwrap().0 == [0, 0, 1, 1];
    outcome(
        ridge_gap < 1e-8 && residual < 1e-4 && xor_ok,
        format!("ridge gap {ridge_gap:.1e}, C=1e8 RBF residual {residual:.1e}, XOR fit {xor_ok}"),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = KernelSpec::rbf(Some(1.5));
    let (mut obj_gap, mut dec_gap) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.random_range(2..=8);
        let x = uniform_rows(n, 2, &mut rng);
        let mut y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        y[0] = 1.0;
        y[1] = -1.0;
        let c = [0.5, 1.0, 5.0, 50.0][rng.random_range(0..4)];
        let km = kernel_matrix(&rows_of(&x), &rows_of(&x), &spec);
        let brute = common::svm_brute_force(&common::matrix_rows(&km), &y, c);
        let sol = solve_dual(&km, &y, c, 1e-6, 1_000_000, None).unwrap();
        obj_gap = obj_gap.max((sol.objective - brute.objective).abs());
        let params = SvmParams {
            kernel: spec,
            c,
            tol: 1e-6,
            ..SvmParams::default()
        };
        let machine = train_binary_svm(&rows_of(&x), &y, &params).unwrap();
        for probe in uniform_rows(5, 2, &mut rng).iter().chain(&x) {
            let expansion: f64 = (0..n)
                .map(|i| brute.alpha[i] * y[i] * aec::elm::eval_kernel(&x[i], probe, &spec).unwrap())
                .sum();
            let reference = expansion + brute.bias.unwrap_or(machine.bias);
            dec_gap = dec_gap.max((machine.decision(probe) - reference).abs());
        }
    }
    let line = train_binary_svm(
        &rows_of(&[vec![-1.0], vec![1.0]]),
        &[-1.0, 1.0],
        &SvmParams {
            c: 100.0,
            ..SvmParams::default()
        },
    )
    .unwrap();
    let f = line.decision(&[0.5]);
    outcome(
        obj_gap < 1e-4 && dec_gap < 1e-4 && (f - 0.5).abs() < 1e-3,
        format!("objective gap {obj_gap:.1e}, decision gap {dec_gap:.1e}, 1-D f(0.5) = {f:.6}"),
    )
}

/// Observed once with these exact settings and pinned here.
const PINNED_SYNTHETIC: [(&str, f64); 3] = [("ladder", 0.9231), ("elm", 0.9103), ("svm", 0.9487)];

fn criterion_8(dir: &Path) -> Outcome {
    let start = Instant::now();
    let manifest = generate_synthetic(&SynthConfig::default(), dir.join("synth"), 7).unwrap();
    let split = SplitMode::Holdout { train_fraction: 0.7 };
    let manifest = make_splits(&manifest, split, 7).unwrap();
    let base = ExperimentConfig::new(FeatureMode::LogMelPooled, ModelSpec::default_for("svm").unwrap(), split, 7);
    let features = extract_features(&manifest, &base.features, &base.feature_cfg).unwrap();
    let mut pass = true;
    let mut details = Vec::new();
    for (name, pinned) in PINNED_SYNTHETIC {
        let mut cfg = base.clone();
        cfg.model = ModelSpec::default_for(name).unwrap();
        cfg.normalize = true;
        let acc = run_experiment_on_features(&manifest, &features, &cfg).unwrap().mean_accuracy;
        pass &= acc >= 0.90;
        let pin = if (acc - pinned).abs() < 5e-5 { "matches pin" } else { "differs from pin" };
        details.push(format!("{name} {acc:.4} ({pin} {pinned})"));
    }
    within(start.elapsed(), Duration::from_secs(600), outcome(pass, details.join(", ")))
}

fn criterion_9() -> Outcome {
    let rec = |l: [&str; 3]| AnnotationRecord::new("clip", l.iter().map(|s| s.to_string()).collect()).unwrap();
    let mut records = vec![rec(["dog", "dog", "dog"]); 6];
    records.extend(vec![rec(["dog", "dog", "siren"]); 3]);
    records.push(rec(["dog", "siren", "clap"]));
    let acc = human_accuracy(&records).unwrap();
    let unanimous = human_accuracy(&records[..6]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut iff = true;
    for _ in 0..500 {
        let n = rng.random_range(1..8);
        let labels: Vec<[u8; 3]> = (0..n)
            .map(|_| {
                let b = rng.random_range(0..2u8);
                [b, b, if rng.random_bool(0.8) { b } else { rng.random_range(0..3u8) }]
            })
            .collect();
        let recs: Vec<AnnotationRecord> = labels
            .iter()
            .map(|l| AnnotationRecord::new("r", l.iter().map(|v| v.to_string()).collect()).unwrap())
            .collect();
        let all_same = labels.iter().all(|l| l[0] == l[1] && l[1] == l[2]);
        iff &= (human_accuracy(&recs).unwrap() == 1.0) == all_same;
    }
    outcome(
        acc == 0.8 && unanimous == 1.0 && iff,
        format!("worked example {acc}, unanimous-iff-one holds on 500 random sets: {iff}"),
    )
}

fn criterion_10(dir: &Path) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_aec");
    let synth = Command::new(bin)
        .args(["synth", "--classes", "4", "--per-class", "10", "--clip-s", "2", "--seed", "10", "--out-dir"])
        .arg(dir.join("det"))
        .output()
        .unwrap();
    if !synth.status.success() {
        return outcome(false, String::from_utf8_lossy(&synth.stderr).into_owned());
    }
    let manifest = dir.join("det/manifest.csv");
    let runs: [&[&str]; 3] = [
        &["--model", "ladder", "--hidden", "32,16", "--epochs", "8", "--split", "kfold:5"],
        &["--model", "elm", "--c-grid", "1,10,100", "--split", "kfold:5"],
        &["--model", "svm", "--split", "holdout:0.7"],
    ];
    let mut details = Vec::new();
    for extra in runs {
        let run = || {
            Command::new(bin)
                .arg("experiment")
                .arg("--manifest")
                .arg(&manifest)
                .args(["--normalize", "--segment-s", "1.0", "--seed", "11", "--jobs", "4"])
                .args(extra)
                .env_remove("AEC_SEED")
                .output()
                .unwrap()
        };
        let (a, b) = (run(), run());
        if !a.status.success() || !b.status.success() {
            return outcome(false, format!("{}: {}", extra[1], String::from_utf8_lossy(&a.stderr)));
        }
        if a.stdout != b.stdout || !a.stdout.starts_with(b"AEC-REPORT v1\n") {
            return outcome(false, format!("{} reports differ", extra[1]));
        }
        details.push(format!("{} {} bytes", extra[1], a.stdout.len()));
    }
    outcome(true, format!("identical reports: {}", details.join(", ")))
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("embeddings run end to end", Box::new(|| criterion_1(dir.path()))),
        ("normalization suite", Box::new(criterion_2)),
        ("ladder gradient check", Box::new(criterion_3)),
        ("ladder degenerates to a plain MLP", Box::new(criterion_4)),
        ("semi-supervised benefit", Box::new(criterion_5)),
        ("ELM oracle equivalence", Box::new(criterion_6)),
        ("SVM oracle equivalence", Box::new(criterion_7)),
        ("synthetic end-to-end benchmark", Box::new(|| criterion_8(dir.path()))),
        ("human accuracy", Box::new(criterion_9)),
        ("experiment determinism", Box::new(|| criterion_10(dir.path()))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        failed += usize::from(!o.pass);
        println!("criterion {:>2} {}: {} ({})", i + 1, if o.pass { "PASS" } else { "FAIL" }, name, o.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
