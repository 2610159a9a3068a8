use aec::audio_prep::{a_weighted_level, preprocess, resample, AudioClip, FrameLevel, PrepConfig};
use aec::features::{frame_count, log_mel_frames, mfcc_zcr, pool_utterance, FeatureMatrix, MelParams, RowRole};
use aec::harness::{
    evaluate, human_accuracy, make_splits, AnnotationRecord, DatasetManifest, ManifestEntry, Split, SplitMode,
};
use aec::ladder::{init_ladder, ladder_loss_with_noise, LadderBatch, LadderConfig, Noise};
use aec::normalize::{apply_normalization, fit_norm_stats, length_normalize};
use aec::svm::{train_binary_svm, SvmParams};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig::with_cases(cases)
}

/// Tone bursts over noise, long enough for several level frames.
fn test_clip(seed: u64, rate: u32, amplitude: f64, offset: f64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let freq = rng.random_range(200.0..3000.0);
    let n = rate as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / rate as f64;
            let env = if (t * 4.0).fract() < 0.6 { 1.0 } else { 0.2 };
            offset
                + amplitude * env * (2.0 * std::f64::consts::PI * freq * t).sin()
                + 0.01 * amplitude * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    AudioClip::new(samples, rate).unwrap()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

proptest! {
    #![proptest_config(config(12))]

    #[test]
    fn preprocess_is_idempotent(seed in 0u64..1000, amp in 0.01f64..0.5, rate in prop::sample::select(vec![16000u32, 44100, 48000])) {
        let cfg = PrepConfig::default();
        let (once, _) = preprocess(&test_clip(seed, rate, amp, 0.0), &cfg).unwrap();
        let (twice, report) = preprocess(&once, &cfg).unwrap();
        prop_assert!(report.clip_gain_db.abs() < 0.1, "gain {}", report.clip_gain_db);
        let diff: Vec<f64> = once.samples().iter().zip(twice.samples()).map(|(a, b)| a - b).collect();
        prop_assert!(rms(&diff) < 1e-4, "rms change {}", rms(&diff));
    }

    #[test]
    fn preprocess_removes_offset(seed in 0u64..1000, offset in -0.3f64..0.3) {
        let (out, _) = preprocess(&test_clip(seed, 16000, 0.2, offset), &PrepConfig::default()).unwrap();
        let mean = out.samples().iter().sum::<f64>() / out.len() as f64;
        prop_assert!(mean.abs() < 1e-9, "mean {mean}");
    }

    #[test]
    fn a_weighted_level_is_gain_equivariant(seed in 0u64..1000, gain in 0.01f64..10.0) {
        let clip = test_clip(seed, 16000, 0.1, 0.0);
        let frame = &clip.samples()[..800];
        let scaled: Vec<f64> = frame.iter().map(|v| v * gain).collect();
        let (FrameLevel::Db(a), FrameLevel::Db(b)) =
            (a_weighted_level(frame, 16000).unwrap(), a_weighted_level(&scaled, 16000).unwrap())
        else {
            return Err(TestCaseError::fail("unexpected silent frame"));
        };
        prop_assert!((b - a - 20.0 * gain.log10()).abs() < 1e-9);
    }
}

#[test]
fn resampled_tone_keeps_its_energy_at_440_hz() {
    let tone: Vec<f64> = (0..48000)
        .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 48000.0).sin())
        .collect();
    let out = resample(&AudioClip::new(tone, 48000).unwrap(), 16000).unwrap();
    assert_eq!(out.sample_rate_hz(), 16000);
    // skip filter transients at both ends; 16000 samples span whole cycles of 440 Hz
    let x = &out.samples()[1000..15000];
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let power: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm_sqr()).collect();
    let bin_hz = 16000.0 / n as f64;
    let peak = (440.0 / bin_hz).round() as usize;
    let band: f64 = power[peak - 2..=peak + 2].iter().sum();
    let total: f64 = power.iter().sum();
    assert!(band / total > 0.99, "energy fraction near 440 Hz {}", band / total);
    let top = (0..power.len()).max_by(|&a, &b| power[a].total_cmp(&power[b])).unwrap();
    assert!((top as f64 * bin_hz - 440.0).abs() <= bin_hz);
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn frame_count_matches_log_mel_rows(extra in 0usize..4000) {
        let params = MelParams::default();
        let window = params.window_len(16000);
        let hop = params.hop_len(16000);
        let n = window + extra;
        let clip = test_clip(extra as u64, 16000, 0.1, 0.0);
        let clip = AudioClip::new(clip.samples()[..n].to_vec(), 16000).unwrap();
        let frames = log_mel_frames(&clip, &params).unwrap();
        prop_assert_eq!(frames.rows(), (n - window) / hop + 1);
        prop_assert_eq!(frames.rows(), frame_count(n, window, hop));
    }

    #[test]
    fn pooling_commutes_with_row_permutation(rows in 1usize..12, dims in 1usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Vec<f64>> = (0..rows).map(|_| (0..dims).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let mut perm: Vec<usize> = (0..rows).collect();
        perm.reverse();
        perm.rotate_left(rows / 2);
        let a = FeatureMatrix::from_rows(&data, RowRole::Segment).unwrap();
        let b = a.select(&perm).unwrap();
        for (x, y) in pool_utterance(&a).iter().zip(pool_utterance(&b)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn length_normalize_is_scale_invariant(x in prop::collection::vec(-10.0f64..10.0, 1..20), c in 0.001f64..1000.0) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-3));
        let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
        let a = length_normalize(&x).unwrap();
        let b = length_normalize(&scaled).unwrap();
        prop_assert!((a.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        for (u, v) in a.iter().zip(b) {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn normalization_statistics_ignore_test_rows(seed in 0u64..1000, rows in 3usize..40, dims in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| {
            let data: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dims).map(|j| j as f64 + rng.random_range(-2.0..2.0)).collect())
                .collect();
            FeatureMatrix::from_rows(&data, RowRole::Utterance).unwrap()
        };
        let train = draw(rows);
        let test_a = draw(5);
        let test_b = draw(9);
        let stats = fit_norm_stats(&train).unwrap();
        // fitting never sees test rows, so applying to two test sets leaves the statistics alone
        let before = stats.clone();
        apply_normalization(&test_a, &stats).unwrap();
        apply_normalization(&test_b, &stats).unwrap();
        prop_assert_eq!(&stats, &before);
        let out = apply_normalization(&test_a, &stats).unwrap();
        for (i, row) in test_a.iter_rows().enumerate() {
            let white: Vec<f64> = row.iter().enumerate().map(|(j, v)| (v - stats.mean[j]) / (stats.std[j] + 1e-8)).collect();
            let norm = white.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, w) in white.iter().enumerate() {
                prop_assert!((out.row(i)[j] - w / norm).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn features_are_bit_identical_on_repeat() {
    let clip = test_clip(5, 16000, 0.2, 0.0);
    let params = MelParams::default();
    assert_eq!(mfcc_zcr(&clip, &params, 13).unwrap(), mfcc_zcr(&clip, &params, 13).unwrap());
    assert_eq!(
        log_mel_frames(&clip, &params).unwrap().values(),
        log_mel_frames(&clip, &params).unwrap().values()
    );
}

fn manifest(per_class: &[usize]) -> DatasetManifest {
    let mut entries = Vec::new();
    for (c, &n) in per_class.iter().enumerate() {
        for i in 0..n {
            entries.push(ManifestEntry {
                clip_id: format!("c{c}-{i}"),
                path: format!("c{c}-{i}.wav").into(),
                label: format!("class{c}"),
                split: None,
            });
        }
    }
    DatasetManifest::new(entries).unwrap()
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn kfold_partitions_every_class(per_class in prop::collection::vec(5usize..30, 2..6), k in 2usize..6, seed in 0u64..1000) {
        let m = make_splits(&manifest(&per_class), SplitMode::KFold { k }, seed).unwrap();
        let folds = m.folds().unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut seen = vec![0usize; m.len()];
        for (train, test) in &folds {
            prop_assert_eq!(train.len() + test.len(), m.len());
            for &i in test {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        for class in m.indices_by_class() {
            let counts: Vec<usize> = (0..k)
                .map(|f| class.iter().filter(|&&i| m.entries[i].split == Some(Split::Fold(f))).count())
                .collect();
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn weighted_accuracy_is_fraction_correct(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..60)) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let report = evaluate(&pred, &truth, 5).unwrap();
        let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64;
        prop_assert!((report.weighted_accuracy - correct).abs() < 1e-12);
        for (c, row) in report.confusion.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), report.support[c]);
        }
    }

    #[test]
    fn human_accuracy_is_one_exactly_when_unanimous(records in prop::collection::vec(prop::array::uniform3(0u8..3), 1..30)) {
        let recs: Vec<AnnotationRecord> = records
            .iter()
            .enumerate()
            .map(|(i, r)| AnnotationRecord::new(format!("r{i}"), r.iter().map(|l| format!("l{l}")).collect()).unwrap())
            .collect();
        let acc = human_accuracy(&recs).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        let unanimous = records.iter().all(|r| r[0] == r[1] && r[1] == r[2]);
        prop_assert_eq!(acc == 1.0, unanimous);
    }
}

fn small_ladder(costs: Vec<f64>) -> LadderConfig {
    LadderConfig {
        layer_dims: vec![6, 5, 3],
        noise_sigma: 0.3,
        denoise_costs: costs,
        batch_size: 10,
        epochs: 1,
        learning_rate: 0.01,
        decay_epochs: 0,
        seed: 9,
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn unlabeled_rows_leave_the_supervised_term_alone(seed in 0u64..1000, n_unl in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = init_ladder(&small_ladder(vec![1.0, 1.0, 1.0])).unwrap();
        let x = DMatrix::from_fn(6, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let labels = vec![0, 1, 2, 0, 1, 2];
        let u = DMatrix::from_fn(n_unl, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = Noise::draw(&[6, 5, 3], 6 + n_unl, &mut rng);
        let mut labeled_noise = noise.clone();
        for m in &mut labeled_noise.per_layer {
            *m = m.rows(0, 6).into_owned();
        }
        let costs = [1.0, 1.0, 1.0];
        let alone = ladder_loss_with_noise(&model, &LadderBatch::labeled(x.clone(), labels.clone()), 0.3, &costs, &labeled_noise).unwrap();
        let mixed = ladder_loss_with_noise(&model, &LadderBatch::with_unlabeled(x, labels, u), 0.3, &costs, &noise).unwrap();
        prop_assert!((alone.supervised - mixed.supervised).abs() < 1e-12);
    }

    #[test]
    fn input_reconstruction_cost_grows_with_its_weight(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = init_ladder(&small_ladder(vec![0.0, 1.0, 1.0])).unwrap();
        let batch = LadderBatch::labeled(
            DMatrix::from_fn(8, 6, |_, _| rng.sample::<f64, _>(StandardNormal)),
            vec![0, 1, 2, 0, 1, 2, 0, 1],
        );
        let noise = Noise::draw(&[6, 5, 3], 8, &mut rng);
        let off = ladder_loss_with_noise(&model, &batch, 0.3, &[0.0, 1.0, 1.0], &noise).unwrap();
        let on = ladder_loss_with_noise(&model, &batch, 0.3, &[1000.0, 1.0, 1.0], &noise).unwrap();
        prop_assert!(on.denoise() > off.denoise());
    }

    #[test]
    fn svm_multipliers_are_feasible(seed in 0u64..1000, n in 4usize..30, c in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut y: Vec<f64> = rows.iter().map(|r| if r[0] + 0.3 * r[1] > 0.0 { 1.0 } else { -1.0 }).collect();
        y[0] = 1.0;
        y[1] = -1.0;
        let x = FeatureMatrix::from_rows(&rows, RowRole::Utterance).unwrap();
        let params = SvmParams { c, ..SvmParams::default() };
        let (machine, sol) = aec::svm::train_binary_svm_observed(&x, &y, &params, None).unwrap();
        prop_assert!(sol.alpha.iter().all(|&a| (0.0..=c).contains(&a)));
        let balance: f64 = sol.alpha.iter().zip(&y).map(|(a, y)| a * y).sum();
        prop_assert!(balance.abs() < 1e-8, "balance {balance}");
        // linear weights reproduce the kernel expansion
        let w = machine.linear_weights();
        for r in &rows {
            let primal: f64 = w.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() + machine.bias;
            prop_assert!((primal - machine.decision(r)).abs() < 1e-9);
        }
        prop_assert_eq!(&train_binary_svm(&x, &y, &params).unwrap(), &machine);
    }
}

#[test]
fn training_loss_falls_on_separable_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 60;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x = DMatrix::from_fn(n, 4, |i, j| {
        let centre = if labels[i] == 0 { -1.5 } else { 1.5 };
        (if j == 0 { centre } else { 0.0 }) + rng.sample::<f64, _>(StandardNormal) * 0.5
    });
    let config = LadderConfig {
        layer_dims: vec![4, 8, 2],
        noise_sigma: 0.2,
        denoise_costs: vec![1.0, 0.1, 0.1],
        batch_size: 20,
        epochs: 101,
        learning_rate: 0.002,
        decay_epochs: 50,
        seed: 4,
    };
    let (_, history) = aec::ladder::train_ladder(&config, &LadderBatch::labeled(x, labels), None).unwrap();
    assert_eq!(history.len(), 101);
    assert!(history[100].total < history[0].total, "{} vs {}", history[100].total, history[0].total);
}
