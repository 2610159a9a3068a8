use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{write_manifest, DatasetManifest, HarnessError, ManifestEntry};
use crate::audio_prep::{write_wav, AudioClip};

/// Sound families in class order. Every clip draws a frequency jitter of up
/// to 3 % and a random phase or time offset.
///
/// | class | family |
/// |---|---|
/// | harmonic-low | 220 Hz fundamental, 4 harmonics with 1/k amplitudes |
/// | harmonic-high | 880 Hz fundamental, 3 harmonics |
/// | chirp-up | exponential sweep 300 to 3000 Hz, repeated every second |
/// | chirp-down | exponential sweep 3000 to 300 Hz, repeated every second |
/// | am-band-noise | 1 to 2 kHz noise, amplitude modulated at 4 Hz |
/// | click-train | 5 ms decaying noise clicks at 8 per second |
/// | vibrato | 1500 Hz carrier, 150 Hz deviation at 6 Hz |
/// | square | 150 Hz band-limited square wave |
/// | tone-bursts | 2500 Hz, 100 ms on in every 400 ms |
/// | dual-tone | 600 Hz plus 3600 Hz |
/// | low-noise | 50 to 500 Hz noise |
/// | high-noise | 4 to 7.5 kHz noise |
/// | warble | 400, 800, 1600 Hz cycling every 100 ms |
pub const SYNTH_CLASSES: [&str; 13] = [
    "harmonic-low",
    "harmonic-high",
    "chirp-up",
    "chirp-down",
    "am-band-noise",
    "click-train",
    "vibrato",
    "square",
    "tone-bursts",
    "dual-tone",
    "low-noise",
    "high-noise",
    "warble",
];

const SIGNAL_RMS: f64 = 0.1;
const PEAK_LIMIT: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub clips_per_class: usize,
    pub clip_s: f64,
    pub sample_rate_hz: u32,
    pub snr_db: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 13,
            clips_per_class: 20,
            clip_s: 5.0,
            sample_rate_hz: 16000,
            snr_db: 20.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(1..=SYNTH_CLASSES.len()).contains(&self.n_classes) {
            return bad(format!("classes must be in 1..={}", SYNTH_CLASSES.len()));
        }
        if self.clips_per_class == 0 {
            return bad("clips per class must be positive".into());
        }
        if !(self.clip_s > 0.0 && self.clip_s <= 600.0) {
            return bad(format!("clip length {} s outside (0, 600]", self.clip_s));
        }
        if ![16000, 44100, 48000].contains(&self.sample_rate_hz) {
            return bad(format!("sample rate {} not in 16000, 44100, 48000", self.sample_rate_hz));
        }
        if !self.snr_db.is_finite() {
            return bad("SNR must be finite".into());
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.clip_s * self.sample_rate_hz as f64).round() as usize
    }
}

fn band_noise(n: usize, sr: f64, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(rng.sample(StandardNormal), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sr / n as f64;
        if f < lo || f > hi {
            *v = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.into_iter().map(|c| c.re).collect()
}

fn sweep_phase(t: f64, f_start: f64, f_end: f64, period: f64) -> f64 {
    // exponential sweep restarted every period; phase integral of f(t) = f0 * r^(t/T)
    let tau = t % period;
    let k = (f_end / f_start).ln() / period;
    2.0 * PI * f_start * ((k * tau).exp() - 1.0) / k
}

/// The clean (noise-free) waveform of one clip.
fn family_signal(class: usize, n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let jitter = 1.0 + rng.random_range(-0.03..0.03);
    let phase = rng.random_range(0.0..2.0 * PI);
    let offset = rng.random_range(0.0..1.0);
    let t = |i: usize| i as f64 / sr;
    let tone = |f: f64, i: usize| (2.0 * PI * f * jitter * t(i) + phase).sin();
    match class {
        0 => (0..n)
            .map(|i| (1..=4).map(|k| tone(220.0 * k as f64, i) / k as f64).sum())
            .collect(),
        1 => (0..n)
            .map(|i| (1..=3).map(|k| tone(880.0 * k as f64, i) / k as f64).sum())
            .collect(),
        2 | 3 => {
            let (a, b) = if class == 2 { (300.0, 3000.0) } else { (3000.0, 300.0) };
            (0..n)
                .map(|i| sweep_phase(t(i) + offset, a * jitter, b * jitter, 1.0).sin())
                .collect()
        }
        4 => {
            let noise = band_noise(n, sr, 1000.0 * jitter, 2000.0 * jitter, rng);
            (0..n)
                .map(|i| noise[i] * (0.5 + 0.5 * (2.0 * PI * 4.0 * jitter * t(i) + phase).sin()))
                .collect()
        }
        5 => {
            let period = (sr / (8.0 * jitter)).round() as usize;
            let start = (offset * period as f64) as usize;
            let decay = 0.005 * sr;
            (0..n)
                .map(|i| {
                    let since = (i + period - start % period) % period;
                    let env = (-(since as f64) / (decay / 3.0)).exp();
                    if (since as f64) < decay {
                        env * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        6 => {
            let (fc, dev, fm) = (1500.0 * jitter, 150.0, 6.0);
            (0..n)
                .map(|i| {
                    let ti = t(i);
                    (2.0 * PI * fc * ti + dev / fm * (2.0 * PI * fm * ti).sin() + phase).sin()
                })
                .collect()
        }
        7 => {
            let f0 = 150.0 * jitter;
            let n_harm = ((7000.0 / f0) as usize).max(1);
            (0..n)
                .map(|i| {
                    (0..n_harm)
                        .map(|h| {
                            let k = (2 * h + 1) as f64;
                            (2.0 * PI * f0 * k * t(i) + phase * k).sin() / k
                        })
                        .sum()
                })
                .collect()
        }
        8 => (0..n)
            .map(|i| {
                let cycle = (t(i) + offset * 0.4) % 0.4;
                if cycle < 0.1 {
                    tone(2500.0, i)
                } else {
                    0.0
                }
            })
            .collect(),
        9 => (0..n).map(|i| tone(600.0, i) + 0.7 * tone(3600.0, i)).collect(),
        10 => band_noise(n, sr, 50.0, 500.0 * jitter, rng),
        11 => band_noise(n, sr, 4000.0 * jitter, 7500.0, rng),
        12 => (0..n)
            .map(|i| {
                let step = ((t(i) + offset * 0.3) / 0.1) as usize % 3;
                tone([400.0, 800.0, 1600.0][step], i)
            })
            .collect(),
        _ => unreachable!("class index checked by the caller"),
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// One clip of class `class`; a function of `(class, index, config, seed)` only.
pub fn synth_clip(class: usize, index: usize, config: &SynthConfig, seed: u64) -> Result<AudioClip, HarnessError> {
    config.validate()?;
    if class >= config.n_classes {
        return Err(HarnessError::Config(format!("class {class} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class as u64) << 32) | index as u64);
    let n = config.n_samples();
    let sr = config.sample_rate_hz as f64;
    let mut x = family_signal(class, n, sr, &mut rng);
    let gain = SIGNAL_RMS / rms(&x).max(1e-12);
    let noise_rms = SIGNAL_RMS * 10f64.powf(-config.snr_db / 20.0);
    for v in &mut x {
        *v = *v * gain + noise_rms * rng.sample::<f64, _>(StandardNormal);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > PEAK_LIMIT {
        x.iter_mut().for_each(|v| *v *= PEAK_LIMIT / peak);
    }
    Ok(AudioClip::new(x, config.sample_rate_hz)?)
}

/// Writes `clips/<clip_id>.wav` for every clip plus `manifest.csv` (paths relative
/// to `out_dir`, empty split column) and returns the manifest with paths under `out_dir`.
pub fn generate_synthetic(config: &SynthConfig, out_dir: impl AsRef<Path>, seed: u64) -> Result<DatasetManifest, HarnessError> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir.join("clips"))?;
    let jobs: Vec<(usize, usize)> = (0..config.n_classes)
        .flat_map(|c| (0..config.clips_per_class).map(move |i| (c, i)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(class, i)| {
            let clip_id = format!("{}-{i:03}", SYNTH_CLASSES[class]);
            let rel = PathBuf::from("clips").join(format!("{clip_id}.wav"));
            let clip = synth_clip(class, i, config, seed)?;
            write_wav(out_dir.join(&rel), &clip)?;
            Ok(ManifestEntry {
                clip_id,
                path: rel,
                label: SYNTH_CLASSES[class].to_string(),
                split: None,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let mut manifest = DatasetManifest::new(entries)?;
    write_manifest(out_dir.join("manifest.csv"), &manifest)?;
    for e in &mut manifest.entries {
        e.path = out_dir.join(&e.path);
    }
    Ok(manifest)
}
