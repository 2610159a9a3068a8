//! Audio loading, resampling and perceptual level correction.
//!
//! Clips are offset-corrected, resampled to the working rate with a polyphase
//! windowed-sinc filter and brought to a common loudness by a single clip-wide
//! gain. The gain targets the median A-weighted level of short frames.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

/// Sample rates accepted by [`preprocess`].
pub const SUPPORTED_RATES: [u32; 4] = [8000, 16000, 44100, 48000];
pub const DEFAULT_TARGET_HZ: u32 = 16000;
pub const DEFAULT_TARGET_LEVEL_DBA: f64 = -26.0;
/// Frames quieter than this are ignored by the level estimate.
pub const SILENCE_THRESHOLD_DB: f64 = -80.0;
pub const LEVEL_FRAME_MS: u32 = 50;
pub const LEVEL_HOP_MS: u32 = 25;
pub const MIN_LEVEL_FRAME: usize = 64;

/// Taps per polyphase branch of the resampling filter.
pub const RESAMPLER_TAPS: usize = 64;
const KAISER_BETA: f64 = 7.0;
const RESAMPLER_ROLLOFF: f64 = 0.9;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed wav data: {0}")]
    Decode(String),
    #[error("unsupported wav encoding: {0}")]
    Unsupported(String),
    #[error("audio contains no samples")]
    Empty,
    #[error("sample {index} is not finite")]
    NonFinite { index: usize },
    #[error("sample rate must be positive")]
    ZeroRate,
    #[error("unsupported target rate {0} Hz (expected one of 8000, 16000, 44100, 48000)")]
    UnsupportedRate(u32),
    #[error("clip has {len} samples, shorter than one level frame of {frame} samples")]
    TooShort { len: usize, frame: usize },
    #[error("level frame has {0} samples, need at least 64")]
    FrameTooShort(usize),
    #[error("silent clip: every frame is below -80 dBFS")]
    SilentClip,
}

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self, AudioError> {
        if sample_rate_hz == 0 {
            return Err(AudioError::ZeroRate);
        }
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        if let Some(index) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite { index });
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

/// Level of one measurement frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrameLevel {
    /// A-weighted level in dB relative to full scale.
    Db(f64),
    /// The frame carries no energy at all.
    Silent,
}

impl FrameLevel {
    pub fn db(self) -> Option<f64> {
        match self {
            FrameLevel::Db(v) => Some(v),
            FrameLevel::Silent => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoudnessReport {
    /// Per-frame levels measured before the gain was applied.
    pub frame_levels_dba: Vec<FrameLevel>,
    /// Median over frames above the silence threshold.
    pub median_level_dba: f64,
    pub clip_gain_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepConfig {
    pub target_hz: u32,
    pub target_level_dba: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            target_hz: DEFAULT_TARGET_HZ,
            target_level_dba: DEFAULT_TARGET_LEVEL_DBA,
        }
    }
}

/// Reads a PCM WAV file (16-bit integer or 32-bit float), averaging channels to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_wav(std::io::BufReader::new(file))
}

pub fn read_wav<R: std::io::Read>(reader: R) -> Result<AudioClip, AudioError> {
    let mut wav = hound::WavReader::new(reader).map_err(map_hound)?;
    let spec = wav.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(AudioError::Decode("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => wav
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(map_hound)?,
        (hound::SampleFormat::Float, 32) => wav
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => {
            return Err(AudioError::Unsupported(format!("{fmt:?} with {bits} bits per sample")))
        }
    };
    if interleaved.len() % channels != 0 {
        return Err(AudioError::Decode("partial sample frame at end of data".into()));
    }
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    AudioClip::new(mono, spec.sample_rate)
}

fn map_hound(err: hound::Error) -> AudioError {
    match err {
        hound::Error::IoError(e) => AudioError::Decode(e.to_string()),
        hound::Error::Unsupported => AudioError::Unsupported("unsupported wav feature".into()),
        other => AudioError::Decode(other.to_string()),
    }
}

/// Writes the clip as 16-bit PCM mono. Samples outside [-1, 1] are clipped.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<(), AudioError> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => AudioError::Io {
            path: path.display().to_string(),
            source,
        },
        other => AudioError::Decode(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io_err)?;
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(io_err)?;
    }
    writer.finalize().map_err(io_err)
}

/// Magnitude of the IEC 61672 A-weighting curve, scaled to exactly 1 at 1 kHz.
pub fn a_weight_magnitude(freq_hz: f64) -> f64 {
    fn raw(f: f64) -> f64 {
        let f2 = f * f;
        let c1 = 20.598_997 * 20.598_997;
        let c2 = 107.652_65 * 107.652_65;
        let c3 = 737.862_23 * 737.862_23;
        let c4 = 12_194.217 * 12_194.217;
        c4 * f2 * f2 / ((f2 + c1) * ((f2 + c2) * (f2 + c3)).sqrt() * (f2 + c4))
    }
    raw(freq_hz) / raw(1000.0)
}

/// Reusable A-weighted level meter for a fixed frame length and rate.
pub struct LevelMeter {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    weights: Vec<f64>,
    norm: f64,
    buf: Vec<Complex<f64>>,
}

impl LevelMeter {
    pub fn new(frame_len: usize, sample_rate_hz: u32) -> Result<Self, AudioError> {
        if frame_len < MIN_LEVEL_FRAME {
            return Err(AudioError::FrameTooShort(frame_len));
        }
        let n = frame_len;
        let window = hann(n);
        let weights = (0..n)
            .map(|k| {
                let bin = k.min(n - k) as f64;
                let f = bin * sample_rate_hz as f64 / n as f64;
                a_weight_magnitude(f).powi(2)
            })
            .collect();
        // Parseval with the window's energy: mean-square ~ sum|X|^2 / (N * sum w^2).
        let norm = n as f64 * window.iter().map(|w| w * w).sum::<f64>();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self {
            fft,
            window,
            weights,
            norm,
            buf: vec![Complex::new(0.0, 0.0); n],
        })
    }

    pub fn frame_len(&self) -> usize {
        self.window.len()
    }

    pub fn measure(&mut self, frame: &[f64]) -> FrameLevel {
        assert_eq!(frame.len(), self.window.len(), "frame length mismatch");
        for ((b, &x), &w) in self.buf.iter_mut().zip(frame).zip(&self.window) {
            *b = Complex::new(x * w, 0.0);
        }
        self.fft.process(&mut self.buf);
        let power: f64 = self
            .buf
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| c.norm_sqr() * w)
            .sum::<f64>()
            / self.norm;
        if power > 0.0 {
            FrameLevel::Db(10.0 * power.log10())
        } else {
            FrameLevel::Silent
        }
    }
}

/// A-weighted RMS level of a single frame in dB re full scale.
pub fn a_weighted_level(frame: &[f64], sample_rate_hz: u32) -> Result<FrameLevel, AudioError> {
    let mut meter = LevelMeter::new(frame.len(), sample_rate_hz)?;
    Ok(meter.measure(frame))
}

pub(crate) fn hann(n: usize) -> Vec<f64> {
    // periodic Hann
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    let mut k = 1.0;
    loop {
        term *= q / (k * k);
        sum += term;
        if term < sum * 1e-17 {
            return sum;
        }
        k += 1.0;
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Polyphase windowed-sinc resampler for a rational ratio `up / down`.
pub struct Resampler {
    up: usize,
    down: usize,
    /// `up` rows of `RESAMPLER_TAPS` coefficients, one row per fractional phase.
    phases: Vec<Vec<f64>>,
}

impl Resampler {
    pub fn new(from_hz: u32, to_hz: u32) -> Result<Self, AudioError> {
        if from_hz == 0 || to_hz == 0 {
            return Err(AudioError::ZeroRate);
        }
        let g = gcd(from_hz as u64, to_hz as u64);
        let up = (to_hz as u64 / g) as usize;
        let down = (from_hz as u64 / g) as usize;
        // Cutoff in cycles per input sample.
        let cutoff = 0.5 * RESAMPLER_ROLLOFF * (up as f64 / down as f64).min(1.0);
        let half = (RESAMPLER_TAPS / 2) as f64;
        let i0_beta = bessel_i0(KAISER_BETA);
        let phases = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                let mut taps: Vec<f64> = (0..RESAMPLER_TAPS)
                    .map(|t| {
                        let k = t as f64 - (half - 1.0);
                        let tau = frac - k;
                        let r = tau / half;
                        if r.abs() > 1.0 {
                            return 0.0;
                        }
                        let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta;
                        2.0 * cutoff * sinc(2.0 * cutoff * tau) * window
                    })
                    .collect();
                let sum: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|c| *c /= sum);
                taps
            })
            .collect();
        Ok(Self { up, down, phases })
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        (input_len * self.up).div_ceil(self.down)
    }

    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        if self.up == 1 && self.down == 1 {
            return input.to_vec();
        }
        let first = -((RESAMPLER_TAPS / 2) as isize - 1);
        (0..self.output_len(input.len()))
            .map(|m| {
                let pos = m * self.down;
                let base = (pos / self.up) as isize;
                let taps = &self.phases[pos % self.up];
                taps.iter()
                    .enumerate()
                    .filter_map(|(t, c)| {
                        let idx = base + first + t as isize;
                        (idx >= 0 && (idx as usize) < input.len()).then(|| c * input[idx as usize])
                    })
                    .sum()
            })
            .collect()
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

pub fn resample(clip: &AudioClip, target_hz: u32) -> Result<AudioClip, AudioError> {
    if clip.sample_rate_hz == target_hz {
        return Ok(clip.clone());
    }
    let r = Resampler::new(clip.sample_rate_hz, target_hz)?;
    AudioClip::new(r.process(&clip.samples), target_hz)
}

fn remove_offset(samples: &mut [f64]) {
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    samples.iter_mut().for_each(|s| *s -= mean);
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Measures A-weighted levels over 50 ms frames with a 25 ms hop.
pub fn frame_levels(clip: &AudioClip) -> Result<Vec<FrameLevel>, AudioError> {
    let sr = clip.sample_rate_hz as usize;
    let frame = sr * LEVEL_FRAME_MS as usize / 1000;
    let hop = sr * LEVEL_HOP_MS as usize / 1000;
    if clip.len() < frame {
        return Err(AudioError::TooShort {
            len: clip.len(),
            frame,
        });
    }
    let mut meter = LevelMeter::new(frame, clip.sample_rate_hz)?;
    let n_frames = (clip.len() - frame) / hop + 1;
    Ok((0..n_frames)
        .map(|i| meter.measure(&clip.samples[i * hop..i * hop + frame]))
        .collect())
}

/// Offset correction, resampling and clip-wide A-weighted loudness correction.
pub fn preprocess(
    clip: &AudioClip,
    config: &PrepConfig,
) -> Result<(AudioClip, LoudnessReport), AudioError> {
    if !SUPPORTED_RATES.contains(&config.target_hz) {
        return Err(AudioError::UnsupportedRate(config.target_hz));
    }
    let mut samples = clip.samples.clone();
    remove_offset(&mut samples);
    let mut samples = if clip.sample_rate_hz == config.target_hz {
        samples
    } else {
        Resampler::new(clip.sample_rate_hz, config.target_hz)?.process(&samples)
    };
    remove_offset(&mut samples);
    let centred = AudioClip::new(samples, config.target_hz)?;

    let levels = frame_levels(&centred)?;
    let mut audible: Vec<f64> = levels
        .iter()
        .filter_map(|l| l.db())
        .filter(|&db| db >= SILENCE_THRESHOLD_DB)
        .collect();
    if audible.is_empty() {
        return Err(AudioError::SilentClip);
    }
    let median_level_dba = median(&mut audible);
    let clip_gain_db = config.target_level_dba - median_level_dba;
    let gain = 10f64.powf(clip_gain_db / 20.0);
    let mut samples = centred.into_samples();
    samples.iter_mut().for_each(|s| *s *= gain);
    Ok((
        AudioClip::new(samples, config.target_hz)?,
        LoudnessReport {
            frame_levels_dba: levels,
            median_level_dba,
            clip_gain_db,
        },
    ))
}
