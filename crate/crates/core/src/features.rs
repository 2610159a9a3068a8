//! Utterance-level feature vectors.
//!
//! Three sources feed the classifiers: pooled log-mel segment statistics,
//! the MFCC+ZCR baseline, and externally computed embeddings read from the
//! `AEC-EMB v1` exchange format.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::audio_prep::{hann, AudioClip};

pub const DEFAULT_SEGMENT_S: f64 = 1.5;
pub const DEFAULT_SEGMENT_OVERLAP: f64 = 0.5;
pub const DEFAULT_N_MFCC: usize = 13;

const EMB_MAGIC: &str = "AEC-EMB v1";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("feature matrix needs at least one row and one column")]
    Empty,
    #[error("expected {expected} values for a {rows}x{dims} matrix, got {got}")]
    Shape {
        rows: usize,
        dims: usize,
        expected: usize,
        got: usize,
    },
    #[error("row {row} has {got} values, expected {expected}")]
    Ragged { row: usize, expected: usize, got: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("invalid mel parameters: {0}")]
    MelParams(String),
    #[error("mel band edge {fmax_hz} Hz lies above the Nyquist frequency {nyquist_hz} Hz")]
    AboveNyquist { fmax_hz: f64, nyquist_hz: f64 },
    #[error("clip yields {frames} analysis frames, need at least {needed}")]
    ClipTooShort { frames: usize, needed: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("embedding file: {0}")]
    Format(String),
    #[error("embedding file: no rows")]
    NoRows,
    #[error("embedding file: duplicate clip id {0:?}")]
    DuplicateId(String),
    #[error("embedding file: clip {id:?} has {found} values, header declares dim={expected}")]
    DimMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("embedding file: clip {0:?} contains a non-finite value")]
    NonFiniteEmbedding(String),
}

/// What each row of a [`FeatureMatrix`] stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowRole {
    StftFrame,
    Segment,
    Utterance,
}

/// Dense row-major `rows x dims` matrix of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dims: usize,
    values: Vec<f64>,
    role: RowRole,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dims: usize, values: Vec<f64>, role: RowRole) -> Result<Self, FeatureError> {
        if rows == 0 || dims == 0 {
            return Err(FeatureError::Empty);
        }
        if values.len() != rows * dims {
            return Err(FeatureError::Shape {
                rows,
                dims,
                expected: rows * dims,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite {
                row: i / dims,
                col: i % dims,
            });
        }
        Ok(Self {
            rows,
            dims,
            values,
            role,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], role: RowRole) -> Result<Self, FeatureError> {
        let dims = rows.first().map(Vec::len).ok_or(FeatureError::Empty)?;
        let mut values = Vec::with_capacity(rows.len() * dims);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dims {
                return Err(FeatureError::Ragged {
                    row: i,
                    expected: dims,
                    got: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), dims, values, role)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn role(&self) -> RowRole {
        self.role
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dims..(i + 1) * self.dims]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dims)
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, FeatureError> {
        let mut values = Vec::with_capacity(indices.len() * self.dims);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), self.dims, values, self.role)
    }

    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.dims, &self.values)
    }

    pub fn from_dmatrix(m: &nalgebra::DMatrix<f64>, role: RowRole) -> Result<Self, FeatureError> {
        let values = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
            .collect();
        Self::new(m.nrows(), m.ncols(), values, role)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelParams {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
}

impl Default for MelParams {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 64,
            fmin_hz: 50.0,
            fmax_hz: 8000.0,
            log_floor: 1e-10,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl MelParams {
    fn validate(&self, sample_rate_hz: u32) -> Result<(), FeatureError> {
        if self.n_mels < 2 {
            return Err(FeatureError::MelParams("n_mels must be at least 2".into()));
        }
        if !(self.window_ms > 0.0 && self.hop_ms > 0.0) {
            return Err(FeatureError::MelParams("window and hop must be positive".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(FeatureError::MelParams("log floor must be positive".into()));
        }
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz) {
            return Err(FeatureError::MelParams("need 0 <= fmin < fmax".into()));
        }
        let nyquist_hz = sample_rate_hz as f64 / 2.0;
        if self.fmax_hz > nyquist_hz {
            return Err(FeatureError::AboveNyquist {
                fmax_hz: self.fmax_hz,
                nyquist_hz,
            });
        }
        Ok(())
    }

    pub fn window_len(&self, sample_rate_hz: u32) -> usize {
        (self.window_ms * sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self, sample_rate_hz: u32) -> usize {
        ((self.hop_ms * sample_rate_hz as f64 / 1000.0).round() as usize).max(1)
    }

    pub fn fft_len(&self, sample_rate_hz: u32) -> usize {
        self.window_len(sample_rate_hz).next_power_of_two()
    }
}

/// Triangular mel filterbank, `n_mels` rows over `fft_len / 2 + 1` bins, unit peak.
pub fn mel_filterbank(params: &MelParams, sample_rate_hz: u32) -> Result<Vec<Vec<f64>>, FeatureError> {
    params.validate(sample_rate_hz)?;
    let n_fft = params.fft_len(sample_rate_hz);
    let n_bins = n_fft / 2 + 1;
    let lo = hz_to_mel(params.fmin_hz);
    let hi = hz_to_mel(params.fmax_hz);
    let edges: Vec<f64> = (0..params.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (params.n_mels + 1) as f64))
        .collect();
    Ok((0..params.n_mels)
        .map(|m| {
            let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sample_rate_hz as f64 / n_fft as f64;
                    if f <= left || f >= right {
                        0.0
                    } else if f <= centre {
                        (f - left) / (centre - left)
                    } else {
                        (right - f) / (right - centre)
                    }
                })
                .collect()
        })
        .collect())
}

/// Number of full analysis frames in `n` samples.
pub fn frame_count(n: usize, window: usize, hop: usize) -> usize {
    if n < window {
        0
    } else {
        (n - window) / hop + 1
    }
}

/// Log-mel energies for every STFT frame (`n_frames x n_mels`).
pub fn log_mel_frames(clip: &AudioClip, params: &MelParams) -> Result<FeatureMatrix, FeatureError> {
    let sr = clip.sample_rate_hz();
    let bank = mel_filterbank(params, sr)?;
    let window_len = params.window_len(sr);
    let hop = params.hop_len(sr);
    let n_fft = params.fft_len(sr);
    let n_frames = frame_count(clip.len(), window_len, hop);
    if n_frames == 0 {
        return Err(FeatureError::ClipTooShort {
            frames: 0,
            needed: 1,
        });
    }
    let window = hann(window_len);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_fft / 2 + 1];
    let mut values = Vec::with_capacity(n_frames * params.n_mels);
    let samples = clip.samples();
    for f in 0..n_frames {
        let frame = &samples[f * hop..f * hop + window_len];
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&window) {
            b.re = x * w;
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        values.extend(bank.iter().map(|filter| {
            let e: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
            (e + params.log_floor).ln()
        }));
    }
    FeatureMatrix::new(n_frames, params.n_mels, values, RowRole::StftFrame)
}

fn mean_std_columns(rows: &[&[f64]], dims: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dims];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dims];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(*r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    (mean, var.into_iter().map(|s| (s / n).sqrt()).collect())
}

/// Log-mel statistics over overlapping segments. Each row is the per-band mean
/// followed by the per-band standard deviation (`2 * n_mels` columns). Trailing
/// frames that do not fill a segment are dropped.
pub fn log_mel_segments(
    clip: &AudioClip,
    params: &MelParams,
    segment_s: f64,
    overlap: f64,
) -> Result<FeatureMatrix, FeatureError> {
    if !(segment_s > 0.0) || !(0.0..1.0).contains(&overlap) {
        return Err(FeatureError::MelParams(
            "segment length must be positive and overlap in [0, 1)".into(),
        ));
    }
    let frames = log_mel_frames(clip, params)?;
    let seg_frames = ((segment_s * 1000.0 / params.hop_ms).round() as usize).max(1);
    let seg_hop = ((seg_frames as f64 * (1.0 - overlap)).round() as usize).max(1);
    let n_segments = frame_count(frames.rows(), seg_frames, seg_hop);
    if n_segments == 0 {
        return Err(FeatureError::ClipTooShort {
            frames: frames.rows(),
            needed: seg_frames,
        });
    }
    let n_mels = frames.dims();
    let mut values = Vec::with_capacity(n_segments * 2 * n_mels);
    for s in 0..n_segments {
        let rows: Vec<&[f64]> = (s * seg_hop..s * seg_hop + seg_frames)
            .map(|i| frames.row(i))
            .collect();
        let (mean, std) = mean_std_columns(&rows, n_mels);
        values.extend(mean);
        values.extend(std);
    }
    FeatureMatrix::new(n_segments, 2 * n_mels, values, RowRole::Segment)
}

/// Mean over rows: segment-level features to one utterance vector.
pub fn pool_utterance(segments: &FeatureMatrix) -> Vec<f64> {
    let mut out = vec![0.0; segments.dims()];
    for r in segments.iter_rows() {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let n = segments.rows() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Orthonormal DCT-II, truncated to the first `n_out` coefficients.
pub fn dct2(input: &[f64], n_out: usize) -> Vec<f64> {
    let n = input.len() as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            scale
                * input
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        x * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos()
                    })
                    .sum::<f64>()
        })
        .collect()
}

/// Fraction of consecutive sample pairs with strictly opposite signs, over the frame length.
pub fn zero_crossing_rate(frame: &[f64]) -> f64 {
    if frame.is_empty() {
        return 0.0;
    }
    let crossings = frame.windows(2).filter(|w| w[0] * w[1] < 0.0).count();
    crossings as f64 / frame.len() as f64
}

/// Baseline MFCC + ZCR utterance vector: per-coefficient mean then standard
/// deviation over frames, `2 * (n_mfcc + 1)` values.
pub fn mfcc_zcr(clip: &AudioClip, params: &MelParams, n_mfcc: usize) -> Result<Vec<f64>, FeatureError> {
    if n_mfcc == 0 || n_mfcc > params.n_mels {
        return Err(FeatureError::MelParams(format!(
            "n_mfcc must be in 1..={}",
            params.n_mels
        )));
    }
    let log_mel = log_mel_frames(clip, params)?;
    let sr = clip.sample_rate_hz();
    let window_len = params.window_len(sr);
    let hop = params.hop_len(sr);
    let samples = clip.samples();
    let per_frame: Vec<Vec<f64>> = log_mel
        .iter_rows()
        .enumerate()
        .map(|(f, mel)| {
            let mut v = dct2(mel, n_mfcc);
            v.push(zero_crossing_rate(&samples[f * hop..f * hop + window_len]));
            v
        })
        .collect();
    let rows: Vec<&[f64]> = per_frame.iter().map(Vec::as_slice).collect();
    let (mean, std) = mean_std_columns(&rows, n_mfcc + 1);
    Ok(mean.into_iter().chain(std).collect())
}

fn parse_header(line: &str) -> Result<(usize, usize), FeatureError> {
    let line = line.trim_end_matches(['\n', '\r']);
    let rest = line
        .strip_prefix(EMB_MAGIC)
        .ok_or_else(|| FeatureError::Format(format!("bad header {line:?}")))?;
    let mut dim = None;
    let mut count = None;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("dim=") {
            dim = v.parse::<usize>().ok();
        } else if let Some(v) = tok.strip_prefix("count=") {
            count = v.parse::<usize>().ok();
        }
    }
    match (dim, count) {
        (Some(d), Some(c)) if d > 0 => Ok((d, c)),
        _ => Err(FeatureError::Format(format!("bad header {line:?}"))),
    }
}

fn check_id(seen: &mut HashSet<String>, id: &str) -> Result<(), FeatureError> {
    if id.is_empty() {
        return Err(FeatureError::Format("empty clip id".into()));
    }
    if !seen.insert(id.to_string()) {
        return Err(FeatureError::DuplicateId(id.to_string()));
    }
    Ok(())
}

/// Ids plus one utterance row per id.
pub type Embeddings = (Vec<String>, FeatureMatrix);

/// Reads an embedding file; files ending in `.csv` use the text layout, all others the binary one.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Embeddings, FeatureError> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_embeddings_csv(reader)
    } else {
        read_embeddings_binary(reader)
    }
}

/// Binary layout: header line, then `count` records of `<id>\t` followed by
/// `dim` little-endian f32 values.
pub fn read_embeddings_binary<R: BufRead>(mut reader: R) -> Result<Embeddings, FeatureError> {
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let (dim, count) = parse_header(&header)?;
    let mut ids = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count * dim);
    let mut seen = HashSet::new();
    let mut raw = vec![0u8; 4 * dim];
    for _ in 0..count {
        let mut id_bytes = Vec::new();
        let n = reader.read_until(b'\t', &mut id_bytes)?;
        if n == 0 {
            break;
        }
        if id_bytes.pop() != Some(b'\t') {
            return Err(FeatureError::Format("record id not terminated by a tab".into()));
        }
        let id = String::from_utf8(id_bytes)
            .map_err(|_| FeatureError::Format("clip id is not utf-8".into()))?;
        check_id(&mut seen, &id)?;
        let mut filled = 0;
        while filled < raw.len() {
            let got = reader.read(&mut raw[filled..])?;
            if got == 0 {
                break;
            }
            filled += got;
        }
        if filled < raw.len() {
            return Err(FeatureError::DimMismatch {
                id,
                expected: dim,
                found: filled / 4,
            });
        }
        let row: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if row.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFiniteEmbedding(id));
        }
        values.extend(row);
        ids.push(id);
    }
    if ids.is_empty() {
        return Err(FeatureError::NoRows);
    }
    if ids.len() != count {
        return Err(FeatureError::Format(format!(
            "header declares count={count}, found {} records",
            ids.len()
        )));
    }
    if !reader.fill_buf()?.is_empty() {
        return Err(FeatureError::Format("trailing bytes after last record".into()));
    }
    let m = FeatureMatrix::new(ids.len(), dim, values, RowRole::Utterance)?;
    Ok((ids, m))
}

/// Text layout: the same header line, then one `<id>,v1,...,vd` line per clip.
pub fn read_embeddings_csv<R: BufRead>(reader: R) -> Result<Embeddings, FeatureError> {
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let (dim, count) = parse_header(&header)?;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut seen = HashSet::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().trim().to_string();
        check_id(&mut seen, &id)?;
        let row = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| FeatureError::Format(format!("unparsable value in row {id:?}")))?;
        if row.len() != dim {
            return Err(FeatureError::DimMismatch {
                id,
                expected: dim,
                found: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFiniteEmbedding(id));
        }
        values.extend(row);
        ids.push(id);
    }
    if ids.is_empty() {
        return Err(FeatureError::NoRows);
    }
    if ids.len() != count {
        return Err(FeatureError::Format(format!(
            "header declares count={count}, found {} records",
            ids.len()
        )));
    }
    let m = FeatureMatrix::new(ids.len(), dim, values, RowRole::Utterance)?;
    Ok((ids, m))
}

fn validate_ids(ids: &[String], m: &FeatureMatrix) -> Result<(), FeatureError> {
    if ids.len() != m.rows() {
        return Err(FeatureError::Format(format!(
            "{} ids for {} rows",
            ids.len(),
            m.rows()
        )));
    }
    let mut seen = HashSet::new();
    for id in ids {
        if id.contains(['\t', '\n', ',']) {
            return Err(FeatureError::Format(format!("clip id {id:?} contains a separator")));
        }
        check_id(&mut seen, id)?;
    }
    Ok(())
}

pub fn write_embeddings_binary<W: Write>(mut w: W, ids: &[String], m: &FeatureMatrix) -> Result<(), FeatureError> {
    validate_ids(ids, m)?;
    writeln!(w, "{EMB_MAGIC} dim={} count={}", m.dims(), m.rows())?;
    for (id, row) in ids.iter().zip(m.iter_rows()) {
        w.write_all(id.as_bytes())?;
        w.write_all(b"\t")?;
        for &v in row {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_embeddings_csv<W: Write>(mut w: W, ids: &[String], m: &FeatureMatrix) -> Result<(), FeatureError> {
    validate_ids(ids, m)?;
    writeln!(w, "{EMB_MAGIC} dim={} count={}", m.dims(), m.rows())?;
    for (id, row) in ids.iter().zip(m.iter_rows()) {
        write!(w, "{id}")?;
        for v in row {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the binary layout (or the text layout for `.csv` paths).
pub fn write_embeddings(path: impl AsRef<Path>, ids: &[String], m: &FeatureMatrix) -> Result<(), FeatureError> {
    let path = path.as_ref();
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        write_embeddings_csv(file, ids, m)
    } else {
        write_embeddings_binary(file, ids, m)
    }
}
