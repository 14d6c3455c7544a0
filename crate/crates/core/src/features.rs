//! Spectral-temporal feature matrices.
//!
//! A 1 s segment becomes 41 rows × 79 frames: 13 log-mel energies, their
//! first and second regression deltas, zero-crossing rate and short-term
//! energy. Frames are 25 ms long with 50% overlap.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dsp::{BAND_HI_HZ, BAND_LO_HZ, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::segment::{check_segment_len, Segment, SEGMENT_LEN};

pub const FRAME_LEN: usize = 1200;
pub const HOP: usize = 600;
pub const N_FRAMES: usize = (SEGMENT_LEN - FRAME_LEN) / HOP + 1;
pub const N_FFT: usize = 2048;
pub const N_BINS: usize = N_FFT / 2 + 1;
pub const N_MELS: usize = 13;
pub const N_FEATURES: usize = 3 * N_MELS + 2;
pub const LOG_FLOOR: f64 = 1e-10;
pub const DELTA_N: usize = 2;

const FEATURE_MAGIC: &[u8; 4] = b"STLF";
const FEATURE_VERSION: u32 = 1;

/// Dense row-major matrix; rows are feature channels, columns are frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape {
                expected: format!("rows of length {cols}"),
                actual: "ragged rows".into(),
            });
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values: rows.concat(),
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Rows `[lo, hi)` as a new matrix.
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Self {
        Self {
            rows: hi - lo,
            cols: self.cols,
            values: self.values[lo * self.cols..hi * self.cols].to_vec(),
        }
    }

    /// Vertical concatenation.
    pub fn stack(parts: &[&FeatureMatrix]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::Shape {
                expected: format!("{cols} columns"),
                actual: "mismatched column counts".into(),
            });
        }
        Ok(Self {
            rows: parts.iter().map(|m| m.rows).sum(),
            cols,
            values: parts.iter().flat_map(|m| m.values.iter().copied()).collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the mel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `n_mels × N_BINS`, row-major.
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub f_lo: f64,
    pub f_hi: f64,
    pub center_freqs_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, f_lo: f64, f_hi: f64) -> Result<Self> {
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        if n_mels == 0 || !(0.0 <= f_lo && f_lo < f_hi && f_hi <= nyquist) {
            return Err(Error::InvalidParameter(format!(
                "mel filterbank needs n_mels > 0 and 0 <= f_lo < f_hi <= {nyquist}"
            )));
        }
        let (m_lo, m_hi) = (hz_to_mel(f_lo), hz_to_mel(f_hi));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
        let mut weights = vec![0.0; n_mels * N_BINS];
        for m in 0..n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..N_BINS {
                let f = k as f64 * bin_hz;
                let w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                weights[m * N_BINS + k] = w;
            }
        }
        let fb = Self {
            weights,
            n_mels,
            f_lo,
            f_hi,
            center_freqs_hz: edges[1..=n_mels].to_vec(),
        };
        if let Some(m) = (0..n_mels).find(|&m| fb.filter(m).iter().sum::<f64>() <= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "mel filter {m} covers no FFT bin; reduce n_mels"
            )));
        }
        Ok(fb)
    }

    /// The 13-band bank over the preprocessing passband.
    pub fn standard() -> Self {
        Self::with_mels(N_MELS).expect("standard filterbank is valid")
    }

    pub fn with_mels(n_mels: usize) -> Result<Self> {
        Self::new(n_mels, BAND_LO_HZ, BAND_HI_HZ)
    }

    pub fn filter(&self, m: usize) -> &[f64] {
        &self.weights[m * N_BINS..(m + 1) * N_BINS]
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        (0..self.n_mels)
            .map(|m| self.filter(m).iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

/// Start offsets of the analysis frames.
pub fn frame_starts() -> impl Iterator<Item = usize> {
    (0..N_FRAMES).map(|i| i * HOP)
}

pub fn frame(seg: &Segment) -> Result<Vec<&[f64]>> {
    frame_samples(&seg.wave.samples)
}

pub fn frame_samples(x: &[f64]) -> Result<Vec<&[f64]>> {
    check_segment_len(x.len())?;
    Ok(frame_starts().map(|s| &x[s..s + FRAME_LEN]).collect())
}

fn hann() -> &'static [f64] {
    static W: OnceLock<Vec<f64>> = OnceLock::new();
    W.get_or_init(|| {
        (0..FRAME_LEN)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (FRAME_LEN - 1) as f64).cos())
            .collect()
    })
}

fn fft() -> &'static Arc<dyn Fft<f64>> {
    static F: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    F.get_or_init(|| FftPlanner::new().plan_fft_forward(N_FFT))
}

/// Zero-padded DFT of a Hann-windowed frame; all `N_FFT` bins.
pub fn windowed_spectrum(frame: &[f64]) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); N_FFT];
    for ((b, x), w) in buf.iter_mut().zip(frame).zip(hann()) {
        b.re = x * w;
    }
    fft().process(&mut buf);
    buf
}

/// One-sided power spectrum, `N_BINS` values.
pub fn power_spectrum(frame: &[f64]) -> Vec<f64> {
    windowed_spectrum(frame)[..N_BINS].iter().map(|c| c.norm_sqr()).collect()
}

pub fn log_mel(seg: &Segment, fb: &MelFilterbank) -> Result<FeatureMatrix> {
    log_mel_samples(&seg.wave.samples, fb)
}

pub fn log_mel_samples(x: &[f64], fb: &MelFilterbank) -> Result<FeatureMatrix> {
    let frames = frame_samples(x)?;
    let mut out = FeatureMatrix::zeros(fb.n_mels, N_FRAMES);
    for (t, f) in frames.iter().enumerate() {
        for (m, e) in fb.apply(&power_spectrum(f)).into_iter().enumerate() {
            out.values[m * N_FRAMES + t] = e.max(LOG_FLOOR).log10();
        }
    }
    Ok(out)
}

/// Regression deltas along columns with replicated edges.
pub fn delta(m: &FeatureMatrix, window_n: usize) -> Result<FeatureMatrix> {
    if window_n == 0 {
        return Err(Error::InvalidParameter("delta window must be at least 1".into()));
    }
    let denom = 2.0 * (1..=window_n).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = FeatureMatrix::zeros(m.rows, m.cols);
    if m.cols == 0 {
        return Ok(out);
    }
    let last = m.cols as isize - 1;
    for r in 0..m.rows {
        let row = m.row(r);
        let at = |t: isize| row[t.clamp(0, last) as usize];
        for (t, d) in out.row_mut(r).iter_mut().enumerate() {
            let t = t as isize;
            *d = (1..=window_n as isize)
                .map(|n| n as f64 * (at(t + n) - at(t - n)))
                .sum::<f64>()
                / denom;
        }
    }
    Ok(out)
}

/// Sign changes per frame over `FRAME_LEN - 1` sample pairs; zero counts as positive.
pub fn zcr(seg: &Segment) -> Result<Vec<f64>> {
    zcr_samples(&seg.wave.samples)
}

pub fn zcr_samples(x: &[f64]) -> Result<Vec<f64>> {
    Ok(frame_samples(x)?
        .iter()
        .map(|f| {
            let changes = f.windows(2).filter(|p| (p[0] >= 0.0) != (p[1] >= 0.0)).count();
            changes as f64 / (FRAME_LEN - 1) as f64
        })
        .collect())
}

/// Short-term energy: sum of squares per frame.
pub fn ste(seg: &Segment) -> Result<Vec<f64>> {
    ste_samples(&seg.wave.samples)
}

pub fn ste_samples(x: &[f64]) -> Result<Vec<f64>> {
    Ok(frame_samples(x)?.iter().map(|f| f.iter().map(|v| v * v).sum()).collect())
}

/// Rows kept for the input-feature ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// 13 log-mel rows.
    LogMel,
    /// Log-mel plus Δ and ΔΔ (39 rows).
    LogMelDeltas,
    /// The full 41-row matrix.
    Full,
    /// 64 log-mel rows from a finer filterbank.
    LogMel64,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 4] = [
        FeatureSet::LogMel,
        FeatureSet::LogMelDeltas,
        FeatureSet::Full,
        FeatureSet::LogMel64,
    ];

    pub fn n_rows(self) -> usize {
        match self {
            FeatureSet::LogMel => N_MELS,
            FeatureSet::LogMelDeltas => 3 * N_MELS,
            FeatureSet::Full => N_FEATURES,
            FeatureSet::LogMel64 => 64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureSet::LogMel => "logmel13",
            FeatureSet::LogMelDeltas => "logmel13_deltas",
            FeatureSet::Full => "full41",
            FeatureSet::LogMel64 => "logmel64",
        }
    }

    /// The set with `rows` rows, if any.
    pub fn from_rows(rows: usize) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.n_rows() == rows)
    }

    fn n_mels(self) -> usize {
        match self {
            FeatureSet::LogMel64 => 64,
            _ => N_MELS,
        }
    }
}

impl std::str::FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown feature set '{s}'")))
    }
}

/// Feature extraction with a fixed filterbank.
#[derive(Debug, Clone)]
pub struct Featurizer {
    pub set: FeatureSet,
    pub filterbank: MelFilterbank,
}

impl Featurizer {
    pub fn new(set: FeatureSet) -> Self {
        let filterbank = if set.n_mels() == N_MELS {
            MelFilterbank::standard()
        } else {
            MelFilterbank::with_mels(set.n_mels()).expect("64-band bank is valid")
        };
        Self { set, filterbank }
    }

    pub fn featurize(&self, x: &[f64]) -> Result<FeatureMatrix> {
        let mel = log_mel_samples(x, &self.filterbank)?;
        let m = match self.set {
            FeatureSet::LogMel | FeatureSet::LogMel64 => mel,
            FeatureSet::LogMelDeltas => {
                let d = delta(&mel, DELTA_N)?;
                let dd = delta(&d, DELTA_N)?;
                FeatureMatrix::stack(&[&mel, &d, &dd])?
            }
            FeatureSet::Full => {
                let d = delta(&mel, DELTA_N)?;
                let dd = delta(&d, DELTA_N)?;
                let z = FeatureMatrix::from_rows(&[zcr_samples(x)?])?;
                let e = FeatureMatrix::from_rows(&[ste_samples(x)?])?;
                FeatureMatrix::stack(&[&mel, &d, &dd, &z, &e])?
            }
        };
        if !m.is_finite() {
            return Err(Error::NonFinite {
                index: m.values.iter().position(|v| !v.is_finite()).unwrap_or(0),
            });
        }
        Ok(m)
    }
}

/// The full 41 × 79 matrix: log-mel, Δ, ΔΔ, ZCR, STE.
pub fn featurize(seg: &Segment, fb: &MelFilterbank) -> Result<FeatureMatrix> {
    Featurizer {
        set: FeatureSet::Full,
        filterbank: fb.clone(),
    }
    .featurize(&seg.wave.samples)
}

pub fn encode_features(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * m.values.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for &v in &m.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureMatrix> {
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "not a feature file (bad magic)"));
    }
    if word(4) != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported feature file version {}", word(4))));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let body = &bytes[16..];
    if body.len() != 4 * rows * cols {
        return Err(Error::format(
            path,
            format!(
                "expected {} data bytes for {rows}x{cols}, found {}",
                4 * rows * cols,
                body.len()
            ),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(FeatureMatrix { rows, cols, values })
}

pub fn write_features(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_features(m)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::Waveform;
    use crate::segment::{Label, Provenance};
    use proptest::prelude::*;

    fn seg(x: Vec<f64>) -> Segment {
        Segment::new(Waveform::new(x), Label::Pattern1, "P00", Provenance::SyntheticDirect).unwrap()
    }

    fn sine(f: f64, amp: f64) -> Vec<f64> {
        (0..SEGMENT_LEN)
            .map(|n| amp * (2.0 * std::f64::consts::PI * f * n as f64 / SAMPLE_RATE as f64).sin())
            .collect()
    }

    #[test]
    fn framing_arithmetic() {
        assert_eq!(N_FRAMES, 79);
        let x: Vec<f64> = (0..SEGMENT_LEN).map(|i| i as f64).collect();
        let s = seg(x);
        let fr = frame(&s).unwrap();
        assert_eq!(fr.len(), 79);
        assert_eq!(fr[0][0], 0.0);
        assert_eq!(*fr[78].last().unwrap(), 47_999.0);
        assert_eq!(fr[5][0], 3000.0);
        assert!(frame_samples(&[0.0; 100]).is_err());
    }

    #[test]
    fn filterbank_shape() {
        for n in [13, 64] {
            let fb = MelFilterbank::with_mels(n).unwrap();
            assert_eq!(fb.weights.len(), n * N_BINS);
            assert!(fb.weights.iter().all(|&w| w >= 0.0));
            for m in 0..n {
                assert!(fb.filter(m).iter().sum::<f64>() > 0.0);
                if m + 1 < n {
                    let overlap = fb.filter(m).iter().zip(fb.filter(m + 1)).any(|(a, b)| *a > 0.0 && *b > 0.0);
                    assert!(overlap, "filters {m},{} disjoint", m + 1);
                }
            }
            assert!(fb.center_freqs_hz.windows(2).all(|w| w[0] < w[1]));
        }
        assert!((hz_to_mel(mel_to_hz(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn zero_segment() {
        let fb = MelFilterbank::standard();
        let m = featurize(&seg(vec![0.0; SEGMENT_LEN]), &fb).unwrap();
        assert_eq!(m.shape(), (41, 79));
        for r in 0..13 {
            assert!(m.row(r).iter().all(|&v| v == -10.0));
        }
        for r in 13..41 {
            assert!(m.row(r).iter().all(|&v| v == 0.0), "row {r}");
        }
    }

    #[test]
    fn tone_lands_in_nearest_band() {
        let fb = MelFilterbank::standard();
        let nearest = fb
            .center_freqs_hz
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        let m = log_mel(&seg(sine(1000.0, 0.5)), &fb).unwrap();
        for t in 0..N_FRAMES {
            let arg = (0..13).max_by(|&a, &b| m.get(a, t).total_cmp(&m.get(b, t))).unwrap();
            assert_eq!(arg, nearest, "frame {t}");
        }
    }

    #[test]
    fn doubling_amplitude_adds_log_four() {
        let fb = MelFilterbank::standard();
        let x = sine(1700.0, 0.1);
        let a = log_mel(&seg(x.clone()), &fb).unwrap();
        let b = log_mel(&seg(x.iter().map(|v| 2.0 * v).collect()), &fb).unwrap();
        for (u, v) in a.values.iter().zip(&b.values) {
            if *u > -9.0 {
                assert!((v - u - 4f64.log10()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn delta_examples() {
        let c = FeatureMatrix::from_rows(&[vec![3.0; 79]]).unwrap();
        assert!(delta(&c, 2).unwrap().values.iter().all(|&v| v == 0.0));
        let ramp = FeatureMatrix::from_rows(&[(0..79).map(|i| i as f64).collect()]).unwrap();
        let d = delta(&ramp, 2).unwrap();
        for t in 2..77 {
            assert_eq!(d.get(0, t), 1.0);
        }
        // replicated edge: (1·(1−0) + 2·(2−0)) / 10
        assert!((d.get(0, 0) - 0.5).abs() < 1e-12);
        assert!(delta(&ramp, 0).is_err());
    }

    #[test]
    fn zcr_and_ste_examples() {
        let alt: Vec<f64> = (0..SEGMENT_LEN).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(zcr(&seg(alt)).unwrap().iter().all(|&z| (z - 1.0).abs() < 1e-12));
        let z = zcr(&seg(sine(1000.0, 1.0))).unwrap();
        let expected = 2.0 * 1000.0 * 0.025 / 1199.0;
        assert!(z.iter().all(|&v| (v - expected).abs() <= 0.1 * expected), "{z:?}");
        let e = ste(&seg(sine(1000.0, 1.0))).unwrap();
        assert!(e.iter().all(|&v| (v - 600.0).abs() < 1.0));
        assert!(ste(&seg(vec![1.0; SEGMENT_LEN])).unwrap().iter().all(|&v| v == 1200.0));
        assert!(zcr(&seg(vec![0.0; SEGMENT_LEN])).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parseval() {
        let x: Vec<f64> = (0..FRAME_LEN).map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5).collect();
        let spec = windowed_spectrum(&x);
        let total: f64 = spec.iter().map(|c| c.norm_sqr()).sum();
        let windowed: f64 = x.iter().zip(hann()).map(|(a, w)| (a * w).powi(2)).sum();
        assert!((total / (N_FFT as f64 * windowed) - 1.0).abs() < 1e-6);
        let p = power_spectrum(&x);
        let one_sided = p[0] + p[N_BINS - 1] + 2.0 * p[1..N_BINS - 1].iter().sum::<f64>();
        assert!((one_sided / total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hop_shift_moves_columns() {
        let fb = MelFilterbank::standard();
        let x: Vec<f64> = (0..SEGMENT_LEN)
            .map(|i| ((i as f64) * 0.37).sin() * (1.0 + (i as f64 * 1e-4).cos()))
            .collect();
        let mut shifted = x.clone();
        shifted.rotate_right(HOP);
        let a = log_mel(&seg(x), &fb).unwrap();
        let b = log_mel(&seg(shifted), &fb).unwrap();
        for r in 0..13 {
            for t in 1..N_FRAMES {
                assert!((b.get(r, t) - a.get(r, t - 1)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn feature_file_roundtrip_and_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.stlf");
        let m = FeatureMatrix::from_rows(&[vec![0.5, -1.25, 3.0], vec![1.0, 2.0, 4.0]]).unwrap();
        write_features(&p, &m).unwrap();
        assert_eq!(read_features(&p).unwrap(), m);
        let mut bytes = encode_features(&m);
        bytes.truncate(bytes.len() - 1);
        assert!(decode_features(&bytes, &p).is_err());
        bytes[0] = b'X';
        assert!(decode_features(&bytes, &p).is_err());
    }

    #[test]
    fn feature_sets_have_expected_rows() {
        let x = sine(900.0, 0.2);
        for set in FeatureSet::ALL {
            let m = Featurizer::new(set).featurize(&x).unwrap();
            assert_eq!(m.shape(), (set.n_rows(), N_FRAMES));
            assert_eq!(set.name().parse::<FeatureSet>().unwrap(), set);
        }
        let full = Featurizer::new(FeatureSet::Full).featurize(&x).unwrap();
        let part = Featurizer::new(FeatureSet::LogMelDeltas).featurize(&x).unwrap();
        assert_eq!(full.slice_rows(0, 39), part);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn featurize_is_finite_and_deterministic(seed in any::<u64>(), amp in 1e-6f64..10.0) {
            use rand::Rng;
            let mut r = crate::rng::rng_from(seed, &[]);
            let x: Vec<f64> = (0..SEGMENT_LEN).map(|_| amp * r.random_range(-1.0..1.0)).collect();
            let fb = MelFilterbank::standard();
            let a = featurize(&seg(x.clone()), &fb).unwrap();
            prop_assert!(a.is_finite());
            prop_assert_eq!(a, featurize(&seg(x), &fb).unwrap());
        }

        #[test]
        fn delta_ignores_offsets(vals in prop::collection::vec(-100.0f64..100.0, 79), c in -50.0f64..50.0) {
            let m = FeatureMatrix::from_rows(&[vals.clone()]).unwrap();
            let shifted = FeatureMatrix::from_rows(&[vals.iter().map(|v| v + c).collect()]).unwrap();
            let (a, b) = (delta(&m, 2).unwrap(), delta(&shifted, 2).unwrap());
            for (u, v) in a.values.iter().zip(&b.values) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }
}
