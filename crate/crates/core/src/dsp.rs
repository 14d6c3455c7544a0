//! Causal IIR filtering: the 60 Hz notch cascade, the 300 Hz to 5 kHz
//! Butterworth bandpass, and the preprocessing chain that combines them.
//!
//! All arithmetic is carried out in `f64`. Sections use the transposed
//! direct form II with zero initial state.

use std::f64::consts::PI;
use std::sync::OnceLock;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling rate of every waveform entering the pipeline.
pub const SAMPLE_RATE: u32 = 48_000;

/// Mains frequency removed by the notch cascade.
pub const MAINS_HZ: f64 = 60.0;
/// Harmonics of the mains frequency notched in addition to the fundamental.
pub const MAINS_HARMONICS: usize = 3;
/// Quality factor of each notch section.
pub const NOTCH_Q: f64 = 30.0;
/// Lower edge of the analysis band.
pub const BAND_LO_HZ: f64 = 300.0;
/// Upper edge of the analysis band.
pub const BAND_HI_HZ: f64 = 5_000.0;
/// Bandpass order used by [`preprocess`].
pub const PREPROCESS_BANDPASS_ORDER: usize = 6;

/// A mono real-valued signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate_hz: SAMPLE_RATE,
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
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

    /// Mean square of the samples; zero for an empty waveform.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, &x| m.max(x.abs()))
    }

    /// Index of the first non-finite sample, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.samples.iter().position(|x| !x.is_finite())
    }

    pub(crate) fn check_rate(&self) -> Result<()> {
        if self.sample_rate_hz != SAMPLE_RATE {
            return Err(Error::InvalidParameter(format!(
                "sample rate {} Hz, pipeline requires {} Hz",
                self.sample_rate_hz, SAMPLE_RATE
            )));
        }
        Ok(())
    }
}

pub(crate) fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Second-order section with `a0` normalized to one:
///
/// `y[n] = b0 x[n] + b1 x[n-1] + b2 x[n-2] - a1 y[n-1] - a2 y[n-2]`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiquadSection {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl BiquadSection {
    pub const IDENTITY: BiquadSection = BiquadSection {
        b0: 1.0,
        b1: 0.0,
        b2: 0.0,
        a1: 0.0,
        a2: 0.0,
    };

    /// Roots of `z^2 + a1 z + a2`.
    pub fn poles(&self) -> [Complex64; 2] {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        let a1 = Complex64::new(self.a1, 0.0);
        [(-a1 + disc) * 0.5, (-a1 - disc) * 0.5]
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0)
    }

    /// Complex frequency response at normalized angular frequency `w` (rad/sample).
    pub fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = self.b0 + z1 * self.b1 + z2 * self.b2;
        let den = 1.0 + z1 * self.a1 + z2 * self.a2;
        num / den
    }

    fn scaled(self, g: f64) -> Self {
        Self {
            b0: self.b0 * g,
            b1: self.b1 * g,
            b2: self.b2 * g,
            ..self
        }
    }
}

/// Ordered biquad cascade. An empty cascade is the identity filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCascade {
    pub sections: Vec<BiquadSection>,
    pub description: String,
}

impl FilterCascade {
    pub fn identity() -> Self {
        Self {
            sections: Vec::new(),
            description: "identity".into(),
        }
    }

    pub fn is_stable(&self) -> bool {
        self.sections.iter().all(BiquadSection::is_stable)
    }

    /// Concatenate two cascades; `self` runs first.
    pub fn then(mut self, other: FilterCascade) -> Self {
        self.sections.extend(other.sections);
        self.description = format!("{} -> {}", self.description, other.description);
        self
    }

    fn response(&self, w: f64) -> Complex64 {
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(w))
    }
}

/// One band-stop section per target frequency `f0, 2 f0, ..., (n_harmonics + 1) f0`.
pub fn design_notch_cascade(fs_hz: u32, f0_hz: f64, n_harmonics: usize, q: f64) -> Result<FilterCascade> {
    let nyquist = fs_hz as f64 / 2.0;
    let top = f0_hz * (n_harmonics as f64 + 1.0);
    if !(f0_hz > 0.0) || !(top < nyquist) {
        return Err(Error::InvalidParameter(format!(
            "notch harmonics up to {top} Hz must lie in (0, {nyquist}) Hz"
        )));
    }
    if !(q > 0.0) {
        return Err(Error::InvalidParameter(format!("notch Q must be positive, got {q}")));
    }
    let sections = (1..=n_harmonics + 1)
        .map(|k| notch_section(fs_hz as f64, f0_hz * k as f64, q))
        .collect();
    Ok(FilterCascade {
        sections,
        description: format!("notch {f0_hz} Hz x{} (Q={q})", n_harmonics + 1),
    })
}

fn notch_section(fs: f64, f0: f64, q: f64) -> BiquadSection {
    let w = 2.0 * PI * f0 / fs;
    let alpha = w.sin() / (2.0 * q);
    let cw = w.cos();
    let a0 = 1.0 + alpha;
    BiquadSection {
        b0: 1.0 / a0,
        b1: -2.0 * cw / a0,
        b2: 1.0 / a0,
        a1: -2.0 * cw / a0,
        a2: (1.0 - alpha) / a0,
    }
}

/// Butterworth bandpass of total order `order` (even), realized as `order / 2`
/// biquads via the lowpass-to-bandpass transform and a prewarped bilinear map.
/// Unity gain at the geometric band center.
pub fn design_bandpass(fs_hz: u32, f_lo_hz: f64, f_hi_hz: f64, order: usize) -> Result<FilterCascade> {
    let fs = fs_hz as f64;
    let nyquist = fs / 2.0;
    if !(f_lo_hz > 0.0 && f_lo_hz < f_hi_hz && f_hi_hz < nyquist) {
        return Err(Error::InvalidParameter(format!(
            "bandpass edges must satisfy 0 < {f_lo_hz} < {f_hi_hz} < {nyquist}"
        )));
    }
    if order < 2 || order % 2 != 0 {
        return Err(Error::InvalidParameter(format!(
            "bandpass order must be even and >= 2, got {order}"
        )));
    }
    let n = order / 2;
    let wl = (PI * f_lo_hz / fs).tan();
    let wh = (PI * f_hi_hz / fs).tan();
    let bw = wh - wl;
    let w0sq = wl * wh;

    // Bandpass poles in the s-plane, two per prototype pole.
    let mut analog = Vec::with_capacity(2 * n);
    for k in 0..n {
        let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let pb = p * bw;
        let root = (pb * pb - 4.0 * w0sq).sqrt();
        analog.push((pb + root) * 0.5);
        analog.push((pb - root) * 0.5);
    }
    let digital: Vec<Complex64> = analog.iter().map(|s| (1.0 + s) / (1.0 - s)).collect();

    let sections = pair_poles(digital)
        .into_iter()
        .map(|(p1, p2)| BiquadSection {
            b0: 1.0,
            b1: 0.0,
            b2: -1.0,
            a1: -(p1 + p2).re,
            a2: (p1 * p2).re,
        })
        .collect::<Vec<_>>();

    let mut cascade = FilterCascade {
        sections,
        description: format!("butterworth bandpass {f_lo_hz}-{f_hi_hz} Hz order {order}"),
    };
    let wc = 2.0 * w0sq.sqrt().atan();
    let gain = cascade.response(wc).norm();
    let per_section = gain.powf(-1.0 / n as f64);
    cascade.sections = cascade.sections.into_iter().map(|s| s.scaled(per_section)).collect();
    Ok(cascade)
}

/// Group poles into conjugate pairs; leftover real poles are paired with each other.
fn pair_poles(mut poles: Vec<Complex64>) -> Vec<(Complex64, Complex64)> {
    const TOL: f64 = 1e-12;
    let mut pairs = Vec::new();
    let mut reals = Vec::new();
    while let Some(p) = poles.pop() {
        if p.im.abs() <= TOL {
            reals.push(Complex64::new(p.re, 0.0));
            continue;
        }
        let mate = poles
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| (**a - p.conj()).norm().total_cmp(&(**b - p.conj()).norm()))
            .map(|(i, _)| i)
            .expect("complex poles come in conjugate pairs");
        let q = poles.swap_remove(mate);
        pairs.push((p, q));
    }
    reals.sort_by(|a, b| a.re.total_cmp(&b.re));
    for chunk in reals.chunks(2) {
        let second = chunk.get(1).copied().unwrap_or(Complex64::new(0.0, 0.0));
        pairs.push((chunk[0], second));
    }
    pairs
}

/// `20 log10 |H(e^{j 2 pi f / fs})|` evaluated from the coefficients.
pub fn magnitude_response(cascade: &FilterCascade, f_hz: f64, fs_hz: u32) -> f64 {
    let w = 2.0 * PI * f_hz / fs_hz as f64;
    20.0 * cascade.response(w).norm().log10()
}

/// Causal filtering with zero initial state. Output has the input's length.
pub fn apply_filter(cascade: &FilterCascade, w: &Waveform) -> Result<Waveform> {
    if let Some(index) = w.first_non_finite() {
        return Err(Error::NonFinite { index });
    }
    let mut out = w.samples.clone();
    for s in &cascade.sections {
        filter_in_place(s, &mut out);
    }
    let out = Waveform {
        samples: out,
        sample_rate_hz: w.sample_rate_hz,
    };
    match out.first_non_finite() {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(out),
    }
}

fn filter_in_place(s: &BiquadSection, x: &mut [f64]) {
    let (mut z1, mut z2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let input = *v;
        let y = s.b0 * input + z1;
        z1 = s.b1 * input - s.a1 * y + z2;
        z2 = s.b2 * input - s.a2 * y;
        *v = y;
    }
}

/// The standard chain: 60 Hz notch with three harmonics, then the 300 Hz to
/// 5 kHz bandpass.
pub fn preprocess_chain() -> &'static FilterCascade {
    static CHAIN: OnceLock<FilterCascade> = OnceLock::new();
    CHAIN.get_or_init(|| {
        let notch =
            design_notch_cascade(SAMPLE_RATE, MAINS_HZ, MAINS_HARMONICS, NOTCH_Q).expect("static notch parameters are valid");
        let band = design_bandpass(SAMPLE_RATE, BAND_LO_HZ, BAND_HI_HZ, PREPROCESS_BANDPASS_ORDER)
            .expect("static bandpass parameters are valid");
        notch.then(band)
    })
}

pub fn preprocess(w: &Waveform) -> Result<Waveform> {
    w.check_rate()?;
    apply_filter(preprocess_chain(), w)
}
