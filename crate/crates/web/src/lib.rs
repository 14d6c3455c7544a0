//! Browser bindings for three interactive views: the preprocessing filter
//! response, a synthesized segment with its log-mel image, and noise mixed
//! in at a chosen SNR.
//!
//! The plain Rust functions do the work and are tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use clicksense::augment::mix_at_snr;
use clicksense::dsp::{self, design_bandpass, design_notch_cascade, magnitude_response, Waveform, SAMPLE_RATE};
use clicksense::features::{log_mel_samples, MelFilterbank, N_FRAMES, N_MELS};
use clicksense::rng;
use clicksense::segment::{Label, NoPatternKind};
use clicksense::synthgen::{corpus_profile, synth_segment};
use wasm_bindgen::prelude::*;

const F_MIN_HZ: f64 = 20.0;

/// `n` log-spaced frequencies from 20 Hz up to just below Nyquist.
pub fn response_grid(n: usize) -> Vec<f64> {
    let top = SAMPLE_RATE as f64 / 2.0 * 0.999;
    let (a, b) = (F_MIN_HZ.ln(), top.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n.max(2) - 1) as f64).exp())
        .collect()
}

/// Magnitude in dB of notch(`harmonics`, `q`) followed by an order-`order`
/// bandpass, at every frequency of [`response_grid`].
pub fn chain_response(
    lo_hz: f64,
    hi_hz: f64,
    order: usize,
    notch_q: f64,
    harmonics: usize,
    n: usize,
) -> Result<Vec<f64>, String> {
    let notch = design_notch_cascade(SAMPLE_RATE, dsp::MAINS_HZ, harmonics, notch_q).map_err(|e| e.to_string())?;
    let band = design_bandpass(SAMPLE_RATE, lo_hz, hi_hz, order).map_err(|e| e.to_string())?;
    let chain = notch.then(band);
    Ok(response_grid(n)
        .into_iter()
        .map(|f| magnitude_response(&chain, f, SAMPLE_RATE).max(-120.0))
        .collect())
}

fn parse_label(label: &str) -> Result<Label, String> {
    label.parse().map_err(|e: clicksense::Error| e.to_string())
}

/// One second of synthetic signal for corpus participant `participant`.
pub fn segment_wave(participant: u32, label: &str, seed: u32) -> Result<Vec<f64>, String> {
    let label = parse_label(label)?;
    let profile = corpus_profile(0, participant as usize);
    let mut r = rng::rng_from(seed as u64, &[rng::tag("demo"), participant as u64]);
    Ok(synth_segment(&profile, label, &mut r).wave.samples)
}

/// Row-major 13 × 79 log-mel image of the preprocessed signal.
pub fn log_mel_image(samples: &[f64]) -> Result<Vec<f64>, String> {
    let w = dsp::preprocess(&Waveform::new(samples.to_vec())).map_err(|e| e.to_string())?;
    let m = log_mel_samples(&w.samples, &MelFilterbank::standard()).map_err(|e| e.to_string())?;
    Ok((0..m.rows).flat_map(|r| m.row(r).to_vec()).collect())
}

/// A pattern segment with `noise` mixed in at `target_db`, plus the
/// clean-to-added-noise power ratio measured back from the mixture.
pub fn mixed(participant: u32, label: &str, noise: &str, target_db: f64, seed: u32) -> Result<(Vec<f64>, f64), String> {
    let kind: NoPatternKind = noise.parse().map_err(|e: clicksense::Error| e.to_string())?;
    let clean = Waveform::new(segment_wave(participant, label, seed)?);
    let noise = Waveform::new(segment_wave(
        participant + 1,
        &format!("no_pattern:{}", kind.name()),
        seed ^ 0x5eed,
    )?);
    let mix = mix_at_snr(&clean, &noise, target_db).map_err(|e| e.to_string())?;
    let residual = Waveform::new(mix.samples.iter().zip(&clean.samples).map(|(m, c)| m - c).collect());
    let measured = 10.0 * (clean.power() / residual.power()).log10();
    Ok((mix.samples, measured))
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen(js_name = responseGrid)]
pub fn response_grid_js(n: usize) -> Vec<f64> {
    response_grid(n)
}

#[wasm_bindgen(js_name = chainResponse)]
pub fn chain_response_js(
    lo_hz: f64,
    hi_hz: f64,
    order: usize,
    notch_q: f64,
    harmonics: usize,
    n: usize,
) -> Result<Vec<f64>, JsError> {
    chain_response(lo_hz, hi_hz, order, notch_q, harmonics, n).map_err(js)
}

#[wasm_bindgen(js_name = segmentWave)]
pub fn segment_wave_js(participant: u32, label: &str, seed: u32) -> Result<Vec<f64>, JsError> {
    segment_wave(participant, label, seed).map_err(js)
}

#[wasm_bindgen(js_name = logMelImage)]
pub fn log_mel_image_js(samples: &[f64]) -> Result<Vec<f64>, JsError> {
    log_mel_image(samples).map_err(js)
}

#[wasm_bindgen(js_name = melRows)]
pub fn mel_rows() -> usize {
    N_MELS
}

#[wasm_bindgen(js_name = frameCount)]
pub fn frame_count() -> usize {
    N_FRAMES
}

/// Mixture samples and the SNR measured from them.
#[wasm_bindgen]
pub struct Mixture {
    samples: Vec<f64>,
    measured_db: f64,
}

#[wasm_bindgen]
impl Mixture {
    #[wasm_bindgen(getter)]
    pub fn samples(&self) -> Vec<f64> {
        self.samples.clone()
    }

    #[wasm_bindgen(getter, js_name = measuredDb)]
    pub fn measured_db(&self) -> f64 {
        self.measured_db
    }
}

#[wasm_bindgen(js_name = mixAtSnr)]
pub fn mixed_js(participant: u32, label: &str, noise: &str, target_db: f64, seed: u32) -> Result<Mixture, JsError> {
    let (samples, measured_db) = mixed(participant, label, noise, target_db, seed).map_err(js)?;
    Ok(Mixture { samples, measured_db })
}
