//! Sliding-window detection over a continuous recording. A window is only
//! classified when the peak gate fires near the position a segment's onset
//! would occupy, and emissions are debounced.

use serde::{Deserialize, Serialize};

use crate::annotator::{detect_peaks, AnnotatorConfig};
use crate::dsp::{self, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::features::Featurizer;
use crate::model::{argmax, forward, Mode, Model};
use crate::segment::{Label, SEGMENT_LEN};
use crate::train::feature_set_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub onset_s: f64,
    pub label: Label,
    /// Model probability of `label`.
    pub confidence: f64,
    pub window_span_s: (f64, f64),
}

/// Gate threshold in units of the envelope's median absolute deviation.
pub const GATE_PROMINENCE_FACTOR: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub hop_s: f64,
    pub gate: AnnotatorConfig,
    pub debounce_s: f64,
    pub min_confidence: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            hop_s: 0.25,
            // with only 1 s of suppression, floor-noise maxima survive the
            // segmenter's prominence factor; clicks sit far above this one
            gate: AnnotatorConfig {
                min_separation_s: 1.0,
                prominence_factor_k: GATE_PROMINENCE_FACTOR,
                ..AnnotatorConfig::default()
            },
            debounce_s: 1.0,
            min_confidence: 0.6,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hop_s > 0.0 && self.hop_s <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "hop_s must lie in (0, 1], got {}",
                self.hop_s
            )));
        }
        if !(self.debounce_s >= self.hop_s) {
            return Err(Error::InvalidParameter("debounce_s must be at least hop_s".into()));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::InvalidParameter("min_confidence must lie in [0, 1]".into()));
        }
        self.gate.validate_detection()
    }

    fn hop_samples(&self) -> usize {
        ((self.hop_s * SAMPLE_RATE as f64).round() as usize).max(1)
    }
}

/// Window start positions, in time order.
pub fn window_starts(len: usize, hop: usize) -> impl Iterator<Item = usize> {
    let last = len.checked_sub(SEGMENT_LEN);
    (0..).map(move |k| k * hop).take_while(move |&s| last.is_some_and(|l| s <= l))
}

/// Gate peaks that select the window starting at `start`: those within half a
/// hop of the nominal onset position of a training segment.
fn gate_zone(start: usize, hop: usize, pre: usize) -> std::ops::Range<usize> {
    let lo = (start + pre).saturating_sub(hop / 2);
    lo..lo + hop
}

/// Runs the detector over `w` (raw or already filtered; the filter chain is
/// applied here).
pub fn stream_detect(w: &Waveform, m: &Model, scfg: &StreamConfig) -> Result<Vec<DetectionEvent>> {
    scfg.validate()?;
    let fz = Featurizer::new(feature_set_for(&m.config)?);
    let mut m = std::borrow::Cow::Borrowed(m);
    if m.mode != Mode::Eval {
        m.to_mut().mode = Mode::Eval;
    }
    let x = dsp::preprocess(w)?;
    let peaks = detect_peaks(&x, &scfg.gate)?.indices;
    let hop = scfg.hop_samples();
    let pre = scfg.gate.pre_samples();
    let fs = SAMPLE_RATE as f64;

    let mut events: Vec<DetectionEvent> = Vec::new();
    let mut next_peak = 0;
    for start in window_starts(x.len(), hop) {
        let zone = gate_zone(start, hop, pre);
        while next_peak < peaks.len() && peaks[next_peak] < zone.start {
            next_peak += 1;
        }
        let Some(&onset) = peaks.get(next_peak).filter(|&&p| zone.contains(&p)) else {
            continue;
        };
        let onset_s = onset as f64 / fs;
        if events.last().is_some_and(|e| onset_s - e.onset_s < scfg.debounce_s) {
            continue;
        }
        let feats = fz.featurize(&x.samples[start..start + SEGMENT_LEN])?;
        let probs = forward(&m, &feats)?;
        let class = argmax(&probs);
        let label = match class {
            1 => Label::Pattern1,
            2 => Label::Pattern2,
            _ => continue,
        };
        if probs[class] < scfg.min_confidence {
            continue;
        }
        events.push(DetectionEvent {
            onset_s,
            label,
            confidence: probs[class],
            window_span_s: (start as f64 / fs, (start + SEGMENT_LEN) as f64 / fs),
        });
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::rng;
    use crate::synthgen::{make_profile, synth_session};

    /// A model whose output ignores its input and favours `class`.
    fn constant_model(class: usize) -> Model {
        let cfg = ModelConfig {
            block_channels: vec![2, 2],
            ..ModelConfig::default()
        };
        let mut m = build_model(&cfg, 0).unwrap();
        m.param_mut("head.weight").unwrap().fill(0.0);
        m.param_mut("head.bias").unwrap()[class] = 5.0;
        m.mode = Mode::Eval;
        m
    }

    #[test]
    fn windows_and_zones_tile_time() {
        let starts: Vec<usize> = window_starts(60_000, 12_000).collect();
        assert_eq!(starts, vec![0, 12_000]);
        assert_eq!(window_starts(47_999, 12_000).count(), 0);
        assert_eq!(window_starts(96_000, 12_000).count(), 5);
        // consecutive zones are contiguous and non-overlapping
        let a = gate_zone(0, 12_000, 12_000);
        let b = gate_zone(12_000, 12_000, 12_000);
        assert_eq!(a, 6_000..18_000);
        assert_eq!(a.end, b.start);
    }

    #[test]
    fn silence_gives_no_events() {
        let m = constant_model(1);
        let ev = stream_detect(&Waveform::zeros(10 * 48_000), &m, &StreamConfig::default()).unwrap();
        assert!(ev.is_empty());
    }

    #[test]
    fn each_event_fires_once_near_its_onset() {
        let m = constant_model(1);
        for (label, seed) in [(Label::Pattern1, 3), (Label::Pattern2, 4)] {
            let p = make_profile(seed);
            let (w, truth) = synth_session(&p, 5, label, &mut rng::rng_from(seed, &[])).unwrap();
            let ev = stream_detect(&w, &m, &StreamConfig::default()).unwrap();
            assert_eq!(ev.len(), 5, "{label}: {ev:?}");
            for (e, t) in ev.iter().zip(&truth.event_onsets_s) {
                assert!((e.onset_s - t).abs() <= 0.5);
                assert_eq!(e.label, Label::Pattern1);
            }
            let bound = (w.duration_s() / 1.0).ceil() as usize;
            assert!(ev.len() <= bound);
        }
    }

    #[test]
    fn confidence_threshold_and_background_class_suppress() {
        let p = make_profile(5);
        let (w, _) = synth_session(&p, 3, Label::Pattern1, &mut rng::rng_from(5, &[])).unwrap();
        assert!(stream_detect(&w, &constant_model(0), &StreamConfig::default())
            .unwrap()
            .is_empty());
        let strict = StreamConfig {
            min_confidence: 1.0,
            ..StreamConfig::default()
        };
        assert!(stream_detect(&w, &constant_model(2), &strict).unwrap().is_empty());
    }

    #[test]
    fn logged_confidence_is_reproducible_from_window() {
        let cfg = ModelConfig {
            block_channels: vec![2, 3],
            ..ModelConfig::default()
        };
        let mut m = build_model(&cfg, 9).unwrap();
        m.mode = Mode::Eval;
        let p = make_profile(8);
        let (w, _) = synth_session(&p, 4, Label::Pattern2, &mut rng::rng_from(8, &[])).unwrap();
        let scfg = StreamConfig {
            min_confidence: 0.0,
            ..StreamConfig::default()
        };
        let ev = stream_detect(&w, &m, &scfg).unwrap();
        assert_eq!(ev, stream_detect(&w, &m, &scfg).unwrap());
        let x = dsp::preprocess(&w).unwrap();
        let fz = Featurizer::new(crate::features::FeatureSet::Full);
        for e in &ev {
            let s = (e.window_span_s.0 * 48_000.0).round() as usize;
            let probs = forward(&m, &fz.featurize(&x.samples[s..s + SEGMENT_LEN]).unwrap()).unwrap();
            assert_eq!(probs[e.label.class()], e.confidence);
        }
    }

    #[test]
    fn config_rules() {
        assert!(StreamConfig::default().validate().is_ok());
        let bad = StreamConfig {
            debounce_s: 0.1,
            ..StreamConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
