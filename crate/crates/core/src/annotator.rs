//! Rule-based segmentation of continuous recordings.
//!
//! Events are located as prominent peaks of a smoothed rectified envelope,
//! thinned so that no two survive closer than the protocol spacing, and cut
//! into 1 s segments with a fixed pre/post split around each peak.

use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::segment::{Label, Provenance, Segment, SEGMENT_LEN};

const FS: f64 = SAMPLE_RATE as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotatorConfig {
    pub min_separation_s: f64,
    /// Prominence threshold in units of the envelope's median absolute deviation.
    pub prominence_factor_k: f64,
    pub envelope_smooth_ms: f64,
    pub pre_s: f64,
    pub post_s: f64,
    /// After thinning, a surviving peak moves back to the earliest candidate
    /// within this window whose prominence is at least
    /// `anchor_rel_prominence` of its own, so a double click is anchored on
    /// its first click.
    pub anchor_lookback_s: f64,
    pub anchor_rel_prominence: f64,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            min_separation_s: 5.0,
            prominence_factor_k: 8.0,
            envelope_smooth_ms: 2.0,
            pre_s: 0.25,
            post_s: 0.75,
            anchor_lookback_s: 0.5,
            anchor_rel_prominence: 0.3,
        }
    }
}

impl AnnotatorConfig {
    pub(crate) fn validate_detection(&self) -> Result<()> {
        let positive = [
            ("min_separation_s", self.min_separation_s),
            ("prominence_factor_k", self.prominence_factor_k),
            ("envelope_smooth_ms", self.envelope_smooth_ms),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.anchor_lookback_s >= 0.0) || !(0.0..=1.0).contains(&self.anchor_rel_prominence) {
            return Err(Error::InvalidParameter("invalid anchoring parameters".into()));
        }
        Ok(())
    }

    /// Checks the constraints required for cutting event segments.
    pub fn validate(&self) -> Result<()> {
        self.validate_detection()?;
        if (self.pre_s + self.post_s - 1.0).abs() > 1e-9 || self.pre_s < 0.0 || self.post_s < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "pre_s + post_s must equal 1 s, got {} + {}",
                self.pre_s, self.post_s
            )));
        }
        if !(self.min_separation_s > self.pre_s + self.post_s) {
            return Err(Error::InvalidParameter(
                "min_separation_s must exceed the segment length".into(),
            ));
        }
        Ok(())
    }

    pub fn pre_samples(&self) -> usize {
        (self.pre_s * FS).round() as usize
    }
}

/// Detected peaks, sorted by sample index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PeakList {
    pub indices: Vec<usize>,
    pub prominences: Vec<f64>,
}

impl PeakList {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Centered moving average of `|x|` over `width` samples, truncated at the edges.
pub fn envelope(x: &[f64], width: usize) -> Vec<f64> {
    let n = x.len();
    let width = width.max(1);
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in x {
        acc += v.abs();
        prefix.push(acc);
    }
    let half = width / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + width - half).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mid = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Median absolute deviation from the median.
pub fn mad(x: &[f64]) -> f64 {
    let mut buf = x.to_vec();
    let med = median(&mut buf);
    buf.iter_mut().zip(x).for_each(|(b, v)| *b = (v - med).abs());
    median(&mut buf)
}

/// Local maxima (plateaus reduced to their middle sample).
pub fn local_maxima(e: &[f64]) -> Vec<usize> {
    let mut peaks = Vec::new();
    let n = e.len();
    let mut i = 1;
    while i + 1 < n {
        if e[i] > e[i - 1] {
            let mut j = i;
            while j + 1 < n && e[j + 1] == e[i] {
                j += 1;
            }
            if j + 1 < n && e[j + 1] < e[i] {
                peaks.push((i + j) / 2);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    peaks
}

/// Topographic prominence: height above the higher of the two lowest points
/// reached before meeting a strictly higher sample on either side.
pub fn prominence(e: &[f64], peak: usize) -> f64 {
    let h = e[peak];
    let mut left_min = h;
    for &v in e[..peak].iter().rev() {
        if v > h {
            break;
        }
        left_min = left_min.min(v);
    }
    let mut right_min = h;
    for &v in &e[peak + 1..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}

pub fn detect_peaks(w: &Waveform, cfg: &AnnotatorConfig) -> Result<PeakList> {
    cfg.validate_detection()?;
    let width = (cfg.envelope_smooth_ms * 1e-3 * FS).round() as usize;
    let env = envelope(&w.samples, width);
    Ok(detect_on_envelope(&env, cfg))
}

pub(crate) fn detect_on_envelope(env: &[f64], cfg: &AnnotatorConfig) -> PeakList {
    let threshold = cfg.prominence_factor_k * mad(env);
    let candidates: Vec<(usize, f64)> = local_maxima(env)
        .into_iter()
        .map(|i| (i, prominence(env, i)))
        .filter(|&(_, p)| p > 0.0 && p >= threshold)
        .collect();

    let min_sep = (cfg.min_separation_s * FS).round() as usize;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .1
            .total_cmp(&candidates[a].1)
            .then(candidates[a].0.cmp(&candidates[b].0))
    });
    let mut kept: Vec<(usize, f64)> = Vec::new();
    for &ci in &order {
        let (idx, p) = candidates[ci];
        if kept.iter().all(|&(k, _)| k.abs_diff(idx) >= min_sep) {
            kept.push((idx, p));
        }
    }
    kept.sort_by_key(|&(i, _)| i);

    let lookback = (cfg.anchor_lookback_s * FS).round() as usize;
    let mut out = PeakList::default();
    for &(idx, p) in &kept {
        let floor = idx.saturating_sub(lookback);
        let anchor = candidates
            .iter()
            .find(|&&(ci, cp)| ci >= floor && ci < idx && cp >= cfg.anchor_rel_prominence * p)
            .copied();
        let chosen = match (anchor, out.indices.last()) {
            (Some((ai, _)), Some(&prev)) if ai.saturating_sub(prev) < min_sep => (idx, p),
            (Some(a), _) => a,
            (None, _) => (idx, p),
        };
        out.indices.push(chosen.0);
        out.prominences.push(chosen.1);
    }
    out
}

/// Identifies the recording that segments are cut from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordingInfo {
    pub participant_id: String,
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub segments: Vec<Segment>,
    /// Peaks too close to either end of the recording.
    pub dropped: usize,
}

/// Cuts `[peak - pre, peak + post)` around every peak.
pub fn extract_segments(
    w: &Waveform,
    peaks: &PeakList,
    cfg: &AnnotatorConfig,
    label: Label,
    info: &RecordingInfo,
) -> Result<Extraction> {
    cfg.validate()?;
    let pre = cfg.pre_samples();
    let mut out = Extraction {
        segments: Vec::new(),
        dropped: 0,
    };
    for &peak in &peaks.indices {
        if peak < pre || peak - pre + SEGMENT_LEN > w.len() {
            out.dropped += 1;
            continue;
        }
        let start = peak - pre;
        out.segments.push(Segment {
            wave: Waveform {
                samples: w.samples[start..start + SEGMENT_LEN].to_vec(),
                sample_rate_hz: w.sample_rate_hz,
            },
            label,
            participant_id: info.participant_id.clone(),
            source: Provenance::Session {
                session_id: info.session_id.clone(),
                offset: start,
            },
        });
    }
    Ok(out)
}

/// Consecutive non-overlapping 1 s windows; the trailing remainder is discarded.
pub fn segment_nonpattern(w: &Waveform, label: Label, info: &RecordingInfo) -> Result<Vec<Segment>> {
    if label.is_pattern() {
        return Err(Error::InvalidParameter(format!(
            "fixed windowing applies to no-pattern streams, got {label}"
        )));
    }
    Ok(w.samples
        .chunks_exact(SEGMENT_LEN)
        .enumerate()
        .map(|(i, chunk)| Segment {
            wave: Waveform {
                samples: chunk.to_vec(),
                sample_rate_hz: w.sample_rate_hz,
            },
            label,
            participant_id: info.participant_id.clone(),
            source: Provenance::Session {
                session_id: info.session_id.clone(),
                offset: i * SEGMENT_LEN,
            },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp;
    use crate::rng;
    use crate::segment::NoPatternKind;
    use crate::synthgen::{self, ParticipantProfile};
    use proptest::prelude::*;

    fn info() -> RecordingInfo {
        RecordingInfo {
            participant_id: "P00".into(),
            session_id: "s".into(),
        }
    }

    fn clicks_at(onsets: &[f64], secs: f64, seed: u64) -> Waveform {
        let p = ParticipantProfile::single_mode("t", 900.0, 4.0, 0.3, 0.005);
        let mut r = rng::rng_from(seed, &[]);
        let n = (secs * FS) as usize;
        let mut x: Vec<f64> = (0..n)
            .map(|_| p.noise_floor_rms * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut r))
            .collect();
        for &t in onsets {
            let c = synthgen::render_click(&p, &mut r);
            let s = (t * FS) as usize;
            for (d, v) in x[s..].iter_mut().zip(&c) {
                *d += v;
            }
        }
        Waveform::new(x)
    }

    #[test]
    fn zero_waveform_has_no_peaks() {
        let p = detect_peaks(&Waveform::zeros(48_000), &AnnotatorConfig::default()).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn known_onsets_are_found() {
        let w = dsp::preprocess(&clicks_at(&[2.0, 9.0, 16.0], 18.0, 1)).unwrap();
        let p = detect_peaks(&w, &AnnotatorConfig::default()).unwrap();
        assert_eq!(p.len(), 3, "{p:?}");
        for (&i, t) in p.indices.iter().zip([2.0, 9.0, 16.0]) {
            assert!((i as f64 / FS - t).abs() <= 0.010, "{i}");
        }
    }

    #[test]
    fn close_clicks_collapse_to_the_stronger() {
        let mut w = clicks_at(&[2.0], 6.0, 2);
        let weak = clicks_at(&[3.0], 6.0, 3);
        for (a, b) in w.samples.iter_mut().zip(&weak.samples) {
            *a += 0.3 * b;
        }
        let cfg = AnnotatorConfig {
            anchor_lookback_s: 0.0,
            ..AnnotatorConfig::default()
        };
        let p = detect_peaks(&w, &cfg).unwrap();
        assert_eq!(p.len(), 1);
        assert!((p.indices[0] as f64 / FS - 2.0).abs() < 0.01);
    }

    #[test]
    fn double_click_anchors_on_first_click() {
        let p = ParticipantProfile::single_mode("t", 900.0, 4.0, 0.3, 0.005);
        let mut x = vec![0.0; 4 * 48_000];
        let mut r = rng::rng_from(0, &[]);
        let first = synthgen::render_click(&p, &mut r);
        let second = synthgen::render_click(&p, &mut r);
        let s1 = 48_000;
        let s2 = s1 + 14_400;
        for (i, v) in first.iter().enumerate() {
            x[s1 + i] += 0.6 * v;
        }
        for (i, v) in second.iter().enumerate() {
            x[s2 + i] += v;
        }
        let noise = clicks_at(&[], 4.0, 5);
        x.iter_mut().zip(&noise.samples).for_each(|(a, b)| *a += b);
        let peaks = detect_peaks(&Waveform::new(x), &AnnotatorConfig::default()).unwrap();
        assert_eq!(peaks.len(), 1);
        assert!(peaks.indices[0].abs_diff(s1) < 480, "{:?}", peaks.indices);
    }

    #[test]
    fn extraction_arithmetic_and_drops() {
        let w = Waveform::new((0..300_000).map(|i| i as f64).collect());
        let peaks = PeakList {
            indices: vec![1_000, 96_000, 290_000],
            prominences: vec![1.0; 3],
        };
        let ex = extract_segments(&w, &peaks, &AnnotatorConfig::default(), Label::Pattern1, &info()).unwrap();
        assert_eq!(ex.dropped, 2);
        assert_eq!(ex.segments.len(), 1);
        let s = &ex.segments[0];
        assert_eq!(s.wave.samples[0], 84_000.0);
        assert_eq!(*s.wave.samples.last().unwrap(), 131_999.0);
        assert_eq!(s.wave.samples[12_000], 96_000.0);
    }

    #[test]
    fn nonpattern_windows_partition_the_stream() {
        let w = Waveform::new((0..(10.5 * FS) as usize).map(|i| i as f64).collect());
        let segs = segment_nonpattern(&w, Label::NoPattern(NoPatternKind::Speech), &info()).unwrap();
        assert_eq!(segs.len(), 10);
        let joined: Vec<f64> = segs.iter().flat_map(|s| s.wave.samples.clone()).collect();
        assert_eq!(joined, w.samples[..480_000]);
        let short = Waveform::zeros((0.9 * FS) as usize);
        assert!(segment_nonpattern(&short, Label::NoPattern(NoPatternKind::Speech), &info())
            .unwrap()
            .is_empty());
        assert!(segment_nonpattern(&w, Label::Pattern1, &info()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AnnotatorConfig::default().validate().is_ok());
        let bad = AnnotatorConfig {
            pre_s: 0.3,
            ..AnnotatorConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn prominence_is_topographic() {
        let e = [0.0, 3.0, 1.0, 2.0, 0.5, 5.0, 0.0];
        assert_eq!(local_maxima(&e), vec![1, 3, 5]);
        assert_eq!(prominence(&e, 1), 2.5);
        assert_eq!(prominence(&e, 3), 1.0);
        assert_eq!(prominence(&e, 5), 5.0);
    }

    fn match_rate(found: &[usize], truth: &[f64]) -> (f64, f64) {
        let tol = 0.010 * FS;
        let hit = |t: f64| found.iter().any(|&i| (i as f64 - t * FS).abs() <= tol);
        let recall = truth.iter().filter(|&&t| hit(t)).count() as f64 / truth.len() as f64;
        let precise = found
            .iter()
            .filter(|&&i| truth.iter().any(|t| (i as f64 - t * FS).abs() <= tol))
            .count();
        (recall, precise as f64 / found.len().max(1) as f64)
    }

    #[test]
    fn session_recall_and_precision() {
        let (mut hits, mut total_r, mut total_p) = (0, 0.0, 0.0);
        for seed in 0..6u64 {
            let p = synthgen::make_profile(seed);
            let label = if seed % 2 == 0 { Label::Pattern1 } else { Label::Pattern2 };
            let mut r = rng::rng_from(seed, &[9]);
            let (w, truth) = synthgen::synth_session(&p, 8, label, &mut r).unwrap();
            let w = dsp::preprocess(&w).unwrap();
            let peaks = detect_peaks(&w, &AnnotatorConfig::default()).unwrap();
            let (rc, pr) = match_rate(&peaks.indices, &truth.event_onsets_s);
            total_r += rc;
            total_p += pr;
            hits += 1;
        }
        assert!(total_r / hits as f64 >= 0.95, "recall {}", total_r / hits as f64);
        assert!(total_p / hits as f64 >= 0.95, "precision {}", total_p / hits as f64);
    }

    #[test]
    fn double_click_segments_hold_both_clicks() {
        let cfg = AnnotatorConfig::default();
        for seed in 0..4u64 {
            let p = synthgen::make_profile(seed + 20);
            let mut r = rng::rng_from(seed, &[3]);
            let (w, truth) = synthgen::synth_session(&p, 6, Label::Pattern2, &mut r).unwrap();
            let w = dsp::preprocess(&w).unwrap();
            let peaks = detect_peaks(&w, &cfg).unwrap();
            let ex = extract_segments(&w, &peaks, &cfg, Label::Pattern2, &info()).unwrap();
            assert_eq!(ex.segments.len() + ex.dropped, peaks.len());
            for seg in &ex.segments {
                let Provenance::Session { offset, .. } = seg.source else {
                    unreachable!()
                };
                let (lo, hi) = (offset as f64 / FS, (offset + SEGMENT_LEN) as f64 / FS);
                let inside = truth.click_onsets_s.iter().filter(|&&t| t >= lo && t + 0.025 <= hi).count();
                assert_eq!(inside, 2, "segment at {lo}s");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn detection_is_scale_free(seed in 0u64..1000, exp in -8i32..8) {
            let w = clicks_at(&[1.0, 7.0], 9.0, seed);
            let alpha = 2f64.powi(exp);
            let scaled = Waveform::new(w.samples.iter().map(|v| v * alpha).collect());
            let cfg = AnnotatorConfig::default();
            prop_assert_eq!(
                detect_peaks(&w, &cfg).unwrap().indices,
                detect_peaks(&scaled, &cfg).unwrap().indices
            );
        }
    }
}
