//! Deterministic synthetic vibration corpora.
//!
//! A participant is modeled by 1-3 damped resonant modes; a click is the sum
//! of those modes excited with random phase and truncated at 25 ms. Single
//! and double clicks sit on a white noise floor. No-pattern material is
//! produced by fixed recipes (band-limited syllabic noise for speech, bursts
//! for chewing, slow drift for motion, and so on) that stand in for the real
//! recordings.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::manifest::{CorpusManifest, ManifestEntry, MANIFEST_FILE};
use crate::rng::{self, Rng};
use crate::segment::{Label, NoPatternKind, Provenance, Segment, SEGMENT_LEN};
use crate::wav;

pub const MODE_FREQ_MIN_HZ: f64 = 400.0;
/// Upper bound of sampled mode frequencies. Kept under the 5 kHz band edge
/// so a click's energy stays inside the analysis band.
pub const MODE_FREQ_MAX_HZ: f64 = 4_800.0;
pub const DECAY_TAU_MIN_MS: f64 = 2.0;
pub const DECAY_TAU_MAX_MS: f64 = 8.0;
/// Hard length of a rendered click.
pub const CLICK_LEN_S: f64 = 0.025;
const CLICK_TAPER_S: f64 = 0.005;
pub const CLICK_JITTER_DB: f64 = 3.0;
/// Nominal onset of the (first) click inside a segment.
pub const EVENT_OFFSET_S: f64 = 0.25;
pub const ONSET_JITTER_S: f64 = 0.05;
pub const DOUBLE_GAP_MIN_S: f64 = 0.08;
pub const DOUBLE_GAP_MAX_S: f64 = 0.40;
pub const SESSION_GAP_MIN_S: f64 = 5.0;
pub const SESSION_GAP_MAX_S: f64 = 8.0;

const FS: f64 = SAMPLE_RATE as f64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonantMode {
    pub freq_hz: f64,
    pub decay_tau_ms: f64,
    pub relative_amp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantProfile {
    pub id: String,
    /// Primary mode first, with relative amplitude 1.
    pub modes: Vec<ResonantMode>,
    pub click_amp: f64,
    pub noise_floor_rms: f64,
    pub rng_seed: u64,
}

impl ParticipantProfile {
    pub fn primary_freq_hz(&self) -> f64 {
        self.modes[0].freq_hz
    }

    /// Profile with a single resonant mode, useful for controlled tests.
    pub fn single_mode(id: &str, freq_hz: f64, decay_tau_ms: f64, click_amp: f64, noise_floor_rms: f64) -> Self {
        Self {
            id: id.to_string(),
            modes: vec![ResonantMode {
                freq_hz,
                decay_tau_ms,
                relative_amp: 1.0,
            }],
            click_amp,
            noise_floor_rms,
            rng_seed: 0,
        }
    }
}

/// Primary resonance bands. Profiles rotate through them by seed so any run of
/// consecutive seeds covers low, mid and high resonances evenly.
const PRIMARY_BANDS: [(f64, f64); 3] = [(400.0, 1_000.0), (1_000.0, 3_000.0), (3_000.0, 4_800.0)];

pub fn make_profile(seed: u64) -> ParticipantProfile {
    let mut r = rng::rng_from(seed, &[rng::tag("profile")]);
    let (lo, hi) = PRIMARY_BANDS[(seed % 3) as usize];
    let n_modes = r.random_range(1..=3usize);
    let mut modes = vec![ResonantMode {
        freq_hz: r.random_range(lo..hi),
        decay_tau_ms: r.random_range(DECAY_TAU_MIN_MS..=DECAY_TAU_MAX_MS),
        relative_amp: 1.0,
    }];
    for _ in 1..n_modes {
        modes.push(ResonantMode {
            freq_hz: r.random_range(MODE_FREQ_MIN_HZ..=MODE_FREQ_MAX_HZ),
            decay_tau_ms: r.random_range(DECAY_TAU_MIN_MS..=DECAY_TAU_MAX_MS),
            relative_amp: r.random_range(0.2..0.8),
        });
    }
    let click_amp = r.random_range(0.05..0.5);
    let ratio = r.random_range(25.0..80.0);
    ParticipantProfile {
        id: format!("S{seed}"),
        modes,
        click_amp,
        noise_floor_rms: click_amp / ratio,
        rng_seed: seed,
    }
}

/// Click samples only (`CLICK_LEN_S` long), starting at the click onset.
pub fn render_click(p: &ParticipantProfile, r: &mut Rng) -> Vec<f64> {
    let n = (CLICK_LEN_S * FS).round() as usize;
    let taper_start = ((CLICK_LEN_S - CLICK_TAPER_S) * FS).round() as usize;
    let jitter = r.random_range(-CLICK_JITTER_DB..=CLICK_JITTER_DB);
    let amp = p.click_amp * 10f64.powf(jitter / 20.0);
    let phases: Vec<f64> = p.modes.iter().map(|_| r.random_range(0.0..2.0 * PI)).collect();
    (0..n)
        .map(|i| {
            let t = i as f64 / FS;
            let s: f64 = p
                .modes
                .iter()
                .zip(&phases)
                .map(|(m, &ph)| m.relative_amp * (-t * 1e3 / m.decay_tau_ms).exp() * (2.0 * PI * m.freq_hz * t + ph).sin())
                .sum();
            let window = if i < taper_start {
                1.0
            } else {
                0.5 * (1.0 + (PI * (i - taper_start) as f64 / (n - 1 - taper_start) as f64).cos())
            };
            amp * s * window
        })
        .collect()
}

/// A waveform holding one click starting at `t0_s`, silent before it.
pub fn synth_click(p: &ParticipantProfile, t0_s: f64, r: &mut Rng) -> Waveform {
    let click = render_click(p, r);
    let start = (t0_s.max(0.0) * FS).round() as usize;
    let mut samples = vec![0.0; start + click.len()];
    samples[start..].copy_from_slice(&click);
    Waveform::new(samples)
}

fn add_at(buf: &mut [f64], start: usize, src: &[f64]) {
    for (d, s) in buf.iter_mut().skip(start).zip(src) {
        *d += s;
    }
}

fn gaussian(n: usize, sigma: f64, r: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| sigma * r.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = dsp::mean_square(x).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

/// White noise band-limited to `[lo, hi]` Hz with unit RMS.
fn band_noise(n: usize, lo: f64, hi: f64, r: &mut Rng) -> Vec<f64> {
    let settle = 4_800;
    let raw = Waveform::new(gaussian(n + settle, 1.0, r));
    let band = dsp::design_bandpass(SAMPLE_RATE, lo, hi, 4).expect("fixed band is valid");
    let mut x = dsp::apply_filter(&band, &raw)
        .expect("finite noise")
        .samples
        .split_off(settle);
    normalize_rms(&mut x, 1.0);
    x
}

/// Band-limited noise shaped by a 3-5 Hz syllabic envelope, unit RMS.
fn speech_like(n: usize, r: &mut Rng) -> Vec<f64> {
    let carrier = band_noise(n, 300.0, 4_000.0, r);
    let rate = r.random_range(3.0..5.0);
    let phase = r.random_range(0.0..2.0 * PI);
    let n_syll = (n as f64 / FS * rate).ceil() as usize + 2;
    let syll_amp: Vec<f64> = (0..n_syll).map(|_| r.random_range(0.3..1.0)).collect();
    let mut x: Vec<f64> = carrier
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let arg = 2.0 * PI * rate * i as f64 / FS + phase;
            let k = (arg / (2.0 * PI)).floor() as usize % n_syll;
            c * arg.sin().max(0.0).powf(1.5) * syll_amp[k]
        })
        .collect();
    normalize_rms(&mut x, 1.0);
    x
}

fn chewing(n: usize, r: &mut Rng) -> Vec<f64> {
    let carrier = band_noise(n, 100.0, 600.0, r);
    let rate = r.random_range(1.0..2.0);
    let period = (FS / rate) as usize;
    let mut env = vec![0.0; n];
    let mut start = r.random_range(0..period);
    while start < n {
        let len = (r.random_range(0.08..0.2) * FS) as usize;
        let a = r.random_range(0.6..1.0);
        for j in 0..len.min(n - start) {
            env[start + j] = a * (PI * j as f64 / len as f64).sin().powi(2);
        }
        start += period;
    }
    let mut x: Vec<f64> = carrier.iter().zip(&env).map(|(c, e)| c * e).collect();
    normalize_rms(&mut x, 1.0);
    x
}

fn motion(n: usize, r: &mut Rng) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for _ in 0..3 {
        let f = r.random_range(0.3..20.0);
        let a = r.random_range(0.5..2.0);
        let ph = r.random_range(0.0..2.0 * PI);
        for (i, v) in x.iter_mut().enumerate() {
            *v += a * (2.0 * PI * f * i as f64 / FS + ph).sin();
        }
    }
    let bumps = r.random_range(0..=3usize);
    for _ in 0..bumps {
        let len = (r.random_range(0.03..0.12) * FS) as usize;
        let start = r.random_range(0..n.saturating_sub(len).max(1));
        let a = r.random_range(-2.0..2.0);
        for j in 0..len.min(n - start) {
            x[start + j] += a * (PI * j as f64 / len as f64).sin();
        }
    }
    normalize_rms(&mut x, 1.0);
    x
}

fn music(n: usize, r: &mut Rng) -> Vec<f64> {
    let mut x = vec![0.0; n];
    let mut start = 0usize;
    while start < n {
        let len = (r.random_range(0.25..0.6) * FS) as usize;
        let f0 = r.random_range(150.0..600.0);
        let decay = r.random_range(0.15..0.5);
        let a = r.random_range(0.5..1.0);
        for j in 0..len.min(n - start) {
            let t = j as f64 / FS;
            let env = (t / 0.02).min(1.0) * (-t / decay).exp();
            let tone: f64 = (1..=6).map(|k| (2.0 * PI * f0 * k as f64 * t).sin() / k as f64).sum();
            x[start + j] += a * env * tone;
        }
        start += len;
    }
    normalize_rms(&mut x, 1.0);
    x
}

/// Unit-RMS no-pattern texture of the given kind (silence is all zeros).
fn texture(kind: NoPatternKind, n: usize, r: &mut Rng) -> Vec<f64> {
    match kind {
        NoPatternKind::Silence => vec![0.0; n],
        NoPatternKind::Speech => speech_like(n, r),
        NoPatternKind::Babble => {
            let mut x = vec![0.0; n];
            for _ in 0..4 {
                let s = speech_like(n, r);
                x.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
            }
            normalize_rms(&mut x, 1.0);
            x
        }
        NoPatternKind::Chewing => chewing(n, r),
        NoPatternKind::Motion => motion(n, r),
        NoPatternKind::Music => music(n, r),
    }
}

/// Level of a no-pattern texture relative to the participant's click amplitude.
fn texture_level(kind: NoPatternKind, p: &ParticipantProfile, r: &mut Rng) -> f64 {
    let rel = match kind {
        NoPatternKind::Silence => 0.0,
        NoPatternKind::Speech | NoPatternKind::Babble | NoPatternKind::Music => r.random_range(0.1..0.4),
        NoPatternKind::Chewing => r.random_range(0.2..0.6),
        NoPatternKind::Motion => r.random_range(0.5..2.0),
    };
    rel * p.click_amp
}

/// Onsets (seconds, relative to the event start) of the clicks making up a pattern.
fn pattern_onsets(label: Label, r: &mut Rng) -> Vec<f64> {
    let first = r.random_range(-ONSET_JITTER_S..=ONSET_JITTER_S);
    match label {
        Label::Pattern1 => vec![first],
        Label::Pattern2 => vec![first, first + r.random_range(DOUBLE_GAP_MIN_S..=DOUBLE_GAP_MAX_S)],
        Label::NoPattern(_) => Vec::new(),
    }
}

/// Samples of one labeled second, without the noise floor. Returns the click
/// onsets in seconds relative to the segment start.
fn event_content(p: &ParticipantProfile, label: Label, r: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; SEGMENT_LEN];
    let mut onsets = Vec::new();
    match label {
        Label::NoPattern(kind) => {
            let level = texture_level(kind, p, r);
            let t = texture(kind, SEGMENT_LEN, r);
            x.iter_mut().zip(&t).for_each(|(a, b)| *a += level * b);
        }
        _ => {
            for rel in pattern_onsets(label, r) {
                let onset = EVENT_OFFSET_S + rel;
                let click = render_click(p, r);
                add_at(&mut x, (onset * FS).round() as usize, &click);
                onsets.push(onset);
            }
        }
    }
    (x, onsets)
}

pub fn synth_segment(p: &ParticipantProfile, label: Label, r: &mut Rng) -> Segment {
    let floor = gaussian(SEGMENT_LEN, p.noise_floor_rms, r);
    let (mut x, _) = event_content(p, label, r);
    x.iter_mut().zip(&floor).for_each(|(a, b)| *a += b);
    Segment {
        wave: Waveform::new(x),
        label,
        participant_id: p.id.clone(),
        source: Provenance::SyntheticDirect,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionGroundTruth {
    /// Event onsets in seconds; for double clicks, the first click.
    pub event_onsets_s: Vec<f64>,
    pub event_labels: Vec<Label>,
    /// Every individual click onset, in seconds.
    pub click_onsets_s: Vec<f64>,
}

/// Lead-in before the first event and tail after the last.
pub const SESSION_LEAD_S: f64 = 2.0;
pub const SESSION_TAIL_S: f64 = 2.0;

/// A continuous recording with `n_events` protocol-timed events of `label`.
pub fn synth_session(
    p: &ParticipantProfile,
    n_events: usize,
    label: Label,
    r: &mut Rng,
) -> Result<(Waveform, SessionGroundTruth)> {
    if n_events == 0 {
        return Err(Error::InvalidParameter("a session needs at least one event".into()));
    }
    let mut starts = Vec::with_capacity(n_events);
    let mut t = SESSION_LEAD_S + r.random_range(-0.5..0.5);
    for _ in 0..n_events {
        starts.push(t);
        t += r.random_range(SESSION_GAP_MIN_S..SESSION_GAP_MAX_S);
    }
    let last = *starts.last().expect("n_events >= 1");
    let total = ((last + 1.0 + SESSION_TAIL_S) * FS).ceil() as usize;
    let mut x = gaussian(total, p.noise_floor_rms, r);
    let mut truth = SessionGroundTruth {
        event_onsets_s: Vec::with_capacity(n_events),
        event_labels: Vec::with_capacity(n_events),
        click_onsets_s: Vec::new(),
    };
    for &start in &starts {
        let onset = start;
        match label {
            Label::NoPattern(_) => {
                let (content, _) = event_content(p, label, r);
                add_at(&mut x, (onset * FS).round() as usize, &content);
                truth.event_onsets_s.push(onset);
            }
            _ => {
                let rels = pattern_onsets(label, r);
                for rel in &rels {
                    let at = onset + rel - rels[0];
                    let click = render_click(p, r);
                    add_at(&mut x, (at * FS).round() as usize, &click);
                    truth.click_onsets_s.push(at);
                }
                truth.event_onsets_s.push(onset);
            }
        }
        truth.event_labels.push(label);
    }
    Ok((Waveform::new(x), truth))
}

/// Segment counts for a corpus. Per-participant counts apply to every
/// participant; pooled totals are spread round-robin over participants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Composition {
    pub pattern1: usize,
    pub pattern2: usize,
    pub speech: usize,
    pub silence: usize,
    pub pooled_chewing: usize,
    pub pooled_motion: usize,
    pub pooled_babble: usize,
    pub pooled_music: usize,
}

impl Default for Composition {
    fn default() -> Self {
        Self::reference_mix(21)
    }
}

const REFERENCE_PARTICIPANTS: usize = 21;

impl Composition {
    /// Class proportions of the reference 21-participant study, scaled to
    /// `n_participants`.
    pub fn reference_mix(n_participants: usize) -> Self {
        let pooled = |total: usize| ((total * n_participants) as f64 / REFERENCE_PARTICIPANTS as f64).round() as usize;
        Self {
            pattern1: 16,
            pattern2: 18,
            speech: 40,
            silence: 9,
            pooled_chewing: pooled(60),
            pooled_motion: pooled(45),
            pooled_babble: pooled(30),
            pooled_music: pooled(20),
        }
    }

    /// `k` single clicks, `k` double clicks and `k` speech segments per participant.
    pub fn uniform(k: usize) -> Self {
        Self {
            pattern1: k,
            pattern2: k,
            speech: k,
            silence: 0,
            pooled_chewing: 0,
            pooled_motion: 0,
            pooled_babble: 0,
            pooled_music: 0,
        }
    }

    fn per_participant(&self) -> [(Label, usize); 4] {
        [
            (Label::Pattern1, self.pattern1),
            (Label::Pattern2, self.pattern2),
            (Label::NoPattern(NoPatternKind::Speech), self.speech),
            (Label::NoPattern(NoPatternKind::Silence), self.silence),
        ]
    }

    fn pooled(&self) -> [(NoPatternKind, usize); 4] {
        [
            (NoPatternKind::Chewing, self.pooled_chewing),
            (NoPatternKind::Motion, self.pooled_motion),
            (NoPatternKind::Babble, self.pooled_babble),
            (NoPatternKind::Music, self.pooled_music),
        ]
    }
}

/// Participant id for corpus index `i`.
pub fn participant_id(i: usize) -> String {
    format!("P{i:02}")
}

/// Profile of corpus participant `i`. Consecutive participants rotate through
/// the primary resonance bands.
pub fn corpus_profile(seed: u64, i: usize) -> ParticipantProfile {
    let mut p = make_profile(seed.wrapping_mul(1_000).wrapping_add(i as u64));
    p.id = participant_id(i);
    p
}

/// A generated segment and the file name it is stored under.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub segment: Segment,
    pub file_name: String,
    pub split_hint: &'static str,
}

/// Generates the corpus in memory. Every segment has its own derived seed, so
/// the result is a pure function of `(n_participants, composition, seed)`.
pub fn generate_corpus(n_participants: usize, composition: &Composition, seed: u64) -> Result<Vec<CorpusItem>> {
    if n_participants < 3 {
        return Err(Error::InvalidParameter(format!(
            "a corpus needs at least 3 participants, got {n_participants}"
        )));
    }
    let profiles: Vec<_> = (0..n_participants).map(|i| corpus_profile(seed, i)).collect();
    let mut plan: Vec<Vec<Label>> = vec![Vec::new(); n_participants];
    for labels in plan.iter_mut() {
        for (label, count) in composition.per_participant() {
            labels.extend(std::iter::repeat_n(label, count));
        }
    }
    for (k, (kind, total)) in composition.pooled().into_iter().enumerate() {
        for j in 0..total {
            plan[(j + 3 * k) % n_participants].push(Label::NoPattern(kind));
        }
    }

    let mut items = Vec::new();
    for (pi, (profile, labels)) in profiles.iter().zip(&plan).enumerate() {
        let mut per_label_index = std::collections::BTreeMap::<Label, usize>::new();
        for label in labels {
            let idx = per_label_index.entry(*label).or_default();
            let mut r = rng::rng_from(
                seed,
                &[
                    rng::tag("segment"),
                    pi as u64,
                    label.class() as u64,
                    label_tag(*label),
                    *idx as u64,
                ],
            );
            let segment = synth_segment(profile, *label, &mut r);
            let stem = match label.kind() {
                Some(k) => format!("no_pattern_{}", k.name()),
                None => label.class_name().to_string(),
            };
            items.push(CorpusItem {
                segment,
                file_name: format!("{}/{stem}_{:04}.wav", profile.id, idx),
                split_hint: split_hint(*label),
            });
            *idx += 1;
        }
    }
    Ok(items)
}

fn label_tag(label: Label) -> u64 {
    label.kind().map_or(0, |k| rng::tag(k.name()))
}

fn split_hint(label: Label) -> &'static str {
    match label {
        Label::NoPattern(k) if k.is_noise_pool() => "noise_pool",
        Label::NoPattern(_) => "background",
        _ => "event",
    }
}

/// Writes generated items under `dir` and the manifest next to them.
pub fn write_corpus(items: &[CorpusItem], dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    let dir = dir.as_ref();
    let mut entries = Vec::with_capacity(items.len());
    for item in items {
        let path = dir.join(&item.file_name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        wav::write_wav(&path, &item.segment.wave)?;
        entries.push(ManifestEntry::new(
            item.file_name.clone(),
            &item.segment.participant_id,
            item.segment.label,
            item.split_hint,
            false,
        ));
    }
    let manifest = CorpusManifest::new(dir, entries)?;
    manifest.write(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn build_corpus(
    n_participants: usize,
    composition: &Composition,
    seed: u64,
    dir: impl AsRef<Path>,
) -> Result<CorpusManifest> {
    let items = generate_corpus(n_participants, composition, seed)?;
    write_corpus(&items, dir)
}
