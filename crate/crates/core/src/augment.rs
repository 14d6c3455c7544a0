//! Training-time corruption: gain, circular shift and additive noise at a
//! target SNR.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dsp::{mean_square, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::segment::{check_segment_len, NoPatternKind, Segment};

/// Noise levels of the fixed noisy evaluation grid, in dB.
pub const SNR_GRID_DB: [f64; 5] = [-23.0, -10.0, 0.0, 10.0, 23.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub gain_db_range: [f64; 2],
    pub shift_range_s: [f64; 2],
    pub snr_db_range: [f64; 2],
    pub apply_prob: f64,
    pub noise_enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            gain_db_range: [-6.0, 6.0],
            shift_range_s: [-0.2, 0.2],
            snr_db_range: [-23.0, 23.0],
            apply_prob: 0.7,
            noise_enabled: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("gain_db_range", self.gain_db_range),
            ("shift_range_s", self.shift_range_s),
            ("snr_db_range", self.snr_db_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidParameter(format!("{name} must be ordered, got [{lo}, {hi}]")));
            }
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::InvalidParameter(format!(
                "apply_prob must lie in [0, 1], got {}",
                self.apply_prob
            )));
        }
        let max_shift = self.shift_range_s[0].abs().max(self.shift_range_s[1].abs());
        if max_shift >= 1.0 {
            return Err(Error::InvalidParameter("shift range must stay within one segment".into()));
        }
        Ok(())
    }
}

/// Background recordings mixed into pattern segments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoisePool {
    pub entries: Vec<(Waveform, NoPatternKind)>,
}

impl NoisePool {
    pub fn new(entries: Vec<(Waveform, NoPatternKind)>) -> Result<Self> {
        for (w, kind) in &entries {
            check_segment_len(w.len())?;
            if !kind.is_noise_pool() {
                return Err(Error::InvalidParameter(format!(
                    "'{}' segments do not belong in the noise pool",
                    kind.name()
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Collects every noise-pool-kind segment; other segments are ignored.
    pub fn from_segments<'a>(segments: impl IntoIterator<Item = &'a Segment>) -> Self {
        Self {
            entries: segments
                .into_iter()
                .filter_map(|s| s.label.kind().filter(|k| k.is_noise_pool()).map(|k| (s.wave.clone(), k)))
                .filter(|(w, _)| w.power() > 0.0)
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn draw(&self, r: &mut Rng) -> Result<&Waveform> {
        if self.entries.is_empty() {
            return Err(Error::EmptyNoisePool);
        }
        Ok(&self.entries[r.random_range(0..self.entries.len())].0)
    }
}

fn check_equal_len(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: format!("{} samples", a.len()),
            actual: format!("{} samples", b.len()),
        });
    }
    Ok(())
}

/// Measured SNR of a noisy recording against its noise reference.
pub fn snr_db(signal_plus_noise: &Waveform, noise: &Waveform) -> Result<f64> {
    check_equal_len(signal_plus_noise, noise)?;
    let (py, pn) = (signal_plus_noise.power(), noise.power());
    if !(py > pn) || pn <= 0.0 {
        return Err(Error::SignalBelowNoise { signal: py, noise: pn });
    }
    Ok(10.0 * ((py - pn) / pn).log10())
}

pub fn apply_gain(w: &Waveform, gain_db: f64) -> Waveform {
    let g = 10f64.powf(gain_db / 20.0);
    Waveform {
        samples: w.samples.iter().map(|v| v * g).collect(),
        sample_rate_hz: w.sample_rate_hz,
    }
}

/// `out[i] = in[(i - n) mod len]`; positive `n` delays the signal and wraps
/// the tail around to the start.
pub fn circular_shift(w: &Waveform, n_samples: i64) -> Waveform {
    let mut samples = w.samples.clone();
    if !samples.is_empty() {
        let k = n_samples.rem_euclid(samples.len() as i64) as usize;
        samples.rotate_right(k);
    }
    Waveform {
        samples,
        sample_rate_hz: w.sample_rate_hz,
    }
}

/// Noise gain that puts `noise` at `target_snr_db` below `clean`.
pub fn noise_gain(clean: &Waveform, noise: &Waveform, target_snr_db: f64) -> Result<f64> {
    check_equal_len(clean, noise)?;
    let (pc, pn) = (clean.power(), noise.power());
    if pc <= 0.0 {
        return Err(Error::ZeroPower("clean"));
    }
    if pn <= 0.0 {
        return Err(Error::ZeroPower("noise"));
    }
    if !target_snr_db.is_finite() {
        return Err(Error::InvalidParameter(format!("target SNR {target_snr_db} dB")));
    }
    Ok((pc / (pn * 10f64.powf(target_snr_db / 10.0))).sqrt())
}

pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, target_snr_db: f64) -> Result<Waveform> {
    let g = noise_gain(clean, noise, target_snr_db)?;
    Ok(Waveform {
        samples: clean.samples.iter().zip(&noise.samples).map(|(c, n)| c + g * n).collect(),
        sample_rate_hz: clean.sample_rate_hz,
    })
}

fn uniform(r: &mut Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        r.random_range(lo..=hi)
    }
}

/// With probability `apply_prob`: random gain, then circular shift, then
/// noise from the pool at a random SNR. Label and participant are kept.
pub fn augment(seg: &Segment, cfg: &AugmentConfig, pool: &NoisePool, r: &mut Rng) -> Result<Segment> {
    cfg.validate()?;
    if cfg.noise_enabled && pool.is_empty() {
        return Err(Error::EmptyNoisePool);
    }
    if !r.random_bool(cfg.apply_prob) {
        return Ok(seg.clone());
    }
    let gain = uniform(r, cfg.gain_db_range);
    let shift = (uniform(r, cfg.shift_range_s) * SAMPLE_RATE as f64).round() as i64;
    let mut w = circular_shift(&apply_gain(&seg.wave, gain), shift);
    if cfg.noise_enabled {
        let noise = pool.draw(r)?;
        let snr = uniform(r, cfg.snr_db_range);
        if mean_square(&w.samples) > 0.0 {
            w = mix_at_snr(&w, noise, snr)?;
        }
    }
    Ok(seg.with_wave(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::segment::{Label, Provenance, SEGMENT_LEN};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(seed: u64, len: usize, scale: f64) -> Waveform {
        let mut r = rng::rng_from(seed, &[]);
        Waveform::new(
            (0..len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    scale * z
                })
                .collect(),
        )
    }

    fn pattern_segment(seed: u64) -> Segment {
        Segment::new(
            noise(seed, SEGMENT_LEN, 0.1),
            Label::Pattern1,
            "P03",
            Provenance::SyntheticDirect,
        )
        .unwrap()
    }

    fn pool() -> NoisePool {
        NoisePool::new(vec![
            (noise(100, SEGMENT_LEN, 1.0), NoPatternKind::Babble),
            (noise(101, SEGMENT_LEN, 0.3), NoPatternKind::Music),
        ])
        .unwrap()
    }

    fn scaled(w: &Waveform, k: f64) -> Waveform {
        Waveform::new(w.samples.iter().map(|v| v * k).collect())
    }

    #[test]
    fn snr_examples() {
        let n = noise(1, 1000, 1.0);
        let cases = [(2.0, 0.0), (11.0, 10.0), (1.005, 10.0 * 0.005f64.log10())];
        for (ratio, want) in cases {
            let y = scaled(&n, f64::sqrt(ratio));
            assert!((snr_db(&y, &n).unwrap() - want).abs() < 1e-9);
        }
        assert!((10.0 * 0.005f64.log10() + 23.01).abs() < 0.01);
        assert!(matches!(snr_db(&n, &n), Err(Error::SignalBelowNoise { .. })));
        assert!(snr_db(&n, &noise(1, 10, 1.0)).is_err());
    }

    #[test]
    fn gain_examples() {
        let w = noise(2, 100, 1.0);
        assert_eq!(apply_gain(&w, 0.0), w);
        let up = apply_gain(&w, 6.0);
        assert!((up.samples[3] / w.samples[3] - 1.9953).abs() < 1e-4);
        let back = apply_gain(&up, -6.0);
        assert!(back.samples.iter().zip(&w.samples).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn shift_examples() {
        let w = Waveform::new((0..10).map(f64::from).collect());
        assert_eq!(circular_shift(&w, 0), w);
        assert_eq!(circular_shift(&w, 10), w);
        let s = circular_shift(&w, 3);
        assert_eq!(s.samples[0], 7.0);
        assert_eq!(s.samples[3], 0.0);
        assert_eq!(circular_shift(&s, -3), w);
    }

    #[test]
    fn mix_gain_examples() {
        let a = noise(3, 4000, 1.0);
        let b = scaled(&noise(4, 4000, 1.0), a.rms() / noise(4, 4000, 1.0).rms());
        assert!((noise_gain(&a, &b, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((noise_gain(&a, &b, 20.0).unwrap() - 0.1).abs() < 1e-12);
        assert!(matches!(
            mix_at_snr(&a, &Waveform::zeros(4000), 0.0),
            Err(Error::ZeroPower("noise"))
        ));
        assert!(matches!(
            mix_at_snr(&Waveform::zeros(4000), &a, 0.0),
            Err(Error::ZeroPower("clean"))
        ));
    }

    #[test]
    fn mix_hits_target_over_many_draws() {
        use rand::Rng as _;
        let mut r = rng::rng_from(77, &[]);
        let clean = noise(5, 2000, 0.2);
        let n = noise(6, 2000, 3.0);
        for _ in 0..1000 {
            let target = r.random_range(-40.0..40.0);
            let mixed = mix_at_snr(&clean, &n, target).unwrap();
            let residual = Waveform::new(mixed.samples.iter().zip(&clean.samples).map(|(m, c)| m - c).collect());
            let measured = 10.0 * (clean.power() / residual.power()).log10();
            assert!((measured - target).abs() <= 0.01);
        }
    }

    #[test]
    fn augment_identity_cases() {
        let s = pattern_segment(7);
        let mut r = rng::rng_from(0, &[]);
        let off = AugmentConfig {
            apply_prob: 0.0,
            ..AugmentConfig::default()
        };
        assert_eq!(augment(&s, &off, &pool(), &mut r).unwrap(), s);
        let degenerate = AugmentConfig {
            gain_db_range: [0.0, 0.0],
            shift_range_s: [0.0, 0.0],
            snr_db_range: [200.0, 200.0],
            apply_prob: 1.0,
            noise_enabled: true,
        };
        let out = augment(&s, &degenerate, &pool(), &mut r).unwrap();
        let dev = out
            .wave
            .samples
            .iter()
            .zip(&s.wave.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev <= 1e-4 * s.wave.peak());
    }

    #[test]
    fn augment_is_seeded_and_requires_pool() {
        let s = pattern_segment(8);
        let cfg = AugmentConfig::default();
        let run = |seed| augment(&s, &cfg, &pool(), &mut rng::rng_from(seed, &[1])).unwrap();
        assert_eq!(run(5), run(5));
        assert!(matches!(
            augment(&s, &cfg, &NoisePool::default(), &mut rng::rng_from(0, &[])),
            Err(Error::EmptyNoisePool)
        ));
        let quiet = AugmentConfig {
            noise_enabled: false,
            ..cfg
        };
        assert!(augment(&s, &quiet, &NoisePool::default(), &mut rng::rng_from(0, &[])).is_ok());
    }

    #[test]
    fn pool_rejects_bad_entries() {
        assert!(NoisePool::new(vec![(Waveform::zeros(10), NoPatternKind::Music)]).is_err());
        assert!(NoisePool::new(vec![(Waveform::zeros(SEGMENT_LEN), NoPatternKind::Speech)]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            gain_db_range: [3.0, -3.0],
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            apply_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn augment_keeps_length_and_label(seed in any::<u64>()) {
            let s = pattern_segment(seed % 17);
            let cfg = AugmentConfig { apply_prob: 1.0, ..AugmentConfig::default() };
            let out = augment(&s, &cfg, &pool(), &mut rng::rng_from(seed, &[])).unwrap();
            prop_assert_eq!(out.wave.len(), SEGMENT_LEN);
            prop_assert_eq!(out.label, s.label);
            prop_assert_eq!(&out.participant_id, &s.participant_id);
        }

        #[test]
        fn lower_snr_means_more_noise(seed in 0u64..50, a in -30.0f64..30.0, step in 0.1f64..20.0) {
            let clean = noise(seed, 512, 0.5);
            let n = noise(seed + 1000, 512, 1.0);
            let g_hi = noise_gain(&clean, &n, a).unwrap();
            let g_lo = noise_gain(&clean, &n, a - step).unwrap();
            prop_assert!(g_lo * g_lo * n.power() > g_hi * g_hi * n.power());
        }
    }
}
