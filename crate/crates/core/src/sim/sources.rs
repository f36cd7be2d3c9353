//! Synthetic test sources.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

/// Spectral class of a generated source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Voiced, speech-like harmonic complex with formants and syllabic amplitude modulation.
    #[default]
    Harmonic,
    /// Amplitude-modulated noise below `LOW_BAND_EDGE` of the Nyquist band.
    LowBand,
    /// Amplitude-modulated noise above `HIGH_BAND_EDGE` of the Nyquist band.
    HighBand,
    White,
}

/// Band edges as fractions of the Nyquist frequency.
pub const LOW_BAND_EDGE: f64 = 0.4;
pub const HIGH_BAND_EDGE: f64 = 0.6;

/// A unit-RMS source of `len` samples.
pub fn generate_source<R: Rng + ?Sized>(
    kind: SourceKind,
    len: usize,
    sample_rate: u32,
    rng: &mut R,
) -> Vec<f64> {
    let sr = sample_rate as f64;
    let mut x = match kind {
        SourceKind::Harmonic => harmonic(len, sr, rng),
        SourceKind::LowBand => band_noise(len, 0.02, LOW_BAND_EDGE, rng),
        SourceKind::HighBand => band_noise(len, HIGH_BAND_EDGE, 0.98, rng),
        SourceKind::White => (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    };
    if kind != SourceKind::White {
        let env = syllabic_envelope(len, sr, rng);
        x.iter_mut().zip(&env).for_each(|(v, e)| *v *= e);
    }
    normalize_rms(&mut x);
    x
}

pub fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn normalize_rms(x: &mut [f64]) {
    let r = rms(x);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v /= r);
    }
}

/// Glottal-like harmonic series shaped by three slowly moving formants.
fn harmonic<R: Rng + ?Sized>(len: usize, sr: f64, rng: &mut R) -> Vec<f64> {
    let f0 = rng.gen_range(90.0..260.0);
    let vib_rate = rng.gen_range(0.3..1.2);
    let vib_phase = rng.gen_range(0.0..2.0 * PI);
    let n_harm = ((0.45 * sr) / (f0 * 1.1)).floor() as usize;
    let jitter: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.6..1.0)).collect();
    let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    // (centre Hz, excursion Hz, bandwidth Hz, gain)
    let formants = [
        (rng.gen_range(350.0..750.0), 150.0, 90.0, 1.0),
        (rng.gen_range(1000.0..2000.0), 300.0, 120.0, 0.6),
        (rng.gen_range(2300.0..3000.0), 200.0, 160.0, 0.3),
    ];
    let f_rate = rng.gen_range(1.5..3.5);
    let f_phase = rng.gen_range(0.0..2.0 * PI);
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 / sr;
        let f = f0 * (1.0 + 0.06 * (2.0 * PI * vib_rate * t + vib_phase).sin());
        phase += 2.0 * PI * f / sr;
        let sweep = (2.0 * PI * f_rate * t + f_phase).sin();
        let mut v = 0.0;
        for h in 0..n_harm {
            let fh = (h + 1) as f64 * f;
            let envelope: f64 = 0.05
                + formants
                    .iter()
                    .map(|&(c, ex, bw, g)| g / (1.0 + ((fh - c - ex * sweep) / bw).powi(2)))
                    .sum::<f64>();
            v += jitter[h] * envelope * ((h + 1) as f64 * phase + phases[h]).sin();
        }
        v += 0.01 * rng.sample::<f64, _>(StandardNormal);
        out.push(v);
    }
    out
}

/// White noise restricted to `[lo, hi]` (fractions of Nyquist) by zeroing
/// the rest of its spectrum.
fn band_noise<R: Rng + ?Sized>(len: usize, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..len)
        .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let bin = k.min(len - k);
        let frac = 2.0 * bin as f64 / len as f64;
        if frac < lo || frac > hi {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    buf.iter().map(|v| v.re / len as f64).collect()
}

/// Rectified-sine bursts at a syllable rate of 2.5 to 5 Hz with short pauses.
fn syllabic_envelope<R: Rng + ?Sized>(len: usize, sr: f64, rng: &mut R) -> Vec<f64> {
    let rate = rng.gen_range(2.5..5.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let depth = rng.gen_range(0.8..1.0);
    let jitter = 0.1 * rng.sample::<f64, _>(StandardNormal);
    (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            let s = (PI * rate * (1.0 + jitter) * t + phase).sin().abs();
            1.0 - depth + depth * s.sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn band_energy(x: &[f64], lo: f64, hi: f64) -> f64 {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        FftPlanner::<f64>::new()
            .plan_fft_forward(x.len())
            .process(&mut buf);
        let n = x.len();
        (0..=n / 2)
            .filter(|&k| {
                let frac = 2.0 * k as f64 / n as f64;
                frac >= lo && frac <= hi
            })
            .map(|k| buf[k].norm_sqr())
            .sum()
    }

    #[test]
    fn unit_rms_and_deterministic() {
        for kind in [
            SourceKind::Harmonic,
            SourceKind::LowBand,
            SourceKind::HighBand,
            SourceKind::White,
        ] {
            let a = generate_source(kind, 4000, 8000, &mut ChaCha8Rng::seed_from_u64(5));
            let b = generate_source(kind, 4000, 8000, &mut ChaCha8Rng::seed_from_u64(5));
            assert_eq!(a, b);
            assert!((rms(&a) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn band_sources_stay_in_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let low = generate_source(SourceKind::LowBand, 8000, 8000, &mut rng);
        let high = generate_source(SourceKind::HighBand, 8000, 8000, &mut rng);
        let total_low = band_energy(&low, 0.0, 1.0);
        let total_high = band_energy(&high, 0.0, 1.0);
        // the envelope smears the band edges slightly
        assert!(band_energy(&low, 0.0, 0.45) > 0.99 * total_low);
        assert!(band_energy(&high, 0.55, 1.0) > 0.99 * total_high);
    }
}
