//! Synthetic scenes with known ground truth, and evaluation metrics.

mod metrics;
mod rir;
mod sources;

pub use metrics::{
    doa_error, dominance_masks, match_azimuths, permutation_align, ratio_masks, si_sdr, Alignment,
    MAX_ALIGN_SOURCES, SI_SDR_CAP,
};
pub use rir::{
    convolve, fractional_delay_kernel, image_method_rir, image_taps, render_taps, ImageTap, Room, SINC_TAPS,
};
pub use sources::{generate_source, rms, SourceKind, HIGH_BAND_EDGE, LOW_BAND_EDGE};

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::em::MaskPosterior;
use crate::error::{Error, Result};
use crate::signal::{istft, stft, Spectrogram, StftConfig, Waveform};
use crate::spatial::{bin_frequency, steering_vector, ArrayGeometry};

/// Placement of a reverberant scene inside a room.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomSetup {
    pub room: Room,
    /// Array centroid; microphone offsets come from the geometry.
    pub array_center: [f64; 3],
    pub source_positions: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Dry source signals at their final relative levels, equal lengths.
    pub sources: Vec<Vec<f64>>,
    pub sample_rate: u32,
    /// Far-field azimuths in degrees, `[0, 360)`.
    pub azimuths: Vec<f64>,
    pub geometry: ArrayGeometry,
    /// Signal-to-noise ratio of added white sensor noise; `None` disables it.
    pub snr_db: Option<f64>,
    /// Seed of the sensor noise.
    pub noise_seed: u64,
    /// Present for reverberant scenes.
    pub room: Option<RoomSetup>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::InvalidConfig("a scene needs at least one source".into()));
        }
        let len = self.sources[0].len();
        if self.sources.iter().any(|s| s.len() != len) {
            return Err(Error::Dimension("source signals differ in length".into()));
        }
        if self.azimuths.len() != self.sources.len() {
            return Err(Error::Dimension(format!(
                "{} azimuths for {} sources",
                self.azimuths.len(),
                self.sources.len()
            )));
        }
        if self.azimuths.iter().any(|a| !(0.0..360.0).contains(a)) {
            return Err(Error::InvalidConfig("azimuths must lie in [0, 360)".into()));
        }
        self.geometry.validate()?;
        if let Some(setup) = &self.room {
            setup.room.validate()?;
            if setup.source_positions.len() != self.sources.len() {
                return Err(Error::Dimension("one position per source is required".into()));
            }
            if !setup.source_positions.iter().all(|p| setup.room.contains(p)) {
                return Err(Error::InvalidConfig(
                    "source positions must lie inside the room".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }
}

/// Reference material for scoring a separation of one scene.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Each source's image at the reference microphone, time domain.
    pub references: Vec<Vec<f64>>,
    /// Each source's image at the reference microphone, STFT domain.
    pub reference_spectra: Vec<Spectrogram>,
    pub azimuths: Vec<f64>,
    /// Dominance masks from the reference spectra.
    pub oracle_masks: MaskPosterior,
}

impl GroundTruth {
    pub fn ratio_masks(&self) -> Result<MaskPosterior> {
        ratio_masks(&self.reference_spectra)
    }
}

pub const REFERENCE_MIC: usize = 0;

/// Far-field anechoic mixing: each source's STFT is multiplied by its
/// steering vector, the images are summed, and white noise is added in the
/// time domain.
pub fn mix_planewave(scene: &Scene, cfg: &StftConfig) -> Result<(Waveform, GroundTruth)> {
    scene.validate()?;
    let m = scene.geometry.n_mics();
    let sr = scene.sample_rate;
    let mut images = Vec::with_capacity(scene.n_sources());
    for (src, &az) in scene.sources.iter().zip(&scene.azimuths) {
        let s = stft(&Waveform::mono(src.clone(), sr)?, cfg)?;
        let (t, f) = (s.n_frames(), s.n_freqs());
        let mut values = Array3::<Complex64>::zeros((t, f, m));
        for fi in 0..f {
            let h = steering_vector(&scene.geometry, az, bin_frequency(fi, f, sr));
            for ti in 0..t {
                let v = s.values()[[ti, fi, 0]];
                for (mi, hv) in h.iter().enumerate() {
                    values[[ti, fi, mi]] = hv * v;
                }
            }
        }
        images.push(istft(
            &Spectrogram::new(values, sr, cfg.window_len, cfg.hop)?,
            cfg,
        )?);
    }
    finish_mixture(scene, images, cfg)
}

/// Reverberant mixing with image-method impulse responses from each source
/// to each microphone.
pub fn mix_reverberant(scene: &Scene, cfg: &StftConfig) -> Result<(Waveform, GroundTruth)> {
    scene.validate()?;
    let setup = scene
        .room
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("reverberant mixing needs a room".into()))?;
    let len = scene.sources[0].len();
    let mut images = Vec::with_capacity(scene.n_sources());
    for (src, pos) in scene.sources.iter().zip(&setup.source_positions) {
        let mut channels = Vec::with_capacity(scene.geometry.n_mics());
        for mic in &scene.geometry.mic_positions {
            let p = [
                setup.array_center[0] + mic[0],
                setup.array_center[1] + mic[1],
                setup.array_center[2] + mic[2],
            ];
            let h = image_method_rir(
                &setup.room,
                *pos,
                p,
                scene.geometry.speed_of_sound,
                scene.sample_rate,
            )?;
            let mut y = convolve(src, &h);
            y.truncate(len);
            channels.push(y);
        }
        images.push(Waveform::from_channels(&channels, scene.sample_rate)?);
    }
    finish_mixture(scene, images, cfg)
}

fn finish_mixture(scene: &Scene, images: Vec<Waveform>, cfg: &StftConfig) -> Result<(Waveform, GroundTruth)> {
    let m = scene.geometry.n_mics();
    let len = images.iter().map(|w| w.len()).min().unwrap_or(0);
    let mut mix = Array2::<f64>::zeros((m, len));
    for img in &images {
        mix += &img.samples().slice(ndarray::s![.., ..len]);
    }
    if let Some(snr) = scene.snr_db {
        let power = mix.iter().map(|v| v * v).sum::<f64>() / mix.len().max(1) as f64;
        let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
        mix.iter_mut()
            .for_each(|v| *v += sigma * rng.sample::<f64, _>(StandardNormal));
    }
    let references: Vec<Vec<f64>> = images
        .iter()
        .map(|w| w.channel(REFERENCE_MIC).iter().take(len).copied().collect())
        .collect();
    let reference_spectra = references
        .iter()
        .map(|r| stft(&Waveform::mono(r.clone(), scene.sample_rate)?, cfg))
        .collect::<Result<Vec<_>>>()?;
    let oracle_masks = dominance_masks(&reference_spectra)?;
    Ok((
        Waveform::new(mix, scene.sample_rate)?,
        GroundTruth {
            references,
            reference_spectra,
            azimuths: scene.azimuths.clone(),
            oracle_masks,
        },
    ))
}

/// Parameters of randomly drawn plane-wave scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneOptions {
    pub kinds: Vec<SourceKind>,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Range of the azimuth difference between consecutive sources, degrees.
    pub separation_deg: (f64, f64),
    /// Relative level of every source but the first, drawn uniformly in dB.
    pub level_range_db: (f64, f64),
    pub snr_db: Option<f64>,
    pub geometry: ArrayGeometry,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            kinds: vec![SourceKind::Harmonic; 2],
            duration_s: 3.0,
            sample_rate: 8000,
            separation_deg: (60.0, 180.0),
            level_range_db: (-5.0, 5.0),
            snr_db: Some(30.0),
            geometry: ArrayGeometry::default(),
        }
    }
}

/// Draws a scene; every random quantity comes from `seed`.
pub fn random_scene(opts: &SceneOptions, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (opts.duration_s * opts.sample_rate as f64).round() as usize;
    let mut azimuths = Vec::with_capacity(opts.kinds.len());
    let mut az: f64 = rng.gen_range(0.0..360.0);
    let mut sources = Vec::with_capacity(opts.kinds.len());
    for (i, &kind) in opts.kinds.iter().enumerate() {
        if i > 0 {
            let (lo, hi) = opts.separation_deg;
            let sep = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            az = (az + sign * sep).rem_euclid(360.0);
        }
        azimuths.push(az);
        let mut s = generate_source(kind, len, opts.sample_rate, &mut rng);
        if i > 0 {
            let (lo, hi) = opts.level_range_db;
            let db = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let gain = 10f64.powf(db / 20.0);
            s.iter_mut().for_each(|v| *v *= gain);
        }
        sources.push(s);
    }
    Scene {
        sources,
        sample_rate: opts.sample_rate,
        azimuths,
        geometry: opts.geometry.clone(),
        snr_db: opts.snr_db,
        noise_seed: rng.gen(),
        room: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(m: usize, snr: Option<f64>) -> Scene {
        let mut opts = SceneOptions {
            duration_s: 0.5,
            snr_db: snr,
            ..SceneOptions::default()
        };
        if m == 1 {
            opts.geometry = ArrayGeometry::new(vec![[0.0; 3]], 343.0).unwrap();
        }
        random_scene(&opts, 3)
    }

    #[test]
    fn noiseless_mixture_is_sum_of_images() {
        let cfg = StftConfig::default();
        let sc = scene(4, None);
        let (mix, truth) = mix_planewave(&sc, &cfg).unwrap();
        let ch0 = mix.channel(REFERENCE_MIC);
        for n in 0..mix.len() {
            let sum: f64 = truth.references.iter().map(|r| r[n]).sum();
            assert!((ch0[n] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn single_mic_mixture_is_plain_sum() {
        let cfg = StftConfig::default();
        let sc = scene(1, None);
        let (mix, _) = mix_planewave(&sc, &cfg).unwrap();
        let pad = cfg.window_len;
        // interior samples are reproduced exactly by the STFT round trip
        for n in pad..mix.len() - pad {
            let sum: f64 = sc.sources.iter().map(|s| s[n]).sum();
            assert!((mix.channel(0)[n] - sum).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_level_matches_request() {
        let cfg = StftConfig::default();
        let clean = mix_planewave(&scene(4, None), &cfg).unwrap().0;
        let noisy = mix_planewave(&scene(4, Some(10.0)), &cfg).unwrap().0;
        let p_clean: f64 = clean.samples().iter().map(|v| v * v).sum();
        let p_noise: f64 = (noisy.samples() - clean.samples()).iter().map(|v| v * v).sum();
        let snr = 10.0 * (p_clean / p_noise).log10();
        assert!((snr - 10.0).abs() < 0.2, "{snr}");
    }

    #[test]
    fn random_scene_respects_options() {
        let opts = SceneOptions {
            separation_deg: (20.0, 40.0),
            ..SceneOptions::default()
        };
        for seed in 0..20 {
            let sc = random_scene(&opts, seed);
            let sep = crate::spatial::circular_distance(sc.azimuths[0], sc.azimuths[1]);
            assert!((20.0 - 1e-9..=40.0 + 1e-9).contains(&sep));
            let level = 20.0 * (rms(&sc.sources[1]) / rms(&sc.sources[0])).log10();
            assert!((-5.0 - 1e-9..=5.0 + 1e-9).contains(&level));
        }
    }
}
