//! TOML configuration with one section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::em::{EmConfig, PriorScale};
use crate::error::{Error, Result};
use crate::pipeline::SeparatorConfig;
use crate::signal::StftConfig;
use crate::sim::{Room, SceneOptions, SourceKind};
use crate::spatial::{ArrayGeometry, DirectionGrid, Hyperparams};
use crate::train::{TrainConfig, TrainOptions, DEFAULT_CONTEXT, DEFAULT_HIDDEN, DEFAULT_LR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub geometry: GeometrySection,
    pub grid: DirectionGrid,
    pub stft: StftConfig,
    pub em: EmSection,
    pub train: TrainSection,
    pub simulate: SimulateSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    /// Microphone positions in metres.
    pub mic_positions: Vec<[f64; 3]>,
    pub speed_of_sound: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        let g = ArrayGeometry::default();
        Self {
            mic_positions: g.mic_positions,
            speed_of_sound: g.speed_of_sound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSection {
    pub n_sources: usize,
    pub n_iters: usize,
    /// Degrees of freedom of the SCM prior; `M + 5` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    pub epsilon: f64,
    pub lambda_floor: f64,
    pub posterior_floor: f64,
    pub convergence_tol: f64,
    pub prior_scale: PriorScale,
    /// Direction classes of the first pass of directional separation.
    pub directional_classes: usize,
    pub reference_channel: usize,
}

impl Default for EmSection {
    fn default() -> Self {
        let em = EmConfig::for_channels(4);
        Self {
            n_sources: em.n_sources,
            n_iters: em.n_iters,
            nu: None,
            epsilon: 1e-2,
            lambda_floor: em.lambda_floor,
            posterior_floor: em.posterior_floor,
            convergence_tol: em.convergence_tol,
            prior_scale: em.prior_scale,
            directional_classes: 6,
            reference_channel: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: u32,
    pub omega_stop_gradient: bool,
    pub seed: u64,
    pub hidden: usize,
    pub context: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            batch_size: 8,
            epochs: 20,
            omega_stop_gradient: false,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            context: DEFAULT_CONTEXT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n_scenes: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub duration_s: f64,
    pub kinds: Vec<SourceKind>,
    pub separation_deg: (f64, f64),
    pub level_range_db: (f64, f64),
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub room: Option<RoomSection>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let o = SceneOptions::default();
        Self {
            n_scenes: 10,
            seed: 0,
            sample_rate: o.sample_rate,
            duration_s: o.duration_s,
            kinds: o.kinds,
            separation_deg: o.separation_deg,
            level_range_db: o.level_range_db,
            snr_db: o.snr_db,
            room: None,
        }
    }
}

/// Reverberant simulation: sources sit on a horizontal circle around the array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSection {
    pub dims: [f64; 3],
    pub absorption: f64,
    pub max_order: usize,
    pub array_center: [f64; 3],
    pub source_distance: f64,
}

impl RoomSection {
    pub fn room(&self) -> Room {
        Room {
            dims: self.dims,
            absorption: self.absorption,
            max_order: self.max_order,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training_log: Option<PathBuf>,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::new(self.geometry.mic_positions.clone(), self.geometry.speed_of_sound)
    }

    pub fn em_config(&self) -> EmConfig {
        let m = self.geometry.mic_positions.len();
        EmConfig {
            n_sources: self.em.n_sources,
            n_iters: self.em.n_iters,
            nu: self.em.nu.unwrap_or(m as f64 + 5.0),
            lambda_floor: self.em.lambda_floor,
            posterior_floor: self.em.posterior_floor,
            convergence_tol: self.em.convergence_tol,
            prior_scale: self.em.prior_scale,
        }
    }

    pub fn separator(&self) -> Result<SeparatorConfig> {
        Ok(SeparatorConfig {
            stft: self.stft,
            geometry: self.geometry()?,
            grid: self.grid,
            epsilon: self.em.epsilon,
            em: self.em_config(),
            reference_channel: self.em.reference_channel,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            seed: self.train.seed,
            options: TrainOptions {
                posterior_floor: self.em.posterior_floor,
                omega_stop_gradient: self.train.omega_stop_gradient,
            },
        }
    }

    pub fn scene_options(&self) -> Result<SceneOptions> {
        Ok(SceneOptions {
            kinds: self.simulate.kinds.clone(),
            duration_s: self.simulate.duration_s,
            sample_rate: self.simulate.sample_rate,
            separation_deg: self.simulate.separation_deg,
            level_range_db: self.simulate.level_range_db,
            snr_db: self.simulate.snr_db,
            geometry: self.geometry()?,
        })
    }

    /// Checks every constraint the downstream modules impose.
    pub fn validate(&self) -> Result<()> {
        let geometry = self.geometry()?;
        let m = geometry.n_mics();
        self.grid.validate()?;
        self.stft.validate()?;
        let em = self.em_config();
        em.validate(m)?;
        Hyperparams {
            nu: em.nu,
            epsilon: self.em.epsilon,
        }
        .validate(m)?;
        if self.em.reference_channel >= m {
            return Err(Error::InvalidConfig(format!(
                "reference channel {} but only {m} microphones",
                self.em.reference_channel
            )));
        }
        if self.em.directional_classes < self.em.n_sources {
            return Err(Error::InvalidConfig(
                "directional_classes must be at least n_sources".into(),
            ));
        }
        if self.em.directional_classes > self.grid.count || self.em.n_sources > self.grid.count {
            return Err(Error::InvalidConfig(
                "more source classes than grid directions".into(),
            ));
        }
        let t = &self.train;
        if !(t.lr >= 0.0) || !t.lr.is_finite() {
            return Err(Error::InvalidConfig(
                "learning rate must be finite and >= 0".into(),
            ));
        }
        if t.batch_size == 0 || t.hidden == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and hidden must be positive".into(),
            ));
        }
        let s = &self.simulate;
        if s.sample_rate == 0 || !(s.duration_s > 0.0) {
            return Err(Error::InvalidConfig(
                "simulation needs a positive rate and duration".into(),
            ));
        }
        if s.kinds.is_empty() {
            return Err(Error::InvalidConfig(
                "simulation needs at least one source kind".into(),
            ));
        }
        if s.separation_deg.0 > s.separation_deg.1 || s.level_range_db.0 > s.level_range_db.1 {
            return Err(Error::InvalidConfig("ranges must be ordered (low, high)".into()));
        }
        if let Some(r) = &s.room {
            r.room().validate()?;
            if !(r.source_distance > 0.0) {
                return Err(Error::InvalidConfig("source_distance must be positive".into()));
            }
        }
        Ok(())
    }
}
