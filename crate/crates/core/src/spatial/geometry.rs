use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub mic_positions: Vec<[f64; 3]>,
    pub speed_of_sound: f64,
}

impl Default for ArrayGeometry {
    /// Four microphones evenly spaced on a horizontal circle of 8 cm diameter.
    fn default() -> Self {
        Self::uniform_circular(4, 0.08)
    }
}

impl ArrayGeometry {
    pub fn new(mic_positions: Vec<[f64; 3]>, speed_of_sound: f64) -> Result<Self> {
        let g = Self {
            mic_positions,
            speed_of_sound,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn uniform_circular(n_mics: usize, diameter: f64) -> Self {
        let r = diameter / 2.0;
        let mic_positions = (0..n_mics)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / n_mics as f64;
                [r * a.cos(), r * a.sin(), 0.0]
            })
            .collect();
        Self {
            mic_positions,
            speed_of_sound: DEFAULT_SPEED_OF_SOUND,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mic_positions.is_empty() {
            return Err(Error::InvalidConfig("array needs at least one microphone".into()));
        }
        if self.mic_positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("microphone positions must be finite".into()));
        }
        if !(self.speed_of_sound > 0.0) {
            return Err(Error::InvalidConfig("speed of sound must be positive".into()));
        }
        Ok(())
    }

    pub fn n_mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.n_mics() as f64;
        let mut c = [0.0; 3];
        for p in &self.mic_positions {
            for i in 0..3 {
                c[i] += p[i] / n;
            }
        }
        c
    }
}

/// Uniformly spaced azimuths on the horizontal plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionGrid {
    pub start_deg: f64,
    pub step_deg: f64,
    pub count: usize,
}

impl Default for DirectionGrid {
    fn default() -> Self {
        Self {
            start_deg: 0.0,
            step_deg: 5.0,
            count: 72,
        }
    }
}

impl DirectionGrid {
    pub fn new(start_deg: f64, step_deg: f64, count: usize) -> Result<Self> {
        let g = Self {
            start_deg,
            step_deg,
            count,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidConfig("direction grid is empty".into()));
        }
        if !(0.0..360.0).contains(&self.start_deg) {
            return Err(Error::InvalidConfig("grid start must lie in [0, 360)".into()));
        }
        if self.count > 1 && !(self.step_deg > 0.0) {
            return Err(Error::InvalidConfig("grid step must be positive".into()));
        }
        if self.start_deg + (self.count - 1) as f64 * self.step_deg >= 360.0 {
            return Err(Error::InvalidConfig("grid wraps past 360 degrees".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn azimuth(&self, d: usize) -> f64 {
        self.start_deg + d as f64 * self.step_deg
    }

    pub fn azimuths(&self) -> Vec<f64> {
        (0..self.count).map(|d| self.azimuth(d)).collect()
    }

    /// Index of the grid point circularly closest to `azimuth_deg`.
    pub fn nearest(&self, azimuth_deg: f64) -> usize {
        (0..self.count)
            .min_by(|&a, &b| {
                circular_distance(self.azimuth(a), azimuth_deg)
                    .total_cmp(&circular_distance(self.azimuth(b), azimuth_deg))
            })
            .unwrap_or(0)
    }
}

/// Smallest absolute angle between two azimuths, in degrees.
pub fn circular_distance(a_deg: f64, b_deg: f64) -> f64 {
    let d = (a_deg - b_deg).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Unit vector pointing from the array toward azimuth `deg`.
pub fn direction_vector(deg: f64) -> [f64; 3] {
    let a = deg.to_radians();
    [a.cos(), a.sin(), 0.0]
}

/// Per-microphone plane-wave phase factors `exp(-j 2 pi f tau_m)` with
/// `tau_m = -(r_m . u) / c`.
pub fn steering_vector(geom: &ArrayGeometry, azimuth_deg: f64, f_hz: f64) -> Vec<Complex64> {
    let u = direction_vector(azimuth_deg);
    geom.mic_positions
        .iter()
        .map(|r| {
            let tau = -(r[0] * u[0] + r[1] * u[1] + r[2] * u[2]) / geom.speed_of_sound;
            Complex64::from_polar(1.0, -2.0 * PI * f_hz * tau)
        })
        .collect()
}
