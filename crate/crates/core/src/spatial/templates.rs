use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::geometry::{steering_vector, ArrayGeometry, DirectionGrid};
use crate::error::{Error, Result};
use crate::signal::Spectrogram;

/// Inverse-Wishart degrees of freedom and diagonal loading of the templates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub nu: f64,
    pub epsilon: f64,
}

impl Hyperparams {
    /// `nu = M + 5`, `epsilon = 1e-2`.
    pub fn for_channels(m: usize) -> Self {
        Self {
            nu: m as f64 + 5.0,
            epsilon: 1e-2,
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if !(self.nu > m as f64) {
            return Err(Error::InvalidConfig(format!(
                "nu must exceed the channel count {m}, got {}",
                self.nu
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Plane-wave steering vectors and their loaded rank-one SCMs
/// `G = h h^H + eps I` for every (frequency, direction) pair.
#[derive(Debug, Clone)]
pub struct SteeringTemplate {
    n_freq: usize,
    n_dir: usize,
    n_ch: usize,
    epsilon: f64,
    h: Vec<Complex64>,
    g: Vec<Complex64>,
    g_inv: Vec<Complex64>,
    logdet: Vec<f64>,
    grid: DirectionGrid,
}

/// Centre frequency of bin `f` for an `n_freq`-bin one-sided spectrum.
pub fn bin_frequency(f: usize, n_freq: usize, sample_rate: u32) -> f64 {
    if n_freq < 2 {
        return 0.0;
    }
    f as f64 * sample_rate as f64 / (2 * (n_freq - 1)) as f64
}

pub fn build_templates(
    geom: &ArrayGeometry,
    grid: &DirectionGrid,
    n_freq: usize,
    sample_rate: u32,
    epsilon: f64,
) -> Result<SteeringTemplate> {
    geom.validate()?;
    grid.validate()?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig("epsilon must be positive".into()));
    }
    let m = geom.n_mics();
    let n_dir = grid.len();
    let mut h = Vec::with_capacity(n_freq * n_dir * m);
    let mut g = Vec::with_capacity(n_freq * n_dir * m * m);
    let mut g_inv = Vec::with_capacity(n_freq * n_dir * m * m);
    let mut logdet = Vec::with_capacity(n_freq * n_dir);
    for f in 0..n_freq {
        let f_hz = bin_frequency(f, n_freq, sample_rate);
        for d in 0..n_dir {
            let v = steering_vector(geom, grid.azimuth(d), f_hz);
            let energy: f64 = v.iter().map(|c| c.norm_sqr()).sum();
            // Sherman-Morrison: (eps I + v v^H)^-1 = (I - v v^H / (eps + v^H v)) / eps
            let shrink = 1.0 / (epsilon + energy);
            for i in 0..m {
                for j in 0..m {
                    let outer = v[i] * v[j].conj();
                    let delta = if i == j { 1.0 } else { 0.0 };
                    g.push(outer + delta * epsilon);
                    g_inv.push((Complex64::new(delta, 0.0) - outer * shrink) / epsilon);
                }
            }
            logdet.push((energy + epsilon).ln() + (m as f64 - 1.0) * epsilon.ln());
            h.extend(v);
        }
    }
    Ok(SteeringTemplate {
        n_freq,
        n_dir,
        n_ch: m,
        epsilon,
        h,
        g,
        g_inv,
        logdet,
        grid: *grid,
    })
}

impl SteeringTemplate {
    pub fn n_freq(&self) -> usize {
        self.n_freq
    }

    pub fn n_dir(&self) -> usize {
        self.n_dir
    }

    pub fn n_ch(&self) -> usize {
        self.n_ch
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn grid(&self) -> &DirectionGrid {
        &self.grid
    }

    pub fn steering(&self, f: usize, d: usize) -> &[Complex64] {
        let m = self.n_ch;
        let o = (f * self.n_dir + d) * m;
        &self.h[o..o + m]
    }

    pub fn scm(&self, f: usize, d: usize) -> &[Complex64] {
        let mm = self.n_ch * self.n_ch;
        let o = (f * self.n_dir + d) * mm;
        &self.g[o..o + mm]
    }

    pub fn scm_inverse(&self, f: usize, d: usize) -> &[Complex64] {
        let mm = self.n_ch * self.n_ch;
        let o = (f * self.n_dir + d) * mm;
        &self.g_inv[o..o + mm]
    }

    pub fn logdet(&self, f: usize, d: usize) -> f64 {
        self.logdet[f * self.n_dir + d]
    }

    /// `x^H G^-1 x` through the rank-one structure.
    pub fn quad(&self, f: usize, d: usize, x: &[Complex64]) -> f64 {
        let h = self.steering(f, d);
        let mut energy = 0.0;
        let mut proj = Complex64::new(0.0, 0.0);
        let mut h_energy = 0.0;
        for (hi, xi) in h.iter().zip(x) {
            energy += xi.norm_sqr();
            proj += hi.conj() * xi;
            h_energy += hi.norm_sqr();
        }
        ((energy - proj.norm_sqr() / (self.epsilon + h_energy)) / self.epsilon).max(0.0)
    }

    /// `log N_c(x; 0, G_fd)`.
    pub fn log_density(&self, f: usize, d: usize, x: &[Complex64]) -> f64 {
        -(self.n_ch as f64) * PI.ln() - self.logdet(f, d) - self.quad(f, d, x)
    }

    pub fn check_compatible(&self, x: &Spectrogram) -> Result<()> {
        if x.n_freqs() != self.n_freq || x.n_channels() != self.n_ch {
            return Err(Error::Dimension(format!(
                "templates are {} bins x {} channels, spectrogram is {} x {}",
                self.n_freq,
                self.n_ch,
                x.n_freqs(),
                x.n_channels()
            )));
        }
        Ok(())
    }

    /// `x_tf^H G_fd^-1 x_tf` for every bin and direction, laid out `(t, f, d)`.
    pub fn quad_forms(&self, x: &Spectrogram) -> Result<Vec<f64>> {
        self.check_compatible(x)?;
        let (t_len, f_len, d_len, m) = (x.n_frames(), self.n_freq, self.n_dir, self.n_ch);
        let mut out = vec![0.0; t_len * f_len * d_len];
        let mut xv = vec![Complex64::new(0.0, 0.0); m];
        let values = x.values();
        for t in 0..t_len {
            for f in 0..f_len {
                for (i, v) in xv.iter_mut().enumerate() {
                    *v = values[[t, f, i]];
                }
                let o = (t * f_len + f) * d_len;
                for d in 0..d_len {
                    out[o + d] = self.quad(f, d, &xv);
                }
            }
        }
        Ok(out)
    }
}
