use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{linalg, Hyperparams, SteeringTemplate};

/// One Hermitian `M x M` matrix per (frequency, direction).
#[derive(Debug, Clone, PartialEq)]
pub struct ScmField {
    n_freq: usize,
    n_dir: usize,
    n_ch: usize,
    data: Vec<Complex64>,
}

impl ScmField {
    pub fn new(n_freq: usize, n_dir: usize, n_ch: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != n_freq * n_dir * n_ch * n_ch {
            return Err(Error::Dimension(format!(
                "{} SCM entries for {n_freq}x{n_dir} matrices of size {n_ch}",
                data.len()
            )));
        }
        Ok(Self {
            n_freq,
            n_dir,
            n_ch,
            data,
        })
    }

    pub fn from_templates(tpl: &SteeringTemplate) -> Self {
        let mut data = Vec::with_capacity(tpl.n_freq() * tpl.n_dir() * tpl.n_ch().pow(2));
        for f in 0..tpl.n_freq() {
            for d in 0..tpl.n_dir() {
                data.extend_from_slice(tpl.scm(f, d));
            }
        }
        Self {
            n_freq: tpl.n_freq(),
            n_dir: tpl.n_dir(),
            n_ch: tpl.n_ch(),
            data,
        }
    }

    /// Every matrix set to the identity.
    pub fn identity(n_freq: usize, n_dir: usize, n_ch: usize) -> Self {
        let eye = linalg::identity(n_ch);
        let data = (0..n_freq * n_dir).flat_map(|_| eye.iter().copied()).collect();
        Self {
            n_freq,
            n_dir,
            n_ch,
            data,
        }
    }

    pub fn n_freq(&self) -> usize {
        self.n_freq
    }

    pub fn n_dir(&self) -> usize {
        self.n_dir
    }

    pub fn n_ch(&self) -> usize {
        self.n_ch
    }

    pub fn get(&self, f: usize, d: usize) -> &[Complex64] {
        let mm = self.n_ch * self.n_ch;
        &self.data[(f * self.n_dir + d) * mm..][..mm]
    }

    pub fn get_mut(&mut self, f: usize, d: usize) -> &mut [Complex64] {
        let mm = self.n_ch * self.n_ch;
        &mut self.data[(f * self.n_dir + d) * mm..][..mm]
    }
}

/// Point-estimated parameters: direction SCMs `H (f, d)`, source powers
/// `lambda (t, f, k)`, frame activations `pi (t, k)` and the direction
/// prior `phi (d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub scm: ScmField,
    pub lambda: Array3<f64>,
    pub pi: Array2<f64>,
    pub phi: Array1<f64>,
    pub hyper: Hyperparams,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let (t, f, k) = self.lambda.dim();
        if self.scm.n_freq() != f || self.pi.dim() != (t, k) || self.phi.len() != self.scm.n_dir() {
            return Err(Error::Dimension("model parameter shapes disagree".into()));
        }
        self.hyper.validate(self.scm.n_ch())?;
        if self.lambda.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Numeric("source powers must be positive and finite".into()));
        }
        for row in self.pi.rows() {
            if (row.sum() - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::Numeric("frame activation prior is not normalized".into()));
            }
        }
        if (self.phi.sum() - 1.0).abs() > 1e-9 || self.phi.iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric("direction prior is not normalized".into()));
        }
        Ok(())
    }
}

/// Scale matrix of the inverse-Wishart prior on each direction SCM, which is
/// also the numerator term of the MAP update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PriorScale {
    /// `G`: the update exactly as `H = (G + S) / (nu + N + M)`.
    #[default]
    #[serde(rename = "G")]
    Template,
    /// `(nu - M) G`.
    #[serde(rename = "nu_minus_m_G")]
    NuMinusMTemplate,
}

impl PriorScale {
    pub fn factor(self, nu: f64, m: usize) -> f64 {
        match self {
            PriorScale::Template => 1.0,
            PriorScale::NuMinusMTemplate => nu - m as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub n_sources: usize,
    pub n_iters: usize,
    pub nu: f64,
    /// Floor on `lambda`, relative to the mean per-channel mixture power.
    pub lambda_floor: f64,
    /// Floor on posterior probabilities before renormalization.
    pub posterior_floor: f64,
    /// Stop early when `|dL| / |L|` falls below this; 0 disables.
    pub convergence_tol: f64,
    pub prior_scale: PriorScale,
}

impl EmConfig {
    pub fn for_channels(m: usize) -> Self {
        Self {
            n_sources: 2,
            n_iters: 50,
            nu: m as f64 + 5.0,
            lambda_floor: 1e-8,
            posterior_floor: 1e-12,
            convergence_tol: 0.0,
            prior_scale: PriorScale::Template,
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.n_sources == 0 {
            return Err(Error::InvalidConfig("need at least one source".into()));
        }
        if self.n_iters == 0 {
            return Err(Error::InvalidConfig("need at least one EM iteration".into()));
        }
        if !(self.lambda_floor > 0.0) || !(self.posterior_floor > 0.0) {
            return Err(Error::InvalidConfig("floors must be positive".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::InvalidConfig("convergence tolerance must be >= 0".into()));
        }
        if !(self.nu > m as f64) {
            return Err(Error::InvalidConfig(format!(
                "nu must exceed the channel count {m}, got {}",
                self.nu
            )));
        }
        Ok(())
    }
}
