//! Variational EM for the direction-tied complex Gaussian mixture.

mod init;
mod kernels;
mod ops;
mod params;
mod posterior;
mod run;

pub use init::{direction_group, init_directional, init_doa_from_masks, init_masks_from_doa};
pub use kernels::ElboTerms;
pub use ops::{
    e_step_doa, e_step_masks, elbo, elbo_terms, log_scm_prior, m_step_priors, m_step_psd, m_step_scm,
};
pub use params::{EmConfig, ModelParams, PriorScale, ScmField};
pub use posterior::{DoaPosterior, MaskPosterior};
pub use run::{run_em, EmDiagnostics, EmInit, EmResult};
