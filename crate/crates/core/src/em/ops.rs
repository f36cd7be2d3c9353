use ndarray::{Array1, Array2, Array3};

use super::kernels::{self, ElboTerms, Workspace};
use super::params::{EmConfig, ModelParams, PriorScale, ScmField};
use super::posterior::{DoaPosterior, MaskPosterior};
use crate::error::{Error, Result};
use crate::signal::Spectrogram;
use crate::spatial::SteeringTemplate;

fn workspace(x: &Spectrogram, tpl: &SteeringTemplate, scm: Option<&ScmField>) -> Result<Workspace> {
    let mut ws = Workspace::new(x, tpl)?;
    if let Some(scm) = scm {
        ws.set_scm(scm.clone())?;
    }
    Ok(ws)
}

fn check_sources(x: &Spectrogram, params: &ModelParams, k: usize) -> Result<()> {
    params.validate()?;
    let (t, f, pk) = params.lambda.dim();
    if t != x.n_frames() || f != x.n_freqs() || pk != k {
        return Err(Error::Dimension(format!(
            "parameters are {t}x{f}x{pk}, observation is {}x{} with {k} sources",
            x.n_frames(),
            x.n_freqs()
        )));
    }
    Ok(())
}

/// Mask posterior given the DoA posterior: `ez_tfk` proportional to
/// `pi_tk prod_d N_c(x_tf; 0, lambda_tfk H_fd)^{ew_kd}`, normalized over `k`.
pub fn e_step_masks(
    x: &Spectrogram,
    tpl: &SteeringTemplate,
    params: &ModelParams,
    ew: &DoaPosterior,
    cfg: &EmConfig,
) -> Result<MaskPosterior> {
    check_sources(x, params, ew.n_sources())?;
    let ws = workspace(x, tpl, Some(&params.scm))?;
    let (ez, fallbacks) =
        kernels::e_step_masks(&ws, &params.lambda, &params.pi, ew.values(), cfg.posterior_floor);
    if fallbacks > 0 {
        log::warn!("{fallbacks} bins had no finite component likelihood; used the prior");
    }
    Ok(MaskPosterior::from_unchecked(ez))
}

/// DoA posterior given the masks: `ew_kd` proportional to
/// `phi_d prod_{t,f} N_c(x_tf; 0, lambda_tfk H_fd)^{ez_tfk}`, normalized over `d`.
pub fn e_step_doa(
    x: &Spectrogram,
    tpl: &SteeringTemplate,
    params: &ModelParams,
    ez: &MaskPosterior,
    cfg: &EmConfig,
) -> Result<DoaPosterior> {
    check_sources(x, params, ez.n_sources())?;
    let ws = workspace(x, tpl, Some(&params.scm))?;
    let ew = kernels::e_step_doa(&ws, &params.lambda, ez.values(), &params.phi, cfg.posterior_floor);
    Ok(DoaPosterior::from_unchecked(ew))
}

pub fn m_step_scm(
    x: &Spectrogram,
    tpl: &SteeringTemplate,
    ez: &MaskPosterior,
    ew: &DoaPosterior,
    lambda: &Array3<f64>,
    nu: f64,
    prior_scale: PriorScale,
) -> Result<ScmField> {
    let ws = workspace(x, tpl, None)?;
    if lambda.dim() != ez.dims() || ew.n_sources() != ez.n_sources() || ew.n_dirs() != ws.d {
        return Err(Error::Dimension("posterior and power shapes disagree".into()));
    }
    Ok(kernels::m_step_scm(
        &ws,
        ez.values(),
        ew.values(),
        lambda,
        nu,
        prior_scale.factor(nu, ws.m),
    ))
}

/// `lambda_tfk = max(floor, (1/M) sum_d ew_kd x^H H_fd^-1 x)`; `floor` is absolute.
pub fn m_step_psd(
    x: &Spectrogram,
    tpl: &SteeringTemplate,
    ew: &DoaPosterior,
    scm: &ScmField,
    floor: f64,
) -> Result<Array3<f64>> {
    let ws = workspace(x, tpl, Some(scm))?;
    Ok(kernels::m_step_psd(&ws, ew.values(), floor).0)
}

pub fn m_step_priors(ez: &MaskPosterior, ew: &DoaPosterior) -> (Array2<f64>, Array1<f64>) {
    kernels::m_step_priors(ez.values(), ew.values())
}

/// The three terms of the bound: expected log likelihood and the two KL
/// divergences to the categorical priors.
pub fn elbo_terms(
    x: &Spectrogram,
    tpl: &SteeringTemplate,
    params: &ModelParams,
    ez: &MaskPosterior,
    ew: &DoaPosterior,
) -> Result<ElboTerms> {
    check_sources(x, params, ez.n_sources())?;
    let ws = workspace(x, tpl, Some(&params.scm))?;
    kernels::elbo_terms(
        &ws,
        &params.lambda,
        &params.pi,
        &params.phi,
        ez.values(),
        ew.values(),
    )
}

pub fn elbo(
    x: &Spectrogram,
    tpl: &SteeringTemplate,
    params: &ModelParams,
    ez: &MaskPosterior,
    ew: &DoaPosterior,
) -> Result<f64> {
    elbo_terms(x, tpl, params, ez, ew).map(|t| t.value())
}

/// Log inverse-Wishart density of the SCMs (without normalizing constant).
/// The bound plus this term is what every EM step increases.
pub fn log_scm_prior(
    x: &Spectrogram,
    tpl: &SteeringTemplate,
    params: &ModelParams,
    prior_scale: PriorScale,
) -> Result<f64> {
    let ws = workspace(x, tpl, Some(&params.scm))?;
    let nu = params.hyper.nu;
    Ok(kernels::log_scm_prior(&ws, nu, prior_scale.factor(nu, ws.m)))
}
