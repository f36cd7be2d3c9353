use ndarray::Array3;

use super::init::{init_directional_from_quads, init_doa_from_quads, masks_from_doa_quads};
use super::kernels::{self, Workspace};
use super::params::{EmConfig, ModelParams};
use super::posterior::{DoaPosterior, MaskPosterior};
use crate::error::{Error, Result};
use crate::signal::Spectrogram;
use crate::spatial::{Hyperparams, SteeringTemplate};

/// Relative tolerance below which a drop of the objective is treated as rounding.
const MONOTONE_TOL: f64 = 1e-6;

/// How the posteriors are seeded before the first M-step.
#[derive(Debug, Clone)]
pub enum EmInit {
    /// Contiguous direction blocks per source.
    Directional,
    /// Given masks (for example from a network); DoAs are derived from them.
    ExternalMasks(MaskPosterior),
    /// Given DoA posterior; masks follow from the templates.
    FromDoa(DoaPosterior),
    /// Both posteriors given, e.g. from a previous run.
    Warm { ez: MaskPosterior, ew: DoaPosterior },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmDiagnostics {
    pub iterations: usize,
    /// Bins where every component likelihood was non-finite and the prior was used.
    pub prior_fallbacks: usize,
    /// Power entries clamped to the floor in the last M-step.
    pub floored_powers: usize,
    /// Iterations where the objective dropped by more than the tolerance.
    pub monotonicity_violations: Vec<usize>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct EmResult {
    pub ez: MaskPosterior,
    pub ew: DoaPosterior,
    pub params: ModelParams,
    /// Objective after every iteration: the bound plus the log SCM prior,
    /// which is the quantity each step of MAP-EM maximizes.
    pub elbo_trace: Vec<f64>,
    /// The bound alone after every iteration.
    pub bound_trace: Vec<f64>,
    pub diagnostics: EmDiagnostics,
}

struct State {
    ez: Array3<f64>,
    ew: ndarray::Array2<f64>,
    params: ModelParams,
}

fn m_step(ws: &mut Workspace, st: &mut State, cfg: &EmConfig, floor: f64) -> Result<usize> {
    let m = ws.m;
    let scm = kernels::m_step_scm(
        ws,
        &st.ez,
        &st.ew,
        &st.params.lambda,
        cfg.nu,
        cfg.prior_scale.factor(cfg.nu, m),
    );
    ws.set_scm(scm)?;
    let (lambda, hits) = kernels::m_step_psd(ws, &st.ew, floor);
    let (pi, phi) = kernels::m_step_priors(&st.ez, &st.ew);
    st.params.scm = ws.scm.clone();
    st.params.lambda = lambda;
    st.params.pi = pi;
    st.params.phi = phi;
    Ok(hits)
}

/// Variational EM: seed the posteriors, run one M-step, then alternate
/// (mask E-step, DoA E-step, SCM / power / prior M-steps) `n_iters` times.
pub fn run_em(x: &Spectrogram, tpl: &SteeringTemplate, cfg: &EmConfig, init: EmInit) -> Result<EmResult> {
    let m = x.n_channels();
    cfg.validate(m)?;
    if x.values().iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Numeric("observation contains non-finite values".into()));
    }
    let mut ws = Workspace::new(x, tpl)?;
    let (t, f, d) = (ws.t, ws.f, ws.d);
    let mean_power = ws.mean_power();
    if !(mean_power > 0.0) {
        return Err(Error::DegenerateInput("observation is silent".into()));
    }
    let floor = cfg.lambda_floor * mean_power;

    // quadratic forms against the templates: the workspace starts with H = G
    let (ez, ew) = match init {
        EmInit::Directional => {
            let (ez, ew) = init_directional_from_quads(&ws.q, t, tpl, cfg.n_sources, cfg.posterior_floor)?;
            (ez, ew)
        }
        EmInit::ExternalMasks(ez) => {
            check_masks(&ez, t, f, cfg.n_sources)?;
            let ew = init_doa_from_quads(&ws.q, &ez, tpl, cfg.posterior_floor);
            (ez, ew)
        }
        EmInit::FromDoa(ew) => {
            check_doa(&ew, cfg.n_sources, d)?;
            let ez = masks_from_doa_quads(&ws.q, t, &ew, cfg.posterior_floor);
            (ez, ew)
        }
        EmInit::Warm { ez, ew } => {
            check_masks(&ez, t, f, cfg.n_sources)?;
            check_doa(&ew, cfg.n_sources, d)?;
            (ez, ew)
        }
    };
    let k = cfg.n_sources;
    let lambda0 = Array3::from_shape_fn((t, f, k), |(ti, fi, _)| {
        (ws.power[ti * f + fi] / m as f64).max(floor)
    });
    let hyper = Hyperparams {
        nu: cfg.nu,
        epsilon: tpl.epsilon(),
    };
    let mut st = State {
        ez: ez.into_values(),
        ew: ew.into_values(),
        params: ModelParams {
            scm: ws.scm.clone(),
            lambda: lambda0,
            pi: ndarray::Array2::from_elem((t, k), 1.0 / k as f64),
            phi: ndarray::Array1::from_elem(d, 1.0 / d as f64),
            hyper,
        },
    };
    let mut diag = EmDiagnostics {
        floored_powers: m_step(&mut ws, &mut st, cfg, floor)?,
        ..Default::default()
    };

    let prior_factor = cfg.prior_scale.factor(cfg.nu, m);
    let mut elbo_trace = Vec::with_capacity(cfg.n_iters);
    let mut bound_trace = Vec::with_capacity(cfg.n_iters);
    for it in 0..cfg.n_iters {
        let p = &st.params;
        let (ez, fallbacks) = kernels::e_step_masks(&ws, &p.lambda, &p.pi, &st.ew, cfg.posterior_floor);
        diag.prior_fallbacks += fallbacks;
        st.ez = ez;
        st.ew = kernels::e_step_doa(&ws, &p.lambda, &st.ez, &p.phi, cfg.posterior_floor);
        diag.floored_powers = m_step(&mut ws, &mut st, cfg, floor).map_err(|e| at_iteration(e, it))?;
        let p = &st.params;
        let bound = kernels::elbo_terms(&ws, &p.lambda, &p.pi, &p.phi, &st.ez, &st.ew)
            .map_err(|e| at_iteration(e, it))?
            .value();
        let objective = bound + kernels::log_scm_prior(&ws, cfg.nu, prior_factor);
        diag.iterations = it + 1;
        if let Some(&prev) = elbo_trace.last() {
            let prev: f64 = prev;
            if objective < prev - MONOTONE_TOL * prev.abs().max(1.0) {
                log::warn!("EM objective dropped at iteration {it}: {prev} -> {objective}");
                diag.monotonicity_violations.push(it);
            }
            elbo_trace.push(objective);
            bound_trace.push(bound);
            if cfg.convergence_tol > 0.0
                && ((objective - prev) / objective.abs().max(f64::MIN_POSITIVE)).abs() < cfg.convergence_tol
            {
                diag.stopped_early = it + 1 < cfg.n_iters;
                break;
            }
        } else {
            elbo_trace.push(objective);
            bound_trace.push(bound);
        }
        log::debug!("iteration {it}: objective {objective}, bound {bound}");
    }
    if diag.prior_fallbacks > 0 {
        log::warn!("{} bins fell back to the activation prior", diag.prior_fallbacks);
    }
    Ok(EmResult {
        ez: MaskPosterior::from_unchecked(st.ez),
        ew: DoaPosterior::from_unchecked(st.ew),
        params: st.params,
        elbo_trace,
        bound_trace,
        diagnostics: diag,
    })
}

fn check_masks(ez: &MaskPosterior, t: usize, f: usize, k: usize) -> Result<()> {
    if ez.dims() != (t, f, k) {
        let (a, b, c) = ez.dims();
        return Err(Error::Dimension(format!(
            "initial masks are {a}x{b}x{c}, expected {t}x{f}x{k}"
        )));
    }
    Ok(())
}

fn check_doa(ew: &DoaPosterior, k: usize, d: usize) -> Result<()> {
    if ew.n_sources() != k || ew.n_dirs() != d {
        return Err(Error::Dimension(format!(
            "DoA posterior is {}x{}, expected {k}x{d}",
            ew.n_sources(),
            ew.n_dirs()
        )));
    }
    Ok(())
}

fn at_iteration(e: Error, it: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("EM iteration {it}: {msg}")),
        other => other,
    }
}
