//! The fixed-parameter bound used for training and its gradients.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Array3};

use crate::em::{m_step_priors, DoaPosterior, MaskPosterior};
use crate::error::{Error, Result};
use crate::signal::Spectrogram;
use crate::spatial::SteeringTemplate;

/// Average per-channel power `(1/TFM) sum_{t,f} x^H x`.
pub fn avg_power(x: &Spectrogram) -> Result<f64> {
    let n = x.values().len();
    if n == 0 {
        return Err(Error::DegenerateInput("empty spectrogram".into()));
    }
    let p = x.values().iter().map(|v| v.norm_sqr()).sum::<f64>() / n as f64;
    if !(p > 0.0) {
        return Err(Error::DegenerateInput("spectrogram is silent".into()));
    }
    Ok(p)
}

/// Relative floor inside the logarithm of the magnitude features.
const LOG_FLOOR: f64 = 1e-10;

/// Log-magnitude of channel `channel`, shifted to zero mean over the mixture;
/// `(t, f)`. Invariant to scaling of the input.
pub fn log_magnitude_features(x: &Spectrogram, channel: usize) -> Result<Array2<f64>> {
    if channel >= x.n_channels() {
        return Err(Error::Dimension(format!(
            "channel {channel} requested from a {}-channel spectrogram",
            x.n_channels()
        )));
    }
    let (t, f) = (x.n_frames(), x.n_freqs());
    let power = x
        .values()
        .slice(ndarray::s![.., .., channel])
        .mapv(|v| v.norm_sqr());
    let mean = power.mean().unwrap_or(0.0);
    if !(mean > 0.0) {
        return Err(Error::DegenerateInput("reference channel is silent".into()));
    }
    let floor = LOG_FLOOR * mean;
    let mut feats = power.mapv(|p| 0.5 * (p + floor).ln());
    let shift = feats.sum() / (t * f) as f64;
    feats.mapv_inplace(|v| v - shift);
    Ok(feats)
}

/// Value and gradients of the training objective for one mixture.
#[derive(Debug, Clone)]
pub struct TrainingElbo {
    /// `-L / (TF)`.
    pub loss: f64,
    /// Divergence of the masks from the frame priors (unnormalized).
    pub kl_masks: f64,
    /// Divergence of the DoA posteriors from the direction prior (unnormalized).
    pub kl_doa: f64,
    /// `d loss / d ez`, `(t, f, k)`.
    pub grad_ez: Array3<f64>,
    /// `d loss / d ew`, `(k, d)`.
    pub grad_ew: Array2<f64>,
    /// Posterior or prior entries raised to the floor inside a logarithm.
    pub floored: usize,
}

/// The bound with `lambda` fixed to `lambda_hat` and every SCM to its
/// template:
///
/// `L = sum ez ew log N_c(x; 0, lambda_hat G) + sum ez log(pi / ez) + sum ew log(phi / ew)`.
///
/// The Gaussian constant `-M log(pi)` and the power term `-M log(lambda_hat)`
/// are kept, so `L` equals the EM bound at the same parameters. `pi` and
/// `phi` are constants here; at their updates (posterior means) the bound is
/// stationary in them, so this is also the total derivative.
#[allow(clippy::too_many_arguments)]
pub fn training_elbo(
    x: &Spectrogram,
    ez: &MaskPosterior,
    ew: &DoaPosterior,
    pi: &Array2<f64>,
    phi: &Array1<f64>,
    tpl: &SteeringTemplate,
    lambda_hat: f64,
    floor: f64,
) -> Result<TrainingElbo> {
    let quads = tpl.quad_forms(x)?;
    training_elbo_from_quads(&quads, x.n_channels(), ez, ew, pi, phi, tpl, lambda_hat, floor)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn training_elbo_from_quads(
    quads: &[f64],
    m: usize,
    ez: &MaskPosterior,
    ew: &DoaPosterior,
    pi: &Array2<f64>,
    phi: &Array1<f64>,
    tpl: &SteeringTemplate,
    lambda_hat: f64,
    floor: f64,
) -> Result<TrainingElbo> {
    let (t_len, f_len, k_len) = ez.dims();
    let d_len = tpl.n_dir();
    if ew.n_sources() != k_len
        || ew.n_dirs() != d_len
        || f_len != tpl.n_freq()
        || pi.dim() != (t_len, k_len)
        || phi.len() != d_len
        || quads.len() != t_len * f_len * d_len
    {
        return Err(Error::Dimension("training bound inputs disagree in shape".into()));
    }
    if !(lambda_hat > 0.0) || !lambda_hat.is_finite() {
        return Err(Error::Numeric(format!(
            "average power must be positive, got {lambda_hat}"
        )));
    }
    let n = (t_len * f_len) as f64;
    let mut floored = 0;
    let mut safe_ln = |v: f64| {
        if v < floor {
            floored += 1;
            floor.ln()
        } else {
            v.ln()
        }
    };
    let ln_pi: Array2<f64> = pi.mapv(&mut safe_ln);
    let ln_phi: Array1<f64> = phi.mapv(&mut safe_ln);
    let c = -(m as f64) * (PI.ln() + lambda_hat.ln());
    let z = ez.values();
    let w = ew.values();

    let mut value = 0.0;
    let mut kl_masks = 0.0;
    let mut grad_ez = Array3::<f64>::zeros((t_len, f_len, k_len));
    let mut grad_ew = Array2::<f64>::zeros((k_len, d_len));
    let mut ell = vec![0.0; d_len];
    for t in 0..t_len {
        for f in 0..f_len {
            let q = &quads[(t * f_len + f) * d_len..][..d_len];
            for (d, l) in ell.iter_mut().enumerate() {
                *l = c - tpl.logdet(f, d) - q[d] / lambda_hat;
            }
            for k in 0..k_len {
                let s: f64 = w.row(k).iter().zip(&ell).map(|(a, b)| a * b).sum();
                let zv = z[[t, f, k]];
                let ln_z = safe_ln(zv);
                if zv > 0.0 {
                    value += zv * s;
                    kl_masks += zv * (ln_z - ln_pi[[t, k]]);
                }
                grad_ez[[t, f, k]] = s + ln_pi[[t, k]] - ln_z - 1.0;
                if zv != 0.0 {
                    for (g, &l) in grad_ew.row_mut(k).iter_mut().zip(&ell) {
                        *g += zv * l;
                    }
                }
            }
        }
    }
    let mut kl_doa = 0.0;
    for k in 0..k_len {
        for d in 0..d_len {
            let wv = w[[k, d]];
            let ln_w = safe_ln(wv);
            if wv > 0.0 {
                kl_doa += wv * (ln_w - ln_phi[d]);
            }
            grad_ew[[k, d]] += ln_phi[d] - ln_w - 1.0;
        }
    }
    let tol = 1e-9 * n.max(1.0);
    if kl_masks < -tol || kl_doa < -tol {
        return Err(Error::Numeric(format!(
            "negative divergence (masks {kl_masks}, directions {kl_doa}); priors are not normalized"
        )));
    }
    let elbo = value - kl_masks - kl_doa;
    if !elbo.is_finite() {
        return Err(Error::Numeric("training bound is not finite".into()));
    }
    grad_ez.mapv_inplace(|g| -g / n);
    grad_ew.mapv_inplace(|g| -g / n);
    Ok(TrainingElbo {
        loss: -elbo / n,
        kl_masks,
        kl_doa,
        grad_ez,
        grad_ew,
        floored,
    })
}

/// Template log likelihoods `log N_c(x_tf; 0, G_fd)`, laid out `(t, f, d)`.
pub(crate) fn template_loglik(quads: &[f64], t_len: usize, m: usize, tpl: &SteeringTemplate) -> Vec<f64> {
    let (f_len, d_len) = (tpl.n_freq(), tpl.n_dir());
    let c = -(m as f64) * PI.ln();
    let mut out = vec![0.0; t_len * f_len * d_len];
    for t in 0..t_len {
        for f in 0..f_len {
            let o = (t * f_len + f) * d_len;
            for d in 0..d_len {
                out[o + d] = c - tpl.logdet(f, d) - quads[o + d];
            }
        }
    }
    out
}

/// `omega_kd = sum_{t,f} ez_tfk ell_tfd` from precomputed template log likelihoods.
pub(crate) fn omega_from_loglik(ell: &[f64], ez: &MaskPosterior, d_len: usize) -> Array2<f64> {
    let (t_len, f_len, k_len) = ez.dims();
    let z = ez.values();
    let mut omega = Array2::<f64>::zeros((k_len, d_len));
    for t in 0..t_len {
        for f in 0..f_len {
            let l = &ell[(t * f_len + f) * d_len..][..d_len];
            for k in 0..k_len {
                let zv = z[[t, f, k]];
                if zv == 0.0 {
                    continue;
                }
                for (o, &lv) in omega.row_mut(k).iter_mut().zip(l) {
                    *o += zv * lv;
                }
            }
        }
    }
    omega
}

/// Adds the chain-rule term `d loss / d omega` through `omega` into `grad_ez`.
pub(crate) fn backprop_omega(ell: &[f64], grad_omega: &Array2<f64>, grad_ez: &mut Array3<f64>) {
    let (t_len, f_len, k_len) = grad_ez.dim();
    let d_len = grad_omega.ncols();
    for t in 0..t_len {
        for f in 0..f_len {
            let l = &ell[(t * f_len + f) * d_len..][..d_len];
            for k in 0..k_len {
                let g: f64 = grad_omega.row(k).iter().zip(l).map(|(a, b)| a * b).sum();
                grad_ez[[t, f, k]] += g;
            }
        }
    }
}

/// Frame and direction priors re-estimated from the current posteriors.
pub fn local_priors(ez: &MaskPosterior, ew: &DoaPosterior) -> (Array2<f64>, Array1<f64>) {
    m_step_priors(ez, ew)
}
