//! One training step over a mini-batch, and the finite-difference check of
//! the full network-to-bound pipeline.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::adam::Adam;
use super::network::{
    DirectionalSoftmax, LocalizationMap, MaskNetwork, ReferenceMaskNet, DEFAULT_CONTEXT, DEFAULT_HIDDEN,
};
use super::objective::{
    avg_power, backprop_omega, local_priors, log_magnitude_features, omega_from_loglik, template_loglik,
    training_elbo_from_quads,
};
use crate::em::MaskPosterior;
use crate::error::{Error, Result};
use crate::signal::Spectrogram;
use crate::spatial::{build_templates, ArrayGeometry, DirectionGrid, SteeringTemplate};

/// One training mixture with its network input and fixed average power.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x: Spectrogram,
    pub features: Array2<f64>,
    pub lambda_hat: f64,
}

impl TrainItem {
    pub fn new(x: Spectrogram, reference_channel: usize) -> Result<Self> {
        let features = log_magnitude_features(&x, reference_channel)?;
        let lambda_hat = avg_power(&x)?;
        Ok(Self {
            x,
            features,
            lambda_hat,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub posterior_floor: f64,
    /// Treat `omega` as a constant input to the localization map.
    pub omega_stop_gradient: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            posterior_floor: 1e-12,
            omega_stop_gradient: false,
        }
    }
}

/// Loss of one mixture and the gradients of both networks.
#[derive(Debug, Clone)]
pub struct ItemGradient {
    pub loss: f64,
    pub grad_mask: Vec<f64>,
    pub grad_map: Vec<f64>,
    pub floored: usize,
}

/// Network outputs, refreshed priors, then the bound and its gradients.
pub fn item_gradient<G: MaskNetwork, H: LocalizationMap>(
    item: &TrainItem,
    g: &G,
    h: &H,
    tpl: &SteeringTemplate,
    opts: &TrainOptions,
) -> Result<ItemGradient> {
    let (ez, g_cache) = g.forward(&item.features)?;
    let quads = tpl.quad_forms(&item.x)?;
    let (t_len, f_len, _) = ez.dims();
    let ell = template_loglik(&quads, t_len, item.x.n_channels(), tpl);
    let omega = omega_from_loglik(&ell, &ez, tpl.n_dir());
    let (ew, h_cache) = h.forward(&omega, t_len * f_len)?;
    let (pi, phi) = local_priors(&ez, &ew);
    let bound = training_elbo_from_quads(
        &quads,
        item.x.n_channels(),
        &ez,
        &ew,
        &pi,
        &phi,
        tpl,
        item.lambda_hat,
        opts.posterior_floor,
    )?;
    let (grad_map, grad_omega) = h.backward(&h_cache, &bound.grad_ew);
    let mut grad_ez = bound.grad_ez;
    if !opts.omega_stop_gradient {
        backprop_omega(&ell, &grad_omega, &mut grad_ez);
    }
    let grad_mask = g.backward(&g_cache, &grad_ez);
    Ok(ItemGradient {
        loss: bound.loss,
        grad_mask,
        grad_map,
        floored: bound.floored,
    })
}

/// Loss of one mixture through the full pipeline, without gradients.
pub fn item_loss<G: MaskNetwork, H: LocalizationMap>(
    item: &TrainItem,
    g: &G,
    h: &H,
    tpl: &SteeringTemplate,
    opts: &TrainOptions,
) -> Result<f64> {
    let (ez, _) = g.forward(&item.features)?;
    let quads = tpl.quad_forms(&item.x)?;
    let (t_len, f_len, _) = ez.dims();
    let ell = template_loglik(&quads, t_len, item.x.n_channels(), tpl);
    let omega = omega_from_loglik(&ell, &ez, tpl.n_dir());
    let (ew, _) = h.forward(&omega, t_len * f_len)?;
    let (pi, phi) = local_priors(&ez, &ew);
    let bound = training_elbo_from_quads(
        &quads,
        item.x.n_channels(),
        &ez,
        &ew,
        &pi,
        &phi,
        tpl,
        item.lambda_hat,
        opts.posterior_floor,
    )?;
    Ok(bound.loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Mean per-mixture loss of the batch, before the update.
    pub loss: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

/// Averages the per-mixture gradients and applies one optimizer step to the
/// concatenated parameters `[mask network, localization map]`. A non-finite
/// gradient skips the update and decays the learning rate.
pub fn train_step<G: MaskNetwork, H: LocalizationMap>(
    batch: &[&TrainItem],
    g: &mut G,
    h: &mut H,
    tpl: &SteeringTemplate,
    opt: &mut Adam,
    opts: &TrainOptions,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty mini-batch".into()));
    }
    let (ng, nh) = (g.params().len(), h.params().len());
    if opt.m.len() != ng + nh {
        return Err(Error::Dimension(format!(
            "optimizer holds {} parameters, networks have {}",
            opt.m.len(),
            ng + nh
        )));
    }
    let mut grads = vec![0.0; ng + nh];
    let mut loss = 0.0;
    let mut floored = 0;
    for item in batch {
        let ig = item_gradient(item, g, h, tpl, opts)?;
        loss += ig.loss;
        floored += ig.floored;
        grads[..ng]
            .iter_mut()
            .zip(&ig.grad_mask)
            .for_each(|(a, b)| *a += b);
        grads[ng..]
            .iter_mut()
            .zip(&ig.grad_map)
            .for_each(|(a, b)| *a += b);
    }
    let scale = 1.0 / batch.len() as f64;
    grads.iter_mut().for_each(|v| *v *= scale);
    loss *= scale;
    if floored > 0 {
        log::debug!("{floored} posterior entries floored inside logarithms");
    }
    let grad_norm = grads.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !grad_norm.is_finite() || !loss.is_finite() {
        opt.decay();
        log::warn!(
            "non-finite gradient; step skipped, learning rate now {:e}",
            opt.lr
        );
        return Ok(StepReport {
            loss,
            grad_norm,
            skipped: true,
        });
    }
    let mut params: Vec<f64> = g.params().iter().chain(h.params()).copied().collect();
    opt.update(&mut params, &grads);
    g.params_mut().copy_from_slice(&params[..ng]);
    h.params_mut().copy_from_slice(&params[ng..]);
    Ok(StepReport {
        loss,
        grad_norm,
        skipped: false,
    })
}

/// Masks predicted from the single reference channel.
pub fn predict_masks<G: MaskNetwork>(
    g: &G,
    x: &Spectrogram,
    reference_channel: usize,
) -> Result<MaskPosterior> {
    let features = log_magnitude_features(x, reference_channel)?;
    Ok(g.forward(&features)?.0)
}

/// Largest relative error is taken over coordinates; the denominator is
/// `max(|analytic|, |numeric|, GRADCHECK_SCALE_FLOOR * max_j |numeric_j|)`
/// so that near-zero coordinates are judged against the gradient's scale.
pub const GRADCHECK_SCALE_FLOOR: f64 = 1e-3;
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Index into the concatenated parameters `[mask network, localization map]`.
    pub worst_index: usize,
    pub n_params: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOL
    }
}

/// Central differences of the full loss in every parameter of both networks.
pub fn gradcheck<G: MaskNetwork + Clone, H: LocalizationMap + Clone>(
    g: &G,
    h: &H,
    item: &TrainItem,
    tpl: &SteeringTemplate,
    opts: &TrainOptions,
    step: f64,
) -> Result<GradcheckReport> {
    let ig = item_gradient(item, g, h, tpl, opts)?;
    let analytic: Vec<f64> = ig.grad_mask.iter().chain(&ig.grad_map).copied().collect();
    let ng = g.params().len();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut gp = g.clone();
    for i in 0..ng {
        let orig = gp.params()[i];
        gp.params_mut()[i] = orig + step;
        let up = item_loss(item, &gp, h, tpl, opts)?;
        gp.params_mut()[i] = orig - step;
        let down = item_loss(item, &gp, h, tpl, opts)?;
        gp.params_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }
    let mut hp = h.clone();
    for i in 0..h.params().len() {
        let orig = hp.params()[i];
        hp.params_mut()[i] = orig + step;
        let up = item_loss(item, g, &hp, tpl, opts)?;
        hp.params_mut()[i] = orig - step;
        let down = item_loss(item, g, &hp, tpl, opts)?;
        hp.params_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }
    let scale = GRADCHECK_SCALE_FLOOR * numeric.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let (mut worst, mut worst_index) = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(scale);
        let err = if denom > 0.0 { (a - n).abs() / denom } else { 0.0 };
        if !(err <= worst) {
            worst = err;
            worst_index = i;
        }
    }
    Ok(GradcheckReport {
        max_rel_error: worst,
        worst_index,
        n_params: analytic.len(),
        analytic,
        numeric,
    })
}

/// A small random problem for gradient checks: `t_len` frames, eight bins,
/// the default four-microphone array and eight directions, together with a
/// freshly initialized reference network and a localization map whose
/// temperature puts the initial logits on a unit scale.
pub struct GradcheckSetup {
    pub item: TrainItem,
    pub tpl: SteeringTemplate,
    pub net: ReferenceMaskNet,
    pub map: DirectionalSoftmax,
}

pub fn gradcheck_setup(seed: u64, t_len: usize, n_sources: usize) -> Result<GradcheckSetup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f_len, sample_rate) = (8, 8000);
    let geometry = ArrayGeometry::default();
    let m = geometry.n_mics();
    let grid = DirectionGrid::new(0.0, 45.0, 8)?;
    let tpl = build_templates(&geometry, &grid, f_len, sample_rate, 1e-2)?;
    let values = Array3::from_shape_fn((t_len, f_len, m), |_| {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    let x = Spectrogram::new(values, sample_rate, 2 * (f_len - 1), f_len / 2)?;
    let item = TrainItem::new(x, 0)?;
    let net = ReferenceMaskNet::new(f_len, n_sources, DEFAULT_CONTEXT, DEFAULT_HIDDEN, &mut rng)?;
    let mut map = DirectionalSoftmax::new(grid.len());
    // spread of the initial logits across directions
    let (ez, _) = net.forward(&item.features)?;
    let quads = tpl.quad_forms(&item.x)?;
    let ell = template_loglik(&quads, t_len, m, &tpl);
    let omega = omega_from_loglik(&ell, &ez, tpl.n_dir()) / (t_len * f_len) as f64;
    let spread = omega
        .rows()
        .into_iter()
        .map(|r| r.fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - r.fold(f64::INFINITY, |a, &b| a.min(b)))
        .fold(0.0, f64::max);
    let d_len = grid.len();
    let p = map.params_mut();
    for d in 0..d_len {
        p[d] = rng.gen_range(0.8..1.2);
        p[d_len + d] = rng.gen_range(-0.1..0.1) * spread;
    }
    p[2 * d_len] = spread.max(1e-12).ln();
    Ok(GradcheckSetup { item, tpl, net, map })
}
