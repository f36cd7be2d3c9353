use ndarray::{Array2, Array3};

use super::kernels::normalize_log;
use super::posterior::{DoaPosterior, MaskPosterior};
use crate::error::{Error, Result};
use crate::signal::Spectrogram;
use crate::spatial::SteeringTemplate;

/// Direction indices of group `k` when `d_len` directions are split into
/// `k_len` contiguous groups; the last group takes any remainder.
pub fn direction_group(k: usize, k_len: usize, d_len: usize) -> std::ops::Range<usize> {
    let base = d_len / k_len;
    let end = if k + 1 == k_len { d_len } else { (k + 1) * base };
    k * base..end
}

/// Directional initialization: each source owns a contiguous block of
/// directions, and bins go to the block whose templates explain them best,
/// `ez_tfk` proportional to `exp(-sum_d ew_kd x^H G_fd^-1 x)`.
pub fn init_directional(
    x: &Spectrogram,
    tpl: &SteeringTemplate,
    k_len: usize,
    floor: f64,
) -> Result<(MaskPosterior, DoaPosterior)> {
    let quads = tpl.quad_forms(x)?;
    init_directional_from_quads(&quads, x.n_frames(), tpl, k_len, floor)
}

pub(crate) fn init_directional_from_quads(
    quads: &[f64],
    t_len: usize,
    tpl: &SteeringTemplate,
    k_len: usize,
    floor: f64,
) -> Result<(MaskPosterior, DoaPosterior)> {
    let d_len = tpl.n_dir();
    if k_len == 0 || k_len > d_len {
        return Err(Error::InvalidConfig(format!(
            "cannot split {d_len} directions into {k_len} groups"
        )));
    }
    let mut ew = Array2::<f64>::zeros((k_len, d_len));
    for k in 0..k_len {
        let group = direction_group(k, k_len, d_len);
        let w = 1.0 / group.len() as f64;
        for d in group {
            ew[[k, d]] = w;
        }
    }
    let ew = DoaPosterior::from_unchecked(ew);
    let ez = masks_from_doa_quads(quads, t_len, &ew, floor);
    Ok((ez, ew))
}

/// Masks implied by a DoA posterior through the templates alone,
/// `ez_tfk` proportional to `exp(-sum_d ew_kd x^H G_fd^-1 x)`. With block
/// posteriors this is the directional initialization; with a sharp posterior
/// it assigns each bin to the best-matching estimated direction.
pub fn init_masks_from_doa(
    x: &Spectrogram,
    ew: &DoaPosterior,
    tpl: &SteeringTemplate,
    floor: f64,
) -> Result<MaskPosterior> {
    if ew.n_dirs() != tpl.n_dir() {
        return Err(Error::Dimension(format!(
            "DoA posterior has {} directions, templates {}",
            ew.n_dirs(),
            tpl.n_dir()
        )));
    }
    let quads = tpl.quad_forms(x)?;
    Ok(masks_from_doa_quads(&quads, x.n_frames(), ew, floor))
}

pub(crate) fn masks_from_doa_quads(
    quads: &[f64],
    t_len: usize,
    ew: &DoaPosterior,
    floor: f64,
) -> MaskPosterior {
    let (k_len, d_len) = (ew.n_sources(), ew.n_dirs());
    let f_len = quads.len() / (t_len * d_len).max(1);
    let w = ew.values();
    let mut ez = Array3::<f64>::zeros((t_len, f_len, k_len));
    let mut scores = vec![0.0; k_len];
    for t in 0..t_len {
        for f in 0..f_len {
            let q = &quads[(t * f_len + f) * d_len..][..d_len];
            for (k, s) in scores.iter_mut().enumerate() {
                *s = -w
                    .row(k)
                    .iter()
                    .zip(q)
                    .filter(|(&e, _)| e > 0.0)
                    .map(|(&e, &qv)| e * qv)
                    .sum::<f64>();
            }
            if !normalize_log(&mut scores, floor) {
                scores.iter_mut().for_each(|s| *s = 1.0 / k_len as f64);
            }
            for (k, &s) in scores.iter().enumerate() {
                ez[[t, f, k]] = s;
            }
        }
    }
    MaskPosterior::from_unchecked(ez)
}

/// DoA posterior seeded from masks:
/// `ew_kd` proportional to `exp(-sum_{t,f} ez_tfk x^H G_fd^-1 x)`.
pub fn init_doa_from_masks(
    x: &Spectrogram,
    ez: &MaskPosterior,
    tpl: &SteeringTemplate,
    floor: f64,
) -> Result<DoaPosterior> {
    let (t, f, _) = ez.dims();
    if t != x.n_frames() || f != x.n_freqs() {
        return Err(Error::Dimension(format!(
            "mask is {t}x{f}, observation is {}x{}",
            x.n_frames(),
            x.n_freqs()
        )));
    }
    let quads = tpl.quad_forms(x)?;
    Ok(init_doa_from_quads(&quads, ez, tpl, floor))
}

pub(crate) fn init_doa_from_quads(
    quads: &[f64],
    ez: &MaskPosterior,
    tpl: &SteeringTemplate,
    floor: f64,
) -> DoaPosterior {
    let (t_len, f_len, k_len) = ez.dims();
    let d_len = tpl.n_dir();
    let mut scores = Array2::<f64>::zeros((k_len, d_len));
    for t in 0..t_len {
        for f in 0..f_len {
            let q = &quads[(t * f_len + f) * d_len..][..d_len];
            for k in 0..k_len {
                let z = ez.values()[[t, f, k]];
                if z == 0.0 {
                    continue;
                }
                for (s, &qv) in scores.row_mut(k).iter_mut().zip(q) {
                    *s -= z * qv;
                }
            }
        }
    }
    for mut row in scores.rows_mut() {
        let slice = row.as_slice_mut().unwrap();
        if !normalize_log(slice, floor) {
            slice.iter_mut().for_each(|s| *s = 1.0 / d_len as f64);
        }
    }
    DoaPosterior::from_unchecked(scores)
}
