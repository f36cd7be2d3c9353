//! Separation and localization scores.

use itertools::Itertools;
use ndarray::Array3;

use crate::em::{DoaPosterior, MaskPosterior};
use crate::error::{Error, Result};
use crate::signal::Spectrogram;
use crate::spatial::{circular_distance, DirectionGrid};

/// Largest reported SI-SDR in dB; the lower clamp keeps silent estimates finite.
pub const SI_SDR_CAP: f64 = 60.0;

/// Scale-invariant signal-to-distortion ratio in dB, clamped to
/// `[-SI_SDR_CAP, SI_SDR_CAP]`.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Dimension(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
    if !(ref_energy > 0.0) || !ref_energy.is_finite() {
        return Err(Error::InvalidReference("reference has no energy".into()));
    }
    let alpha = estimate.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / ref_energy;
    let target = alpha * alpha * ref_energy;
    let residual: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| (e - alpha * r).powi(2))
        .sum();
    let db = 10.0 * (target / residual).log10();
    Ok(if db.is_nan() {
        -SI_SDR_CAP
    } else {
        db.clamp(-SI_SDR_CAP, SI_SDR_CAP)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// `permutation[i]` is the estimate matched to reference `i`.
    pub permutation: Vec<usize>,
    /// SI-SDR of each reference against its matched estimate.
    pub scores: Vec<f64>,
    pub mean: f64,
}

pub const MAX_ALIGN_SOURCES: usize = 6;

/// Exhaustive search for the assignment maximizing mean SI-SDR. Ties keep
/// the lexicographically first permutation.
pub fn permutation_align(estimates: &[Vec<f64>], references: &[Vec<f64>]) -> Result<Alignment> {
    let k = references.len();
    if estimates.len() != k || k == 0 {
        return Err(Error::Dimension(format!(
            "{} estimates for {k} references",
            estimates.len()
        )));
    }
    if k > MAX_ALIGN_SOURCES {
        return Err(Error::Dimension(format!(
            "permutation search supports at most {MAX_ALIGN_SOURCES} sources, got {k}"
        )));
    }
    // pairwise[i][j]: reference i against estimate j
    let mut pairwise = vec![vec![0.0; k]; k];
    for (i, r) in references.iter().enumerate() {
        for (j, e) in estimates.iter().enumerate() {
            pairwise[i][j] = si_sdr(e, r)?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..k).permutations(k) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| pairwise[i][j]).sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, perm));
        }
    }
    let (total, permutation) = best.expect("at least one permutation");
    let scores = permutation
        .iter()
        .enumerate()
        .map(|(i, &j)| pairwise[i][j])
        .collect();
    Ok(Alignment {
        permutation,
        scores,
        mean: total / k as f64,
    })
}

/// Circular error in degrees between each source's most probable grid
/// direction and its true azimuth, after matching sources to truths so that
/// the total error is smallest. Entry `k` refers to estimated source `k`.
pub fn doa_error(ew: &DoaPosterior, grid: &DirectionGrid, truths_deg: &[f64]) -> Result<Vec<f64>> {
    let k = ew.n_sources();
    if truths_deg.len() != k || ew.n_dirs() != grid.len() {
        return Err(Error::Dimension(format!(
            "{k} estimated sources over {} directions, {} truths over a {}-point grid",
            ew.n_dirs(),
            truths_deg.len(),
            grid.len()
        )));
    }
    let estimates: Vec<f64> = ew.argmax().into_iter().map(|d| grid.azimuth(d)).collect();
    Ok(match_azimuths(&estimates, truths_deg))
}

/// Per-estimate circular error under the assignment with the smallest total.
pub fn match_azimuths(estimates_deg: &[f64], truths_deg: &[f64]) -> Vec<f64> {
    let k = estimates_deg.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for perm in (0..k).permutations(k) {
        let errors: Vec<f64> = perm
            .iter()
            .enumerate()
            .map(|(e, &t)| circular_distance(estimates_deg[e], truths_deg[t]))
            .collect();
        let total: f64 = errors.iter().sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, errors));
        }
    }
    best.map(|(_, e)| e).unwrap_or_default()
}

/// Power-ratio masks `|S_k|^2 / sum_j |S_j|^2` from single-channel source
/// spectrograms; bins where every source is silent get uniform weights.
pub fn ratio_masks(sources: &[Spectrogram]) -> Result<MaskPosterior> {
    oracle_masks(sources, false)
}

/// Binary masks assigning each bin to its most energetic source.
pub fn dominance_masks(sources: &[Spectrogram]) -> Result<MaskPosterior> {
    oracle_masks(sources, true)
}

fn oracle_masks(sources: &[Spectrogram], binary: bool) -> Result<MaskPosterior> {
    let first = sources
        .first()
        .ok_or_else(|| Error::Dimension("no source spectrograms".into()))?;
    let (t, f) = (first.n_frames(), first.n_freqs());
    let k = sources.len();
    if sources.iter().any(|s| s.n_frames() != t || s.n_freqs() != f) {
        return Err(Error::Dimension("source spectrograms differ in shape".into()));
    }
    let mut ez = Array3::<f64>::zeros((t, f, k));
    let mut power = vec![0.0; k];
    for ti in 0..t {
        for fi in 0..f {
            for (p, s) in power.iter_mut().zip(sources) {
                *p = s.bin(ti, fi).iter().map(|v| v.norm_sqr()).sum();
            }
            let total: f64 = power.iter().sum();
            if !(total > 0.0) {
                for ki in 0..k {
                    ez[[ti, fi, ki]] = 1.0 / k as f64;
                }
            } else if binary {
                let winner = power
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &p)| if p > power[b] { i } else { b });
                ez[[ti, fi, winner]] = 1.0;
            } else {
                for ki in 0..k {
                    ez[[ti, fi, ki]] = power[ki] / total;
                }
            }
        }
    }
    MaskPosterior::new(ez)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn si_sdr_basics() {
        let r = vec![1.0, -2.0, 3.0, 0.5];
        assert_eq!(si_sdr(&r, &r).unwrap(), SI_SDR_CAP);
        let half: Vec<f64> = r.iter().map(|v| 0.5 * v).collect();
        assert_eq!(si_sdr(&half, &r).unwrap(), SI_SDR_CAP);
        assert!(si_sdr(&r, &[0.0; 4]).is_err());
        assert!(si_sdr(&r[..3], &r).is_err());
        assert_eq!(si_sdr(&[0.0; 4], &r).unwrap(), -SI_SDR_CAP);
    }

    #[test]
    fn orthogonal_noise_of_equal_energy_is_zero_db() {
        let r = vec![1.0, 1.0, 0.0, 0.0];
        let e = vec![1.0, 1.0, 1.0, -1.0];
        assert!(si_sdr(&e, &r).unwrap().abs() < 1e-12);
    }

    #[test]
    fn swapped_estimates_are_realigned() {
        let a = vec![1.0, 0.0, 2.0, 0.0, 1.0];
        let b = vec![0.0, 1.0, 0.0, -1.0, 0.5];
        let al = permutation_align(&[b.clone(), a.clone()], &[a.clone(), b.clone()]).unwrap();
        assert_eq!(al.permutation, vec![1, 0]);
        let single = permutation_align(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.permutation, vec![0]);
    }

    #[test]
    fn circular_doa_error() {
        let grid = DirectionGrid::default();
        let mut ew = Array2::zeros((1, 72));
        ew[[0, 71]] = 1.0;
        let ew = DoaPosterior::new(ew).unwrap();
        assert!((doa_error(&ew, &grid, &[0.0]).unwrap()[0] - 5.0).abs() < 1e-12);
        assert_eq!(doa_error(&ew, &grid, &[355.0]).unwrap()[0], 0.0);
    }
}
