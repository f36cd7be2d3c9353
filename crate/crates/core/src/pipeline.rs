//! End-to-end multichannel separation: STFT, templates, EM, masking, inverse STFT.

use ndarray::{Array2, Array3};

use crate::em::{run_em, DoaPosterior, EmConfig, EmInit, EmResult, MaskPosterior};
use crate::error::{Error, Result};
use crate::signal::{apply_masks, istft, stft, Spectrogram, StftConfig, Waveform};
use crate::spatial::{build_templates, circular_distance, ArrayGeometry, DirectionGrid, SteeringTemplate};

#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorConfig {
    pub stft: StftConfig,
    pub geometry: ArrayGeometry,
    pub grid: DirectionGrid,
    pub epsilon: f64,
    pub em: EmConfig,
    pub reference_channel: usize,
}

impl SeparatorConfig {
    pub fn for_geometry(geometry: ArrayGeometry) -> Self {
        let m = geometry.n_mics();
        Self {
            stft: StftConfig::default(),
            geometry,
            grid: DirectionGrid::default(),
            epsilon: 1e-2,
            em: EmConfig::for_channels(m),
            reference_channel: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Separation {
    pub mixture: Spectrogram,
    pub em: EmResult,
    /// One single-channel waveform per source, at the reference channel.
    pub sources: Vec<Waveform>,
}

pub fn templates_for(cfg: &SeparatorConfig, sample_rate: u32) -> Result<SteeringTemplate> {
    build_templates(
        &cfg.geometry,
        &cfg.grid,
        cfg.stft.n_freqs(),
        sample_rate,
        cfg.epsilon,
    )
}

pub fn separate(mix: &Waveform, cfg: &SeparatorConfig, init: EmInit) -> Result<Separation> {
    if mix.n_channels() != cfg.geometry.n_mics() {
        return Err(Error::InvalidConfig(format!(
            "input has {} channels but the array has {} microphones",
            mix.n_channels(),
            cfg.geometry.n_mics()
        )));
    }
    let x = stft(mix, &cfg.stft)?;
    let tpl = templates_for(cfg, mix.sample_rate())?;
    let em = run_em(&x, &tpl, &cfg.em, init)?;
    let sources = reconstruct(&x, &em.ez, cfg)?;
    Ok(Separation {
        mixture: x,
        em,
        sources,
    })
}

/// Directional separation with an over-complete first pass. EM runs with
/// `n_classes` direction-block classes, the classes are merged into
/// `cfg.em.n_sources` sources, and a second EM pass starts from the merged
/// DoA posteriors with masks taken from the templates. With `n_classes`
/// equal to the number of sources this is a single directional run.
pub fn separate_directional(mix: &Waveform, cfg: &SeparatorConfig, n_classes: usize) -> Result<Separation> {
    let n_out = cfg.em.n_sources;
    if n_classes < n_out {
        return Err(Error::InvalidConfig(format!(
            "{n_classes} direction classes cannot yield {n_out} sources"
        )));
    }
    if n_classes == n_out {
        return separate(mix, cfg, EmInit::Directional);
    }
    let mut coarse = cfg.clone();
    coarse.em.n_sources = n_classes;
    let first = separate(mix, &coarse, EmInit::Directional)?;
    let (_, ew) = merge_classes(&first.em.ez, &first.em.ew, &cfg.grid, n_out)?;
    let tpl = templates_for(cfg, mix.sample_rate())?;
    let em = run_em(&first.mixture, &tpl, &cfg.em, EmInit::FromDoa(ew))?;
    let sources = reconstruct(&first.mixture, &em.ez, cfg)?;
    Ok(Separation {
        mixture: first.mixture,
        em,
        sources,
    })
}

/// Masked reference channel, back in the time domain.
pub fn reconstruct(x: &Spectrogram, masks: &MaskPosterior, cfg: &SeparatorConfig) -> Result<Vec<Waveform>> {
    apply_masks(x, masks, cfg.reference_channel)?
        .iter()
        .map(|s| istft(s, &cfg.stft))
        .collect()
}

/// Classes whose most probable directions lie within this many degrees are
/// treated as one source split in two.
pub const MERGE_TOLERANCE_DEG: f64 = 10.0;

/// Reduces an over-complete set of source classes to `n_out` outputs.
/// Classes whose most probable directions are within `MERGE_TOLERANCE_DEG`
/// are first pooled; the `n_out` heaviest pools (by total mask mass) are
/// kept, and each remaining pool is added to the kept pool whose direction is
/// circularly closest. A pool's DoA posterior is that of its heaviest class.
pub fn merge_classes(
    ez: &MaskPosterior,
    ew: &DoaPosterior,
    grid: &DirectionGrid,
    n_out: usize,
) -> Result<(MaskPosterior, DoaPosterior)> {
    let (t, f, k) = ez.dims();
    if n_out == 0 || n_out > k || ew.n_sources() != k || ew.n_dirs() != grid.len() {
        return Err(Error::Dimension(format!(
            "cannot merge {k} classes over {} directions into {n_out}",
            ew.n_dirs()
        )));
    }
    let z = ez.values();
    let mass: Vec<f64> = (0..k).map(|ki| z.slice(ndarray::s![.., .., ki]).sum()).collect();
    let doa: Vec<f64> = ew.argmax().into_iter().map(|d| grid.azimuth(d)).collect();

    // pool labels by single linkage on direction, heaviest classes first
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    let mut pool = vec![usize::MAX; k];
    let mut heads: Vec<usize> = Vec::new();
    for &ki in &order {
        let near = heads.iter().position(|&h| {
            (0..k).any(|j| pool[j] == pool[h] && circular_distance(doa[ki], doa[j]) <= MERGE_TOLERANCE_DEG)
        });
        match near {
            Some(p) => pool[ki] = pool[heads[p]],
            None => {
                pool[ki] = heads.len();
                heads.push(ki);
            }
        }
    }
    // groups to keep: pools, or single classes when there are too few pools
    let groups: Vec<usize> = if heads.len() >= n_out {
        (0..k).map(|ki| pool[ki]).collect()
    } else {
        (0..k).collect()
    };
    let n_groups = groups.iter().max().map_or(0, |&g| g + 1);
    let mut group_mass = vec![0.0; n_groups];
    let mut group_head = vec![usize::MAX; n_groups];
    for &ki in &order {
        group_mass[groups[ki]] += mass[ki];
        if group_head[groups[ki]] == usize::MAX {
            group_head[groups[ki]] = ki;
        }
    }
    let mut by_mass: Vec<usize> = (0..n_groups).collect();
    by_mass.sort_by(|&a, &b| group_mass[b].total_cmp(&group_mass[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = by_mass[..n_out].to_vec();
    kept.sort_by_key(|&g| group_head[g]);
    let target: Vec<usize> = (0..k)
        .map(|ki| {
            let g = groups[ki];
            kept.iter().position(|&h| h == g).unwrap_or_else(|| {
                let anchor = doa[group_head[g]];
                (0..n_out)
                    .min_by(|&a, &b| {
                        circular_distance(anchor, doa[group_head[kept[a]]])
                            .total_cmp(&circular_distance(anchor, doa[group_head[kept[b]]]))
                    })
                    .expect("n_out >= 1")
            })
        })
        .collect();
    let kept_heads: Vec<usize> = kept.iter().map(|&g| group_head[g]).collect();
    let mut merged = Array3::<f64>::zeros((t, f, n_out));
    for ((ti, fi, ki), &v) in z.indexed_iter() {
        merged[[ti, fi, target[ki]]] += v;
    }
    let rows = Array2::from_shape_fn((n_out, grid.len()), |(i, d)| ew.values()[[kept_heads[i], d]]);
    Ok((MaskPosterior::new(merged)?, DoaPosterior::new(rows)?))
}
