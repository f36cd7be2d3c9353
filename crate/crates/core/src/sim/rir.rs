//! Image-method room impulse responses for a shoebox room.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of the windowed-sinc fractional-delay kernel, in taps.
pub const SINC_TAPS: usize = 81;

/// Distances below this are treated as coincident source and microphone.
const MIN_DISTANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Room {
    /// Side lengths in metres; the room spans `[0, dims[i]]` on each axis.
    pub dims: [f64; 3],
    /// Energy absorption coefficient of every wall, in `(0, 1]`.
    pub absorption: f64,
    pub max_order: usize,
}

impl Room {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::InvalidConfig("room dimensions must be positive".into()));
        }
        if !(self.absorption > 0.0 && self.absorption <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "absorption must lie in (0, 1], got {}",
                self.absorption
            )));
        }
        Ok(())
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        p.iter().zip(&self.dims).all(|(&v, &d)| v > 0.0 && v < d)
    }

    /// Pressure reflection coefficient `sqrt(1 - absorption)`.
    pub fn reflection_coefficient(&self) -> f64 {
        (1.0 - self.absorption).sqrt()
    }
}

/// One mirrored source as seen from the microphone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageTap {
    pub position: [f64; 3],
    pub order: usize,
    pub distance: f64,
    /// Propagation delay in (fractional) samples.
    pub delay: f64,
    pub gain: f64,
}

/// Every image source with reflection order up to `room.max_order`.
/// Zero-gain images (fully absorptive walls) are dropped.
pub fn image_taps(
    room: &Room,
    src: [f64; 3],
    mic: [f64; 3],
    speed_of_sound: f64,
    sample_rate: u32,
) -> Result<Vec<ImageTap>> {
    room.validate()?;
    if !room.contains(&src) || !room.contains(&mic) {
        return Err(Error::InvalidConfig(
            "source and microphone must lie strictly inside the room".into(),
        ));
    }
    let direct = dist(&src, &mic);
    if direct < MIN_DISTANCE {
        return Err(Error::SingularDistance(direct));
    }
    let r = room.reflection_coefficient();
    let n_max = room.max_order as i64;
    let mut taps = Vec::new();
    // Along each axis an image is indexed by (n, p): its coordinate is
    // (1 - 2p) s + 2 n L and it has undergone |n - p| + |n| reflections.
    for nx in -n_max..=n_max {
        for ny in -n_max..=n_max {
            for nz in -n_max..=n_max {
                for p in 0..8u8 {
                    let idx = [nx, ny, nz];
                    let mut pos = [0.0; 3];
                    let mut order = 0;
                    for a in 0..3 {
                        let pa = ((p >> a) & 1) as i64;
                        pos[a] = (1 - 2 * pa) as f64 * src[a] + 2.0 * idx[a] as f64 * room.dims[a];
                        order += ((idx[a] - pa).abs() + idx[a].abs()) as usize;
                    }
                    if order > room.max_order {
                        continue;
                    }
                    let gain_num = if order == 0 { 1.0 } else { r.powi(order as i32) };
                    if gain_num == 0.0 {
                        continue;
                    }
                    let distance = dist(&pos, &mic);
                    taps.push(ImageTap {
                        position: pos,
                        order,
                        distance,
                        delay: distance / speed_of_sound * sample_rate as f64,
                        gain: gain_num / (4.0 * PI * distance),
                    });
                }
            }
        }
    }
    taps.sort_by(|a, b| a.delay.total_cmp(&b.delay));
    Ok(taps)
}

/// Hann-windowed sinc centred at `delay`, evaluated at integer sample `n`.
pub fn fractional_delay_kernel(n: f64, delay: f64) -> f64 {
    let x = n - delay;
    let half = (SINC_TAPS / 2) as f64;
    if x.abs() > half {
        return 0.0;
    }
    let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
    let window = 0.5 * (1.0 + (PI * x / (half + 1.0)).cos());
    sinc * window
}

/// Sum of the image impulses, each spread by the fractional-delay kernel.
pub fn image_method_rir(
    room: &Room,
    src: [f64; 3],
    mic: [f64; 3],
    speed_of_sound: f64,
    sample_rate: u32,
) -> Result<Vec<f64>> {
    let taps = image_taps(room, src, mic, speed_of_sound, sample_rate)?;
    Ok(render_taps(&taps))
}

pub fn render_taps(taps: &[ImageTap]) -> Vec<f64> {
    let half = SINC_TAPS / 2;
    let last = taps.iter().map(|t| t.delay).fold(0.0, f64::max);
    let mut rir = vec![0.0; last.ceil() as usize + half + 1];
    for tap in taps {
        let centre = tap.delay.round() as i64;
        let lo = (centre - half as i64).max(0) as usize;
        let hi = ((centre + half as i64) as usize).min(rir.len() - 1);
        for (n, v) in rir.iter_mut().enumerate().take(hi + 1).skip(lo) {
            *v += tap.gain * fractional_delay_kernel(n as f64, tap.delay);
        }
    }
    rir
}

/// Full linear convolution.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let mut y = vec![0.0; x.len() + h.len() - 1];
    for (i, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (yv, &hv) in y[i..].iter_mut().zip(h) {
            *yv += xv * hv;
        }
    }
    y
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
