use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{s, Array2, Array3};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{Spectrogram, Waveform};
use crate::em::MaskPosterior;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// Periodic Hann, COLA at hop = window_len / 4.
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    #[serde(default)]
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 512,
            hop: 128,
            window: Window::Hann,
        }
    }
}

impl StftConfig {
    pub fn new(window_len: usize, hop: usize, window: Window) -> Result<Self> {
        let cfg = Self {
            window_len,
            hop,
            window,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 || !self.window_len.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "window length must be even and >= 2, got {}",
                self.window_len
            )));
        }
        if self.hop == 0 || self.hop > self.window_len {
            return Err(Error::InvalidConfig(format!(
                "hop must satisfy 0 < hop <= window_len, got {}",
                self.hop
            )));
        }
        Ok(())
    }

    pub fn n_freqs(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            1 + (len - self.window_len) / self.hop
        }
    }

    /// Number of samples covered by `n_frames` frames.
    pub fn signal_len(&self, n_frames: usize) -> usize {
        if n_frames == 0 {
            0
        } else {
            (n_frames - 1) * self.hop + self.window_len
        }
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(len: usize) -> Plans {
    let mut planner = FftPlanner::<f64>::new();
    Plans {
        forward: planner.plan_fft_forward(len),
        inverse: planner.plan_fft_inverse(len),
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let n = cfg.window_len;
    if w.len() < n {
        return Err(Error::InputTooShort {
            needed: n,
            got: w.len(),
        });
    }
    let n_frames = cfg.n_frames(w.len());
    let n_freqs = cfg.n_freqs();
    let window = cfg.window.coefficients(n);
    let fft = plans(n).forward;

    let mut values = Array3::<Complex64>::zeros((n_frames, n_freqs, w.n_channels()));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for m in 0..w.n_channels() {
        let channel = w.channel(m);
        for t in 0..n_frames {
            let start = t * cfg.hop;
            for (i, (dst, &wi)) in buf.iter_mut().zip(&window).enumerate() {
                *dst = Complex64::new(wi * channel[start + i], 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (f, &c) in buf[..n_freqs].iter().enumerate() {
                values[[t, f, m]] = c;
            }
        }
    }
    Spectrogram::new(values, w.sample_rate(), n, cfg.hop)
}

/// Weighted overlap-add inverse. Near the signal ends, where fewer frames
/// overlap, the summed squared window is floored at `EDGE_NORM_FLOOR` of its
/// maximum; dividing by the raw value would amplify any inconsistency in a
/// modified spectrogram by up to `1 / w[1]`. Fully overlapped samples are
/// reconstructed exactly.
pub const EDGE_NORM_FLOOR: f64 = 0.1;

pub fn istft(s: &Spectrogram, cfg: &StftConfig) -> Result<Waveform> {
    cfg.validate()?;
    if cfg.window_len != s.window_len() || cfg.hop != s.hop() {
        return Err(Error::ConfigMismatch(format!(
            "spectrogram was computed with window {} / hop {}, config has {} / {}",
            s.window_len(),
            s.hop(),
            cfg.window_len,
            cfg.hop
        )));
    }
    let n = cfg.window_len;
    let n_frames = s.n_frames();
    let len = cfg.signal_len(n_frames);
    let window = cfg.window.coefficients(n);
    let ifft = plans(n).inverse;

    let mut norm = vec![0.0; len];
    for t in 0..n_frames {
        for (i, wi) in window.iter().enumerate() {
            norm[t * cfg.hop + i] += wi * wi;
        }
    }
    let norm_floor = EDGE_NORM_FLOOR * norm.iter().cloned().fold(0.0, f64::max);

    let mut out = Array2::<f64>::zeros((s.n_channels(), len));
    let n_freqs = s.n_freqs();
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let scale = 1.0 / n as f64;
    for m in 0..s.n_channels() {
        let mut row = out.row_mut(m);
        for t in 0..n_frames {
            for (dst, v) in buf.iter_mut().zip(s.values().slice(s![t, .., m])) {
                *dst = *v;
            }
            // A real frame has purely real DC and Nyquist coefficients.
            buf[0].im = 0.0;
            buf[n_freqs - 1].im = 0.0;
            for f in n_freqs..n {
                buf[f] = buf[n - f].conj();
            }
            ifft.process_with_scratch(&mut buf, &mut scratch);
            let start = t * cfg.hop;
            for (i, (v, &wi)) in buf.iter().zip(&window).enumerate() {
                row[start + i] += wi * v.re * scale;
            }
        }
        for (v, &z) in row.iter_mut().zip(&norm) {
            *v /= z.max(norm_floor);
        }
    }
    Waveform::new(out, s.sample_rate())
}

/// Masks the reference channel with each source's posterior, yielding one
/// single-channel spectrogram per source.
pub fn apply_masks(x: &Spectrogram, z: &MaskPosterior, reference_channel: usize) -> Result<Vec<Spectrogram>> {
    let (t_len, f_len, k_len) = z.dims();
    if t_len != x.n_frames() || f_len != x.n_freqs() {
        return Err(Error::Dimension(format!(
            "mask is {t_len}x{f_len}, spectrogram is {}x{}",
            x.n_frames(),
            x.n_freqs()
        )));
    }
    if reference_channel >= x.n_channels() {
        return Err(Error::Dimension(format!(
            "reference channel {reference_channel} out of range for {} channels",
            x.n_channels()
        )));
    }
    let ez = z.values();
    (0..k_len)
        .map(|k| {
            let mut out = Array3::<Complex64>::zeros((t_len, f_len, 1));
            for t in 0..t_len {
                for f in 0..f_len {
                    out[[t, f, 0]] = x.values()[[t, f, reference_channel]] * ez[[t, f, k]];
                }
            }
            Spectrogram::new(out, x.sample_rate(), x.window_len(), x.hop())
        })
        .collect()
}
