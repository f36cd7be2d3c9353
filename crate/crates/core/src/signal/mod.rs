//! Time-domain waveforms, the STFT front end and mask application.

mod dump;
mod stft;
mod wav;

pub use dump::{read_spectrogram, read_tensor, write_spectrogram, write_tensor, Tensor};
pub use stft::{apply_masks, istft, stft, StftConfig, Window};
pub use wav::{read_wav, write_wav, SampleFormat};

use ndarray::{Array2, Array3, ArrayView1};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Multichannel real signal, indexed `(channel, sample)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Array2<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if samples.nrows() == 0 {
            return Err(Error::Dimension("waveform needs at least one channel".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn from_channels(channels: &[Vec<f64>], sample_rate: u32) -> Result<Self> {
        let n = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::Dimension("channels differ in length".into()));
        }
        let mut samples = Array2::zeros((channels.len(), n));
        for (mut row, ch) in samples.rows_mut().into_iter().zip(channels) {
            row.assign(&ArrayView1::from(ch.as_slice()));
        }
        Self::new(samples, sample_rate)
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let n = samples.len();
        let samples = Array2::from_shape_vec((1, n), samples).map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn channel(&self, m: usize) -> ArrayView1<'_, f64> {
        self.samples.row(m)
    }

    pub fn n_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Keeps only the listed channels, in order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Waveform> {
        if let Some(&bad) = channels.iter().find(|&&c| c >= self.n_channels()) {
            return Err(Error::Dimension(format!(
                "channel {bad} out of range for {} channels",
                self.n_channels()
            )));
        }
        let rows: Vec<Vec<f64>> = channels.iter().map(|&c| self.samples.row(c).to_vec()).collect();
        Waveform::from_channels(&rows, self.sample_rate)
    }
}

/// Complex STFT coefficients indexed `(frame, bin, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    values: Array3<Complex64>,
    sample_rate: u32,
    window_len: usize,
    hop: usize,
}

impl Spectrogram {
    pub fn new(values: Array3<Complex64>, sample_rate: u32, window_len: usize, hop: usize) -> Result<Self> {
        if values.shape()[1] != window_len / 2 + 1 {
            return Err(Error::Dimension(format!(
                "{} bins do not match window length {window_len}",
                values.shape()[1]
            )));
        }
        if hop == 0 || hop > window_len || sample_rate == 0 {
            return Err(Error::InvalidConfig(format!(
                "bad spectrogram metadata: hop {hop}, window {window_len}, rate {sample_rate}"
            )));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Numeric("spectrogram contains non-finite values".into()));
        }
        Ok(Self {
            values,
            sample_rate,
            window_len,
            hop,
        })
    }

    pub fn values(&self) -> &Array3<Complex64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<Complex64> {
        self.values
    }

    pub fn n_frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_freqs(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn n_channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// Observation vector at one time-frequency bin.
    pub fn bin(&self, t: usize, f: usize) -> ArrayView1<'_, Complex64> {
        self.values.slice(ndarray::s![t, f, ..])
    }

    /// Returns a copy with every coefficient multiplied by `gain`.
    pub fn scaled(&self, gain: f64) -> Spectrogram {
        Spectrogram {
            values: self.values.mapv(|v| v * gain),
            ..self.clone()
        }
    }
}
