//! Little-endian binary dumps.
//!
//! Spectrogram (`CGSP`): magic, then u32 T, F, M, sample_rate, window_len,
//! hop, then T*F*M `(re, im)` f64 pairs in `(t, f, m)` row-major order.
//!
//! Real tensor (`CGTN`): magic, u32 rank, `rank` u32 dims, then the f64
//! values in row-major order. Used for masks `(t, f, k)` and DoA
//! posteriors `(k, d)`.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use num_complex::Complex64;

use super::Spectrogram;
use crate::error::{Error, Result};

const SPECTROGRAM_MAGIC: &[u8; 4] = b"CGSP";
const TENSOR_MAGIC: &[u8; 4] = b"CGTN";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "tensor dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }
}

pub fn write_spectrogram(path: &Path, s: &Spectrogram) -> Result<()> {
    let mut buf = Vec::with_capacity(28 + s.values().len() * 16);
    buf.extend_from_slice(SPECTROGRAM_MAGIC);
    for v in [
        s.n_frames(),
        s.n_freqs(),
        s.n_channels(),
        s.sample_rate() as usize,
        s.window_len(),
        s.hop(),
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for c in s.values().iter() {
        buf.extend_from_slice(&c.re.to_le_bytes());
        buf.extend_from_slice(&c.im.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_spectrogram(path: &Path) -> Result<Spectrogram> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(path, &bytes);
    r.magic(SPECTROGRAM_MAGIC)?;
    let t = r.u32()? as usize;
    let f = r.u32()? as usize;
    let m = r.u32()? as usize;
    let sample_rate = r.u32()?;
    let window_len = r.u32()? as usize;
    let hop = r.u32()? as usize;
    let n = t * f * m;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let re = r.f64()?;
        let im = r.f64()?;
        values.push(Complex64::new(re, im));
    }
    r.finish()?;
    let values = Array3::from_shape_vec((t, f, m), values).map_err(|e| Error::format(path, e.to_string()))?;
    Spectrogram::new(values, sample_rate, window_len, hop)
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * tensor.dims.len() + 8 * tensor.data.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(tensor.dims.len() as u32).to_le_bytes());
    for &d in &tensor.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &tensor.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(path, &bytes);
    r.magic(TENSOR_MAGIC)?;
    let rank = r.u32()? as usize;
    let dims = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Tensor::new(dims, data)
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        if self.take(4)? != expected {
            return Err(Error::format(
                self.path,
                format!("bad magic, expected {}", String::from_utf8_lossy(expected)),
            ));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, "trailing bytes after payload"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectrogram_header_layout() {
        let mut values = Array3::<Complex64>::zeros((2, 3, 1));
        values[[1, 2, 0]] = Complex64::new(1.5, -2.0);
        let s = Spectrogram::new(values, 8000, 4, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.cgsp");
        write_spectrogram(&path, &s).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"CGSP");
        let header: Vec<u32> = bytes[4..28]
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(header, vec![2, 3, 1, 8000, 4, 2]);
        assert_eq!(bytes.len(), 28 + 6 * 16);
        // last pair is (t=1, f=2, m=0)
        let tail = &bytes[bytes.len() - 16..];
        assert_eq!(f64::from_le_bytes(tail[..8].try_into().unwrap()), 1.5);
        assert_eq!(f64::from_le_bytes(tail[8..].try_into().unwrap()), -2.0);
        assert_eq!(read_spectrogram(&path).unwrap(), s);
    }

    #[test]
    fn tensor_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cgtn");
        let t = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);

        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format { .. })));
        assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
    }
}
