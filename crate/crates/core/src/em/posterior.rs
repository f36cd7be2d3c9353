use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::signal::Tensor;

const SIMPLEX_TOL: f64 = 1e-9;

/// Per-bin source responsibilities `q(z_tfk = 1)`, indexed `(t, f, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPosterior {
    ez: Array3<f64>,
}

impl MaskPosterior {
    /// Validates entries in `[0, 1]` summing to one over `k` at every bin.
    pub fn new(ez: Array3<f64>) -> Result<Self> {
        for (idx, lane) in ez.lanes(Axis(2)).into_iter().enumerate() {
            check_simplex(lane.iter().copied(), || {
                let f_len = ez.shape()[1];
                format!("mask at (t={}, f={})", idx / f_len.max(1), idx % f_len.max(1))
            })?;
        }
        Ok(Self { ez })
    }

    pub(crate) fn from_unchecked(ez: Array3<f64>) -> Self {
        Self { ez }
    }

    pub fn uniform(t: usize, f: usize, k: usize) -> Self {
        Self {
            ez: Array3::from_elem((t, f, k), 1.0 / k as f64),
        }
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.ez
    }

    pub fn into_values(self) -> Array3<f64> {
        self.ez
    }

    /// `(T, F, K)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.ez.shape();
        (s[0], s[1], s[2])
    }

    pub fn n_sources(&self) -> usize {
        self.ez.shape()[2]
    }

    /// Reorders sources so that output source `i` is input source `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n_sources())?;
        let (t, f, k) = self.dims();
        Ok(Self {
            ez: Array3::from_shape_fn((t, f, k), |(ti, fi, ki)| self.ez[[ti, fi, perm[ki]]]),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        let (t, f, k) = self.dims();
        Tensor {
            dims: vec![t, f, k],
            data: self.ez.iter().copied().collect(),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.dims.len() != 3 {
            return Err(Error::Dimension(format!("mask tensor has rank {}", t.dims.len())));
        }
        let ez = Array3::from_shape_vec((t.dims[0], t.dims[1], t.dims[2]), t.data.clone())
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(ez)
    }
}

/// Per-source direction posteriors `q(w_kd = 1)`, indexed `(k, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DoaPosterior {
    ew: Array2<f64>,
}

impl DoaPosterior {
    pub fn new(ew: Array2<f64>) -> Result<Self> {
        for (k, row) in ew.rows().into_iter().enumerate() {
            check_simplex(row.iter().copied(), || format!("DoA posterior of source {k}"))?;
        }
        Ok(Self { ew })
    }

    pub(crate) fn from_unchecked(ew: Array2<f64>) -> Self {
        Self { ew }
    }

    pub fn uniform(k: usize, d: usize) -> Self {
        Self {
            ew: Array2::from_elem((k, d), 1.0 / d as f64),
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.ew
    }

    pub fn into_values(self) -> Array2<f64> {
        self.ew
    }

    pub fn n_sources(&self) -> usize {
        self.ew.nrows()
    }

    pub fn n_dirs(&self) -> usize {
        self.ew.ncols()
    }

    /// Most probable direction index per source.
    pub fn argmax(&self) -> Vec<usize> {
        self.ew
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (d, &v)| {
                            if v > best.1 {
                                (d, v)
                            } else {
                                best
                            }
                        },
                    )
                    .0
            })
            .collect()
    }

    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n_sources())?;
        let (k, d) = self.ew.dim();
        Ok(Self {
            ew: Array2::from_shape_fn((k, d), |(ki, di)| self.ew[[perm[ki], di]]),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.ew.nrows(), self.ew.ncols()],
            data: self.ew.iter().copied().collect(),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.dims.len() != 2 {
            return Err(Error::Dimension(format!("DoA tensor has rank {}", t.dims.len())));
        }
        let ew = Array2::from_shape_vec((t.dims[0], t.dims[1]), t.data.clone())
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(ew)
    }
}

fn check_simplex(values: impl Iterator<Item = f64>, what: impl Fn() -> String) -> Result<()> {
    let mut sum = 0.0;
    for v in values {
        if !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&v) {
            return Err(Error::Numeric(format!("{}: entry {v} outside [0, 1]", what())));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Numeric(format!("{}: sums to {sum}", what())));
    }
    Ok(())
}

fn check_permutation(perm: &[usize], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    if perm.len() != k {
        return Err(Error::Dimension(format!(
            "permutation of length {} for {k} sources",
            perm.len()
        )));
    }
    for &p in perm {
        if p >= k || seen[p] {
            return Err(Error::Dimension(format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(())
}
