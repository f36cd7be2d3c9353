//! Small dense Hermitian matrices stored row-major in `&[Complex64]`.
//!
//! The packed real layout used by the hot loops has `m * m` entries: the
//! `m` diagonal values, then `(re, im)` of every upper-triangle entry
//! `(i, j)`, `i < j`, in row order. With the off-diagonal part of the
//! weights doubled (`pack_weights`) and the outer product packed plainly
//! (`pack_outer`), `x^H A x` is a plain dot product of the two.

use num_complex::Complex64;

use crate::error::{Error, Result};

pub fn identity(m: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); m * m];
    for i in 0..m {
        out[i * m + i] = Complex64::new(1.0, 0.0);
    }
    out
}

/// `A <- (A + A^H) / 2`.
pub fn hermitize(a: &mut [Complex64], m: usize) {
    for i in 0..m {
        a[i * m + i].im = 0.0;
        for j in i + 1..m {
            let avg = (a[i * m + j] + a[j * m + i].conj()) * 0.5;
            a[i * m + j] = avg;
            a[j * m + i] = avg.conj();
        }
    }
}

/// Inverse and log-determinant of a Hermitian positive definite matrix via
/// Cholesky.
pub fn cholesky_inverse(a: &[Complex64], m: usize) -> Result<(Vec<Complex64>, f64)> {
    let zero = Complex64::new(0.0, 0.0);
    let mut l = vec![zero; m * m];
    for j in 0..m {
        let mut diag = a[j * m + j].re;
        for k in 0..j {
            diag -= l[j * m + k].norm_sqr();
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::Numeric(format!(
                "matrix is not positive definite (pivot {j} = {diag:e})"
            )));
        }
        let ljj = diag.sqrt();
        l[j * m + j] = Complex64::new(ljj, 0.0);
        for i in j + 1..m {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= l[i * m + k] * l[j * m + k].conj();
            }
            l[i * m + j] = s / ljj;
        }
    }
    let logdet = 2.0 * (0..m).map(|j| l[j * m + j].re.ln()).sum::<f64>();

    // L^{-1} by forward substitution, column by column.
    let mut linv = vec![zero; m * m];
    for c in 0..m {
        for i in c..m {
            let mut s = if i == c { Complex64::new(1.0, 0.0) } else { zero };
            for k in c..i {
                s -= l[i * m + k] * linv[k * m + c];
            }
            linv[i * m + c] = s / l[i * m + i].re;
        }
    }
    let mut inv = vec![zero; m * m];
    for i in 0..m {
        for j in 0..m {
            let mut s = zero;
            for k in i.max(j)..m {
                s += linv[k * m + i].conj() * linv[k * m + j];
            }
            inv[i * m + j] = s;
        }
    }
    hermitize(&mut inv, m);
    Ok((inv, logdet))
}

/// `x^H A x` for Hermitian `A`; the (rounding-level) imaginary part is dropped.
pub fn quad_form(a: &[Complex64], x: &[Complex64]) -> f64 {
    let m = x.len();
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..m {
        let mut row = Complex64::new(0.0, 0.0);
        for j in 0..m {
            row += a[i * m + j] * x[j];
        }
        acc += x[i].conj() * row;
    }
    acc.re
}

pub fn trace_product(a: &[Complex64], b: &[Complex64], m: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..m {
        for j in 0..m {
            acc += (a[i * m + j] * b[j * m + i]).re;
        }
    }
    acc
}

pub fn pack_weights(a: &[Complex64], m: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * m);
    for i in 0..m {
        out[i] = a[i * m + i].re;
    }
    let mut p = m;
    for i in 0..m {
        for j in i + 1..m {
            let v = a[i * m + j];
            out[p] = 2.0 * v.re;
            out[p + 1] = 2.0 * v.im;
            p += 2;
        }
    }
}

pub fn pack_outer(x: &[Complex64], out: &mut [f64]) {
    let m = x.len();
    debug_assert_eq!(out.len(), m * m);
    for i in 0..m {
        out[i] = x[i].norm_sqr();
    }
    let mut p = m;
    for i in 0..m {
        for j in i + 1..m {
            let v = x[i] * x[j].conj();
            out[p] = v.re;
            out[p + 1] = v.im;
            p += 2;
        }
    }
}

/// Inverse of `pack_outer`'s layout (no doubling) back to a dense matrix.
pub fn unpack_hermitian(packed: &[f64], m: usize, out: &mut [Complex64]) {
    for i in 0..m {
        out[i * m + i] = Complex64::new(packed[i], 0.0);
    }
    let mut p = m;
    for i in 0..m {
        for j in i + 1..m {
            let v = Complex64::new(packed[p], packed[p + 1]);
            out[i * m + j] = v;
            out[j * m + i] = v.conj();
            p += 2;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pd(m: usize, rng: &mut impl Rng) -> Vec<Complex64> {
        let b: Vec<Complex64> = (0..m * m)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let mut a = vec![Complex64::new(0.0, 0.0); m * m];
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    a[i * m + j] += b[i * m + k] * b[j * m + k].conj();
                }
            }
            a[i * m + i] += 0.1;
        }
        a
    }

    #[test]
    fn cholesky_inverse_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for m in 1..=5 {
            let a = random_pd(m, &mut rng);
            let (inv, logdet) = cholesky_inverse(&a, m).unwrap();
            let dense = DMatrix::from_row_slice(m, m, &a);
            let oracle = dense.clone().lu().try_inverse().unwrap();
            for i in 0..m {
                for j in 0..m {
                    assert!((inv[i * m + j] - oracle[(i, j)]).norm() < 1e-10);
                }
            }
            let eig = dense.symmetric_eigenvalues();
            let slow: f64 = eig.iter().map(|v| v.ln()).sum();
            assert!((logdet - slow).abs() < 1e-10);
        }
    }

    #[test]
    fn non_pd_is_rejected() {
        let a = vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(2.0, 0.0),
            Complex64::new(2.0, 0.0),
            Complex64::new(1.0, 0.0),
        ];
        assert!(matches!(cholesky_inverse(&a, 2), Err(Error::Numeric(_))));
    }

    #[test]
    fn packed_dot_equals_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for m in 1..=4 {
            let a = random_pd(m, &mut rng);
            let x: Vec<Complex64> = (0..m)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let mut w = vec![0.0; m * m];
            let mut r = vec![0.0; m * m];
            pack_weights(&a, m, &mut w);
            pack_outer(&x, &mut r);
            assert!((dot(&w, &r) - quad_form(&a, &x)).abs() < 1e-12);

            let mut dense = vec![Complex64::new(0.0, 0.0); m * m];
            unpack_hermitian(&r, m, &mut dense);
            for i in 0..m {
                for j in 0..m {
                    assert!((dense[i * m + j] - x[i] * x[j].conj()).norm() < 1e-15);
                }
            }
        }
    }
}
