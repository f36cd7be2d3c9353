//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use cgmmsep::em::{DoaPosterior, MaskPosterior, ModelParams, ScmField};
use cgmmsep::signal::Spectrogram;
use cgmmsep::spatial::{build_templates, ArrayGeometry, DirectionGrid, Hyperparams, SteeringTemplate};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const SAMPLE_RATE: u32 = 8000;

/// A tiny problem: `t` frames, three bins (window of 4), `m` channels,
/// `d` directions and `k` sources, with random parameters and posteriors.
pub struct Instance {
    pub x: Spectrogram,
    pub tpl: SteeringTemplate,
    pub params: ModelParams,
    pub ez: MaskPosterior,
    pub ew: DoaPosterior,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn cnormal<R: Rng>(rng: &mut R) -> Complex64 {
    Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|a| a / s).collect()
}

pub fn geometry(m: usize) -> ArrayGeometry {
    ArrayGeometry::uniform_circular(m, 0.08)
}

pub fn spectrogram(values: Array3<Complex64>) -> Spectrogram {
    let f = values.shape()[1];
    Spectrogram::new(values, SAMPLE_RATE, 2 * (f - 1), 1).unwrap()
}

pub fn instance(seed: u64, t: usize, m: usize, d: usize, k: usize) -> Instance {
    let mut r = rng(seed);
    let f = 3;
    let grid = DirectionGrid::new(r.gen_range(0.0..60.0), 360.0 / d as f64, d).unwrap();
    let tpl = build_templates(&geometry(m), &grid, f, SAMPLE_RATE, 1e-2).unwrap();
    let x = spectrogram(Array3::from_shape_fn((t, f, m), |_| cnormal(&mut r)));
    let mut scm = Vec::with_capacity(f * d * m * m);
    for _ in 0..f * d {
        let a = DMatrix::from_fn(m, m, |_, _| cnormal(&mut r));
        let h = &a * a.adjoint() + DMatrix::identity(m, m) * Complex64::new(0.5, 0.0);
        for i in 0..m {
            for j in 0..m {
                scm.push(h[(i, j)]);
            }
        }
    }
    let lambda = Array3::from_shape_fn((t, f, k), |_| r.gen_range(0.3..2.0));
    let pi = Array2::from_shape_vec((t, k), (0..t).flat_map(|_| simplex(&mut r, k)).collect()).unwrap();
    let phi = Array1::from(simplex(&mut r, d));
    let ez =
        Array3::from_shape_vec((t, f, k), (0..t * f).flat_map(|_| simplex(&mut r, k)).collect()).unwrap();
    let ew = Array2::from_shape_vec((k, d), (0..k).flat_map(|_| simplex(&mut r, d)).collect()).unwrap();
    Instance {
        x,
        tpl,
        params: ModelParams {
            scm: ScmField::new(f, d, m, scm).unwrap(),
            lambda,
            pi,
            phi,
            hyper: Hyperparams::for_channels(m),
        },
        ez: MaskPosterior::new(ez).unwrap(),
        ew: DoaPosterior::new(ew).unwrap(),
    }
}

pub fn dense(a: &[Complex64], m: usize) -> DMatrix<Complex64> {
    DMatrix::from_fn(m, m, |i, j| a[i * m + j])
}

pub fn bin_vector(x: &Spectrogram, t: usize, f: usize) -> DMatrix<Complex64> {
    let b = x.bin(t, f);
    DMatrix::from_fn(b.len(), 1, |i, _| b[i])
}

/// Zero-mean circular complex Gaussian density, evaluated directly.
pub fn cgauss_density(x: &DMatrix<Complex64>, cov: &DMatrix<Complex64>) -> f64 {
    let m = cov.nrows();
    let inv = cov.clone().lu().try_inverse().expect("invertible covariance");
    let quad = (x.adjoint() * inv * x)[(0, 0)].re;
    let det = cov.clone().lu().determinant().re;
    (-quad).exp() / (std::f64::consts::PI.powi(m as i32) * det)
}

pub fn log_cgauss_dense(x: &DMatrix<Complex64>, cov: &DMatrix<Complex64>) -> f64 {
    let m = cov.nrows();
    let inv = cov.clone().lu().try_inverse().expect("invertible covariance");
    let quad = (x.adjoint() * inv * x)[(0, 0)].re;
    let det = cov.clone().lu().determinant().re;
    -(m as f64) * std::f64::consts::PI.ln() - det.ln() - quad
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Applies the posterior floor the way the E-steps do: clamp, then renormalize.
pub fn floor_and_normalize(w: &mut [f64], floor: f64) {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v = (*v / s).max(floor));
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
}

/// Posterior floor used by the brute-force E-step oracles.
pub const BRUTE_FLOOR: f64 = 1e-12;

pub fn h_dense(inst: &Instance, f: usize, d: usize) -> DMatrix<Complex64> {
    let m = inst.x.n_channels();
    dense(inst.params.scm.get(f, d), m)
}

/// Unnormalized mask weights `pi prod_d N(x; 0, lambda H)^ew`, one bin at a time.
pub fn brute_masks(inst: &Instance, ew: &Array2<f64>) -> Array3<f64> {
    let (t_len, f_len, k_len) = inst.params.lambda.dim();
    let d_len = ew.ncols();
    let mut out = Array3::zeros((t_len, f_len, k_len));
    for t in 0..t_len {
        for f in 0..f_len {
            let x = bin_vector(&inst.x, t, f);
            let mut w: Vec<f64> = (0..k_len)
                .map(|k| {
                    let lam = Complex64::new(inst.params.lambda[[t, f, k]], 0.0);
                    (0..d_len).fold(inst.params.pi[[t, k]], |acc, d| {
                        acc * cgauss_density(&x, &(h_dense(inst, f, d) * lam)).powf(ew[[k, d]])
                    })
                })
                .collect();
            floor_and_normalize(&mut w, BRUTE_FLOOR);
            for k in 0..k_len {
                out[[t, f, k]] = w[k];
            }
        }
    }
    out
}

pub fn brute_doa(inst: &Instance, ez: &Array3<f64>) -> Array2<f64> {
    let (t_len, f_len, k_len) = ez.dim();
    let d_len = inst.params.phi.len();
    let mut out = Array2::zeros((k_len, d_len));
    for k in 0..k_len {
        let mut w: Vec<f64> = (0..d_len)
            .map(|d| {
                let mut acc = inst.params.phi[d];
                for t in 0..t_len {
                    for f in 0..f_len {
                        let x = bin_vector(&inst.x, t, f);
                        let lam = Complex64::new(inst.params.lambda[[t, f, k]], 0.0);
                        acc *= cgauss_density(&x, &(h_dense(inst, f, d) * lam)).powf(ez[[t, f, k]]);
                    }
                }
                acc
            })
            .collect();
        floor_and_normalize(&mut w, BRUTE_FLOOR);
        for d in 0..d_len {
            out[[k, d]] = w[d];
        }
    }
    out
}
