use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;

use super::linalg::quad_form;
use super::templates::SteeringTemplate;
use crate::em::MaskPosterior;
use crate::error::{Error, Result};
use crate::signal::Spectrogram;

/// Zero-mean circular complex Gaussian log density
/// `-M log(pi) - log|S| - x^H S^-1 x`.
pub fn log_cgauss(x: &[Complex64], sigma_inv: &[Complex64], logdet: f64) -> Result<f64> {
    let m = x.len();
    if sigma_inv.len() != m * m {
        return Err(Error::Dimension(format!(
            "covariance has {} entries for a {m}-vector",
            sigma_inv.len()
        )));
    }
    if x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite())
        || sigma_inv.iter().any(|v| !v.re.is_finite() || !v.im.is_finite())
        || !logdet.is_finite()
    {
        return Err(Error::Numeric("non-finite input to log density".into()));
    }
    Ok(-(m as f64) * PI.ln() - logdet - quad_form(sigma_inv, x))
}

/// Mask-weighted template log likelihoods, `(k, d)`:
/// `omega_kd = sum_{t,f} z_tfk log N_c(x_tf; 0, G_fd)`.
pub fn omega_features(x: &Spectrogram, z: &MaskPosterior, tpl: &SteeringTemplate) -> Result<Array2<f64>> {
    let quads = tpl.quad_forms(x)?;
    omega_from_quads(&quads, z, tpl)
}

/// Same as [`omega_features`] with precomputed `x^H G^-1 x` laid out `(t, f, d)`.
pub fn omega_from_quads(quads: &[f64], z: &MaskPosterior, tpl: &SteeringTemplate) -> Result<Array2<f64>> {
    let (t_len, f_len, k_len) = z.dims();
    let d_len = tpl.n_dir();
    if f_len != tpl.n_freq() || quads.len() != t_len * f_len * d_len {
        return Err(Error::Dimension(format!(
            "mask is {t_len}x{f_len}, templates have {} bins and {} quad forms",
            tpl.n_freq(),
            quads.len()
        )));
    }
    let const_term = -(tpl.n_ch() as f64) * PI.ln();
    let ez = z.values();
    let mut omega = Array2::<f64>::zeros((k_len, d_len));
    let mut row = vec![0.0; d_len];
    for t in 0..t_len {
        for f in 0..f_len {
            let q = &quads[(t * f_len + f) * d_len..][..d_len];
            for (d, r) in row.iter_mut().enumerate() {
                *r = const_term - tpl.logdet(f, d) - q[d];
            }
            for k in 0..k_len {
                let w = ez[[t, f, k]];
                if w == 0.0 {
                    continue;
                }
                for (d, r) in row.iter().enumerate() {
                    omega[[k, d]] += w * r;
                }
            }
        }
    }
    Ok(omega)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::{build_templates, ArrayGeometry, DirectionGrid};
    use nalgebra::{DMatrix, DVector};
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn templates(n_freq: usize) -> SteeringTemplate {
        build_templates(
            &ArrayGeometry::default(),
            &DirectionGrid::default(),
            n_freq,
            8000,
            1e-2,
        )
        .unwrap()
    }

    #[test]
    fn log_density_closed_forms() {
        let inv = vec![Complex64::new(1.0, 0.0)];
        let zero = [Complex64::new(0.0, 0.0)];
        assert!((log_cgauss(&zero, &inv, 0.0).unwrap() + PI.ln()).abs() < 1e-15);
        let unit = [Complex64::new(0.6, 0.8)];
        assert!((log_cgauss(&unit, &inv, 0.0).unwrap() - (-PI.ln() - 1.0)).abs() < 1e-15);

        let inv3 = crate::spatial::linalg::identity(3);
        let zero3 = [Complex64::new(0.0, 0.0); 3];
        let v = log_cgauss(&zero3, &inv3, 0.7).unwrap();
        assert!((v - (-3.0 * PI.ln() - 0.7)).abs() < 1e-14);

        let bad = [Complex64::new(f64::NAN, 0.0)];
        assert!(matches!(log_cgauss(&bad, &inv, 0.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn log_density_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for m in 1..=4 {
            let b = DMatrix::from_fn(m, m, |_, _| {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let sigma = &b * b.adjoint() + DMatrix::identity(m, m) * Complex64::new(0.3, 0.0);
            let x = DVector::from_fn(m, |_, _| {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let inv = sigma.clone().lu().try_inverse().unwrap();
            let logdet = sigma.determinant().re.ln();
            let oracle = -(m as f64) * PI.ln() - logdet - (x.adjoint() * &inv * &x)[(0, 0)].re;
            let inv_rows: Vec<Complex64> = inv.transpose().iter().cloned().collect();
            let got = log_cgauss(x.as_slice(), &inv_rows, logdet).unwrap();
            assert!((got - oracle).abs() <= 1e-12, "m={m}: {got} vs {oracle}");
        }
    }

    fn plane_wave(tpl: &SteeringTemplate, d_true: usize, t_len: usize, seed: u64) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f_len, m) = (tpl.n_freq(), tpl.n_ch());
        let mut values = Array3::<Complex64>::zeros((t_len, f_len, m));
        for t in 0..t_len {
            for f in 0..f_len {
                let s = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                for (i, h) in tpl.steering(f, d_true).iter().enumerate() {
                    values[[t, f, i]] = h * s;
                }
            }
        }
        Spectrogram::new(values, 8000, 2 * (f_len - 1), (f_len - 1) / 2).unwrap()
    }

    #[test]
    fn omega_zero_mask_and_single_source() {
        let tpl = templates(17);
        let d_true = 13;
        let x = plane_wave(&tpl, d_true, 6, 4);
        let mut ez = Array3::<f64>::zeros((6, 17, 2));
        ez.slice_mut(ndarray::s![.., .., 0]).fill(1.0);
        let z = MaskPosterior::new(ez).unwrap();
        let omega = omega_features(&x, &z, &tpl).unwrap();
        assert!(omega.row(1).iter().all(|&v| v == 0.0));

        // brute-force definition and argmax over the whole grid
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for d in 0..tpl.n_dir() {
            let mut sum = 0.0;
            for t in 0..6 {
                for f in 0..17 {
                    let xv: Vec<Complex64> = x.bin(t, f).to_vec();
                    sum += log_cgauss(&xv, tpl.scm_inverse(f, d), tpl.logdet(f, d)).unwrap();
                }
            }
            assert!((omega[[0, d]] - sum).abs() <= 1e-9 * sum.abs());
            if sum > best.0 {
                best = (sum, d);
            }
        }
        assert_eq!(best.1, d_true);
        let argmax = (0..tpl.n_dir())
            .max_by(|&a, &b| omega[[0, a]].total_cmp(&omega[[0, b]]))
            .unwrap();
        assert_eq!(argmax, d_true);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn density_peaks_where_steering_projection_peaks(
            seed in any::<u64>(), f in 1usize..33
        ) {
            let tpl = templates(33);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<Complex64> = (0..tpl.n_ch())
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let by_density = (0..tpl.n_dir())
                .map(|d| tpl.log_density(f, d, &x))
                .collect::<Vec<_>>();
            let by_projection = (0..tpl.n_dir())
                .map(|d| {
                    tpl.steering(f, d)
                        .iter()
                        .zip(&x)
                        .map(|(h, v)| h.conj() * v)
                        .sum::<Complex64>()
                        .norm_sqr()
                })
                .collect::<Vec<_>>();
            let best_density = by_density.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let best_proj = by_projection.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            // every direction achieving the projection maximum achieves the density maximum
            for d in 0..tpl.n_dir() {
                if by_projection[d] >= best_proj * (1.0 - 1e-12) {
                    prop_assert!(by_density[d] >= best_density - 1e-8 * best_density.abs());
                }
            }
        }
    }
}
