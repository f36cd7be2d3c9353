//! EM updates against direct dense-matrix evaluations.

mod common;

use cgmmsep::em::*;
use cgmmsep::spatial::{bin_frequency, steering_vector};
use common::*;
use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use proptest::prelude::*;

fn cfg(k: usize, m: usize) -> EmConfig {
    EmConfig {
        n_sources: k,
        ..EmConfig::for_channels(m)
    }
}

fn assert_close<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>, tol: f64) {
    for (x, y) in a.into_iter().zip(b) {
        assert!(rel_err(*x, *y) <= tol, "{x} vs {y}: rel {}", rel_err(*x, *y));
    }
}

#[test]
fn mask_e_step_matches_enumeration() {
    let mut seed = 0;
    for t in 1..=3 {
        for k in 1..=3 {
            for d in 1..=3 {
                seed += 1;
                let inst = instance(seed, t, 3, d, k);
                let got = e_step_masks(&inst.x, &inst.tpl, &inst.params, &inst.ew, &cfg(k, 3)).unwrap();
                let want = brute_masks(&inst, inst.ew.values());
                assert_close(got.values(), &want, 1e-10);
            }
        }
    }
}

#[test]
fn doa_e_step_matches_enumeration() {
    let mut seed = 100;
    for t in 1..=3 {
        for k in 1..=3 {
            for d in 1..=3 {
                seed += 1;
                let inst = instance(seed, t, 2, d, k);
                let got = e_step_doa(&inst.x, &inst.tpl, &inst.params, &inst.ez, &cfg(k, 2)).unwrap();
                let want = brute_doa(&inst, inst.ez.values());
                assert_close(got.values(), &want, 1e-10);
            }
        }
    }
}

#[test]
fn scm_update_matches_naive_sum() {
    for (seed, scale) in [(7, PriorScale::Template), (8, PriorScale::NuMinusMTemplate)] {
        let inst = instance(seed, 3, 3, 3, 2);
        let nu = inst.params.hyper.nu;
        let got = m_step_scm(
            &inst.x,
            &inst.tpl,
            &inst.ez,
            &inst.ew,
            &inst.params.lambda,
            nu,
            scale,
        )
        .unwrap();
        let (t_len, f_len, k_len) = inst.params.lambda.dim();
        let m = inst.x.n_channels();
        let c = match scale {
            PriorScale::Template => 1.0,
            PriorScale::NuMinusMTemplate => nu - m as f64,
        };
        let geom = geometry(m);
        for f in 0..f_len {
            for d in 0..inst.tpl.n_dir() {
                let h = steering_vector(
                    &geom,
                    inst.tpl.grid().azimuth(d),
                    bin_frequency(f, f_len, SAMPLE_RATE),
                );
                let hv = DMatrix::from_fn(m, 1, |i, _| h[i]);
                let g = &hv * hv.adjoint() + DMatrix::identity(m, m) * Complex64::new(1e-2, 0.0);
                let mut num = g * Complex64::new(c, 0.0);
                let mut count = 0.0;
                for t in 0..t_len {
                    let x = bin_vector(&inst.x, t, f);
                    for k in 0..k_len {
                        let w = inst.ez.values()[[t, f, k]] * inst.ew.values()[[k, d]];
                        num += &x * x.adjoint() * Complex64::new(w / inst.params.lambda[[t, f, k]], 0.0);
                        count += w;
                    }
                }
                let want = num / Complex64::new(nu + count + m as f64, 0.0);
                let have = dense(got.get(f, d), m);
                let scale = want.iter().map(|v| v.norm()).fold(0.0, f64::max);
                assert!((have - &want).iter().all(|v| v.norm() <= 1e-12 * scale));
            }
        }
    }
}

#[test]
fn power_update_matches_naive_sum() {
    let inst = instance(9, 3, 3, 3, 3);
    let floor = 1e-9;
    let got = m_step_psd(&inst.x, &inst.tpl, &inst.ew, &inst.params.scm, floor).unwrap();
    let (t_len, f_len, k_len) = got.dim();
    let m = inst.x.n_channels();
    for t in 0..t_len {
        for f in 0..f_len {
            let x = bin_vector(&inst.x, t, f);
            for k in 0..k_len {
                let want: f64 = (0..inst.tpl.n_dir())
                    .map(|d| {
                        let inv = h_dense(&inst, f, d).lu().try_inverse().unwrap();
                        inst.ew.values()[[k, d]] * (x.adjoint() * inv * &x)[(0, 0)].re
                    })
                    .sum::<f64>()
                    / m as f64;
                assert!(rel_err(got[[t, f, k]], want.max(floor)) <= 1e-12);
            }
        }
    }
}

#[test]
fn power_floor_applies_to_silent_bins() {
    let mut inst = instance(10, 2, 2, 2, 2);
    inst.x = spectrogram(Array3::zeros((2, 3, 2)));
    let got = m_step_psd(&inst.x, &inst.tpl, &inst.ew, &inst.params.scm, 0.25).unwrap();
    assert!(got.iter().all(|&v| v == 0.25));
}

#[test]
fn prior_updates_are_posterior_means() {
    let inst = instance(11, 3, 2, 3, 3);
    let (pi, phi) = m_step_priors(&inst.ez, &inst.ew);
    let (t_len, f_len, k_len) = inst.ez.dims();
    for t in 0..t_len {
        for k in 0..k_len {
            let want: f64 = (0..f_len).map(|f| inst.ez.values()[[t, f, k]]).sum::<f64>() / f_len as f64;
            assert!(rel_err(pi[[t, k]], want) <= 1e-12);
        }
    }
    for d in 0..phi.len() {
        let want: f64 = (0..k_len).map(|k| inst.ew.values()[[k, d]]).sum::<f64>() / k_len as f64;
        assert!(rel_err(phi[d], want) <= 1e-12);
    }
}

#[test]
fn prior_updates_trivial_cases() {
    let inst = instance(12, 3, 2, 3, 2);
    // one frequency: pi is the mask itself
    let one = MaskPosterior::new(inst.ez.values().slice(ndarray::s![.., 0..1, ..]).to_owned()).unwrap();
    let (pi, _) = m_step_priors(&one, &inst.ew);
    assert_close(pi.iter(), one.values().iter(), 1e-15);
    // one source: phi is its DoA posterior
    let single = MaskPosterior::uniform(3, 3, 1);
    let row = DoaPosterior::new(inst.ew.values().slice(ndarray::s![0..1, ..]).to_owned()).unwrap();
    let (pi, phi) = m_step_priors(&single, &row);
    assert!(pi.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    assert_close(phi.iter(), row.values().iter(), 1e-15);
    let (pi, _) = m_step_priors(&MaskPosterior::uniform(4, 3, 4), &DoaPosterior::uniform(4, 3));
    assert!(pi.iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn elbo_matches_term_by_term_sum() {
    for (seed, k, d) in [(20, 2, 3), (21, 3, 2), (22, 3, 3)] {
        let inst = instance(seed, 3, 3, d, k);
        let got = elbo_terms(&inst.x, &inst.tpl, &inst.params, &inst.ez, &inst.ew).unwrap();
        let (t_len, f_len, _) = inst.ez.dims();
        let (ez, ew, p) = (inst.ez.values(), inst.ew.values(), &inst.params);
        let mut loglik = 0.0;
        let mut kl_z = 0.0;
        for t in 0..t_len {
            for f in 0..f_len {
                let x = bin_vector(&inst.x, t, f);
                for kk in 0..k {
                    let lam = Complex64::new(p.lambda[[t, f, kk]], 0.0);
                    for dd in 0..d {
                        loglik += ez[[t, f, kk]]
                            * ew[[kk, dd]]
                            * log_cgauss_dense(&x, &(h_dense(&inst, f, dd) * lam));
                    }
                    kl_z += ez[[t, f, kk]] * (ez[[t, f, kk]] / p.pi[[t, kk]]).ln();
                }
            }
        }
        let kl_w: f64 = (0..k)
            .flat_map(|kk| (0..d).map(move |dd| (kk, dd)))
            .map(|(kk, dd)| ew[[kk, dd]] * (ew[[kk, dd]] / p.phi[dd]).ln())
            .sum();
        assert!(rel_err(got.expected_loglik, loglik) <= 1e-10);
        assert!(rel_err(got.kl_masks, kl_z) <= 1e-10);
        assert!(rel_err(got.kl_doa, kl_w) <= 1e-10);
        assert!(rel_err(got.value(), loglik - kl_z - kl_w) <= 1e-10);
    }
}

#[test]
fn elbo_single_component_is_log_likelihood() {
    let inst = instance(23, 3, 2, 1, 1);
    let value = elbo(&inst.x, &inst.tpl, &inst.params, &inst.ez, &inst.ew).unwrap();
    let mut want = 0.0;
    for t in 0..3 {
        for f in 0..3 {
            let lam = Complex64::new(inst.params.lambda[[t, f, 0]], 0.0);
            want += log_cgauss_dense(&bin_vector(&inst.x, t, f), &(h_dense(&inst, f, 0) * lam));
        }
    }
    assert!(rel_err(value, want) <= 1e-10);
}

#[test]
fn kl_terms_vanish_when_posteriors_equal_priors() {
    let mut inst = instance(24, 3, 2, 3, 2);
    let (t_len, f_len, k_len) = inst.ez.dims();
    let ez = Array3::from_shape_fn((t_len, f_len, k_len), |(t, _, k)| inst.params.pi[[t, k]]);
    let ew = Array2::from_shape_fn((k_len, inst.params.phi.len()), |(_, d)| inst.params.phi[d]);
    inst.ez = MaskPosterior::new(ez).unwrap();
    inst.ew = DoaPosterior::new(ew).unwrap();
    let terms = elbo_terms(&inst.x, &inst.tpl, &inst.params, &inst.ez, &inst.ew).unwrap();
    assert_eq!(terms.kl_masks, 0.0);
    assert_eq!(terms.kl_doa, 0.0);
}

#[test]
fn zero_posterior_entries_contribute_nothing() {
    let mut inst = instance(25, 2, 2, 2, 2);
    let mut ez = inst.ez.values().clone();
    for t in 0..2 {
        for f in 0..3 {
            ez[[t, f, 0]] = 1.0;
            ez[[t, f, 1]] = 0.0;
        }
    }
    inst.ez = MaskPosterior::new(ez).unwrap();
    let terms = elbo_terms(&inst.x, &inst.tpl, &inst.params, &inst.ez, &inst.ew).unwrap();
    assert!(terms.kl_masks.is_finite() && terms.expected_loglik.is_finite());
}

#[test]
fn scm_prior_matches_inverse_wishart_kernel() {
    let inst = instance(26, 2, 3, 2, 2);
    let m = 3;
    let nu = inst.params.hyper.nu;
    let got = log_scm_prior(&inst.x, &inst.tpl, &inst.params, PriorScale::Template).unwrap();
    let mut want = 0.0;
    for f in 0..3 {
        for d in 0..2 {
            let h = h_dense(&inst, f, d);
            let g = dense(inst.tpl.scm(f, d), m);
            let inv = h.clone().lu().try_inverse().unwrap();
            want += -(nu + m as f64) * h.clone().lu().determinant().re.ln() - (g * inv).trace().re;
        }
    }
    assert!(rel_err(got, want) <= 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn e_steps_return_normalized_posteriors(seed in 0u64..10_000, t in 1usize..4, k in 1usize..4, d in 1usize..4) {
        let inst = instance(seed, t, 2, d, k);
        let ez = e_step_masks(&inst.x, &inst.tpl, &inst.params, &inst.ew, &cfg(k, 2)).unwrap();
        for lane in ez.values().lanes(ndarray::Axis(2)) {
            prop_assert!((lane.sum() - 1.0).abs() < 1e-9);
            prop_assert!(lane.iter().all(|&v| v >= 0.0));
        }
        let ew = e_step_doa(&inst.x, &inst.tpl, &inst.params, &inst.ez, &cfg(k, 2)).unwrap();
        for row in ew.values().rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn e_steps_match_enumeration(seed in 0u64..10_000, t in 1usize..4, k in 1usize..4, d in 1usize..4) {
        let inst = instance(seed, t, 2, d, k);
        let ez = e_step_masks(&inst.x, &inst.tpl, &inst.params, &inst.ew, &cfg(k, 2)).unwrap();
        let want = brute_masks(&inst, inst.ew.values());
        for (a, b) in ez.values().iter().zip(&want) {
            prop_assert!(rel_err(*a, *b) <= 1e-10);
        }
        let ew = e_step_doa(&inst.x, &inst.tpl, &inst.params, &inst.ez, &cfg(k, 2)).unwrap();
        let want = brute_doa(&inst, inst.ez.values());
        for (a, b) in ew.values().iter().zip(&want) {
            prop_assert!(rel_err(*a, *b) <= 1e-10);
        }
    }
}
