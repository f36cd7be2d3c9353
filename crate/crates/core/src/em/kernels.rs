//! Flat-buffer kernels behind the EM operations.
//!
//! Every likelihood term only needs `q_tfd = x_tf^H H_fd^-1 x_tf` and
//! `log|H_fd|`, so the workspace caches those once per SCM update and the
//! E-steps, the power update and the bound all read from the cache.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;

use super::params::ScmField;
use crate::error::{Error, Result};
use crate::signal::Spectrogram;
use crate::spatial::{linalg, SteeringTemplate};

pub(crate) struct Workspace {
    pub t: usize,
    pub f: usize,
    pub m: usize,
    pub d: usize,
    /// Packed outer products `x x^H`, `(t, f, m*m)`.
    pub r: Vec<f64>,
    /// `||x_tf||^2`, `(t, f)`.
    pub power: Vec<f64>,
    /// Packed template SCMs, `(f, d, m*m)`.
    pub g_packed: Vec<f64>,
    pub scm: ScmField,
    /// Packed quadratic-form weights of `H^-1`, `(f, d, m*m)`.
    pub hinv_w: Vec<f64>,
    pub logdet: Vec<f64>,
    /// `x^H H^-1 x`, `(t, f, d)`.
    pub q: Vec<f64>,
}

impl Workspace {
    pub fn new(x: &Spectrogram, tpl: &SteeringTemplate) -> Result<Self> {
        tpl.check_compatible(x)?;
        let (t, f, m, d) = (x.n_frames(), x.n_freqs(), x.n_channels(), tpl.n_dir());
        let mm = m * m;
        let mut r = vec![0.0; t * f * mm];
        let mut power = vec![0.0; t * f];
        let mut xv = vec![Complex64::new(0.0, 0.0); m];
        let values = x.values();
        for ti in 0..t {
            for fi in 0..f {
                for (i, v) in xv.iter_mut().enumerate() {
                    *v = values[[ti, fi, i]];
                }
                let o = ti * f + fi;
                linalg::pack_outer(&xv, &mut r[o * mm..(o + 1) * mm]);
                power[o] = r[o * mm..o * mm + m].iter().sum();
            }
        }
        let mut g_packed = vec![0.0; f * d * mm];
        for fi in 0..f {
            for di in 0..d {
                pack_plain(tpl.scm(fi, di), m, &mut g_packed[(fi * d + di) * mm..][..mm]);
            }
        }
        let mut ws = Self {
            t,
            f,
            m,
            d,
            r,
            power,
            g_packed,
            scm: ScmField::from_templates(tpl),
            hinv_w: vec![0.0; f * d * mm],
            logdet: vec![0.0; f * d],
            q: vec![0.0; t * f * d],
        };
        ws.set_scm(ScmField::from_templates(tpl))?;
        Ok(ws)
    }

    /// Installs new SCMs and refreshes their inverses and the quadratic forms.
    pub fn set_scm(&mut self, scm: ScmField) -> Result<()> {
        if scm.n_freq() != self.f || scm.n_dir() != self.d || scm.n_ch() != self.m {
            return Err(Error::Dimension(
                "SCM field does not match the observation".into(),
            ));
        }
        let mm = self.m * self.m;
        for fi in 0..self.f {
            for di in 0..self.d {
                let (inv, logdet) = linalg::cholesky_inverse(scm.get(fi, di), self.m)
                    .map_err(|e| Error::Numeric(format!("SCM at (f={fi}, d={di}): {e}")))?;
                let o = fi * self.d + di;
                linalg::pack_weights(&inv, self.m, &mut self.hinv_w[o * mm..(o + 1) * mm]);
                self.logdet[o] = logdet;
            }
        }
        self.scm = scm;
        self.refresh_q();
        Ok(())
    }

    fn refresh_q(&mut self) {
        let (f, d, mm) = (self.f, self.d, self.m * self.m);
        for ti in 0..self.t {
            for fi in 0..f {
                let o = ti * f + fi;
                let r = &self.r[o * mm..(o + 1) * mm];
                let w = &self.hinv_w[fi * d * mm..(fi + 1) * d * mm];
                let q = &mut self.q[o * d..(o + 1) * d];
                for (di, qv) in q.iter_mut().enumerate() {
                    *qv = linalg::dot(&w[di * mm..(di + 1) * mm], r).max(0.0);
                }
            }
        }
    }

    pub fn mean_power(&self) -> f64 {
        self.power.iter().sum::<f64>() / (self.power.len() * self.m).max(1) as f64
    }
}

fn pack_plain(a: &[Complex64], m: usize, out: &mut [f64]) {
    for i in 0..m {
        out[i] = a[i * m + i].re;
    }
    let mut p = m;
    for i in 0..m {
        for j in i + 1..m {
            out[p] = a[i * m + j].re;
            out[p + 1] = a[i * m + j].im;
            p += 2;
        }
    }
}

/// Softmax of log scores in place, then floored and renormalized. Returns
/// `false` when no score is finite.
pub(crate) fn normalize_log(scores: &mut [f64], floor: f64) -> bool {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return false;
    }
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    let mut floored = 0.0;
    for s in scores.iter_mut() {
        *s = (*s / sum).max(floor);
        floored += *s;
    }
    for s in scores.iter_mut() {
        *s /= floored;
    }
    true
}

pub(crate) fn e_step_masks(
    ws: &Workspace,
    lambda: &Array3<f64>,
    pi: &Array2<f64>,
    ew: &Array2<f64>,
    floor: f64,
) -> (Array3<f64>, usize) {
    let (t, f, d, m) = (ws.t, ws.f, ws.d, ws.m as f64);
    let k = ew.nrows();
    let ew = ew.as_standard_layout();
    let ew = ew.as_slice().unwrap();
    // sum_d ew_kd log|H_fd|
    let mut a = vec![0.0; f * k];
    for fi in 0..f {
        for ki in 0..k {
            a[fi * k + ki] = linalg::dot(&ew[ki * d..(ki + 1) * d], &ws.logdet[fi * d..(fi + 1) * d]);
        }
    }
    let mut ez = Array3::<f64>::zeros((t, f, k));
    let mut scores = vec![0.0; k];
    let mut fallbacks = 0;
    for ti in 0..t {
        for fi in 0..f {
            let q = &ws.q[(ti * f + fi) * d..][..d];
            for (ki, s) in scores.iter_mut().enumerate() {
                let lam = lambda[[ti, fi, ki]];
                let b = linalg::dot(&ew[ki * d..(ki + 1) * d], q);
                *s = pi[[ti, ki]].ln() - m * lam.ln() - a[fi * k + ki] - b / lam;
            }
            if !normalize_log(&mut scores, floor) {
                fallbacks += 1;
                for (ki, s) in scores.iter_mut().enumerate() {
                    *s = pi[[ti, ki]];
                }
            }
            for (ki, &s) in scores.iter().enumerate() {
                ez[[ti, fi, ki]] = s;
            }
        }
    }
    (ez, fallbacks)
}

pub(crate) fn e_step_doa(
    ws: &Workspace,
    lambda: &Array3<f64>,
    ez: &Array3<f64>,
    phi: &Array1<f64>,
    floor: f64,
) -> Array2<f64> {
    let (t, f, d) = (ws.t, ws.f, ws.d);
    let k = ez.shape()[2];
    // scores_kd = log phi_d - sum_f (sum_t ez) log|H_fd| - sum_tf (ez / lambda) q_tfd
    let mut scores = vec![0.0; k * d];
    let mut weight = vec![0.0; k];
    let mut mass = vec![0.0; f * k];
    for ti in 0..t {
        for fi in 0..f {
            for (ki, w) in weight.iter_mut().enumerate() {
                let z = ez[[ti, fi, ki]];
                *w = z / lambda[[ti, fi, ki]];
                mass[fi * k + ki] += z;
            }
            let q = &ws.q[(ti * f + fi) * d..][..d];
            for (ki, &w) in weight.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let row = &mut scores[ki * d..(ki + 1) * d];
                for (s, &qv) in row.iter_mut().zip(q) {
                    *s -= w * qv;
                }
            }
        }
    }
    for fi in 0..f {
        for ki in 0..k {
            let z = mass[fi * k + ki];
            for di in 0..d {
                scores[ki * d + di] -= z * ws.logdet[fi * d + di];
            }
        }
    }
    let mut ew = Array2::<f64>::zeros((k, d));
    for ki in 0..k {
        let row = &mut scores[ki * d..(ki + 1) * d];
        for (s, p) in row.iter_mut().zip(phi.iter()) {
            *s += p.ln();
        }
        if !normalize_log(row, floor) {
            row.iter_mut().zip(phi.iter()).for_each(|(s, p)| *s = *p);
        }
        for di in 0..d {
            ew[[ki, di]] = row[di];
        }
    }
    ew
}

/// MAP update `H_fd = (c G_fd + sum_{t,k} ez ew x x^H / lambda) / (nu + sum ez ew + M)`.
pub(crate) fn m_step_scm(
    ws: &Workspace,
    ez: &Array3<f64>,
    ew: &Array2<f64>,
    lambda: &Array3<f64>,
    nu: f64,
    prior_factor: f64,
) -> ScmField {
    let (t, f, d, m) = (ws.t, ws.f, ws.d, ws.m);
    let mm = m * m;
    let k = ew.nrows();
    // ew transposed to (d, k)
    let ew_t: Vec<f64> = (0..d).flat_map(|di| (0..k).map(move |ki| ew[[ki, di]])).collect();
    let mut data = vec![Complex64::new(0.0, 0.0); f * d * mm];
    let mut acc = vec![0.0; d * mm];
    let mut count = vec![0.0; d];
    let mut wz = vec![0.0; k];
    let mut zk = vec![0.0; k];
    let mut packed = vec![0.0; mm];
    for fi in 0..f {
        acc.iter_mut().for_each(|v| *v = 0.0);
        count.iter_mut().for_each(|v| *v = 0.0);
        for ti in 0..t {
            for ki in 0..k {
                zk[ki] = ez[[ti, fi, ki]];
                wz[ki] = zk[ki] / lambda[[ti, fi, ki]];
            }
            let r = &ws.r[(ti * f + fi) * mm..][..mm];
            for di in 0..d {
                let e = &ew_t[di * k..(di + 1) * k];
                let w = linalg::dot(&wz, e);
                count[di] += linalg::dot(&zk, e);
                for (a, &rv) in acc[di * mm..(di + 1) * mm].iter_mut().zip(r) {
                    *a += w * rv;
                }
            }
        }
        for di in 0..d {
            let denom = nu + count[di] + m as f64;
            let g = &ws.g_packed[(fi * d + di) * mm..][..mm];
            for ((p, &a), &gv) in packed.iter_mut().zip(&acc[di * mm..(di + 1) * mm]).zip(g) {
                *p = (prior_factor * gv + a) / denom;
            }
            // unpacking yields an exactly Hermitian matrix
            linalg::unpack_hermitian(&packed, m, &mut data[(fi * d + di) * mm..][..mm]);
        }
    }
    ScmField::new(f, d, m, data).expect("shape fixed by workspace")
}

/// `lambda_tfk = max(floor, sum_d ew_kd q_tfd / M)`; also returns how many
/// entries hit the floor.
pub(crate) fn m_step_psd(ws: &Workspace, ew: &Array2<f64>, floor: f64) -> (Array3<f64>, usize) {
    let (t, f, d) = (ws.t, ws.f, ws.d);
    let k = ew.nrows();
    let ew = ew.as_standard_layout();
    let ew = ew.as_slice().unwrap();
    let mut lambda = Array3::<f64>::zeros((t, f, k));
    let mut hits = 0;
    for ti in 0..t {
        for fi in 0..f {
            let q = &ws.q[(ti * f + fi) * d..][..d];
            for ki in 0..k {
                let v = linalg::dot(&ew[ki * d..(ki + 1) * d], q) / ws.m as f64;
                if v < floor {
                    hits += 1;
                }
                lambda[[ti, fi, ki]] = v.max(floor);
            }
        }
    }
    (lambda, hits)
}

pub(crate) fn m_step_priors(ez: &Array3<f64>, ew: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let (t, f, k) = ez.dim();
    let mut pi = Array2::<f64>::zeros((t, k));
    for ti in 0..t {
        for fi in 0..f {
            for ki in 0..k {
                pi[[ti, ki]] += ez[[ti, fi, ki]];
            }
        }
    }
    pi.mapv_inplace(|v| v / f as f64);
    let phi = ew.sum_axis(ndarray::Axis(0)) / ew.nrows() as f64;
    (pi, phi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub expected_loglik: f64,
    pub kl_masks: f64,
    pub kl_doa: f64,
}

impl ElboTerms {
    pub fn value(&self) -> f64 {
        self.expected_loglik - self.kl_masks - self.kl_doa
    }
}

/// `x ln(x / p)` with `0 ln 0 = 0`.
pub(crate) fn kl_term(x: f64, p: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / p).ln()
    }
}

pub(crate) fn elbo_terms(
    ws: &Workspace,
    lambda: &Array3<f64>,
    pi: &Array2<f64>,
    phi: &Array1<f64>,
    ez: &Array3<f64>,
    ew: &Array2<f64>,
) -> Result<ElboTerms> {
    let (t, f, d, m) = (ws.t, ws.f, ws.d, ws.m as f64);
    let k = ew.nrows();
    let ew_s = ew.as_standard_layout();
    let ew_s = ew_s.as_slice().unwrap();
    let mut a = vec![0.0; f * k];
    for fi in 0..f {
        for ki in 0..k {
            a[fi * k + ki] = linalg::dot(&ew_s[ki * d..(ki + 1) * d], &ws.logdet[fi * d..(fi + 1) * d]);
        }
    }
    let c = -m * PI.ln();
    let mut expected = 0.0;
    let mut kl_masks = 0.0;
    for ti in 0..t {
        let mut frame = 0.0;
        for fi in 0..f {
            let q = &ws.q[(ti * f + fi) * d..][..d];
            for ki in 0..k {
                let z = ez[[ti, fi, ki]];
                if z == 0.0 {
                    continue;
                }
                let lam = lambda[[ti, fi, ki]];
                let b = linalg::dot(&ew_s[ki * d..(ki + 1) * d], q);
                let term = z * (c - m * lam.ln() - a[fi * k + ki] - b / lam);
                let kl = kl_term(z, pi[[ti, ki]]);
                if !term.is_finite() || !kl.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite bound term at (t={ti}, f={fi}, k={ki}): loglik {term}, kl {kl}"
                    )));
                }
                frame += term;
                kl_masks += kl;
            }
        }
        expected += frame;
    }
    let mut kl_doa = 0.0;
    for ki in 0..k {
        for di in 0..d {
            let v = kl_term(ew[[ki, di]], phi[di]);
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite DoA divergence at (k={ki}, d={di})"
                )));
            }
            kl_doa += v;
        }
    }
    Ok(ElboTerms {
        expected_loglik: expected,
        kl_masks,
        kl_doa,
    })
}

/// `sum_fd log IW(H_fd; nu, c G_fd)` up to its normalizing constant.
pub(crate) fn log_scm_prior(ws: &Workspace, nu: f64, prior_factor: f64) -> f64 {
    let (f, d, m) = (ws.f, ws.d, ws.m);
    let mm = m * m;
    let mut total = 0.0;
    for o in 0..f * d {
        let trace = linalg::dot(
            &ws.hinv_w[o * mm..(o + 1) * mm],
            &ws.g_packed[o * mm..(o + 1) * mm],
        );
        total += -(nu + m as f64) * ws.logdet[o] - prior_factor * trace;
    }
    total
}
