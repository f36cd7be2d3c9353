//! Mask and localization networks with hand-written backward passes.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use crate::em::{DoaPosterior, MaskPosterior};
use crate::error::{Error, Result};

/// Maps a `(t, f)` log-magnitude spectrogram to masks `(t, f, k)`.
pub trait MaskNetwork {
    type Cache;

    fn n_freqs(&self) -> usize;
    fn n_sources(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn forward(&self, features: &Array2<f64>) -> Result<(MaskPosterior, Self::Cache)>;
    /// Parameter gradient given `d loss / d ez`.
    fn backward(&self, cache: &Self::Cache, grad_ez: &Array3<f64>) -> Vec<f64>;
}

/// Maps spatial features `omega (k, d)` to DoA posteriors `(k, d)`.
pub trait LocalizationMap {
    type Cache;

    fn n_dirs(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn forward(&self, omega: &Array2<f64>, n_bins: usize) -> Result<(DoaPosterior, Self::Cache)>;
    /// Parameter gradient and `d loss / d omega` given `d loss / d ew`.
    fn backward(&self, cache: &Self::Cache, grad_ew: &Array2<f64>) -> (Vec<f64>, Array2<f64>);
}

fn check_features(features: &Array2<f64>, n_freqs: usize) -> Result<()> {
    if features.ncols() != n_freqs || features.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "network expects {n_freqs} bins, features are {}x{}",
            features.nrows(),
            features.ncols()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite network input".into()));
    }
    Ok(())
}

/// Stacks frames `t - c ..= t + c` of every frame into one row; frames
/// outside the signal are zero (the features have zero mean).
fn context_stack(features: &Array2<f64>, context: usize) -> Array2<f64> {
    let (t_len, f_len) = features.dim();
    let width = 2 * context + 1;
    let mut u = Array2::<f64>::zeros((t_len, width * f_len));
    for t in 0..t_len {
        for c in 0..width {
            let src = t as i64 + c as i64 - context as i64;
            if src >= 0 && (src as usize) < t_len {
                u.slice_mut(s![t, c * f_len..(c + 1) * f_len])
                    .assign(&features.row(src as usize));
            }
        }
    }
    u
}

/// Softmax over the `k` logits of each bin; logits are `(t, f*K + k)`.
fn grouped_softmax(logits: &Array2<f64>, k_len: usize) -> Array3<f64> {
    let (t_len, width) = logits.dim();
    let f_len = width / k_len;
    let mut ez = Array3::<f64>::zeros((t_len, f_len, k_len));
    for t in 0..t_len {
        for f in 0..f_len {
            let row = logits.slice(s![t, f * k_len..(f + 1) * k_len]);
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for k in 0..k_len {
                let e = (row[k] - max).exp();
                ez[[t, f, k]] = e;
                sum += e;
            }
            for k in 0..k_len {
                ez[[t, f, k]] /= sum;
            }
        }
    }
    ez
}

/// `d loss / d logits` from `d loss / d ez` through the grouped softmax.
fn grouped_softmax_backward(ez: &Array3<f64>, grad: &Array3<f64>) -> Array2<f64> {
    let (t_len, f_len, k_len) = ez.dim();
    let mut out = Array2::<f64>::zeros((t_len, f_len * k_len));
    for t in 0..t_len {
        for f in 0..f_len {
            let dot: f64 = (0..k_len).map(|k| ez[[t, f, k]] * grad[[t, f, k]]).sum();
            for k in 0..k_len {
                out[[t, f * k_len + k]] = ez[[t, f, k]] * (grad[[t, f, k]] - dot);
            }
        }
    }
    out
}

/// Glorot-uniform weights and zero biases for a `rows x cols` layer.
fn init_layer<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R, out: &mut Vec<f64>) {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    out.extend((0..rows * cols).map(|_| rng.gen_range(-bound..bound)));
    out.extend(std::iter::repeat_n(0.0, rows));
}

fn layer(params: &[f64], offset: usize, rows: usize, cols: usize) -> (ArrayView2<'_, f64>, &[f64]) {
    let w = ArrayView2::from_shape((rows, cols), &params[offset..offset + rows * cols])
        .expect("layer slice has the declared size");
    let b = &params[offset + rows * cols..offset + rows * cols + rows];
    (w, b)
}

/// Affine map of each row of `u`: `u W^T + b`.
fn affine(u: &Array2<f64>, w: ArrayView2<'_, f64>, b: &[f64]) -> Array2<f64> {
    let mut z = u.dot(&w.t());
    for mut row in z.rows_mut() {
        row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
    }
    z
}

/// Writes `[dW, db]` of an affine layer into `out`.
fn affine_grads(u: &Array2<f64>, dz: &Array2<f64>, out: &mut Vec<f64>) {
    let dw = dz.t().dot(u);
    out.extend(dw.iter());
    out.extend(dz.sum_axis(Axis(0)).iter());
}

/// Two affine layers with a tanh hidden layer over a window of frames,
/// and a softmax over sources in every bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMaskNet {
    pub n_freqs: usize,
    pub n_sources: usize,
    pub context: usize,
    pub hidden: usize,
    params: Vec<f64>,
}

pub const DEFAULT_CONTEXT: usize = 2;
pub const DEFAULT_HIDDEN: usize = 128;

pub struct ReferenceCache {
    input: Array2<f64>,
    hidden: Array2<f64>,
    ez: Array3<f64>,
}

impl ReferenceMaskNet {
    pub fn new<R: Rng + ?Sized>(
        n_freqs: usize,
        n_sources: usize,
        context: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_freqs == 0 || n_sources == 0 || hidden == 0 {
            return Err(Error::InvalidConfig("network sizes must be positive".into()));
        }
        let input = (2 * context + 1) * n_freqs;
        let mut params = Vec::with_capacity(Self::param_count(n_freqs, n_sources, context, hidden));
        init_layer(hidden, input, rng, &mut params);
        init_layer(n_freqs * n_sources, hidden, rng, &mut params);
        Ok(Self {
            n_freqs,
            n_sources,
            context,
            hidden,
            params,
        })
    }

    pub fn param_count(n_freqs: usize, n_sources: usize, context: usize, hidden: usize) -> usize {
        let input = (2 * context + 1) * n_freqs;
        hidden * (input + 1) + n_freqs * n_sources * (hidden + 1)
    }

    /// Rebuilds a network from a flat parameter vector.
    pub fn from_params(
        n_freqs: usize,
        n_sources: usize,
        context: usize,
        hidden: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let want = Self::param_count(n_freqs, n_sources, context, hidden);
        if params.len() != want || n_freqs == 0 || n_sources == 0 || hidden == 0 {
            return Err(Error::Dimension(format!(
                "expected {want} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self {
            n_freqs,
            n_sources,
            context,
            hidden,
            params,
        })
    }

    fn input_width(&self) -> usize {
        (2 * self.context + 1) * self.n_freqs
    }
}

impl MaskNetwork for ReferenceMaskNet {
    type Cache = ReferenceCache;

    fn n_freqs(&self) -> usize {
        self.n_freqs
    }

    fn n_sources(&self) -> usize {
        self.n_sources
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, features: &Array2<f64>) -> Result<(MaskPosterior, ReferenceCache)> {
        check_features(features, self.n_freqs)?;
        let input = context_stack(features, self.context);
        let (w1, b1) = layer(&self.params, 0, self.hidden, self.input_width());
        let hidden = affine(&input, w1, b1).mapv(f64::tanh);
        let offset = self.hidden * (self.input_width() + 1);
        let (w2, b2) = layer(&self.params, offset, self.n_freqs * self.n_sources, self.hidden);
        let ez = grouped_softmax(&affine(&hidden, w2, b2), self.n_sources);
        if ez.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("mask network produced non-finite output".into()));
        }
        let masks = MaskPosterior::new(ez.clone())?;
        Ok((masks, ReferenceCache { input, hidden, ez }))
    }

    fn backward(&self, cache: &ReferenceCache, grad_ez: &Array3<f64>) -> Vec<f64> {
        let dz2 = grouped_softmax_backward(&cache.ez, grad_ez);
        let offset = self.hidden * (self.input_width() + 1);
        let (w2, _) = layer(&self.params, offset, self.n_freqs * self.n_sources, self.hidden);
        let da = dz2.dot(&w2);
        let dz1 = da * cache.hidden.mapv(|a| 1.0 - a * a);
        let mut grads = Vec::with_capacity(self.params.len());
        affine_grads(&cache.input, &dz1, &mut grads);
        affine_grads(&cache.hidden, &dz2, &mut grads);
        grads
    }
}

/// One affine layer from the stacked frames straight to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMaskNet {
    pub n_freqs: usize,
    pub n_sources: usize,
    pub context: usize,
    params: Vec<f64>,
}

pub struct LinearCache {
    input: Array2<f64>,
    ez: Array3<f64>,
}

impl LinearMaskNet {
    pub fn new<R: Rng + ?Sized>(
        n_freqs: usize,
        n_sources: usize,
        context: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_freqs == 0 || n_sources == 0 {
            return Err(Error::InvalidConfig("network sizes must be positive".into()));
        }
        let mut params = Vec::new();
        init_layer(n_freqs * n_sources, (2 * context + 1) * n_freqs, rng, &mut params);
        Ok(Self {
            n_freqs,
            n_sources,
            context,
            params,
        })
    }
}

impl MaskNetwork for LinearMaskNet {
    type Cache = LinearCache;

    fn n_freqs(&self) -> usize {
        self.n_freqs
    }

    fn n_sources(&self) -> usize {
        self.n_sources
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, features: &Array2<f64>) -> Result<(MaskPosterior, LinearCache)> {
        check_features(features, self.n_freqs)?;
        let input = context_stack(features, self.context);
        let (w, b) = layer(&self.params, 0, self.n_freqs * self.n_sources, input.ncols());
        let ez = grouped_softmax(&affine(&input, w, b), self.n_sources);
        let masks = MaskPosterior::new(ez.clone())?;
        Ok((masks, LinearCache { input, ez }))
    }

    fn backward(&self, cache: &LinearCache, grad_ez: &Array3<f64>) -> Vec<f64> {
        let dz = grouped_softmax_backward(&cache.ez, grad_ez);
        let mut grads = Vec::with_capacity(self.params.len());
        affine_grads(&cache.input, &dz, &mut grads);
        grads
    }
}

/// `ew_kd = softmax_d(exp(-rho) (alpha_d omega_kd / n_bins + beta_d))`.
/// Parameters are laid out `[alpha (D), beta (D), rho]`; the initial values
/// `alpha = 1, beta = 0, rho = 0` give `softmax(omega / n_bins)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalSoftmax {
    n_dirs: usize,
    params: Vec<f64>,
}

pub struct SoftmaxCache {
    omega_n: Array2<f64>,
    scaled: Array2<f64>,
    ew: Array2<f64>,
    n_bins: f64,
}

impl DirectionalSoftmax {
    pub fn new(n_dirs: usize) -> Self {
        let mut params = vec![1.0; n_dirs];
        params.extend(std::iter::repeat_n(0.0, n_dirs + 1));
        Self { n_dirs, params }
    }

    pub fn from_params(n_dirs: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != 2 * n_dirs + 1 {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                2 * n_dirs + 1,
                params.len()
            )));
        }
        Ok(Self { n_dirs, params })
    }
}

impl LocalizationMap for DirectionalSoftmax {
    type Cache = SoftmaxCache;

    fn n_dirs(&self) -> usize {
        self.n_dirs
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, omega: &Array2<f64>, n_bins: usize) -> Result<(DoaPosterior, SoftmaxCache)> {
        let d_len = self.n_dirs;
        if omega.ncols() != d_len || n_bins == 0 {
            return Err(Error::Dimension(format!(
                "map expects {d_len} directions, features are {}x{}",
                omega.nrows(),
                omega.ncols()
            )));
        }
        let n = n_bins as f64;
        let (alpha, rest) = self.params.split_at(d_len);
        let (beta, rho) = rest.split_at(d_len);
        let temp = (-rho[0]).exp();
        let omega_n = omega.mapv(|v| v / n);
        let scaled = Array2::from_shape_fn(omega.dim(), |(k, d)| alpha[d] * omega_n[[k, d]] + beta[d]);
        let mut ew = scaled.mapv(|v| v * temp);
        for mut row in ew.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        if ew.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "localization map produced non-finite output".into(),
            ));
        }
        let post = DoaPosterior::new(ew.clone())?;
        Ok((
            post,
            SoftmaxCache {
                omega_n,
                scaled,
                ew,
                n_bins: n,
            },
        ))
    }

    fn backward(&self, cache: &SoftmaxCache, grad_ew: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
        let d_len = self.n_dirs;
        let (alpha, rest) = self.params.split_at(d_len);
        let temp = (-rest[d_len]).exp();
        let k_len = cache.ew.nrows();
        // d loss / d logits, then through the temperature
        let mut d_logit = Array2::<f64>::zeros((k_len, d_len));
        for k in 0..k_len {
            let dot: f64 = (0..d_len).map(|d| cache.ew[[k, d]] * grad_ew[[k, d]]).sum();
            for d in 0..d_len {
                d_logit[[k, d]] = cache.ew[[k, d]] * (grad_ew[[k, d]] - dot);
            }
        }
        let d_scaled = d_logit.mapv(|v| v * temp);
        let d_rho = -temp * (&d_logit * &cache.scaled).sum();
        let mut grads = vec![0.0; 2 * d_len + 1];
        let mut d_omega = Array2::<f64>::zeros((k_len, d_len));
        for d in 0..d_len {
            for k in 0..k_len {
                grads[d] += d_scaled[[k, d]] * cache.omega_n[[k, d]];
                grads[d_len + d] += d_scaled[[k, d]];
                d_omega[[k, d]] = d_scaled[[k, d]] * alpha[d] / cache.n_bins;
            }
        }
        grads[2 * d_len] = d_rho;
        (grads, d_omega)
    }
}
