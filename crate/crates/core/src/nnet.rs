//! A minimal differentiable tensor core.
//!
//! There is no tape: each primitive has a forward function and a matching
//! backward function that accumulates exact gradients. The decoder wires
//! them together in a fixed topology.
//!
//! Activations are row-major matrices stored in flat `f64` slices; the row
//! count is passed explicitly.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", values.len())));
        }
        Ok(Self { shape, values, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![0.0; n], grad: None }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![v; n], grad: None }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Fails with `NumericalDivergence` when any value is non-finite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NumericalDivergence(format!("non-finite values in {what}")))
        }
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

/// Named parameters plus adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    tensors: Vec<Tensor>,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidParameter(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        self.first_moment.push(vec![0.0; tensor.len()]);
        self.second_moment.push(vec![0.0; tensor.len()]);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    #[inline]
    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].values
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Zeroed gradient buffers with this store's layout.
    pub fn zero_grads(&self) -> Grads {
        Grads { bufs: self.tensors.iter().map(|t| vec![0.0; t.len()]).collect() }
    }

    /// Install accumulated gradients, replacing any existing ones.
    pub fn set_grads(&mut self, grads: Grads) -> Result<()> {
        if grads.bufs.len() != self.tensors.len() {
            return Err(Error::Shape("gradient buffers do not match the store".into()));
        }
        for (t, g) in self.tensors.iter_mut().zip(grads.bufs) {
            if g.len() != t.len() {
                return Err(Error::Shape("gradient length does not match parameter".into()));
            }
            t.grad = Some(g);
        }
        Ok(())
    }

    pub fn optimizer_state(&self) -> AdamState {
        AdamState {
            step: self.step,
            first_moment: self.first_moment.clone(),
            second_moment: self.second_moment.clone(),
        }
    }

    pub fn set_optimizer_state(&mut self, state: AdamState) -> Result<()> {
        let ok = state.first_moment.len() == self.tensors.len()
            && state.second_moment.len() == self.tensors.len()
            && self.tensors.iter().enumerate().all(|(i, t)| {
                state.first_moment[i].len() == t.len() && state.second_moment[i].len() == t.len()
            });
        if !ok {
            return Err(Error::Shape("optimizer moments do not match parameters".into()));
        }
        self.step = state.step;
        self.first_moment = state.first_moment;
        self.second_moment = state.second_moment;
        Ok(())
    }
}

/// Gradient buffers laid out like a [`ParamStore`]. Each forward/backward
/// pass owns one, so passes over different images can run independently and
/// be summed in a fixed order afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub bufs: Vec<Vec<f64>>,
}

impl Grads {
    #[inline]
    pub fn buf(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.bufs[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.bufs.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.bufs.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// One decoupled-weight-decay adaptive-moment update. Consumes the installed
/// gradients.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    if let Some(i) = store.tensors.iter().position(|t| t.grad.is_none()) {
        return Err(Error::MissingGradient(store.names[i].clone()));
    }
    store.step += 1;
    let t = store.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    for (i, tensor) in store.tensors.iter_mut().enumerate() {
        let grad = tensor.grad.take().expect("checked above");
        let m = &mut store.first_moment[i];
        let v = &mut store.second_moment[i];
        for k in 0..grad.len() {
            let g = grad[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[k] / bias1;
            let v_hat = v[k] / bias2;
            let p = &mut tensor.values[k];
            *p -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
        }
    }
    Ok(())
}

/// Scaled-normal initialisation: `N(0, gain^2 / fan_in)`.
pub fn init_normal<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize, gain: f64) -> Tensor {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor { shape, values, grad: None }
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

fn expect_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: expected {want} values, got {got}")));
    }
    Ok(())
}

/// `y = x W^T + b` for `x: [n, d_in]`, `W: [d_out, d_in]`, `b: [d_out]`.
pub fn affine_forward(x: &[f64], n: usize, w: &[f64], b: &[f64], d_out: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let d_in = x.len() / n;
    expect_len("affine input", x.len(), n * d_in)?;
    expect_len("affine weight", w.len(), d_out * d_in)?;
    expect_len("affine bias", b.len(), d_out)?;
    let mut y = vec![0.0; n * d_out];
    for (xr, yr) in x.chunks_exact(d_in).zip(y.chunks_exact_mut(d_out)) {
        for ((yo, wr), &bo) in yr.iter_mut().zip(w.chunks_exact(d_in)).zip(b) {
            *yo = bo + dot(xr, wr);
        }
    }
    Ok(y)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorise without reassociating.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * i + k] * b[4 * i + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Backward of [`affine_forward`]. Gradients are accumulated into `dw`,
/// `db`, and `dx` when given.
pub fn affine_backward(
    x: &[f64],
    n: usize,
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    let d_in = x.len() / n;
    let d_out = dy.len() / n;
    expect_len("affine weight grad", dw.len(), d_out * d_in)?;
    expect_len("affine bias grad", db.len(), d_out)?;
    expect_len("affine weight", w.len(), d_out * d_in)?;
    for (xr, dyr) in x.chunks_exact(d_in).zip(dy.chunks_exact(d_out)) {
        for (o, &g) in dyr.iter().enumerate() {
            if g != 0.0 {
                axpy(g, xr, &mut dw[o * d_in..(o + 1) * d_in]);
                db[o] += g;
            }
        }
    }
    if let Some(dx) = dx {
        expect_len("affine input grad", dx.len(), n * d_in)?;
        for (dxr, dyr) in dx.chunks_exact_mut(d_in).zip(dy.chunks_exact(d_out)) {
            for (o, &g) in dyr.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, &w[o * d_in..(o + 1) * d_in], dxr);
                }
            }
        }
    }
    Ok(())
}

pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// `dx = dy` where the forward input was positive.
pub fn relu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
}

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer normalisation with affine `gamma`, `beta` of width `d`.
pub fn layernorm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> Result<(Vec<f64>, LayerNormCache)> {
    let d = gamma.len();
    expect_len("layernorm beta", beta.len(), d)?;
    if d == 0 || !x.len().is_multiple_of(d) {
        return Err(Error::Shape(format!("layernorm width {d} does not divide {}", x.len())));
    }
    let n = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
        inv_std[r] = is;
        for k in 0..d {
            let xh = (row[k] - mean) * is;
            xhat[r * d + k] = xh;
            y[r * d + k] = gamma[k] * xh + beta[k];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Backward of [`layernorm_forward`]; returns `dx` and accumulates into
/// `dgamma`, `dbeta`.
pub fn layernorm_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    dy: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let d = gamma.len();
    let n = cache.inv_std.len();
    let mut dx = vec![0.0; dy.len()];
    for r in 0..n {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let g = &dy[r * d..(r + 1) * d];
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for k in 0..d {
            dgamma[k] += g[k] * xh[k];
            dbeta[k] += g[k];
            let dxh = g[k] * gamma[k];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[k];
        }
        let is = cache.inv_std[r];
        for k in 0..d {
            let dxh = g[k] * gamma[k];
            dx[r * d + k] = is / d as f64 * (d as f64 * dxh - sum_dxh - xh[k] * sum_dxh_xh);
        }
    }
    dx
}

/// Single-head scaled dot-product attention. `q: [n_q, d]`, `k, v: [n_k, d]`.
/// Returns the output `[n_q, d]` and the softmax matrix `[n_q, n_k]`.
pub fn attention_forward(q: &[f64], k: &[f64], v: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if d == 0 || !q.len().is_multiple_of(d) || !k.len().is_multiple_of(d) || k.len() != v.len() {
        return Err(Error::Shape("attention operands disagree".into()));
    }
    let (n_q, n_k) = (q.len() / d, k.len() / d);
    if n_k == 0 {
        return Err(Error::Shape("attention needs at least one key".into()));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = vec![0.0; n_q * n_k];
    for i in 0..n_q {
        let qi = &q[i * d..(i + 1) * d];
        let row = &mut probs[i * n_k..(i + 1) * n_k];
        for (j, p) in row.iter_mut().enumerate() {
            *p = scale * dot(qi, &k[j * d..(j + 1) * d]);
        }
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for p in row.iter_mut() {
            *p = (*p - mx).exp();
            s += *p;
        }
        for p in row.iter_mut() {
            *p /= s;
        }
    }
    let mut out = vec![0.0; n_q * d];
    for i in 0..n_q {
        let o = &mut out[i * d..(i + 1) * d];
        for j in 0..n_k {
            axpy(probs[i * n_k + j], &v[j * d..(j + 1) * d], o);
        }
    }
    Ok((out, probs))
}

/// Backward of [`attention_forward`]: returns `(dq, dk, dv)`.
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n_q, n_k) = (q.len() / d, k.len() / d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut ds = vec![0.0; n_k];
    for i in 0..n_q {
        let p = &probs[i * n_k..(i + 1) * n_k];
        let go = &dout[i * d..(i + 1) * d];
        let mut weighted = 0.0;
        for j in 0..n_k {
            axpy(p[j], go, &mut dv[j * d..(j + 1) * d]);
            let dp = dot(go, &v[j * d..(j + 1) * d]);
            ds[j] = dp;
            weighted += dp * p[j];
        }
        let qi = &q[i * d..(i + 1) * d];
        for j in 0..n_k {
            let g = p[j] * (ds[j] - weighted) * scale;
            if g != 0.0 {
                axpy(g, &k[j * d..(j + 1) * d], &mut dq[i * d..(i + 1) * d]);
                axpy(g, qi, &mut dk[j * d..(j + 1) * d]);
            }
        }
    }
    (dq, dk, dv)
}

/// Interleaved `[sin(t f_0), cos(t f_0), sin(t f_1), ...]` with
/// `f_i = 10000^(-2i / dim)`.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("embedding dim {dim} must be even and positive")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let f = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        out.push((t * f).sin());
        out.push((t * f).cos());
    }
    Ok(out)
}

/// Parameters of a FiLM block: two affine projections of the embedding.
#[derive(Debug, Clone, Copy)]
pub struct FilmParams<'a> {
    pub w_gamma: &'a [f64],
    pub b_gamma: &'a [f64],
    pub w_beta: &'a [f64],
    pub b_beta: &'a [f64],
}

/// `h~ = gamma(tau) * h + beta(tau)` for `h: [n, d]`. Returns the output and
/// the `(gamma, beta)` vectors.
pub fn film_forward(h: &[f64], tau: &[f64], p: &FilmParams) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = p.b_gamma.len();
    let gamma = affine_forward(tau, 1, p.w_gamma, p.b_gamma, d)?;
    let beta = affine_forward(tau, 1, p.w_beta, p.b_beta, d)?;
    if d == 0 || !h.len().is_multiple_of(d) {
        return Err(Error::Shape(format!("FiLM width {d} does not divide {}", h.len())));
    }
    let mut y = vec![0.0; h.len()];
    for (yr, hr) in y.chunks_exact_mut(d).zip(h.chunks_exact(d)) {
        for k in 0..d {
            yr[k] = gamma[k] * hr[k] + beta[k];
        }
    }
    Ok((y, gamma, beta))
}

/// Gradients produced by [`film_backward`].
#[derive(Debug, Clone)]
pub struct FilmGrads {
    pub dh: Vec<f64>,
    pub dtau: Vec<f64>,
    pub dw_gamma: Vec<f64>,
    pub db_gamma: Vec<f64>,
    pub dw_beta: Vec<f64>,
    pub db_beta: Vec<f64>,
}

pub fn film_backward(h: &[f64], tau: &[f64], gamma: &[f64], p: &FilmParams, dy: &[f64]) -> FilmGrads {
    let d = gamma.len();
    let mut dh = vec![0.0; h.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for ((dhr, hr), dyr) in dh.chunks_exact_mut(d).zip(h.chunks_exact(d)).zip(dy.chunks_exact(d)) {
        for k in 0..d {
            dhr[k] = dyr[k] * gamma[k];
            dgamma[k] += dyr[k] * hr[k];
            dbeta[k] += dyr[k];
        }
    }
    let e = tau.len();
    let mut dtau = vec![0.0; e];
    let mut dw_gamma = vec![0.0; d * e];
    let mut db_gamma = vec![0.0; d];
    let mut dw_beta = vec![0.0; d * e];
    let mut db_beta = vec![0.0; d];
    affine_backward(tau, 1, p.w_gamma, &dgamma, Some(&mut dtau), &mut dw_gamma, &mut db_gamma)
        .expect("shapes fixed by forward");
    affine_backward(tau, 1, p.w_beta, &dbeta, Some(&mut dtau), &mut dw_beta, &mut db_beta)
        .expect("shapes fixed by forward");
    FilmGrads { dh, dtau, dw_gamma, db_gamma, dw_beta, db_beta }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central finite-difference gradient check helpers.
pub mod gradcheck {
    /// Relative error used by all gradient checks:
    /// `|a - b| / max(|a|, |b|, floor)`.
    pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(floor)
    }

    /// Numerical gradient of `f` at `x` by central differences with step `h`.
    pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = probe[i];
                probe[i] = orig + h;
                let fp = f(&probe);
                probe[i] = orig - h;
                let fm = f(&probe);
                probe[i] = orig;
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    /// Largest relative error between an analytic and a numerical gradient.
    pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| rel_err(a, n, floor))
            .fold(0.0, f64::max)
    }
}
