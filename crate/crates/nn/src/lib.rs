//! Minimal dense network stack: tanh-hidden MLP, exact reverse-mode
//! vector-Jacobian products, parameter flattening, and Adam. No graph, no
//! broadcasting — just what the adjoint pass needs, allocation-free in the
//! inner loops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer dims must contain at least two positive entries, got {0:?}")]
    BadDims(Vec<usize>),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite gradient at flat index {0}")]
    NonFiniteGrad(usize),
}

/// tanh through the exp identity (1-e)/(1+e), e = exp(-2|x|). Roughly 3x
/// faster than libm tanh here; relative error < 3e-15 for |x| > 0.01 and
/// absolute error < 3e-17 below (numerator cancellation, harmless for
/// activations).
#[inline(always)]
fn fast_tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

/// Dense MLP: affine layers with tanh on hidden layers, identity output.
/// Weights are row-major per layer: `w[l][o * in + i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// Deterministic init: W ~ N(0, 1/fan_in), biases zero.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self, NnError> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(NnError::BadDims(dims.to_vec()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
            weights.push((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Mlp { dims: dims.to_vec(), weights, biases })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self, NnError> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(NnError::BadDims(dims.to_vec()));
        }
        let weights = (0..dims.len() - 1).map(|l| vec![0.0; dims[l] * dims[l + 1]]).collect();
        let biases = (0..dims.len() - 1).map(|l| vec![0.0; dims[l + 1]]).collect();
        Ok(Mlp { dims: dims.to_vec(), weights, biases })
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Total parameter count: sum of (dims[i] + 1) * dims[i+1].
    pub fn n_params(&self) -> usize {
        (0..self.n_layers()).map(|l| (self.dims[l] + 1) * self.dims[l + 1]).sum()
    }

    /// Run the network, storing every layer input in `cache` for a later VJP.
    pub fn forward_cached(&self, x: &[f64], cache: &mut MlpCache) {
        assert_eq!(x.len(), self.in_dim(), "input dimension mismatch");
        assert_eq!(cache.acts.len(), self.dims.len(), "cache shape mismatch");
        cache.acts[0].copy_from_slice(x);
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.weights[l];
            let b = &self.biases[l];
            let last = l == self.n_layers() - 1;
            let (head, tail) = cache.acts.split_at_mut(l + 1);
            let inp = &head[l][..fan_in];
            let out = &mut tail[0];
            // Four independent accumulator chains per block so the dot
            // products pipeline instead of serializing on one FMA chain.
            // Per-output summation order is unchanged.
            let blocks = fan_out / 4;
            for blk in 0..blocks {
                let o = blk * 4;
                let r0 = &w[o * fan_in..(o + 1) * fan_in][..fan_in];
                let r1 = &w[(o + 1) * fan_in..(o + 2) * fan_in][..fan_in];
                let r2 = &w[(o + 2) * fan_in..(o + 3) * fan_in][..fan_in];
                let r3 = &w[(o + 3) * fan_in..(o + 4) * fan_in][..fan_in];
                let (mut a0, mut a1, mut a2, mut a3) = (b[o], b[o + 1], b[o + 2], b[o + 3]);
                for i in 0..fan_in {
                    let xi = inp[i];
                    a0 += r0[i] * xi;
                    a1 += r1[i] * xi;
                    a2 += r2[i] * xi;
                    a3 += r3[i] * xi;
                }
                if last {
                    out[o] = a0;
                    out[o + 1] = a1;
                    out[o + 2] = a2;
                    out[o + 3] = a3;
                } else {
                    out[o] = fast_tanh(a0);
                    out[o + 1] = fast_tanh(a1);
                    out[o + 2] = fast_tanh(a2);
                    out[o + 3] = fast_tanh(a3);
                }
            }
            for o in blocks * 4..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = b[o];
                for i in 0..fan_in {
                    acc += row[i] * inp[i];
                }
                out[o] = if last { acc } else { fast_tanh(acc) };
            }
        }
    }

    /// Allocating forward convenience.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cache = MlpCache::new(self);
        self.forward_cached(x, &mut cache);
        cache.output().to_vec()
    }

    /// Reverse-mode pass from a cached forward. Accumulates (+=) parameter
    /// gradients into `grads` and writes the input gradient to `x_bar`.
    pub fn vjp_cached(
        &self,
        cache: &MlpCache,
        cotangent: &[f64],
        grads: &mut MlpGrads,
        x_bar: &mut [f64],
        ws: &mut VjpScratch,
    ) {
        assert_eq!(cotangent.len(), self.out_dim());
        assert_eq!(x_bar.len(), self.in_dim());
        let nl = self.n_layers();
        ws.g[..cotangent.len()].copy_from_slice(cotangent);
        for l in (0..nl).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let last = l == nl - 1;
            let inp = &cache.acts[l];
            // d loss / d pre-activation
            if last {
                ws.gz[..fan_out].copy_from_slice(&ws.g[..fan_out]);
            } else {
                let act = &cache.acts[l + 1];
                for o in 0..fan_out {
                    ws.gz[o] = ws.g[o] * (1.0 - act[o] * act[o]);
                }
            }
            let gw = &mut grads.weights[l];
            let gb = &mut grads.biases[l];
            let inp = &inp[..fan_in];
            for o in 0..fan_out {
                let gzo = ws.gz[o];
                gb[o] += gzo;
                let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                for (r, &x) in row.iter_mut().zip(inp) {
                    *r += gzo * x;
                }
            }
            // propagate to the layer input: g = W^T gz
            let w = &self.weights[l];
            let dest: &mut [f64] = if l == 0 { x_bar } else { &mut ws.g_prev };
            let dest = &mut dest[..fan_in];
            dest.fill(0.0);
            for o in 0..fan_out {
                let gzo = ws.gz[o];
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for (d, &r) in dest.iter_mut().zip(row) {
                    *d += gzo * r;
                }
            }
            if l > 0 {
                ws.g[..fan_in].copy_from_slice(&ws.g_prev[..fan_in]);
            }
        }
    }

    /// Spec-shaped VJP: runs its own forward, returns freshly allocated
    /// (flat parameter gradient, input gradient).
    pub fn vjp(&self, x: &[f64], cotangent: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut cache = MlpCache::new(self);
        self.forward_cached(x, &mut cache);
        let mut grads = MlpGrads::zeros(self);
        let mut x_bar = vec![0.0; self.in_dim()];
        let mut ws = VjpScratch::new(self);
        self.vjp_cached(&cache, cotangent, &mut grads, &mut x_bar, &mut ws);
        (grads.flatten(), x_bar)
    }

    /// Flat layout: per layer, weights row-major then biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in 0..self.n_layers() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    pub fn unflatten(dims: &[usize], flat: &[f64]) -> Result<Self, NnError> {
        let mut mlp = Mlp::zeros(dims)?;
        if flat.len() != mlp.n_params() {
            return Err(NnError::DimMismatch { expected: mlp.n_params(), got: flat.len() });
        }
        let mut off = 0;
        for l in 0..mlp.n_layers() {
            let wlen = mlp.weights[l].len();
            mlp.weights[l].copy_from_slice(&flat[off..off + wlen]);
            off += wlen;
            let blen = mlp.biases[l].len();
            mlp.biases[l].copy_from_slice(&flat[off..off + blen]);
            off += blen;
        }
        Ok(mlp)
    }

    /// Overwrite parameters in place from a flat slice (same layout as `flatten`).
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), NnError> {
        if flat.len() != self.n_params() {
            return Err(NnError::DimMismatch { expected: self.n_params(), got: flat.len() });
        }
        let mut off = 0;
        for l in 0..self.n_layers() {
            let wlen = self.weights[l].len();
            self.weights[l].copy_from_slice(&flat[off..off + wlen]);
            off += wlen;
            let blen = self.biases[l].len();
            self.biases[l].copy_from_slice(&flat[off..off + blen]);
            off += blen;
        }
        Ok(())
    }
}

/// Per-layer activation storage for one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn new(mlp: &Mlp) -> Self {
        MlpCache { acts: mlp.dims.iter().map(|&d| vec![0.0; d]).collect() }
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    pub fn input(&self) -> &[f64] {
        &self.acts[0]
    }
}

/// Gradient accumulator shaped like an [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros(mlp: &Mlp) -> Self {
        MlpGrads {
            weights: mlp.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: mlp.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        for w in &mut self.weights {
            w.fill(0.0);
        }
        for b in &mut self.biases {
            b.fill(0.0);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    /// Write into a flat slice at `offset` (layout as `Mlp::flatten`), returns
    /// the offset one past the written region.
    pub fn write_flat(&self, flat: &mut [f64], mut offset: usize) -> usize {
        for l in 0..self.weights.len() {
            let w = &self.weights[l];
            flat[offset..offset + w.len()].copy_from_slice(w);
            offset += w.len();
            let b = &self.biases[l];
            flat[offset..offset + b.len()].copy_from_slice(b);
            offset += b.len();
        }
        offset
    }
}

/// Scratch buffers for [`Mlp::vjp_cached`], sized to the widest layer.
#[derive(Debug, Clone)]
pub struct VjpScratch {
    g: Vec<f64>,
    g_prev: Vec<f64>,
    gz: Vec<f64>,
}

impl VjpScratch {
    pub fn new(mlp: &Mlp) -> Self {
        let m = *mlp.dims.iter().max().unwrap();
        VjpScratch { g: vec![0.0; m], g_prev: vec![0.0; m], gz: vec![0.0; m] }
    }
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::DimMismatch { expected: self.m.len(), got: grads.len() });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGrad(i));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
