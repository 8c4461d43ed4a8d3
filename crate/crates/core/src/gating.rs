//! Prompt-conditioned gating network and the Bradley-Terry objective.
//!
//! The gate is a ReLU MLP over the prompt feature whose final affine layer
//! emits `k` logits; a softmax maps them onto the probability simplex. The
//! score of a response is the dot product of these coefficients with the
//! response's debiased per-objective rewards, and pairs are scored with a
//! scaled logistic loss `softplus(-beta * (R_chosen - R_rejected))`.
//!
//! All parameters live in one flat buffer: for each layer the `out x in`
//! row-major weight matrix followed by its bias vector.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const GATE_MAGIC: [u8; 4] = *b"AGT1";
pub const GATE_VERSION: u32 = 1;
pub const DEFAULT_HIDDEN: [usize; 3] = [1024, 1024, 1024];
pub const DEFAULT_BETA: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GatingNetwork {
    dims: Vec<usize>,
    params: Vec<f64>,
    pub beta: f64,
}

/// Offsets of one affine layer inside the flat parameter buffer.
#[derive(Debug, Clone, Copy)]
struct LayerSpan {
    input: usize,
    output: usize,
    weight: usize,
    bias: usize,
}

fn spans(dims: &[usize]) -> Vec<LayerSpan> {
    let mut offset = 0;
    dims.windows(2)
        .map(|w| {
            let span = LayerSpan {
                input: w[0],
                output: w[1],
                weight: offset,
                bias: offset + w[0] * w[1],
            };
            offset = span.bias + w[1];
            span
        })
        .collect()
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer dims need at least input and output, all >= 1; got {dims:?}"
        )));
    }
    Ok(())
}

/// Layer dims `[d, hidden.., k]`.
pub fn layer_dims(d: usize, hidden: &[usize], k: usize) -> Vec<usize> {
    std::iter::once(d).chain(hidden.iter().copied()).chain(std::iter::once(k)).collect()
}

impl GatingNetwork {
    /// He-uniform hidden layers, zeroed output layer (uniform gate at step 0).
    pub fn new(dims: Vec<usize>, beta: f64, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dims, beta)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spans = spans(&net.dims);
        for s in &spans[..spans.len() - 1] {
            let limit = (6.0 / s.input as f64).sqrt();
            for w in &mut net.params[s.weight..s.bias] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn zeros(dims: Vec<usize>, beta: f64) -> Result<Self> {
        check_dims(&dims)?;
        if !beta.is_finite() {
            return Err(Error::NonFinite("beta".into()));
        }
        let params = vec![0.0; param_count(&dims)];
        Ok(Self { dims, params, beta })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated dims")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Weight of layer `l` connecting input `i` to output `o`.
    pub fn weight_mut(&mut self, l: usize, o: usize, i: usize) -> &mut f64 {
        let s = spans(&self.dims)[l];
        &mut self.params[s.weight + o * s.input + i]
    }

    pub fn bias_mut(&mut self, l: usize, o: usize) -> &mut f64 {
        let s = spans(&self.dims)[l];
        &mut self.params[s.bias + o]
    }

    fn check_finite(&self) -> Result<()> {
        if !self.beta.is_finite() || self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("gate parameters".into()));
        }
        Ok(())
    }

    /// Pre-softmax output of the MLP.
    pub fn logits(&self, prompt: &[f64]) -> Result<Vec<f64>> {
        if prompt.len() != self.input_dim() {
            return Err(Error::dim("prompt feature passed to gate", self.input_dim(), prompt.len()));
        }
        self.check_finite()?;
        let mut cache = ForwardCache::default();
        self.forward_into(prompt, &mut cache);
        Ok(cache.logits().to_vec())
    }

    /// Runs the MLP, keeping every layer's activations for backprop.
    fn forward_into(&self, prompt: &[f64], cache: &mut ForwardCache) {
        let spans = spans(&self.dims);
        cache.acts.resize(spans.len() + 1, Vec::new());
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(prompt);
        let last = spans.len() - 1;
        for (l, s) in spans.iter().enumerate() {
            let (done, rest) = cache.acts.split_at_mut(l + 1);
            let x = &done[l];
            let y = &mut rest[0];
            y.clear();
            for o in 0..s.output {
                let row = &self.params[s.weight + o * s.input..s.weight + (o + 1) * s.input];
                let z = self.params[s.bias + o] + dot(row, x);
                y.push(if l < last { z.max(0.0) } else { z });
            }
        }
    }

    /// Simplex coefficients for the given prompt feature.
    pub fn forward(&self, prompt: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(prompt)?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_capacity(24 + 4 * self.dims.len() + 8 * self.params.len());
        w.bytes(&GATE_MAGIC);
        w.u32(GATE_VERSION);
        w.len_u32(self.dims.len(), "layer count")?;
        for &d in &self.dims {
            w.len_u32(d, "layer width")?;
        }
        w.f64(self.beta);
        w.f64s(&self.params);
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(GATE_MAGIC)?;
        let version = r.u32()?;
        if version != GATE_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "gating network",
                found: version,
            });
        }
        let n_dims = r.u32()? as usize;
        if n_dims > r.remaining() / 4 {
            return Err(Error::Truncated {
                expected: (r.position() + 4 * n_dims) as u64,
                actual: bytes.len() as u64,
            });
        }
        let dims = (0..n_dims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        check_dims(&dims).map_err(|e| Error::Corrupt(e.to_string()))?;
        let beta = r.f64()?;
        let params = r.f64s(param_count(&dims))?;
        r.finish()?;
        Ok(Self { dims, params, beta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Reusable activations of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    fn logits(&self) -> &[f64] {
        self.acts.last().expect("forward ran")
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `gate_forward`: simplex coefficients from a prompt feature.
pub fn gate_forward(net: &GatingNetwork, prompt: &[f64]) -> Result<Vec<f64>> {
    net.forward(prompt)
}

/// Dot product of gating coefficients and adjusted rewards.
pub fn scalar_score(coeffs: &[f64], adjusted: &[f64]) -> Result<f64> {
    if coeffs.len() != adjusted.len() {
        return Err(Error::dim("gating coefficients vs rewards", coeffs.len(), adjusted.len()));
    }
    Ok(dot(coeffs, adjusted))
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `1 / (1 + e^-x)` without overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Negative log-likelihood that `chosen` beats `rejected` under a
/// Bradley-Terry model with scale `beta`.
pub fn bt_loss(chosen: f64, rejected: f64, beta: f64) -> Result<f64> {
    if !(chosen.is_finite() && rejected.is_finite() && beta.is_finite()) {
        return Err(Error::NonFinite(format!(
            "bt_loss inputs ({chosen}, {rejected}, beta = {beta})"
        )));
    }
    Ok(softplus(-beta * (chosen - rejected)))
}

/// A training pair with its debiased reward vectors precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPair {
    pub prompt: Vec<f64>,
    pub chosen: Vec<f64>,
    pub rejected: Vec<f64>,
}

/// Gradient of the mean batch loss, laid out like `GatingNetwork::params`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateGradient {
    pub params: Vec<f64>,
    pub beta: f64,
}

impl GateGradient {
    pub fn zeros(net: &GatingNetwork) -> Self {
        Self {
            params: vec![0.0; net.params.len()],
            beta: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &GateGradient) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            *a += b;
        }
        self.beta += other.beta;
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.params {
            *a *= s;
        }
        self.beta *= s;
    }
}

/// Per-thread buffers for `accumulate_pair`.
#[derive(Debug, Clone, Default)]
pub struct PairScratch {
    cache: ForwardCache,
    delta: Vec<f64>,
    next: Vec<f64>,
}

impl GatingNetwork {
    /// Forward-only loss of one pair.
    pub fn pair_loss(&self, pair: &PreparedPair) -> Result<f64> {
        let g = self.forward(&pair.prompt)?;
        bt_loss(scalar_score(&g, &pair.chosen)?, scalar_score(&g, &pair.rejected)?, self.beta)
    }

    /// Adds the gradient of one pair's loss into `grad` and returns the loss.
    /// Shapes are assumed validated by the caller.
    pub fn accumulate_pair(&self, pair: &PreparedPair, scratch: &mut PairScratch, grad: &mut GateGradient) -> f64 {
        self.forward_into(&pair.prompt, &mut scratch.cache);
        let coeffs = softmax(scratch.cache.logits());
        let margin = dot(&coeffs, &pair.chosen) - dot(&coeffs, &pair.rejected);
        let m = self.beta * margin;
        let loss = softplus(-m);
        // dL/dm = -sigmoid(-m)
        let s = sigmoid(-m);
        grad.beta += -s * margin;

        // dL/dcoeff_i, then through the softmax
        let dscore: Vec<f64> = pair
            .chosen
            .iter()
            .zip(&pair.rejected)
            .map(|(c, r)| -s * self.beta * (c - r))
            .collect();
        let inner = dot(&coeffs, &dscore);
        scratch.delta.clear();
        scratch.delta.extend(coeffs.iter().zip(&dscore).map(|(g, d)| g * (d - inner)));

        let spans = spans(&self.dims);
        for (l, s) in spans.iter().enumerate().rev() {
            let x = &scratch.cache.acts[l];
            for (o, &dz) in scratch.delta.iter().enumerate() {
                if dz == 0.0 {
                    continue;
                }
                let row = &mut grad.params[s.weight + o * s.input..s.weight + (o + 1) * s.input];
                for (gw, &xi) in row.iter_mut().zip(x) {
                    *gw += dz * xi;
                }
                grad.params[s.bias + o] += dz;
            }
            if l == 0 {
                break;
            }
            // back through the weights and the ReLU of layer l-1's output
            scratch.next.clear();
            scratch.next.resize(s.input, 0.0);
            for (o, &dz) in scratch.delta.iter().enumerate() {
                if dz == 0.0 {
                    continue;
                }
                let row = &self.params[s.weight + o * s.input..s.weight + (o + 1) * s.input];
                for (n, &w) in scratch.next.iter_mut().zip(row) {
                    *n += dz * w;
                }
            }
            for (n, &a) in scratch.next.iter_mut().zip(x) {
                if a <= 0.0 {
                    *n = 0.0;
                }
            }
            std::mem::swap(&mut scratch.delta, &mut scratch.next);
        }
        loss
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
