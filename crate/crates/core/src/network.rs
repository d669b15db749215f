//! Feed-forward classifier: dense layers with ReLU in between, an optional
//! batch-normalization layer on the logits, and a softmax output.
//!
//! Dense weights are stored `fan_in × fan_out`, so a forward step is
//! `X·W + b` for a batch `X` of shape `batch × fan_in`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::losses::{softmax, LossKind};
use crate::tensor::Matrix;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Weight kept on the old running statistic at each update.
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Relu,
    BatchNorm(BatchNorm),
}

impl Layer {
    fn output_dim(&self, input: usize) -> usize {
        match self {
            Layer::Dense(d) => d.fan_out(),
            Layer::Relu => input,
            Layer::BatchNorm(bn) => bn.dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layers: Vec<Layer>,
}

/// Saved activations from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    norm: Vec<Option<NormCache>>,
    outputs: Matrix,
}

#[derive(Debug, Clone)]
struct NormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

impl ForwardCache {
    pub fn outputs(&self) -> &Matrix {
        &self.outputs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    Dense { weights: Matrix, bias: Vec<f64> },
    BatchNorm { scale: Vec<f64>, shift: Vec<f64> },
    None,
}

/// Gradients of the mean batch loss, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    /// Per-instance gradient `∂J_i/∂z` at the pre-softmax logits.
    pub logit_grad: Matrix,
}

impl Gradients {
    /// Trainable gradient blocks in the same order as
    /// [`NetworkParams::trainable_mut`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrad::Dense { weights, bias } => {
                    out.push(weights.data());
                    out.push(bias.as_slice());
                }
                LayerGrad::BatchNorm { scale, shift } => {
                    out.push(scale.as_slice());
                    out.push(shift.as_slice());
                }
                LayerGrad::None => {}
            }
        }
        out
    }
}

/// He-uniform initialization with batch normalization before the softmax.
pub fn init_weights(layer_sizes: &[usize], seed: u64) -> Result<NetworkParams> {
    NetworkParams::init(layer_sizes, seed, true)
}

impl NetworkParams {
    /// Dense weights are drawn from `U(−√(6/fan_in), √(6/fan_in))` in
    /// row-major order, biases start at zero.
    pub fn init(layer_sizes: &[usize], seed: u64, batch_norm: bool) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid(format!(
                "need at least two layer sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::invalid(format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let n_dense = layer_sizes.len() - 1;
        for (i, pair) in layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let dist =
                Uniform::new_inclusive(-limit, limit).map_err(|e| Error::invalid(e.to_string()))?;
            let data = (0..fan_in * fan_out)
                .map(|_| dist.sample(&mut rng))
                .collect();
            layers.push(Layer::Dense(Dense {
                weights: Matrix::from_vec(fan_in, fan_out, data)?,
                bias: vec![0.0; fan_out],
            }));
            if i + 1 < n_dense {
                layers.push(Layer::Relu);
            }
        }
        if batch_norm {
            layers.push(Layer::BatchNorm(BatchNorm::new(layer_sizes[n_dense])));
        }
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let mut dim = None;
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Dense(d) = layer {
                if d.bias.len() != d.fan_out() {
                    return Err(Error::invalid(format!(
                        "layer {i}: bias length {} for fan-out {}",
                        d.bias.len(),
                        d.fan_out()
                    )));
                }
                if let Some(prev) = dim {
                    if prev != d.fan_in() {
                        return Err(Error::invalid(format!(
                            "layer {i}: fan-in {} does not follow width {prev}",
                            d.fan_in()
                        )));
                    }
                }
            }
            if let Layer::BatchNorm(bn) = layer {
                let d = bn.dim();
                if [bn.shift.len(), bn.running_mean.len(), bn.running_var.len()]
                    .iter()
                    .any(|&l| l != d)
                {
                    return Err(Error::invalid(format!(
                        "layer {i}: inconsistent batch-norm sizes"
                    )));
                }
                if dim.is_some_and(|prev| prev != d) {
                    return Err(Error::invalid(format!(
                        "layer {i}: batch-norm width {d} mismatch"
                    )));
                }
                if bn.eps.is_nan() || bn.eps <= 0.0 || bn.running_var.iter().any(|&v| v < 0.0) {
                    return Err(Error::invalid(format!(
                        "layer {i}: invalid batch-norm statistics"
                    )));
                }
            }
            dim = match (layer, dim) {
                (Layer::Relu, None) => None,
                (l, Some(d)) => Some(l.output_dim(d)),
                (l, None) => Some(l.output_dim(0)),
            };
        }
        if dim.is_none() {
            return Err(Error::invalid("network has no dense or batch-norm layer"));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Dense(d) => Some(d.fan_in()),
                Layer::BatchNorm(bn) => Some(bn.dim()),
                Layer::Relu => None,
            })
            .unwrap_or(0)
    }

    pub fn num_classes(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Dense(d) => Some(d.fan_out()),
                Layer::BatchNorm(bn) => Some(bn.dim()),
                Layer::Relu => None,
            })
            .unwrap_or(0)
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)))
    }

    /// Trainable parameter blocks: dense weights and biases, batch-norm
    /// scale and shift. Running statistics are excluded.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(d.weights.data_mut());
                    out.push(d.bias.as_mut_slice());
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.scale.as_mut_slice());
                    out.push(bn.shift.as_mut_slice());
                }
                Layer::Relu => {}
            }
        }
        out
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "forward_pass",
                lhs: x.shape(),
                rhs: (x.rows(), self.input_dim()),
            });
        }
        Ok(())
    }

    /// Inference-mode forward pass: batch norm uses running statistics and
    /// nothing is recorded.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense(d) => dense_forward(d, &h)?,
                Layer::Relu => h.map(|v| v.max(0.0)),
                Layer::BatchNorm(bn) => {
                    let mut out = h;
                    for r in 0..out.rows() {
                        for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                            let inv = 1.0 / (bn.running_var[j] + bn.eps).sqrt();
                            *v = bn.scale[j] * (*v - bn.running_mean[j]) * inv + bn.shift[j];
                        }
                    }
                    out
                }
            };
        }
        Ok(softmax(&h))
    }

    /// Training-mode forward pass: batch norm normalizes with batch
    /// statistics and folds them into its running statistics.
    pub fn forward_train(&mut self, x: &Matrix) -> Result<ForwardCache> {
        self.check_input(x)?;
        if self.has_batch_norm() && x.rows() < 2 {
            return Err(Error::invalid(format!(
                "batch norm needs a batch of at least 2 in training mode, got {}",
                x.rows()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut norm = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let next = match layer {
                Layer::Dense(d) => {
                    norm.push(None);
                    dense_forward(d, &h)?
                }
                Layer::Relu => {
                    norm.push(None);
                    h.map(|v| v.max(0.0))
                }
                Layer::BatchNorm(bn) => {
                    let (out, cache) = batch_norm_train(bn, &h);
                    norm.push(Some(cache));
                    out
                }
            };
            inputs.push(std::mem::replace(&mut h, next));
        }
        Ok(ForwardCache {
            inputs,
            norm,
            outputs: softmax(&h),
        })
    }

    /// Exact gradients of the mean batch loss.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        labels: &Matrix,
        loss: &LossKind,
    ) -> Result<Gradients> {
        if labels.shape() != cache.outputs.shape() || cache.inputs.len() != self.layers.len() {
            return Err(Error::Shape {
                op: "backward_pass",
                lhs: labels.shape(),
                rhs: cache.outputs.shape(),
            });
        }
        let logit_grad = loss.grad_logits(labels, &cache.outputs)?;
        let batch = labels.rows() as f64;
        let mut up = logit_grad.scale(1.0 / batch);
        let mut grads = vec![LayerGrad::None; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let first_trainable = i == 0;
            match layer {
                Layer::Dense(d) => {
                    let dw = input.transpose_left_matmul(&up)?;
                    let mut db = vec![0.0; d.fan_out()];
                    for row in up.iter_rows() {
                        for (b, &g) in db.iter_mut().zip(row) {
                            *b += g;
                        }
                    }
                    grads[i] = LayerGrad::Dense {
                        weights: dw,
                        bias: db,
                    };
                    if !first_trainable {
                        up = up.matmul_transpose_right(&d.weights)?;
                    }
                }
                Layer::Relu => {
                    up =
                        up.zip_with(input, "relu_backward", |g, x| if x > 0.0 { g } else { 0.0 })?;
                }
                Layer::BatchNorm(bn) => {
                    let nc = cache.norm[i]
                        .as_ref()
                        .ok_or_else(|| Error::invalid("cache has no batch-norm statistics"))?;
                    let (dx, dscale, dshift) = batch_norm_backward(bn, nc, &up);
                    grads[i] = LayerGrad::BatchNorm {
                        scale: dscale,
                        shift: dshift,
                    };
                    up = dx;
                }
            }
        }
        Ok(Gradients {
            layers: grads,
            logit_grad,
        })
    }

    /// `θ ← θ − η·∇θ`. Running batch-norm statistics are left alone.
    pub fn apply_sgd(&mut self, grads: &Gradients, eta: f64) -> Result<()> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be >= 0, got {eta}"
            )));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::invalid(
                "gradient layer count does not match network",
            ));
        }
        for (layer, g) in self.layers.iter().zip(&grads.layers) {
            let ok = match (layer, g) {
                (Layer::Dense(d), LayerGrad::Dense { weights, bias }) => {
                    d.weights.shape() == weights.shape() && d.bias.len() == bias.len()
                }
                (Layer::BatchNorm(bn), LayerGrad::BatchNorm { scale, shift }) => {
                    bn.dim() == scale.len() && bn.dim() == shift.len()
                }
                (Layer::Relu, LayerGrad::None) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::invalid("gradient shapes do not match network"));
            }
        }
        for (p, g) in self.trainable_mut().into_iter().zip(grads.blocks()) {
            for (w, &d) in p.iter_mut().zip(g) {
                *w -= eta * d;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        checkpoint::decode(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Runs a forward pass; training mode returns the cache needed by
/// [`backward_pass`].
pub fn forward_pass(
    params: &mut NetworkParams,
    x: &Matrix,
    training: bool,
) -> Result<(Matrix, Option<ForwardCache>)> {
    if training {
        let cache = params.forward_train(x)?;
        Ok((cache.outputs.clone(), Some(cache)))
    } else {
        Ok((params.predict(x)?, None))
    }
}

pub fn backward_pass(
    params: &NetworkParams,
    cache: &ForwardCache,
    labels: &Matrix,
    loss: &LossKind,
) -> Result<Gradients> {
    params.backward(cache, labels, loss)
}

pub fn sgd_update(params: &NetworkParams, grads: &Gradients, eta: f64) -> Result<NetworkParams> {
    let mut next = params.clone();
    next.apply_sgd(grads, eta)?;
    Ok(next)
}

fn dense_forward(d: &Dense, x: &Matrix) -> Result<Matrix> {
    let mut out = x.matmul(&d.weights)?;
    for r in 0..out.rows() {
        for (v, b) in out.row_mut(r).iter_mut().zip(&d.bias) {
            *v += b;
        }
    }
    Ok(out)
}

fn batch_norm_train(bn: &mut BatchNorm, x: &Matrix) -> (Matrix, NormCache) {
    let (rows, cols) = x.shape();
    let n = rows as f64;
    let mut mean = vec![0.0; cols];
    for row in x.iter_rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; cols];
    for row in x.iter_rows() {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut normalized = Matrix::zeros(rows, cols);
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for j in 0..cols {
            let xh = (x.get(r, j) - mean[j]) * inv_std[j];
            normalized.set(r, j, xh);
            out.set(r, j, bn.scale[j] * xh + bn.shift[j]);
        }
    }

    // Running variance uses the unbiased batch estimate.
    let unbias = n / (n - 1.0);
    for j in 0..cols {
        bn.running_mean[j] = bn.momentum * bn.running_mean[j] + (1.0 - bn.momentum) * mean[j];
        bn.running_var[j] = bn.momentum * bn.running_var[j] + (1.0 - bn.momentum) * var[j] * unbias;
    }
    (
        out,
        NormCache {
            normalized,
            inv_std,
        },
    )
}

fn batch_norm_backward(
    bn: &BatchNorm,
    cache: &NormCache,
    up: &Matrix,
) -> (Matrix, Vec<f64>, Vec<f64>) {
    let (rows, cols) = up.shape();
    let n = rows as f64;
    let mut dscale = vec![0.0; cols];
    let mut dshift = vec![0.0; cols];
    let mut sum_dxh = vec![0.0; cols];
    let mut sum_dxh_xh = vec![0.0; cols];
    for r in 0..rows {
        for j in 0..cols {
            let g = up.get(r, j);
            let xh = cache.normalized.get(r, j);
            dscale[j] += g * xh;
            dshift[j] += g;
            let dxh = g * bn.scale[j];
            sum_dxh[j] += dxh;
            sum_dxh_xh[j] += dxh * xh;
        }
    }
    let mut dx = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for j in 0..cols {
            let dxh = up.get(r, j) * bn.scale[j];
            let xh = cache.normalized.get(r, j);
            dx.set(
                r,
                j,
                cache.inv_std[j] / n * (n * dxh - sum_dxh[j] - xh * sum_dxh_xh[j]),
            );
        }
    }
    (dx, dscale, dshift)
}

/// Binary checkpoint layout, all integers and reals little-endian:
///
/// ```text
/// "EENN"  u32 version  u32 layer_count
/// per layer: u32 tag, then
///   0 dense:      u32 fan_in, u32 fan_out, f64[fan_in*fan_out] weights, f64[fan_out] bias
///   1 relu:       (no payload)
///   2 batch_norm: u32 dim, f64 momentum, f64 eps,
///                 f64[dim] scale, shift, running_mean, running_var
/// ```
pub mod checkpoint {
    use super::*;

    pub const MAGIC: &[u8; 4] = b"EENN";
    pub const VERSION: u32 = 1;

    const TAG_DENSE: u32 = 0;
    const TAG_RELU: u32 = 1;
    const TAG_BATCH_NORM: u32 = 2;

    pub fn encode(params: &NetworkParams) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, params.layers.len() as u32);
        for layer in &params.layers {
            match layer {
                Layer::Dense(d) => {
                    put_u32(&mut out, TAG_DENSE);
                    put_u32(&mut out, d.fan_in() as u32);
                    put_u32(&mut out, d.fan_out() as u32);
                    put_f64s(&mut out, d.weights.data());
                    put_f64s(&mut out, &d.bias);
                }
                Layer::Relu => put_u32(&mut out, TAG_RELU),
                Layer::BatchNorm(bn) => {
                    put_u32(&mut out, TAG_BATCH_NORM);
                    put_u32(&mut out, bn.dim() as u32);
                    put_f64s(&mut out, &[bn.momentum, bn.eps]);
                    put_f64s(&mut out, &bn.scale);
                    put_f64s(&mut out, &bn.shift);
                    put_f64s(&mut out, &bn.running_mean);
                    put_f64s(&mut out, &bn.running_var);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<NetworkParams> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, expected \"EENN\"".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let layer = match r.u32()? {
                TAG_DENSE => {
                    let fan_in = r.u32()? as usize;
                    let fan_out = r.u32()? as usize;
                    let weights = Matrix::from_vec(fan_in, fan_out, r.f64s(fan_in * fan_out)?)?;
                    let bias = r.f64s(fan_out)?;
                    Layer::Dense(Dense { weights, bias })
                }
                TAG_RELU => Layer::Relu,
                TAG_BATCH_NORM => {
                    let dim = r.u32()? as usize;
                    let momentum = r.f64()?;
                    let eps = r.f64()?;
                    Layer::BatchNorm(BatchNorm {
                        scale: r.f64s(dim)?,
                        shift: r.f64s(dim)?,
                        running_mean: r.f64s(dim)?,
                        running_var: r.f64s(dim)?,
                        momentum,
                        eps,
                    })
                }
                tag => return Err(Error::Checkpoint(format!("unknown layer tag {tag}"))),
            };
            layers.push(layer);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        NetworkParams::from_layers(layers)
    }

    fn put_u32(out: &mut Vec<u8>, v: u32) {
        out.extend_from_slice(&v.to_le_bytes());
    }

    fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
        for v in vs {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            let end = self
                .pos
                .checked_add(n)
                .filter(|&e| e <= self.bytes.len())
                .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
            let s = &self.bytes[self.pos..end];
            self.pos = end;
            Ok(s)
        }

        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }

        fn f64(&mut self) -> Result<f64> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }

        fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
            let raw = self.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("layer size overflow".into()))?,
            )?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        }
    }
}
