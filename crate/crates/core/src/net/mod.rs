//! Minimal dense/convolutional network machinery with reverse-mode
//! differentiation, sized for two fixed regressors: a 3x3x3-patch CNN with
//! one residual block predicting the center voxel's fODF coefficients, and
//! a voxel-wise MLP baseline. Parameters are stored as f32 (matching the
//! on-disk format); all arithmetic runs in f64.

mod batch;
mod optimizer;

pub use batch::{cnn_forward_batch, mlp_forward_batch, update_bn_running, CnnCache, MlpCache};
pub use optimizer::{sgd_adam_step, AdamState};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::sh::ShCoeffs;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss weights must satisfy alpha + beta > 0")]
    ZeroLossWeights,
}

/// Dense row-major array, last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NetError> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(NetError::ShapeMismatch(format!(
                "tensor data length {} != shape product {want}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    /// Kernel, flat [3, 3, 3, in_ch, out_ch] with out_ch fastest.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Flat [in_dim, out_dim] with out_dim fastest.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub channels: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub fn identity(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv3(ConvLayer),
    Dense(DenseLayer),
    BatchNorm(BatchNormLayer),
}

/// Which fixed wiring the layer list realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    PatchCnn,
    VoxelMlp,
}

/// Ordered layer parameters plus the architecture tag that fixes how they
/// compose.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub arch: Architecture,
    pub sh_order: usize,
    pub layers: Vec<Layer>,
}

/// Per-layer parameter gradients, aligned with `ModelParams::layers`.
#[derive(Debug, Clone)]
pub enum LayerGrad {
    Conv3 { weight: Vec<f64>, bias: Vec<f64> },
    Dense { weight: Vec<f64>, bias: Vec<f64> },
    BatchNorm { gamma: Vec<f64>, beta: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv3(c) => LayerGrad::Conv3 {
                    weight: vec![0.0; c.weight.len()],
                    bias: vec![0.0; c.bias.len()],
                },
                Layer::Dense(d) => LayerGrad::Dense {
                    weight: vec![0.0; d.weight.len()],
                    bias: vec![0.0; d.bias.len()],
                },
                Layer::BatchNorm(b) => LayerGrad::BatchNorm {
                    gamma: vec![0.0; b.gamma.len()],
                    beta: vec![0.0; b.beta.len()],
                },
            })
            .collect();
        Self { layers }
    }

    fn arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                LayerGrad::Conv3 { weight, bias } => vec![weight, bias],
                LayerGrad::Dense { weight, bias } => vec![weight, bias],
                LayerGrad::BatchNorm { gamma, beta } => vec![gamma, beta],
            })
            .collect()
    }

    pub fn arrays(&self) -> Vec<&Vec<f64>> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                LayerGrad::Conv3 { weight, bias } => vec![weight, bias],
                LayerGrad::Dense { weight, bias } => vec![weight, bias],
                LayerGrad::BatchNorm { gamma, beta } => vec![gamma, beta],
            })
            .collect()
    }

    pub fn scaled_add(&mut self, other: &Gradients, factor: f64) {
        let mut mine = self.arrays_mut();
        let theirs = other.arrays();
        for (a, b) in mine.iter_mut().zip(theirs) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += factor * y;
            }
        }
    }
}

/// Combination weights of the fidelity loss (prediction vs ground truth)
/// and the scan-rescan consistency loss.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, NetError> {
        if !(alpha + beta > 0.0) || alpha < 0.0 || beta < 0.0 {
            return Err(NetError::ZeroLossWeights);
        }
        Ok(Self { alpha, beta })
    }
}

/// One training batch: labeled samples for the fidelity term and paired
/// scan/rescan samples for the consistency term.
#[derive(Debug, Clone, Default)]
pub struct TrainBatch {
    pub labeled: Vec<(Tensor, ShCoeffs)>,
    pub pairs: Vec<(Tensor, Tensor)>,
}

fn uniform_f32(rng: &mut ChaCha8Rng, scale: f64, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..scale) as f32).collect()
}

/// Patch CNN: conv(45 -> c, pad-same) -> BN -> ReLU -> conv(c -> c) -> BN
/// -> ReLU -> conv(c -> c) -> BN, residual add of the first block output,
/// -> ReLU -> flatten(27 c) -> dense(d) -> ReLU -> dense(45).
/// Weights are fan-in-scaled uniform, quantized to f32.
pub fn init_patch_cnn(conv_channels: usize, dense_width: usize, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_ch = 45;
    let out_dim = 45;
    let mut layers = Vec::new();
    let mut prev = in_ch;
    for _ in 0..3 {
        let fan_in = 27 * prev;
        let scale = 1.0 / (fan_in as f64).sqrt();
        layers.push(Layer::Conv3(ConvLayer {
            in_ch: prev,
            out_ch: conv_channels,
            weight: uniform_f32(&mut rng, scale, 27 * prev * conv_channels),
            bias: vec![0.0; conv_channels],
        }));
        layers.push(Layer::BatchNorm(BatchNormLayer::identity(conv_channels)));
        prev = conv_channels;
    }
    let flat = 27 * conv_channels;
    let scale1 = 1.0 / (flat as f64).sqrt();
    layers.push(Layer::Dense(DenseLayer {
        in_dim: flat,
        out_dim: dense_width,
        weight: uniform_f32(&mut rng, scale1, flat * dense_width),
        bias: vec![0.0; dense_width],
    }));
    let scale2 = 1.0 / (dense_width as f64).sqrt();
    layers.push(Layer::Dense(DenseLayer {
        in_dim: dense_width,
        out_dim,
        weight: uniform_f32(&mut rng, scale2, dense_width * out_dim),
        bias: vec![0.0; out_dim],
    }));
    ModelParams { arch: Architecture::PatchCnn, sh_order: 8, layers }
}

/// Voxel MLP baseline: dense 45 -> 400 -> 45 -> 200 -> 45 with ReLU
/// between layers and a linear output.
pub fn init_voxel_mlp(seed: u64) -> ModelParams {
    init_dense_chain(&[45, 400, 45, 200, 45], seed)
}

/// All-dense chain with the given widths; used by the MLP baseline and by
/// reduced-width gradient checks.
pub fn init_dense_chain(widths: &[usize], seed: u64) -> ModelParams {
    assert!(widths.len() >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for w in widths.windows(2) {
        let scale = 1.0 / (w[0] as f64).sqrt();
        layers.push(Layer::Dense(DenseLayer {
            in_dim: w[0],
            out_dim: w[1],
            weight: uniform_f32(&mut rng, scale, w[0] * w[1]),
            bias: vec![0.0; w[1]],
        }));
    }
    ModelParams { arch: Architecture::VoxelMlp, sh_order: 8, layers }
}

fn matrix_row_to_coeffs(m: &DMatrix<f64>, row: usize, order: usize) -> ShCoeffs {
    let c: Vec<f64> = (0..m.ncols()).map(|j| m[(row, j)]).collect();
    ShCoeffs::new(order, c).expect("network output has the declared coefficient length")
}

/// Single-patch CNN forward pass. `train_mode` switches batch normalization
/// between batch statistics (over the 27 patch positions) and running
/// statistics.
pub fn forward_cnn(
    params: &ModelParams,
    patch: &Tensor,
    train_mode: bool,
) -> Result<ShCoeffs, NetError> {
    let (out, _) = cnn_forward_batch(params, std::slice::from_ref(patch), train_mode)?;
    Ok(matrix_row_to_coeffs(&out, 0, params.sh_order))
}

/// Voxel MLP forward pass on one SH signal vector.
pub fn forward_mlp(params: &ModelParams, signal_sh: &ShCoeffs) -> Result<ShCoeffs, NetError> {
    let input = Tensor::new(vec![signal_sh.values().len()], signal_sh.values().to_vec())?;
    let (out, _) = mlp_forward_batch(params, std::slice::from_ref(&input))?;
    Ok(matrix_row_to_coeffs(&out, 0, params.sh_order))
}

/// Per-sample loss: alpha * sum_km (pred - truth)^2 + beta * sum_km
/// (pred_u - pred_v)^2. The batch mean over samples is taken by the
/// trainer.
pub fn loss(
    pred: &ShCoeffs,
    truth: &ShCoeffs,
    pred_u: &ShCoeffs,
    pred_v: &ShCoeffs,
    w: &LossWeights,
) -> f64 {
    let fidelity: f64 = pred
        .values()
        .iter()
        .zip(truth.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let consistency: f64 = pred_u
        .values()
        .iter()
        .zip(pred_v.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    w.alpha * fidelity + w.beta * consistency
}

/// Forward + reverse pass over a whole batch. Returns the batch loss
/// alpha * mean(loss1) + beta * mean(loss2) and the gradients of every
/// parameter. Batch normalization runs in train mode (batch statistics),
/// and its gradients include the batch-statistics terms.
pub fn backward(
    params: &ModelParams,
    batch: &TrainBatch,
    w: &LossWeights,
) -> Result<(f64, Gradients), NetError> {
    let mut grads = Gradients::zeros_like(params);
    let mut total = 0.0;

    if !batch.labeled.is_empty() && w.alpha != 0.0 {
        let n = batch.labeled.len();
        let patches: Vec<Tensor> = batch.labeled.iter().map(|(p, _)| p.clone()).collect();
        let (out, cache) = forward_dispatch(params, &patches, true)?;
        let mut d_out = DMatrix::zeros(out.nrows(), out.ncols());
        let mut loss1 = 0.0;
        for (i, (_, truth)) in batch.labeled.iter().enumerate() {
            for j in 0..out.ncols() {
                let diff = out[(i, j)] - truth.values()[j];
                loss1 += diff * diff;
                d_out[(i, j)] = w.alpha * 2.0 * diff / n as f64;
            }
        }
        total += w.alpha * loss1 / n as f64;
        let g = backward_dispatch(params, cache, &d_out);
        grads.scaled_add(&g, 1.0);
    }

    if !batch.pairs.is_empty() && w.beta != 0.0 {
        let p = batch.pairs.len();
        // Scan and rescan patches share one forward pass so that batch
        // statistics are computed over both sides jointly.
        let mut patches: Vec<Tensor> = Vec::with_capacity(2 * p);
        for (u, _) in &batch.pairs {
            patches.push(u.clone());
        }
        for (_, v) in &batch.pairs {
            patches.push(v.clone());
        }
        let (out, cache) = forward_dispatch(params, &patches, true)?;
        let mut d_out = DMatrix::zeros(out.nrows(), out.ncols());
        let mut loss2 = 0.0;
        for i in 0..p {
            for j in 0..out.ncols() {
                let diff = out[(i, j)] - out[(p + i, j)];
                loss2 += diff * diff;
                let d = w.beta * 2.0 * diff / p as f64;
                d_out[(i, j)] = d;
                d_out[(p + i, j)] = -d;
            }
        }
        total += w.beta * loss2 / p as f64;
        let g = backward_dispatch(params, cache, &d_out);
        grads.scaled_add(&g, 1.0);
    }

    Ok((total, grads))
}

enum Cache {
    Cnn(CnnCache),
    Mlp(MlpCache),
}

fn forward_dispatch(
    params: &ModelParams,
    patches: &[Tensor],
    train: bool,
) -> Result<(DMatrix<f64>, Cache), NetError> {
    match params.arch {
        Architecture::PatchCnn => {
            let (out, cache) = cnn_forward_batch(params, patches, train)?;
            Ok((out, Cache::Cnn(cache)))
        }
        Architecture::VoxelMlp => {
            let (out, cache) = mlp_forward_batch(params, patches)?;
            Ok((out, Cache::Mlp(cache)))
        }
    }
}

fn backward_dispatch(params: &ModelParams, cache: Cache, d_out: &DMatrix<f64>) -> Gradients {
    match cache {
        Cache::Cnn(c) => batch::cnn_backward_batch(params, &c, d_out),
        Cache::Mlp(c) => batch::mlp_backward_batch(params, &c, d_out),
    }
}
