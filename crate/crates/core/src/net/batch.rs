//! Batched forward/backward passes. Convolutions run as im2col + GEMM;
//! activations live in f64 matrices with rows = sample (x position for the
//! conv stages) and columns = channels/features.

use nalgebra::DMatrix;
use std::sync::OnceLock;

use super::{
    Architecture, BatchNormLayer, ConvLayer, DenseLayer, Gradients, Layer, LayerGrad, ModelParams,
    NetError, Tensor,
};

const POSITIONS: usize = 27;

/// For output position q and kernel tap t (both 0..27), the input position
/// feeding that tap under pad-same, or None when the tap falls outside the
/// 3x3x3 patch.
fn neighbor_table() -> &'static [[Option<usize>; POSITIONS]; POSITIONS] {
    static TABLE: OnceLock<[[Option<usize>; POSITIONS]; POSITIONS]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [[None; POSITIONS]; POSITIONS];
        for qx in 0..3_i64 {
            for qy in 0..3_i64 {
                for qz in 0..3_i64 {
                    let q = ((qx * 3 + qy) * 3 + qz) as usize;
                    for tx in 0..3_i64 {
                        for ty in 0..3_i64 {
                            for tz in 0..3_i64 {
                                let t = ((tx * 3 + ty) * 3 + tz) as usize;
                                let (ix, iy, iz) = (qx + tx - 1, qy + ty - 1, qz + tz - 1);
                                if (0..3).contains(&ix)
                                    && (0..3).contains(&iy)
                                    && (0..3).contains(&iz)
                                {
                                    table[q][t] = Some(((ix * 3 + iy) * 3 + iz) as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
        table
    })
}

fn weights_f64(w: &[f32], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_iterator(rows, cols, w.iter().map(|&x| x as f64))
}

/// Gathers the padded 27-tap neighborhoods: (B*27, C) -> (B*27, 27*C).
fn im2col(x: &DMatrix<f64>, batch: usize, channels: usize) -> DMatrix<f64> {
    let table = neighbor_table();
    let mut m = DMatrix::zeros(batch * POSITIONS, POSITIONS * channels);
    for s in 0..batch {
        for q in 0..POSITIONS {
            let row = s * POSITIONS + q;
            for (t, entry) in table[q].iter().enumerate() {
                if let Some(p) = entry {
                    let src = s * POSITIONS + p;
                    for c in 0..channels {
                        m[(row, t * channels + c)] = x[(src, c)];
                    }
                }
            }
        }
    }
    m
}

/// Adjoint of `im2col`: scatter-adds tap gradients back onto inputs.
fn col2im(dm: &DMatrix<f64>, batch: usize, channels: usize) -> DMatrix<f64> {
    let table = neighbor_table();
    let mut dx = DMatrix::zeros(batch * POSITIONS, channels);
    for s in 0..batch {
        for q in 0..POSITIONS {
            let row = s * POSITIONS + q;
            for (t, entry) in table[q].iter().enumerate() {
                if let Some(p) = entry {
                    let dst = s * POSITIONS + p;
                    for c in 0..channels {
                        dx[(dst, c)] += dm[(row, t * channels + c)];
                    }
                }
            }
        }
    }
    dx
}

fn add_bias(out: &mut DMatrix<f64>, bias: &[f32]) {
    for r in 0..out.nrows() {
        for (c, &b) in bias.iter().enumerate() {
            out[(r, c)] += b as f64;
        }
    }
}

fn relu(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.map(|v| v.max(0.0))
}

/// d(relu)/dx applied to an upstream gradient, using the activation output
/// (positive exactly where the pre-activation was positive).
fn relu_backward(d: &DMatrix<f64>, activated: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = d.clone();
    for r in 0..out.nrows() {
        for c in 0..out.ncols() {
            if activated[(r, c)] <= 0.0 {
                out[(r, c)] = 0.0;
            }
        }
    }
    out
}

struct BnForward {
    y: DMatrix<f64>,
    xhat: DMatrix<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

fn bn_forward(bn: &BatchNormLayer, x: &DMatrix<f64>, train: bool) -> BnForward {
    let n = x.nrows() as f64;
    let c = x.ncols();
    let (mean, var): (Vec<f64>, Vec<f64>) = if train {
        let mean: Vec<f64> = (0..c).map(|j| x.column(j).sum() / n).collect();
        let var: Vec<f64> = (0..c)
            .map(|j| x.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n)
            .collect();
        (mean, var)
    } else {
        (
            bn.running_mean.iter().map(|&v| v as f64).collect(),
            bn.running_var.iter().map(|&v| v as f64).collect(),
        )
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut xhat = DMatrix::zeros(x.nrows(), c);
    let mut y = DMatrix::zeros(x.nrows(), c);
    for j in 0..c {
        let (g, b) = (bn.gamma[j] as f64, bn.beta[j] as f64);
        for i in 0..x.nrows() {
            let h = (x[(i, j)] - mean[j]) * inv_std[j];
            xhat[(i, j)] = h;
            y[(i, j)] = g * h + b;
        }
    }
    BnForward { y, xhat, inv_std, batch_mean: mean, batch_var: var }
}

/// Reverse pass through batch normalization in train mode. The returned
/// input gradient includes the terms from differentiating the batch mean
/// and variance.
fn bn_backward(
    bn: &BatchNormLayer,
    fwd: &BnForward,
    dy: &DMatrix<f64>,
) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let n = dy.nrows() as f64;
    let c = dy.ncols();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dx = DMatrix::zeros(dy.nrows(), c);
    for j in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for i in 0..dy.nrows() {
            sum_dy += dy[(i, j)];
            sum_dy_xhat += dy[(i, j)] * fwd.xhat[(i, j)];
        }
        dgamma[j] = sum_dy_xhat;
        dbeta[j] = sum_dy;
        let scale = bn.gamma[j] as f64 * fwd.inv_std[j];
        for i in 0..dy.nrows() {
            dx[(i, j)] =
                scale * (dy[(i, j)] - sum_dy / n - fwd.xhat[(i, j)] * sum_dy_xhat / n);
        }
    }
    (dx, dgamma, dbeta)
}

/// Everything the CNN reverse pass needs from the forward pass.
pub struct CnnCache {
    batch: usize,
    train: bool,
    cols: Vec<DMatrix<f64>>,
    bn: Vec<BnForward>,
    pub(crate) relu1: DMatrix<f64>,
    relu2: DMatrix<f64>,
    pub(crate) pre_flatten: DMatrix<f64>,
    flat: DMatrix<f64>,
    hidden: DMatrix<f64>,
}

struct CnnWiring<'a> {
    conv: [&'a ConvLayer; 3],
    bn: [&'a BatchNormLayer; 3],
    dense: [&'a DenseLayer; 2],
}

fn cnn_wiring(params: &ModelParams) -> Result<CnnWiring<'_>, NetError> {
    if params.arch != Architecture::PatchCnn {
        return Err(NetError::ShapeMismatch("params are not a patch CNN".into()));
    }
    let e = |msg: &str| NetError::ShapeMismatch(msg.to_string());
    if params.layers.len() != 8 {
        return Err(e("patch CNN needs 8 layers: 3x(conv, bn) + 2 dense"));
    }
    let mut conv = Vec::new();
    let mut bn = Vec::new();
    for i in 0..3 {
        match (&params.layers[2 * i], &params.layers[2 * i + 1]) {
            (Layer::Conv3(c), Layer::BatchNorm(b)) => {
                if b.channels != c.out_ch {
                    return Err(e("batchnorm width does not match conv output"));
                }
                conv.push(c);
                bn.push(b);
            }
            _ => return Err(e("expected alternating conv3/batchnorm layers")),
        }
    }
    let dense: Vec<&DenseLayer> = match (&params.layers[6], &params.layers[7]) {
        (Layer::Dense(a), Layer::Dense(b)) => vec![a, b],
        _ => return Err(e("expected two trailing dense layers")),
    };
    if conv[1].in_ch != conv[0].out_ch
        || conv[2].in_ch != conv[1].out_ch
        || conv[1].out_ch != conv[2].out_ch
        || conv[0].out_ch != conv[1].out_ch
    {
        return Err(e("conv channel widths do not compose"));
    }
    if dense[0].in_dim != POSITIONS * conv[2].out_ch || dense[1].in_dim != dense[0].out_dim {
        return Err(e("dense widths do not compose with the flattened conv output"));
    }
    Ok(CnnWiring { conv: [conv[0], conv[1], conv[2]], bn: [bn[0], bn[1], bn[2]], dense: [dense[0], dense[1]] })
}

fn patches_to_matrix(patches: &[Tensor], in_ch: usize) -> Result<DMatrix<f64>, NetError> {
    let b = patches.len();
    let mut x = DMatrix::zeros(b * POSITIONS, in_ch);
    for (s, p) in patches.iter().enumerate() {
        if p.shape() != [3, 3, 3, in_ch] {
            return Err(NetError::ShapeMismatch(format!(
                "patch shape {:?}, expected [3, 3, 3, {in_ch}]",
                p.shape()
            )));
        }
        for q in 0..POSITIONS {
            for c in 0..in_ch {
                x[(s * POSITIONS + q, c)] = p.data()[q * in_ch + c];
            }
        }
    }
    Ok(x)
}

fn conv_forward(conv: &ConvLayer, x: &DMatrix<f64>, batch: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = im2col(x, batch, conv.in_ch);
    let w = weights_f64(&conv.weight, POSITIONS * conv.in_ch, conv.out_ch);
    let mut out = &m * w;
    add_bias(&mut out, &conv.bias);
    (out, m)
}

/// Batched CNN forward. Output rows are per-sample coefficient vectors.
pub fn cnn_forward_batch(
    params: &ModelParams,
    patches: &[Tensor],
    train: bool,
) -> Result<(DMatrix<f64>, CnnCache), NetError> {
    let wiring = cnn_wiring(params)?;
    let batch = patches.len();
    let x0 = patches_to_matrix(patches, wiring.conv[0].in_ch)?;

    let (c1, m1) = conv_forward(wiring.conv[0], &x0, batch);
    let bn1 = bn_forward(wiring.bn[0], &c1, train);
    let r1 = relu(&bn1.y);

    let (c2, m2) = conv_forward(wiring.conv[1], &r1, batch);
    let bn2 = bn_forward(wiring.bn[1], &c2, train);
    let r2 = relu(&bn2.y);

    let (c3, m3) = conv_forward(wiring.conv[2], &r2, batch);
    let bn3 = bn_forward(wiring.bn[2], &c3, train);

    // Residual: the third block's normalized output plus the first block's
    // activation, then the final ReLU before flattening.
    let pre_flatten = relu(&(&bn3.y + &r1));

    let ch = wiring.conv[2].out_ch;
    let mut flat = DMatrix::zeros(batch, POSITIONS * ch);
    for s in 0..batch {
        for q in 0..POSITIONS {
            for c in 0..ch {
                flat[(s, q * ch + c)] = pre_flatten[(s * POSITIONS + q, c)];
            }
        }
    }

    let w_d1 = weights_f64(&wiring.dense[0].weight, wiring.dense[0].in_dim, wiring.dense[0].out_dim);
    let mut h_pre = &flat * w_d1;
    add_bias(&mut h_pre, &wiring.dense[0].bias);
    let hidden = relu(&h_pre);

    let w_d2 = weights_f64(&wiring.dense[1].weight, wiring.dense[1].in_dim, wiring.dense[1].out_dim);
    let mut out = &hidden * w_d2;
    add_bias(&mut out, &wiring.dense[1].bias);

    let cache = CnnCache {
        batch,
        train,
        cols: vec![m1, m2, m3],
        bn: vec![bn1, bn2, bn3],
        relu1: r1,
        relu2: r2,
        pre_flatten,
        flat,
        hidden,
    };
    Ok((out, cache))
}

fn dense_backward(
    dense: &DenseLayer,
    input: &DMatrix<f64>,
    d_out: &DMatrix<f64>,
) -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
    let dw = input.transpose() * d_out;
    let db: Vec<f64> = (0..d_out.ncols()).map(|j| d_out.column(j).sum()).collect();
    let w = weights_f64(&dense.weight, dense.in_dim, dense.out_dim);
    let dx = d_out * w.transpose();
    // dw is (in_dim, out_dim); flatten row-major to match the weight layout.
    let mut dw_flat = vec![0.0; dense.in_dim * dense.out_dim];
    for i in 0..dense.in_dim {
        for j in 0..dense.out_dim {
            dw_flat[i * dense.out_dim + j] = dw[(i, j)];
        }
    }
    (dw_flat, db, dx)
}

fn conv_backward(
    conv: &ConvLayer,
    cols: &DMatrix<f64>,
    d_out: &DMatrix<f64>,
    batch: usize,
) -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
    let dw = cols.transpose() * d_out;
    let db: Vec<f64> = (0..conv.out_ch).map(|j| d_out.column(j).sum()).collect();
    let w = weights_f64(&conv.weight, POSITIONS * conv.in_ch, conv.out_ch);
    let dm = d_out * w.transpose();
    let dx = col2im(&dm, batch, conv.in_ch);
    let mut dw_flat = vec![0.0; conv.weight.len()];
    for i in 0..POSITIONS * conv.in_ch {
        for j in 0..conv.out_ch {
            dw_flat[i * conv.out_ch + j] = dw[(i, j)];
        }
    }
    (dw_flat, db, dx)
}

/// Reverse pass through the CNN given d(loss)/d(output).
pub fn cnn_backward_batch(
    params: &ModelParams,
    cache: &CnnCache,
    d_out: &DMatrix<f64>,
) -> Gradients {
    let wiring = cnn_wiring(params).expect("cache was built from these params");
    assert!(cache.train, "reverse pass requires a train-mode forward");
    let batch = cache.batch;

    let (dw_d2, db_d2, dh) = dense_backward(wiring.dense[1], &cache.hidden, d_out);
    let dh = relu_backward(&dh, &cache.hidden);
    let (dw_d1, db_d1, dflat) = dense_backward(wiring.dense[0], &cache.flat, &dh);

    let ch = wiring.conv[2].out_ch;
    let mut d_pre_flatten = DMatrix::zeros(batch * POSITIONS, ch);
    for s in 0..batch {
        for q in 0..POSITIONS {
            for c in 0..ch {
                d_pre_flatten[(s * POSITIONS + q, c)] = dflat[(s, q * ch + c)];
            }
        }
    }
    let d_sum = relu_backward(&d_pre_flatten, &cache.pre_flatten);

    // Residual split: gradient flows to both the third BN output and the
    // first block's activation.
    let (dc3, dg3, db3) = bn_backward(wiring.bn[2], &cache.bn[2], &d_sum);
    let (dw3, dbias3, dr2) = conv_backward(wiring.conv[2], &cache.cols[2], &dc3, batch);

    let db2_in = relu_backward(&dr2, &cache.relu2);
    let (dc2, dg2, db2) = bn_backward(wiring.bn[1], &cache.bn[1], &db2_in);
    let (dw2, dbias2, dr1_conv) = conv_backward(wiring.conv[1], &cache.cols[1], &dc2, batch);

    let dr1_total = dr1_conv + &d_sum;
    let db1_in = relu_backward(&dr1_total, &cache.relu1);
    let (dc1, dg1, db1) = bn_backward(wiring.bn[0], &cache.bn[0], &db1_in);
    let (dw1, dbias1, _) = conv_backward(wiring.conv[0], &cache.cols[0], &dc1, batch);

    Gradients {
        layers: vec![
            LayerGrad::Conv3 { weight: dw1, bias: dbias1 },
            LayerGrad::BatchNorm { gamma: dg1, beta: db1 },
            LayerGrad::Conv3 { weight: dw2, bias: dbias2 },
            LayerGrad::BatchNorm { gamma: dg2, beta: db2 },
            LayerGrad::Conv3 { weight: dw3, bias: dbias3 },
            LayerGrad::BatchNorm { gamma: dg3, beta: db3 },
            LayerGrad::Dense { weight: dw_d1, bias: db_d1 },
            LayerGrad::Dense { weight: dw_d2, bias: db_d2 },
        ],
    }
}

/// Folds the batch statistics recorded in a train-mode forward into the
/// running mean/variance of each batch-norm layer.
pub fn update_bn_running(params: &mut ModelParams, cache: &CnnCache) {
    assert!(cache.train);
    let mut bn_idx = 0;
    for layer in &mut params.layers {
        if let Layer::BatchNorm(bn) = layer {
            let fwd = &cache.bn[bn_idx];
            for j in 0..bn.channels {
                let m = bn.momentum;
                bn.running_mean[j] =
                    ((1.0 - m) * bn.running_mean[j] as f64 + m * fwd.batch_mean[j]) as f32;
                bn.running_var[j] =
                    ((1.0 - m) * bn.running_var[j] as f64 + m * fwd.batch_var[j]) as f32;
            }
            bn_idx += 1;
        }
    }
}

/// Everything the MLP reverse pass needs from the forward pass: the input
/// and each activated hidden layer.
pub struct MlpCache {
    activations: Vec<DMatrix<f64>>,
}

fn mlp_wiring(params: &ModelParams) -> Result<Vec<&DenseLayer>, NetError> {
    let e = |msg: String| NetError::ShapeMismatch(msg);
    if params.layers.is_empty() {
        return Err(e("dense chain has no layers".into()));
    }
    let mut dense = Vec::new();
    for layer in &params.layers {
        match layer {
            Layer::Dense(d) => dense.push(d),
            _ => return Err(e("voxel MLP must contain only dense layers".into())),
        }
    }
    for w in dense.windows(2) {
        if w[0].out_dim != w[1].in_dim {
            return Err(e(format!(
                "dense widths do not compose: {} -> {}",
                w[0].out_dim, w[1].in_dim
            )));
        }
    }
    Ok(dense)
}

/// Batched MLP forward over per-voxel SH vectors.
pub fn mlp_forward_batch(
    params: &ModelParams,
    inputs: &[Tensor],
) -> Result<(DMatrix<f64>, MlpCache), NetError> {
    let dense = mlp_wiring(params)?;
    let in_dim = dense[0].in_dim;
    let batch = inputs.len();
    let mut x = DMatrix::zeros(batch, in_dim);
    for (s, t) in inputs.iter().enumerate() {
        if t.data().len() != in_dim {
            return Err(NetError::ShapeMismatch(format!(
                "input length {}, expected {in_dim}",
                t.data().len()
            )));
        }
        for (j, &v) in t.data().iter().enumerate() {
            x[(s, j)] = v;
        }
    }
    let mut activations = vec![x];
    for (i, d) in dense.iter().enumerate() {
        let w = weights_f64(&d.weight, d.in_dim, d.out_dim);
        let mut out = activations.last().unwrap() * w;
        add_bias(&mut out, &d.bias);
        if i + 1 < dense.len() {
            out = relu(&out);
        }
        activations.push(out);
    }
    let out = activations.pop().unwrap();
    Ok((out, MlpCache { activations }))
}

/// Reverse pass through the dense chain.
pub fn mlp_backward_batch(
    params: &ModelParams,
    cache: &MlpCache,
    d_out: &DMatrix<f64>,
) -> Gradients {
    let dense = mlp_wiring(params).expect("cache was built from these params");
    let mut grads: Vec<LayerGrad> = Vec::with_capacity(dense.len());
    let mut d = d_out.clone();
    for (i, layer) in dense.iter().enumerate().rev() {
        let input = &cache.activations[i];
        let (dw, db, dx) = dense_backward(layer, input, &d);
        grads.push(LayerGrad::Dense { weight: dw, bias: db });
        if i > 0 {
            // The stored activation is the ReLU output feeding this layer.
            d = relu_backward(&dx, input);
        }
    }
    grads.reverse();
    Gradients { layers: grads }
}
