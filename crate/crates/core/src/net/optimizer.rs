//! Adam with bias correction. Moments are kept in f64; parameters are
//! updated in f64 and stored back as f32.

use super::{Gradients, Layer, LayerGrad, ModelParams};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

fn param_array_lens(params: &ModelParams) -> Vec<usize> {
    params
        .layers
        .iter()
        .flat_map(|l| match l {
            Layer::Conv3(c) => vec![c.weight.len(), c.bias.len()],
            Layer::Dense(d) => vec![d.weight.len(), d.bias.len()],
            Layer::BatchNorm(b) => vec![b.gamma.len(), b.beta.len()],
        })
        .collect()
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let lens = param_array_lens(params);
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One Adam update of every trainable array (conv/dense weights and
/// biases, batch-norm gamma/beta; running statistics are not trained).
pub fn sgd_adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) {
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);

    let mut arrays: Vec<&mut [f32]> = Vec::new();
    for layer in &mut params.layers {
        match layer {
            Layer::Conv3(c) => {
                arrays.push(&mut c.weight);
                arrays.push(&mut c.bias);
            }
            Layer::Dense(d) => {
                arrays.push(&mut d.weight);
                arrays.push(&mut d.bias);
            }
            Layer::BatchNorm(b) => {
                arrays.push(&mut b.gamma);
                arrays.push(&mut b.beta);
            }
        }
    }
    let grad_arrays: Vec<&Vec<f64>> = grads
        .layers
        .iter()
        .flat_map(|l| match l {
            LayerGrad::Conv3 { weight, bias } => vec![weight, bias],
            LayerGrad::Dense { weight, bias } => vec![weight, bias],
            LayerGrad::BatchNorm { gamma, beta } => vec![gamma, beta],
        })
        .collect();
    assert_eq!(arrays.len(), grad_arrays.len(), "gradients do not match parameter layout");

    for (a, (w, g)) in arrays.iter_mut().zip(grad_arrays).enumerate() {
        let (m, v) = (&mut state.m[a], &mut state.v[a]);
        for i in 0..w.len() {
            let gi = g[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] = (w[i] as f64 - lr * mhat / (vhat.sqrt() + state.eps)) as f32;
        }
    }
}
