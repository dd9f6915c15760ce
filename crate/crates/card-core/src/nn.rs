//! Minimal dense feed-forward networks with exact manual backpropagation.
//!
//! Two concrete architectures are used downstream: a 3-layer conditional-mean
//! regressor (128 and 64 sigmoid units) and a 4-layer noise-prediction
//! network (three softplus layers of 64 units, identity output). Gradients
//! are reverse-mode and exact; the optimizer is bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledSample;
use crate::error::{Error, Result};
use crate::rng::DetRng;

pub const CHECKPOINT_SCHEMA: &str = "densenet-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Softplus,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(z),
            Activation::Softplus => softplus(z),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z` (the post-activation value `a` is
    /// available for sigmoid's cheaper form).
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Softplus => sigmoid(z),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    // ln(1 + e^z) = max(z, 0) + ln(1 + e^-|z|)
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// One affine layer: row-major `out x in` weights plus bias and activation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    fn init(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut DetRng) -> Self {
        // uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) keeps pre-activations in
        // the responsive range of sigmoid/softplus.
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        let bias = (0..out_dim).map(|_| rng.uniform_in(-bound, bound)).collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
            activation,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNet {
    pub schema: String,
    pub layers: Vec<DenseLayer>,
}

/// Per-layer pre/post activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("cache holds at least one layer")
    }
}

/// Gradients congruent to a `DenseNet`'s parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub d_weight: Vec<Vec<f64>>,
    pub d_bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            d_weight: net.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            d_bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.d_weight.iter_mut().zip(&other.d_weight) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.d_bias.iter_mut().zip(&other.d_bias) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.d_weight.iter_mut().flatten() {
            *g *= c;
        }
        for g in self.d_bias.iter_mut().flatten() {
            *g *= c;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_weight.iter().flatten().all(|g| g.is_finite())
            && self.d_bias.iter().flatten().all(|g| g.is_finite())
    }
}

impl DenseNet {
    /// `dims` lists layer widths input-first, e.g. `[5, 64, 64, 64, 2]`.
    /// All layers but the last use `hidden`; the last uses `output`.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut DetRng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == dims.len() { output } else { hidden };
                DenseLayer::init(w[0], w[1], act, rng)
            })
            .collect();
        Self {
            schema: CHECKPOINT_SCHEMA.to_string(),
            layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
                context: "network input",
            });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut a: Vec<f64> = input.to_vec();
        for layer in &self.layers {
            let mut z = layer.bias.clone();
            for (o, z_o) in z.iter_mut().enumerate() {
                let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                let mut acc = 0.0;
                for (w, x) in row.iter().zip(&a) {
                    acc += w * x;
                }
                *z_o += acc;
            }
            let act: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(z);
            post.push(act.clone());
            a = act;
        }
        Ok((
            a,
            ForwardCache {
                input: input.to_vec(),
                pre,
                post,
            },
        ))
    }

    /// Forward pass without retaining the cache.
    pub fn infer(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.0)
    }

    /// Exact reverse-mode gradients for the scalar loss whose gradient with
    /// respect to the network output is `output_grad`. Returns parameter
    /// gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        if cache.pre.len() != self.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: self.layers.len(),
                got: cache.pre.len(),
                context: "cache layer count",
            });
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: output_grad.len(),
                context: "output gradient",
            });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut da: Vec<f64> = output_grad.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            if cache.pre[k].len() != layer.out_dim {
                return Err(Error::DimensionMismatch {
                    expected: layer.out_dim,
                    got: cache.pre[k].len(),
                    context: "stale forward cache",
                });
            }
            let a_prev: &[f64] = if k == 0 { &cache.input } else { &cache.post[k - 1] };
            let mut dz = vec![0.0; layer.out_dim];
            for o in 0..layer.out_dim {
                dz[o] = da[o] * layer.activation.derivative(cache.pre[k][o], cache.post[k][o]);
            }
            for o in 0..layer.out_dim {
                let row = &mut grads.d_weight[k][o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, x) in row.iter_mut().zip(a_prev) {
                    *g += dz[o] * x;
                }
                grads.d_bias[k][o] += dz[o];
            }
            let mut d_prev = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (d, w) in d_prev.iter_mut().zip(row) {
                    *d += dz[o] * w;
                }
            }
            da = d_prev;
        }
        Ok((grads, da))
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: DenseNet = serde_json::from_str(s)?;
        if net.schema != CHECKPOINT_SCHEMA {
            return Err(Error::InvalidParameter(format!(
                "unsupported checkpoint schema {:?}",
                net.schema
            )));
        }
        for w in net.layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::InvalidParameter(
                    "layer dimensions do not chain".into(),
                ));
            }
        }
        Ok(net)
    }
}

/// Bias-corrected Adam state, shaped like the network it optimizes.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(net: &DenseNet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }
}

/// One Adam update. Non-finite gradients reject the update.
pub fn adam_step(net: &mut DenseNet, state: &mut AdamState, grads: &Gradients) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Divergence {
            step: state.step,
            detail: "non-finite gradient".into(),
        });
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (k, layer) in net.layers.iter_mut().enumerate() {
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
                v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
            }
        };
        update(
            &mut layer.weight,
            &grads.d_weight[k],
            &mut state.m.d_weight[k],
            &mut state.v.d_weight[k],
        );
        update(
            &mut layer.bias,
            &grads.d_bias[k],
            &mut state.m.d_bias[k],
            &mut state.v.d_bias[k],
        );
    }
    if !net.all_finite() {
        return Err(Error::Divergence {
            step: state.step,
            detail: "non-finite parameter after update".into(),
        });
    }
    Ok(())
}

pub fn one_hot(x: usize, n_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_classes];
    v[x.min(n_classes - 1)] = 1.0;
    v
}

/// Result of conditional-mean pretraining.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub net: DenseNet,
    /// Mean squared error (summed over output coordinates, averaged over
    /// samples) per epoch.
    pub loss_curve: Vec<f64>,
    pub final_mse: f64,
}

/// Trains the 3-layer conditional-mean network f_phi mapping one-hot(x) to
/// an estimate of E[y | x]. Hidden widths 128 and 64, sigmoid on all but the
/// last layer, Adam at lr 1e-4, batch 128.
pub fn pretrain_cond_mean(
    samples: &[LabeledSample],
    n_classes: usize,
    epochs: usize,
    seed: u64,
) -> Result<Pretrained> {
    pretrain_cond_mean_with(samples, n_classes, epochs, 128, 1e-4, seed)
}

pub fn pretrain_cond_mean_with(
    samples: &[LabeledSample],
    n_classes: usize,
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Pretrained> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("no training samples".into()));
    }
    let mut init_rng = DetRng::with_stream(seed, 1000);
    let mut net = DenseNet::new(
        &[n_classes, 128, 64, 2],
        Activation::Sigmoid,
        Activation::Identity,
        &mut init_rng,
    );
    let mut state = AdamState::new(&net, lr);
    let mut loss_curve = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..epochs {
        let mut shuffle_rng = DetRng::with_stream(seed, 2000 + epoch as u64);
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut grads = Gradients::zeros_like(&net);
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let s = &samples[idx];
                let input = one_hot(s.x, n_classes);
                let (out, cache) = net.forward(&input)?;
                let mut out_grad = vec![0.0; 2];
                for c in 0..2 {
                    let r = out[c] - s.y0[c];
                    batch_loss += r * r;
                    out_grad[c] = 2.0 * r / chunk.len() as f64;
                }
                let (g, _) = net.backward(&cache, &out_grad)?;
                grads.accumulate(&g);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    step: state.step,
                    detail: format!("non-finite pretraining loss at epoch {epoch}"),
                });
            }
            adam_step(&mut net, &mut state, &grads)?;
            epoch_loss += batch_loss;
        }
        loss_curve.push(epoch_loss / samples.len() as f64);
    }
    let final_mse = mse_cond_mean(&net, samples, n_classes)?;
    Ok(Pretrained {
        net,
        loss_curve,
        final_mse,
    })
}

/// MSE of the conditional-mean network over a sample set (summed over the
/// two output coordinates, averaged over samples).
pub fn mse_cond_mean(net: &DenseNet, samples: &[LabeledSample], n_classes: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut outputs: Vec<Option<Vec<f64>>> = vec![None; n_classes];
    for s in samples {
        let out = match &outputs[s.x] {
            Some(o) => o.clone(),
            None => {
                let o = net.infer(&one_hot(s.x, n_classes))?;
                outputs[s.x] = Some(o.clone());
                o
            }
        };
        total += (out[0] - s.y0[0]).powi(2) + (out[1] - s.y0[1]).powi(2);
    }
    Ok(total / samples.len() as f64)
}
