//! Minimal feed-forward networks with reverse-mode gradients.
//!
//! Only what the training engine needs: dense layers, ReLU, softmax
//! cross-entropy with optional class masking, and plain SGD. Gradients
//! *accumulate* into each parameter's `grad` buffer so regularization terms
//! can add their contribution after the data term; callers zero grads at the
//! start of each iteration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

/// Logit value for masked-out classes. exp(MASK - max) underflows to zero for
/// any real logit, so masked classes get zero probability and zero gradient.
pub const MASK_LOGIT: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

/// Anything exposing a flat, stably-ordered parameter list. Implemented by
/// [`Network`] and by the model types that wrap it; the gradient checker and
/// the optimizer are generic over this.
pub trait Parameterized {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;
}

/// A value/gradient pair with a stable identifier.
///
/// Identifiers name parameters across checkpoint save/load and let the
/// optimizer restrict updates to the parameter set that existed when an
/// experience started.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Parameter {
    id: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Parameter {
    pub fn new(id: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Parameter { id: id.into(), value, grad }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Parameter, // in_dim x out_dim
    pub bias: Parameter,   // 1 x out_dim
    pub activation: Activation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
    input_dim: usize,
}

/// Per-layer activations recorded by [`Network::forward`] for the backward
/// pass. `inputs[k]` is what layer `k` consumed; `preacts[k]` its pre-ReLU
/// output.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    preacts: Vec<Matrix>,
    batch: usize,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl Network {
    /// Fully-connected network over `layout = [in, hidden.., out]` with ReLU
    /// on hidden layers and `final_activation` on the last. Weights are
    /// Xavier-uniform (`bound = sqrt(6 / (fan_in + fan_out))`), biases zero.
    pub fn init_with_final(
        layout: &[usize],
        final_activation: Activation,
        seed: u64,
    ) -> Result<Network> {
        if layout.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "network layout needs at least [in, out], got {} entries",
                layout.len()
            )));
        }
        if layout.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("zero-width layer in layout".into()));
        }
        let mut rng = rng::named_stream(seed, "init");
        let mut layers = Vec::with_capacity(layout.len() - 1);
        for k in 0..layout.len() - 1 {
            let (fan_in, fan_out) = (layout[k], layout[k + 1]);
            let weight = xavier(&mut rng, fan_in, fan_out);
            let activation = if k + 1 == layout.len() - 1 {
                final_activation
            } else {
                Activation::Relu
            };
            layers.push(Layer {
                weight: Parameter::new(format!("trunk/l{k}/W"), weight),
                bias: Parameter::new(format!("trunk/l{k}/b"), Matrix::zeros(1, fan_out)),
                activation,
            });
        }
        Ok(Network { layers, input_dim: layout[0] })
    }

    /// Standard classifier body: ReLU hidden layers, identity (logit) output.
    pub fn init(layout: &[usize], seed: u64) -> Result<Network> {
        Self::init_with_final(layout, Activation::Identity, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.weight.value.cols())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Batch forward pass; the returned cache feeds [`Network::backward`].
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "forward: input has {} features, network expects {}",
                x.cols(),
                self.input_dim
            )));
        }
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            preacts: Vec::with_capacity(self.layers.len()),
            batch: x.rows(),
        };
        let mut h = x.clone();
        for layer in &self.layers {
            cache.inputs.push(h.clone());
            let mut z = h.matmul(&layer.weight.value)?;
            z.add_row(&layer.bias.value)?;
            cache.preacts.push(z.clone());
            h = match layer.activation {
                Activation::Identity => z,
                Activation::Relu => {
                    let mut a = z;
                    for v in a.data_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    a
                }
            };
        }
        Ok((h, cache))
    }

    /// Accumulates parameter gradients for `d_out = dL/d(output)` and returns
    /// `dL/d(input)`.
    pub fn backward(&mut self, cache: &ForwardCache, d_out: &Matrix) -> Result<Matrix> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::State(format!(
                "backward: cache covers {} layers, network has {}",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        if d_out.rows() != cache.batch || d_out.cols() != self.output_dim() {
            return Err(Error::Shape(format!(
                "backward: d_out is {}x{}, expected {}x{}",
                d_out.rows(),
                d_out.cols(),
                cache.batch,
                self.output_dim()
            )));
        }
        let mut delta = d_out.clone();
        for (k, layer) in self.layers.iter_mut().enumerate().rev() {
            if let Activation::Relu = layer.activation {
                let pre = &cache.preacts[k];
                for (d, &z) in delta.data_mut().iter_mut().zip(pre.data()) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &cache.inputs[k];
            let dw = input.matmul_tn(&delta)?;
            accumulate(&mut layer.weight.grad, &dw);
            let db = delta.col_sums();
            accumulate(&mut layer.bias.grad, &db);
            delta = delta.matmul_nt(&layer.weight.value)?;
        }
        Ok(delta)
    }

    /// One SGD step over every parameter: `value -= lr * grad`.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        for p in self.params_mut() {
            sgd_update(p, lr);
        }
        Ok(())
    }
}

impl Parameterized for Network {
    fn params(&self) -> Vec<&Parameter> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

pub(crate) fn xavier<R: rand::Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng::uniform_symmetric(rng, bound))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("sized by construction")
}

pub(crate) fn accumulate(into: &mut Matrix, from: &Matrix) {
    debug_assert_eq!((into.rows(), into.cols()), (from.rows(), from.cols()));
    for (a, &b) in into.data_mut().iter_mut().zip(from.data()) {
        *a += b;
    }
}

pub(crate) fn sgd_update(p: &mut Parameter, lr: f64) {
    for (v, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
        *v -= lr * g;
    }
}

/// Mean softmax cross-entropy over a batch, with the matching logit gradient.
///
/// `class_mask[c] == false` pins class `c`'s logit to [`MASK_LOGIT`] before
/// the softmax: it receives zero probability and contributes zero gradient.
/// Uses the max-subtraction trick, so any finite logits are safe.
///
/// Returns `(loss, d_loss/d_logits)`; the gradient is already divided by the
/// batch size.
pub fn softmax_cross_entropy(
    logits: &Matrix,
    targets: &[usize],
    class_mask: Option<&[bool]>,
) -> Result<(f64, Matrix)> {
    let (b, c) = (logits.rows(), logits.cols());
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if targets.len() != b {
        return Err(Error::Shape(format!(
            "cross entropy: {} targets for batch of {b}",
            targets.len()
        )));
    }
    if let Some(mask) = class_mask {
        if mask.len() != c {
            return Err(Error::Shape(format!(
                "cross entropy: mask covers {} classes, logits have {c}",
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument("class mask excludes every class".into()));
        }
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::OutOfRange(format!("target class {t} outside {c} logit columns")));
    }

    let mut d = Matrix::zeros(b, c);
    let mut loss_sum = 0.0;
    let mut masked_row = vec![0.0; c];
    for i in 0..b {
        let row = logits.row(i);
        for j in 0..c {
            let keep = class_mask.map_or(true, |m| m[j]);
            masked_row[j] = if keep { row[j] } else { MASK_LOGIT };
        }
        let max = masked_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..c {
            denom += (masked_row[j] - max).exp();
        }
        let log_denom = denom.ln() + max;
        loss_sum += log_denom - masked_row[targets[i]];
        let d_row = d.row_mut(i);
        for j in 0..c {
            let p = (masked_row[j] - max).exp() / denom;
            d_row[j] = p - if j == targets[i] { 1.0 } else { 0.0 };
        }
    }
    let scale = 1.0 / b as f64;
    for v in d.data_mut() {
        *v *= scale;
    }
    Ok((loss_sum * scale, d))
}
