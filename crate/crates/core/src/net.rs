//! Reference math for fully-connected stacks: forward evaluation and
//! reverse-mode gradients, per example and per batch.
//!
//! This is the ground truth the rest of the crate is checked against. All
//! operations are pure functions of their inputs and hold no global state,
//! so they are safe to call concurrently on shared immutable models.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, DenseTensor};

/// Elementwise activation applied after each layer's matrix product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative with respect to the pre-activation.
    /// The ReLU subgradient at exactly 0 is fixed to 0 so that gradients
    /// are deterministic.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Per-example loss at the top of the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Loss {
    /// `0.5 * ||y_hat - t||^2`; smooth everywhere, which keeps the
    /// finite-difference checks tight.
    #[default]
    SquaredError,
    /// Softmax cross-entropy against a dense target distribution.
    CrossEntropy,
}

/// One fully-connected layer: a `(fan_in x fan_out)` weight and an
/// activation. No bias term; the stacks modeled here do not need one.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub weight: DenseTensor,
    pub activation: Activation,
}

impl LayerParams {
    pub fn new(weight: DenseTensor, activation: Activation) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::Config(format!(
                "layer weight must be rank 2, got shape {:?}",
                weight.shape()
            )));
        }
        Ok(Self { weight, activation })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Everything backprop needs from a forward pass: each layer's input, each
/// layer's pre-activation, and the final output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layer_inputs: Vec<DenseTensor>,
    pub pre_activations: Vec<DenseTensor>,
    pub output: DenseTensor,
}

/// Per-example weight gradients: `per_example[i][m]` is example `i`'s
/// gradient for layer `m`, shaped exactly like that layer's weight.
#[derive(Debug, Clone)]
pub struct ExampleGradients {
    pub per_example: Vec<Vec<DenseTensor>>,
}

impl ExampleGradients {
    pub fn batch_size(&self) -> usize {
        self.per_example.len()
    }

    pub fn num_layers(&self) -> usize {
        self.per_example.first().map_or(0, |g| g.len())
    }
}

fn validate_stack(model: &[LayerParams], batch: &DenseTensor) -> Result<()> {
    if model.is_empty() {
        return Err(Error::Config("model has no layers".into()));
    }
    if batch.shape().len() != 2 {
        return Err(Error::Config(format!(
            "batch must be rank 2 (B x fan_in), got shape {:?}",
            batch.shape()
        )));
    }
    let mut width = batch.cols();
    for (index, layer) in model.iter().enumerate() {
        if layer.fan_in() != width {
            return Err(Error::LayerDimMismatch {
                index,
                details: format!("expects fan_in {}, got {}", layer.fan_in(), width),
            });
        }
        width = layer.fan_out();
    }
    Ok(())
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn per_example_loss(output: &DenseTensor, targets: &DenseTensor, loss: Loss) -> Vec<f64> {
    let b = output.rows();
    (0..b)
        .map(|i| {
            let y = output.row(i);
            let t = targets.row(i);
            match loss {
                Loss::SquaredError => {
                    0.5 * y
                        .iter()
                        .zip(t.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                }
                Loss::CrossEntropy => {
                    let p = softmax_row(y);
                    -t.iter().zip(p.iter()).map(|(ti, pi)| ti * pi.ln()).sum::<f64>()
                }
            }
        })
        .collect()
}

/// Gradient of the summed loss with respect to the network output, one row
/// per example.
fn output_gradient(output: &DenseTensor, targets: &DenseTensor, loss: Loss) -> DenseTensor {
    let (b, n) = (output.rows(), output.cols());
    let mut g = DenseTensor::zeros(vec![b, n]);
    for i in 0..b {
        let y = output.row(i);
        let t = targets.row(i);
        let row = match loss {
            Loss::SquaredError => y.iter().zip(t.iter()).map(|(a, b)| a - b).collect::<Vec<_>>(),
            Loss::CrossEntropy => {
                let p = softmax_row(y);
                // Exact for target rows summing to 1.
                p.iter().zip(t.iter()).map(|(pi, ti)| pi - ti).collect()
            }
        };
        g.row_mut(i).copy_from_slice(&row);
    }
    g
}

/// Runs the stack over a `(B x fan_in)` batch, returning each example's
/// loss and the caches backprop needs.
pub fn forward(
    model: &[LayerParams],
    batch: &DenseTensor,
    targets: &DenseTensor,
    loss: Loss,
) -> Result<(Vec<f64>, ForwardCache)> {
    validate_stack(model, batch)?;
    let last = model.len() - 1;
    if targets.shape() != [batch.rows(), model[last].fan_out()] {
        return Err(Error::LayerDimMismatch {
            index: last,
            details: format!(
                "targets shape {:?} does not match (B x fan_out) = ({} x {})",
                targets.shape(),
                batch.rows(),
                model[last].fan_out()
            ),
        });
    }

    let mut layer_inputs = Vec::with_capacity(model.len());
    let mut pre_activations = Vec::with_capacity(model.len());
    let mut x = batch.clone();
    for layer in model {
        let z = matmul(&x, &layer.weight);
        let mut y = z.clone();
        for v in y.data_mut() {
            *v = layer.activation.apply(*v);
        }
        layer_inputs.push(x);
        pre_activations.push(z);
        x = y;
    }
    let losses = per_example_loss(&x, targets, loss);
    Ok((
        losses,
        ForwardCache {
            layer_inputs,
            pre_activations,
            output: x,
        },
    ))
}

/// Propagates output gradients back through the stack, producing the
/// pre-activation gradient `dz` for every layer (last to first, returned
/// in layer order).
fn backward_dz(model: &[LayerParams], cache: &ForwardCache, mut dy: DenseTensor) -> Vec<DenseTensor> {
    let mut dzs = vec![DenseTensor::zeros(vec![1]); model.len()];
    for m in (0..model.len()).rev() {
        let z = &cache.pre_activations[m];
        let mut dz = dy;
        for (v, zv) in dz.data_mut().iter_mut().zip(z.data().iter()) {
            *v *= model[m].activation.derivative(*zv);
        }
        if m > 0 {
            dy = matmul_nt(&dz, &model[m].weight);
        } else {
            dy = DenseTensor::zeros(vec![1]);
        }
        dzs[m] = dz;
    }
    dzs
}

/// Per-example weight gradients: B independent gradient sets, no
/// cross-example aggregation.
pub fn per_example_backprop(
    model: &[LayerParams],
    batch: &DenseTensor,
    targets: &DenseTensor,
    loss: Loss,
) -> Result<ExampleGradients> {
    let (_, cache) = forward(model, batch, targets, loss)?;
    let dy = output_gradient(&cache.output, targets, loss);
    let dzs = backward_dz(model, &cache, dy);
    let b = batch.rows();
    let mut per_example = Vec::with_capacity(b);
    for i in 0..b {
        let mut grads = Vec::with_capacity(model.len());
        for (m, layer) in model.iter().enumerate() {
            let x = cache.layer_inputs[m].row(i);
            let dz = dzs[m].row(i);
            let mut g = DenseTensor::zeros(vec![layer.fan_in(), layer.fan_out()]);
            let gd = g.data_mut();
            let n = dz.len();
            for (a, &xv) in x.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (bb, &dzv) in dz.iter().enumerate() {
                    gd[a * n + bb] = xv * dzv;
                }
            }
            grads.push(g);
        }
        per_example.push(grads);
    }
    Ok(ExampleGradients { per_example })
}

/// Gradient of `sum_i example_weights[i] * L_i` with respect to each weight,
/// computed in a single batched pass.
pub fn per_batch_backprop(
    model: &[LayerParams],
    batch: &DenseTensor,
    targets: &DenseTensor,
    loss: Loss,
    example_weights: &[f64],
) -> Result<Vec<DenseTensor>> {
    if example_weights.len() != batch.rows() {
        return Err(Error::BatchMismatch {
            expected: batch.rows(),
            got: example_weights.len(),
        });
    }
    if example_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Config(
            "example weights must be finite and non-negative".into(),
        ));
    }
    let (_, cache) = forward(model, batch, targets, loss)?;
    let mut dy = output_gradient(&cache.output, targets, loss);
    for (i, &w) in example_weights.iter().enumerate() {
        for v in dy.row_mut(i) {
            *v *= w;
        }
    }
    let dzs = backward_dz(model, &cache, dy);
    Ok(model
        .iter()
        .enumerate()
        .map(|(m, _)| matmul_tn(&cache.layer_inputs[m], &dzs[m]))
        .collect())
}

/// Pre-activation gradients for the whole batch, exposed for callers that
/// need to stream per-layer per-example gradients without retaining them.
pub(crate) fn batch_dz(
    model: &[LayerParams],
    batch: &DenseTensor,
    targets: &DenseTensor,
    loss: Loss,
) -> Result<(ForwardCache, Vec<DenseTensor>)> {
    let (_, cache) = forward(model, batch, targets, loss)?;
    let dy = output_gradient(&cache.output, targets, loss);
    let dzs = backward_dz(model, &cache, dy);
    Ok((cache, dzs))
}
