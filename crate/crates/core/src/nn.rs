//! Dense feed-forward networks with hand-written backpropagation.
//!
//! DP-SGD needs the gradient of every example separately, before any
//! averaging, so the backward pass keeps per-row deltas and can either
//! expand them into one flat gradient per example or reduce them to the
//! batch mean.
//!
//! Parameters are flattened layer by layer: the weight matrix row-major
//! (`outputs x inputs`), then the bias.

use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NETWORK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
            Activation::Linear => 1.0,
        }
    }

    fn init_gain(self) -> f64 {
        match self {
            Activation::Relu => std::f64::consts::SQRT_2,
            Activation::Tanh => 5.0 / 3.0,
            Activation::Sigmoid | Activation::Linear => 1.0,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weights: Array2<f64>,
    bias: Array1<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::Dimension(format!(
                "weights have {} rows but bias has {} entries",
                weights.nrows(),
                bias.len()
            )));
        }
        Ok(Self { weights, bias, activation })
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Intermediate values of a forward pass, needed for backpropagation.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input of every layer; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    /// Pre-activation of the final layer.
    pub fn logits(&self) -> &Array2<f64> {
        self.pre.last().expect("network has layers")
    }
}

/// Per-layer deltas of a backward pass plus the gradient w.r.t. the input.
#[derive(Debug, Clone)]
pub struct Backward {
    deltas: Vec<Array2<f64>>,
    pub grad_input: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetwork {
    layers: Vec<DenseLayer>,
}

impl DenseNetwork {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Dimension(format!(
                    "layer emits {} values but next layer expects {}",
                    pair[0].outputs(),
                    pair[1].inputs()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Fully connected network through `sizes` (input, hidden..., output),
    /// with Kaiming-style uniform fan-in initialisation and zero biases.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidParameter(format!("bad layer sizes {sizes:?}")));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let activation = if i == last { output } else { hidden };
                let bound = activation.init_gain() * (3.0 / w[0] as f64).sqrt();
                let weights = Array2::from_shape_fn((w[1], w[0]), |_| rng.random_range(-bound..=bound));
                DenseLayer { weights, bias: Array1::zeros(w[1]), activation }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }

    pub fn output_activation(&self) -> Activation {
        self.layers.last().unwrap().activation
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::n_params).sum()
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            flat.extend(layer.weights.iter().copied());
            flat.extend(layer.bias.iter().copied());
        }
        flat
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        self.check_param_len(flat.len())?;
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    fn check_param_len(&self, len: usize) -> Result<()> {
        if len != self.n_params() {
            return Err(Error::Dimension(format!(
                "flat vector has {len} entries, network has {} parameters",
                self.n_params()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &ArrayView2<'_, f64>) -> Result<()> {
        if batch.ncols() != self.in_dim() {
            return Err(Error::Dimension(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_batch(&batch)?;
        let mut x = batch.to_owned();
        for layer in &self.layers {
            let mut z = x.dot(&layer.weights.t());
            z += &layer.bias;
            let act = layer.activation;
            z.mapv_inplace(|v| act.apply(v));
            x = z;
        }
        Ok(x)
    }

    pub fn forward_tape(&self, batch: ArrayView2<'_, f64>) -> Result<Tape> {
        self.check_batch(&batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = batch.to_owned();
        for layer in &self.layers {
            let mut z = x.dot(&layer.weights.t());
            z += &layer.bias;
            let act = layer.activation;
            let a = z.mapv(|v| act.apply(v));
            inputs.push(x);
            pre.push(z);
            x = a;
        }
        Ok(Tape { inputs, pre, output: x })
    }

    /// Backpropagates `grad_output` (one row of dL_i/dy per example).
    pub fn backward(&self, tape: &Tape, grad_output: ArrayView2<'_, f64>) -> Result<Backward> {
        if grad_output.dim() != tape.output.dim() {
            return Err(Error::Dimension("gradient shape differs from output shape".into()));
        }
        let last = self.layers.len() - 1;
        let act = self.layers[last].activation;
        let mut delta = grad_output.to_owned();
        Zip::from(&mut delta)
            .and(&tape.pre[last])
            .and(&tape.output)
            .for_each(|d, &z, &a| *d *= act.derivative(z, a));
        self.backward_from_logits(tape, delta)
    }

    /// Backpropagates a gradient given w.r.t. the final pre-activation.
    pub fn backward_from_logits(&self, tape: &Tape, grad_logits: Array2<f64>) -> Result<Backward> {
        if grad_logits.dim() != tape.output.dim() {
            return Err(Error::Dimension("gradient shape differs from output shape".into()));
        }
        let n = self.layers.len();
        let mut deltas = vec![Array2::zeros((0, 0)); n];
        let mut delta = grad_logits;
        for l in (0..n).rev() {
            let grad_in = delta.dot(&self.layers[l].weights);
            deltas[l] = delta;
            if l == 0 {
                return Ok(Backward { deltas, grad_input: grad_in });
            }
            let act = self.layers[l - 1].activation;
            let mut next = grad_in;
            Zip::from(&mut next)
                .and(&tape.pre[l - 1])
                .and(&tape.inputs[l])
                .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            delta = next;
        }
        unreachable!("loop returns at layer 0")
    }

    /// Expands a backward pass into one flat gradient row per example.
    pub fn expand_per_example(&self, tape: &Tape, back: &Backward) -> PerExampleGradients {
        let b = tape.output.nrows();
        let mut grads = Array2::zeros((b, self.n_params()));
        for (i, mut row) in grads.rows_mut().into_iter().enumerate() {
            let row = row.as_slice_mut().expect("standard layout");
            let mut offset = 0;
            for (l, layer) in self.layers.iter().enumerate() {
                let delta = back.deltas[l].row(i);
                let input = tape.inputs[l].row(i);
                let (o, k) = (layer.outputs(), layer.inputs());
                for r in 0..o {
                    let d = delta[r];
                    let dst = &mut row[offset + r * k..offset + (r + 1) * k];
                    for (g, &x) in dst.iter_mut().zip(input.iter()) {
                        *g = d * x;
                    }
                }
                offset += o * k;
                for r in 0..o {
                    row[offset + r] = delta[r];
                }
                offset += o;
            }
        }
        PerExampleGradients { grads }
    }

    /// Reduces a backward pass to the mean gradient over the batch.
    pub fn mean_gradient(&self, tape: &Tape, back: &Backward) -> Vec<f64> {
        let b = tape.output.nrows().max(1) as f64;
        let mut flat = Vec::with_capacity(self.n_params());
        for (l, _) in self.layers.iter().enumerate() {
            let gw = back.deltas[l].t().dot(&tape.inputs[l]);
            flat.extend(gw.iter().map(|g| g / b));
            flat.extend(back.deltas[l].sum_axis(Axis(0)).iter().map(|g| g / b));
        }
        flat
    }

    /// `theta <- theta - learning_rate * gradient`.
    pub fn apply_update(&mut self, gradient: &[f64], learning_rate: f64) -> Result<()> {
        self.check_param_len(gradient.len())?;
        if !(learning_rate > 0.0) {
            return Err(Error::InvalidParameter(format!("learning rate {learning_rate} must be > 0")));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w -= learning_rate * gradient[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|w| w.is_finite()))
    }

    pub fn to_file(&self) -> NetworkFile {
        NetworkFile {
            format_version: NETWORK_FORMAT_VERSION,
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    inputs: l.inputs(),
                    outputs: l.outputs(),
                    activation: l.activation,
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_file(file: &NetworkFile) -> Result<Self> {
        if file.format_version != NETWORK_FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "network format version {} unsupported (expected {NETWORK_FORMAT_VERSION})",
                file.format_version
            )));
        }
        let layers = file
            .layers
            .iter()
            .map(|r| {
                let weights = Array2::from_shape_vec((r.outputs, r.inputs), r.weights.clone())
                    .map_err(|e| Error::ModelFormat(format!("layer weights: {e}")))?;
                let bias = Array1::from(r.bias.clone());
                DenseLayer::new(weights, bias, r.activation)
                    .map_err(|e| Error::ModelFormat(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let net = Self::from_layers(layers).map_err(|e| Error::ModelFormat(e.to_string()))?;
        if !net.is_finite() {
            return Err(Error::ModelFormat("non-finite parameter".into()));
        }
        Ok(net)
    }
}

/// Serialized form of a [`DenseNetwork`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub format_version: u32,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Serialize for DenseNetwork {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_file().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DenseNetwork {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = NetworkFile::deserialize(deserializer)?;
        DenseNetwork::from_file(&file).map_err(serde::de::Error::custom)
    }
}

/// One flat gradient per example, aligned with [`DenseNetwork::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleGradients {
    grads: Array2<f64>,
}

impl PerExampleGradients {
    pub fn from_rows(grads: Array2<f64>) -> Self {
        Self { grads }
    }

    pub fn n_examples(&self) -> usize {
        self.grads.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.grads.ncols()
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.grads
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let start = i * self.grads.ncols();
        &self.grads.as_slice().expect("standard layout")[start..start + self.grads.ncols()]
    }

    pub fn mean(&self) -> Vec<f64> {
        self.grads
            .mean_axis(Axis(0))
            .map(|m| m.to_vec())
            .unwrap_or_else(|| vec![0.0; self.grads.ncols()])
    }

    /// Keeps only the listed examples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self { grads: self.grads.select(Axis(0), indices) }
    }

    /// Concatenates example sets with equal parameter counts.
    pub fn concat(parts: &[PerExampleGradients]) -> Result<Self> {
        let views: Vec<_> = parts.iter().map(|p| p.grads.view()).collect();
        let grads = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Dimension(format!("cannot concatenate gradients: {e}")))?;
        Ok(Self { grads })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Mean over output coordinates of the squared error.
    Mse,
    /// Mean over output coordinates of the binary cross-entropy.
    BinaryCrossEntropy,
}

impl FromStr for Loss {
    type Err = Error;

    fn from_str(tag: &str) -> Result<Self> {
        match tag {
            "mse" => Ok(Loss::Mse),
            "bce" | "binary-cross-entropy" | "binary_cross_entropy" => Ok(Loss::BinaryCrossEntropy),
            other => Err(Error::UnknownLoss(other.to_string())),
        }
    }
}

impl Loss {
    /// Per-example losses and the gradient w.r.t. the network's final
    /// pre-activation. Sigmoid + cross-entropy is evaluated from the logits.
    pub fn evaluate(
        self,
        net: &DenseNetwork,
        tape: &Tape,
        targets: ArrayView2<'_, f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        let out = tape.output();
        if targets.dim() != out.dim() {
            return Err(Error::Dimension(format!(
                "targets have shape {:?}, outputs {:?}",
                targets.dim(),
                out.dim()
            )));
        }
        let k = out.ncols() as f64;
        let logits = tape.logits();
        let act = net.output_activation();
        let mut losses = vec![0.0; out.nrows()];
        let mut grad = Array2::zeros(out.dim());
        for (i, loss_i) in losses.iter_mut().enumerate() {
            for j in 0..out.ncols() {
                let (y, z, t) = (out[[i, j]], logits[[i, j]], targets[[i, j]]);
                let (l, g) = match (self, act) {
                    (Loss::Mse, _) => ((y - t).powi(2), 2.0 * (y - t) * act.derivative(z, y)),
                    (Loss::BinaryCrossEntropy, Activation::Sigmoid) => (softplus(z) - t * z, y - t),
                    (Loss::BinaryCrossEntropy, _) => {
                        let p = y.clamp(1e-12, 1.0 - 1e-12);
                        let l = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
                        (l, (p - t) / (p * (1.0 - p)) * act.derivative(z, y))
                    }
                };
                *loss_i += l / k;
                grad[[i, j]] = g / k;
            }
        }
        Ok((losses, grad))
    }
}

/// Per-example losses of `net` on `batch` against `targets`.
pub fn example_losses(
    net: &DenseNetwork,
    loss: Loss,
    batch: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Result<Vec<f64>> {
    let tape = net.forward_tape(batch)?;
    Ok(loss.evaluate(net, &tape, targets)?.0)
}

pub fn per_example_gradients(
    net: &DenseNetwork,
    loss: Loss,
    batch: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Result<PerExampleGradients> {
    let tape = net.forward_tape(batch)?;
    let (_, grad) = loss.evaluate(net, &tape, targets)?;
    let back = net.backward_from_logits(&tape, grad)?;
    Ok(net.expand_per_example(&tape, &back))
}

/// Mean gradient over the batch, computed without per-example expansion.
pub fn batch_gradient(
    net: &DenseNetwork,
    loss: Loss,
    batch: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Result<Vec<f64>> {
    let tape = net.forward_tape(batch)?;
    let (_, grad) = loss.evaluate(net, &tape, targets)?;
    let back = net.backward_from_logits(&tape, grad)?;
    Ok(net.mean_gradient(&tape, &back))
}

/// Sinusoidal embedding of a step number: interleaved
/// `(sin(t w_k), cos(t w_k))` with `w_k = 10000^(-2k/dim)`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("embedding dimension {dim} must be even and positive")));
    }
    if !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!("step {t} must be non-negative")));
    }
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let w = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        out.push((t * w).sin());
        out.push((t * w).cos());
    }
    Ok(out)
}

/// Concatenates `x` with the embedding of each row's step number.
pub fn with_time_embedding(x: ArrayView2<'_, f64>, steps: &[usize], dim: usize) -> Result<Array2<f64>> {
    if steps.len() != x.nrows() {
        return Err(Error::Dimension("one step number per row required".into()));
    }
    let n = x.ncols();
    let mut out = Array2::zeros((x.nrows(), n + dim));
    out.slice_mut(s![.., ..n]).assign(&x);
    for (i, &t) in steps.iter().enumerate() {
        let e = time_embedding(t as f64, dim)?;
        out.slice_mut(s![i, n..]).assign(&Array1::from(e));
    }
    Ok(out)
}
