//! Dense and convolutional networks with hand-written backpropagation.
//!
//! Parameters live in one flat `f64` vector, layer by layer, weights before
//! biases. Dense weights are row-major `[out][in]`; convolution kernels are
//! `[out][in][k][k]`. Convolution is valid cross-correlation (no kernel flip)
//! and the network output is a log-softmax over [`NUM_CLASSES`] classes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape { channels, height, width }
    }

    pub fn flat(n: usize) -> Self {
        Shape { channels: n, height: 1, width: 1 }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Dense { inputs: usize, outputs: usize, activation: Activation },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, activation: Activation },
    MaxPool2,
    Flatten,
}

impl Layer {
    pub fn dense(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Layer::Dense { inputs, outputs, activation }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, activation: Activation) -> Self {
        Layer::Conv2d { in_channels, out_channels, kernel, activation }
    }

    fn param_count(&self) -> usize {
        match *self {
            Layer::Dense { inputs, outputs, .. } => outputs * inputs + outputs,
            Layer::Conv2d { in_channels, out_channels, kernel, .. } => {
                out_channels * in_channels * kernel * kernel + out_channels
            }
            Layer::MaxPool2 | Layer::Flatten => 0,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Dense { inputs, .. } => inputs,
            Layer::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
            Layer::MaxPool2 | Layer::Flatten => 0,
        }
    }

    fn describe(&self) -> String {
        match *self {
            Layer::Dense { inputs, outputs, activation } => {
                format!("dense({inputs},{outputs},{})", activation.tag())
            }
            Layer::Conv2d { in_channels, out_channels, kernel, activation } => {
                format!("conv({in_channels},{out_channels},{kernel},{})", activation.tag())
            }
            Layer::MaxPool2 => "maxpool2".into(),
            Layer::Flatten => "flatten".into(),
        }
    }
}

/// Layer descriptors plus the input plane shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    /// 784-32-10 perceptron with a ReLU hidden layer.
    pub fn dense_small() -> Self {
        NetworkSpec {
            input: Shape::new(1, 28, 28),
            layers: vec![
                Layer::Flatten,
                Layer::dense(784, 32, Activation::Relu),
                Layer::dense(32, 10, Activation::Identity),
            ],
        }
    }

    /// Two 5x5 conv layers (10, 20 channels) and a 50-unit hidden layer:
    /// 21,840 parameters.
    pub fn cnn_mnist() -> Self {
        Self::two_conv(Shape::new(1, 28, 28), 10, 20, &[50])
    }

    /// Two 5x5 conv layers (16, 32 channels) and a 100-unit hidden layer:
    /// 65,558 parameters.
    pub fn cnn_fashion() -> Self {
        Self::two_conv(Shape::new(1, 28, 28), 16, 32, &[100])
    }

    /// LeNet-5 style network on 3x32x32 inputs: 62,006 parameters.
    pub fn cnn_cifar() -> Self {
        Self::two_conv(Shape::new(3, 32, 32), 6, 16, &[120, 84])
    }

    /// conv → relu → pool → conv → relu → pool → dense layers → log-softmax.
    pub fn two_conv(input: Shape, c1: usize, c2: usize, hidden: &[usize]) -> Self {
        let k = 5;
        let after = |n: usize| ((n - k).div_ceil(2) - k).div_ceil(2);
        let flat = c2 * after(input.height) * after(input.width);
        let mut layers = vec![
            Layer::conv(input.channels, c1, k, Activation::Relu),
            Layer::MaxPool2,
            Layer::conv(c1, c2, k, Activation::Relu),
            Layer::MaxPool2,
            Layer::Flatten,
        ];
        let mut prev = flat;
        for &h in hidden {
            layers.push(Layer::dense(prev, h, Activation::Relu));
            prev = h;
        }
        layers.push(Layer::dense(prev, NUM_CLASSES, Activation::Identity));
        NetworkSpec { input, layers }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "dense-small" => Ok(Self::dense_small()),
            "cnn-mnist" => Ok(Self::cnn_mnist()),
            "cnn-fashion" => Ok(Self::cnn_fashion()),
            "cnn-cifar" => Ok(Self::cnn_cifar()),
            other => Err(Error::InvalidArgument(format!("unknown network `{other}`"))),
        }
    }

    /// Canonical one-line description, the input of [`NetworkSpec::hash`].
    pub fn describe(&self) -> String {
        let mut s = format!("in={}x{}x{}", self.input.channels, self.input.height, self.input.width);
        for l in &self.layers {
            s.push(';');
            s.push_str(&l.describe());
        }
        s.push_str(";logsoftmax");
        s
    }

    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.describe().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}

#[derive(Debug, Clone)]
struct LayerInfo {
    layer: Layer,
    input: Shape,
    offset: usize,
}

/// A validated network: shapes propagated and parameter offsets assigned.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<LayerInfo>,
    param_count: usize,
}

/// Per-layer forward record: pre-activations `z`, outputs `a` and, for
/// pooling layers, the flat input index chosen in each window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerActivations {
    pub z: Vec<f64>,
    pub a: Vec<f64>,
    pub pool_argmax: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub input: Vec<f64>,
    pub layers: Vec<LayerActivations>,
    pub log_probs: Vec<f64>,
}

impl ForwardPass {
    pub fn probabilities(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn loss(&self, label: usize) -> f64 {
        -self.log_probs[label]
    }
}

/// Backprop deltas per layer: `d_z` is ∂C/∂z (for pooling and flatten layers,
/// ∂C/∂output) and `d_input` is ∂C/∂(layer input).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerDeltas {
    pub d_z: Vec<f64>,
    pub d_input: Vec<f64>,
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    let log_sum = max + sum.ln();
    logits.iter().map(|&v| v - log_sum).collect()
}

/// Index of the single 1 in a one-hot target.
pub fn one_hot_label(y: &[f64]) -> Result<usize> {
    let ones: Vec<usize> = y.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
    let zeros = y.iter().filter(|&&v| v == 0.0).count();
    if ones.len() == 1 && zeros + 1 == y.len() {
        Ok(ones[0])
    } else {
        Err(Error::NotOneHot(format!("{y:?}")))
    }
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let mut shape = spec.input;
        let mut offset = 0;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (idx, &layer) in spec.layers.iter().enumerate() {
            let mismatch = |expected: usize, got: usize| Error::InvalidArgument(format!(
                "layer {idx} ({}) expects {expected} inputs but receives {got}",
                layer.describe()
            ));
            let output = match layer {
                Layer::Dense { inputs, outputs, .. } => {
                    if shape.len() != inputs {
                        return Err(mismatch(inputs, shape.len()));
                    }
                    Shape::flat(outputs)
                }
                Layer::Conv2d { in_channels, out_channels, kernel, .. } => {
                    if shape.channels != in_channels {
                        return Err(mismatch(in_channels, shape.channels));
                    }
                    if kernel == 0 || kernel > shape.height || kernel > shape.width {
                        return Err(Error::InvalidArgument(format!(
                            "layer {idx}: kernel {kernel} does not fit a {}x{} plane",
                            shape.height, shape.width
                        )));
                    }
                    Shape::new(out_channels, shape.height - kernel + 1, shape.width - kernel + 1)
                }
                Layer::MaxPool2 => {
                    if shape.height < 2 || shape.width < 2 {
                        return Err(Error::InvalidArgument(format!(
                            "layer {idx}: cannot pool a {}x{} plane",
                            shape.height, shape.width
                        )));
                    }
                    Shape::new(shape.channels, shape.height / 2, shape.width / 2)
                }
                Layer::Flatten => Shape::flat(shape.len()),
            };
            layers.push(LayerInfo { layer, input: shape, offset });
            offset += layer.param_count();
            shape = output;
        }
        match spec.layers.last() {
            Some(Layer::Dense { outputs: NUM_CLASSES, activation: Activation::Identity, .. }) => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "final layer must be a dense layer with {NUM_CLASSES} identity outputs feeding the log-softmax"
                )))
            }
        }
        Ok(Network { spec, layers, param_count: offset })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn input_len(&self) -> usize {
        self.spec.input.len()
    }

    /// Uniform initialisation in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.param_count);
        for info in &self.layers {
            let n = info.layer.param_count();
            if n == 0 {
                continue;
            }
            let bound = 1.0 / (info.layer.fan_in() as f64).sqrt();
            params.extend((0..n).map(|_| rng.random_range(-bound..bound)));
        }
        params
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count {
            return Err(Error::ShapeMismatch { expected: self.param_count, got: params.len() });
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<ForwardPass> {
        self.check_params(params)?;
        if x.len() != self.input_len() {
            return Err(Error::ShapeMismatch { expected: self.input_len(), got: x.len() });
        }
        let mut records: Vec<LayerActivations> = Vec::with_capacity(self.layers.len());
        for info in &self.layers {
            let input: &[f64] = records.last().map_or(x, |r| &r.a);
            let p = &params[info.offset..info.offset + info.layer.param_count()];
            let rec = match info.layer {
                Layer::Dense { inputs, outputs, activation } => {
                    let (w, b) = p.split_at(inputs * outputs);
                    let z: Vec<f64> = (0..outputs)
                        .map(|j| {
                            let row = &w[j * inputs..(j + 1) * inputs];
                            b[j] + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>()
                        })
                        .collect();
                    let a = z.iter().map(|&v| activation.apply(v)).collect();
                    LayerActivations { z, a, pool_argmax: Vec::new() }
                }
                Layer::Conv2d { out_channels, kernel, activation, .. } => {
                    let z = conv_forward(input, info.input, p, out_channels, kernel);
                    let a = z.iter().map(|&v| activation.apply(v)).collect();
                    LayerActivations { z, a, pool_argmax: Vec::new() }
                }
                Layer::MaxPool2 => {
                    let (a, argmax) = maxpool_forward(input, info.input);
                    LayerActivations { z: Vec::new(), a, pool_argmax: argmax }
                }
                Layer::Flatten => LayerActivations { z: Vec::new(), a: input.to_vec(), pool_argmax: Vec::new() },
            };
            records.push(rec);
        }
        let log_probs = log_softmax(&records.last().expect("at least one layer").a);
        Ok(ForwardPass { input: x.to_vec(), layers: records, log_probs })
    }

    /// Gradient of the cross-entropy loss for class `label`.
    pub fn backward(&self, params: &[f64], pass: &ForwardPass, label: usize) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.param_count];
        self.backward_into(params, pass, label, &mut grad, None)?;
        Ok(grad)
    }

    /// Gradient for a one-hot target vector; rejects anything else.
    pub fn backward_target(&self, params: &[f64], pass: &ForwardPass, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != NUM_CLASSES {
            return Err(Error::NotOneHot(format!("expected {NUM_CLASSES} entries, got {}", y.len())));
        }
        self.backward(params, pass, one_hot_label(y)?)
    }

    /// Gradient plus the per-layer deltas.
    pub fn backward_with_deltas(
        &self,
        params: &[f64],
        pass: &ForwardPass,
        label: usize,
    ) -> Result<(Vec<f64>, Vec<LayerDeltas>)> {
        let mut grad = vec![0.0; self.param_count];
        let mut deltas = vec![LayerDeltas::default(); self.layers.len()];
        self.backward_into(params, pass, label, &mut grad, Some(&mut deltas))?;
        Ok((grad, deltas))
    }

    /// Adds the gradient of one sample into `grad`.
    pub fn backward_into(
        &self,
        params: &[f64],
        pass: &ForwardPass,
        label: usize,
        grad: &mut [f64],
        mut deltas: Option<&mut Vec<LayerDeltas>>,
    ) -> Result<()> {
        self.check_params(params)?;
        if label >= NUM_CLASSES {
            return Err(Error::NotOneHot(format!("label {label} out of range")));
        }
        if pass.layers.len() != self.layers.len() {
            return Err(Error::InvalidArgument("forward pass does not belong to this network".into()));
        }
        // Softmax with cross-entropy: δ^L = ŷ − y.
        let mut d_out: Vec<f64> = pass.log_probs.iter().map(|l| l.exp()).collect();
        d_out[label] -= 1.0;

        for (idx, info) in self.layers.iter().enumerate().rev() {
            let rec = &pass.layers[idx];
            let input: &[f64] = if idx == 0 { &pass.input } else { &pass.layers[idx - 1].a };
            let n = info.layer.param_count();
            let p = &params[info.offset..info.offset + n];
            let g = &mut grad[info.offset..info.offset + n];
            let (d_z, d_input) = match info.layer {
                Layer::Dense { inputs, outputs, activation } => {
                    let d_z: Vec<f64> = (0..outputs)
                        .map(|j| d_out[j] * activation.derivative(rec.z[j], rec.a[j]))
                        .collect();
                    let (w, _) = p.split_at(inputs * outputs);
                    let (gw, gb) = g.split_at_mut(inputs * outputs);
                    let mut d_input = vec![0.0; inputs];
                    for j in 0..outputs {
                        let dj = d_z[j];
                        gb[j] += dj;
                        if dj == 0.0 {
                            continue;
                        }
                        let row = &w[j * inputs..(j + 1) * inputs];
                        let grow = &mut gw[j * inputs..(j + 1) * inputs];
                        for k in 0..inputs {
                            grow[k] += dj * input[k];
                            d_input[k] += dj * row[k];
                        }
                    }
                    (d_z, d_input)
                }
                Layer::Conv2d { out_channels, kernel, activation, .. } => {
                    let d_z: Vec<f64> = d_out
                        .iter()
                        .zip(rec.z.iter().zip(&rec.a))
                        .map(|(d, (&z, &a))| d * activation.derivative(z, a))
                        .collect();
                    let d_input = conv_backward(input, info.input, p, out_channels, kernel, &d_z, g);
                    (d_z, d_input)
                }
                Layer::MaxPool2 => {
                    // Only the recorded maximum of each window receives the delta.
                    let mut d_input = vec![0.0; info.input.len()];
                    for (o, &src) in rec.pool_argmax.iter().enumerate() {
                        d_input[src] += d_out[o];
                    }
                    (d_out.clone(), d_input)
                }
                Layer::Flatten => (d_out.clone(), d_out.clone()),
            };
            if let Some(ds) = deltas.as_deref_mut() {
                ds[idx] = LayerDeltas { d_z, d_input: d_input.clone() };
            }
            d_out = d_input;
        }
        Ok(())
    }

    pub fn loss(&self, params: &[f64], x: &[f64], label: usize) -> Result<f64> {
        Ok(self.forward(params, x)?.loss(label))
    }

    /// Mean gradient and mean loss over `samples`, accumulated in order.
    pub fn batch_gradient<'a, I>(&self, params: &[f64], samples: I) -> Result<(Vec<f64>, f64)>
    where
        I: IntoIterator<Item = (&'a [f64], usize)>,
    {
        let mut grad = vec![0.0; self.param_count];
        let mut loss = 0.0;
        let mut n = 0usize;
        for (x, label) in samples {
            let pass = self.forward(params, x)?;
            loss += pass.loss(label);
            self.backward_into(params, &pass, label, &mut grad, None)?;
            n += 1;
        }
        if n > 0 {
            let inv = 1.0 / n as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            loss *= inv;
        }
        Ok((grad, loss))
    }

    /// Predicted class; NaN logits never win the argmax. Returns `None` when
    /// every output is NaN.
    pub fn predict(&self, params: &[f64], x: &[f64]) -> Result<Option<usize>> {
        let pass = self.forward(params, x)?;
        let logits = &pass.layers.last().expect("at least one layer").a;
        Ok(argmax_ignoring_nan(logits))
    }
}

pub fn argmax_ignoring_nan(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        if x.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

fn conv_forward(input: &[f64], shape: Shape, p: &[f64], out_channels: usize, k: usize) -> Vec<f64> {
    let (c_in, h, w) = (shape.channels, shape.height, shape.width);
    let (oh, ow) = (h - k + 1, w - k + 1);
    let (weights, bias) = p.split_at(out_channels * c_in * k * k);
    let mut z = vec![0.0; out_channels * oh * ow];
    for o in 0..out_channels {
        let plane = &mut z[o * oh * ow..(o + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..c_in {
            let src = &input[c * h * w..(c + 1) * h * w];
            for p_ in 0..k {
                for q in 0..k {
                    let wv = weights[((o * c_in + c) * k + p_) * k + q];
                    for j in 0..oh {
                        let row = &src[(j + p_) * w + q..(j + p_) * w + q + ow];
                        let dst = &mut plane[j * ow..(j + 1) * ow];
                        for (d, s) in dst.iter_mut().zip(row) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    z
}

/// Accumulates kernel and bias gradients into `g` and returns ∂C/∂input.
fn conv_backward(
    input: &[f64],
    shape: Shape,
    p: &[f64],
    out_channels: usize,
    k: usize,
    d_z: &[f64],
    g: &mut [f64],
) -> Vec<f64> {
    let (c_in, h, w) = (shape.channels, shape.height, shape.width);
    let (oh, ow) = (h - k + 1, w - k + 1);
    let nw = out_channels * c_in * k * k;
    let weights = &p[..nw];
    let (gw, gb) = g.split_at_mut(nw);
    let mut d_input = vec![0.0; input.len()];
    for o in 0..out_channels {
        let delta = &d_z[o * oh * ow..(o + 1) * oh * ow];
        gb[o] += delta.iter().sum::<f64>();
        for c in 0..c_in {
            let src = &input[c * h * w..(c + 1) * h * w];
            let dsrc = &mut d_input[c * h * w..(c + 1) * h * w];
            for p_ in 0..k {
                for q in 0..k {
                    let widx = ((o * c_in + c) * k + p_) * k + q;
                    let wv = weights[widx];
                    let mut acc = 0.0;
                    for j in 0..oh {
                        let row = (j + p_) * w + q;
                        let drow = &delta[j * ow..(j + 1) * ow];
                        for (t, &d) in drow.iter().enumerate() {
                            acc += d * src[row + t];
                            dsrc[row + t] += d * wv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    d_input
}

/// 2x2 max pooling, stride 2. Ties pick the first maximum in row-major order.
fn maxpool_forward(input: &[f64], shape: Shape) -> (Vec<f64>, Vec<usize>) {
    let (c_n, h, w) = (shape.channels, shape.height, shape.width);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c_n * oh * ow);
    let mut argmax = Vec::with_capacity(c_n * oh * ow);
    for c in 0..c_n {
        for j in 0..oh {
            for k in 0..ow {
                let mut best = (usize::MAX, f64::NEG_INFINITY);
                for (dj, dk) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = c * h * w + (2 * j + dj) * w + 2 * k + dk;
                    let v = input[idx];
                    if best.0 == usize::MAX || v > best.1 {
                        best = (idx, v);
                    }
                }
                out.push(best.1);
                argmax.push(best.0);
            }
        }
    }
    (out, argmax)
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` for every coordinate.
pub fn central_difference<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub const FD_STEP: f64 = 1e-5;

/// Finite-difference gradient of the loss of one sample, step [`FD_STEP`].
pub fn finite_difference_grad(net: &Network, params: &[f64], x: &[f64], label: usize) -> Result<Vec<f64>> {
    net.forward(params, x)?;
    Ok(central_difference(
        |p| net.loss(p, x, label).expect("shapes validated above"),
        params,
        FD_STEP,
    ))
}

/// Analytic-vs-numeric comparison for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)`, 0 when both vanish.
    pub relative_error: f64,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|)` over
    /// coordinates whose magnitude exceeds 1e-6.
    pub max_element_error: f64,
    /// A ReLU pre-activation or a max-pool decision lies within reach of the
    /// finite-difference step, so the loss is not smooth there.
    pub near_kink: bool,
}

/// Margin inside which a kink counts as reachable by the FD step.
const KINK_MARGIN: f64 = 1e-4;

pub fn gradient_check(net: &Network, params: &[f64], x: &[f64], label: usize) -> Result<GradCheck> {
    let pass = net.forward(params, x)?;
    let analytic = net.backward(params, &pass, label)?;
    let numeric = finite_difference_grad(net, params, x, label)?;
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let denom = norm(&analytic) + norm(&numeric);
    let relative_error = if denom == 0.0 { 0.0 } else { norm(&diff) / denom };
    let max_element_error = analytic
        .iter()
        .zip(&numeric)
        .filter(|(a, n)| a.abs().max(n.abs()) > 1e-6)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max);
    let mut near_kink = false;
    for (idx, (info, rec)) in net.layers.iter().zip(&pass.layers).enumerate() {
        match info.layer {
            Layer::Dense { activation: Activation::Relu, .. }
            | Layer::Conv2d { activation: Activation::Relu, .. } => {
                near_kink |= rec.z.iter().any(|z| z.abs() < KINK_MARGIN);
            }
            Layer::MaxPool2 => {
                let input: &[f64] = if idx == 0 { &pass.input } else { &pass.layers[idx - 1].a };
                near_kink |= pool_has_near_tie(input, info.input);
            }
            _ => {}
        }
    }
    Ok(GradCheck { relative_error, max_element_error, near_kink })
}

fn pool_has_near_tie(input: &[f64], shape: Shape) -> bool {
    let (h, w) = (shape.height, shape.width);
    for c in 0..shape.channels {
        for j in 0..h / 2 {
            for k in 0..w / 2 {
                let mut v: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(a, b)| input[c * h * w + (2 * j + a) * w + 2 * k + b])
                    .collect();
                v.sort_by(|a, b| b.total_cmp(a));
                if v[0] - v[1] < KINK_MARGIN {
                    return true;
                }
            }
        }
    }
    false
}

pub fn sgd_step(w: &[f64], g: &[f64], lr: f64) -> Result<Vec<f64>> {
    let mut out = w.to_vec();
    sgd_step_in_place(&mut out, g, lr)?;
    Ok(out)
}

pub fn sgd_step_in_place(w: &mut [f64], g: &[f64], lr: f64) -> Result<()> {
    if w.len() != g.len() {
        return Err(Error::ShapeMismatch { expected: w.len(), got: g.len() });
    }
    if !(lr > 0.0 && lr < 1.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} outside (0, 1)")));
    }
    for (wi, gi) in w.iter_mut().zip(g) {
        *wi -= lr * gi;
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"AFLM";

/// Writes `magic, spec hash (u64), parameter count (u64)` followed by the
/// parameters as binary32, all little-endian.
pub fn save_checkpoint(path: &Path, spec: &NetworkSpec, params: &[f64]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>, bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    write(&mut out, CHECKPOINT_MAGIC)?;
    write(&mut out, &spec.hash().to_le_bytes())?;
    write(&mut out, &(params.len() as u64).to_le_bytes())?;
    for &p in params {
        write(&mut out, &(p as f32).to_le_bytes())?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, spec: &NetworkSpec) -> Result<Vec<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let format = |message: String| Error::Format { path: path.to_path_buf(), message };
    if bytes.len() < 20 {
        return Err(Error::Truncated { path: path.to_path_buf(), expected: 20, found: bytes.len() });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format("not a model checkpoint".into()));
    }
    let hash = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    if hash != spec.hash() {
        return Err(format(format!("checkpoint was written for a different network ({hash:#018x})")));
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let expected = 20 + 4 * count;
    if bytes.len() != expected {
        return Err(Error::Truncated { path: path.to_path_buf(), expected, found: bytes.len() });
    }
    Ok(bytes[20..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_dense(activation: Activation) -> Network {
        Network::new(NetworkSpec {
            input: Shape::flat(4),
            layers: vec![Layer::dense(4, 6, activation), Layer::dense(6, 10, Activation::Identity)],
        })
        .unwrap()
    }

    #[test]
    fn parameter_counts_of_presets() {
        assert_eq!(Network::new(NetworkSpec::cnn_mnist()).unwrap().param_count(), 21_840);
        assert_eq!(Network::new(NetworkSpec::cnn_fashion()).unwrap().param_count(), 65_558);
        assert_eq!(Network::new(NetworkSpec::cnn_cifar()).unwrap().param_count(), 62_006);
        assert_eq!(Network::new(NetworkSpec::dense_small()).unwrap().param_count(), 25_450);
    }

    #[test]
    fn rejects_mismatched_layers() {
        let bad = NetworkSpec {
            input: Shape::flat(4),
            layers: vec![Layer::dense(5, 10, Activation::Identity)],
        };
        assert!(Network::new(bad).is_err());
        let no_softmax = NetworkSpec {
            input: Shape::flat(4),
            layers: vec![Layer::dense(4, 3, Activation::Identity)],
        };
        assert!(Network::new(no_softmax).is_err());
        let net = tiny_dense(Activation::Relu);
        assert!(net.forward(&vec![0.0; net.param_count()], &[1.0; 3]).is_err());
        assert!(net.forward(&[0.0; 3], &[1.0; 4]).is_err());
    }

    #[test]
    fn zero_sigmoid_net_is_uniform() {
        let net = tiny_dense(Activation::Sigmoid);
        let pass = net.forward(&vec![0.0; net.param_count()], &[0.3, -1.0, 2.0, 0.5]).unwrap();
        assert!(pass.layers[0].a.iter().all(|&a| a == 0.5));
        for p in pass.probabilities() {
            assert!((p - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_of_negative_is_zero() {
        let net = Network::new(NetworkSpec {
            input: Shape::flat(1),
            layers: vec![Layer::dense(1, 1, Activation::Relu), Layer::dense(1, 10, Activation::Identity)],
        })
        .unwrap();
        let mut params = vec![0.0; net.param_count()];
        params[0] = 2.0;
        let pass = net.forward(&params, &[-1.0]).unwrap();
        assert_eq!(pass.layers[0].a, vec![0.0]);
        assert_eq!(pass.layers[0].z, vec![-2.0]);
    }

    #[test]
    fn single_layer_gradient_is_outer_product() {
        let net = Network::new(NetworkSpec {
            input: Shape::flat(3),
            layers: vec![Layer::dense(3, 10, Activation::Identity)],
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = net.init_params(&mut rng);
        let x = [0.2, -0.4, 0.9];
        let label = 7;
        let pass = net.forward(&params, &x).unwrap();
        let grad = net.backward(&params, &pass, label).unwrap();
        let y_hat = pass.probabilities();
        for j in 0..10 {
            let d = y_hat[j] - if j == label { 1.0 } else { 0.0 };
            for k in 0..3 {
                assert!((grad[j * 3 + k] - d * x[k]).abs() < 1e-15);
            }
            assert!((grad[30 + j] - d).abs() < 1e-15);
        }
    }

    #[test]
    fn output_delta_is_prediction_minus_target() {
        let net = tiny_dense(Activation::Sigmoid);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = net.init_params(&mut rng);
        let pass = net.forward(&params, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let (_, deltas) = net.backward_with_deltas(&params, &pass, 3).unwrap();
        let y_hat = pass.probabilities();
        let last = deltas.last().unwrap();
        for j in 0..10 {
            let expected = y_hat[j] - if j == 3 { 1.0 } else { 0.0 };
            assert_eq!(last.d_z[j], expected);
        }
        let sum: f64 = y_hat.iter().sum();
        assert!((sum - 1.0).abs() < 1e-10);
        assert!(pass.loss(3) >= 0.0);
    }

    #[test]
    fn perfect_prediction_gives_zero_gradient() {
        // Saturate the output so ŷ equals the one-hot target in f64.
        let net = Network::new(NetworkSpec {
            input: Shape::flat(1),
            layers: vec![Layer::dense(1, 10, Activation::Identity)],
        })
        .unwrap();
        let mut params = vec![0.0; net.param_count()];
        params[10 + 4] = 1000.0;
        let pass = net.forward(&params, &[0.0]).unwrap();
        assert_eq!(pass.probabilities()[4], 1.0);
        let grad = net.backward(&params, &pass, 4).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0), "{grad:?}");
    }

    #[test]
    fn one_hot_validation() {
        let mut y = vec![0.0; 10];
        y[2] = 1.0;
        assert_eq!(one_hot_label(&y).unwrap(), 2);
        y[3] = 1.0;
        assert!(one_hot_label(&y).is_err());
        assert!(one_hot_label(&[0.5; 10]).is_err());
        let net = tiny_dense(Activation::Relu);
        let params = vec![0.1; net.param_count()];
        let pass = net.forward(&params, &[1.0; 4]).unwrap();
        assert!(net.backward_target(&params, &pass, &[0.0; 10]).is_err());
        assert!(net.backward(&params, &pass, 10).is_err());
    }

    #[test]
    fn constant_image_averaging_kernel() {
        let net = Network::new(NetworkSpec {
            input: Shape::new(1, 8, 8),
            layers: vec![
                Layer::conv(1, 1, 5, Activation::Relu),
                Layer::Flatten,
                Layer::dense(16, 10, Activation::Identity),
            ],
        })
        .unwrap();
        let mut params = vec![0.0; net.param_count()];
        params[..25].iter_mut().for_each(|w| *w = 1.0 / 25.0);
        let pass = net.forward(&params, &[0.7; 64]).unwrap();
        for &z in &pass.layers[0].z {
            assert!((z - 0.7).abs() < 1e-15);
        }
        // All-zero parameters give a uniform output.
        let zero = net.forward(&vec![0.0; net.param_count()], &[0.7; 64]).unwrap();
        assert!(zero.probabilities().iter().all(|p| (p - 0.1).abs() < 1e-15));
    }

    #[test]
    fn pooling_routes_to_single_max() {
        let net = Network::new(NetworkSpec {
            input: Shape::new(1, 4, 4),
            layers: vec![Layer::MaxPool2, Layer::Flatten, Layer::dense(4, 10, Activation::Identity)],
        })
        .unwrap();
        let x: Vec<f64> = (0..16).map(|i| ((i * 7) % 16) as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = net.init_params(&mut rng);
        let pass = net.forward(&params, &x).unwrap();
        let (_, deltas) = net.backward_with_deltas(&params, &pass, 1).unwrap();
        let d_in = &deltas[0].d_input;
        for (wj, wk) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let idx: Vec<usize> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|(a, b)| (2 * wj + a) * 4 + 2 * wk + b)
                .collect();
            let nonzero = idx.iter().filter(|&&i| d_in[i] != 0.0).count();
            assert_eq!(nonzero, 1);
            let max_i = *idx.iter().max_by(|&&a, &&b| x[a].total_cmp(&x[b])).unwrap();
            assert!(d_in[max_i] != 0.0);
        }
    }

    #[test]
    fn pooling_tie_takes_first() {
        let (out, arg) = maxpool_forward(&[1.0, 1.0, 1.0, 1.0], Shape::new(1, 2, 2));
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn quadratic_finite_difference() {
        let g = central_difference(|w| w[0] * w[0], &[3.0], FD_STEP);
        assert!((g[0] - 6.0).abs() < 1e-6);
        assert!(central_difference(|_| 1.0, &[], FD_STEP).is_empty());
    }

    #[test]
    fn sgd_examples() {
        let w = sgd_step(&[1.0], &[0.5], 0.01).unwrap();
        assert!((w[0] - 0.995).abs() < 1e-15);
        assert_eq!(sgd_step(&[1.0, 2.0], &[0.0, 0.0], 0.01).unwrap(), vec![1.0, 2.0]);
        let twice = sgd_step(&sgd_step(&[1.0], &[0.5], 0.01).unwrap(), &[0.5], 0.01).unwrap();
        assert!((twice[0] - (1.0 - 2.0 * 0.01 * 0.5)).abs() < 1e-15);
        assert!(sgd_step(&[1.0], &[1.0, 2.0], 0.01).is_err());
        assert!(sgd_step(&[1.0], &[1.0], 1.5).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let spec = NetworkSpec::dense_small();
        let net = Network::new(spec.clone()).unwrap();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        save_checkpoint(&path, &spec, &params).unwrap();
        let bytes = std::fs::metadata(&path).unwrap().len();
        assert_eq!(bytes as usize, 20 + 4 * params.len());
        let back = load_checkpoint(&path, &spec).unwrap();
        let cast: Vec<f64> = params.iter().map(|&p| f64::from(p as f32)).collect();
        assert_eq!(back, cast);
        assert!(load_checkpoint(&path, &NetworkSpec::cnn_mnist()).is_err());
    }

    #[test]
    fn argmax_skips_nan() {
        assert_eq!(argmax_ignoring_nan(&[f64::NAN, 0.2, 0.1]), Some(1));
        assert_eq!(argmax_ignoring_nan(&[f64::NAN, f64::NAN]), None);
        assert_eq!(argmax_ignoring_nan(&[0.3, 0.3]), Some(0));
    }
}
