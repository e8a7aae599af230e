//! A small white-box convolutional classifier, written from scratch.
//!
//! The network is an ordered stack of layers — conv, relu, maxpool,
//! flatten, dense, and a final softmax — over `(row, column, channel)`
//! row-major activations. Everything needed by the rest of the toolkit is
//! here: forward inference, cross-entropy loss, exact input gradients for
//! the attack, minibatch SGD for producing victim models, and a binary
//! model file format ("ADVM") with bit-exact round-trips.
//!
//! All arithmetic is sequential `f64`, so results are deterministic given
//! the seeds; there is deliberately no parallel reduction anywhere.

use std::fs;
use std::path::Path;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Shape of an activation between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationShape {
    Spatial { height: usize, width: usize, channels: usize },
    Flat { len: usize },
}

impl ActivationShape {
    pub fn len(&self) -> usize {
        match *self {
            ActivationShape::Spatial { height, width, channels } => height * width * channels,
            ActivationShape::Flat { len } => len,
        }
    }
}

/// Convolution layer: zero padding, weights indexed
/// `((oc * in_channels + ic) * kernel_h + ky) * kernel_w + kx`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    /// Glorot-uniform init: weights in [-s, s], s = sqrt(6 / (fan_in + fan_out))
    /// with fan_in = in_channels*kh*kw and fan_out = out_channels*kh*kw;
    /// biases zero.
    fn init(
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let fan_in = (in_channels * kernel_h * kernel_w) as f64;
        let fan_out = (out_channels * kernel_h * kernel_w) as f64;
        let s = (6.0 / (fan_in + fan_out)).sqrt();
        let count = out_channels * in_channels * kernel_h * kernel_w;
        let weights = (0..count).map(|_| rng.gen_range(-s, s)).collect();
        Self {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
            stride,
            padding,
            weights,
            bias: vec![0.0; out_channels],
        }
    }
}

/// Dense layer: weights indexed `i * out_dim + j` (input i, output j).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn init(in_dim: usize, out_dim: usize, rng: &mut SplitMix64) -> Self {
        let s = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.gen_range(-s, s)).collect();
        Self { in_dim, out_dim, weights, bias: vec![0.0; out_dim] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Relu,
    MaxPool { window: usize, stride: usize },
    Flatten,
    Dense(DenseLayer),
    Softmax,
}

/// Class probabilities for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    /// Smallest index attaining the maximum probability.
    pub argmax_label: usize,
    pub argmax_probability: f64,
}

/// An immutable feed-forward network ending in softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    layers: Vec<Layer>,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    /// shapes[i] is the input shape of layer i; the last entry is the output.
    shapes: Vec<ActivationShape>,
}

/// Output shape of one layer, validating its parameters along the way.
fn layer_output_shape(index: usize, layer: &Layer, input: ActivationShape) -> Result<ActivationShape> {
    let spatial = |shape: ActivationShape| match shape {
        ActivationShape::Spatial { height, width, channels } => Ok((height, width, channels)),
        ActivationShape::Flat { .. } => Err(Error::Parameter(format!(
            "layer {index} ({layer:?}) needs a spatial input, got a flat one"
        ))),
    };
    match layer {
        Layer::Conv(conv) => {
            let (h, w, c) = spatial(input)?;
            if conv.kernel_h == 0 || conv.kernel_w == 0 || conv.stride == 0 {
                return Err(Error::Parameter(format!(
                    "layer {index}: conv kernel and stride must be positive"
                )));
            }
            if conv.in_channels != c {
                return Err(Error::Parameter(format!(
                    "layer {index}: conv expects {} input channels, got {c}",
                    conv.in_channels
                )));
            }
            if h + 2 * conv.padding < conv.kernel_h || w + 2 * conv.padding < conv.kernel_w {
                return Err(Error::Parameter(format!(
                    "layer {index}: conv kernel {}x{} exceeds padded input {h}x{w}",
                    conv.kernel_h, conv.kernel_w
                )));
            }
            let expected = conv.out_channels * conv.in_channels * conv.kernel_h * conv.kernel_w;
            if conv.weights.len() != expected || conv.bias.len() != conv.out_channels {
                return Err(Error::Parameter(format!(
                    "layer {index}: conv weight/bias lengths do not match its geometry"
                )));
            }
            Ok(ActivationShape::Spatial {
                height: (h + 2 * conv.padding - conv.kernel_h) / conv.stride + 1,
                width: (w + 2 * conv.padding - conv.kernel_w) / conv.stride + 1,
                channels: conv.out_channels,
            })
        }
        Layer::Relu => Ok(input),
        Layer::MaxPool { window, stride } => {
            let (h, w, c) = spatial(input)?;
            if *window == 0 || *stride == 0 {
                return Err(Error::Parameter(format!(
                    "layer {index}: pool window and stride must be positive"
                )));
            }
            if h < *window || w < *window {
                return Err(Error::Parameter(format!(
                    "layer {index}: pool window {window} exceeds input {h}x{w}"
                )));
            }
            Ok(ActivationShape::Spatial {
                height: (h - window) / stride + 1,
                width: (w - window) / stride + 1,
                channels: c,
            })
        }
        Layer::Flatten => Ok(ActivationShape::Flat { len: input.len() }),
        Layer::Dense(dense) => {
            match input {
                ActivationShape::Flat { len } if len == dense.in_dim => {}
                other => {
                    return Err(Error::Parameter(format!(
                        "layer {index}: dense expects a flat input of {}, got {other:?}",
                        dense.in_dim
                    )))
                }
            }
            if dense.weights.len() != dense.in_dim * dense.out_dim
                || dense.bias.len() != dense.out_dim
            {
                return Err(Error::Parameter(format!(
                    "layer {index}: dense weight/bias lengths do not match its geometry"
                )));
            }
            Ok(ActivationShape::Flat { len: dense.out_dim })
        }
        Layer::Softmax => match input {
            ActivationShape::Flat { len } => Ok(ActivationShape::Flat { len }),
            other => Err(Error::Parameter(format!(
                "layer {index}: softmax expects a flat input, got {other:?}"
            ))),
        },
    }
}

impl Classifier {
    /// Builds a classifier, validating that layer shapes compose, weights
    /// are finite, and the stack ends in its single softmax producing
    /// `num_classes` outputs.
    pub fn new(
        layers: Vec<Layer>,
        input_shape: (usize, usize, usize),
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Parameter(format!(
                "classifier needs at least 2 classes, got {num_classes}"
            )));
        }
        if layers.is_empty() {
            return Err(Error::Parameter("classifier needs at least one layer".into()));
        }
        let (h, w, c) = input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Parameter(format!("bad input shape {input_shape:?}")));
        }
        let softmax_positions: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Softmax))
            .map(|(i, _)| i)
            .collect();
        if softmax_positions != [layers.len() - 1] {
            return Err(Error::Parameter(
                "classifier must contain exactly one softmax, as its final layer".into(),
            ));
        }
        for (i, layer) in layers.iter().enumerate() {
            let finite = match layer {
                Layer::Conv(conv) => {
                    conv.weights.iter().chain(&conv.bias).all(|v| v.is_finite())
                }
                Layer::Dense(dense) => {
                    dense.weights.iter().chain(&dense.bias).all(|v| v.is_finite())
                }
                _ => true,
            };
            if !finite {
                return Err(Error::Numeric(format!("layer {i} contains non-finite weights")));
            }
        }
        let mut shapes = vec![ActivationShape::Spatial { height: h, width: w, channels: c }];
        for (i, layer) in layers.iter().enumerate() {
            shapes.push(layer_output_shape(i, layer, shapes[i])?);
        }
        match *shapes.last().expect("at least one layer") {
            ActivationShape::Flat { len } if len == num_classes => {}
            other => {
                return Err(Error::Parameter(format!(
                    "classifier output shape {other:?} does not match {num_classes} classes"
                )))
            }
        }
        Ok(Self { layers, input_shape, num_classes, shapes })
    }

    /// The stock architecture used by the command-line tool:
    /// conv 3x3 -> 8 channels (pad 1) -> relu -> maxpool 2x2/2 ->
    /// conv 3x3 -> 16 channels (pad 1) -> relu -> maxpool 2x2/2 ->
    /// flatten -> dense -> softmax. Weights drawn from `seed`.
    pub fn default_architecture(
        input_shape: (usize, usize, usize),
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let (h, w, c) = input_shape;
        let mut rng = SplitMix64::new(seed);
        let conv1 = ConvLayer::init(3, 3, c, 8, 1, 1, &mut rng);
        let conv2 = ConvLayer::init(3, 3, 8, 16, 1, 1, &mut rng);
        // Padded 3x3/1 convs preserve size; each pool halves (floor).
        let (h1, w1) = ((h - 2) / 2 + 1, (w - 2) / 2 + 1);
        let (h2, w2) = ((h1 - 2) / 2 + 1, (w1 - 2) / 2 + 1);
        let flat = h2 * w2 * 16;
        let dense = DenseLayer::init(flat, num_classes, &mut rng);
        Classifier::new(
            vec![
                Layer::Conv(conv1),
                Layer::Relu,
                Layer::MaxPool { window: 2, stride: 2 },
                Layer::Conv(conv2),
                Layer::Relu,
                Layer::MaxPool { window: 2, stride: 2 },
                Layer::Flatten,
                Layer::Dense(dense),
                Layer::Softmax,
            ],
            input_shape,
            num_classes,
        )
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn check_input(&self, x: &Image) -> Result<()> {
        if x.shape() != self.input_shape {
            return Err(Error::Parameter(format!(
                "input shape {:?} does not match classifier input shape {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes {
            return Err(Error::Parameter(format!(
                "label {label} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Runs all layers, returning every activation: element 0 is the input,
    /// element i+1 the output of layer i. The final entry holds the
    /// probabilities.
    pub(crate) fn run_forward(&self, input: &[f64]) -> Vec<Vec<f64>> {
        debug_assert_eq!(input.len(), self.shapes[0].len());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = match layer {
                Layer::Conv(conv) => conv_forward(conv, &acts[i], self.shapes[i]),
                Layer::Relu => acts[i].iter().map(|&v| v.max(0.0)).collect(),
                Layer::MaxPool { window, stride } => {
                    pool_forward(&acts[i], self.shapes[i], *window, *stride)
                }
                Layer::Flatten => acts[i].clone(),
                Layer::Dense(dense) => dense_forward(dense, &acts[i]),
                Layer::Softmax => softmax(&acts[i]),
            };
            acts.push(out);
        }
        acts
    }

    /// Class probabilities for an image of the classifier's input shape.
    pub fn forward(&self, x: &Image) -> Result<Prediction> {
        self.check_input(x)?;
        let acts = self.run_forward(x.data());
        let probabilities = acts.into_iter().last().expect("at least the input activation");
        let argmax_label = argmax(&probabilities);
        let argmax_probability = probabilities[argmax_label];
        Ok(Prediction { probabilities, argmax_label, argmax_probability })
    }

    /// Cross-entropy −log(p_label), with the probability floored at 1e-12.
    pub fn loss(&self, x: &Image, label: usize) -> Result<f64> {
        self.check_input(x)?;
        self.check_label(label)?;
        let acts = self.run_forward(x.data());
        let probs = acts.last().expect("activations are never empty");
        Ok(-(probs[label].max(1e-12)).ln())
    }

    /// Exact gradient of `loss(x, label)` with respect to every pixel.
    pub fn input_gradient(&self, x: &Image, label: usize) -> Result<Tensor> {
        self.check_input(x)?;
        self.check_label(label)?;
        let acts = self.run_forward(x.data());
        let grad = self.backward(&acts, label, 1.0, None);
        let (h, w, c) = self.input_shape;
        Tensor::new(vec![h, w, c], grad)
    }

    /// Input gradient from activations already computed by `run_forward`;
    /// the attack loop uses this to pay for one forward pass per iteration
    /// instead of two.
    pub(crate) fn input_gradient_from_acts(&self, acts: &[Vec<f64>], label: usize) -> Vec<f64> {
        self.backward(acts, label, 1.0, None)
    }

    /// Backpropagation from the cross-entropy/softmax head down to the
    /// input. The gradient starts as `scale * (probs - onehot(label))` — the
    /// softmax layer itself is skipped because that expression already sits
    /// at its input. Weight gradients accumulate into `grads` when given.
    fn backward(
        &self,
        acts: &[Vec<f64>],
        label: usize,
        scale: f64,
        mut grads: Option<&mut Vec<LayerGrads>>,
    ) -> Vec<f64> {
        let probs = acts.last().expect("activations are never empty");
        let mut grad: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(j, &p)| (p - if j == label { 1.0 } else { 0.0 }) * scale)
            .collect();
        for idx in (0..self.layers.len()).rev() {
            let input = &acts[idx];
            let slot = grads.as_deref_mut().map(|g| &mut g[idx]);
            grad = match &self.layers[idx] {
                Layer::Softmax => grad,
                Layer::Relu => input
                    .iter()
                    .zip(&grad)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
                Layer::MaxPool { window, stride } => {
                    pool_backward(input, &grad, self.shapes[idx], *window, *stride)
                }
                Layer::Flatten => grad,
                Layer::Dense(dense) => dense_backward(dense, input, &grad, slot),
                Layer::Conv(conv) => conv_backward(conv, input, &grad, self.shapes[idx], slot),
            };
        }
        grad
    }

    /// Minibatch SGD on cross-entropy. Returns a newly trained classifier
    /// (self is untouched) along with the mean training loss of each epoch.
    pub fn train_with_history(
        &self,
        data: &LabeledDataset,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Result<TrainingRun> {
        if data.is_empty() {
            return Err(Error::Parameter("cannot train on an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(Error::Parameter(format!(
                "learning rate must be finite and nonnegative, got {learning_rate}"
            )));
        }
        let first_shape = data.items()[0].0.shape();
        if first_shape != self.input_shape {
            return Err(Error::Parameter(format!(
                "training image shape {:?} does not match classifier input shape {:?}",
                first_shape, self.input_shape
            )));
        }
        if data.num_classes() > self.num_classes {
            return Err(Error::Parameter(format!(
                "dataset has {} classes but the classifier only outputs {}",
                data.num_classes(),
                self.num_classes
            )));
        }

        let mut model = self.clone();
        let mut rng = SplitMix64::new(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut grads: Vec<LayerGrads> = model.layers.iter().map(LayerGrads::zeroed_for).collect();
        let mut epoch_mean_losses = Vec::with_capacity(epochs);

        for _ in 0..epochs {
            rng.shuffle(&mut order);
            let mut loss_sum = 0.0;
            for batch in order.chunks(batch_size) {
                for g in &mut grads {
                    g.zero();
                }
                let scale = 1.0 / batch.len() as f64;
                for &i in batch {
                    let (image, label) = &data.items()[i];
                    let acts = model.run_forward(image.data());
                    let p = acts.last().expect("activations are never empty")[*label];
                    loss_sum += -(p.max(1e-12)).ln();
                    model.backward(&acts, *label, scale, Some(&mut grads));
                }
                model.apply_grads(&grads, learning_rate);
            }
            epoch_mean_losses.push(loss_sum / data.len() as f64);
        }
        Ok(TrainingRun { model, epoch_mean_losses })
    }

    /// `train_with_history` without the loss record.
    pub fn train(
        &self,
        data: &LabeledDataset,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Result<Classifier> {
        Ok(self.train_with_history(data, epochs, batch_size, learning_rate, seed)?.model)
    }

    fn apply_grads(&mut self, grads: &[LayerGrads], learning_rate: f64) {
        for (layer, grad) in self.layers.iter_mut().zip(grads) {
            match (layer, grad) {
                (Layer::Conv(conv), LayerGrads::Weighted { weights, bias }) => {
                    for (w, g) in conv.weights.iter_mut().zip(weights) {
                        *w -= learning_rate * g;
                    }
                    for (b, g) in conv.bias.iter_mut().zip(bias) {
                        *b -= learning_rate * g;
                    }
                }
                (Layer::Dense(dense), LayerGrads::Weighted { weights, bias }) => {
                    for (w, g) in dense.weights.iter_mut().zip(weights) {
                        *w -= learning_rate * g;
                    }
                    for (b, g) in dense.bias.iter_mut().zip(bias) {
                        *b -= learning_rate * g;
                    }
                }
                _ => {}
            }
        }
    }
}

/// Result of a training run: the new model plus per-epoch mean losses.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub model: Classifier,
    pub epoch_mean_losses: Vec<f64>,
}

/// Per-layer gradient accumulator for one minibatch.
enum LayerGrads {
    Weighted { weights: Vec<f64>, bias: Vec<f64> },
    Stateless,
}

impl LayerGrads {
    fn zeroed_for(layer: &Layer) -> Self {
        match layer {
            Layer::Conv(c) => LayerGrads::Weighted {
                weights: vec![0.0; c.weights.len()],
                bias: vec![0.0; c.bias.len()],
            },
            Layer::Dense(d) => LayerGrads::Weighted {
                weights: vec![0.0; d.weights.len()],
                bias: vec![0.0; d.bias.len()],
            },
            _ => LayerGrads::Stateless,
        }
    }

    fn zero(&mut self) {
        if let LayerGrads::Weighted { weights, bias } = self {
            weights.iter_mut().for_each(|v| *v = 0.0);
            bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Smallest index attaining the maximum.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax: subtracts the max before exponentiating.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn conv_forward(conv: &ConvLayer, input: &[f64], in_shape: ActivationShape) -> Vec<f64> {
    let ActivationShape::Spatial { height: h, width: w, channels: c } = in_shape else {
        unreachable!("validated at construction");
    };
    let oh = (h + 2 * conv.padding - conv.kernel_h) / conv.stride + 1;
    let ow = (w + 2 * conv.padding - conv.kernel_w) / conv.stride + 1;
    let mut out = vec![0.0; oh * ow * conv.out_channels];
    let pad = conv.padding as isize;
    for oy in 0..oh {
        for ox in 0..ow {
            for oc in 0..conv.out_channels {
                let mut acc = conv.bias[oc];
                for ky in 0..conv.kernel_h {
                    let iy = (oy * conv.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue; // zero padding contributes nothing
                    }
                    for kx in 0..conv.kernel_w {
                        let ix = (ox * conv.stride + kx) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let in_base = (iy as usize * w + ix as usize) * c;
                        let w_base = ((oc * c) * conv.kernel_h + ky) * conv.kernel_w + kx;
                        for ic in 0..c {
                            acc += conv.weights[w_base + ic * conv.kernel_h * conv.kernel_w]
                                * input[in_base + ic];
                        }
                    }
                }
                out[(oy * ow + ox) * conv.out_channels + oc] = acc;
            }
        }
    }
    out
}

fn conv_backward(
    conv: &ConvLayer,
    input: &[f64],
    grad_out: &[f64],
    in_shape: ActivationShape,
    slot: Option<&mut LayerGrads>,
) -> Vec<f64> {
    let ActivationShape::Spatial { height: h, width: w, channels: c } = in_shape else {
        unreachable!("validated at construction");
    };
    let oh = (h + 2 * conv.padding - conv.kernel_h) / conv.stride + 1;
    let ow = (w + 2 * conv.padding - conv.kernel_w) / conv.stride + 1;
    let pad = conv.padding as isize;
    let mut grad_in = vec![0.0; input.len()];
    let (mut gw, mut gb) = match slot {
        Some(LayerGrads::Weighted { weights, bias }) => (Some(weights), Some(bias)),
        _ => (None, None),
    };
    for oy in 0..oh {
        for ox in 0..ow {
            for oc in 0..conv.out_channels {
                let g = grad_out[(oy * ow + ox) * conv.out_channels + oc];
                if let Some(gb) = gb.as_deref_mut() {
                    gb[oc] += g;
                }
                for ky in 0..conv.kernel_h {
                    let iy = (oy * conv.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..conv.kernel_w {
                        let ix = (ox * conv.stride + kx) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let in_base = (iy as usize * w + ix as usize) * c;
                        let w_base = ((oc * c) * conv.kernel_h + ky) * conv.kernel_w + kx;
                        for ic in 0..c {
                            let w_idx = w_base + ic * conv.kernel_h * conv.kernel_w;
                            if let Some(gw) = gw.as_deref_mut() {
                                gw[w_idx] += g * input[in_base + ic];
                            }
                            grad_in[in_base + ic] += g * conv.weights[w_idx];
                        }
                    }
                }
            }
        }
    }
    grad_in
}

fn pool_forward(input: &[f64], in_shape: ActivationShape, window: usize, stride: usize) -> Vec<f64> {
    let ActivationShape::Spatial { height: h, width: w, channels: c } = in_shape else {
        unreachable!("validated at construction");
    };
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..window {
                    for dx in 0..window {
                        let v = input[((oy * stride + dy) * w + (ox * stride + dx)) * c + ch];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(oy * ow + ox) * c + ch] = best;
            }
        }
    }
    out
}

/// Routes each window's gradient to the first (scan-order) maximum, the same
/// element the forward pass selected.
fn pool_backward(
    input: &[f64],
    grad_out: &[f64],
    in_shape: ActivationShape,
    window: usize,
    stride: usize,
) -> Vec<f64> {
    let ActivationShape::Spatial { height: h, width: w, channels: c } = in_shape else {
        unreachable!("validated at construction");
    };
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut grad_in = vec![0.0; input.len()];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = ((oy * stride + dy) * w + (ox * stride + dx)) * c + ch;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                grad_in[best_idx] += grad_out[(oy * ow + ox) * c + ch];
            }
        }
    }
    grad_in
}

fn dense_forward(dense: &DenseLayer, input: &[f64]) -> Vec<f64> {
    let mut out = dense.bias.clone();
    for (i, &x) in input.iter().enumerate() {
        let row = &dense.weights[i * dense.out_dim..(i + 1) * dense.out_dim];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += x * w;
        }
    }
    out
}

fn dense_backward(
    dense: &DenseLayer,
    input: &[f64],
    grad_out: &[f64],
    slot: Option<&mut LayerGrads>,
) -> Vec<f64> {
    if let Some(LayerGrads::Weighted { weights, bias }) = slot {
        for (b, &g) in bias.iter_mut().zip(grad_out) {
            *b += g;
        }
        for (i, &x) in input.iter().enumerate() {
            let row = &mut weights[i * dense.out_dim..(i + 1) * dense.out_dim];
            for (wg, &g) in row.iter_mut().zip(grad_out) {
                *wg += x * g;
            }
        }
    }
    let mut grad_in = vec![0.0; dense.in_dim];
    for (i, gi) in grad_in.iter_mut().enumerate() {
        let row = &dense.weights[i * dense.out_dim..(i + 1) * dense.out_dim];
        *gi = row.iter().zip(grad_out).map(|(&w, &g)| w * g).sum();
    }
    grad_in
}

/// Fraction of the dataset the model labels correctly.
pub fn accuracy(model: &Classifier, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Parameter("cannot measure accuracy on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for (image, label) in data.items() {
        if model.forward(image)?.argmax_label == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

// ---------------------------------------------------------------------------
// Model file format ("ADVM", version 1, little-endian after the magic)
// ---------------------------------------------------------------------------

const MODEL_MAGIC: &[u8; 4] = b"ADVM";
const MODEL_VERSION: u32 = 1;

const TAG_CONV: u8 = 0;
const TAG_RELU: u8 = 1;
const TAG_MAXPOOL: u8 = 2;
const TAG_FLATTEN: u8 = 3;
const TAG_DENSE: u8 = 4;
const TAG_SOFTMAX: u8 = 5;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the model to its binary format. The encoding is canonical, so
/// equal models produce identical bytes.
pub fn save_model(model: &Classifier, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    push_u32(&mut buf, MODEL_VERSION);
    let (h, w, c) = model.input_shape;
    push_u32(&mut buf, h as u32);
    push_u32(&mut buf, w as u32);
    push_u32(&mut buf, c as u32);
    push_u32(&mut buf, model.num_classes as u32);
    push_u32(&mut buf, model.layers.len() as u32);
    for layer in &model.layers {
        match layer {
            Layer::Conv(conv) => {
                buf.push(TAG_CONV);
                for v in [
                    conv.kernel_h,
                    conv.kernel_w,
                    conv.in_channels,
                    conv.out_channels,
                    conv.stride,
                    conv.padding,
                ] {
                    push_u32(&mut buf, v as u32);
                }
                push_f64s(&mut buf, &conv.weights);
                push_f64s(&mut buf, &conv.bias);
            }
            Layer::Relu => buf.push(TAG_RELU),
            Layer::MaxPool { window, stride } => {
                buf.push(TAG_MAXPOOL);
                push_u32(&mut buf, *window as u32);
                push_u32(&mut buf, *stride as u32);
            }
            Layer::Flatten => buf.push(TAG_FLATTEN),
            Layer::Dense(dense) => {
                buf.push(TAG_DENSE);
                push_u32(&mut buf, dense.in_dim as u32);
                push_u32(&mut buf, dense.out_dim as u32);
                push_f64s(&mut buf, &dense.weights);
                push_f64s(&mut buf, &dense.bias);
            }
            Layer::Softmax => buf.push(TAG_SOFTMAX),
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct ModelReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ModelReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "model file ends before {what} (offset {})",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn read_u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(self.take(4, what)?);
        Ok(u32::from_le_bytes(buf))
    }

    fn read_usize(&mut self, what: &str) -> Result<usize> {
        Ok(self.read_u32(what)? as usize)
    }

    fn read_f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Loads a model saved by `save_model`, validating it end to end.
pub fn load_model(path: &Path) -> Result<Classifier> {
    let bytes = fs::read(path)?;
    let mut r = ModelReader { bytes: &bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "bad model magic {magic:?} (expected {MODEL_MAGIC:?})"
        )));
    }
    let version = r.read_u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {version} (expected {MODEL_VERSION})"
        )));
    }
    let h = r.read_usize("input height")?;
    let w = r.read_usize("input width")?;
    let c = r.read_usize("input channels")?;
    let num_classes = r.read_usize("class count")?;
    let layer_count = r.read_usize("layer count")?;
    let mut layers = Vec::with_capacity(layer_count.min(64));
    for i in 0..layer_count {
        let what = format!("layer {i}");
        let tag = r.read_u8(&what)?;
        let layer = match tag {
            TAG_CONV => {
                let kernel_h = r.read_usize(&what)?;
                let kernel_w = r.read_usize(&what)?;
                let in_channels = r.read_usize(&what)?;
                let out_channels = r.read_usize(&what)?;
                let stride = r.read_usize(&what)?;
                let padding = r.read_usize(&what)?;
                let weights =
                    r.read_f64s(out_channels * in_channels * kernel_h * kernel_w, &what)?;
                let bias = r.read_f64s(out_channels, &what)?;
                Layer::Conv(ConvLayer {
                    kernel_h,
                    kernel_w,
                    in_channels,
                    out_channels,
                    stride,
                    padding,
                    weights,
                    bias,
                })
            }
            TAG_RELU => Layer::Relu,
            TAG_MAXPOOL => Layer::MaxPool {
                window: r.read_usize(&what)?,
                stride: r.read_usize(&what)?,
            },
            TAG_FLATTEN => Layer::Flatten,
            TAG_DENSE => {
                let in_dim = r.read_usize(&what)?;
                let out_dim = r.read_usize(&what)?;
                let weights = r.read_f64s(in_dim * out_dim, &what)?;
                let bias = r.read_f64s(out_dim, &what)?;
                Layer::Dense(DenseLayer { in_dim, out_dim, weights, bias })
            }
            TAG_SOFTMAX => Layer::Softmax,
            other => {
                return Err(Error::Format(format!("unknown layer tag {other} in layer {i}")))
            }
        };
        layers.push(layer);
    }
    if !r.done() {
        return Err(Error::Format(format!(
            "model file has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Classifier::new(layers, (h, w, c), num_classes)
        .map_err(|e| Error::Format(format!("model file describes an invalid classifier: {e}")))
}
