//! A minimal fully-convolutional pixel classifier.
//!
//! The network is a stack of "same"-padded convolutions and ReLUs followed by
//! exactly one dropout layer and a final 1×1 convolution to the class
//! logits. Because dropout only feeds the final convolution, Monte-Carlo
//! inference computes the trunk features once per image and resamples only
//! the dropout mask and the head.

mod checkpoint;
mod conv;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{ClassMask, Image, ProbabilityStack};

pub use checkpoint::{load_checkpoint, save_checkpoint, MODEL_META};
pub use train::{train, RetrainMode, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layer {
    Conv { kernel: usize, out_channels: usize },
    Relu,
    Dropout { p: f64 },
}

/// Layer list plus input channel count.
///
/// Valid architectures end in `dropout, conv 1×1 → classes` and contain no
/// other dropout layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    in_channels: usize,
    layers: Vec<Layer>,
}

impl Architecture {
    pub fn new(in_channels: usize, layers: Vec<Layer>) -> Result<Self> {
        let arch = Architecture {
            in_channels,
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// conv3×3(→8)+ReLU, conv3×3(→16)+ReLU, dropout(p), conv1×1(→classes).
    pub fn standard(in_channels: usize, classes: usize, dropout_p: f64) -> Result<Self> {
        Self::with_widths(in_channels, classes, dropout_p, &[8, 16])
    }

    pub fn with_widths(
        in_channels: usize,
        classes: usize,
        dropout_p: f64,
        widths: &[usize],
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for &w in widths {
            layers.push(Layer::Conv {
                kernel: 3,
                out_channels: w,
            });
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Dropout { p: dropout_p });
        layers.push(Layer::Conv {
            kernel: 1,
            out_channels: classes,
        });
        Self::new(in_channels, layers)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArchitecture(m));
        if self.in_channels == 0 {
            return bad("input channel count must be positive".into());
        }
        let dropouts: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Dropout { .. }))
            .map(|(i, _)| i)
            .collect();
        let n = self.layers.len();
        if dropouts.is_empty() {
            return bad("no dropout layer".into());
        }
        if dropouts.len() > 1 {
            return bad(format!("{} dropout layers, expected one", dropouts.len()));
        }
        if n < 2 || dropouts[0] != n - 2 {
            return bad("dropout must sit immediately before the final convolution".into());
        }
        let Layer::Conv {
            kernel,
            out_channels,
        } = self.layers[n - 1]
        else {
            return bad("last layer must be a convolution".into());
        };
        if kernel != 1 {
            return bad(format!("final convolution must be 1x1, got {kernel}x{kernel}"));
        }
        if out_channels < 2 {
            return bad(format!("need at least 2 classes, got {out_channels}"));
        }
        for layer in &self.layers {
            match *layer {
                Layer::Conv {
                    kernel,
                    out_channels,
                } => {
                    if kernel % 2 == 0 || out_channels == 0 {
                        return bad(format!("conv{kernel}:{out_channels} is not allowed"));
                    }
                }
                Layer::Dropout { p } => {
                    if !(0.0..1.0).contains(&p) {
                        return bad(format!("dropout probability {p} outside [0,1)"));
                    }
                }
                Layer::Relu => {}
            }
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Conv { out_channels, .. }) => *out_channels,
            _ => unreachable!("validated architecture ends in a conv"),
        }
    }

    pub fn dropout_p(&self) -> f64 {
        match self.layers[self.layers.len() - 2] {
            Layer::Dropout { p } => p,
            _ => unreachable!("validated architecture has dropout last-but-one"),
        }
    }

    pub fn with_dropout(&self, p: f64) -> Result<Self> {
        let mut layers = self.layers.clone();
        let n = layers.len();
        layers[n - 2] = Layer::Dropout { p };
        Self::new(self.in_channels, layers)
    }
}

impl fmt::Display for Architecture {
    /// `in=1;conv3:8;relu;conv3:16;relu;dropout:0.5;conv1:3`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "in={}", self.in_channels)?;
        for layer in &self.layers {
            match layer {
                Layer::Conv {
                    kernel,
                    out_channels,
                } => write!(f, ";conv{kernel}:{out_channels}")?,
                Layer::Relu => write!(f, ";relu")?,
                Layer::Dropout { p } => write!(f, ";dropout:{p}")?,
            }
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArchitecture(format!("cannot parse descriptor {s:?}"));
        let mut parts = s.split(';').map(str::trim);
        let in_channels = parts
            .next()
            .and_then(|p| p.strip_prefix("in="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad)?;
        let mut layers = Vec::new();
        for part in parts {
            let layer = if part == "relu" {
                Layer::Relu
            } else if let Some(p) = part.strip_prefix("dropout:") {
                Layer::Dropout {
                    p: p.parse().map_err(|_| bad())?,
                }
            } else if let Some(rest) = part.strip_prefix("conv") {
                let (k, c) = rest.split_once(':').ok_or_else(bad)?;
                Layer::Conv {
                    kernel: k.parse().map_err(|_| bad())?,
                    out_channels: c.parse().map_err(|_| bad())?,
                }
            } else {
                return Err(bad());
            };
            layers.push(layer);
        }
        Architecture::new(in_channels, layers)
    }
}

/// Weights of one convolution, `weight` laid out `(out, in, ky, kx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvParams {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Architecture plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    arch: Architecture,
    convs: Vec<ConvParams>,
}

/// Per-convolution gradients, same layout as [`SegModel`] weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub convs: Vec<ConvParams>,
}

impl Gradients {
    fn zeros_like(model: &SegModel) -> Self {
        Gradients {
            convs: model
                .convs
                .iter()
                .map(|c| ConvParams::zeros(c.in_channels, c.out_channels, c.kernel))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    /// Flat index over all weights then biases of each convolution in turn.
    pub fn get(&self, index: usize) -> f64 {
        let (conv, offset) = locate(&self.convs, index);
        let c = &self.convs[conv];
        if offset < c.weight.len() {
            c.weight[offset]
        } else {
            c.bias[offset - c.weight.len()]
        }
    }
}

fn locate(convs: &[ConvParams], mut index: usize) -> (usize, usize) {
    for (i, c) in convs.iter().enumerate() {
        if index < c.len() {
            return (i, index);
        }
        index -= c.len();
    }
    panic!("parameter index out of range");
}

/// Fan-in scaled uniform init (He-uniform bound `sqrt(6 / fan_in)`), zero biases.
pub fn init_model(arch: &Architecture, seed: u64) -> Result<SegModel> {
    arch.validate()?;
    let mut rng = seed::derived_rng(seed, &[seed::stream::MODEL_INIT]);
    let mut convs = Vec::new();
    let mut channels = arch.in_channels;
    for layer in &arch.layers {
        if let Layer::Conv {
            kernel,
            out_channels,
        } = *layer
        {
            let mut conv = ConvParams::zeros(channels, out_channels, kernel);
            let bound = (6.0 / (channels * kernel * kernel) as f64).sqrt();
            for w in conv.weight.iter_mut() {
                *w = (2.0 * rng.gen::<f64>() - 1.0) * bound;
            }
            convs.push(conv);
            channels = out_channels;
        }
    }
    Ok(SegModel {
        arch: arch.clone(),
        convs,
    })
}

/// Activations recorded by a forward pass; `acts[i]` is the input of layer `i`.
struct Trace {
    acts: Vec<Vec<f64>>,
}

impl SegModel {
    pub fn from_parts(arch: Architecture, convs: Vec<ConvParams>) -> Result<Self> {
        let mut channels = arch.in_channels;
        let mut it = convs.iter();
        for layer in &arch.layers {
            if let Layer::Conv {
                kernel,
                out_channels,
            } = *layer
            {
                let c = it
                    .next()
                    .ok_or_else(|| Error::InvalidArchitecture("missing conv weights".into()))?;
                if c.in_channels != channels
                    || c.out_channels != out_channels
                    || c.kernel != kernel
                    || c.weight.len() != out_channels * channels * kernel * kernel
                    || c.bias.len() != out_channels
                {
                    return Err(Error::InvalidArchitecture(
                        "conv weights do not match the architecture".into(),
                    ));
                }
                channels = out_channels;
            }
        }
        if it.next().is_some() {
            return Err(Error::InvalidArchitecture("extra conv weights".into()));
        }
        if convs
            .iter()
            .any(|c| c.weight.iter().chain(&c.bias).any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidArchitecture("non-finite weight".into()));
        }
        Ok(SegModel { arch, convs })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn convs(&self) -> &[ConvParams] {
        &self.convs
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    /// Same weights, different dropout probability.
    pub fn with_dropout(&self, p: f64) -> Result<Self> {
        Ok(SegModel {
            arch: self.arch.with_dropout(p)?,
            convs: self.convs.clone(),
        })
    }

    /// Rounds every weight to the nearest `f32`, the precision checkpoints store.
    pub fn round_to_f32(&self) -> SegModel {
        let mut out = self.clone();
        for c in &mut out.convs {
            for v in c.weight.iter_mut().chain(c.bias.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(ConvParams::len).sum()
    }

    /// Flat parameter access in [`Gradients::get`] order.
    pub fn param(&self, index: usize) -> f64 {
        let (conv, offset) = locate(&self.convs, index);
        let c = &self.convs[conv];
        if offset < c.weight.len() {
            c.weight[offset]
        } else {
            c.bias[offset - c.weight.len()]
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (conv, offset) = locate(&self.convs, index);
        let c = &mut self.convs[conv];
        if offset < c.weight.len() {
            c.weight[offset] = value;
        } else {
            let n = c.weight.len();
            c.bias[offset - n] = value;
        }
    }

    /// Channel count of the activations entering the dropout layer.
    pub fn feature_channels(&self) -> usize {
        self.convs.last().expect("at least one conv").in_channels
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.channels() != self.arch.in_channels {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} input channels, image has {}",
                self.arch.in_channels,
                image.channels()
            )));
        }
        if image.height() == 0 || image.width() == 0 {
            return Err(Error::DimensionMismatch("empty image".into()));
        }
        Ok(())
    }

    fn forward_trace(&self, image: &Image, mask: Option<&[f64]>) -> Trace {
        let (h, w) = (image.height(), image.width());
        let mut acts = vec![image.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>()];
        let mut convs = self.convs.iter();
        for layer in &self.arch.layers {
            let input = acts.last().unwrap();
            let out = match *layer {
                Layer::Conv { .. } => conv::forward(convs.next().unwrap(), input, h, w),
                Layer::Relu => input.iter().map(|&v| v.max(0.0)).collect(),
                Layer::Dropout { .. } => match mask {
                    Some(m) => input.iter().zip(m).map(|(a, s)| a * s).collect(),
                    None => input.clone(),
                },
            };
            acts.push(out);
        }
        Trace { acts }
    }

    fn backward(
        &self,
        trace: &Trace,
        mut grad: Vec<f64>,
        mask: Option<&[f64]>,
        h: usize,
        w: usize,
    ) -> Gradients {
        let mut grads = Gradients::zeros_like(self);
        let mut conv_idx = self.convs.len();
        for (i, layer) in self.arch.layers.iter().enumerate().rev() {
            let input = &trace.acts[i];
            match *layer {
                Layer::Conv { .. } => {
                    conv_idx -= 1;
                    let need_input_grad = i > 0;
                    let g = &mut grads.convs[conv_idx];
                    grad = conv::backward(
                        &self.convs[conv_idx],
                        input,
                        &grad,
                        h,
                        w,
                        g,
                        need_input_grad,
                    );
                }
                Layer::Relu => {
                    grad.iter_mut()
                        .zip(input)
                        .for_each(|(g, &x)| if x <= 0.0 { *g = 0.0 });
                }
                Layer::Dropout { .. } => {
                    if let Some(m) = mask {
                        grad.iter_mut().zip(m).for_each(|(g, s)| *g *= s);
                    }
                }
            }
        }
        grads
    }

    /// Summed pixel cross-entropy and its gradient for one image.
    ///
    /// `dropout_mask` holds one scale factor per feature unit entering the
    /// dropout layer (0 for dropped units); `None` disables dropout.
    pub fn loss_and_gradient(
        &self,
        image: &Image,
        target: &ClassMask,
        dropout_mask: Option<&[f64]>,
    ) -> Result<(f64, Gradients)> {
        self.check_pair(image, target)?;
        let (h, w) = (image.height(), image.width());
        let trace = self.forward_trace(image, dropout_mask);
        let logits = trace.acts.last().unwrap();
        let (loss, grad) = cross_entropy(logits, target, self.classes());
        let grads = self.backward(&trace, grad, dropout_mask, h, w);
        Ok((loss, grads))
    }

    /// Summed pixel cross-entropy for one image.
    pub fn loss(
        &self,
        image: &Image,
        target: &ClassMask,
        dropout_mask: Option<&[f64]>,
    ) -> Result<f64> {
        self.check_pair(image, target)?;
        let trace = self.forward_trace(image, dropout_mask);
        Ok(cross_entropy(trace.acts.last().unwrap(), target, self.classes()).0)
    }

    fn check_pair(&self, image: &Image, target: &ClassMask) -> Result<()> {
        self.check_image(image)?;
        if image.height() != target.height() || image.width() != target.width() {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{} vs mask {}x{}",
                image.height(),
                image.width(),
                target.height(),
                target.width()
            )));
        }
        target.check_classes(self.classes())
    }

    /// Draws an inverted-dropout mask: each unit kept with probability
    /// `1 - p` and scaled by `1 / (1 - p)`.
    pub fn dropout_mask(&self, pixels: usize, p: f64, rng: &mut impl Rng) -> Vec<f64> {
        let keep = 1.0 / (1.0 - p);
        // one u32 per unit: unit dropped when the draw falls below p * 2^32
        let threshold = (p * 4_294_967_296.0) as u64;
        (0..self.feature_channels() * pixels)
            .map(|_| if u64::from(rng.next_u32()) < threshold { 0.0 } else { keep })
            .collect()
    }

    /// Trunk activations entering the dropout layer.
    fn features(&self, image: &Image) -> Vec<f64> {
        let (h, w) = (image.height(), image.width());
        let mut act: Vec<f64> = image.data().iter().map(|&v| f64::from(v)).collect();
        let mut convs = self.convs.iter();
        let n = self.arch.layers.len();
        for layer in &self.arch.layers[..n - 2] {
            act = match *layer {
                Layer::Conv { .. } => conv::forward(convs.next().unwrap(), &act, h, w),
                Layer::Relu => act.into_iter().map(|v| v.max(0.0)).collect(),
                Layer::Dropout { .. } => unreachable!(),
            };
        }
        act
    }

    fn head_probs(&self, features: &[f64], h: usize, w: usize) -> Vec<f64> {
        let head = self.convs.last().unwrap();
        let mut logits = conv::forward(head, features, h, w);
        softmax_in_place(&mut logits, self.classes(), h * w);
        logits
    }

    /// Deterministic inference with dropout disabled.
    pub fn predict(&self, image: &Image) -> Result<ProbabilityStack> {
        self.check_image(image)?;
        let (h, w) = (image.height(), image.width());
        let probs = self.head_probs(&self.features(image), h, w);
        ProbabilityStack::new(1, self.classes(), h, w, probs)
    }

    /// `samples` stochastic forward passes with dropout active.
    ///
    /// The mask of sample `s` comes from the stream `derive(seed, s)`, so the
    /// result is independent of evaluation order.
    pub fn mc_predict(
        &self,
        image: &Image,
        samples: usize,
        dropout_p: f64,
        seed: u64,
    ) -> Result<ProbabilityStack> {
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {dropout_p} outside [0,1)"
            )));
        }
        if samples == 0 {
            return Err(Error::InvalidArgument("need at least one MC sample".into()));
        }
        self.check_image(image)?;
        let (h, w) = (image.height(), image.width());
        let features = self.features(image);
        let slices = (0..samples as u64)
            .map(|s| {
                if dropout_p == 0.0 {
                    return self.head_probs(&features, h, w);
                }
                let mut rng = seed::derived_rng(seed, &[seed::stream::MC_DROPOUT, s]);
                let mask = self.dropout_mask(h * w, dropout_p, &mut rng);
                let dropped: Vec<f64> = features.iter().zip(&mask).map(|(a, m)| a * m).collect();
                self.head_probs(&dropped, h, w)
            })
            .collect();
        ProbabilityStack::from_samples(self.classes(), h, w, slices)
    }
}

/// Softmax over classes for each pixel; `values` laid out `(class, pixel)`.
fn softmax_in_place(values: &mut [f64], classes: usize, pixels: usize) {
    for p in 0..pixels {
        let mut max = f64::NEG_INFINITY;
        for c in 0..classes {
            max = max.max(values[c * pixels + p]);
        }
        let mut z = 0.0;
        for c in 0..classes {
            let e = (values[c * pixels + p] - max).exp();
            values[c * pixels + p] = e;
            z += e;
        }
        for c in 0..classes {
            values[c * pixels + p] /= z;
        }
    }
}

/// Summed cross-entropy and d(loss)/d(logits).
fn cross_entropy(logits: &[f64], target: &ClassMask, classes: usize) -> (f64, Vec<f64>) {
    let pixels = target.data().len();
    let mut probs = logits.to_vec();
    softmax_in_place(&mut probs, classes, pixels);
    let mut loss = 0.0;
    for (p, &t) in target.data().iter().enumerate() {
        let idx = t as usize * pixels + p;
        loss -= probs[idx].max(f64::MIN_POSITIVE).ln();
        probs[idx] -= 1.0;
    }
    (loss, probs)
}
