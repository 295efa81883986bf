//! Declarative architecture description and the sequential layer stack
//! that executes it.

use crate::error::{Error, Result};
use crate::layers::{
    dropout_backward, dropout_forward, maxpool2_backward, maxpool2_forward, relu, relu_backward,
    unpool_duplicate_backward, unpool_duplicate_forward, ConvLayer, ConvTransposeLayer, DenseLayer,
    DropoutMask, PoolSwitches,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Allowed widths of the two hidden fully-connected layers.
pub const FC_WIDTH_GRID: std::ops::RangeInclusive<usize> = 300..=1000;
pub const FC_WIDTH_STEP: usize = 50;

pub fn check_fc_width(width: usize) -> Result<()> {
    if !FC_WIDTH_GRID.contains(&width) || !width.is_multiple_of(FC_WIDTH_STEP) {
        return Err(Error::Argument(format!(
            "fc width must be one of 300, 350, ..., 1000; got {width}"
        )));
    }
    Ok(())
}

/// One convolution stage of the encoder, optionally followed by 2×2 pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvStage {
    pub channels: usize,
    pub kernel: usize,
    pub pool: bool,
}

/// Architecture of the shared encoder, the labeler and the decoder.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetworkSpec {
    /// `[channels, height, width]` of one input image.
    pub input: [usize; 3],
    pub classes: usize,
    pub conv: Vec<ConvStage>,
    /// Widths of fc4 and fc5.
    pub fc: [usize; 2],
}

/// Activation shape after a named encoder stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageShape {
    pub stage: String,
    pub shape: Vec<usize>,
}

impl NetworkSpec {
    /// conv1(100, 5×5)-pool1-conv2(150, 5×5)-pool2-conv3(200, 3×3)-fc4-fc5.
    pub fn reference(input: [usize; 3], classes: usize, fc_width: usize) -> Self {
        NetworkSpec::with_channels(input, classes, [100, 150, 200], fc_width)
    }

    /// The reference layout with different filter counts.
    pub fn with_channels(input: [usize; 3], classes: usize, channels: [usize; 3], fc_width: usize) -> Self {
        NetworkSpec {
            input,
            classes,
            conv: vec![
                ConvStage { channels: channels[0], kernel: 5, pool: true },
                ConvStage { channels: channels[1], kernel: 5, pool: true },
                ConvStage { channels: channels[2], kernel: 3, pool: false },
            ],
            fc: [fc_width, fc_width],
        }
    }

    /// Shape inference through the encoder; fails naming the first stage
    /// whose input cannot be processed.
    pub fn encoder_shapes(&self) -> Result<Vec<StageShape>> {
        let build = |stage: String, reason: String| Error::Build { stage, reason };
        let [mut c, mut h, mut w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(build("input".into(), format!("empty input shape {:?}", self.input)));
        }
        if self.classes < 2 {
            return Err(build("fc_out".into(), format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.conv.is_empty() {
            return Err(build("conv1".into(), "at least one convolution stage is required".into()));
        }
        let mut out = vec![StageShape { stage: "input".into(), shape: vec![c, h, w] }];
        for (i, st) in self.conv.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            if st.kernel % 2 == 0 || st.kernel == 0 || st.channels == 0 {
                return Err(build(name, format!("needs an odd kernel and ≥1 channel, got {st:?}")));
            }
            if h < st.kernel || w < st.kernel {
                return Err(build(name, format!("{h}x{w} input is smaller than the {0}x{0} kernel", st.kernel)));
            }
            c = st.channels;
            h = h - st.kernel + 1;
            w = w - st.kernel + 1;
            out.push(StageShape { stage: name, shape: vec![c, h, w] });
            if st.pool {
                let name = format!("pool{}", i + 1);
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(build(name, format!("2x2 pooling needs even dims, got {h}x{w}")));
                }
                h /= 2;
                w /= 2;
                out.push(StageShape { stage: name, shape: vec![c, h, w] });
            }
        }
        for (i, &width) in self.fc.iter().enumerate() {
            if width == 0 {
                return Err(build(format!("fc{}", i + 4), "width must be positive".into()));
            }
            out.push(StageShape { stage: format!("fc{}", i + 4), shape: vec![width] });
        }
        Ok(out)
    }

    /// `[c, h, w]` of the last convolution stage's output.
    pub fn conv_output(&self) -> Result<[usize; 3]> {
        let shapes = self.encoder_shapes()?;
        let last = shapes
            .iter()
            .rev()
            .find(|s| s.shape.len() == 3)
            .expect("input shape is always present");
        Ok([last.shape[0], last.shape[1], last.shape[2]])
    }
}

/// Per-layer data kept from the forward pass for the backward pass.
#[derive(Debug)]
enum Cache {
    Input(Tensor),
    /// ReLU pre-activation.
    Gate(Tensor),
    Switches(PoolSwitches),
    Mask(Option<DropoutMask>),
    Shape(Vec<usize>),
    Empty,
}

/// One element of a sequential stack.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    ConvTranspose(ConvTransposeLayer),
    Dense(DenseLayer),
    Relu,
    MaxPool2,
    Unpool2,
    Flatten,
    /// Reshapes `[B, c·h·w]` into `[B, c, h, w]`.
    Unflatten([usize; 3]),
    /// Inverted dropout; only active in training passes that supply an rng.
    Dropout(f64),
}

impl Layer {
    fn forward(&self, x: Tensor, dropout: Option<&mut Rng>) -> Result<(Tensor, Cache)> {
        Ok(match self {
            Layer::Conv(l) => (l.forward(&x)?, Cache::Input(x)),
            Layer::ConvTranspose(l) => (l.forward(&x)?, Cache::Input(x)),
            Layer::Dense(l) => (l.forward(&x)?, Cache::Input(x)),
            Layer::Relu => (relu(&x), Cache::Gate(x)),
            Layer::MaxPool2 => {
                let (y, sw) = maxpool2_forward(&x)?;
                (y, Cache::Switches(sw))
            }
            Layer::Unpool2 => (unpool_duplicate_forward(&x)?, Cache::Empty),
            Layer::Flatten => {
                let shape = x.shape().to_vec();
                let b = shape[0];
                let rest = x.len() / b;
                (x.into_shape(&[b, rest])?, Cache::Shape(shape))
            }
            Layer::Unflatten([c, h, w]) => {
                let b = x.shape()[0];
                (x.into_shape(&[b, *c, *h, *w])?, Cache::Empty)
            }
            Layer::Dropout(p) => match dropout {
                Some(rng) => {
                    let (y, mask) = dropout_forward(&x, *p, rng)?;
                    (y, Cache::Mask(Some(mask)))
                }
                None => (x, Cache::Mask(None)),
            },
        })
    }

    /// Returns the input gradient (when `want_input`) and parameter grads.
    fn backward(&self, cache: Cache, gy: Tensor, want_input: bool) -> Result<(Option<Tensor>, Vec<Tensor>)> {
        Ok(match (self, cache) {
            (Layer::Conv(l), Cache::Input(x)) => {
                let g = l.backward_impl(&x, &gy, want_input)?;
                (g.input, vec![g.kernels, g.bias])
            }
            (Layer::ConvTranspose(l), Cache::Input(x)) => {
                let g = l.backward(&x, &gy)?;
                (Some(g.input), vec![g.kernels, g.bias])
            }
            (Layer::Dense(l), Cache::Input(x)) => {
                let g = l.backward(&x, &gy)?;
                (Some(g.input), vec![g.weights, g.bias])
            }
            (Layer::Relu, Cache::Gate(x)) => (Some(relu_backward(&x, &gy)?), vec![]),
            (Layer::MaxPool2, Cache::Switches(sw)) => (Some(maxpool2_backward(&sw, &gy)?), vec![]),
            (Layer::Unpool2, Cache::Empty) => (Some(unpool_duplicate_backward(&gy)?), vec![]),
            (Layer::Flatten, Cache::Shape(shape)) => (Some(gy.into_shape(&shape)?), vec![]),
            (Layer::Unflatten(_), Cache::Empty) => {
                let b = gy.shape()[0];
                let rest = gy.len() / b;
                (Some(gy.into_shape(&[b, rest])?), vec![])
            }
            (Layer::Dropout(_), Cache::Mask(mask)) => match mask {
                Some(m) => (Some(dropout_backward(&m, &gy)?), vec![]),
                None => (Some(gy), vec![]),
            },
            (layer, cache) => {
                unreachable!("cache {cache:?} does not belong to layer {layer:?}")
            }
        })
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Conv(l) => vec![("kernels", &l.kernels), ("bias", &l.bias)],
            Layer::ConvTranspose(l) => vec![("kernels", &l.kernels), ("bias", &l.bias)],
            Layer::Dense(l) => vec![("weights", &l.weights), ("bias", &l.bias)],
            _ => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::Conv(l) => vec![("kernels", &mut l.kernels), ("bias", &mut l.bias)],
            Layer::ConvTranspose(l) => vec![("kernels", &mut l.kernels), ("bias", &mut l.bias)],
            Layer::Dense(l) => vec![("weights", &mut l.weights), ("bias", &mut l.bias)],
            _ => vec![],
        }
    }
}

/// Saved activations of one forward pass through a [`Stack`].
#[derive(Debug)]
pub struct Trace {
    caches: Vec<Cache>,
}

impl Trace {
    /// Boolean ReLU gates and pooling switches seen in this pass; two passes
    /// with equal patterns are on the same linear piece of the network.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut pattern = Vec::new();
        for c in &self.caches {
            match c {
                Cache::Switches(sw) => pattern.extend_from_slice(sw.indices()),
                Cache::Gate(x) => pattern.extend(x.data().iter().map(|&v| usize::from(v > 0.0))),
                _ => {}
            }
        }
        pattern
    }
}

fn pool_gap(x: &Tensor) -> f64 {
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let d = x.data();
    let mut gap = f64::INFINITY;
    for p in 0..planes {
        for r in (0..h - h % 2).step_by(2) {
            for c in (0..w - w % 2).step_by(2) {
                let base = p * h * w;
                let mut win = [
                    d[base + r * w + c],
                    d[base + r * w + c + 1],
                    d[base + (r + 1) * w + c],
                    d[base + (r + 1) * w + c + 1],
                ];
                win.sort_by(|a, b| b.total_cmp(a));
                if win[0] > 0.0 {
                    gap = gap.min(win[0] - win[1]);
                }
            }
        }
    }
    gap
}

/// Gradients of every parameter of a stack, in [`Stack::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct StackGrads(pub Vec<Tensor>);

/// Named sequential layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    prefix: String,
    layers: Vec<(String, Layer)>,
}

impl Stack {
    pub fn new(prefix: &str) -> Self {
        Stack { prefix: prefix.to_string(), layers: Vec::new() }
    }

    pub fn push(&mut self, name: &str, layer: Layer) {
        self.layers.push((name.to_string(), layer));
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &Layer)> {
        self.layers.iter().map(|(n, l)| (n.as_str(), l))
    }

    pub fn forward(&self, x: Tensor, mut dropout: Option<&mut Rng>) -> Result<(Tensor, Trace)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (_, layer) in &self.layers {
            let (y, cache) = layer.forward(h, dropout.as_deref_mut())?;
            caches.push(cache);
            h = y;
        }
        Ok((h, Trace { caches }))
    }

    /// Forward pass without keeping activations.
    pub fn infer(&self, x: Tensor) -> Result<Tensor> {
        let mut h = x;
        for (_, layer) in &self.layers {
            h = layer.forward(h, None)?.0;
        }
        Ok(h)
    }

    /// Backpropagates `grad` through the stack. The input gradient is only
    /// computed when `want_input` is set.
    pub fn backward(&self, trace: Trace, grad: Tensor, want_input: bool) -> Result<(Option<Tensor>, StackGrads)> {
        let mut per_layer: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        let mut g = Some(grad);
        for (i, ((_, layer), cache)) in self.layers.iter().zip(trace.caches).enumerate().rev() {
            let need = want_input || i > 0;
            let upstream = g.take().expect("gradient available while layers remain");
            let (gx, pg) = layer.backward(cache, upstream, need)?;
            per_layer.push(pg);
            g = gx;
        }
        per_layer.reverse();
        Ok((g, StackGrads(per_layer.into_iter().flatten().collect())))
    }

    /// `(qualified name, tensor)` for every parameter, in declaration order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .flat_map(|(n, l)| {
                l.params()
                    .into_iter()
                    .map(move |(p, t)| (format!("{}.{}.{}", self.prefix, n, p), t))
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let prefix = &self.prefix;
        self.layers
            .iter_mut()
            .flat_map(|(n, l)| {
                let n = n.clone();
                l.params_mut()
                    .into_iter()
                    .map(move |(p, t)| (format!("{prefix}.{n}.{p}"), t))
            })
            .collect()
    }

    /// Forward pass that also reports the distance to the nearest kink:
    /// the smallest |ReLU pre-activation| and the smallest gap between the
    /// largest and second-largest entry of a pooling window whose maximum is
    /// positive. Finite differences with steps well below this margin stay
    /// on one linear piece.
    pub fn kink_margin(&self, x: Tensor) -> Result<(Tensor, f64)> {
        let mut margin = f64::INFINITY;
        let mut h = x;
        for (_, layer) in &self.layers {
            match layer {
                Layer::Relu => margin = h.data().iter().fold(margin, |m, v| m.min(v.abs())),
                Layer::MaxPool2 => margin = margin.min(pool_gap(&h)),
                _ => {}
            }
            h = layer.forward(h, None)?.0;
        }
        Ok((h, margin))
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}
