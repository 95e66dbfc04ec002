//! Parameterized layers and the blocks assembled from them.

use rand::Rng;
use rand_distr::StandardNormal;

use super::Mode;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BatchNormStats, PoolKind, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; updated by forward passes, never by gradients.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    HeNormal { fan_in: usize },
    Constant(f64),
}

/// A named tensor owned by a layer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
    init: Init,
    /// For buffers: holds estimated or imported values rather than the
    /// construction defaults.
    pub(crate) ready: bool,
    binding: Option<Var>,
}

impl<T: Scalar> Param<T> {
    fn new(shape: &[usize], kind: ParamKind, init: Init) -> Self {
        let fill = match init {
            Init::Constant(v) => T::lit(v),
            Init::HeNormal { .. } => T::zero(),
        };
        Self {
            tensor: Tensor::full(shape, fill).with_requires_grad(kind == ParamKind::Trainable),
            kind,
            init,
            ready: false,
            binding: None,
        }
    }

    fn weight(shape: &[usize], fan_in: usize) -> Self {
        Self::new(shape, ParamKind::Trainable, Init::HeNormal { fan_in })
    }

    fn constant(shape: &[usize], value: f64) -> Self {
        Self::new(shape, ParamKind::Trainable, Init::Constant(value))
    }

    fn buffer(shape: &[usize], value: f64) -> Self {
        Self::new(shape, ParamKind::Buffer, Init::Constant(value))
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Trainable
    }

    /// Draws fresh values: zero-mean normal with variance 2/fan_in for
    /// weights, the fixed constant otherwise.
    pub(crate) fn initialize<R: Rng>(&mut self, rng: &mut R) {
        match self.init {
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                for v in self.tensor.data_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = T::lit(z * std);
                }
            }
            Init::Constant(c) => self.tensor.data_mut().fill(T::lit(c)),
        }
        self.ready = false;
        self.tensor.clear_grad();
    }

    pub(crate) fn bind(&mut self, tape: &mut Tape<T>) -> Var {
        let v = tape.leaf(self.tensor.clone());
        self.binding = Some(v);
        v
    }

    pub(crate) fn release(&mut self) {
        self.binding = None;
    }

    /// Moves the gradient of the last bound value into the tensor's slot.
    pub(crate) fn take_grad(&mut self, tape: &Tape<T>) {
        if let Some(v) = self.binding.take() {
            if let Some(g) = tape.grad_tensor(v) {
                self.tensor.set_grad(g.into_data()).expect("tape preserves shape");
            }
        }
    }
}

/// Visits parameters in a fixed order under hierarchical names.
pub(crate) trait Parameters<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>);
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! visit_fields {
    ($ty:ident { $($field:ident : $label:literal),* $(; $($opt:ident : $olabel:literal),*)? }) => {
        impl<T: Scalar> Parameters<T> for $ty<T> {
            fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
                $( self.$field.params(&join(prefix, $label), out); )*
                $($( if let Some(m) = &self.$opt { m.params(&join(prefix, $olabel), out); } )*)?
            }
            fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
                $( self.$field.params_mut(&join(prefix, $label), out); )*
                $($( if let Some(m) = &mut self.$opt { m.params_mut(&join(prefix, $olabel), out); } )*)?
            }
        }
    };
}

impl<T: Scalar> Parameters<T> for Param<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((prefix.to_string(), self));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((prefix.to_string(), self));
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

visit_fields!(Conv2d { weight: "weight"; bias: "bias" });

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let per_group = in_channels / groups;
        Self {
            weight: Param::weight(&[out_channels, per_group, kernel, kernel], per_group * kernel * kernel),
            bias: bias.then(|| Param::constant(&[out_channels], 0.0)),
            stride,
            padding,
            groups,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape);
        let b = self.bias.as_mut().map(|b| b.bind(tape));
        tape.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
}

visit_fields!(BatchNorm2d { weight: "weight", bias: "bias", running_mean: "running_mean", running_var: "running_var" });

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            weight: Param::constant(&[channels], 1.0),
            bias: Param::constant(&[channels], 0.0),
            running_mean: Param::buffer(&[channels], 0.0),
            running_var: Param::buffer(&[channels], 1.0),
        }
    }

    /// Training mode normalizes with batch statistics and folds them into the
    /// running estimates; evaluation mode requires estimates to exist.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let g = self.weight.bind(tape);
        let b = self.bias.bind(tape);
        let eps = T::lit(BN_EPS);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, g, b, BatchNormStats::Batch, eps)?;
                let (mean, var) = stats.expect("batch mode returns statistics");
                let m = T::lit(BN_MOMENTUM);
                let keep = T::one() - m;
                for (r, s) in self.running_mean.tensor.data_mut().iter_mut().zip(mean) {
                    *r = keep * *r + m * s;
                }
                for (r, s) in self.running_var.tensor.data_mut().iter_mut().zip(var) {
                    *r = keep * *r + m * s;
                }
                self.running_mean.ready = true;
                self.running_var.ready = true;
                Ok(y)
            }
            Mode::Eval => {
                if !(self.running_mean.ready && self.running_var.ready) {
                    return Err(Error::invalid(
                        "batchnorm2d",
                        "evaluation mode before running statistics were estimated or imported",
                    ));
                }
                let stats = BatchNormStats::Running {
                    mean: self.running_mean.tensor.data(),
                    var: self.running_var.tensor.data(),
                };
                Ok(tape.batch_norm(x, g, b, stats, eps)?.0)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

visit_fields!(Linear { weight: "weight", bias: "bias" });

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Param::weight(&[out_features, in_features], in_features),
            bias: Param::constant(&[out_features], 0.0),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape);
        let b = self.bias.bind(tape);
        tape.linear(x, w, Some(b))
    }
}

/// conv → batchnorm → relu, then optional 3×3/2 max pooling with padding 1.
#[derive(Clone, Debug)]
pub struct Stem<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub max_pool: bool,
}

visit_fields!(Stem { conv: "conv", bn: "bn" });

impl<T: Scalar> Stem<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, max_pool: bool) -> Self {
        Self {
            conv: Conv2d::new(in_channels, out_channels, kernel, stride, kernel / 2, 1, false),
            bn: BatchNorm2d::new(out_channels),
            max_pool,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, y, mode)?;
        let y = tape.relu(y);
        if self.max_pool {
            tape.pool2d(y, PoolKind::Max, 3, 2, 1)
        } else {
            Ok(y)
        }
    }
}

/// One layer of a dense block: [bn → relu → 1×1 conv] → bn → relu → 3×3 conv
/// emitting `growth` channels.
#[derive(Clone, Debug)]
pub struct DenseLayer<T> {
    pub bottleneck: Option<(BatchNorm2d<T>, Conv2d<T>)>,
    pub bn: BatchNorm2d<T>,
    pub conv: Conv2d<T>,
}

impl<T: Scalar> Parameters<T> for DenseLayer<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        match &self.bottleneck {
            Some((bn1, conv1)) => {
                bn1.params(&join(prefix, "bn1"), out);
                conv1.params(&join(prefix, "conv1"), out);
                self.bn.params(&join(prefix, "bn2"), out);
                self.conv.params(&join(prefix, "conv2"), out);
            }
            None => {
                self.bn.params(&join(prefix, "bn"), out);
                self.conv.params(&join(prefix, "conv"), out);
            }
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        match &mut self.bottleneck {
            Some((bn1, conv1)) => {
                bn1.params_mut(&join(prefix, "bn1"), out);
                conv1.params_mut(&join(prefix, "conv1"), out);
                self.bn.params_mut(&join(prefix, "bn2"), out);
                self.conv.params_mut(&join(prefix, "conv2"), out);
            }
            None => {
                self.bn.params_mut(&join(prefix, "bn"), out);
                self.conv.params_mut(&join(prefix, "conv"), out);
            }
        }
    }
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(in_channels: usize, growth: usize, bottleneck: Option<usize>) -> Self {
        let (bottleneck, inner) = match bottleneck {
            Some(width) => (
                Some((BatchNorm2d::new(in_channels), Conv2d::new(in_channels, width, 1, 1, 0, 1, false))),
                width,
            ),
            None => (None, in_channels),
        };
        Self {
            bottleneck,
            bn: BatchNorm2d::new(inner),
            conv: Conv2d::new(inner, growth, 3, 1, 1, 1, false),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut y = x;
        if let Some((bn1, conv1)) = &mut self.bottleneck {
            y = bn1.forward(tape, y, mode)?;
            y = tape.relu(y);
            y = conv1.forward(tape, y)?;
        }
        let y = self.bn.forward(tape, y, mode)?;
        let y = tape.relu(y);
        self.conv.forward(tape, y)
    }
}

/// Densely connected stack: layer `i` sees the block input concatenated with
/// every earlier layer output; the block emits all of them concatenated.
#[derive(Clone, Debug)]
pub struct DenseBlock<T> {
    pub layers: Vec<DenseLayer<T>>,
}

impl<T: Scalar> Parameters<T> for DenseBlock<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.params(&join(prefix, &format!("layer{}", i + 1)), out);
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.params_mut(&join(prefix, &format!("layer{}", i + 1)), out);
        }
    }
}

impl<T: Scalar> DenseBlock<T> {
    pub fn new(in_channels: usize, layers: usize, growth: usize, bottleneck: Option<usize>) -> Self {
        Self {
            layers: (0..layers)
                .map(|i| DenseLayer::new(in_channels + i * growth, growth, bottleneck))
                .collect(),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut features = vec![x];
        for layer in &mut self.layers {
            let input = if features.len() == 1 {
                x
            } else {
                tape.concat_channels(&features)?
            };
            features.push(layer.forward(tape, input, mode)?);
        }
        tape.concat_channels(&features)
    }
}

/// Optional bn → relu, then 1×1 conv to ⌊θ·C⌋ channels and 2×2/2 average
/// pooling.
#[derive(Clone, Debug)]
pub struct TransitionLayer<T> {
    pub norm: Option<BatchNorm2d<T>>,
    pub conv: Conv2d<T>,
}

visit_fields!(TransitionLayer { conv: "conv"; norm: "bn" });

impl<T: Scalar> TransitionLayer<T> {
    pub fn new(in_channels: usize, compression: f64, pre_norm: bool) -> Self {
        let out = super::spec::compressed_channels(in_channels, compression);
        Self {
            norm: pre_norm.then(|| BatchNorm2d::new(in_channels)),
            conv: Conv2d::new(in_channels, out, 1, 1, 0, 1, false),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() == 4 && (!shape[2].is_multiple_of(2) || !shape[3].is_multiple_of(2)) {
            return Err(Error::shape(
                "transition_layer",
                format!("spatial extent {}x{} must be even", shape[2], shape[3]),
            ));
        }
        let mut y = x;
        if let Some(bn) = &mut self.norm {
            y = bn.forward(tape, y, mode)?;
            y = tape.relu(y);
        }
        let y = self.conv.forward(tape, y)?;
        tape.pool2d(y, PoolKind::Avg, 2, 2, 0)
    }
}

/// Channel recalibration: global average pool → linear C→C/r → relu →
/// linear C/r→C → sigmoid, then each input channel scaled by its factor.
#[derive(Clone, Debug)]
pub struct SqueezeExcitation<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

visit_fields!(SqueezeExcitation { fc1: "fc1", fc2: "fc2" });

impl<T: Scalar> SqueezeExcitation<T> {
    pub fn new(channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::invalid(
                "se_block",
                format!("channels {channels} not divisible by reduction {reduction}"),
            ));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(channels, hidden),
            fc2: Linear::new(hidden, channels),
        })
    }

    /// Returns `(output, scales)` where `scales` is the (N,C) excitation.
    pub fn forward_with_scales(&mut self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
        let [n, c] = [tape.shape(x)[0], tape.shape(x)[1]];
        let squeezed = tape.pool2d(x, PoolKind::GlobalAvg, 0, 0, 0)?;
        let squeezed = tape.reshape(squeezed, &[n, c])?;
        let h = self.fc1.forward(tape, squeezed)?;
        let h = tape.relu(h);
        let e = self.fc2.forward(tape, h)?;
        let scales = tape.sigmoid(e);
        Ok((tape.scale_channels(x, scales)?, scales))
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_scales(tape, x)?.0)
    }
}

/// Aggregated-transform residual unit with an optional SE stage ahead of the
/// residual addition.
#[derive(Clone, Debug)]
pub struct ResNeXtBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub conv3: Conv2d<T>,
    pub bn3: BatchNorm2d<T>,
    pub se: Option<SqueezeExcitation<T>>,
    pub shortcut: Option<Projection<T>>,
}

visit_fields!(ResNeXtBlock {
    conv1: "conv1", bn1: "bn1", conv2: "conv2", bn2: "bn2", conv3: "conv3", bn3: "bn3";
    se: "se", shortcut: "shortcut"
});

/// Strided 1×1 conv + batchnorm on the residual path.
#[derive(Clone, Debug)]
pub struct Projection<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

visit_fields!(Projection { conv: "conv", bn: "bn" });

impl<T: Scalar> ResNeXtBlock<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        cardinality: usize,
        bottleneck_width: usize,
        stride: usize,
        se_reduction: Option<usize>,
    ) -> Result<Self> {
        let inner = cardinality * bottleneck_width;
        let se = se_reduction
            .map(|r| SqueezeExcitation::new(out_channels, r))
            .transpose()?;
        let shortcut = (stride != 1 || in_channels != out_channels).then(|| Projection {
            conv: Conv2d::new(in_channels, out_channels, 1, stride, 0, 1, false),
            bn: BatchNorm2d::new(out_channels),
        });
        Ok(Self {
            conv1: Conv2d::new(in_channels, inner, 1, 1, 0, 1, false),
            bn1: BatchNorm2d::new(inner),
            conv2: Conv2d::new(inner, inner, 3, stride, 1, cardinality, false),
            bn2: BatchNorm2d::new(inner),
            conv3: Conv2d::new(inner, out_channels, 1, 1, 0, 1, false),
            bn3: BatchNorm2d::new(out_channels),
            se,
            shortcut,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv1.forward(tape, x)?;
        let y = self.bn1.forward(tape, y, mode)?;
        let y = tape.relu(y);
        let y = self.conv2.forward(tape, y)?;
        let y = self.bn2.forward(tape, y, mode)?;
        let y = tape.relu(y);
        let y = self.conv3.forward(tape, y)?;
        let mut y = self.bn3.forward(tape, y, mode)?;
        if let Some(se) = &mut self.se {
            y = se.forward(tape, y)?;
        }
        let residual = match &mut self.shortcut {
            Some(p) => {
                let r = p.conv.forward(tape, x)?;
                p.bn.forward(tape, r, mode)?
            }
            None => x,
        };
        if tape.shape(residual) != tape.shape(y) {
            return Err(Error::shape(
                "resnext_block",
                format!(
                    "residual {:?} does not match branch {:?}",
                    tape.shape(residual),
                    tape.shape(y)
                ),
            ));
        }
        let sum = tape.add(y, residual)?;
        Ok(tape.relu(sum))
    }
}

/// Optional bn → relu, global average pool, linear classifier.
#[derive(Clone, Debug)]
pub struct Head<T> {
    pub norm: Option<BatchNorm2d<T>>,
    pub fc: Linear<T>,
}

visit_fields!(Head { fc: "fc"; norm: "bn" });

impl<T: Scalar> Head<T> {
    pub fn new(in_channels: usize, num_classes: usize, pre_norm: bool) -> Self {
        Self {
            norm: pre_norm.then(|| BatchNorm2d::new(in_channels)),
            fc: Linear::new(in_channels, num_classes),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut y = x;
        if let Some(bn) = &mut self.norm {
            y = bn.forward(tape, y, mode)?;
            y = tape.relu(y);
        }
        let pooled = tape.pool2d(y, PoolKind::GlobalAvg, 0, 0, 0)?;
        let n = tape.shape(pooled)[0];
        let c = tape.shape(pooled)[1];
        let flat = tape.reshape(pooled, &[n, c])?;
        self.fc.forward(tape, flat)
    }
}
