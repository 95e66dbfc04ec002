use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{DenseBlock, Head, Param, Parameters, ResNeXtBlock, Stem, TransitionLayer};
use super::spec::{BlockSpec, ModelSpec};
use super::Mode;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum Block<T> {
    Stem(Stem<T>),
    Dense(DenseBlock<T>),
    Transition(TransitionLayer<T>),
    Resnext(ResNeXtBlock<T>),
    Head(Head<T>),
}

/// An instantiated classifier: the spec plus its parameter tensors.
#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: ModelSpec,
    blocks: Vec<(String, Block<T>)>,
}

/// Builds a model and draws every parameter from a generator seeded with
/// `init_seed`, visiting parameters in name order of construction.
pub fn build_model<T: Scalar>(spec: &ModelSpec, init_seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let mut counters = [0usize; 3];
    let mut blocks = Vec::with_capacity(spec.blocks.len());
    for block in &spec.blocks {
        let entry = match block {
            BlockSpec::Stem {
                in_channels,
                out_channels,
                kernel,
                stride,
                max_pool,
            } => (
                "stem".to_string(),
                Block::Stem(Stem::new(*in_channels, *out_channels, *kernel, *stride, *max_pool)),
            ),
            BlockSpec::Dense {
                in_channels,
                layers,
                growth,
                bottleneck,
            } => {
                counters[0] += 1;
                (
                    format!("block{}", counters[0]),
                    Block::Dense(DenseBlock::new(*in_channels, *layers, *growth, *bottleneck)),
                )
            }
            BlockSpec::Transition {
                in_channels,
                compression,
            } => {
                counters[1] += 1;
                (
                    format!("trans{}", counters[1]),
                    Block::Transition(TransitionLayer::new(*in_channels, *compression, true)),
                )
            }
            BlockSpec::Resnext(u) | BlockSpec::SeResnext { unit: u, .. } => {
                counters[2] += 1;
                let reduction = match block {
                    BlockSpec::SeResnext { reduction, .. } => Some(*reduction),
                    _ => None,
                };
                let unit = ResNeXtBlock::new(
                    u.in_channels,
                    u.out_channels,
                    u.cardinality,
                    u.bottleneck_width,
                    u.stride,
                    reduction,
                )?;
                (format!("unit{}", counters[2]), Block::Resnext(unit))
            }
            BlockSpec::Head { in_channels, pre_norm } => (
                "head".to_string(),
                Block::Head(Head::new(*in_channels, spec.num_classes, *pre_norm)),
            ),
        };
        blocks.push(entry);
    }
    let mut model = Model {
        spec: spec.clone(),
        blocks,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    for (_, p) in model.named_params_mut() {
        p.initialize(&mut rng);
    }
    Ok(model)
}

impl<T: Scalar> Model<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Parameters and buffers in deterministic order under hierarchical names
    /// such as `block2.layer1.conv.weight`.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (name, block) in &self.blocks {
            match block {
                Block::Stem(b) => b.params(name, &mut out),
                Block::Dense(b) => b.params(name, &mut out),
                Block::Transition(b) => b.params(name, &mut out),
                Block::Resnext(b) => b.params(name, &mut out),
                Block::Head(b) => b.params(name, &mut out),
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (name, block) in &mut self.blocks {
            match block {
                Block::Stem(b) => b.params_mut(name, &mut out),
                Block::Dense(b) => b.params_mut(name, &mut out),
                Block::Transition(b) => b.params_mut(name, &mut out),
                Block::Resnext(b) => b.params_mut(name, &mut out),
                Block::Head(b) => b.params_mut(name, &mut out),
            }
        }
        out
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.named_params().into_iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.named_params_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn parameter_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, p)| p.is_trainable())
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    /// Number of stored tensors, buffers included.
    pub fn tensor_count(&self) -> usize {
        self.named_params().len()
    }

    /// Names of the classifier parameters that head replacement swaps out.
    pub fn head_param_names(&self) -> Vec<String> {
        self.named_params()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with("head.fc."))
            .collect()
    }

    /// Name of the weight of the first convolution (the input layer).
    pub fn input_layer_weight(&self) -> Option<String> {
        self.named_params()
            .into_iter()
            .map(|(n, _)| n)
            .find(|n| n.ends_with("conv.weight") || n.ends_with("conv1.weight"))
    }

    /// Records the network on `tape` and returns the (N, classes) logits.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, mode: Mode) -> Result<Var> {
        let shape = tape.shape(input);
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::shape(
                "model forward",
                format!("expected (N,{},H,W) input, got {shape:?}", self.spec.in_channels),
            ));
        }
        let mut x = input;
        for (_, block) in &mut self.blocks {
            x = match block {
                Block::Stem(b) => b.forward(tape, x, mode)?,
                Block::Dense(b) => b.forward(tape, x, mode)?,
                Block::Transition(b) => b.forward(tape, x, mode)?,
                Block::Resnext(b) => b.forward(tape, x, mode)?,
                Block::Head(b) => b.forward(tape, x, mode)?,
            };
        }
        Ok(x)
    }

    /// Logits without gradient tracking.
    pub fn logits(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.leaf(input.clone().with_requires_grad(false));
        let y = self.forward(&mut tape, x, mode)?;
        self.release_bindings();
        Ok(tape.value(y).clone())
    }

    /// Training-mode forward, cross-entropy loss and backward pass; leaves
    /// ∂loss/∂parameter in every trainable tensor's gradient slot.
    pub fn loss_and_grads(&mut self, input: &Tensor<T>, targets: &[usize]) -> Result<T> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone().with_requires_grad(false));
        let logits = self.forward(&mut tape, x, Mode::Train)?;
        let loss = tape.softmax_cross_entropy(logits, targets)?;
        tape.backward(loss)?;
        self.collect_grads(&tape);
        Ok(tape.value(loss).data()[0])
    }

    /// Copies gradients from the tape into parameter tensors. Parameters
    /// the loss did not reach receive zeros.
    pub fn collect_grads(&mut self, tape: &Tape<T>) {
        for (_, p) in self.named_params_mut() {
            p.take_grad(tape);
        }
    }

    fn release_bindings(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.release();
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.tensor.clear_grad();
        }
    }

    /// Marks every running-statistics buffer as usable in evaluation mode.
    pub fn mark_running_stats_ready(&mut self) {
        for (_, p) in self.named_params_mut() {
            if !p.is_trainable() {
                p.ready = true;
            }
        }
    }

    /// Swaps the final linear layer for a freshly initialized one with
    /// `num_outputs` rows; nothing else is touched.
    pub fn replace_head(&mut self, num_outputs: usize, seed: u64) -> Result<()> {
        if num_outputs < 2 {
            return Err(Error::invalid("replace_head", format!("need >= 2 outputs, got {num_outputs}")));
        }
        let Some((_, Block::Head(head))) = self.blocks.last_mut() else {
            return Err(Error::invalid("replace_head", "model has no linear head"));
        };
        let mut fc = super::layers::Linear::new(head.fc.in_features(), num_outputs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fc.weight.initialize(&mut rng);
        fc.bias.initialize(&mut rng);
        head.fc = fc;
        self.spec.num_classes = num_outputs;
        Ok(())
    }

    /// Removes the classifier, leaving a feature extractor.
    pub fn without_head(mut self) -> Self {
        if matches!(self.blocks.last(), Some((_, Block::Head(_)))) {
            self.blocks.pop();
            self.spec.blocks.pop();
        }
        self
    }
}
