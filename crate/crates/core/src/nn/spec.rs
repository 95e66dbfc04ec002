//! Declarative model descriptions and the named presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry shared by plain and squeeze-and-excitation ResNeXt units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResnextSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub cardinality: usize,
    /// Channels per group in the grouped 3×3 convolution.
    pub bottleneck_width: usize,
    pub stride: usize,
}

impl ResnextSpec {
    pub fn inner_channels(&self) -> usize {
        self.cardinality * self.bottleneck_width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSpec {
    /// conv → batchnorm → relu, optionally followed by 3×3/2 max pooling.
    Stem {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        max_pool: bool,
    },
    Dense {
        in_channels: usize,
        layers: usize,
        growth: usize,
        /// Width of the 1×1 bottleneck in front of each 3×3 conv; `None`
        /// gives the plain batchnorm → relu → 3×3 conv layer.
        bottleneck: Option<usize>,
    },
    Transition {
        in_channels: usize,
        compression: f64,
    },
    Resnext(ResnextSpec),
    SeResnext {
        #[serde(flatten)]
        unit: ResnextSpec,
        reduction: usize,
    },
    /// Optional batchnorm → relu, global average pool, linear classifier.
    Head { in_channels: usize, pre_norm: bool },
}

impl BlockSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            BlockSpec::Stem { .. } => "stem",
            BlockSpec::Dense { .. } => "dense",
            BlockSpec::Transition { .. } => "transition",
            BlockSpec::Resnext(_) => "resnext",
            BlockSpec::SeResnext { .. } => "se_resnext",
            BlockSpec::Head { .. } => "head",
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            BlockSpec::Stem { in_channels, .. }
            | BlockSpec::Dense { in_channels, .. }
            | BlockSpec::Transition { in_channels, .. }
            | BlockSpec::Head { in_channels, .. } => *in_channels,
            BlockSpec::Resnext(u) | BlockSpec::SeResnext { unit: u, .. } => u.in_channels,
        }
    }

    /// Channels produced; for the head this is the feature width it consumes.
    pub fn out_channels(&self) -> usize {
        match self {
            BlockSpec::Stem { out_channels, .. } => *out_channels,
            BlockSpec::Dense {
                in_channels,
                layers,
                growth,
                ..
            } => in_channels + layers * growth,
            BlockSpec::Transition {
                in_channels,
                compression,
            } => compressed_channels(*in_channels, *compression),
            BlockSpec::Resnext(u) | BlockSpec::SeResnext { unit: u, .. } => u.out_channels,
            BlockSpec::Head { in_channels, .. } => *in_channels,
        }
    }
}

pub(crate) fn compressed_channels(channels: usize, compression: f64) -> usize {
    (compression * channels as f64).floor() as usize
}

/// A validated-on-build description of a classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub in_channels: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub blocks: Vec<BlockSpec>,
}

impl ModelSpec {
    /// Looks up a preset by name: `densenet121`, `se_resnext50`,
    /// `mini_densenet` or `mini_se_resnext`.
    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "densenet121" => Ok(Self::densenet121(num_classes)),
            "se_resnext50" => Ok(Self::se_resnext50(num_classes)),
            "mini_densenet" => Ok(Self::mini_densenet(num_classes)),
            "mini_se_resnext" => Ok(Self::mini_se_resnext(num_classes)),
            other => Err(Error::InvalidSpec {
                block: "preset".into(),
                detail: format!("unknown preset {other:?}"),
            }),
        }
    }

    pub const PRESETS: [&'static str; 4] = ["densenet121", "se_resnext50", "mini_densenet", "mini_se_resnext"];

    pub fn densenet121(num_classes: usize) -> Self {
        let mut blocks = vec![BlockSpec::Stem {
            in_channels: 3,
            out_channels: 64,
            kernel: 7,
            stride: 2,
            max_pool: true,
        }];
        let channels = dense_stack(&mut blocks, 64, &[6, 12, 24, 16], 32, Some(4 * 32));
        blocks.push(BlockSpec::Head {
            in_channels: channels,
            pre_norm: true,
        });
        Self {
            name: "densenet121".into(),
            in_channels: 3,
            input_size: 224,
            num_classes,
            blocks,
        }
    }

    pub fn mini_densenet(num_classes: usize) -> Self {
        let mut blocks = vec![BlockSpec::Stem {
            in_channels: 3,
            out_channels: 16,
            kernel: 3,
            stride: 1,
            max_pool: false,
        }];
        let channels = dense_stack(&mut blocks, 16, &[2, 2], 8, None);
        blocks.push(BlockSpec::Head {
            in_channels: channels,
            pre_norm: true,
        });
        Self {
            name: "mini_densenet".into(),
            in_channels: 3,
            input_size: 32,
            num_classes,
            blocks,
        }
    }

    pub fn se_resnext50(num_classes: usize) -> Self {
        let mut blocks = vec![BlockSpec::Stem {
            in_channels: 3,
            out_channels: 64,
            kernel: 7,
            stride: 2,
            max_pool: true,
        }];
        let channels = resnext_stages(&mut blocks, 64, &[3, 4, 6, 3], 32, 4, 16);
        blocks.push(BlockSpec::Head {
            in_channels: channels,
            pre_norm: false,
        });
        Self {
            name: "se_resnext50".into(),
            in_channels: 3,
            input_size: 224,
            num_classes,
            blocks,
        }
    }

    pub fn mini_se_resnext(num_classes: usize) -> Self {
        let mut blocks = vec![BlockSpec::Stem {
            in_channels: 3,
            out_channels: 16,
            kernel: 3,
            stride: 1,
            max_pool: false,
        }];
        let channels = resnext_stages(&mut blocks, 16, &[1, 1], 4, 4, 4);
        blocks.push(BlockSpec::Head {
            in_channels: channels,
            pre_norm: false,
        });
        Self {
            name: "mini_se_resnext".into(),
            in_channels: 3,
            input_size: 32,
            num_classes,
            blocks,
        }
    }

    /// Checks channel chaining, block parameters and spatial feasibility at
    /// the declared input size. Errors name the first failing block.
    pub fn validate(&self) -> Result<()> {
        let fail = |i: usize, b: &BlockSpec, detail: String| Error::InvalidSpec {
            block: format!("blocks[{i}] ({})", b.kind()),
            detail,
        };
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec {
                block: "model".into(),
                detail: format!("num_classes must be >= 2, got {}", self.num_classes),
            });
        }
        if self.blocks.is_empty() {
            return Err(Error::InvalidSpec {
                block: "model".into(),
                detail: "no blocks".into(),
            });
        }
        let mut channels = self.in_channels;
        let mut size = self.input_size;
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            if block.in_channels() != channels {
                return Err(fail(
                    i,
                    block,
                    format!("declares {} input channels but receives {channels}", block.in_channels()),
                ));
            }
            match block {
                BlockSpec::Stem {
                    out_channels,
                    kernel,
                    stride,
                    max_pool,
                    ..
                } => {
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(fail(i, block, "channels, kernel and stride must be positive".into()));
                    }
                    let pad = kernel / 2;
                    if size + 2 * pad < *kernel {
                        return Err(fail(i, block, format!("kernel {kernel} exceeds input {size}")));
                    }
                    size = (size + 2 * pad - kernel) / stride + 1;
                    if *max_pool {
                        if size < 2 {
                            return Err(fail(i, block, format!("feature map {size} too small to pool")));
                        }
                        size = (size - 1) / 2 + 1;
                    }
                }
                BlockSpec::Dense { layers, growth, bottleneck, .. } => {
                    if *layers == 0 || *growth == 0 || *bottleneck == Some(0) {
                        return Err(fail(i, block, "layers, growth and bottleneck width must be positive".into()));
                    }
                }
                BlockSpec::Transition { compression, .. } => {
                    if !(*compression > 0.0 && *compression <= 1.0) {
                        return Err(fail(i, block, format!("compression {compression} outside (0, 1]")));
                    }
                    if block.out_channels() == 0 {
                        return Err(fail(i, block, "compression leaves no channels".into()));
                    }
                    if !size.is_multiple_of(2) {
                        return Err(fail(i, block, format!("odd spatial extent {size}")));
                    }
                    size /= 2;
                }
                BlockSpec::Resnext(u) | BlockSpec::SeResnext { unit: u, .. } => {
                    if u.cardinality == 0 || u.bottleneck_width == 0 || u.out_channels == 0 {
                        return Err(fail(i, block, "cardinality, width and channels must be positive".into()));
                    }
                    if !matches!(u.stride, 1 | 2) {
                        return Err(fail(i, block, format!("stride {} not in {{1, 2}}", u.stride)));
                    }
                    if let BlockSpec::SeResnext { reduction, .. } = block {
                        if *reduction == 0 || u.out_channels % reduction != 0 {
                            return Err(fail(
                                i,
                                block,
                                format!("channels {} not divisible by reduction {reduction}", u.out_channels),
                            ));
                        }
                    }
                    size = (size - 1) / u.stride + 1;
                }
                BlockSpec::Head { .. } => {
                    if i != last {
                        return Err(fail(i, block, "head must be the final block".into()));
                    }
                }
            }
            if size == 0 {
                return Err(fail(i, block, "feature map collapsed to zero size".into()));
            }
            channels = block.out_channels();
        }
        if !matches!(self.blocks[last], BlockSpec::Head { .. }) {
            return Err(Error::InvalidSpec {
                block: format!("blocks[{last}]"),
                detail: "model must end with a head".into(),
            });
        }
        Ok(())
    }
}

/// Appends dense blocks separated by θ=0.5 transitions; returns the final
/// channel count.
fn dense_stack(
    blocks: &mut Vec<BlockSpec>,
    mut channels: usize,
    layers: &[usize],
    growth: usize,
    bottleneck: Option<usize>,
) -> usize {
    for (i, &l) in layers.iter().enumerate() {
        blocks.push(BlockSpec::Dense {
            in_channels: channels,
            layers: l,
            growth,
            bottleneck,
        });
        channels += l * growth;
        if i + 1 < layers.len() {
            blocks.push(BlockSpec::Transition {
                in_channels: channels,
                compression: 0.5,
            });
            channels = compressed_channels(channels, 0.5);
        }
    }
    channels
}

/// Stage `s` uses `cardinality·width·2^s` inner channels and twice that on
/// output; every stage after the first starts with a stride-2 unit.
fn resnext_stages(
    blocks: &mut Vec<BlockSpec>,
    mut channels: usize,
    units: &[usize],
    cardinality: usize,
    width: usize,
    reduction: usize,
) -> usize {
    for (stage, &n) in units.iter().enumerate() {
        let stage_width = width << stage;
        let out = 2 * cardinality * stage_width;
        for u in 0..n {
            blocks.push(BlockSpec::SeResnext {
                unit: ResnextSpec {
                    in_channels: channels,
                    out_channels: out,
                    cardinality,
                    bottleneck_width: stage_width,
                    stride: if u == 0 && stage > 0 { 2 } else { 1 },
                },
                reduction,
            });
            channels = out;
        }
    }
    channels
}
