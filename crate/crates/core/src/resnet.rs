//! CNN path: bottleneck ResNet (ResNet-50 topology by default).
//!
//! Parameter names follow the torchvision layout (`conv1`, `bn1`,
//! `layer1.0.conv1`, ..., `layer4.2.downsample.1`) so ImageNet weights stored
//! in safetensors form can be loaded without renaming.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvSpec, Mode};
use crate::params::Scope;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    #[serde(default = "default_arch")]
    pub arch: String,
    pub stem_channels: usize,
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
    pub expansion: usize,
    /// Safetensors file with torchvision-named backbone weights.
    #[serde(default)]
    pub pretrained_weights: Option<PathBuf>,
}

fn default_arch() -> String {
    "resnet50".into()
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            arch: default_arch(),
            stem_channels: 64,
            widths: [64, 128, 256, 512],
            blocks: [3, 4, 6, 3],
            expansion: 4,
            pretrained_weights: None,
        }
    }
}

impl CnnConfig {
    pub fn pyramid_channels(&self) -> [usize; 5] {
        let e = self.expansion;
        [
            self.stem_channels,
            self.widths[0] * e,
            self.widths[1] * e,
            self.widths[2] * e,
            self.widths[3] * e,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch != "resnet50" {
            return Err(Error::Config(format!(
                "unsupported CNN backbone `{}` (only the resnet50 topology is provided)",
                self.arch
            )));
        }
        if self.stem_channels == 0 || self.expansion == 0 || self.widths.contains(&0) || self.blocks.contains(&0) {
            return Err(Error::Config("CNN widths, blocks and expansion must be positive".into()));
        }
        Ok(())
    }
}

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new(scope: &Scope, in_ch: usize, width: usize, expansion: usize, stride: usize) -> Result<Self> {
        let out_ch = width * expansion;
        let downsample = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2d::new(
                    &scope.pp("downsample.0"),
                    ConvSpec::new(in_ch, out_ch, 1).stride(stride).no_bias(),
                )?,
                BatchNorm2d::new(&scope.pp("downsample.1"), out_ch)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&scope.pp("conv1"), ConvSpec::new(in_ch, width, 1).no_bias())?,
            bn1: BatchNorm2d::new(&scope.pp("bn1"), width)?,
            conv2: Conv2d::new(
                &scope.pp("conv2"),
                ConvSpec::new(width, width, 3).stride(stride).padding(1).no_bias(),
            )?,
            bn2: BatchNorm2d::new(&scope.pp("bn2"), width)?,
            conv3: Conv2d::new(&scope.pp("conv3"), ConvSpec::new(width, out_ch, 1).no_bias())?,
            bn3: BatchNorm2d::new(&scope.pp("bn3"), out_ch)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, mode)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?, mode)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

pub struct ResNet {
    cfg: CnnConfig,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    layers: Vec<Vec<Bottleneck>>,
}

impl ResNet {
    pub fn new(scope: &Scope, cfg: &CnnConfig) -> Result<Self> {
        cfg.validate()?;
        let conv1 = Conv2d::new(
            &scope.pp("conv1"),
            ConvSpec::new(3, cfg.stem_channels, 7).stride(2).padding(3).no_bias(),
        )?;
        let bn1 = BatchNorm2d::new(&scope.pp("bn1"), cfg.stem_channels)?;
        let mut in_ch = cfg.stem_channels;
        let mut layers = Vec::with_capacity(4);
        for (li, (&width, &n)) in cfg.widths.iter().zip(&cfg.blocks).enumerate() {
            let stride = if li == 0 { 1 } else { 2 };
            let layer = (0..n)
                .map(|bi| {
                    let s = if bi == 0 { stride } else { 1 };
                    let block = Bottleneck::new(
                        &scope.pp(format!("layer{}.{bi}", li + 1)),
                        in_ch,
                        width,
                        cfg.expansion,
                        s,
                    );
                    in_ch = width * cfg.expansion;
                    block
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(layer);
        }
        Ok(Self {
            cfg: cfg.clone(),
            conv1,
            bn1,
            layers,
        })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.cfg
    }

    /// Stem output (stride 2) followed by the four residual stages (strides 4..32).
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let (_, c, _, _) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("CNN path expects 3 input channels, got {c}")));
        }
        let stem = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let mut maps = vec![stem.clone()];
        let mut y = crate::ops::max_pool2d(&stem, 3, 2, 1)?;
        for layer in &self.layers {
            for block in layer {
                y = block.forward(&y, mode)?;
            }
            maps.push(y.clone());
        }
        Ok(maps)
    }
}
