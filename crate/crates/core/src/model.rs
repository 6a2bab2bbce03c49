//! Dual-path encoder, per-stage fusion, and the upsample-concat decoder.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvSpec, Mode};
use crate::ops;
use crate::params::{Init, ParamStore, Scope};
use crate::resnet::{CnnConfig, ResNet};
use crate::transformer::{self, StageConfig, TransformerStage};

/// Downsampling factor of each pyramid level relative to the input.
pub const PYRAMID_STRIDES: [usize; 5] = [2, 4, 8, 16, 32];

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    maps: Vec<Tensor>,
    strides: Vec<usize>,
}

impl FeaturePyramid {
    pub fn new(maps: Vec<Tensor>, strides: Vec<usize>) -> Result<Self> {
        if maps.len() != 5 || strides.len() != 5 {
            return Err(Error::Shape(format!(
                "feature pyramid needs 5 maps and strides, got {} and {}",
                maps.len(),
                strides.len()
            )));
        }
        if strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Shape(format!("pyramid strides {strides:?} not increasing")));
        }
        Ok(Self { maps, strides })
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn channels(&self) -> Vec<usize> {
        self.maps.iter().map(|m| m.dim(1).unwrap_or(0)).collect()
    }

    pub fn into_maps(self) -> Vec<Tensor> {
        self.maps
    }
}

/// Which encoder paths feed the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    #[default]
    Fused,
    CnnOnly,
    TransformerOnly,
}

impl PathMode {
    pub fn encoders(self) -> &'static [&'static str] {
        match self {
            PathMode::Fused => &["cnn", "transformer"],
            PathMode::CnnOnly => &["cnn"],
            PathMode::TransformerOnly => &["transformer"],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PathMode::Fused => "Hybrid (combined)",
            PathMode::CnnOnly => "CNN path",
            PathMode::TransformerOnly => "Transformer path",
        }
    }
}

impl std::str::FromStr for PathMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" | "hybrid" => Ok(PathMode::Fused),
            "cnn" | "cnn_only" => Ok(PathMode::CnnOnly),
            "transformer" | "transformer_only" => Ok(PathMode::TransformerOnly),
            other => Err(Error::Config(format!("unknown path mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    #[serde(default)]
    pub paths: PathMode,
    pub cnn: CnnConfig,
    pub transformer_stages: Vec<StageConfig>,
    pub fusion_channels: [usize; 5],
    pub decoder_channels: usize,
    pub input_size: (usize, usize),
    /// Per-channel standardization applied after scaling pixels to [0, 1].
    pub input_mean: [f64; 3],
    pub input_std: [f64; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            paths: PathMode::Fused,
            cnn: CnnConfig::default(),
            transformer_stages: transformer::default_stages(),
            fusion_channels: [64; 5],
            decoder_channels: 64,
            input_size: (256, 256),
            input_mean: [0.485, 0.456, 0.406],
            input_std: [0.229, 0.224, 0.225],
        }
    }
}

impl ModelConfig {
    /// Narrow variant used for gradient checks and desk-scale training.
    pub fn reduced(input_side: usize) -> Self {
        Self {
            paths: PathMode::Fused,
            cnn: CnnConfig {
                stem_channels: 8,
                widths: [4, 4, 4, 4],
                blocks: [1, 1, 1, 1],
                expansion: 4,
                ..CnnConfig::default()
            },
            transformer_stages: transformer::stage_plan(
                3,
                [8, 8, 16, 16, 16],
                [1, 1, 1, 1, 1],
                [1, 1, 2, 2, 2],
                [4, 2, 1, 1, 1],
                2,
            ),
            fusion_channels: [8; 5],
            decoder_channels: 8,
            input_size: (input_side, input_side),
            ..Self::default()
        }
    }

    pub fn with_paths(mut self, paths: PathMode) -> Self {
        self.paths = paths;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h != w {
            return Err(Error::Config(format!("input must be square, got {h}x{w}")));
        }
        let max_stride = *PYRAMID_STRIDES.last().unwrap();
        if h == 0 || h % max_stride != 0 {
            return Err(Error::Config(format!("input side {h} not divisible by {max_stride}")));
        }
        if self.fusion_channels.contains(&0) || self.decoder_channels == 0 {
            return Err(Error::Config("fusion and decoder widths must be positive".into()));
        }
        if self.input_std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("input std must be positive".into()));
        }
        self.cnn.validate()?;
        if self.transformer_stages.len() != 5 {
            return Err(Error::Config(format!(
                "transformer path needs 5 stages, got {}",
                self.transformer_stages.len()
            )));
        }
        // Both paths must land on the same stride list so fusion is aligned.
        let mut side = h;
        let mut channels = 3;
        for (i, st) in self.transformer_stages.iter().enumerate() {
            st.validate()?;
            if st.patch_embed.in_channels != channels {
                return Err(Error::Config(format!(
                    "transformer stage {i} expects {} input channels, previous stage gives {channels}",
                    st.patch_embed.in_channels
                )));
            }
            side = st.patch_embed.out_side(side)?;
            if side * PYRAMID_STRIDES[i] != h {
                return Err(Error::Config(format!(
                    "transformer stage {i} yields side {side}; stride {} expected",
                    PYRAMID_STRIDES[i]
                )));
            }
            channels = st.attention.embed_dim;
        }
        Ok(())
    }

    pub fn transformer_channels(&self) -> [usize; 5] {
        let mut c = [0; 5];
        for (slot, st) in c.iter_mut().zip(&self.transformer_stages) {
            *slot = st.attention.embed_dim;
        }
        c
    }
}

/// One encoder path producing a five-level pyramid.
pub trait FeatureEncoder: Send + Sync {
    fn name(&self) -> &'static str;
    fn channels(&self) -> [usize; 5];
    fn forward(&self, image: &Tensor, mode: Mode) -> Result<FeaturePyramid>;
}

type EncoderFactory = fn(&Scope, &ModelConfig) -> Result<Box<dyn FeatureEncoder>>;

/// Encoder constructors by name.
pub const ENCODERS: &[(&str, EncoderFactory)] = &[
    ("cnn", |scope, cfg| Ok(Box::new(CnnPath::new(&scope.pp("cnn"), cfg)?))),
    ("transformer", |scope, cfg| {
        Ok(Box::new(TransformerPath::new(&scope.pp("transformer"), cfg)?))
    }),
];

pub fn build_encoder(name: &str, scope: &Scope, cfg: &ModelConfig) -> Result<Box<dyn FeatureEncoder>> {
    let (_, factory) = ENCODERS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config(format!("unknown encoder `{name}`")))?;
    factory(scope, cfg)
}

fn check_image(image: &Tensor, input_size: (usize, usize)) -> Result<()> {
    let (_, c, h, w) = image.dims4()?;
    if c != 3 || (h, w) != input_size {
        return Err(Error::Shape(format!(
            "expected B×3×{}×{} image, got {:?}",
            input_size.0,
            input_size.1,
            image.dims()
        )));
    }
    Ok(())
}

pub struct CnnPath {
    net: ResNet,
    input_size: (usize, usize),
}

impl CnnPath {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            net: ResNet::new(scope, &cfg.cnn)?,
            input_size: cfg.input_size,
        })
    }
}

impl FeatureEncoder for CnnPath {
    fn name(&self) -> &'static str {
        "cnn"
    }

    fn channels(&self) -> [usize; 5] {
        self.net.config().pyramid_channels()
    }

    fn forward(&self, image: &Tensor, mode: Mode) -> Result<FeaturePyramid> {
        check_image(image, self.input_size)?;
        FeaturePyramid::new(self.net.forward(image, mode)?, PYRAMID_STRIDES.to_vec())
    }
}

pub struct TransformerPath {
    stages: Vec<TransformerStage>,
    input_size: (usize, usize),
}

impl TransformerPath {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let stages = cfg
            .transformer_stages
            .iter()
            .enumerate()
            .map(|(i, st)| TransformerStage::new(&scope.pp(format!("stages.{i}")), st))
            .collect::<Result<_>>()?;
        Ok(Self {
            stages,
            input_size: cfg.input_size,
        })
    }
}

impl FeatureEncoder for TransformerPath {
    fn name(&self) -> &'static str {
        "transformer"
    }

    fn channels(&self) -> [usize; 5] {
        let mut c = [0; 5];
        for (slot, st) in c.iter_mut().zip(&self.stages) {
            *slot = st.config().attention.embed_dim;
        }
        c
    }

    fn forward(&self, image: &Tensor, _mode: Mode) -> Result<FeaturePyramid> {
        check_image(image, self.input_size)?;
        let mut maps = Vec::with_capacity(self.stages.len());
        let mut x = image.clone();
        for stage in &self.stages {
            x = stage.forward(&x)?;
            maps.push(x.clone());
        }
        FeaturePyramid::new(maps, PYRAMID_STRIDES.to_vec())
    }
}

/// Channel concatenation followed by 1x1 conv, batch norm and ReLU.
pub struct FusionBlock {
    pub proj: Conv2d,
    norm: BatchNorm2d,
    in_channels: usize,
}

impl FusionBlock {
    pub fn new(scope: &Scope, in_channels: usize, out_channels: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(
                &scope.pp("proj"),
                ConvSpec::new(in_channels, out_channels, 1).init(Init::UniformFanIn),
            )?,
            norm: BatchNorm2d::new(&scope.pp("norm"), out_channels)?,
            in_channels,
        })
    }

    pub fn forward(&self, maps: &[&Tensor], mode: Mode) -> Result<Tensor> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Shape("fusion needs at least one map".into()))?;
        let (b, _, h, w) = first.dims4()?;
        for m in maps {
            let (mb, _, mh, mw) = m.dims4()?;
            if (mb, mh, mw) != (b, h, w) {
                return Err(Error::Shape(format!(
                    "fusion inputs disagree: {:?} vs {:?}",
                    first.dims(),
                    m.dims()
                )));
            }
        }
        let cat = if maps.len() == 1 {
            (*first).clone()
        } else {
            Tensor::cat(maps, 1)?
        };
        if cat.dim(1)? != self.in_channels {
            return Err(Error::Shape(format!(
                "fusion expects {} channels, got {}",
                self.in_channels,
                cat.dim(1)?
            )));
        }
        Ok(self.norm.forward(&self.proj.forward(&cat)?, mode)?.relu()?)
    }
}

/// Upsample all fused maps to the input resolution, concatenate, then
/// 3x3 conv, ReLU, 1x1 conv and sigmoid.
pub struct Decoder {
    pub conv: Conv2d,
    pub head: Conv2d,
}

impl Decoder {
    pub fn new(scope: &Scope, in_channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            // no normalisation follows these, so fan-out scaling would blow up the logits
            conv: Conv2d::new(
                &scope.pp("conv"),
                ConvSpec::new(in_channels, hidden, 3).padding(1).init(Init::UniformFanIn),
            )?,
            head: Conv2d::new(&scope.pp("head"), ConvSpec::new(hidden, 1, 1).init(Init::UniformFanIn))?,
        })
    }

    pub fn forward(&self, fused: &[Tensor], out_size: (usize, usize)) -> Result<Tensor> {
        if fused.len() != 5 {
            return Err(Error::Shape(format!("decoder needs 5 fused maps, got {}", fused.len())));
        }
        let ups = fused
            .iter()
            .map(|m| ops::upsample_bilinear(m, out_size.0, out_size.1))
            .collect::<Result<Vec<_>>>()?;
        let cat = Tensor::cat(&ups, 1)?;
        let hidden = self.conv.forward(&cat)?.relu()?;
        ops::sigmoid(&self.head.forward(&hidden)?)
    }
}

pub struct HybridSegmentor {
    cfg: ModelConfig,
    store: Arc<ParamStore>,
    encoders: Vec<Box<dyn FeatureEncoder>>,
    fusion: Vec<FusionBlock>,
    decoder: Decoder,
}

impl HybridSegmentor {
    /// Builds a randomly initialized model; loads pretrained CNN weights when
    /// the config names a file.
    pub fn new(cfg: &ModelConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(dtype, device.clone(), seed);
        let root = store.root();
        let encoders = cfg
            .paths
            .encoders()
            .iter()
            .map(|name| build_encoder(name, &root, cfg))
            .collect::<Result<Vec<_>>>()?;
        let fusion = (0..5)
            .map(|i| {
                let in_ch: usize = encoders.iter().map(|e| e.channels()[i]).sum();
                FusionBlock::new(&root.pp(format!("fusion.{i}")), in_ch, cfg.fusion_channels[i])
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::new(
            &root.pp("decoder"),
            cfg.fusion_channels.iter().sum(),
            cfg.decoder_channels,
        )?;
        let model = Self {
            cfg: cfg.clone(),
            store,
            encoders,
            fusion,
            decoder,
        };
        if let Some(path) = &cfg.cnn.pretrained_weights {
            if cfg.paths != PathMode::TransformerOnly {
                crate::checkpoint::load_backbone_weights(&model.store, path, "cnn")?;
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &Arc<ParamStore> {
        &self.store
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn fusion(&self) -> &[FusionBlock] {
        &self.fusion
    }

    pub fn encoder_names(&self) -> Vec<&'static str> {
        self.encoders.iter().map(|e| e.name()).collect()
    }

    pub fn pyramids(&self, image: &Tensor, mode: Mode) -> Result<Vec<FeaturePyramid>> {
        check_image(image, self.cfg.input_size)?;
        self.encoders.iter().map(|e| e.forward(image, mode)).collect()
    }

    pub fn fuse(&self, pyramids: &[FeaturePyramid], mode: Mode) -> Result<Vec<Tensor>> {
        (0..5)
            .map(|i| {
                let maps: Vec<&Tensor> = pyramids.iter().map(|p| &p.maps()[i]).collect();
                self.fusion[i].forward(&maps, mode)
            })
            .collect()
    }

    /// Crack probabilities `B×1×H×W`.
    pub fn forward(&self, image: &Tensor, mode: Mode) -> Result<Tensor> {
        let pyramids = self.pyramids(image, mode)?;
        let fused = self.fuse(&pyramids, mode)?;
        self.decoder.forward(&fused, self.cfg.input_size)
    }
}
