//! Frozen convolutional backbones producing multi-block feature pyramids.
//!
//! Every residual block of layers 2, 3 and 4 contributes one feature map, so
//! a ResNet-50 yields 4 + 6 + 3 maps and a ResNet-101 yields 4 + 23 + 3.
//! Backbone tensors are plain (non-variable) tensors: they never receive
//! gradients and are not counted as learnable parameters.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_err, shape_err, Error, Result};
use crate::ops;

/// Backbone layers that feed the correlation pyramid.
pub const PYRAMID_LAYERS: [usize; 3] = [2, 3, 4];

/// Input height and width must be multiples of this.
pub const STRIDE_GRANULARITY: usize = 8;

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneVariant {
    ResNet50,
    ResNet101,
    Toy,
}

impl BackboneVariant {
    /// Residual blocks in layers 2, 3 and 4.
    pub fn block_counts(self) -> [usize; 3] {
        match self {
            BackboneVariant::ResNet50 => [4, 6, 3],
            BackboneVariant::ResNet101 => [4, 23, 3],
            BackboneVariant::Toy => [2, 2, 2],
        }
    }

    /// Feature channels of layers 2, 3 and 4.
    pub fn channels(self) -> [usize; 3] {
        match self {
            BackboneVariant::ResNet50 | BackboneVariant::ResNet101 => [512, 1024, 2048],
            BackboneVariant::Toy => [TOY_CHANNELS; 3],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BackboneVariant::ResNet50 => "resnet50",
            BackboneVariant::ResNet101 => "resnet101",
            BackboneVariant::Toy => "toy",
        }
    }

    fn resnet_layer_blocks(self) -> Option<[usize; 4]> {
        match self {
            BackboneVariant::ResNet50 => Some([3, 4, 6, 3]),
            BackboneVariant::ResNet101 => Some([3, 4, 23, 3]),
            BackboneVariant::Toy => None,
        }
    }
}

impl fmt::Display for BackboneVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "resnet50" | "resnet50like" => Ok(BackboneVariant::ResNet50),
            "resnet101" | "resnet101like" => Ok(BackboneVariant::ResNet101),
            "toy" => Ok(BackboneVariant::Toy),
            _ => Err(config_err!("unknown backbone `{s}` (expected resnet50, resnet101 or toy)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightsSource {
    /// A safetensors file with torchvision parameter names.
    File(PathBuf),
    /// Deterministic random weights.
    Seed(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSpec {
    pub variant: BackboneVariant,
    pub weights: WeightsSource,
}

impl BackboneSpec {
    pub fn new(variant: BackboneVariant, weights: WeightsSource) -> Self {
        Self { variant, weights }
    }

    pub fn toy(seed: u64) -> Self {
        Self::new(BackboneVariant::Toy, WeightsSource::Seed(seed))
    }

    /// Backbones are always frozen.
    pub fn frozen(&self) -> bool {
        true
    }
}

/// Per-layer lists of block feature maps, each [C_l, H_l, W_l].
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    layers: [Vec<Tensor>; 3],
}

impl FeaturePyramid {
    pub fn new(layers: [Vec<Tensor>; 3]) -> Result<Self> {
        for (maps, l) in layers.iter().zip(PYRAMID_LAYERS) {
            let first = maps
                .first()
                .ok_or_else(|| shape_err!("layer {l} has no feature maps"))?;
            if first.rank() != 3 {
                return Err(shape_err!("layer {l} maps must be [C,H,W], got {:?}", first.dims()));
            }
            if maps.iter().any(|m| m.dims() != first.dims()) {
                return Err(shape_err!("layer {l} maps have differing shapes"));
            }
        }
        Ok(Self { layers })
    }

    fn index(layer: usize) -> usize {
        match layer {
            2..=4 => layer - 2,
            _ => panic!("pyramid layer must be 2, 3 or 4, got {layer}"),
        }
    }

    /// Block feature maps of backbone layer 2, 3 or 4.
    pub fn layer(&self, layer: usize) -> &[Tensor] {
        &self.layers[Self::index(layer)]
    }

    pub fn block_count(&self, layer: usize) -> usize {
        self.layer(layer).len()
    }

    pub fn block_counts(&self) -> [usize; 3] {
        PYRAMID_LAYERS.map(|l| self.block_count(l))
    }

    pub fn grid(&self, layer: usize) -> (usize, usize) {
        let d = self.layer(layer)[0].dims();
        (d[1], d[2])
    }

    pub fn channels(&self, layer: usize) -> usize {
        self.layer(layer)[0].dims()[0]
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut layers: [Vec<Tensor>; 3] = Default::default();
        for (dst, src) in layers.iter_mut().zip(&self.layers) {
            *dst = src
                .iter()
                .map(|t| t.to_dtype(dtype))
                .collect::<candle_core::Result<_>>()?;
        }
        Ok(Self { layers })
    }
}

/// Convolution with batch norm folded in.
#[derive(Debug, Clone)]
struct FrozenConv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl FrozenConv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.weight.dims()[0];
        let y = ops::conv2d(x, &self.weight, self.padding, self.stride)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: FrozenConv,
    conv2: FrozenConv,
    conv3: FrozenConv,
    downsample: Option<FrozenConv>,
}

impl Bottleneck {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv1.forward(x)?.relu()?;
        let y = self.conv2.forward(&y)?.relu()?;
        let y = self.conv3.forward(&y)?;
        let identity = match &self.downsample {
            Some(ds) => ds.forward(x)?,
            None => x.clone(),
        };
        Ok((y + identity)?.relu()?)
    }
}

#[derive(Debug, Clone)]
enum Arch {
    ResNet {
        stem: FrozenConv,
        layers: [Vec<Bottleneck>; 4],
    },
    Toy {
        stages: [Vec<FrozenConv>; 3],
    },
}

/// A frozen feature extractor.
#[derive(Debug, Clone)]
pub struct Backbone {
    variant: BackboneVariant,
    arch: Arch,
}

const TOY_CHANNELS: usize = 8;
const TOY_BLOCKS: usize = 2;

/// Resolves parameters either from a loaded file or from a seeded stream.
struct WeightLoader {
    file: Option<(PathBuf, HashMap<String, Tensor>)>,
    rng: ChaCha8Rng,
    device: Device,
}

impl WeightLoader {
    fn new(source: &WeightsSource) -> Result<Self> {
        let device = Device::Cpu;
        match source {
            WeightsSource::File(path) => {
                if !path.exists() {
                    return Err(Error::load(path, "weights file does not exist"));
                }
                let map = candle_core::safetensors::load(path, &device)
                    .map_err(|e| Error::load(path, e))?;
                Ok(Self {
                    file: Some((path.clone(), map)),
                    rng: ChaCha8Rng::seed_from_u64(0),
                    device,
                })
            }
            WeightsSource::Seed(seed) => Ok(Self {
                file: None,
                rng: ChaCha8Rng::seed_from_u64(*seed),
                device,
            }),
        }
    }

    fn path(&self) -> &Path {
        self.file
            .as_ref()
            .map(|(p, _)| p.as_path())
            .unwrap_or(Path::new("<seeded>"))
    }

    fn take(&self, name: &str, dims: &[usize]) -> Result<Option<Tensor>> {
        let Some((path, map)) = &self.file else {
            return Ok(None);
        };
        let t = map
            .get(name)
            .ok_or_else(|| Error::load(path, format!("missing tensor `{name}`")))?;
        if t.dims() != dims {
            return Err(Error::load(
                path,
                format!("tensor `{name}` has shape {:?}, expected {dims:?}", t.dims()),
            ));
        }
        Ok(Some(t.to_dtype(DType::F32)?))
    }

    fn kaiming(&mut self, dims: &[usize]) -> Result<Tensor> {
        let fan_in: usize = dims[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = dims.iter().product();
        let values: Vec<f32> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                (z * std) as f32
            })
            .collect();
        Ok(Tensor::from_vec(values, dims, &self.device)?)
    }

    fn conv_weight(&mut self, name: &str, dims: &[usize]) -> Result<Tensor> {
        match self.take(name, dims)? {
            Some(t) => Ok(t),
            None => self.kaiming(dims),
        }
    }

    /// Conv weight followed by batch norm `bn`, folded into one affine conv.
    fn conv_bn(
        &mut self,
        conv: &str,
        bn: &str,
        dims: [usize; 4],
        stride: usize,
        padding: usize,
    ) -> Result<FrozenConv> {
        let out = dims[0];
        let weight = self.conv_weight(&format!("{conv}.weight"), &dims)?;
        if self.file.is_none() {
            let bias = Tensor::zeros(out, DType::F32, &self.device)?;
            return Ok(FrozenConv {
                weight,
                bias,
                stride,
                padding,
            });
        }
        let get = |s: &str| -> Result<Tensor> {
            Ok(self.take(&format!("{bn}.{s}"), &[out])?.expect("file-backed"))
        };
        let (gamma, beta, mean, var) = (
            get("weight")?,
            get("bias")?,
            get("running_mean")?,
            get("running_var")?,
        );
        let scale = gamma.div(&(var + BN_EPS)?.sqrt()?)?;
        let shift = (beta - mean.mul(&scale)?)?;
        let weight = weight.broadcast_mul(&scale.reshape((out, 1, 1, 1))?)?;
        Ok(FrozenConv {
            weight,
            bias: shift,
            stride,
            padding,
        })
    }

    fn plain_conv(
        &mut self,
        name: &str,
        dims: [usize; 4],
        stride: usize,
        padding: usize,
    ) -> Result<FrozenConv> {
        let weight = self.conv_weight(&format!("{name}.weight"), &dims)?;
        let bias = match self.take(&format!("{name}.bias"), &[dims[0]])? {
            Some(b) => b,
            None => Tensor::zeros(dims[0], DType::F32, &self.device)?,
        };
        Ok(FrozenConv {
            weight,
            bias,
            stride,
            padding,
        })
    }
}

/// Build a frozen backbone from its spec.
pub fn load_backbone(spec: &BackboneSpec) -> Result<Backbone> {
    let mut loader = WeightLoader::new(&spec.weights)?;
    let arch = match spec.variant.resnet_layer_blocks() {
        Some(blocks) => build_resnet(&mut loader, blocks)?,
        None => build_toy(&mut loader)?,
    };
    log::debug!(
        "loaded {} backbone from {}",
        spec.variant,
        loader.path().display()
    );
    Ok(Backbone {
        variant: spec.variant,
        arch,
    })
}

fn build_resnet(loader: &mut WeightLoader, blocks: [usize; 4]) -> Result<Arch> {
    let stem = loader.conv_bn("conv1", "bn1", [64, 3, 7, 7], 2, 3)?;
    let mut layers: [Vec<Bottleneck>; 4] = Default::default();
    let mut in_ch = 64;
    for (li, (&n, layer)) in blocks.iter().zip(layers.iter_mut()).enumerate() {
        let mid = 64 << li;
        let out = mid * 4;
        for b in 0..n {
            let p = format!("layer{}.{b}", li + 1);
            let stride = if b == 0 && li > 0 { 2 } else { 1 };
            let cin = if b == 0 { in_ch } else { out };
            let conv1 = loader.conv_bn(
                &format!("{p}.conv1"),
                &format!("{p}.bn1"),
                [mid, cin, 1, 1],
                1,
                0,
            )?;
            let conv2 = loader.conv_bn(
                &format!("{p}.conv2"),
                &format!("{p}.bn2"),
                [mid, mid, 3, 3],
                stride,
                1,
            )?;
            let conv3 = loader.conv_bn(
                &format!("{p}.conv3"),
                &format!("{p}.bn3"),
                [out, mid, 1, 1],
                1,
                0,
            )?;
            let downsample = if b == 0 {
                Some(loader.conv_bn(
                    &format!("{p}.downsample.0"),
                    &format!("{p}.downsample.1"),
                    [out, cin, 1, 1],
                    stride,
                    0,
                )?)
            } else {
                None
            };
            layer.push(Bottleneck {
                conv1,
                conv2,
                conv3,
                downsample,
            });
        }
        in_ch = out;
    }
    Ok(Arch::ResNet { stem, layers })
}

fn build_toy(loader: &mut WeightLoader) -> Result<Arch> {
    let mut stages: [Vec<FrozenConv>; 3] = Default::default();
    for (s, stage) in stages.iter_mut().enumerate() {
        for b in 0..TOY_BLOCKS {
            let name = format!("stage{s}.{b}");
            let conv = match (s, b) {
                (0, 0) => loader.plain_conv(&name, [TOY_CHANNELS, 3, 8, 8], 8, 0)?,
                (_, 0) => loader.plain_conv(&name, [TOY_CHANNELS, TOY_CHANNELS, 3, 3], 2, 1)?,
                _ => loader.plain_conv(&name, [TOY_CHANNELS, TOY_CHANNELS, 3, 3], 1, 1)?,
            };
            stage.push(conv);
        }
    }
    Ok(Arch::Toy { stages })
}

impl Backbone {
    pub fn variant(&self) -> BackboneVariant {
        self.variant
    }

    pub fn block_counts(&self) -> [usize; 3] {
        self.variant.block_counts()
    }

    /// Always zero: backbone weights are frozen.
    pub fn learnable_param_count(&self) -> usize {
        0
    }

    /// Number of frozen scalars held by the backbone.
    pub fn frozen_param_count(&self) -> usize {
        let conv = |c: &FrozenConv| c.weight.elem_count() + c.bias.elem_count();
        match &self.arch {
            Arch::ResNet { stem, layers } => {
                conv(stem)
                    + layers
                        .iter()
                        .flatten()
                        .map(|b| {
                            conv(&b.conv1)
                                + conv(&b.conv2)
                                + conv(&b.conv3)
                                + b.downsample.as_ref().map_or(0, conv)
                        })
                        .sum::<usize>()
            }
            Arch::Toy { stages } => stages.iter().flatten().map(conv).sum(),
        }
    }

    /// Run the backbone on a normalised [3, H, W] image.
    pub fn extract_pyramid(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let dims = image.dims();
        if dims.len() != 3 || dims[0] != 3 {
            return Err(shape_err!("backbone expects a [3,H,W] image, got {dims:?}"));
        }
        let (h, w) = (dims[1], dims[2]);
        if h % STRIDE_GRANULARITY != 0 || w % STRIDE_GRANULARITY != 0 || h < 32 || w < 32 {
            return Err(shape_err!(
                "image size {h}x{w} must be at least 32 and a multiple of {STRIDE_GRANULARITY}"
            ));
        }
        let x = image.to_dtype(DType::F32)?.detach().unsqueeze(0)?;
        let mut layers: [Vec<Tensor>; 3] = Default::default();
        match &self.arch {
            Arch::ResNet { stem, layers: res } => {
                let mut x = stem.forward(&x)?.relu()?;
                // post-ReLU activations are non-negative, so zero padding
                // matches -inf padding for the max pool
                x = x
                    .pad_with_zeros(2, 1, 1)?
                    .pad_with_zeros(3, 1, 1)?
                    .max_pool2d_with_stride((3, 3), (2, 2))?;
                for (li, blocks) in res.iter().enumerate() {
                    for block in blocks {
                        x = block.forward(&x)?;
                        if li >= 1 {
                            layers[li - 1].push(x.squeeze(0)?);
                        }
                    }
                }
            }
            Arch::Toy { stages } => {
                let mut x = x;
                for (si, stage) in stages.iter().enumerate() {
                    for conv in stage {
                        x = conv.forward(&x)?.relu()?;
                        layers[si].push(x.squeeze(0)?);
                    }
                }
            }
        }
        FeaturePyramid::new(layers)
    }
}

/// Output grid of layers 2, 3, 4 for an input of `size` pixels.
pub fn pyramid_grid_sizes(size: usize) -> [usize; 3] {
    let l2 = size / STRIDE_GRANULARITY;
    let l3 = l2.div_ceil(2);
    let l4 = l3.div_ceil(2);
    [l2, l3, l4]
}
