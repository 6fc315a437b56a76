//! The image classifier: a segmentation network with its per-pixel output
//! layer replaced by a 1×1 convolution to the class count, followed by
//! global average pooling and flattening.
//!
//! Backbones:
//!
//! * `deeplabv3_resnet101`, `deeplabv3_resnet50` - dilated ResNet (output
//!   stride 8) with an atrous spatial pyramid pooling head, parameter names
//!   matching the torchvision state dicts so published weights load as is.
//! * `tiny` - a few dilated convolutions and a small pyramid pooling block,
//!   for desk-scale experiments and tests. Has no published weights.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var, D};
use habitat_core::metrics::softmax;
use habitat_core::preprocess::ImageTensor;
use habitat_core::rng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HabitatError, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackboneKind {
    Tiny,
    DeepLabV3ResNet50,
    DeepLabV3ResNet101,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [
        BackboneKind::Tiny,
        BackboneKind::DeepLabV3ResNet50,
        BackboneKind::DeepLabV3ResNet101,
    ];

    pub fn id(self) -> &'static str {
        match self {
            BackboneKind::Tiny => "tiny",
            BackboneKind::DeepLabV3ResNet50 => "deeplabv3_resnet50",
            BackboneKind::DeepLabV3ResNet101 => "deeplabv3_resnet101",
        }
    }

    /// Published weights, where they exist.
    pub fn weights_url(self) -> Option<&'static str> {
        match self {
            BackboneKind::Tiny => None,
            BackboneKind::DeepLabV3ResNet50 => {
                Some("https://download.pytorch.org/models/deeplabv3_resnet50_coco-cd0a2569.pth")
            }
            BackboneKind::DeepLabV3ResNet101 => {
                Some("https://download.pytorch.org/models/deeplabv3_resnet101_coco-586e9e4e.pth")
            }
        }
    }

    fn resnet_depths(self) -> Option<[usize; 4]> {
        match self {
            BackboneKind::Tiny => None,
            BackboneKind::DeepLabV3ResNet50 => Some([3, 4, 6, 3]),
            BackboneKind::DeepLabV3ResNet101 => Some([3, 4, 23, 3]),
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for BackboneKind {
    type Err = HabitatError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Self::ALL.iter().map(|k| k.id()).collect();
                HabitatError::Config(format!(
                    "unknown backbone `{s}` (known: {})",
                    known.join(", ")
                ))
            })
    }
}

impl Serialize for BackboneKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.id())
    }
}

impl<'de> Deserialize<'de> for BackboneKind {
    fn deserialize<De: serde::Deserializer<'de>>(d: De) -> std::result::Result<Self, De::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub n_classes: usize,
    pub dropout_rate: f64,
    pub backbone: BackboneKind,
    pub pretrained: bool,
    pub input_size: usize,
    /// Seed for parameter initialisation and dropout masks.
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            n_classes: 18,
            dropout_rate: 0.5,
            backbone: BackboneKind::DeepLabV3ResNet101,
            pretrained: true,
            input_size: 224,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(HabitatError::Config("n_classes must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(HabitatError::Config("dropout_rate must lie in [0, 1)".into()));
        }
        if self.input_size < 32 {
            return Err(HabitatError::Config("input_size must be >= 32".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout off, batch norm uses running statistics.
    Eval,
    /// Dropout on (masks drawn from `step_seed`), batch norm uses batch
    /// statistics and updates its running estimates.
    Train { step_seed: u64 },
}

#[derive(Clone, Copy)]
struct Ctx {
    mode: Mode,
    compute: DType,
}

impl Ctx {
    fn training(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    /// Parameters are detached outside training so no autograd graph, and
    /// with it every intermediate activation, is kept alive.
    fn param(&self, t: &Tensor) -> Tensor {
        if self.training() {
            t.clone()
        } else {
            t.detach()
        }
    }
}

/// Named parameters. Batch-norm running statistics are stored alongside
/// the weights but excluded from optimisation.
#[derive(Default)]
struct ParamStore {
    vars: BTreeMap<String, Var>,
    buffers: BTreeSet<String>,
    seed: u64,
}

impl ParamStore {
    fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Default::default()
        }
    }

    fn insert(&mut self, name: String, values: Vec<f32>, shape: &[usize], buffer: bool) -> Result<Tensor> {
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &Device::Cpu)?)?;
        let t = var.as_tensor().clone();
        if buffer {
            self.buffers.insert(name.clone());
        }
        self.vars.insert(name, var);
        Ok(t)
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<Tensor> {
        let mut r = rng::stream(rng::derive_seed(self.seed, &name));
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                (z * std) as f32
            })
            .collect();
        self.insert(name, values, shape, false)
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<Tensor> {
        let mut r = rng::stream(rng::derive_seed(self.seed, &name));
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| r.random_range(-bound..bound) as f32)
            .collect();
        self.insert(name, values, shape, false)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f32, buffer: bool) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape, buffer)
    }

    fn trainable(&self) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(n, _)| !self.buffers.contains(*n))
            .map(|(_, v)| v.clone())
            .collect()
    }
}

struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    dilation: usize,
}

#[derive(Clone, Copy)]
struct ConvSpec {
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
}

impl ConvSpec {
    fn new(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride: 1,
            dilation: 1,
        }
    }

    fn stride(self, stride: usize) -> Self {
        Self { stride, ..self }
    }

    fn dilation(self, dilation: usize) -> Self {
        Self { dilation, ..self }
    }
}

impl Conv {
    /// Backbone convolution without bias, Kaiming-normal (fan-out) init.
    fn backbone(p: &mut ParamStore, name: &str, s: ConvSpec) -> Result<Self> {
        let fan_out = (s.c_out * s.kernel * s.kernel) as f64;
        let weight = p.normal(
            format!("{name}.weight"),
            &[s.c_out, s.c_in, s.kernel, s.kernel],
            (2.0 / fan_out).sqrt(),
        )?;
        Ok(Self::from_parts(weight, None, s))
    }

    /// Convolution with bias, uniform(±1/sqrt(fan_in)) init.
    fn with_bias(p: &mut ParamStore, name: &str, s: ConvSpec) -> Result<Self> {
        let bound = 1.0 / ((s.c_in * s.kernel * s.kernel) as f64).sqrt();
        let weight = p.uniform(
            format!("{name}.weight"),
            &[s.c_out, s.c_in, s.kernel, s.kernel],
            bound,
        )?;
        let bias = p.uniform(format!("{name}.bias"), &[s.c_out], bound)?;
        Ok(Self::from_parts(weight, Some(bias), s))
    }

    fn from_parts(weight: Tensor, bias: Option<Tensor>, s: ConvSpec) -> Self {
        Self {
            weight,
            bias,
            stride: s.stride,
            padding: s.dilation * (s.kernel - 1) / 2,
            dilation: s.dilation,
        }
    }

    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let w = ctx.param(&self.weight).to_dtype(ctx.compute)?;
        let y = x.conv2d(&w, self.padding, self.stride, self.dilation, 1)?;
        match &self.bias {
            None => Ok(y),
            Some(b) => {
                let b = ctx.param(b).to_dtype(ctx.compute)?.reshape((1, (), 1, 1))?;
                Ok(y.broadcast_add(&b)?)
            }
        }
    }
}

struct BatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    fn new(p: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let weight = p.constant(format!("{name}.weight"), &[c], 1.0, false)?;
        let bias = p.constant(format!("{name}.bias"), &[c], 0.0, false)?;
        p.constant(format!("{name}.running_mean"), &[c], 0.0, true)?;
        p.constant(format!("{name}.running_var"), &[c], 1.0, true)?;
        Ok(Self {
            weight,
            bias,
            running_mean: p.vars[&format!("{name}.running_mean")].clone(),
            running_var: p.vars[&format!("{name}.running_var")].clone(),
        })
    }

    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let x32 = x.to_dtype(DType::F32)?;
        let (mean, var) = if ctx.training() {
            let (b, _, h, w) = x32.dims4()?;
            let n = b * h * w;
            if n < 2 {
                return Err(HabitatError::Shape(
                    "batch norm needs more than one value per channel in training mode".into(),
                ));
            }
            let mean = x32.mean_keepdim((0, 2, 3))?;
            let var = x32.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
            let m = mean.flatten_all()?.detach();
            let unbiased = (var.flatten_all()?.detach() * (n as f64 / (n - 1) as f64))?;
            let rm = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))? + (m * BN_MOMENTUM)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))? + (unbiased * BN_MOMENTUM)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().detach().reshape((1, (), 1, 1))?,
                self.running_var.as_tensor().detach().reshape((1, (), 1, 1))?,
            )
        };
        let y = x32
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + BN_EPS)?.sqrt()?)?
            .broadcast_mul(&ctx.param(&self.weight).reshape((1, (), 1, 1))?)?
            .broadcast_add(&ctx.param(&self.bias).reshape((1, (), 1, 1))?)?;
        Ok(y.to_dtype(ctx.compute)?)
    }
}

/// Conv, batch norm, ReLU.
struct ConvBnRelu {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBnRelu {
    fn new(p: &mut ParamStore, conv_name: &str, bn_name: &str, s: ConvSpec) -> Result<Self> {
        Ok(Self {
            conv: Conv::backbone(p, conv_name, s)?,
            bn: BatchNorm::new(p, bn_name, s.c_out)?,
        })
    }

    /// torchvision `Sequential(conv, bn, relu)` naming: `{prefix}.0`, `{prefix}.1`.
    fn seq(p: &mut ParamStore, prefix: &str, s: ConvSpec) -> Result<Self> {
        Self::new(p, &format!("{prefix}.0"), &format!("{prefix}.1"), s)
    }

    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x, ctx)?, ctx)?.relu()?)
    }
}

/// Inverted dropout with a mask drawn from a seeded stream.
fn dropout(x: &Tensor, rate: f64, seed: u64) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    let mut r = rng::stream(seed);
    let keep = (1.0 / (1.0 - rate)) as f32;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if r.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

/// Atrous spatial pyramid pooling: parallel 1×1, dilated 3×3 and image-level
/// pooling branches, concatenated and projected.
struct Aspp {
    branches: Vec<ConvBnRelu>,
    pooling: ConvBnRelu,
    project: ConvBnRelu,
    project_dropout: f64,
}

impl Aspp {
    fn new(
        p: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        rates: &[usize],
        project_dropout: f64,
    ) -> Result<Self> {
        let mut branches = vec![ConvBnRelu::seq(
            p,
            &format!("{prefix}.convs.0"),
            ConvSpec::new(c_in, c_out, 1),
        )?];
        for (i, rate) in rates.iter().enumerate() {
            branches.push(ConvBnRelu::seq(
                p,
                &format!("{prefix}.convs.{}", i + 1),
                ConvSpec::new(c_in, c_out, 3).dilation(*rate),
            )?);
        }
        let pool_idx = rates.len() + 1;
        let pooling = ConvBnRelu::new(
            p,
            &format!("{prefix}.convs.{pool_idx}.1"),
            &format!("{prefix}.convs.{pool_idx}.2"),
            ConvSpec::new(c_in, c_out, 1),
        )?;
        let project = ConvBnRelu::seq(
            p,
            &format!("{prefix}.project"),
            ConvSpec::new(c_out * (rates.len() + 2), c_out, 1),
        )?;
        Ok(Self {
            branches,
            pooling,
            project,
            project_dropout,
        })
    }

    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let mut outs = Vec::with_capacity(self.branches.len() + 1);
        for br in &self.branches {
            outs.push(br.forward(x, ctx)?);
        }
        let pooled = x.mean_keepdim((2, 3))?;
        let pooled = self.pooling.forward(&pooled, ctx)?;
        let c = pooled.dim(1)?;
        outs.push(pooled.broadcast_as((b, c, h, w))?.contiguous()?);
        let y = self.project.forward(&Tensor::cat(&outs, 1)?, ctx)?;
        match ctx.mode {
            Mode::Train { step_seed } if self.project_dropout > 0.0 => dropout(
                &y,
                self.project_dropout,
                rng::derive_seed(step_seed, "aspp-dropout"),
            ),
            _ => Ok(y),
        }
    }
}

struct Bottleneck {
    c1: ConvBnRelu,
    c2: ConvBnRelu,
    conv3: Conv,
    bn3: BatchNorm,
    downsample: Option<(Conv, BatchNorm)>,
}

impl Bottleneck {
    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let y = self.c2.forward(&self.c1.forward(x, ctx)?, ctx)?;
        let y = self.bn3.forward(&self.conv3.forward(&y, ctx)?, ctx)?;
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x, ctx)?, ctx)?,
            None => x.clone(),
        };
        Ok((y + identity)?.relu()?)
    }
}

/// torchvision DeepLabV3: ResNet with layers 3 and 4 dilated, then the ASPP
/// head `classifier.0` and a 3×3 conv block `classifier.1`/`classifier.2`.
/// The final `classifier.4` projection is the part that gets replaced.
struct DeepLabV3 {
    stem: ConvBnRelu,
    layers: Vec<Vec<Bottleneck>>,
    aspp: Aspp,
    refine: ConvBnRelu,
}

const ASPP_CHANNELS: usize = 256;

impl DeepLabV3 {
    fn new(p: &mut ParamStore, depths: [usize; 4]) -> Result<Self> {
        let stem = ConvBnRelu::new(
            p,
            "backbone.conv1",
            "backbone.bn1",
            ConvSpec::new(3, 64, 7).stride(2),
        )?;
        let mut in_ch = 64;
        let mut dilation = 1;
        let mut layers = Vec::new();
        let plan = [(64, 1, false), (128, 2, false), (256, 2, true), (512, 2, true)];
        for (li, ((width, mut stride, dilate), depth)) in plan.into_iter().zip(depths).enumerate() {
            let previous_dilation = dilation;
            if dilate {
                dilation *= stride;
                stride = 1;
            }
            let mut blocks = Vec::with_capacity(depth);
            for bi in 0..depth {
                let pre = format!("backbone.layer{}.{bi}", li + 1);
                let (s, d) = if bi == 0 {
                    (stride, previous_dilation)
                } else {
                    (1, dilation)
                };
                let out_ch = width * 4;
                let downsample = if bi == 0 && (s != 1 || in_ch != out_ch) {
                    Some((
                        Conv::backbone(p, &format!("{pre}.downsample.0"), ConvSpec::new(in_ch, out_ch, 1).stride(s))?,
                        BatchNorm::new(p, &format!("{pre}.downsample.1"), out_ch)?,
                    ))
                } else {
                    None
                };
                blocks.push(Bottleneck {
                    c1: ConvBnRelu::new(p, &format!("{pre}.conv1"), &format!("{pre}.bn1"), ConvSpec::new(in_ch, width, 1))?,
                    c2: ConvBnRelu::new(
                        p,
                        &format!("{pre}.conv2"),
                        &format!("{pre}.bn2"),
                        ConvSpec::new(width, width, 3).stride(s).dilation(d),
                    )?,
                    conv3: Conv::backbone(p, &format!("{pre}.conv3"), ConvSpec::new(width, out_ch, 1))?,
                    bn3: BatchNorm::new(p, &format!("{pre}.bn3"), out_ch)?,
                    downsample,
                });
                in_ch = out_ch;
            }
            layers.push(blocks);
        }
        let aspp = Aspp::new(p, "classifier.0", in_ch, ASPP_CHANNELS, &[12, 24, 36], 0.5)?;
        let refine = ConvBnRelu::new(
            p,
            "classifier.1",
            "classifier.2",
            ConvSpec::new(ASPP_CHANNELS, ASPP_CHANNELS, 3),
        )?;
        Ok(Self {
            stem,
            layers,
            aspp,
            refine,
        })
    }

    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let y = self.stem.forward(x, ctx)?;
        // Inputs are post-ReLU, so zero padding behaves like -inf padding.
        let mut y = y
            .pad_with_zeros(2, 1, 1)?
            .pad_with_zeros(3, 1, 1)?
            .max_pool2d_with_stride(3, 2)?;
        for layer in &self.layers {
            for block in layer {
                y = block.forward(&y, ctx)?;
            }
        }
        self.refine.forward(&self.aspp.forward(&y, ctx)?, ctx)
    }
}

/// Small dilated network with the same head structure, for fast runs.
struct TinyNet {
    stem: ConvBnRelu,
    down: ConvBnRelu,
    context: ConvBnRelu,
    aspp: Aspp,
}

const TINY_CHANNELS: usize = 32;

impl TinyNet {
    fn new(p: &mut ParamStore) -> Result<Self> {
        Ok(Self {
            stem: ConvBnRelu::seq(p, "backbone.stem", ConvSpec::new(3, 16, 4).stride(4))?,
            down: ConvBnRelu::seq(p, "backbone.down", ConvSpec::new(16, TINY_CHANNELS, 3).stride(2))?,
            context: ConvBnRelu::seq(
                p,
                "backbone.context",
                ConvSpec::new(TINY_CHANNELS, TINY_CHANNELS, 3).dilation(2),
            )?,
            aspp: Aspp::new(p, "classifier.0", TINY_CHANNELS, 16, &[2, 4], 0.0)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let y = self.stem.forward(x, ctx)?;
        let y = self.down.forward(&y, ctx)?;
        let y = self.context.forward(&y, ctx)?;
        self.aspp.forward(&y, ctx)
    }
}

enum Backbone {
    Tiny(TinyNet),
    DeepLab(DeepLabV3),
}

impl Backbone {
    fn out_channels(&self) -> usize {
        match self {
            Backbone::Tiny(_) => 16,
            Backbone::DeepLab(_) => ASPP_CHANNELS,
        }
    }

    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        match self {
            Backbone::Tiny(n) => n.forward(x, ctx),
            Backbone::DeepLab(n) => n.forward(x, ctx),
        }
    }
}

/// The classification head on a feature map: 1×1 convolution to `K`
/// channels, global average pooling, flatten. Works in any float dtype.
pub fn head_logits(features: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let y = features.conv2d(weight, 0, 1, 1, 1)?;
    let y = y.broadcast_add(&bias.reshape((1, (), 1, 1))?)?;
    Ok(y.mean((2, 3))?)
}

/// Where pretrained weights are cached and fetched from.
#[derive(Debug, Clone)]
pub struct WeightSource {
    pub cache_dir: PathBuf,
    pub allow_download: bool,
}

impl Default for WeightSource {
    fn default() -> Self {
        let cache_dir = std::env::var_os("HABITAT_WEIGHTS_DIR")
            .map(PathBuf::from)
            .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache/habitat/weights")))
            .unwrap_or_else(|| PathBuf::from(".habitat-weights"));
        Self {
            cache_dir,
            allow_download: true,
        }
    }
}

impl WeightSource {
    /// Path of the cached weight file for `url`, downloading it if needed.
    /// torchvision file names carry a sha256 prefix, which is verified.
    pub fn resolve(&self, url: &str) -> Result<PathBuf> {
        let file_name = url.rsplit('/').next().unwrap_or(url);
        let path = self.cache_dir.join(file_name);
        if !path.is_file() {
            if !self.allow_download {
                return Err(HabitatError::WeightFetch {
                    url: url.into(),
                    message: format!("not cached at {} and downloads are disabled", path.display()),
                });
            }
            download(url, &path)?;
        }
        if let Some(prefix) = file_name
            .rsplit_once('-')
            .and_then(|(_, tail)| tail.split('.').next())
            .filter(|p| p.len() >= 8 && p.chars().all(|c| c.is_ascii_hexdigit()))
        {
            let bytes = std::fs::read(&path).at(&path)?;
            let digest = hex::encode(Sha256::digest(&bytes));
            if !digest.starts_with(prefix) {
                return Err(HabitatError::Integrity(format!(
                    "{} has sha256 {digest}, expected prefix {prefix}",
                    path.display()
                )));
            }
        }
        Ok(path)
    }
}

fn download(url: &str, dest: &Path) -> Result<()> {
    let fetch_err = |message: String| HabitatError::WeightFetch {
        url: url.into(),
        message,
    };
    tracing::info!(url, dest = %dest.display(), "downloading pretrained weights");
    let response = reqwest::blocking::get(url)
        .and_then(|r| r.error_for_status())
        .map_err(|e| fetch_err(e.to_string()))?;
    let bytes = response.bytes().map_err(|e| fetch_err(e.to_string()))?;
    if let Some(dir) = dest.parent() {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let tmp = dest.with_extension("part");
    std::fs::write(&tmp, &bytes).at(&tmp)?;
    std::fs::rename(&tmp, dest).at(dest)
}

pub const HEAD_WEIGHT: &str = "head.proj.weight";
pub const HEAD_BIAS: &str = "head.proj.bias";

pub struct Classifier {
    config: ClassifierConfig,
    params: ParamStore,
    backbone: Backbone,
    head_weight: Tensor,
    head_bias: Tensor,
    mixed_precision: bool,
}

impl fmt::Debug for Classifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Classifier")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

/// Builds a classifier, loading published backbone weights when
/// `config.pretrained` is set.
pub fn build_classifier(config: &ClassifierConfig) -> Result<Classifier> {
    build_classifier_with(config, &WeightSource::default())
}

pub fn build_classifier_with(config: &ClassifierConfig, weights: &WeightSource) -> Result<Classifier> {
    let model = Classifier::initialised(config)?;
    if config.pretrained {
        let url = config.backbone.weights_url().ok_or_else(|| {
            HabitatError::Config(format!(
                "backbone `{}` has no published weights; set pretrained = false",
                config.backbone
            ))
        })?;
        let path = weights.resolve(url)?;
        model.load_backbone_state(&path)?;
    }
    Ok(model)
}

impl Classifier {
    /// Randomly initialised network (seeded by `config.seed`).
    pub fn initialised(config: &ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(config.seed);
        let backbone = match config.backbone.resnet_depths() {
            Some(depths) => Backbone::DeepLab(DeepLabV3::new(&mut params, depths)?),
            None => Backbone::Tiny(TinyNet::new(&mut params)?),
        };
        let c = backbone.out_channels();
        let head = Conv::with_bias(&mut params, "head.proj", ConvSpec::new(c, config.n_classes, 1))?;
        Ok(Self {
            config: config.clone(),
            params,
            backbone,
            head_weight: head.weight,
            head_bias: head.bias.expect("head has a bias"),
            mixed_precision: false,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn parameter_count(&self) -> usize {
        self.params
            .vars
            .iter()
            .filter(|(n, _)| !self.params.buffers.contains(*n))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Names and shapes of every stored tensor, including batch-norm buffers.
    pub fn tensor_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.params
            .vars
            .iter()
            .map(|(n, v)| (n.clone(), v.dims().to_vec()))
            .collect()
    }

    /// Runs convolutions in half precision during training steps. Weights,
    /// batch-norm arithmetic and logits stay in f32.
    pub fn set_mixed_precision(&mut self, on: bool) {
        self.mixed_precision = on;
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params.trainable()
    }

    /// `batch` is `B×3×S×S` with `S = config.input_size`; returns `B×K` logits.
    pub fn forward(&self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, c, h, w) = batch.dims4().map_err(|e| HabitatError::Shape(e.to_string()))?;
        let s = self.config.input_size;
        if c != 3 || h != s || w != s {
            return Err(HabitatError::Shape(format!(
                "expected B×3×{s}×{s} input, got {:?}",
                batch.dims()
            )));
        }
        let compute = if self.mixed_precision && matches!(mode, Mode::Train { .. }) {
            DType::F16
        } else {
            DType::F32
        };
        let ctx = Ctx { mode, compute };
        let features = self
            .backbone
            .forward(&batch.to_dtype(compute)?, ctx)?
            .to_dtype(DType::F32)?;
        let features = match mode {
            Mode::Train { step_seed } => dropout(
                &features,
                self.config.dropout_rate,
                rng::derive_seed(step_seed, "head-dropout"),
            )?,
            Mode::Eval => features,
        };
        head_logits(&features, &ctx.param(&self.head_weight), &ctx.param(&self.head_bias))
    }

    /// Softmax probabilities (evaluation mode), one row per image.
    pub fn predict_probabilities(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let logits = self.forward(&images_to_batch(images)?, Mode::Eval)?;
        logits_to_probabilities(&logits)
    }

    /// Copies of all stored tensors (weights and buffers).
    pub fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .vars
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites stored tensors from `state`. Every stored tensor must be present.
    pub fn load_state(&self, state: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.params.vars {
            let t = state
                .get(name)
                .ok_or_else(|| HabitatError::Compatibility(format!("missing tensor `{name}`")))?;
            set_checked(name, var, t)?;
        }
        Ok(())
    }

    pub fn restore(&self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.params.vars {
            if let Some(t) = state.get(name) {
                var.set(t)?;
            }
        }
        Ok(())
    }

    /// Loads backbone and ASPP tensors from a torchvision state dict,
    /// leaving the new head at its initial values.
    fn load_backbone_state(&self, path: &Path) -> Result<()> {
        let tensors: HashMap<String, Tensor> = candle_core::pickle::read_all(path)
            .map_err(|e| HabitatError::Integrity(format!("{}: {e}", path.display())))?
            .into_iter()
            .collect();
        for (name, var) in &self.params.vars {
            if name.starts_with("head.") {
                continue;
            }
            let t = tensors.get(name).ok_or_else(|| {
                HabitatError::Compatibility(format!("{} lacks tensor `{name}`", path.display()))
            })?;
            set_checked(name, var, t)?;
        }
        Ok(())
    }
}

fn set_checked(name: &str, var: &Var, t: &Tensor) -> Result<()> {
    if t.dims() != var.dims() {
        return Err(HabitatError::Compatibility(format!(
            "tensor `{name}` has shape {:?}, expected {:?}",
            t.dims(),
            var.dims()
        )));
    }
    var.set(&t.to_dtype(DType::F32)?.contiguous()?)?;
    Ok(())
}

/// Stacks preprocessed images into a `B×3×H×W` tensor.
pub fn images_to_batch(images: &[ImageTensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| HabitatError::Shape("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(HabitatError::Shape("images in a batch must share a size".into()));
        }
        data.extend_from_slice(img.as_slice());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?)
}

pub fn logits_to_probabilities(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Vec<f32>> = logits.to_dtype(DType::F32)?.to_vec2()?;
    Ok(rows
        .into_iter()
        .map(|r| softmax(&r.iter().map(|v| f64::from(*v)).collect::<Vec<_>>()))
        .collect())
}

/// Mean cross-entropy of `logits` (B×K) against class indices.
pub fn cross_entropy_loss(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let t = Tensor::from_slice(targets, targets.len(), logits.device())?;
    Ok(candle_nn::loss::cross_entropy(logits, &t)?)
}

pub(crate) fn argmax_rows(logits: &Tensor) -> Result<Vec<u32>> {
    Ok(logits.argmax(D::Minus1)?.to_vec1()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n_classes: usize, dropout_rate: f64) -> Classifier {
        Classifier::initialised(&ClassifierConfig {
            n_classes,
            dropout_rate,
            backbone: BackboneKind::Tiny,
            pretrained: false,
            input_size: 64,
            seed: 3,
        })
        .unwrap()
    }

    fn input(b: usize, s: usize) -> Tensor {
        let n = b * 3 * s * s;
        let v: Vec<f32> = (0..n).map(|i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0).collect();
        Tensor::from_vec(v, (b, 3, s, s), &Device::Cpu).unwrap()
    }

    #[test]
    fn logits_have_class_dimension() {
        let m = tiny(2, 0.5);
        assert_eq!(m.forward(&input(1, 64), Mode::Eval).unwrap().dims(), [1, 2]);
        let m = tiny(18, 0.5);
        assert_eq!(m.forward(&input(4, 64), Mode::Eval).unwrap().dims(), [4, 18]);
    }

    #[test]
    fn eval_is_deterministic() {
        let m = tiny(5, 0.0);
        let x = input(2, 64);
        let a: Vec<Vec<f32>> = m.forward(&x, Mode::Eval).unwrap().to_vec2().unwrap();
        let b: Vec<Vec<f32>> = m.forward(&x, Mode::Eval).unwrap().to_vec2().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_size_is_a_shape_error() {
        let m = tiny(3, 0.0);
        assert!(matches!(
            m.forward(&input(1, 32), Mode::Eval),
            Err(HabitatError::Shape(_))
        ));
    }

    #[test]
    fn initialisation_is_seeded() {
        let a = tiny(3, 0.0).state().unwrap();
        let b = tiny(3, 0.0).state().unwrap();
        for (name, t) in &a {
            let x: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f32> = b[name].flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(x, y, "{name}");
        }
    }

    #[test]
    fn training_mode_updates_running_stats_and_dropout_is_seeded() {
        let m = tiny(3, 0.5);
        let x = input(2, 64);
        let before = m.state().unwrap()["backbone.stem.1.running_mean"].to_vec1::<f32>().unwrap();
        let a: Vec<Vec<f32>> = m.forward(&x, Mode::Train { step_seed: 1 }).unwrap().to_vec2().unwrap();
        let after = m.state().unwrap()["backbone.stem.1.running_mean"].to_vec1::<f32>().unwrap();
        assert_ne!(before, after);
        let b: Vec<Vec<f32>> = m.forward(&x, Mode::Train { step_seed: 1 }).unwrap().to_vec2().unwrap();
        // Same masks, though batch statistics moved the running stats only.
        assert_eq!(a, b);
    }

    #[test]
    fn resnet_names_follow_torchvision() {
        let cfg = ClassifierConfig {
            backbone: BackboneKind::DeepLabV3ResNet50,
            pretrained: false,
            ..Default::default()
        };
        let m = Classifier::initialised(&cfg).unwrap();
        let shapes = m.tensor_shapes();
        assert_eq!(shapes["backbone.conv1.weight"], [64, 3, 7, 7]);
        assert_eq!(shapes["backbone.layer3.5.conv2.weight"], [256, 256, 3, 3]);
        assert_eq!(shapes["backbone.layer4.0.downsample.0.weight"], [2048, 1024, 1, 1]);
        assert_eq!(shapes["classifier.0.convs.4.1.weight"], [256, 2048, 1, 1]);
        assert_eq!(shapes["classifier.0.project.0.weight"], [256, 1280, 1, 1]);
        assert_eq!(shapes["classifier.1.weight"], [256, 256, 3, 3]);
        assert_eq!(shapes[HEAD_WEIGHT], [18, 256, 1, 1]);
        assert!(!shapes.contains_key("backbone.layer4.3.conv1.weight"));
    }

    #[test]
    fn unknown_backbone_and_missing_weights() {
        assert!("resnet9000".parse::<BackboneKind>().is_err());
        let cfg = ClassifierConfig {
            backbone: BackboneKind::Tiny,
            ..Default::default()
        };
        assert!(matches!(build_classifier(&cfg), Err(HabitatError::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let src = WeightSource {
            cache_dir: dir.path().to_path_buf(),
            allow_download: false,
        };
        let err = build_classifier_with(
            &ClassifierConfig {
                backbone: BackboneKind::DeepLabV3ResNet50,
                ..Default::default()
            },
            &src,
        )
        .unwrap_err();
        assert!(err.is_retriable(), "{err}");
    }

    #[test]
    fn config_validation() {
        let bad = ClassifierConfig {
            dropout_rate: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ClassifierConfig {
            n_classes: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
