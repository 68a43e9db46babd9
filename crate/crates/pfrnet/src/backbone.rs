//! Feature-pyramid backbones. The network consumes four feature levels
//! `f1..f4` at strides 4/8/16/32; the stem level is intentionally dropped.
//!
//! Two families are provided behind one enum: a small convolutional stub
//! whose channel plan is configurable (fast enough to overfit a handful of
//! images on a CPU), and a faithful Res2Net-50 for full-scale runs.

use std::path::PathBuf;

use burn::module::Module;
use burn::nn::conv::{Conv2d, Conv2dConfig};
use burn::nn::pool::{MaxPool2d, MaxPool2dConfig};
use burn::nn::{BatchNorm, BatchNormConfig, PaddingConfig2d};
use burn::record::{FullPrecisionSettings, NamedMpkFileRecorder, Recorder};
use burn::tensor::activation::relu;
use burn::tensor::backend::Backend;
use burn::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::blocks::{conv_initializer, ConvBlock};
use crate::error::{Error, Result};

/// The four backbone feature levels. Spatial extents halve exactly from one
/// level to the next; all levels share the batch size.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<B: Backend> {
    pub f1: Tensor<B, 4>,
    pub f2: Tensor<B, 4>,
    pub f3: Tensor<B, 4>,
    pub f4: Tensor<B, 4>,
}

impl<B: Backend> FeaturePyramid<B> {
    /// Checks the halving law between consecutive levels and the shared
    /// batch size. Used by tests and the self-check battery.
    pub fn check_strides(&self) -> Result<()> {
        let dims = [self.f1.dims(), self.f2.dims(), self.f3.dims(), self.f4.dims()];
        for win in dims.windows(2) {
            let (a, b) = (win[0], win[1]);
            if a[0] != b[0] {
                return Err(Error::shape(format!(
                    "pyramid batch sizes differ: {} vs {}",
                    a[0], b[0]
                )));
            }
            if b[2] * 2 != a[2] || b[3] * 2 != a[3] {
                return Err(Error::shape(format!(
                    "pyramid levels do not halve: {}x{} then {}x{}",
                    a[2], a[3], b[2], b[3]
                )));
            }
        }
        Ok(())
    }
}

/// Backbone selection: family name, per-level channel counts, and an
/// optional pretrained weight file (the crate's standard named-mpk record).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub channels: [usize; 4],
    pub pretrained_weights_path: Option<PathBuf>,
}

/// Channel plan of Res2Net-50's last four stages.
pub const RES2NET50_CHANNELS: [usize; 4] = [256, 512, 1024, 2048];
/// Channel plan of the desk-scale stub.
pub const STUB_CHANNELS: [usize; 4] = [16, 32, 64, 128];

impl BackboneSpec {
    /// Desk-scale stub: channels (16, 32, 64, 128).
    pub fn stub() -> Self {
        Self {
            name: "stub".into(),
            channels: STUB_CHANNELS,
            pretrained_weights_path: None,
        }
    }

    /// Stub with Res2Net-50's channel plan, for full-resolution shape checks
    /// without the full backbone cost.
    pub fn stub_res2net_shaped() -> Self {
        Self {
            name: "stub".into(),
            channels: RES2NET50_CHANNELS,
            pretrained_weights_path: None,
        }
    }

    pub fn res2net50(pretrained: Option<PathBuf>) -> Self {
        Self {
            name: "res2net50".into(),
            channels: RES2NET50_CHANNELS,
            pretrained_weights_path: pretrained,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::invalid("backbone channel counts must be positive"));
        }
        match self.name.as_str() {
            "stub" => Ok(()),
            "res2net50" => {
                if self.channels != RES2NET50_CHANNELS {
                    return Err(Error::invalid(format!(
                        "res2net50 produces channels {RES2NET50_CHANNELS:?}, spec asked for {:?}",
                        self.channels
                    )));
                }
                Ok(())
            }
            other => Err(Error::invalid(format!("unknown backbone '{other}'"))),
        }
    }
}

fn check_input(dims: [usize; 4]) -> Result<()> {
    let [_, c, h, w] = dims;
    if c != 3 {
        return Err(Error::shape(format!("backbone expects 3 channels, got {c}")));
    }
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::shape(format!(
            "input extents must be divisible by 32, got {h}x{w}"
        )));
    }
    Ok(())
}

/// One stub stage: a strided conv block followed by a residual conv block.
#[derive(Module, Debug)]
struct StubStage<B: Backend> {
    down: ConvBlock<B>,
    residual: ConvBlock<B>,
}

impl<B: Backend> StubStage<B> {
    fn new(in_channels: usize, out_channels: usize, device: &B::Device) -> Result<Self> {
        Ok(Self {
            down: ConvBlock::with_options(in_channels, out_channels, 3, 1, 2, device)?,
            residual: ConvBlock::new(out_channels, out_channels, 3, device)?,
        })
    }

    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let x = self.down.forward(x);
        x.clone() + self.residual.forward(x)
    }
}

/// Four stages of (strided conv block, residual conv block) over a stride-2
/// stem: small enough to overfit a few images in seconds yet exercising the
/// same pyramid contract as the full backbone.
#[derive(Module, Debug)]
pub struct StubBackbone<B: Backend> {
    stem: ConvBlock<B>,
    stages: Vec<StubStage<B>>,
}

impl<B: Backend> StubBackbone<B> {
    pub fn new(channels: [usize; 4], device: &B::Device) -> Result<Self> {
        let stem_width = (channels[0] / 2).max(4);
        let stem = ConvBlock::with_options(3, stem_width, 3, 1, 2, device)?;
        let mut stages = Vec::with_capacity(4);
        let mut prev = stem_width;
        for &ch in &channels {
            stages.push(StubStage::new(prev, ch, device)?);
            prev = ch;
        }
        Ok(Self { stem, stages })
    }

    pub fn forward(&self, image: Tensor<B, 4>) -> Result<FeaturePyramid<B>> {
        check_input(image.dims())?;
        let mut x = self.stem.forward(image);
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.forward(x);
            levels.push(x.clone());
        }
        let f4 = levels.pop().unwrap();
        let f3 = levels.pop().unwrap();
        let f2 = levels.pop().unwrap();
        let f1 = levels.pop().unwrap();
        Ok(FeaturePyramid { f1, f2, f3, f4 })
    }
}

/// Res2Net bottleneck with hierarchical residual-like splits (scale 4,
/// base width 26).
#[derive(Module, Debug)]
struct Bottle2neck<B: Backend> {
    conv1: Conv2d<B>,
    bn1: BatchNorm<B>,
    convs: Vec<Conv2d<B>>,
    bns: Vec<BatchNorm<B>>,
    conv3: Conv2d<B>,
    bn3: BatchNorm<B>,
    downsample: Option<(Conv2d<B>, BatchNorm<B>)>,
    pool: Option<burn::nn::pool::AvgPool2d>,
    width: usize,
    is_stage_head: bool,
}

const RES2NET_SCALE: usize = 4;
const RES2NET_BASE_WIDTH: usize = 26;

impl<B: Backend> Bottle2neck<B> {
    fn new(
        in_planes: usize,
        planes: usize,
        stride: usize,
        stage_head: bool,
        device: &B::Device,
    ) -> Self {
        let width = planes * RES2NET_BASE_WIDTH / 64;
        let inner = width * RES2NET_SCALE;
        let conv = |cin: usize, cout: usize, k: usize, s: usize, p: usize| {
            Conv2dConfig::new([cin, cout], [k, k])
                .with_stride([s, s])
                .with_padding(PaddingConfig2d::Explicit(p, p, p, p))
                .with_bias(false)
                .with_initializer(conv_initializer())
                .init(device)
        };
        let conv1 = conv(in_planes, inner, 1, 1, 0);
        let bn1 = BatchNormConfig::new(inner).init(device);
        let nums = RES2NET_SCALE - 1;
        let convs = (0..nums).map(|_| conv(width, width, 3, stride, 1)).collect();
        let bns = (0..nums)
            .map(|_| BatchNormConfig::new(width).init(device))
            .collect();
        let out_planes = planes * 4;
        let conv3 = conv(inner, out_planes, 1, 1, 0);
        let bn3 = BatchNormConfig::new(out_planes).init(device);
        let downsample = (stride != 1 || in_planes != out_planes).then(|| {
            (
                conv(in_planes, out_planes, 1, stride, 0),
                BatchNormConfig::new(out_planes).init(device),
            )
        });
        let pool = stage_head.then(|| {
            burn::nn::pool::AvgPool2dConfig::new([3, 3])
                .with_strides([stride, stride])
                .with_padding(PaddingConfig2d::Explicit(1, 1, 1, 1))
                .init()
        });
        Self {
            conv1,
            bn1,
            convs,
            bns,
            conv3,
            bn3,
            downsample,
            pool,
            width,
            is_stage_head: stage_head,
        }
    }

    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let out = relu(self.bn1.forward(self.conv1.forward(x.clone())));
        let [b, _, h, w] = out.dims();
        let splits: Vec<Tensor<B, 4>> = (0..RES2NET_SCALE)
            .map(|i| out.clone().slice([0..b, i * self.width..(i + 1) * self.width, 0..h, 0..w]))
            .collect();

        let mut pieces: Vec<Tensor<B, 4>> = Vec::with_capacity(RES2NET_SCALE);
        let mut sp: Option<Tensor<B, 4>> = None;
        for i in 0..RES2NET_SCALE - 1 {
            let input = match (&sp, self.is_stage_head) {
                (Some(prev), false) => prev.clone() + splits[i].clone(),
                _ => splits[i].clone(),
            };
            let y = relu(self.bns[i].forward(self.convs[i].forward(input)));
            sp = Some(y.clone());
            pieces.push(y);
        }
        let last = splits[RES2NET_SCALE - 1].clone();
        pieces.push(match &self.pool {
            Some(pool) => pool.forward(last),
            None => last,
        });

        let out = self.bn3.forward(self.conv3.forward(Tensor::cat(pieces, 1)));
        let residual = match &self.downsample {
            Some((conv, bn)) => bn.forward(conv.forward(x)),
            None => x,
        };
        relu(out + residual)
    }
}

/// Res2Net-50 (scale 4, width 26): stem conv + max-pool, then stages of
/// [3, 4, 6, 3] bottlenecks producing 256/512/1024/2048 channels at strides
/// 4/8/16/32.
#[derive(Module, Debug)]
pub struct Res2Net50<B: Backend> {
    stem_conv: Conv2d<B>,
    stem_bn: BatchNorm<B>,
    stem_pool: MaxPool2d,
    stages: Vec<Vec<Bottle2neck<B>>>,
}

impl<B: Backend> Res2Net50<B> {
    pub fn new(device: &B::Device) -> Self {
        let stem_conv = Conv2dConfig::new([3, 64], [7, 7])
            .with_stride([2, 2])
            .with_padding(PaddingConfig2d::Explicit(3, 3, 3, 3))
            .with_bias(false)
            .with_initializer(conv_initializer())
            .init(device);
        let stem_bn = BatchNormConfig::new(64).init(device);
        let stem_pool = MaxPool2dConfig::new([3, 3])
            .with_strides([2, 2])
            .with_padding(PaddingConfig2d::Explicit(1, 1, 1, 1))
            .init();

        let plan: [(usize, usize, usize); 4] =
            [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)];
        let mut stages = Vec::with_capacity(4);
        let mut in_planes = 64;
        for (planes, blocks, stride) in plan {
            let mut stage = Vec::with_capacity(blocks);
            stage.push(Bottle2neck::new(in_planes, planes, stride, true, device));
            in_planes = planes * 4;
            for _ in 1..blocks {
                stage.push(Bottle2neck::new(in_planes, planes, 1, false, device));
            }
            stages.push(stage);
        }
        Self {
            stem_conv,
            stem_bn,
            stem_pool,
            stages,
        }
    }

    pub fn forward(&self, image: Tensor<B, 4>) -> Result<FeaturePyramid<B>> {
        check_input(image.dims())?;
        let mut x = self
            .stem_pool
            .forward(relu(self.stem_bn.forward(self.stem_conv.forward(image))));
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(x);
            }
            levels.push(x.clone());
        }
        let f4 = levels.pop().unwrap();
        let f3 = levels.pop().unwrap();
        let f2 = levels.pop().unwrap();
        let f1 = levels.pop().unwrap();
        Ok(FeaturePyramid { f1, f2, f3, f4 })
    }
}

/// The backbone behind the network, chosen by [`BackboneSpec`].
#[derive(Module, Debug)]
pub enum Backbone<B: Backend> {
    Stub(StubBackbone<B>),
    Res2Net(Res2Net50<B>),
}

impl<B: Backend> Backbone<B> {
    /// Builds the backbone named by `spec`, loading pretrained weights when
    /// a path is given.
    pub fn from_spec(spec: &BackboneSpec, device: &B::Device) -> Result<Self> {
        spec.validate()?;
        let mut backbone = match spec.name.as_str() {
            "stub" => Backbone::Stub(StubBackbone::new(spec.channels, device)?),
            "res2net50" => Backbone::Res2Net(Res2Net50::new(device)),
            other => return Err(Error::invalid(format!("unknown backbone '{other}'"))),
        };
        if let Some(path) = &spec.pretrained_weights_path {
            if !path.exists() {
                return Err(Error::Checkpoint(format!(
                    "pretrained weights not found at {}",
                    path.display()
                )));
            }
            let recorder = NamedMpkFileRecorder::<FullPrecisionSettings>::default();
            let record = recorder
                .load(path.clone(), device)
                .map_err(|e| Error::Checkpoint(format!("loading {}: {e}", path.display())))?;
            backbone = backbone.load_record(record);
        }
        Ok(backbone)
    }

    /// Extracts the four-level pyramid. Input must be 3-channel with extents
    /// divisible by 32.
    pub fn forward(&self, image: Tensor<B, 4>) -> Result<FeaturePyramid<B>> {
        match self {
            Backbone::Stub(b) => b.forward(image),
            Backbone::Res2Net(b) => b.forward(image),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use burn::backend::ndarray::NdArray;
    use burn::tensor::Distribution;

    type B = NdArray<f32>;

    fn device() -> <B as Backend>::Device {
        Default::default()
    }

    #[test]
    fn stub_pyramid_strides_and_channels() {
        let d = device();
        let bb = Backbone::<B>::from_spec(&BackboneSpec::stub(), &d).unwrap();
        let img = Tensor::random([1, 3, 64, 64], Distribution::Default, &d);
        let pyr = bb.forward(img).unwrap();
        assert_eq!(pyr.f1.dims(), [1, 16, 16, 16]);
        assert_eq!(pyr.f2.dims(), [1, 32, 8, 8]);
        assert_eq!(pyr.f3.dims(), [1, 64, 4, 4]);
        assert_eq!(pyr.f4.dims(), [1, 128, 2, 2]);
        pyr.check_strides().unwrap();
    }

    #[test]
    fn rejects_input_not_divisible_by_32() {
        let d = device();
        let bb = Backbone::<B>::from_spec(&BackboneSpec::stub(), &d).unwrap();
        let img = Tensor::random([1, 3, 100, 100], Distribution::Default, &d);
        assert!(bb.forward(img).is_err());
    }

    #[test]
    fn rejects_missing_weight_file() {
        let d = device();
        let mut spec = BackboneSpec::stub();
        spec.pretrained_weights_path = Some("/nonexistent/weights.mpk".into());
        assert!(Backbone::<B>::from_spec(&spec, &d).is_err());
    }

    /// Res2Net-50 stage contract: strides 4/8/16/32 with channels
    /// 256/512/1024/2048 (resolution-independent, checked at 96x96 to keep
    /// the test quick; 352x352 input yields 88/44/22/11 by the same law).
    #[test]
    fn res2net50_stage_shapes() {
        let d = device();
        let bb = Backbone::<B>::from_spec(&BackboneSpec::res2net50(None), &d).unwrap();
        let img = Tensor::random([1, 3, 96, 96], Distribution::Default, &d);
        let pyr = bb.forward(img).unwrap();
        assert_eq!(pyr.f1.dims(), [1, 256, 24, 24]);
        assert_eq!(pyr.f2.dims(), [1, 512, 12, 12]);
        assert_eq!(pyr.f3.dims(), [1, 1024, 6, 6]);
        assert_eq!(pyr.f4.dims(), [1, 2048, 3, 3]);
        pyr.check_strides().unwrap();
    }

    #[test]
    fn stub_is_deterministic_under_seed() {
        let d = device();
        let run = || {
            <B as Backend>::seed(&d, 99);
            let bb = StubBackbone::<B>::new(STUB_CHANNELS, &d).unwrap();
            let img = Tensor::<B, 4>::ones([1, 3, 64, 64], &d) * 0.2;
            bb.forward(img).unwrap().f4.to_data().to_vec::<f32>().unwrap()
        };
        assert_eq!(run(), run());
    }
}
