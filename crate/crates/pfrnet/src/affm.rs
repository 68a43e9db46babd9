//! Adaptive feature fusion: the three high-level pyramid features are
//! projected to a shared width and resolution, mixed by deep-layer attention
//! with a learnable strength, and combined with the projected low-level
//! feature through spatial-channel attention. The result is the coarsest
//! output logit map and, after a sigmoid, the global guidance map consumed
//! by the refinement stage.

use burn::module::{Module, Param};
use burn::tensor::activation::{sigmoid, softmax};
use burn::tensor::backend::Backend;
use burn::tensor::{ElementConversion, Tensor, TensorData};

use crate::backbone::FeaturePyramid;
use crate::blocks::{resample_to, Cbam, ConvBlock, PlainConv};
use crate::error::{Error, Result};

/// Width of each projected high-level feature.
pub const HIGH_CHANNELS: usize = 256;
/// Width of the projected low-level feature.
pub const LOW_CHANNELS: usize = 128;
/// Width of the fused high-level feature (three projected levels).
pub const FUSED_CHANNELS: usize = 3 * HIGH_CHANNELS;

/// Projects `f2..f4` to 256 channels each and upsamples them to the
/// stride-8 grid (the resolution of `f2`).
#[derive(Module, Debug)]
pub struct ProjectHigh<B: Backend> {
    convs: Vec<ConvBlock<B>>,
}

impl<B: Backend> ProjectHigh<B> {
    pub fn new(channels: [usize; 4], device: &B::Device) -> Result<Self> {
        let convs = channels[1..]
            .iter()
            .map(|&c| ConvBlock::new(c, HIGH_CHANNELS, 3, device))
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    /// Returns `(x1, x2, x3)` from `(f2, f3, f4)`, all `(B, 256, H/8, W/8)`.
    pub fn forward(
        &self,
        pyramid: &FeaturePyramid<B>,
    ) -> Result<(Tensor<B, 4>, Tensor<B, 4>, Tensor<B, 4>)> {
        pyramid.check_strides()?;
        let [_, _, h, w] = pyramid.f2.dims();
        let mut out = Vec::with_capacity(3);
        for (conv, f) in self
            .convs
            .iter()
            .zip([&pyramid.f2, &pyramid.f3, &pyramid.f4])
        {
            out.push(resample_to(conv.forward(f.clone()), [h, w]));
        }
        let x3 = out.pop().unwrap();
        let x2 = out.pop().unwrap();
        let x1 = out.pop().unwrap();
        Ok((x1, x2, x3))
    }
}

/// Softmaxed layer-correlation matrix `(B, 3, 3)`. Entry `(i, j)` holds the
/// weight of source layer `i` in the mixture for target layer `j`; each
/// column over `i` is a probability distribution.
pub fn layer_attention<B: Backend>(
    x1: &Tensor<B, 4>,
    x2: &Tensor<B, 4>,
    x3: &Tensor<B, 4>,
) -> Result<Tensor<B, 3>> {
    let stacked = stack_layers(x1, x2, x3)?;
    Ok(attention_from_stack(&stacked))
}

fn stack_layers<B: Backend>(
    x1: &Tensor<B, 4>,
    x2: &Tensor<B, 4>,
    x3: &Tensor<B, 4>,
) -> Result<Tensor<B, 3>> {
    let dims = x1.dims();
    if x2.dims() != dims || x3.dims() != dims {
        return Err(Error::shape(format!(
            "layer attention inputs must share shape, got {:?} / {:?} / {:?}",
            dims,
            x2.dims(),
            x3.dims()
        )));
    }
    let [b, c, h, w] = dims;
    let len = c * h * w;
    let rows: Vec<Tensor<B, 3>> = [x1, x2, x3]
        .into_iter()
        .map(|x| x.clone().reshape([b, 1, len]))
        .collect();
    Ok(Tensor::cat(rows, 1))
}

fn attention_from_stack<B: Backend>(stacked: &Tensor<B, 3>) -> Tensor<B, 3> {
    // logits[b, i, j] = <layer_i, layer_j>, softmax over the source index i
    let logits = stacked.clone().matmul(stacked.clone().swap_dims(1, 2));
    softmax(logits, 1)
}

/// Deep-layer attention. The mixing strength starts at exactly zero, so at
/// initialization the module concatenates its inputs unchanged; the network
/// assigns the strength during training.
#[derive(Module, Debug)]
pub struct Dla<B: Backend> {
    beta: Param<Tensor<B, 1>>,
}

impl<B: Backend> Dla<B> {
    pub fn new(device: &B::Device) -> Self {
        Self {
            beta: Param::from_tensor(Tensor::zeros([1], device)),
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta.val().into_scalar().elem()
    }

    /// Overrides the mixing strength; used by tests pinning the attention
    /// arithmetic.
    pub fn set_beta(&mut self, value: f64, device: &B::Device) {
        self.beta = Param::from_tensor(Tensor::from_data(
            TensorData::new(vec![value], [1]),
            device,
        ));
    }

    /// Mixes the three layers and concatenates them along channels into a
    /// 768-channel map.
    pub fn forward(
        &self,
        x1: &Tensor<B, 4>,
        x2: &Tensor<B, 4>,
        x3: &Tensor<B, 4>,
    ) -> Result<Tensor<B, 4>> {
        let [b, c, h, w] = x1.dims();
        let stacked = stack_layers(x1, x2, x3)?;
        let weights = attention_from_stack(&stacked);
        // row j of the mixture is sum_i w[i, j] * layer_i
        let mixed = weights.swap_dims(1, 2).matmul(stacked.clone());
        let beta = self.beta.val().reshape([1, 1, 1]);
        let fused = stacked + mixed * beta;
        Ok(fused.reshape([b, 3 * c, h, w]))
    }
}

/// Projects `f1` to 128 channels and downsamples it to the stride-8 grid.
#[derive(Module, Debug)]
pub struct ProjectLow<B: Backend> {
    conv: ConvBlock<B>,
}

impl<B: Backend> ProjectLow<B> {
    pub fn new(f1_channels: usize, device: &B::Device) -> Result<Self> {
        Ok(Self {
            conv: ConvBlock::new(f1_channels, LOW_CHANNELS, 1, device)?,
        })
    }

    pub fn forward(&self, f1: &Tensor<B, 4>) -> Tensor<B, 4> {
        let [_, _, h, w] = f1.dims();
        resample_to(self.conv.forward(f1.clone()), [h / 2, w / 2])
    }
}

/// Spatial-channel attention head producing the coarsest logits: the inputs
/// are concatenated as `[x_l; x_h]` and passed through
/// 1x1 conv -> CBAM -> 3x3 conv -> 1x1 projection.
#[derive(Module, Debug)]
pub struct Sca<B: Backend> {
    reduce: ConvBlock<B>,
    cbam: Cbam<B>,
    conv: ConvBlock<B>,
    project: PlainConv<B>,
}

impl<B: Backend> Sca<B> {
    pub fn new(device: &B::Device) -> Result<Self> {
        Ok(Self {
            reduce: ConvBlock::new(LOW_CHANNELS + FUSED_CHANNELS, HIGH_CHANNELS, 1, device)?,
            cbam: Cbam::new(HIGH_CHANNELS, device)?,
            conv: ConvBlock::new(HIGH_CHANNELS, HIGH_CHANNELS, 3, device)?,
            project: PlainConv::new(HIGH_CHANNELS, 1, 1, 1, 1, device)?,
        })
    }

    pub fn forward(&self, x_l: Tensor<B, 4>, x_h: Tensor<B, 4>) -> Result<Tensor<B, 4>> {
        let [bl, cl, hl, wl] = x_l.dims();
        let [bh, ch, hh, wh] = x_h.dims();
        if (hl, wl) != (hh, wh) || bl != bh {
            return Err(Error::shape(format!(
                "sca inputs disagree spatially: {:?} vs {:?}",
                x_l.dims(),
                x_h.dims()
            )));
        }
        if cl != LOW_CHANNELS || ch != FUSED_CHANNELS {
            return Err(Error::shape(format!(
                "sca expects {LOW_CHANNELS}+{FUSED_CHANNELS} channels, got {cl}+{ch}"
            )));
        }
        let fused = Tensor::cat(vec![x_l, x_h], 1);
        Ok(self
            .project
            .forward(self.conv.forward(self.cbam.forward(self.reduce.forward(fused)))))
    }
}

/// One-channel sigmoid map at stride 8 guiding the refinement stage. Values
/// produced from finite logits lie strictly inside (0, 1).
#[derive(Debug, Clone)]
pub struct GuidanceMap<B: Backend> {
    values: Tensor<B, 4>,
}

impl<B: Backend> GuidanceMap<B> {
    /// Applies a sigmoid to the coarsest logits.
    pub fn from_logits(o4: &Tensor<B, 4>) -> Result<Self> {
        Self::from_values(sigmoid(o4.clone()))
    }

    /// Wraps an existing one-channel map without transforming it (tests use
    /// this to force all-ones or all-zeros guidance).
    pub fn from_values(values: Tensor<B, 4>) -> Result<Self> {
        if values.dims()[1] != 1 {
            return Err(Error::shape(format!(
                "guidance map must have 1 channel, got {}",
                values.dims()[1]
            )));
        }
        Ok(Self { values })
    }

    /// Constant map, the stand-in when adaptive fusion is disabled.
    pub fn constant(value: f64, shape: [usize; 4], device: &B::Device) -> Self {
        Self {
            values: Tensor::full(shape, value, device),
        }
    }

    pub fn values(&self) -> &Tensor<B, 4> {
        &self.values
    }

    /// Bilinear resample of the guidance to a feature level's grid.
    pub fn at_size(&self, size: [usize; 2]) -> Tensor<B, 4> {
        resample_to(self.values.clone(), size)
    }
}

/// The full fusion stage: deep-layer attention over projected high levels,
/// low-level projection, and the spatial-channel attention head.
#[derive(Module, Debug)]
pub struct Affm<B: Backend> {
    pub dla: Dla<B>,
    pub project_low: ProjectLow<B>,
    pub sca: Sca<B>,
}

impl<B: Backend> Affm<B> {
    pub fn new(channels: [usize; 4], device: &B::Device) -> Result<Self> {
        Ok(Self {
            dla: Dla::new(device),
            project_low: ProjectLow::new(channels[0], device)?,
            sca: Sca::new(device)?,
        })
    }

    /// Returns the coarsest logits and the guidance map.
    pub fn forward(
        &self,
        f1: &Tensor<B, 4>,
        x1: &Tensor<B, 4>,
        x2: &Tensor<B, 4>,
        x3: &Tensor<B, 4>,
    ) -> Result<(Tensor<B, 4>, GuidanceMap<B>)> {
        let x_h = self.dla.forward(x1, x2, x3)?;
        let x_l = self.project_low.forward(f1);
        let o4 = self.sca.forward(x_l, x_h)?;
        let ggi = GuidanceMap::from_logits(&o4)?;
        Ok((o4, ggi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BackboneSpec};
    use burn::backend::ndarray::NdArray;
    use burn::tensor::Distribution;

    type B = NdArray<f64>;

    fn device() -> <B as Backend>::Device {
        Default::default()
    }

    fn stub_pyramid(batch: usize) -> FeaturePyramid<B> {
        let d = device();
        let bb = Backbone::<B>::from_spec(&BackboneSpec::stub(), &d).unwrap();
        bb.forward(Tensor::random(
            [batch, 3, 64, 64],
            Distribution::Default,
            &d,
        ))
        .unwrap()
    }

    #[test]
    fn project_high_emits_three_uniform_maps() {
        let d = device();
        let pyr = stub_pyramid(1);
        let ph = ProjectHigh::<B>::new(crate::backbone::STUB_CHANNELS, &d).unwrap();
        let (x1, x2, x3) = ph.forward(&pyr).unwrap();
        for x in [&x1, &x2, &x3] {
            assert_eq!(x.dims(), [1, 256, 8, 8]);
        }
        let pyr4 = stub_pyramid(4);
        let (x1, _, _) = ph.forward(&pyr4).unwrap();
        assert_eq!(x1.dims()[0], 4);
    }

    #[test]
    fn dla_at_beta_zero_is_exact_concatenation() {
        let d = device();
        let dla = Dla::<B>::new(&d);
        assert_eq!(dla.beta(), 0.0);
        let xs: Vec<Tensor<B, 4>> = (0..3)
            .map(|_| Tensor::random([2, 256, 8, 8], Distribution::Normal(0.0, 2.0), &d))
            .collect();
        let fused = dla.forward(&xs[0], &xs[1], &xs[2]).unwrap();
        assert_eq!(fused.dims(), [2, 768, 8, 8]);
        let concat = Tensor::cat(xs, 1);
        let diff: f64 = (fused - concat).abs().max().into_scalar();
        assert_eq!(diff, 0.0, "beta=0 must reduce to plain concatenation");
    }

    #[test]
    fn attention_columns_are_distributions() {
        let d = device();
        for seed in 0..10u64 {
            <B as Backend>::seed(&d, seed);
            let xs: Vec<Tensor<B, 4>> = (0..3)
                .map(|_| Tensor::random([2, 16, 4, 4], Distribution::Normal(0.0, 1.0), &d))
                .collect();
            let w = layer_attention(&xs[0], &xs[1], &xs[2]).unwrap();
            let min: f64 = w.clone().min().into_scalar();
            assert!(min >= 0.0);
            let col_sums = w.sum_dim(1);
            let err: f64 = (col_sums - 1.0).abs().max().into_scalar();
            assert!(err < 1e-6, "columns must sum to 1, off by {err}");
        }
    }

    /// Scalar oracle for the attention arithmetic: layers collapsed to single
    /// values (1, 2, 3) with the mixing strength forced to 1. Expected values
    /// computed here with plain f64 ops, independently of the tensor path.
    #[test]
    fn dla_scalar_toy_matches_brute_force() {
        let d = device();
        let vals = [1.0f64, 2.0, 3.0];
        // brute force: logits[i][j] = v_i * v_j, softmax over i, then
        // out_j = sum_i w_ij v_i + v_j
        let mut expected = [0.0f64; 3];
        for j in 0..3 {
            let logits: Vec<f64> = vals.iter().map(|v| v * vals[j]).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mix: f64 = exps
                .iter()
                .zip(&vals)
                .map(|(e, v)| e / z * v)
                .sum();
            expected[j] = mix + vals[j];
        }
        // the j = 0 column doubles as a worked reference:
        // softmax(1,2,3) ~ (0.0900, 0.2447, 0.6652), mix ~ 2.5750
        assert!((expected[0] - 3.5750).abs() < 5e-4);

        let mut dla = Dla::<B>::new(&d);
        dla.set_beta(1.0, &d);
        let xs: Vec<Tensor<B, 4>> = vals
            .iter()
            .map(|&v| Tensor::full([1, 1, 1, 1], v, &d))
            .collect();
        let fused = dla.forward(&xs[0], &xs[1], &xs[2]).unwrap();
        let got = fused.to_data().to_vec::<f64>().unwrap();
        for j in 0..3 {
            assert!(
                (got[j] - expected[j]).abs() < 1e-12,
                "layer {j}: got {}, expected {}",
                got[j],
                expected[j]
            );
        }
    }

    #[test]
    fn dla_rejects_mismatched_inputs() {
        let d = device();
        let dla = Dla::<B>::new(&d);
        let a = Tensor::<B, 4>::zeros([1, 8, 4, 4], &d);
        let b = Tensor::<B, 4>::zeros([1, 8, 2, 2], &d);
        assert!(dla.forward(&a, &a, &b).is_err());
    }

    #[test]
    fn project_low_and_sca_shapes() {
        let d = device();
        let pyr = stub_pyramid(1);
        let pl = ProjectLow::<B>::new(16, &d).unwrap();
        let x_l = pl.forward(&pyr.f1);
        assert_eq!(x_l.dims(), [1, 128, 8, 8]);

        let sca = Sca::<B>::new(&d).unwrap();
        let x_h = Tensor::random([1, 768, 8, 8], Distribution::Default, &d);
        let o4 = sca.forward(x_l.clone(), x_h).unwrap();
        assert_eq!(o4.dims(), [1, 1, 8, 8]);

        let mismatched = Tensor::random([1, 768, 4, 4], Distribution::Default, &d);
        assert!(sca.forward(x_l, mismatched).is_err());
    }

    #[test]
    fn guidance_map_range_and_shape() {
        let d = device();
        let zeros = Tensor::<B, 4>::zeros([2, 1, 8, 8], &d);
        let ggi = GuidanceMap::from_logits(&zeros).unwrap();
        let dev: f64 = (ggi.values().clone() - 0.5).abs().max().into_scalar();
        assert_eq!(dev, 0.0, "sigmoid(0) must be exactly one half");

        let very_negative = Tensor::<B, 4>::full([1, 1, 4, 4], -40.0, &d);
        let ggi = GuidanceMap::from_logits(&very_negative).unwrap();
        let min: f64 = ggi.values().clone().min().into_scalar();
        assert!(min > 0.0, "sigmoid output must stay strictly positive");

        let two_channel = Tensor::<B, 4>::zeros([1, 2, 4, 4], &d);
        assert!(GuidanceMap::from_values(two_channel).is_err());
    }
}
