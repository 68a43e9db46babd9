//! Shared neural building blocks: convolution stacks, attention gates, and
//! spatial resampling. Everything here preserves batch size and, unless a
//! stride is requested, spatial extents.

use burn::module::Module;
use burn::nn::conv::{Conv1d, Conv1dConfig, Conv2d, Conv2dConfig};
use burn::nn::{BatchNorm, BatchNormConfig, Linear, LinearConfig, PaddingConfig1d, PaddingConfig2d};
use burn::tensor::activation::{relu, sigmoid, silu};
use burn::tensor::backend::Backend;
use burn::tensor::{Tensor, TensorData};

use crate::error::{Error, Result};
use crate::interp::bilinear_weights;

/// Weight initializer used across the network: fan-out-scaled normal, the
/// common choice for ReLU/SiLU convolution stacks.
pub(crate) fn conv_initializer() -> burn::module::Initializer {
    burn::module::Initializer::KaimingNormal {
        gain: std::f64::consts::SQRT_2,
        fan_out_only: true,
    }
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel % 2 == 0 || kernel == 0 {
        return Err(Error::invalid(format!(
            "kernel size must be odd and positive, got {kernel}"
        )));
    }
    Ok(())
}

fn check_channels(out_channels: usize) -> Result<()> {
    if out_channels == 0 {
        return Err(Error::invalid("out_channels must be positive"));
    }
    Ok(())
}

fn check_dilation(dilation: usize) -> Result<()> {
    if dilation == 0 {
        return Err(Error::invalid("dilation must be >= 1"));
    }
    Ok(())
}

/// Convolution -> batch normalization -> SiLU, with same-padding so spatial
/// size is preserved (or exactly halved when built with stride 2).
#[derive(Module, Debug)]
pub struct ConvBlock<B: Backend> {
    conv: Conv2d<B>,
    bn: BatchNorm<B>,
}

impl<B: Backend> ConvBlock<B> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        device: &B::Device,
    ) -> Result<Self> {
        Self::with_options(in_channels, out_channels, kernel, 1, 1, device)
    }

    /// Fully parameterised constructor. `padding = dilation * (kernel - 1) / 2`
    /// keeps spatial size at stride 1 and halves even extents at stride 2.
    pub fn with_options(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        stride: usize,
        device: &B::Device,
    ) -> Result<Self> {
        check_channels(out_channels)?;
        check_kernel(kernel)?;
        check_dilation(dilation)?;
        if in_channels == 0 {
            return Err(Error::invalid("in_channels must be positive"));
        }
        let pad = dilation * (kernel - 1) / 2;
        let conv = Conv2dConfig::new([in_channels, out_channels], [kernel, kernel])
            .with_stride([stride, stride])
            .with_dilation([dilation, dilation])
            .with_padding(PaddingConfig2d::Explicit(pad, pad, pad, pad))
            .with_initializer(conv_initializer())
            .init(device);
        let bn = BatchNormConfig::new(out_channels).init(device);
        Ok(Self { conv, bn })
    }

    /// Rectangular-kernel variant (1x3, 3x1) at stride 1, dilation 1.
    pub fn rect(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        device: &B::Device,
    ) -> Result<Self> {
        check_channels(out_channels)?;
        check_kernel(kernel_h)?;
        check_kernel(kernel_w)?;
        let (pad_h, pad_w) = ((kernel_h - 1) / 2, (kernel_w - 1) / 2);
        let conv = Conv2dConfig::new([in_channels, out_channels], [kernel_h, kernel_w])
            .with_padding(PaddingConfig2d::Explicit(pad_h, pad_w, pad_h, pad_w))
            .with_initializer(conv_initializer())
            .init(device);
        let bn = BatchNormConfig::new(out_channels).init(device);
        Ok(Self { conv, bn })
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        silu(self.bn.forward(self.conv.forward(x)))
    }

    /// Bias vector of the convolution, one value per output channel.
    pub fn bias_values(&self) -> Vec<f64> {
        self.conv
            .bias
            .as_ref()
            .expect("conv blocks are built with bias")
            .val()
            .to_data()
            .to_vec::<f64>()
            .unwrap()
    }
}

/// Bare convolution with same-padding and bias, no normalization or
/// activation. Supports asymmetric kernels (1x3, 3x1) and dilation, as used
/// by the decoder's dilated branch blocks and the 1-channel output heads.
#[derive(Module, Debug)]
pub struct PlainConv<B: Backend> {
    conv: Conv2d<B>,
}

impl<B: Backend> PlainConv<B> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        dilation: usize,
        device: &B::Device,
    ) -> Result<Self> {
        check_channels(out_channels)?;
        check_kernel(kernel_h)?;
        check_kernel(kernel_w)?;
        check_dilation(dilation)?;
        let pad_h = dilation * (kernel_h - 1) / 2;
        let pad_w = dilation * (kernel_w - 1) / 2;
        let conv = Conv2dConfig::new([in_channels, out_channels], [kernel_h, kernel_w])
            .with_dilation([dilation, dilation])
            .with_padding(PaddingConfig2d::Explicit(pad_h, pad_w, pad_h, pad_w))
            .with_initializer(conv_initializer())
            .init(device);
        Ok(Self { conv })
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        self.conv.forward(x)
    }

    /// Replaces the kernel and bias, used by tests to pin exact weights.
    pub fn set_parameters(&mut self, weight: Tensor<B, 4>, bias: Tensor<B, 1>) {
        self.conv.weight = burn::module::Param::from_tensor(weight);
        self.conv.bias = Some(burn::module::Param::from_tensor(bias));
    }
}

/// Convolutional block attention: a per-channel sigmoid gate from pooled
/// descriptors through a shared bottleneck, then a spatial sigmoid gate from
/// channelwise avg/max statistics through a 7x7 convolution.
///
/// Both gates lie in (0, 1), so the output never exceeds the input in
/// magnitude.
#[derive(Module, Debug)]
pub struct Cbam<B: Backend> {
    fc1: Linear<B>,
    fc2: Linear<B>,
    spatial: Conv2d<B>,
}

/// Bottleneck reduction ratio of the channel branch.
const CBAM_REDUCTION: usize = 16;

impl<B: Backend> Cbam<B> {
    pub fn new(channels: usize, device: &B::Device) -> Result<Self> {
        if channels < 2 {
            return Err(Error::invalid(
                "channel attention needs at least 2 channels",
            ));
        }
        let hidden = (channels / CBAM_REDUCTION).max(1);
        Ok(Self {
            fc1: LinearConfig::new(channels, hidden).init(device),
            fc2: LinearConfig::new(hidden, channels).init(device),
            spatial: Conv2dConfig::new([2, 1], [7, 7])
                .with_padding(PaddingConfig2d::Explicit(3, 3, 3, 3))
                .with_initializer(conv_initializer())
                .init(device),
        })
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let [b, c, h, w] = x.dims();
        let flat = x.clone().reshape([b, c, h * w]);
        let avg = flat.clone().mean_dim(2).reshape([b, c]);
        let max = flat.max_dim(2).reshape([b, c]);
        let shared = |d: Tensor<B, 2>| self.fc2.forward(relu(self.fc1.forward(d)));
        let channel_gate = sigmoid(shared(avg) + shared(max)).reshape([b, c, 1, 1]);
        let x = x * channel_gate;

        let spatial_avg = x.clone().mean_dim(1);
        let spatial_max = x.clone().max_dim(1);
        let stats = Tensor::cat(vec![spatial_avg, spatial_max], 1);
        let spatial_gate = sigmoid(self.spatial.forward(stats));
        x * spatial_gate
    }
}

/// Efficient channel attention: global average pooling followed by a 1-D
/// convolution across the channel axis and a sigmoid gate.
#[derive(Module, Debug)]
pub struct ChannelAttention<B: Backend> {
    conv: Conv1d<B>,
}

impl<B: Backend> ChannelAttention<B> {
    pub fn new(channels: usize, device: &B::Device) -> Result<Self> {
        if channels < 2 {
            return Err(Error::invalid(
                "channel attention needs at least 2 channels",
            ));
        }
        // Kernel size 3 covers the <=512-channel regime used here.
        let conv = Conv1dConfig::new(1, 1, 3)
            .with_padding(PaddingConfig1d::Explicit(1, 1))
            .with_bias(false)
            .init(device);
        Ok(Self { conv })
    }

    /// Per-channel gates in (0, 1), shape `(batch, channels)`.
    pub fn gates(&self, x: &Tensor<B, 4>) -> Tensor<B, 2> {
        let [b, c, h, w] = x.dims();
        let pooled = x.clone().reshape([b, c, h * w]).mean_dim(2).reshape([b, 1, c]);
        sigmoid(self.conv.forward(pooled)).reshape([b, c])
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let [b, c, _, _] = x.dims();
        let gates = self.gates(&x).reshape([b, c, 1, 1]);
        x * gates
    }
}

/// Bilinear resampling by a positive scale factor. Output extents are
/// `round(extent * scale)` and must stay positive.
pub fn resample<B: Backend>(x: Tensor<B, 4>, scale: f64) -> Result<Tensor<B, 4>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    let [_, _, h, w] = x.dims();
    let out_h = (h as f64 * scale).round() as usize;
    let out_w = (w as f64 * scale).round() as usize;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!(
            "scale {scale} collapses {h}x{w} to {out_h}x{out_w}"
        )));
    }
    Ok(resample_to(x, [out_h, out_w]))
}

/// Bilinear resampling to an explicit target size.
///
/// Implemented as two batched matrix products with fixed row-stochastic
/// interpolation matrices, which keeps the operation differentiable on every
/// backend and constant-preserving.
pub fn resample_to<B: Backend>(x: Tensor<B, 4>, size: [usize; 2]) -> Tensor<B, 4> {
    let [b, c, h, w] = x.dims();
    let [out_h, out_w] = size;
    assert!(out_h >= 1 && out_w >= 1, "target extents must be positive");
    if [h, w] == size {
        return x;
    }
    let device = x.device();
    let mut out = x.reshape([b * c, h, w]);
    if out_h != h {
        let rows = Tensor::<B, 2>::from_data(
            TensorData::new(bilinear_weights(h, out_h), [out_h, h]),
            &device,
        );
        out = rows.unsqueeze::<3>().matmul(out);
    }
    if out_w != w {
        let cols = Tensor::<B, 2>::from_data(
            TensorData::new(bilinear_weights(w, out_w), [out_w, w]),
            &device,
        )
        .transpose();
        out = out.matmul(cols.unsqueeze::<3>());
    }
    out.reshape([b, c, out_h, out_w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use burn::backend::ndarray::NdArray;
    use burn::tensor::Distribution;

    type B = NdArray<f64>;

    fn device() -> <B as Backend>::Device {
        Default::default()
    }

    #[test]
    fn conv_block_preserves_space_and_maps_channels() {
        let d = device();
        let block = ConvBlock::<B>::new(64, 256, 3, &d).unwrap();
        let x = Tensor::random([1, 64, 32, 32], Distribution::Default, &d);
        assert_eq!(block.forward(x).dims(), [1, 256, 32, 32]);

        let proj = ConvBlock::<B>::new(256, 1, 1, &d).unwrap();
        let x = Tensor::random([2, 256, 8, 8], Distribution::Default, &d);
        assert_eq!(proj.forward(x).dims(), [2, 1, 8, 8]);
    }

    #[test]
    fn conv_block_rejects_bad_arguments() {
        let d = device();
        assert!(ConvBlock::<B>::new(8, 0, 3, &d).is_err());
        assert!(ConvBlock::<B>::new(8, 8, 2, &d).is_err());
        assert!(ConvBlock::<B>::with_options(8, 8, 3, 0, 1, &d).is_err());
    }

    /// Zero input through conv/BN(eval, fresh running stats)/SiLU reduces to a
    /// per-channel scalar: silu(bias / sqrt(1 + eps)). Checked against a
    /// direct scalar evaluation of both formulas.
    #[test]
    fn conv_block_zero_input_matches_scalar_silu_of_bias() {
        let d = device();
        // NdArray is not an autodiff backend, so BN runs in inference mode
        // with its freshly initialised running stats (mean 0, var 1).
        let block = ConvBlock::<B>::new(4, 6, 3, &d).unwrap();
        let x = Tensor::zeros([2, 4, 5, 5], &d);
        let out = block.forward(x);
        let bias = block.bias_values();
        let eps = 1e-5f64;
        let out_data = out.to_data().to_vec::<f64>().unwrap();
        for (ch, b_val) in bias.iter().enumerate() {
            let z = b_val / (1.0 + eps).sqrt();
            let expected = z * (1.0 / (1.0 + (-z).exp()));
            // every spatial position of channel `ch` must equal the scalar
            for n in 0..2 {
                for p in 0..25 {
                    let got = out_data[n * 6 * 25 + ch * 25 + p];
                    assert!(
                        (got - expected).abs() < 1e-12,
                        "channel {ch}: got {got}, expected {expected}"
                    );
                }
            }
        }
    }

    #[test]
    fn plain_conv_same_padding_with_dilation_and_asymmetric_kernels() {
        let d = device();
        let x = Tensor::<B, 4>::random([1, 64, 16, 16], Distribution::Default, &d);
        let dil5 = PlainConv::<B>::new(64, 64, 3, 3, 5, &d).unwrap();
        assert_eq!(dil5.forward(x.clone()).dims(), [1, 64, 16, 16]);
        let k13 = PlainConv::<B>::new(64, 64, 1, 3, 1, &d).unwrap();
        assert_eq!(k13.forward(x.clone()).dims(), [1, 64, 16, 16]);
        let k31 = PlainConv::<B>::new(64, 64, 3, 1, 1, &d).unwrap();
        assert_eq!(k31.forward(x).dims(), [1, 64, 16, 16]);
        assert!(PlainConv::<B>::new(64, 64, 3, 3, 0, &d).is_err());
    }

    #[test]
    fn plain_conv_identity_kernel_is_identity() {
        let d = device();
        let mut conv = PlainConv::<B>::new(1, 1, 1, 1, 1, &d).unwrap();
        conv.set_parameters(Tensor::ones([1, 1, 1, 1], &d), Tensor::zeros([1], &d));
        let x = Tensor::<B, 4>::random([2, 1, 9, 9], Distribution::Default, &d);
        let diff: f64 = (conv.forward(x.clone()) - x).abs().max().into_scalar();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn cbam_gates_never_amplify() {
        let d = device();
        let cbam = Cbam::<B>::new(128, &d).unwrap();
        let x = Tensor::<B, 4>::random([1, 128, 16, 16], Distribution::Default, &d);
        let y = cbam.forward(x.clone());
        assert_eq!(y.dims(), [1, 128, 16, 16]);
        let excess: f64 = (y.abs() - x.abs()).max().into_scalar();
        assert!(excess <= 0.0, "gate amplified activations by {excess}");

        let zeros = Tensor::<B, 4>::zeros([1, 128, 8, 8], &d);
        let max_abs: f64 = cbam.forward(zeros).abs().max().into_scalar();
        assert_eq!(max_abs, 0.0);
        assert!(Cbam::<B>::new(1, &d).is_err());
    }

    #[test]
    fn channel_attention_gates_are_sigmoid_valued() {
        let d = device();
        let ca = ChannelAttention::<B>::new(256, &d).unwrap();
        let x = Tensor::<B, 4>::random([1, 256, 8, 8], Distribution::Default, &d);
        assert_eq!(ca.forward(x.clone()).dims(), [1, 256, 8, 8]);
        let gates = ca.gates(&x);
        let min: f64 = gates.clone().min().into_scalar();
        let max: f64 = gates.max().into_scalar();
        assert!(min > 0.0 && max < 1.0, "gates outside (0,1): [{min}, {max}]");

        let zeros = Tensor::<B, 4>::zeros([2, 256, 4, 4], &d);
        let max_abs: f64 = ca.forward(zeros).abs().max().into_scalar();
        assert_eq!(max_abs, 0.0);
    }

    #[test]
    fn resample_size_arithmetic_and_constants() {
        let d = device();
        let x = Tensor::<B, 4>::random([1, 256, 11, 11], Distribution::Default, &d);
        assert_eq!(resample(x, 2.0).unwrap().dims(), [1, 256, 22, 22]);

        let x = Tensor::<B, 4>::random([1, 1, 44, 44], Distribution::Default, &d);
        assert_eq!(resample(x, 0.5).unwrap().dims(), [1, 1, 22, 22]);

        let c = Tensor::<B, 4>::ones([2, 3, 13, 9], &d) * -1.75;
        for scale in [0.5, 1.0, 2.0, 3.0] {
            let y = resample(c.clone(), scale).unwrap();
            let dev: f64 = (y + 1.75).abs().max().into_scalar();
            assert!(dev < 1e-6, "constant drifted by {dev} at scale {scale}");
        }

        let tiny = Tensor::<B, 4>::ones([1, 1, 2, 2], &d);
        assert!(resample(tiny.clone(), 0.1).is_err());
        assert!(resample(tiny, -1.0).is_err());
    }

    #[test]
    fn blocks_preserve_batch_and_stay_finite() {
        let d = device();
        for seed in 0..5u64 {
            <B as Backend>::seed(&d, seed);
            let block = ConvBlock::<B>::new(3, 8, 3, &d).unwrap();
            let x = Tensor::<B, 4>::random([3, 3, 16, 16], Distribution::Normal(0.0, 3.0), &d);
            let y = block.forward(x);
            assert_eq!(y.dims()[0], 3);
            assert!(y.is_finite().all().into_scalar());
        }
    }
}
