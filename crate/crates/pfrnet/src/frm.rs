//! Guidance-driven feature refinement. Each of the three shallower pyramid
//! levels passes through channel attention and a 3x3 projection to 256
//! channels, is gated multiplicatively by the guidance map resampled to the
//! level's grid, and is finished by a second channel attention and a 1x1
//! projection.

use burn::module::Module;
use burn::tensor::backend::Backend;
use burn::tensor::Tensor;

use crate::affm::GuidanceMap;
use crate::blocks::{ChannelAttention, ConvBlock};
use crate::error::{Error, Result};

/// Width of every refined feature.
pub const REFINED_CHANNELS: usize = 256;

/// Refinement level: level `i` lives at stride `2^(i+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    L1,
    L2,
    L3,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::L1, Level::L2, Level::L3];

    /// Zero-based index into per-level module lists.
    pub fn index(self) -> usize {
        match self {
            Level::L1 => 0,
            Level::L2 => 1,
            Level::L3 => 2,
        }
    }

    /// Downsampling factor of this level relative to the input image.
    pub fn stride(self) -> usize {
        4 << self.index()
    }
}

impl TryFrom<usize> for Level {
    type Error = Error;

    fn try_from(value: usize) -> Result<Self> {
        match value {
            1 => Ok(Level::L1),
            2 => Ok(Level::L2),
            3 => Ok(Level::L3),
            other => Err(Error::invalid(format!(
                "refinement level must be 1, 2, or 3, got {other}"
            ))),
        }
    }
}

/// Refinement pipeline of a single level.
#[derive(Module, Debug)]
pub struct FrmLevel<B: Backend> {
    ca_in: ChannelAttention<B>,
    coarse: ConvBlock<B>,
    ca_out: ChannelAttention<B>,
    out: ConvBlock<B>,
}

impl<B: Backend> FrmLevel<B> {
    pub fn new(in_channels: usize, device: &B::Device) -> Result<Self> {
        Ok(Self {
            ca_in: ChannelAttention::new(in_channels, device)?,
            coarse: ConvBlock::new(in_channels, REFINED_CHANNELS, 3, device)?,
            ca_out: ChannelAttention::new(REFINED_CHANNELS, device)?,
            out: ConvBlock::new(REFINED_CHANNELS, REFINED_CHANNELS, 1, device)?,
        })
    }

    /// The coarse 256-channel feature before guidance is applied.
    fn coarse_feature(&self, f: Tensor<B, 4>) -> Tensor<B, 4> {
        self.coarse.forward(self.ca_in.forward(f))
    }

    fn finish(&self, g_refine: Tensor<B, 4>) -> Tensor<B, 4> {
        self.out.forward(self.ca_out.forward(g_refine))
    }

    /// Refines `f` under the guidance map. The single guidance channel
    /// multiplies all 256 coarse channels.
    pub fn forward(&self, f: Tensor<B, 4>, ggi: &GuidanceMap<B>) -> Tensor<B, 4> {
        let g_coarse = self.coarse_feature(f);
        let [_, _, h, w] = g_coarse.dims();
        let g_ggi = ggi.at_size([h, w]);
        self.finish(g_coarse * g_ggi)
    }

    /// The same pipeline with the guidance product skipped; refining with a
    /// guidance map of ones reproduces this path exactly.
    pub fn forward_unguided(&self, f: Tensor<B, 4>) -> Tensor<B, 4> {
        let g_coarse = self.coarse_feature(f);
        self.finish(g_coarse)
    }

    /// The gated feature before the output attention/projection, exposed for
    /// the guidance-algebra checks.
    pub fn gated_feature(&self, f: Tensor<B, 4>, ggi: &GuidanceMap<B>) -> Tensor<B, 4> {
        let g_coarse = self.coarse_feature(f);
        let [_, _, h, w] = g_coarse.dims();
        g_coarse * ggi.at_size([h, w])
    }
}

/// The three per-level refiners.
#[derive(Module, Debug)]
pub struct Frm<B: Backend> {
    levels: Vec<FrmLevel<B>>,
}

impl<B: Backend> Frm<B> {
    pub fn new(channels: [usize; 4], device: &B::Device) -> Result<Self> {
        let levels = channels[..3]
            .iter()
            .map(|&c| FrmLevel::new(c, device))
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    pub fn level(&self, level: Level) -> &FrmLevel<B> {
        &self.levels[level.index()]
    }

    /// Refines the feature of `level` with the guidance map.
    pub fn refine(
        &self,
        f: Tensor<B, 4>,
        ggi: &GuidanceMap<B>,
        level: Level,
    ) -> Tensor<B, 4> {
        self.level(level).forward(f, ggi)
    }
}
