//! Context-aware decoding. Each refined feature (optionally modulated by the
//! next-coarser output through a gated residual) is split into four
//! 64-channel branches, neighbouring branches are coupled through dilated
//! convolution chains, per-branch residuals are re-merged, and a small
//! linear head emits the level's one-channel logits.

use burn::module::Module;
use burn::tensor::activation::{relu, sigmoid};
use burn::tensor::backend::Backend;
use burn::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::blocks::{resample_to, ConvBlock, PlainConv};
use crate::error::{Error, Result};
use crate::frm::REFINED_CHANNELS;

/// Channels per branch after the four-way split.
pub const BRANCH_CHANNELS: usize = REFINED_CHANNELS / 4;

/// Decoder configuration: the per-branch residual scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub lambda: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { lambda: 0.5 }
    }
}

impl DecoderConfig {
    /// Scale factors outside [0, 1] have no supported reading; training
    /// sweeps stay within (0, 1].
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid(format!(
                "residual scale must lie in [0, 1], got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }
}

/// Gated residual modulation of a refined feature by the next-coarser
/// output: `conv3x3(rf * sigmoid(up2(o_next)) + rf)`.
#[derive(Module, Debug)]
pub struct Ppo<B: Backend> {
    conv: ConvBlock<B>,
}

impl<B: Backend> Ppo<B> {
    pub fn new(device: &B::Device) -> Result<Self> {
        Ok(Self {
            conv: ConvBlock::new(REFINED_CHANNELS, REFINED_CHANNELS, 3, device)?,
        })
    }

    pub fn forward(&self, rf: Tensor<B, 4>, o_next: &Tensor<B, 4>) -> Result<Tensor<B, 4>> {
        Ok(self.conv.forward(self.modulated(rf, o_next)?))
    }

    /// The gated residual before the convolution; with the gate driven to
    /// zero this equals `rf` exactly.
    pub fn modulated(&self, rf: Tensor<B, 4>, o_next: &Tensor<B, 4>) -> Result<Tensor<B, 4>> {
        if o_next.dims()[1] != 1 {
            return Err(Error::shape(format!(
                "coarser output must have 1 channel, got {}",
                o_next.dims()[1]
            )));
        }
        let [_, _, h, w] = rf.dims();
        let gate = sigmoid(resample_to(o_next.clone(), [h, w]));
        Ok(rf.clone() * gate + rf)
    }
}

/// Splits a 256-channel map into four contiguous 64-channel branches.
pub fn split4<B: Backend>(y: &Tensor<B, 4>) -> Result<[Tensor<B, 4>; 4]> {
    let [b, c, h, w] = y.dims();
    if c % 4 != 0 {
        return Err(Error::shape(format!(
            "channel count must be divisible by 4, got {c}"
        )));
    }
    let part = c / 4;
    let slice = |i: usize| y.clone().slice([0..b, i * part..(i + 1) * part, 0..h, 0..w]);
    Ok([slice(0), slice(1), slice(2), slice(3)])
}

/// Inverse of [`split4`]: channel concatenation in branch order.
pub fn concat4<B: Backend>(parts: [Tensor<B, 4>; 4]) -> Tensor<B, 4> {
    Tensor::cat(parts.to_vec(), 1)
}

/// One branch-coupling chain: conv blocks (1x1, optionally 3x1 / 1x3)
/// finished by a bare dilated 3x3 convolution. All terms keep 64 channels.
#[derive(Module, Debug)]
pub struct CbChain<B: Backend> {
    blocks: Vec<ConvBlock<B>>,
    dilated: PlainConv<B>,
}

impl<B: Backend> CbChain<B> {
    /// Builds chain `index` in 1..=4:
    /// 1: 1x1 -> d1; 2: 1x1 -> 3x1 -> d3; 3: 1x1 -> 1x3 -> d3;
    /// 4: 1x1 -> 3x1 -> 1x3 -> d5.
    pub fn new(index: usize, device: &B::Device) -> Result<Self> {
        let c = BRANCH_CHANNELS;
        let mut blocks = vec![ConvBlock::new(c, c, 1, device)?];
        let dilation = match index {
            1 => 1,
            2 => {
                blocks.push(ConvBlock::rect(c, c, 3, 1, device)?);
                3
            }
            3 => {
                blocks.push(ConvBlock::rect(c, c, 1, 3, device)?);
                3
            }
            4 => {
                blocks.push(ConvBlock::rect(c, c, 3, 1, device)?);
                blocks.push(ConvBlock::rect(c, c, 1, 3, device)?);
                5
            }
            other => {
                return Err(Error::invalid(format!(
                    "branch chain index must be 1..=4, got {other}"
                )))
            }
        };
        let dilated = PlainConv::new(c, c, 3, 3, dilation, device)?;
        Ok(Self { blocks, dilated })
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let mut x = x;
        for block in &self.blocks {
            x = block.forward(x);
        }
        self.dilated.forward(x)
    }
}

/// Couples each branch with its neighbours:
/// `z1 = CB1(y1+y2)`, `z2 = CB2(z1+y2+y3)`, `z3 = CB3(z2+y3+y4)`,
/// `z4 = CB4(z3+y4)`.
#[derive(Module, Debug)]
pub struct BranchInteract<B: Backend> {
    chains: Vec<CbChain<B>>,
}

impl<B: Backend> BranchInteract<B> {
    pub fn new(device: &B::Device) -> Result<Self> {
        let chains = (1..=4)
            .map(|i| CbChain::new(i, device))
            .collect::<Result<_>>()?;
        Ok(Self { chains })
    }

    pub fn forward(&self, parts: &[Tensor<B, 4>; 4]) -> [Tensor<B, 4>; 4] {
        let [y1, y2, y3, y4] = parts;
        let z1 = self.chains[0].forward(y1.clone() + y2.clone());
        let z2 = self.chains[1].forward(z1.clone() + y2.clone() + y3.clone());
        let z3 = self.chains[2].forward(z2.clone() + y3.clone() + y4.clone());
        let z4 = self.chains[3].forward(z3.clone() + y4.clone());
        [z1, z2, z3, z4]
    }
}

/// Per-branch residual `z'_j = y_j + lambda * z_j`, re-merged along the
/// channel axis into a 256-channel map.
pub fn residual_merge<B: Backend>(
    z: [Tensor<B, 4>; 4],
    y: &[Tensor<B, 4>; 4],
    lambda: f64,
) -> Tensor<B, 4> {
    let merged: Vec<Tensor<B, 4>> = z
        .into_iter()
        .zip(y.iter())
        .map(|(zj, yj)| yj.clone() + zj * lambda)
        .collect();
    Tensor::cat(merged, 1)
}

/// Output head: a 1x1 linear map, ReLU, a residual connection from the
/// pre-split feature, and a final 1x1 projection to one-channel logits.
#[derive(Module, Debug)]
pub struct Head<B: Backend> {
    linear: PlainConv<B>,
    residual: PlainConv<B>,
    project: PlainConv<B>,
}

impl<B: Backend> Head<B> {
    pub fn new(device: &B::Device) -> Result<Self> {
        let c = REFINED_CHANNELS;
        Ok(Self {
            linear: PlainConv::new(c, c, 1, 1, 1, device)?,
            residual: PlainConv::new(c, c, 1, 1, 1, device)?,
            project: PlainConv::new(c, 1, 1, 1, 1, device)?,
        })
    }

    pub fn forward(&self, merged: Tensor<B, 4>, y: &Tensor<B, 4>) -> Tensor<B, 4> {
        let lifted = relu(self.linear.forward(merged)) + self.residual.forward(y.clone());
        self.project.forward(lifted)
    }
}

/// Full decoding pipeline of one level.
#[derive(Module, Debug)]
pub struct CfdmLevel<B: Backend> {
    ppo: Option<Ppo<B>>,
    interact: BranchInteract<B>,
    head: Head<B>,
    lambda: f64,
}

impl<B: Backend> CfdmLevel<B> {
    /// `with_ppo` is false only for the deepest level, whose input is used
    /// unmodulated.
    pub fn new(with_ppo: bool, config: DecoderConfig, device: &B::Device) -> Result<Self> {
        Ok(Self {
            ppo: with_ppo.then(|| Ppo::new(device)).transpose()?,
            interact: BranchInteract::new(device)?,
            head: Head::new(device)?,
            lambda: config.lambda,
        })
    }

    pub fn forward(
        &self,
        rf: Tensor<B, 4>,
        o_next: Option<&Tensor<B, 4>>,
    ) -> Result<Tensor<B, 4>> {
        let y = match (&self.ppo, o_next) {
            (Some(ppo), Some(o)) => ppo.forward(rf, o)?,
            (None, None) => rf,
            (Some(_), None) => {
                return Err(Error::invalid(
                    "this decoder level requires the next-coarser output",
                ))
            }
            (None, Some(_)) => {
                return Err(Error::invalid(
                    "the deepest decoder level takes no coarser output",
                ))
            }
        };
        let parts = split4(&y)?;
        let z = self.interact.forward(&parts);
        let merged = residual_merge(z, &parts, self.lambda);
        Ok(self.head.forward(merged, &y))
    }
}

/// The three decoder levels applied top-down: the deepest refined feature
/// produces its logits first, and each shallower level is modulated by its
/// successor's logits.
#[derive(Module, Debug)]
pub struct Cfdm<B: Backend> {
    levels: Vec<CfdmLevel<B>>,
}

impl<B: Backend> Cfdm<B> {
    pub fn new(config: DecoderConfig, device: &B::Device) -> Result<Self> {
        let levels = vec![
            CfdmLevel::new(true, config, device)?,
            CfdmLevel::new(true, config, device)?,
            CfdmLevel::new(false, config, device)?,
        ];
        Ok(Self { levels })
    }

    /// Returns `(o1, o2, o3)` from `(rf1, rf2, rf3)`.
    pub fn forward(
        &self,
        rf1: Tensor<B, 4>,
        rf2: Tensor<B, 4>,
        rf3: Tensor<B, 4>,
    ) -> Result<(Tensor<B, 4>, Tensor<B, 4>, Tensor<B, 4>)> {
        let o3 = self.levels[2].forward(rf3, None)?;
        let o2 = self.levels[1].forward(rf2, Some(&o3))?;
        let o1 = self.levels[0].forward(rf1, Some(&o2))?;
        Ok((o1, o2, o3))
    }
}
