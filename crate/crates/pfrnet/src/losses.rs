//! Segmentation losses: dice on the coarsest output, and the structure loss
//! (boundary-weighted BCE plus boundary-weighted IoU) on the three decoder
//! outputs. All reductions are per image first, then averaged over the
//! batch, so batch order never changes a value.

use burn::tensor::activation::sigmoid;
use burn::tensor::backend::Backend;
use burn::tensor::module::avg_pool2d;
use burn::tensor::{ElementConversion, Tensor};

use crate::blocks::resample_to;
use crate::error::{Error, Result};
use crate::network::NetworkOutputs;

/// Window of the boundary-emphasis average pool.
const WEIGHT_POOL: usize = 31;
/// Strength of the boundary emphasis.
const WEIGHT_GAIN: f64 = 5.0;
/// Smoothing added to overlap ratios so empty/empty masks stay defined.
const SMOOTH: f64 = 1.0;

fn check_pair<B: Backend>(logits: &Tensor<B, 4>, gt: &Tensor<B, 4>) -> Result<()> {
    if logits.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "logits {:?} and ground truth {:?} differ",
            logits.dims(),
            gt.dims()
        )));
    }
    if logits.dims()[1] != 1 {
        return Err(Error::shape(format!(
            "loss maps must have 1 channel, got {}",
            logits.dims()[1]
        )));
    }
    // every ground-truth value must be exactly 0 or 1
    let off_binary: f64 = (gt.clone() * (gt.clone() - 1.0))
        .abs()
        .max()
        .into_scalar()
        .elem();
    if off_binary != 0.0 {
        return Err(Error::invalid(
            "ground truth must be binary (values in {0, 1})",
        ));
    }
    Ok(())
}

fn per_image_sum<B: Backend>(x: Tensor<B, 4>) -> Tensor<B, 1> {
    let [b, c, h, w] = x.dims();
    x.reshape([b, c * h * w]).sum_dim(1).reshape([b])
}

/// Dice loss of sigmoid probabilities against a binary mask:
/// `1 - (2*sum(p*g) + 1) / (sum(p) + sum(g) + 1)`, averaged over the batch.
/// Values lie in [0, 1).
pub fn dice_loss<B: Backend>(logits: Tensor<B, 4>, gt: Tensor<B, 4>) -> Result<Tensor<B, 1>> {
    check_pair(&logits, &gt)?;
    let p = sigmoid(logits);
    let inter = per_image_sum(p.clone() * gt.clone());
    let denom = per_image_sum(p) + per_image_sum(gt);
    let dice = (inter * 2.0 + SMOOTH) / (denom + SMOOTH);
    Ok((-dice + 1.0).mean())
}

/// Boundary-emphasis weights `1 + 5 * |avgpool31(gt) - gt|` (same-padded,
/// padding counted in the average).
fn boundary_weights<B: Backend>(gt: &Tensor<B, 4>) -> Tensor<B, 4> {
    let pad = WEIGHT_POOL / 2;
    let pooled = avg_pool2d(
        gt.clone(),
        [WEIGHT_POOL, WEIGHT_POOL],
        [1, 1],
        [pad, pad],
        true,
        false,
    );
    (pooled - gt.clone()).abs() * WEIGHT_GAIN + 1.0
}

/// Numerically stable `BCE(logit, target)` per pixel:
/// `max(x, 0) - x*y + log(1 + exp(-|x|))`.
fn bce_with_logits<B: Backend>(logits: Tensor<B, 4>, gt: Tensor<B, 4>) -> Tensor<B, 4> {
    let linear = logits.clone().clamp_min(0.0) - logits.clone() * gt;
    linear + (-logits.abs()).exp().log1p()
}

/// Weighted BCE: pixel-weighted cross entropy normalised by the weight mass,
/// per image, then batch-averaged.
pub fn weighted_bce<B: Backend>(logits: Tensor<B, 4>, gt: Tensor<B, 4>) -> Result<Tensor<B, 1>> {
    check_pair(&logits, &gt)?;
    let weights = boundary_weights(&gt);
    let bce = bce_with_logits(logits, gt);
    let num = per_image_sum(weights.clone() * bce);
    let den = per_image_sum(weights);
    Ok((num / den).mean())
}

/// Weighted IoU: `1 - (sum(w*p*g) + 1) / (sum(w*(p+g-p*g)) + 1)` per image,
/// then batch-averaged. Values lie in [0, 1).
pub fn weighted_iou<B: Backend>(logits: Tensor<B, 4>, gt: Tensor<B, 4>) -> Result<Tensor<B, 1>> {
    check_pair(&logits, &gt)?;
    let weights = boundary_weights(&gt);
    let p = sigmoid(logits);
    let inter = per_image_sum(weights.clone() * p.clone() * gt.clone());
    let union = per_image_sum(weights * (p.clone() + gt.clone() - p * gt));
    let iou = (inter + SMOOTH) / (union + SMOOTH);
    Ok((-iou + 1.0).mean())
}

/// Structure loss: weighted BCE plus weighted IoU.
pub fn structure_loss<B: Backend>(logits: Tensor<B, 4>, gt: Tensor<B, 4>) -> Result<Tensor<B, 1>> {
    Ok(weighted_bce(logits.clone(), gt.clone())? + weighted_iou(logits, gt)?)
}

/// Total supervision: structure loss on each decoder output plus dice on the
/// coarsest output, every map first upsampled to the ground-truth grid.
pub fn total_loss<B: Backend>(
    outputs: &NetworkOutputs<B>,
    gt: &Tensor<B, 4>,
) -> Result<Tensor<B, 1>> {
    Ok(total_loss_terms(outputs, gt)?.total)
}

/// The individual terms of the total loss, for logging.
pub struct LossTerms<B: Backend> {
    pub structure: [Tensor<B, 1>; 3],
    pub dice: Tensor<B, 1>,
    pub total: Tensor<B, 1>,
}

pub fn total_loss_terms<B: Backend>(
    outputs: &NetworkOutputs<B>,
    gt: &Tensor<B, 4>,
) -> Result<LossTerms<B>> {
    let [_, _, h, w] = gt.dims();
    let at_gt = |o: &Tensor<B, 4>| resample_to(o.clone(), [h, w]);
    let structure = [
        structure_loss(at_gt(&outputs.o1), gt.clone())?,
        structure_loss(at_gt(&outputs.o2), gt.clone())?,
        structure_loss(at_gt(&outputs.o3), gt.clone())?,
    ];
    let dice = dice_loss(at_gt(&outputs.o4), gt.clone())?;
    let total = structure
        .iter()
        .cloned()
        .fold(dice.clone(), |acc, term| acc + term);
    Ok(LossTerms {
        structure,
        dice,
        total,
    })
}
