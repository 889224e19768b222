//! Objectives: stabilized BCE, soft dice, the vanilla-GAN loss pair and the
//! CycleGAN loss bundle.
//!
//! Both training loops are built from [`adversarial_pair`], so with the cycle
//! and supervision weights at zero the CycleGAN bundle degenerates term by
//! term (bitwise) into two independent GAN objectives.

use crate::error::Result;
use crate::graph::{GradGraph, Var};
use crate::models::{
    discriminator_forward, generator_forward, DiscriminatorSpec, GeneratorConfig,
};
use crate::nn::Bound;
use crate::tensor::Tensor;

pub const DICE_SMOOTH: f64 = 1.0;

/// Binary cross-entropy over probabilities (not logits); log inputs are
/// clamped so saturated predictions stay finite.
pub fn bce_probs(g: &mut GradGraph, probs: Var, targets: Var) -> Result<Var> {
    let log_p = g.log(probs);
    let pos = g.mul(targets, log_p)?;
    let one = g.scalar(1.0);
    let inv_p = g.sub(one, probs)?;
    let log_inv = g.log(inv_p);
    let inv_t = g.sub(one, targets)?;
    let neg = g.mul(inv_t, log_inv)?;
    let both = g.add(pos, neg)?;
    let m = g.mean(both);
    Ok(g.scale(m, -1.0))
}

/// Soft dice loss 1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s), s = 1.
pub fn dice_loss(g: &mut GradGraph, probs: Var, gt: Var) -> Result<Var> {
    let inter = g.mul(probs, gt)?;
    let inter_sum = g.sum(inter);
    let two_inter = g.scale(inter_sum, 2.0);
    let smooth = g.scalar(DICE_SMOOTH);
    let numer = g.add(two_inter, smooth)?;
    let p_sum = g.sum(probs);
    let t_sum = g.sum(gt);
    let sums = g.add(p_sum, t_sum)?;
    let denom = g.add(sums, smooth)?;
    let inv_denom = g.power(denom, -1.0);
    let ratio = g.mul(numer, inv_denom)?;
    let one = g.scalar(1.0);
    g.sub(one, ratio)
}

/// The paired-supervision term: 0.5 * bce_probs + 0.5 * dice_loss.
pub fn supervised_loss(g: &mut GradGraph, probs: Var, gt: Var) -> Result<Var> {
    let bce = bce_probs(g, probs, gt)?;
    let dice = dice_loss(g, probs, gt)?;
    let sum = g.add(bce, dice)?;
    Ok(g.scale(sum, 0.5))
}

/// Mean absolute difference (the cycle-consistency penalty).
pub fn l1_mean(g: &mut GradGraph, a: Var, b: Var) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let mag = g.abs(diff);
    Ok(g.mean(mag))
}

fn target_like(g: &mut GradGraph, reference: Var, value: f64) -> Var {
    let shape = g.value(reference).shape().to_vec();
    g.constant(Tensor::filled(&shape, value))
}

/// One discriminator's view of a real/fake pair plus the generator's
/// non-saturating adversarial term.
///
/// loss_d = 0.5 * [bce(D(cond, real), 1) + bce(D(cond, fake detached), 0)];
/// adv_g  = bce(D(cond, fake), 1). The detach keeps discriminator training
/// from reaching the generator.
pub fn adversarial_pair(
    g: &mut GradGraph,
    d_params: &Bound,
    d_spec: &DiscriminatorSpec,
    cond: Var,
    real: Var,
    fake: Var,
) -> Result<(Var, Var)> {
    let real_logits = discriminator_forward(g, cond, real, d_params, d_spec)?;
    let ones = target_like(g, real_logits, 1.0);
    let loss_real = g.bce_with_logits(real_logits, ones)?;

    let fake_detached = g.detach(fake);
    let fake_logits = discriminator_forward(g, cond, fake_detached, d_params, d_spec)?;
    let zeros = target_like(g, fake_logits, 0.0);
    let loss_fake = g.bce_with_logits(fake_logits, zeros)?;

    let total = g.add(loss_real, loss_fake)?;
    let loss_d = g.scale(total, 0.5);

    let gen_logits = discriminator_forward(g, cond, fake, d_params, d_spec)?;
    let ones_g = target_like(g, gen_logits, 1.0);
    let adv_g = g.bce_with_logits(gen_logits, ones_g)?;
    Ok((loss_d, adv_g))
}

/// Terms of the vanilla-GAN objective on one batch.
pub struct GanLossVars {
    pub loss_d: Var,
    pub loss_g: Var,
    pub adversarial: Var,
    /// Unweighted supervised term (0.5 bce + 0.5 dice).
    pub supervised: Var,
    pub prediction: Var,
}

/// Full vanilla-GAN loss pair on a single graph:
/// loss_D as in [`adversarial_pair`],
/// loss_G = adv + lambda_seg * (0.5 bce_probs + 0.5 dice).
#[allow(clippy::too_many_arguments)]
pub fn gan_losses(
    g: &mut GradGraph,
    d_params: &Bound,
    d_spec: &DiscriminatorSpec,
    g_params: &Bound,
    g_cfg: &GeneratorConfig,
    image: Var,
    gt_mask: Var,
    lambda_seg: f64,
) -> Result<GanLossVars> {
    let prediction = generator_forward(g, image, g_params, g_cfg)?;
    let (loss_d, adversarial) = adversarial_pair(g, d_params, d_spec, image, gt_mask, prediction)?;
    let supervised = supervised_loss(g, prediction, gt_mask)?;
    let weighted = g.scale(supervised, lambda_seg);
    let loss_g = g.add(adversarial, weighted)?;
    Ok(GanLossVars { loss_d, loss_g, adversarial, supervised, prediction })
}

/// Terms of the CycleGAN objective on one batch.
pub struct CycleLossVars {
    pub loss_d1: Var,
    pub loss_d2: Var,
    pub adv_g1: Var,
    pub adv_g2: Var,
    /// lambda_cyc * (|G2(G1(x)) - x| + |G1(G2(y)) - y|), already weighted.
    pub cycle: Var,
    /// Unweighted supervised term on G1's prediction.
    pub supervised: Var,
    /// Joint generator objective: adv_g1 + adv_g2 + cycle + lambda_seg * supervised.
    pub loss_g_total: Var,
    pub pred_mask: Var,
    pub pred_image: Var,
}

/// CycleGAN bundle: G1 maps image -> mask, G2 maps mask -> image. D1 judges
/// masks conditioned on the image, D2 judges images conditioned on the mask.
/// Cycle terms are L1 on both reconstruction directions; G1 additionally
/// carries the paired supervision term.
#[allow(clippy::too_many_arguments)]
pub fn cyclegan_losses(
    g: &mut GradGraph,
    d1_params: &Bound,
    d2_params: &Bound,
    d_spec: &DiscriminatorSpec,
    g1_params: &Bound,
    g2_params: &Bound,
    g_cfg: &GeneratorConfig,
    image: Var,
    gt_mask: Var,
    lambda_seg: f64,
    lambda_cyc: f64,
) -> Result<CycleLossVars> {
    let pred_mask = generator_forward(g, image, g1_params, g_cfg)?;
    let (loss_d1, adv_g1) = adversarial_pair(g, d1_params, d_spec, image, gt_mask, pred_mask)?;

    let pred_image = generator_forward(g, gt_mask, g2_params, g_cfg)?;
    let (loss_d2, adv_g2) = adversarial_pair(g, d2_params, d_spec, gt_mask, image, pred_image)?;

    let recon_image = generator_forward(g, pred_mask, g2_params, g_cfg)?;
    let recon_mask = generator_forward(g, pred_image, g1_params, g_cfg)?;
    let cyc_image = l1_mean(g, recon_image, image)?;
    let cyc_mask = l1_mean(g, recon_mask, gt_mask)?;
    let cyc_sum = g.add(cyc_image, cyc_mask)?;
    let cycle = g.scale(cyc_sum, lambda_cyc);

    let supervised = supervised_loss(g, pred_mask, gt_mask)?;
    let weighted_sup = g.scale(supervised, lambda_seg);

    let adv = g.add(adv_g1, adv_g2)?;
    let adv_cyc = g.add(adv, cycle)?;
    let loss_g_total = g.add(adv_cyc, weighted_sup)?;

    Ok(CycleLossVars {
        loss_d1,
        loss_d2,
        adv_g1,
        adv_g2,
        cycle,
        supervised,
        loss_g_total,
        pred_mask,
        pred_image,
    })
}
