//! The convolutional-transformer generator and the whole-image / patch /
//! pixel discriminator variants.
//!
//! Generator pipeline (defaults in [`GeneratorConfig`]):
//! conv7x7 stem -> stride-2 conv stages with instance norm + relu ->
//! flatten to tokens + 2-D positional encoding -> transformer blocks ->
//! unflatten -> stride-2 transposed-conv stages -> conv7x7 head -> sigmoid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GradGraph, Var};
use crate::nn::{
    self, add_conv, add_conv_t, add_transformer_block, positional_encoding_2d, AttentionConfig,
    Bound, ParamSet, NORM_EPS,
};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub downsample_stages: usize,
    pub transformer_blocks: usize,
    pub n_heads: usize,
    pub out_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: 1,
            base_channels: 16,
            downsample_stages: 2,
            transformer_blocks: 2,
            n_heads: 4,
            out_channels: 1,
        }
    }
}

impl GeneratorConfig {
    /// Channel width (= transformer embedding width) at the bottleneck.
    pub fn d_model(&self) -> usize {
        self.base_channels << self.downsample_stages
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.d_model(), self.n_heads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.base_channels == 0
            || self.downsample_stages == 0
            || self.transformer_blocks == 0
            || self.out_channels == 0
        {
            return Err(Error::Config("generator config fields must be positive".into()));
        }
        self.attention()?;
        if self.d_model() % 4 != 0 {
            return Err(Error::Config(format!(
                "positional encoding needs bottleneck width divisible by 4, got {}",
                self.d_model()
            )));
        }
        Ok(())
    }

    /// Spatial divisibility required of inputs.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.downsample_stages
    }
}

/// Discriminator decision granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscriminatorKind {
    WholeImage,
    Patch(usize),
    Pixel,
}

pub const PATCH_SIZES: [usize; 4] = [8, 16, 32, 70];

impl DiscriminatorKind {
    pub fn validate(&self) -> Result<()> {
        if let DiscriminatorKind::Patch(n) = self {
            if !PATCH_SIZES.contains(n) {
                return Err(Error::Config(format!(
                    "patch size {n} not in supported set {PATCH_SIZES:?}"
                )));
            }
        }
        Ok(())
    }

    /// Number of stride-2 conv layers in the patch stack: the receptive
    /// field of L such layers is 2^(L+1) - 1 ~ N.
    fn stack_depth(&self) -> usize {
        match self {
            DiscriminatorKind::Pixel => 0,
            DiscriminatorKind::WholeImage => 3,
            DiscriminatorKind::Patch(n) => (usize::BITS - n.leading_zeros()) as usize - 2,
        }
    }
}

/// Kind plus conditioning: a conditional discriminator judges the
/// channel-concatenated (image, mask) pair, an unconditional one only the
/// mask (or only the image for the CycleGAN image-side discriminator).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorSpec {
    pub kind: DiscriminatorKind,
    pub conditional: bool,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec { kind: DiscriminatorKind::Pixel, conditional: true }
    }
}

impl DiscriminatorSpec {
    pub fn in_channels(&self) -> usize {
        if self.conditional {
            2
        } else {
            1
        }
    }
}

// ---- parameter construction --------------------------------------------------

/// Register all generator parameters for `cfg`.
pub fn generator_params(cfg: &GeneratorConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    add_conv(&mut ps, "encoder.conv1", cfg.base_channels, cfg.in_channels, 7, 7);
    for stage in 0..cfg.downsample_stages {
        let c_in = cfg.base_channels << stage;
        add_conv(&mut ps, &format!("encoder.conv{}", stage + 2), c_in * 2, c_in, 3, 3);
    }
    let attn = cfg.attention()?;
    for blk in 0..cfg.transformer_blocks {
        add_transformer_block(&mut ps, &format!("transformer.block{blk}"), &attn);
    }
    for stage in 0..cfg.downsample_stages {
        let c_in = cfg.d_model() >> stage;
        add_conv_t(&mut ps, &format!("decoder.convt{}", stage + 1), c_in, c_in / 2, 3, 3);
    }
    add_conv(&mut ps, "decoder.conv_out", cfg.out_channels, cfg.base_channels, 7, 7);
    Ok(ps)
}

/// Register all discriminator parameters for `spec`.
pub fn discriminator_params(spec: &DiscriminatorSpec) -> Result<ParamSet> {
    spec.kind.validate()?;
    let mut ps = ParamSet::new();
    let c_in = spec.in_channels();
    match spec.kind {
        DiscriminatorKind::Pixel => {
            // three 1x1 convs: c_in -> 32 -> 64 -> 1
            add_conv(&mut ps, "conv1", 32, c_in, 1, 1);
            add_conv(&mut ps, "conv2", 64, 32, 1, 1);
            add_conv(&mut ps, "conv3", 1, 64, 1, 1);
        }
        DiscriminatorKind::Patch(_) | DiscriminatorKind::WholeImage => {
            let mut ch = c_in;
            for layer in 0..spec.kind.stack_depth() {
                let next = (32 << layer).min(256);
                add_conv(&mut ps, &format!("conv{}", layer + 1), next, ch, 3, 3);
                ch = next;
            }
            add_conv(&mut ps, "conv_out", 1, ch, 1, 1);
        }
    }
    Ok(ps)
}

// ---- forward passes -------------------------------------------------------------

fn conv_block(
    g: &mut GradGraph,
    x: Var,
    params: &Bound,
    prefix: &str,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = params.var(&format!("{prefix}.weight"));
    let b = params.var(&format!("{prefix}.bias"));
    let y = g.conv2d(x, w, b, stride, pad)?;
    let n = g.instance_norm(y, NORM_EPS)?;
    Ok(g.relu(n))
}

/// Map a [B, in_channels, H, W] image in [0,1] to a same-size per-pixel
/// foreground probability map in (0,1).
pub fn generator_forward(
    g: &mut GradGraph,
    image: Var,
    params: &Bound,
    cfg: &GeneratorConfig,
) -> Result<Var> {
    cfg.validate()?;
    let shape = g.value(image).shape().to_vec();
    if shape.len() != 4 || shape[1] != cfg.in_channels {
        return Err(Error::InvalidArgument {
            op: "generator_forward",
            msg: format!("expected [B,{},H,W], got {:?}", cfg.in_channels, shape),
        });
    }
    let mult = cfg.spatial_multiple();
    let (bsz, h, w) = (shape[0], shape[2], shape[3]);
    if h % mult != 0 || w % mult != 0 {
        return Err(Error::Config(format!(
            "generator input {h}x{w} must be divisible by {mult}"
        )));
    }
    g.value(image).check_finite("generator input")?;

    // encoder
    let mut x = conv_block(g, image, params, "encoder.conv1", 1, 3)?;
    for stage in 0..cfg.downsample_stages {
        x = conv_block(g, x, params, &format!("encoder.conv{}", stage + 2), 2, 1)?;
    }
    g.value(x).check_finite("generator encoder output")?;

    // transformer core over per-sample token sequences
    let d = cfg.d_model();
    let (th, tw) = (h / mult, w / mult);
    let attn = cfg.attention()?;
    let pe = g.constant(positional_encoding_2d(th, tw, d)?);
    let mut decoded = Vec::with_capacity(bsz);
    for bi in 0..bsz {
        let one = g.slice(x, 0, bi, 1)?;
        let flat = g.reshape(one, &[d, th * tw])?;
        let mut tokens = g.transpose2(flat)?;
        tokens = g.add(tokens, pe)?;
        for blk in 0..cfg.transformer_blocks {
            tokens = nn::transformer_block(g, tokens, params, &format!("transformer.block{blk}"), &attn)?;
        }
        let back = g.transpose2(tokens)?;
        decoded.push(g.reshape(back, &[1, d, th, tw])?);
    }
    let mut y = if decoded.len() == 1 { decoded[0] } else { g.concat(&decoded, 0)? };
    g.value(y).check_finite("generator transformer output")?;

    // decoder
    for stage in 0..cfg.downsample_stages {
        let w_v = params.var(&format!("decoder.convt{}.weight", stage + 1));
        let b_v = params.var(&format!("decoder.convt{}.bias", stage + 1));
        let up = g.conv2d_transpose(y, w_v, b_v, 2, 1, 1)?;
        let n = g.instance_norm(up, NORM_EPS)?;
        y = g.relu(n);
    }
    let w_out = params.var("decoder.conv_out.weight");
    let b_out = params.var("decoder.conv_out.bias");
    let logits = g.conv2d(y, w_out, b_out, 1, 3)?;
    let probs = g.sigmoid(logits);
    g.value(probs).check_finite("generator output")?;
    Ok(probs)
}

/// Score an (image, mask) pair; raw logits, no sigmoid.
///
/// Pixel: [B,1,H,W] logits. Patch(N): [B,1,H/2^L,W/2^L] with receptive field
/// ~ N per logit. WholeImage: [B,1,1,1] via spatial mean of the patch stack.
/// `cond` is the conditioning input (typically the image), `judged` the mask
/// under judgment; with `conditional` false only `judged` is seen.
pub fn discriminator_forward(
    g: &mut GradGraph,
    cond: Var,
    judged: Var,
    params: &Bound,
    spec: &DiscriminatorSpec,
) -> Result<Var> {
    spec.kind.validate()?;
    let cs = g.value(cond).shape().to_vec();
    let js = g.value(judged).shape().to_vec();
    if cs.len() != 4 || js.len() != 4 || cs != js {
        return Err(Error::ShapeMismatch { op: "discriminator_forward", left: cs, right: js });
    }
    let x = if spec.conditional { g.concat(&[cond, judged], 1)? } else { judged };

    match spec.kind {
        DiscriminatorKind::Pixel => {
            let mut y = x;
            for (i, is_last) in [(1, false), (2, false), (3, true)] {
                let w = params.var(&format!("conv{i}.weight"));
                let b = params.var(&format!("conv{i}.bias"));
                y = g.conv2d(y, w, b, 1, 0)?;
                if !is_last {
                    y = g.leaky_relu(y, LEAKY_SLOPE);
                }
            }
            Ok(y)
        }
        DiscriminatorKind::Patch(_) | DiscriminatorKind::WholeImage => {
            let depth = spec.kind.stack_depth();
            let spatial = g.value(x).shape()[2].min(g.value(x).shape()[3]);
            if spatial < (1 << depth) {
                return Err(Error::Config(format!(
                    "input spatial extent {spatial} too small for a depth-{depth} patch stack"
                )));
            }
            let mut y = x;
            for layer in 0..depth {
                let w = params.var(&format!("conv{}.weight", layer + 1));
                let b = params.var(&format!("conv{}.bias", layer + 1));
                y = g.conv2d(y, w, b, 2, 1)?;
                y = g.leaky_relu(y, LEAKY_SLOPE);
            }
            let w = params.var("conv_out.weight");
            let b = params.var("conv_out.bias");
            let logits = g.conv2d(y, w, b, 1, 0)?;
            if spec.kind == DiscriminatorKind::WholeImage {
                // per-sample spatial mean -> one logit per sample
                let bsz = g.value(logits).shape()[0];
                let mut per_sample = Vec::with_capacity(bsz);
                for bi in 0..bsz {
                    let one = g.slice(logits, 0, bi, 1)?;
                    let m = g.mean(one);
                    per_sample.push(g.reshape(m, &[1, 1, 1, 1])?);
                }
                if per_sample.len() == 1 {
                    Ok(per_sample[0])
                } else {
                    g.concat(&per_sample, 0)
                }
            } else {
                Ok(logits)
            }
        }
    }
}

/// Total element count across a parameter set.
pub fn param_count(params: &ParamSet) -> usize {
    params.param_count()
}

/// Discriminator section of the run config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// "pixel", "patch" or "whole_image".
    pub kind: String,
    /// Region size when kind = "patch".
    pub patch_size: usize,
    pub conditional: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { kind: "pixel".into(), patch_size: 16, conditional: true }
    }
}

impl DiscriminatorConfig {
    pub fn spec(&self) -> Result<DiscriminatorSpec> {
        let kind = match self.kind.as_str() {
            "pixel" => DiscriminatorKind::Pixel,
            "patch" => DiscriminatorKind::Patch(self.patch_size),
            "whole_image" => DiscriminatorKind::WholeImage,
            other => {
                return Err(Error::Config(format!(
                    "unknown discriminator kind '{other}' (pixel | patch | whole_image)"
                )))
            }
        };
        kind.validate()?;
        Ok(DiscriminatorSpec { kind, conditional: self.conditional })
    }
}

/// Model section of the run config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.spec()?;
        Ok(())
    }
}
