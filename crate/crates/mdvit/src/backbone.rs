//! The universal network: convolutional stem, four encoding and four
//! decoding transformer blocks with factorized MHSA, a two-layer CNN bridge,
//! U-Net-style skip connections, and the segmentation head.
//!
//! Encoder block i runs at spatial (H/2^{i+1}, W/2^{i+1}) with channels C_i.
//! The decoder mirrors the channels in reverse: block 5 fuses the bridge
//! output with the block-4 skip at H/32, and blocks 6-8 are each preceded by
//! 2x bilinear upsampling and concatenation with the mirrored skip, ending at
//! H/4 with C_1 channels. The head is a 1x1 convolution to one logit channel
//! followed by 4x bilinear upsampling back to (H, W).

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::domain_adapter::DomainAdapter;
use crate::error::{MdvitError, Result};
use crate::nn::{ChannelNorm, Conv2d, Depthwise3x3, Forward, Linear, Mlp};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use rand::Rng;

/// MLP expansion factor inside every transformer layer.
pub const MLP_EXPANSION: usize = 4;

/// Multi-level features handed to the auxiliary peers: the four encoder
/// block outputs plus the final decoder feature, all as token maps with
/// their spatial extents.
pub struct FeaturePyramid {
    pub encoder_features: [(Var, (usize, usize)); 4],
    /// Output of decoding block 8 at (H/4, W/4) with C_1 channels.
    pub final_feature: (Var, (usize, usize)),
}

/// Factorized multi-head self-attention with optional DA calibration:
/// out = (q / sqrt(K)) (softmax_tokens(k)^T v), linear in token count.
pub struct AttentionLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub da: Option<DomainAdapter>,
    pub heads: usize,
}

impl AttentionLayer {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        heads: usize,
        da: Option<&ModelConfig>,
    ) -> Self {
        let da = da.map(|cfg| {
            DomainAdapter::new(
                ps,
                rng,
                &format!("{name}.da"),
                cfg.num_domains,
                heads,
                channels / heads,
                cfg.da_reduction,
            )
        });
        AttentionLayer {
            q: Linear::new(ps, rng, &format!("{name}.q"), channels, channels),
            k: Linear::new(ps, rng, &format!("{name}.k"), channels, channels),
            v: Linear::new(ps, rng, &format!("{name}.v"), channels, channels),
            proj: Linear::new(ps, rng, &format!("{name}.proj"), channels, channels),
            da,
            heads,
        }
    }

    /// `x` is a token map `(B, N, C)`; `domain` the one-hot batch `(B, M)`,
    /// required iff the layer carries a DA.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var, domain: Option<Var>) -> Var {
        let c = f.tape.value(x).shape()[2];
        let k_dim = c / self.heads;

        let q = self.q.forward(f, x);
        let k = self.k.forward(f, x);
        let v = self.v.forward(f, x);
        let q = f.tape.split_heads(q, self.heads);
        let k = f.tape.split_heads(k, self.heads);
        let v = f.tape.split_heads(v, self.heads);

        // Context (B, H, K, K) = softmax_tokens(k)^T v, then u = (q/sqrt(K)) ctx.
        let k_soft = f.tape.softmax_axis(k, 2);
        let ctx = f.tape.bmm(k_soft, v, true);
        let q_scaled = f.tape.scale(q, T::from_f64(1.0 / (k_dim as f64).sqrt()));
        let mut u = f.tape.bmm(q_scaled, ctx, false);

        if let Some(da) = &self.da {
            let domain = domain.expect("DA-enabled attention layer needs a domain label batch");
            let a = da.head_attention(f, domain);
            u = f.tape.calibrate(u, a);
        }
        let merged = f.tape.merge_heads(u);
        self.proj.forward(f, merged)
    }
}

/// One pre-norm transformer layer:
/// position encoding -> attention -> residual -> MLP -> residual.
pub struct TransformerLayer {
    pub cpe: Depthwise3x3,
    pub ln1: ChannelNorm,
    pub attn: AttentionLayer,
    pub ln2: ChannelNorm,
    pub mlp: Mlp,
}

impl TransformerLayer {
    fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        heads: usize,
        da: Option<&ModelConfig>,
    ) -> Self {
        TransformerLayer {
            cpe: Depthwise3x3::new(ps, rng, &format!("{name}.cpe"), channels, 1),
            ln1: ChannelNorm::new(ps, &format!("{name}.ln1"), channels),
            attn: AttentionLayer::new(ps, rng, &format!("{name}.attn"), channels, heads, da),
            ln2: ChannelNorm::new(ps, &format!("{name}.ln2"), channels),
            mlp: Mlp::new(ps, rng, &format!("{name}.mlp"), channels, MLP_EXPANSION),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        f: &mut Forward<T>,
        x: Var,
        spatial: (usize, usize),
        domain: Option<Var>,
    ) -> Var {
        // Depthwise-conv position encoding, added residually on the spatial map.
        let xs = f.tape.tokens_to_spatial(x, spatial.0, spatial.1);
        let pe = self.cpe.forward(f, xs);
        let xs = f.tape.add(xs, pe);
        let x = f.tape.spatial_to_tokens(xs);

        let normed = self.ln1.forward_tokens(f, x);
        let attn_out = self.attn.forward(f, normed, domain);
        let x = f.tape.add(x, attn_out);

        let normed = self.ln2.forward_tokens(f, x);
        let mlp_out = self.mlp.forward(f, normed);
        f.tape.add(x, mlp_out)
    }
}

/// Patch embedding (depthwise-separable 3x3) followed by L_i transformer
/// layers.
pub struct TransformerBlock {
    pub embed_dw: Depthwise3x3,
    pub embed_pw: Linear,
    pub embed_norm: ChannelNorm,
    pub layers: Vec<TransformerLayer>,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        downsample: bool,
        num_layers: usize,
        heads: usize,
        da: Option<&ModelConfig>,
    ) -> Self {
        let stride = if downsample { 2 } else { 1 };
        TransformerBlock {
            embed_dw: Depthwise3x3::new(ps, rng, &format!("{name}.embed.dw"), in_channels, stride),
            embed_pw: Linear::new(
                ps,
                rng,
                &format!("{name}.embed.pw"),
                in_channels,
                out_channels,
            ),
            embed_norm: ChannelNorm::new(ps, &format!("{name}.embed.norm"), out_channels),
            layers: (0..num_layers)
                .map(|l| {
                    TransformerLayer::new(
                        ps,
                        rng,
                        &format!("{name}.layer{l}"),
                        out_channels,
                        heads,
                        da,
                    )
                })
                .collect(),
        }
    }

    /// Input is a spatial map; output is a token map plus its spatial extent.
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Forward<T>,
        x: Var,
        domain: Option<Var>,
    ) -> (Var, (usize, usize)) {
        let x = self.embed_dw.forward(f, x);
        let shape = f.tape.value(x).shape().to_vec();
        let spatial = (shape[2], shape[3]);
        let t = f.tape.spatial_to_tokens(x);
        let t = self.embed_pw.forward(f, t);
        let mut t = self.embed_norm.forward_tokens(f, t);
        for layer in &self.layers {
            t = layer.forward(f, t, spatial, domain);
        }
        (t, spatial)
    }
}

struct ConvNorm {
    conv: Conv2d,
    norm: ChannelNorm,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvNorm {
            conv: Conv2d::new(
                ps,
                rng,
                &format!("{name}.conv"),
                cin,
                cout,
                kernel,
                stride,
                pad,
            ),
            norm: ChannelNorm::new(ps, &format!("{name}.norm"), cout),
        }
    }

    fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Var {
        let x = self.conv.forward(f, x);
        let x = self.norm.forward_spatial(f, x);
        f.tape.relu(x)
    }
}

/// The full universal network.
pub struct Backbone {
    stem1: ConvNorm,
    stem2: ConvNorm,
    encoder: Vec<TransformerBlock>,
    bridge1: ConvNorm,
    bridge2: ConvNorm,
    decoder: Vec<TransformerBlock>,
    head: Conv2d,
    pub config: ModelConfig,
}

impl Backbone {
    /// Register all universal-network parameters under the `backbone.` prefix.
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamSet<T>, rng: &mut R, config: &ModelConfig) -> Self {
        let c = config.encoder_channels;
        let heads = config.num_heads;
        let da = if config.da_enabled {
            Some(config)
        } else {
            None
        };

        let stem1 = ConvNorm::new(ps, rng, "backbone.stem.1", 3, c[0] / 2, 3, 2, 1);
        let stem2 = ConvNorm::new(ps, rng, "backbone.stem.2", c[0] / 2, c[0], 3, 2, 1);

        let mut encoder = Vec::new();
        for i in 0..4 {
            let cin = if i == 0 { c[0] } else { c[i - 1] };
            encoder.push(TransformerBlock::new(
                ps,
                rng,
                &format!("backbone.enc{}", i + 1),
                cin,
                c[i],
                i > 0,
                config.layers_per_block[i],
                heads,
                da,
            ));
        }

        let bridge1 = ConvNorm::new(
            ps,
            rng,
            "backbone.bridge.1",
            c[3],
            config.bridge_hidden,
            3,
            1,
            1,
        );
        let bridge2 = ConvNorm::new(
            ps,
            rng,
            "backbone.bridge.2",
            config.bridge_hidden,
            c[3],
            3,
            1,
            1,
        );

        // Decoder blocks 5..8 with mirrored channels [C4, C3, C2, C1]; block
        // i fuses (previous output, skip with the same target channels is
        // concatenated) through a stride-1 patch embedding.
        let mut decoder = Vec::new();
        let dec_out = [c[3], c[2], c[1], c[0]];
        let dec_in = [c[3] + c[3], c[3] + c[2], c[2] + c[1], c[1] + c[0]];
        for i in 0..4 {
            decoder.push(TransformerBlock::new(
                ps,
                rng,
                &format!("backbone.dec{}", i + 5),
                dec_in[i],
                dec_out[i],
                false,
                config.layers_per_block[4 + i],
                heads,
                da,
            ));
        }

        let head = Conv2d::new(ps, rng, "backbone.head", c[0], 1, 1, 1, 0);

        Backbone {
            stem1,
            stem2,
            encoder,
            bridge1,
            bridge2,
            decoder,
            head,
            config: config.clone(),
        }
    }

    /// Full pass: stem -> encoder (collect skips) -> bridge -> decoder ->
    /// head. Returns raw logits `(B, 1, H, W)` and the feature pyramid.
    ///
    /// `domain` is the one-hot label batch `(B, M)`, required iff DA is
    /// enabled.
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Forward<T>,
        image: Var,
        domain: Option<Var>,
    ) -> Result<(Var, FeaturePyramid)> {
        let shape = f.tape.value(image).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(MdvitError::shape(format!(
                "expected image batch (B, 3, H, W), got {shape:?}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(MdvitError::shape(format!(
                "image size ({h}, {w}) must be divisible by 32"
            )));
        }
        if self.config.da_enabled && domain.is_none() {
            return Err(MdvitError::contract(
                "DA is enabled but no domain label batch was provided",
            ));
        }

        // Stem to (B, C1, H/4, W/4).
        let x = self.stem1.forward(f, image);
        let x = self.stem2.forward(f, x);

        // Encoder, collecting token-map skips.
        let mut skips: Vec<(Var, (usize, usize))> = Vec::with_capacity(4);
        let mut spatial_in = x;
        for block in &self.encoder {
            let (t, sp) = block.forward(f, spatial_in, domain);
            skips.push((t, sp));
            spatial_in = f.tape.tokens_to_spatial(t, sp.0, sp.1);
        }

        // Bridge at H/32.
        let x = self.bridge1.forward(f, spatial_in);
        let x = self.bridge2.forward(f, x);

        // Decoder: block 5 fuses the bridge output with the block-4 skip at
        // H/32; blocks 6-8 upsample 2x and fuse the mirrored skips.
        let mut prev = x;
        let mut t_final = None;
        for (i, block) in self.decoder.iter().enumerate() {
            let skip_idx = 3 - i;
            let (skip_t, skip_sp) = skips[skip_idx];
            let skip_spatial = f.tape.tokens_to_spatial(skip_t, skip_sp.0, skip_sp.1);
            if i > 0 {
                prev = f.tape.bilinear_upsample(prev, 2);
            }
            let fused = f.tape.concat_axis1(&[prev, skip_spatial]);
            let (t, sp) = block.forward(f, fused, domain);
            prev = f.tape.tokens_to_spatial(t, sp.0, sp.1);
            t_final = Some((t, sp));
        }
        let final_feature = t_final.expect("decoder has four blocks");

        // Head: 1x1 conv to one logit channel, then 4x bilinear upsample.
        let logits_low = self.head.forward(f, prev);
        let logits = f.tape.bilinear_upsample(logits_low, 4);

        let pyramid = FeaturePyramid {
            encoder_features: [skips[0], skips[1], skips[2], skips[3]],
            final_feature,
        };
        Ok((logits, pyramid))
    }
}
