//! Auxiliary domain-specific MLP-decoder peers, used only during MAT
//! training and discarded at inference.
//!
//! Each peer reads the shared feature pyramid: every encoder feature goes
//! through a token-wise linear to `peer_hidden` channels and is bilinearly
//! upsampled to (H/4, W/4); the four maps are concatenated with the
//! universal network's final decoder feature; a fusion linear with ReLU and
//! an output linear produce one logit channel, upsampled 4x to (H, W).

use crate::autodiff::Var;
use crate::backbone::FeaturePyramid;
use crate::config::ModelConfig;
use crate::nn::{Forward, Linear};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use rand::Rng;

pub struct Peer {
    pub levels: [Linear; 4],
    pub fuse: Linear,
    pub out: Linear,
}

impl Peer {
    fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        config: &ModelConfig,
    ) -> Self {
        let c = config.encoder_channels;
        let ph = config.peer_hidden;
        let levels = [
            Linear::new(ps, rng, &format!("{name}.level1"), c[0], ph),
            Linear::new(ps, rng, &format!("{name}.level2"), c[1], ph),
            Linear::new(ps, rng, &format!("{name}.level3"), c[2], ph),
            Linear::new(ps, rng, &format!("{name}.level4"), c[3], ph),
        ];
        let fuse = Linear::new(ps, rng, &format!("{name}.fuse"), 4 * ph + c[0], ph);
        let out = Linear::new(ps, rng, &format!("{name}.out"), ph, 1);
        Peer { levels, fuse, out }
    }

    /// Decode the pyramid into logits `(B, 1, H, W)`. The caller is
    /// responsible for slicing the pyramid to this peer's domain samples.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, pyramid: &FeaturePyramid) -> Var {
        let (_, (h4, w4)) = pyramid.encoder_features[0];
        let mut maps = Vec::with_capacity(5);
        for (i, &(feat, (h, w))) in pyramid.encoder_features.iter().enumerate() {
            let t = self.levels[i].forward(f, feat);
            let s = f.tape.tokens_to_spatial(t, h, w);
            let factor = h4 / h;
            let s = if factor > 1 {
                f.tape.bilinear_upsample(s, factor)
            } else {
                s
            };
            maps.push(s);
        }
        let (ff, (fh, fw)) = pyramid.final_feature;
        maps.push(f.tape.tokens_to_spatial(ff, fh, fw));

        let fused = f.tape.concat_axis1(&maps);
        let tokens = f.tape.spatial_to_tokens(fused);
        let hidden = self.fuse.forward(f, tokens);
        let hidden = f.tape.relu(hidden);
        let logits_tok = self.out.forward(f, hidden);
        let logits_low = f.tape.tokens_to_spatial(logits_tok, h4, w4);
        f.tape.bilinear_upsample(logits_low, 4)
    }
}

/// Build the M independently initialized peers, registered under
/// `peer{m}.` prefixes.
pub fn build_peers<T: Scalar, R: Rng>(
    ps: &mut ParamSet<T>,
    rng: &mut R,
    config: &ModelConfig,
) -> Vec<Peer> {
    (0..config.num_domains)
        .map(|m| Peer::new(ps, rng, &format!("peer{m}"), config))
        .collect()
}
