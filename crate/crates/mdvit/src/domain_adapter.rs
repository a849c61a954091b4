//! Domain Adapter: embed a one-hot domain label and produce per-head,
//! per-channel attention weights that calibrate the factorized MHSA output.
//!
//! For a label m in R^M, the adapter computes d = relu(E m) in R^{K/r},
//! per-head logits W^h d in R^K, and softmax-normalizes across heads
//! independently for every channel, so the weights for each channel sum to 1
//! over heads. The softmax output node is flagged as a gradient barrier: a
//! backward pass in `BlockBarriers` mode leaves every adapter parameter
//! without gradient while all other paths stay live (the stop-gradient rule
//! for the peer segmentation losses).

use crate::autodiff::Var;
use crate::nn::{normal, zeros, Forward, Linear, LINEAR_STD};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use rand::Rng;

pub struct DomainAdapter {
    /// Embedding E: (M, K/r) weight plus bias, followed by ReLU.
    pub embed: Linear,
    /// Head maps, stored stacked as (H, K/r, K); no bias (softmax
    /// shift-invariance would make a shared bias redundant).
    pub heads: ParamId,
    pub num_heads: usize,
    pub head_dim: usize,
    pub da_dim: usize,
}

impl DomainAdapter {
    /// `head_dim` is K = C / H; the reduced dim is floor(K / r), >= 1.
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        num_domains: usize,
        num_heads: usize,
        head_dim: usize,
        reduction: usize,
    ) -> Self {
        let da_dim = head_dim / reduction;
        assert!(da_dim >= 1, "DA reduced dim floor(K/r) must be >= 1");
        let embed_w = ps.add(
            format!("{name}.embed.weight"),
            normal(rng, &[num_domains, da_dim], LINEAR_STD),
            true,
        );
        let embed_b = ps.add(format!("{name}.embed.bias"), zeros(&[da_dim]), false);
        let heads = ps.add(
            format!("{name}.heads.weight"),
            normal(rng, &[num_heads, da_dim, head_dim], LINEAR_STD),
            true,
        );
        DomainAdapter {
            embed: Linear {
                w: embed_w,
                b: Some(embed_b),
            },
            heads,
            num_heads,
            head_dim,
            da_dim,
        }
    }

    /// Domain-aware vector d = relu(E m): `(B, M) -> (B, K/r)`.
    pub fn embed_domain<T: Scalar>(&self, f: &mut Forward<T>, one_hot: Var) -> Var {
        let d = self.embed.forward(f, one_hot);
        f.tape.relu(d)
    }

    /// Head-attention weights a: `(B, M) -> (B, H, K)`, softmax across the
    /// head axis per channel. The returned node is a gradient barrier.
    pub fn head_attention<T: Scalar>(&self, f: &mut Forward<T>, one_hot: Var) -> Var {
        let d = self.embed_domain(f, one_hot);
        let heads = f.var(self.heads);
        let logits = f.tape.head_map(d, heads);
        let a = f.tape.softmax_axis(logits, 1);
        f.tape.mark_barrier(a);
        a
    }
}
