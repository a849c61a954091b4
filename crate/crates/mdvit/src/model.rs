//! Model assembly: universal network plus optional peers over one shared
//! parameter set, and the parameter audit.

use crate::aux_peers::{build_peers, Peer};
use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::Forward;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which subset of parameters a count refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// The universal network (stem, blocks, bridge, head, DA).
    Universal,
    /// A single auxiliary peer.
    Peer,
    /// Universal + all peers, as optimized during MAT training.
    TrainingTotal,
    /// What an inference checkpoint retains: the universal network only.
    Inference,
}

pub struct Mdvit<T: Scalar> {
    pub params: ParamSet<T>,
    pub backbone: Backbone,
    pub peers: Vec<Peer>,
    pub config: ModelConfig,
}

impl<T: Scalar> Mdvit<T> {
    /// Build and initialize all parameters deterministically from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbone = Backbone::new(&mut params, &mut rng, config);
        let peers = if config.mkd_enabled {
            build_peers(&mut params, &mut rng, config)
        } else {
            Vec::new()
        };
        Mdvit {
            params,
            backbone,
            peers,
            config: config.clone(),
        }
    }

    /// Exact trainable-parameter count for the requested role.
    pub fn count_parameters(&self, role: ParamRole) -> usize {
        match role {
            ParamRole::Universal | ParamRole::Inference => {
                self.params.scalar_count_with_prefix("backbone.")
            }
            ParamRole::Peer => self.params.scalar_count_with_prefix("peer0."),
            ParamRole::TrainingTotal => self.params.scalar_count(),
        }
    }

    /// Count of domain-adapter parameters (embed + head maps, all layers).
    pub fn count_da_parameters(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.name.contains(".da."))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Evaluation-mode forward: sigmoid probabilities `(B, 1, H, W)` of the
    /// universal network. `domains` gives each sample's index for the
    /// one-hot label; it is ignored when DA is off.
    pub fn predict(&self, images: &ArrayD<T>, domains: &[usize]) -> Result<ArrayD<T>> {
        let mut f = Forward::new(&self.params);
        let img = f.input(images.clone());
        let domain = if self.config.da_enabled {
            let b = images.shape()[0];
            assert_eq!(b, domains.len(), "one domain index per sample");
            let mut oh = ArrayD::<T>::zeros(IxDyn(&[b, self.config.num_domains]));
            for (i, &d) in domains.iter().enumerate() {
                assert!(d < self.config.num_domains, "domain index out of range");
                oh[[i, d]] = T::one();
            }
            Some(f.input(oh))
        } else {
            None
        };
        let (logits, _) = self.backbone.forward(&mut f, img, domain)?;
        let probs = f.tape.sigmoid(logits);
        Ok(f.tape.value(probs).clone())
    }

    /// Parameter names belonging to the domain adapters.
    pub fn da_parameter_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.name.contains(".da."))
            .map(|(_, p)| p.name.clone())
            .collect()
    }
}

/// Closed-form DA parameter count per attention layer:
/// M*(K/r) + K/r (embed with bias) + H*K*(K/r) (head maps).
pub fn da_params_per_layer(m: usize, heads: usize, k: usize, r: usize) -> usize {
    let d = k / r;
    m * d + d + heads * k * d
}
