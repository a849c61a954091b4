//! Fixed-size property: the inference network barely grows with the number
//! of training domains.
//!
//! Builds the same architecture for M = 2 and M = 8 domains and compares
//! inference parameter counts. The only M-dependent tensors are the domain
//! embedding matrices inside each adapter (M rows of da_dim each), so the
//! difference is exactly (8 - 2) * sum of da_dim over all attention layers.
//! The peers scale with M but are dropped from inference checkpoints.
//!
//! Run with: cargo run --release --example fixed_size

use anyhow::Result;
use mdvit::checkpoint::{Checkpoint, CheckpointRole};
use mdvit::config::ModelConfig;
use mdvit::model::{Mdvit, ParamRole};

fn main() -> Result<()> {
    let mut counts = Vec::new();
    for m in [2usize, 8] {
        let mut cfg = ModelConfig::tiny();
        cfg.num_domains = m;
        let model: Mdvit<f32> = Mdvit::new(&cfg, 0);
        let ckpt = Checkpoint::from_model(&model, CheckpointRole::Inference);
        let train_ckpt = Checkpoint::from_model(&model, CheckpointRole::Training);
        println!(
            "M = {m}: inference {} scalars, training {} scalars",
            ckpt.scalar_count(),
            train_ckpt.scalar_count()
        );
        assert_eq!(
            ckpt.scalar_count(),
            model.count_parameters(ParamRole::Inference)
        );
        counts.push((cfg, ckpt.scalar_count()));
    }

    let (cfg8, n8) = &counts[1];
    let (_, n2) = &counts[0];
    let embed_rows_per_domain: usize = (1..=8)
        .map(|b| cfg8.layers_per_block[b - 1] * cfg8.da_dim(b))
        .sum();
    println!(
        "difference: {} = (8 - 2) * {embed_rows_per_domain} embedding scalars per domain",
        n8 - n2
    );
    assert_eq!(n8 - n2, 6 * embed_rows_per_domain);
    Ok(())
}
