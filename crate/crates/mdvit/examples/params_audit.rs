//! Parameter audit: builds BASE and MDViT at the default configuration and
//! prints the counts the paper reports in Table 2 (BASE 27.8M, MDViT 28.5M,
//! peers 1.6M each).
//!
//! Run with: cargo run --release --example params_audit

use mdvit::config::ModelConfig;
use mdvit::model::{Mdvit, ParamRole};

fn main() {
    let base_cfg = ModelConfig {
        da_enabled: false,
        mkd_enabled: false,
        ..ModelConfig::default()
    };
    let base: Mdvit<f32> = Mdvit::new(&base_cfg, 0);

    let mdvit_cfg = ModelConfig::default();
    let model: Mdvit<f32> = Mdvit::new(&mdvit_cfg, 0);

    let m = 1e6;
    println!("role                          parameters        millions");
    println!(
        "BASE inference                {:>12}    {:>9.3}M",
        base.count_parameters(ParamRole::Inference),
        base.count_parameters(ParamRole::Inference) as f64 / m
    );
    println!(
        "MDViT (M=4) inference         {:>12}    {:>9.3}M",
        model.count_parameters(ParamRole::Inference),
        model.count_parameters(ParamRole::Inference) as f64 / m
    );
    println!(
        "  of which domain adapters    {:>12}    {:>9.3}M",
        model.count_da_parameters(),
        model.count_da_parameters() as f64 / m
    );
    println!(
        "single auxiliary peer         {:>12}    {:>9.3}M",
        model.count_parameters(ParamRole::Peer),
        model.count_parameters(ParamRole::Peer) as f64 / m
    );
    println!(
        "MAT training total            {:>12}    {:>9.3}M",
        model.count_parameters(ParamRole::TrainingTotal),
        model.count_parameters(ParamRole::TrainingTotal) as f64 / m
    );
}
