//! Command-line interface binding the modules into reproducible
//! experiments: `train`, `eval`, `synth`, `params`, and `compare`.
//!
//! Exit codes: 0 success, 1 runtime error (printed as `error: ...`),
//! 2 usage error. `--json` switches to machine-readable output. Config files
//! resolve from `--config`, then the `MDVIT_CONFIG` environment variable,
//! then documented defaults; `--seed` overrides the configured seed.

use crate::checkpoint::Checkpoint;
use crate::config::{self, ModelConfig, Paradigm, TrainConfig, CONFIG_ENV_VAR, DEFAULT_SEED};
use crate::data::{load_root, make_synthetic, write_datasets, DomainDataset, SyntheticOptions};
use crate::error::{MdvitError, Result};
use crate::evaluator::{self, compare_paradigms, evaluate, EvalReport};
use crate::model::{Mdvit, ParamRole};
use crate::trainer::{train, TrainOptions};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "mdvit",
    version,
    about = "Multi-domain vision-transformer segmentation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train under one paradigm and write checkpoints plus logs
    Train(TrainArgs),
    /// Evaluate a checkpoint on a held-out fold
    Eval(EvalArgs),
    /// Generate the synthetic multi-domain benchmark on disk
    Synth(SynthArgs),
    /// Print the parameter audit for a config
    Params(ParamsArgs),
    /// Compare evaluation reports and flag negative transfer
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Config file (flat key=value); falls back to $MDVIT_CONFIG, then defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root directory with one subdirectory per domain
    #[arg(long)]
    data: PathBuf,
    /// Paradigm override: st, jt, or mat
    #[arg(long)]
    paradigm: Option<String>,
    /// Output directory for checkpoints and JSONL logs
    #[arg(long)]
    out: PathBuf,
    /// Cross-validation fold held out as test data
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Train on every sample, ignoring the fold split and validation holdout
    #[arg(long)]
    all_data: bool,
    /// Stop after this many optimizer steps
    #[arg(long)]
    max_steps: Option<usize>,
    /// Master seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Machine-readable JSON output
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint file to evaluate
    #[arg(long)]
    ckpt: PathBuf,
    /// Root directory with one subdirectory per domain
    #[arg(long)]
    data: PathBuf,
    /// Cross-validation fold to test on
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Output directory for the report files
    #[arg(long)]
    out: PathBuf,
    /// Paradigm tag recorded in the report (st, jt, mat, ...)
    #[arg(long, default_value = "model")]
    paradigm: String,
    /// Restrict evaluation to one domain index (e.g. for ST checkpoints)
    #[arg(long)]
    domain: Option<usize>,
    /// Seed for default fold assignment when no split.json exists
    #[arg(long)]
    seed: Option<u64>,
    /// Machine-readable JSON output
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; one subdirectory per domain is created
    #[arg(long)]
    out: PathBuf,
    /// Number of domains
    #[arg(long, default_value_t = 4)]
    domains: usize,
    /// Samples per domain
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Square image size in pixels
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Conflict mode: paired domains share appearance but label
    /// core vs ring, triggering negative transfer under joint training
    #[arg(long)]
    conflict: bool,
    /// Generator seed
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Machine-readable JSON output
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    /// Config file (flat key=value); falls back to $MDVIT_CONFIG, then defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Machine-readable JSON output
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Evaluation report JSON files (one per paradigm; st and jt required)
    #[arg(long, required = true, num_args = 1..)]
    reports: Vec<PathBuf>,
    /// NKT margin in Dice points (percent scale)
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    /// Machine-readable JSON output
    #[arg(long)]
    json: bool,
}

/// Parse and execute; returns the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed;
            // anything else is a usage error.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Params(a) => cmd_params(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve_config(path: &Option<PathBuf>) -> Result<(ModelConfig, TrainConfig)> {
    match path {
        Some(p) => config::load_config(p),
        None => match std::env::var_os(CONFIG_ENV_VAR) {
            Some(p) => config::load_config(PathBuf::from(p)),
            None => Ok((ModelConfig::default(), TrainConfig::default())),
        },
    }
}

fn print_banner(model: &ModelConfig, train_cfg: &TrainConfig) {
    println!("# effective config");
    print!("{}", config::serialize_config(model, train_cfg));
    println!("# end config");
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (model_cfg, mut train_cfg) = resolve_config(&a.config)?;
    if let Some(p) = &a.paradigm {
        train_cfg.paradigm = Paradigm::parse(p)?;
    }
    if let Some(s) = a.seed {
        train_cfg.seed = s;
    }
    let datasets = load_root(&a.data, model_cfg.image_size, train_cfg.seed)?;
    if !a.json {
        print_banner(&model_cfg, &train_cfg);
    }
    let opts = TrainOptions {
        fold: (!a.all_data).then_some(a.fold),
        out_dir: Some(a.out.clone()),
        max_steps: a.max_steps,
        val_fraction: if a.all_data { 0.0 } else { 0.1 },
        verbose: !a.json,
    };
    let outcome = train::<f32>(&datasets, &model_cfg, &train_cfg, &opts)?;
    if a.json {
        let payload = serde_json::json!({
            "config": config::serialize_config(&model_cfg, &train_cfg),
            "report": outcome.report,
        });
        println!("{}", serde_json::to_string_pretty(&payload)?);
    } else {
        for run in &outcome.report.runs {
            println!("[{}] finished after {} steps", run.label, run.steps);
            for c in &run.checkpoints {
                println!("  wrote {}", c.display());
            }
        }
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model: Mdvit<f32> = ckpt.restore()?;
    let datasets = load_root(
        &a.data,
        model.config.image_size,
        a.seed.unwrap_or(DEFAULT_SEED),
    )?;
    let refs: Vec<&DomainDataset> = match a.domain {
        Some(m) => {
            let ds = datasets.get(m).ok_or_else(|| {
                MdvitError::config(format!(
                    "--domain {m} out of range ({} domains found)",
                    datasets.len()
                ))
            })?;
            vec![ds]
        }
        None => datasets.iter().collect(),
    };
    let report = evaluate(&model, &refs, a.fold, &a.paradigm)?;
    let stem = format!("eval_{}_fold{}", a.paradigm, a.fold);
    evaluator::write_report(&report, &a.out, &stem)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!(
            "checkpoint {} ({} params)",
            a.ckpt.display(),
            report.param_count
        );
        print!("{}", evaluator::report_table(&report));
        println!("wrote {}/{stem}.{{txt,csv,json}}", a.out.display());
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let opts = SyntheticOptions {
        num_domains: a.domains,
        n_per_domain: a.n,
        size: a.size,
        conflict: a.conflict,
        seed: a.seed,
    };
    let datasets = make_synthetic(&opts);
    write_datasets(&a.out, &datasets)?;
    if a.json {
        let payload = serde_json::json!({
            "out": a.out,
            "domains": a.domains,
            "n_per_domain": a.n,
            "size": a.size,
            "conflict": a.conflict,
            "seed": a.seed,
        });
        println!("{}", serde_json::to_string_pretty(&payload)?);
    } else {
        println!("# effective synth options");
        println!("domains={}", a.domains);
        println!("n={}", a.n);
        println!("size={}", a.size);
        println!("conflict={}", a.conflict);
        println!("seed={}", a.seed);
        println!("# end options");
        for ds in &datasets {
            println!(
                "wrote {}/{} ({} samples)",
                a.out.display(),
                ds.name,
                ds.len()
            );
        }
    }
    Ok(())
}

fn cmd_params(a: ParamsArgs) -> Result<()> {
    let (model_cfg, train_cfg) = resolve_config(&a.config)?;
    let mut base_cfg = model_cfg.clone();
    base_cfg.da_enabled = false;
    base_cfg.mkd_enabled = false;

    let base: Mdvit<f32> = Mdvit::new(&base_cfg, 0);
    let full: Mdvit<f32> = Mdvit::new(&model_cfg, 0);
    let base_inference = base.count_parameters(ParamRole::Inference);
    let mdvit_inference = full.count_parameters(ParamRole::Inference);
    let da = full.count_da_parameters();
    let per_peer = if model_cfg.mkd_enabled {
        full.count_parameters(ParamRole::Peer)
    } else {
        0
    };
    let training_total = full.count_parameters(ParamRole::TrainingTotal);

    if a.json {
        let payload = serde_json::json!({
            "num_domains": model_cfg.num_domains,
            "base_inference": base_inference,
            "mdvit_inference": mdvit_inference,
            "da_parameters": da,
            "per_peer": per_peer,
            "training_total": training_total,
        });
        println!("{}", serde_json::to_string_pretty(&payload)?);
    } else {
        print_banner(&model_cfg, &train_cfg);
        let row = |label: &str, count: usize| {
            println!("{label:<28} {count:>12} ({:.3}M)", count as f64 / 1e6);
        };
        row("BASE inference", base_inference);
        row(
            &format!("MDViT inference (M={})", model_cfg.num_domains),
            mdvit_inference,
        );
        row("  of which domain adapters", da);
        row("single auxiliary peer", per_peer);
        row("MAT training total", training_total);
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let reports: Result<Vec<EvalReport>> = a
        .reports
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| {
                MdvitError::data(format!("cannot read report '{}': {e}", p.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| MdvitError::data(format!("bad report '{}': {e}", p.display())))
        })
        .collect();
    let cmp = compare_paradigms(&reports?, a.margin)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&cmp)?);
    } else {
        print!("{}", evaluator::comparison_table(&cmp));
    }
    Ok(())
}
