//! Trainer behavior: the LR schedule, AdamW updates against hand-computed
//! values, the MAT gradient composition, and end-to-end `train` runs for all
//! three paradigms.

use approx::assert_relative_eq;
use mdvit::autodiff::BackwardMode;
use mdvit::config::{ModelConfig, Paradigm, TrainConfig};
use mdvit::data::synthetic::{make_synthetic, SyntheticOptions};
use mdvit::data::{DomainBatch, Sample};
use mdvit::model::Mdvit;
use mdvit::params::ParamSet;
use mdvit::trainer::{
    build_objective, lr_at, mat_step, train, train_step, AdamW, EpochLog, TrainOptions, ADAM_BETA1,
    ADAM_BETA2, ADAM_EPS,
};
use ndarray::{ArrayD, IxDyn};

#[test]
fn lr_schedule_halves_every_step_interval() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 1e-4);
    assert_eq!(lr_at(49, &cfg), 1e-4);
    assert_eq!(lr_at(50, &cfg), 5e-5);
    assert_eq!(lr_at(99, &cfg), 5e-5);
    assert_eq!(lr_at(100, &cfg), 2.5e-5);
    assert_eq!(lr_at(199, &cfg), 1.25e-5);
}

#[test]
fn lr_schedule_respects_custom_gamma_and_step() {
    let cfg = TrainConfig {
        base_lr: 0.3,
        lr_step: 10,
        lr_gamma: 0.1,
        ..TrainConfig::default()
    };
    assert_relative_eq!(lr_at(0, &cfg), 0.3);
    assert_relative_eq!(lr_at(10, &cfg), 0.03);
    assert_relative_eq!(lr_at(25, &cfg), 0.003);
}

fn one_param_set(values: &[f64], decay: bool) -> ParamSet<f64> {
    let mut params = ParamSet::new();
    let v = ArrayD::from_shape_vec(IxDyn(&[values.len()]), values.to_vec()).unwrap();
    params.add("w", v, decay);
    params
}

#[test]
fn adamw_two_steps_match_hand_computed_update() {
    let mut params = one_param_set(&[2.0, -3.0], true);
    let wd = 0.1;
    let lr = 0.01;
    let g = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, 0.25]).unwrap();
    let mut opt = AdamW::new(&params, wd);

    // Textbook AdamW carried along by hand for the same two steps.
    let mut expect = [2.0f64, -3.0];
    let mut m = [0.0f64; 2];
    let mut v = [0.0f64; 2];
    for t in 1..=2 {
        opt.step(&mut params, |_| Some(&g), lr);
        for i in 0..2 {
            let gi = g[[i]];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = m[i] / (1.0 - ADAM_BETA1.powi(t));
            let vhat = v[i] / (1.0 - ADAM_BETA2.powi(t));
            expect[i] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + wd * expect[i]);
        }
        let (_, p) = params.iter().next().unwrap();
        for (i, &e) in expect.iter().enumerate() {
            assert_relative_eq!(p.value[[i]], e, max_relative = 1e-12);
        }
    }
}

#[test]
fn adamw_decays_only_flagged_parameters() {
    let mut params = ParamSet::new();
    let w = ArrayD::from_shape_vec(IxDyn(&[1]), vec![4.0]).unwrap();
    let b = ArrayD::from_shape_vec(IxDyn(&[1]), vec![4.0]).unwrap();
    params.add("w", w, true);
    params.add("b", b, false);
    let mut opt = AdamW::new(&params, 0.5);
    let zero = ArrayD::zeros(IxDyn(&[1]));

    // With a zero gradient the Adam direction is exactly zero, so the only
    // movement left is the decoupled decay term.
    opt.step(&mut params, |_| Some(&zero), 0.1);
    let vals: Vec<f64> = params.iter().map(|(_, p)| p.value[[0]]).collect();
    assert_eq!(vals[0], 4.0 * (1.0 - 0.1 * 0.5));
    assert_eq!(vals[1], 4.0);
}

#[test]
fn adamw_leaves_parameters_without_gradients_untouched() {
    let mut params = one_param_set(&[1.5, -0.5], true);
    let mut opt = AdamW::new(&params, 0.3);
    opt.step(&mut params, |_| None, 0.2);
    let (_, p) = params.iter().next().unwrap();
    assert_eq!(p.value[[0]], 1.5);
    assert_eq!(p.value[[1]], -0.5);
}

fn balanced_tiny_batch(seed: u64) -> (Mdvit<f64>, DomainBatch<f64>) {
    let cfg = ModelConfig::tiny();
    let model = Mdvit::new(&cfg, seed);
    let sets = make_synthetic(&SyntheticOptions {
        num_domains: 4,
        n_per_domain: 1,
        size: 32,
        conflict: false,
        seed: 11,
    });
    let refs: Vec<&Sample> = sets.iter().map(|ds| &ds.samples[0]).collect();
    (model, DomainBatch::from_samples(&refs))
}

fn is_zero_or_absent(g: Option<&ArrayD<f64>>) -> bool {
    g.is_none_or(|a| a.iter().all(|&v| v == 0.0))
}

#[test]
fn mat_composition_keeps_peer_term_away_from_da() {
    let (model, batch) = balanced_tiny_batch(21);
    let obj = build_objective(&model, &batch).unwrap();
    let fwd = &obj.forward;

    let main_only = fwd.tape.backward(obj.loss.main_term, BackwardMode::Full);
    let peer_blocked = fwd
        .tape
        .backward(obj.loss.peer_seg_term, BackwardMode::BlockBarriers);
    let total_full = fwd.tape.backward(obj.loss.total, BackwardMode::Full);
    let mut accumulated = fwd.tape.backward(obj.loss.main_term, BackwardMode::Full);
    accumulated.accumulate(
        fwd.tape
            .backward(obj.loss.peer_seg_term, BackwardMode::BlockBarriers),
    );

    let da_ids: Vec<_> = model
        .params
        .iter()
        .filter(|(_, p)| p.name.contains(".da."))
        .map(|(id, _)| id)
        .collect();
    assert!(!da_ids.is_empty());

    // Blocked peer pass: nothing reaches any DA parameter...
    for &id in &da_ids {
        assert!(is_zero_or_absent(fwd.grad(&peer_blocked, id)));
    }
    // ...so on DA parameters the accumulated MAT gradient equals the main
    // term's gradient exactly.
    for &id in &da_ids {
        assert_eq!(fwd.grad(&accumulated, id), fwd.grad(&main_only, id));
    }
    // A full backward of the total would have moved them differently.
    assert!(da_ids
        .iter()
        .any(|&id| fwd.grad(&total_full, id) != fwd.grad(&accumulated, id)));
    // The blocked pass still trains the shared encoder.
    assert!(model
        .params
        .iter()
        .filter(|(_, p)| p.name.contains("enc") && !p.name.contains(".da."))
        .any(|(id, _)| !is_zero_or_absent(fwd.grad(&peer_blocked, id))));
}

#[test]
fn mat_step_rejects_unbalanced_batches() {
    let mut cfg = ModelConfig::tiny();
    cfg.num_domains = 2;
    let mut model = Mdvit::<f64>::new(&cfg, 3);
    let mut opt = AdamW::new(&model.params, 0.0);
    let sets = make_synthetic(&SyntheticOptions {
        num_domains: 2,
        n_per_domain: 3,
        size: 32,
        conflict: false,
        seed: 9,
    });

    // Divisible overall but 3/1 across the two domains.
    let refs: Vec<&Sample> = vec![
        &sets[0].samples[0],
        &sets[0].samples[1],
        &sets[0].samples[2],
        &sets[1].samples[0],
    ];
    let batch = DomainBatch::from_samples(&refs);
    let err = mat_step(&mut model, &mut opt, &batch, 1e-3).unwrap_err();
    assert!(err.to_string().contains("unbalanced"));

    // Not divisible at all.
    let refs: Vec<&Sample> = vec![
        &sets[0].samples[0],
        &sets[0].samples[1],
        &sets[1].samples[0],
    ];
    let batch = DomainBatch::from_samples(&refs);
    assert!(mat_step(&mut model, &mut opt, &batch, 1e-3).is_err());
}

#[test]
fn repeated_steps_shrink_the_objective() {
    let mut cfg = ModelConfig::tiny();
    cfg.num_domains = 1;
    let mut model = Mdvit::<f64>::new(&cfg, 7);
    let mut opt = AdamW::new(&model.params, 0.0);
    let sets = make_synthetic(&SyntheticOptions {
        num_domains: 1,
        n_per_domain: 8,
        size: 32,
        conflict: false,
        seed: 13,
    });
    let refs: Vec<&Sample> = sets[0].samples.iter().collect();
    let batch = DomainBatch::from_samples(&refs);

    let first = train_step(&mut model, &mut opt, &batch, 1e-3)
        .unwrap()
        .total;
    let mut last = first;
    for _ in 1..200 {
        last = train_step(&mut model, &mut opt, &batch, 1e-3)
            .unwrap()
            .total;
    }
    assert!(
        last < 0.25 * first,
        "loss should fall below a quarter of its start: first {first:.4}, last {last:.4}"
    );
}

fn small_train_cfg(paradigm: Paradigm) -> TrainConfig {
    TrainConfig {
        paradigm,
        epochs: 2,
        batch_size: 4,
        base_lr: 1e-3,
        seed: 5,
        augment: false,
        ..TrainConfig::default()
    }
}

fn two_domain_setup() -> (Vec<mdvit::data::DomainDataset>, ModelConfig) {
    let sets = make_synthetic(&SyntheticOptions {
        num_domains: 2,
        n_per_domain: 6,
        size: 32,
        conflict: false,
        seed: 31,
    });
    let mut cfg = ModelConfig::tiny();
    cfg.num_domains = 2;
    (sets, cfg)
}

#[test]
fn mat_train_writes_checkpoints_and_parsable_logs() {
    let (sets, model_cfg) = two_domain_setup();
    let train_cfg = small_train_cfg(Paradigm::Mat);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        fold: Some(0),
        out_dir: Some(dir.path().to_path_buf()),
        max_steps: None,
        val_fraction: 0.34,
        verbose: false,
    };
    let out = train::<f64>(&sets, &model_cfg, &train_cfg, &opts).unwrap();

    assert_eq!(out.models.len(), 1);
    assert_eq!(out.report.runs.len(), 1);
    let run = &out.report.runs[0];
    assert_eq!(run.label, "mat");
    assert_eq!(run.epochs.len(), 2);
    assert!(run.best_val_dice.is_some());
    for path in &run.checkpoints {
        assert!(path.exists(), "{} missing", path.display());
    }
    for name in ["mat_best.ckpt", "mat_final.ckpt", "mat_training.ckpt"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }

    let log = std::fs::read_to_string(dir.path().join("mat_log.jsonl")).unwrap();
    let entries: Vec<EpochLog> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0].epoch, 0);
    assert_eq!(entries[1].epoch, 1);
    assert_eq!(entries[0].val_dice.len(), 2);
    assert_eq!(entries[0].lr, 1e-3);

    // The inference snapshot restores without peers.
    let ckpt = mdvit::checkpoint::Checkpoint::load(dir.path().join("mat_final.ckpt")).unwrap();
    assert!(ckpt.tensors.iter().all(|(n, _)| !n.starts_with("peer")));
}

#[test]
fn st_trains_one_base_model_per_domain() {
    let (sets, model_cfg) = two_domain_setup();
    let train_cfg = small_train_cfg(Paradigm::St);
    let opts = TrainOptions {
        fold: Some(0),
        out_dir: None,
        max_steps: Some(1),
        val_fraction: 0.0,
        verbose: false,
    };
    let out = train::<f64>(&sets, &model_cfg, &train_cfg, &opts).unwrap();
    assert_eq!(out.models.len(), 2);
    assert_eq!(out.report.runs[0].label, "st_domain0");
    assert_eq!(out.report.runs[1].label, "st_domain1");
    for model in &out.models {
        assert!(!model.config.da_enabled);
        assert!(!model.config.mkd_enabled);
        assert!(model
            .params
            .iter()
            .all(|(_, p)| !p.name.starts_with("peer")));
    }
}

#[test]
fn jt_trains_a_single_base_model() {
    let (sets, model_cfg) = two_domain_setup();
    let train_cfg = small_train_cfg(Paradigm::Jt);
    let opts = TrainOptions {
        fold: Some(0),
        out_dir: None,
        max_steps: Some(2),
        val_fraction: 0.0,
        verbose: false,
    };
    let out = train::<f64>(&sets, &model_cfg, &train_cfg, &opts).unwrap();
    assert_eq!(out.models.len(), 1);
    assert_eq!(out.report.runs[0].label, "jt");
    assert!(out.models[0]
        .params
        .iter()
        .all(|(_, p)| !p.name.contains(".da.")));
}

#[test]
fn max_steps_caps_the_run() {
    let (sets, model_cfg) = two_domain_setup();
    let mut train_cfg = small_train_cfg(Paradigm::Mat);
    train_cfg.epochs = 10;
    let opts = TrainOptions {
        fold: Some(0),
        out_dir: None,
        max_steps: Some(3),
        val_fraction: 0.0,
        verbose: false,
    };
    let out = train::<f64>(&sets, &model_cfg, &train_cfg, &opts).unwrap();
    assert_eq!(out.report.runs[0].steps, 3);
}

#[test]
fn train_rejects_mismatched_dataset_count() {
    let (sets, mut model_cfg) = two_domain_setup();
    model_cfg.num_domains = 4;
    let train_cfg = small_train_cfg(Paradigm::Mat);
    let opts = TrainOptions {
        fold: Some(0),
        out_dir: None,
        max_steps: Some(1),
        val_fraction: 0.0,
        verbose: false,
    };
    assert!(train::<f64>(&sets, &model_cfg, &train_cfg, &opts).is_err());
}
