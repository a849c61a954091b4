//! Acceptance gate: one test per release criterion, each printing a single
//! pass/fail line through the harness. Run with
//! `cargo test --test acceptance` (all tests run sequentially on one
//! thread under the default harness when only one CPU is available; the NKT
//! trend test dominates the runtime).

use mdvit::autodiff::{BackwardMode, Tape, Var};
use mdvit::checkpoint::{Checkpoint, CheckpointRole};
use mdvit::config::{ModelConfig, Paradigm, TrainConfig};
use mdvit::data::{
    balanced_batches, make_synthetic, DomainBatch, DomainDataset, Sample, SyntheticOptions,
};
use mdvit::domain_adapter::DomainAdapter;
use mdvit::evaluator::{
    compare_paradigms, evaluate, mean_dice_on, merge_reports, overlap_counts, Comparison,
    EvalReport,
};
use mdvit::losses::{bce_loss, dice_loss, mkd_loss, seg_loss, total_loss};
use mdvit::model::{Mdvit, ParamRole};
use mdvit::nn::Forward;
use mdvit::params::ParamSet;
use mdvit::reference::{
    central_diff, check_param_gradients, dice_from_counts, dice_loss_loop, iou_from_counts,
    rel_error,
};
use mdvit::trainer::{build_objective, build_objective_with, lr_at, train, TrainOptions};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(
        IxDyn(shape),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

#[test]
fn criterion_01_parameter_audit() {
    let base_cfg = ModelConfig {
        da_enabled: false,
        mkd_enabled: false,
        ..ModelConfig::default()
    };
    let base = Mdvit::<f32>::new(&base_cfg, 0);
    let model = Mdvit::<f32>::new(&ModelConfig::default(), 0);

    let within =
        |count: usize, published: f64| (count as f64 - published).abs() <= 0.05 * published;
    assert!(
        within(base.count_parameters(ParamRole::Inference), 27.8e6),
        "BASE {} outside 27.8M +/- 5%",
        base.count_parameters(ParamRole::Inference)
    );
    assert!(
        within(model.count_parameters(ParamRole::Inference), 28.5e6),
        "MDViT {} outside 28.5M +/- 5%",
        model.count_parameters(ParamRole::Inference)
    );
    assert!(
        within(model.count_parameters(ParamRole::Peer), 1.6e6),
        "peer {} outside 1.6M +/- 5%",
        model.count_parameters(ParamRole::Peer)
    );
}

#[test]
fn criterion_02_da_normalization() {
    let combos = [(4usize, 2usize), (4, 8), (8, 2), (8, 8), (64, 2), (64, 8)];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for draw in 0..1000u32 {
        let (k, h) = combos[draw as usize % combos.len()];
        let m = rng.gen_range(2..=8);
        let mut ps = ParamSet::<f64>::new();
        let da = DomainAdapter::new(&mut ps, &mut rng, "da", m, h, k, 2);
        // Overwrite the small init with wide random values so the softmax
        // sees varied logits.
        for (_, p) in ps.iter_mut() {
            p.value.mapv_inplace(|_| rng.gen_range(-3.0..3.0));
        }

        let b = 2;
        let mut one_hot = ArrayD::<f64>::zeros(IxDyn(&[b, m]));
        for row in 0..b {
            one_hot[[row, rng.gen_range(0..m)]] = 1.0;
        }
        let mut f = Forward::new(&ps);
        let label = f.input(one_hot);
        let a = da.head_attention(&mut f, label);
        let value = f.tape.value(a);
        assert_eq!(value.shape(), &[b, h, k]);
        for bi in 0..b {
            for c in 0..k {
                let sum: f64 = (0..h).map(|hi| value[[bi, hi, c]]).sum();
                assert!(
                    (sum - 1.0).abs() < 1e-6,
                    "draw {draw} (K={k}, H={h}): channel {c} sums to {sum}"
                );
            }
        }
    }
}

fn balanced_tiny_batch() -> (Mdvit<f64>, DomainBatch<f64>) {
    let model = Mdvit::new(&ModelConfig::tiny(), 21);
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

#[test]
fn criterion_03_stop_gradient() {
    let (model, batch) = balanced_tiny_batch();
    let obj = build_objective(&model, &batch).unwrap();
    let fwd = &obj.forward;
    let grads = fwd
        .tape
        .backward(obj.loss.peer_seg_term, BackwardMode::BlockBarriers);

    let mut da_params = 0;
    for (id, p) in model.params.iter() {
        if p.name.contains(".da.") {
            da_params += 1;
            let zero = fwd
                .grad(&grads, id)
                .is_none_or(|g| g.iter().all(|&v| v == 0.0));
            assert!(zero, "DA parameter {} received gradient", p.name);
        }
    }
    assert!(da_params > 0);
    let encoder_live = model.params.iter().any(|(id, p)| {
        p.name.contains("enc")
            && !p.name.contains(".da.")
            && fwd
                .grad(&grads, id)
                .is_some_and(|g| g.iter().any(|&v| v != 0.0))
    });
    assert!(
        encoder_live,
        "no non-DA encoder parameter received gradient"
    );
}

/// Max relative input-gradient error of a scalar objective vs central
/// differences, probing every coordinate of `x`.
fn input_grad_err(x: &ArrayD<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = build(&mut tape, xv);
    let grads = tape.backward(loss, BackwardMode::Full);
    let analytic = grads.get(xv).unwrap().clone();
    let numeric = central_diff(x, 1e-5, |probe| {
        let mut tape = Tape::new();
        let xv = tape.leaf(probe.clone());
        let loss = build(&mut tape, xv);
        tape.value(loss).sum()
    });
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_04_gradient_fidelity() {
    let shape = [2usize, 1, 4, 4];
    let target = random(&shape, 0.0, 1.0, 1).mapv(|v| f64::from(v > 0.5));
    let probs = random(&shape, 0.05, 0.95, 2);
    let logits = random(&shape, -2.0, 2.0, 3);
    let peer = random(&shape, 0.05, 0.95, 4);

    let e = input_grad_err(&probs, |tape, x| {
        let t = tape.leaf(target.clone());
        dice_loss(tape, x, t).unwrap()
    });
    assert!(e < 1e-3, "dice input gradient off by {e:.3e}");

    let e = input_grad_err(&logits, |tape, x| bce_loss(tape, x, &target).unwrap());
    assert!(e < 1e-3, "bce input gradient off by {e:.3e}");

    let e = input_grad_err(&probs, |tape, x| {
        let p = tape.leaf(peer.clone());
        mkd_loss(tape, x, p).unwrap()
    });
    assert!(e < 1e-3, "mkd input gradient off by {e:.3e}");

    // Eq. 1 total assembled from the universal logits.
    let peer_logits = random(&shape, -2.0, 2.0, 5);
    let e = input_grad_err(&logits, |tape, x| {
        let l_seg_u = seg_loss(tape, x, &target).unwrap();
        let pl = tape.leaf(peer_logits.clone());
        let l_seg_a = seg_loss(tape, pl, &target).unwrap();
        let u_probs = tape.sigmoid(x);
        let p_probs = tape.sigmoid(pl);
        let l_mkd = mkd_loss(tape, u_probs, p_probs).unwrap();
        total_loss(tape, l_seg_u, &[Some(l_seg_a)], &[Some(l_mkd)], 0.5, 0.5).total
    });
    assert!(e < 1e-3, "Eq. 1 input gradient off by {e:.3e}");

    // Full-network parameter sweep on the tiny model. Central differences
    // require probe points clear of ReLU kinks at the 1e-5 stencil, so the
    // fixture seeds are chosen to keep every sampled coordinate smooth.
    let model = Mdvit::<f64>::new(&ModelConfig::tiny(), 12);
    let sets = make_synthetic(&SyntheticOptions {
        num_domains: 4,
        n_per_domain: 1,
        size: 32,
        conflict: false,
        seed: 5,
    });
    let refs: Vec<&Sample> = sets.iter().map(|ds| &ds.samples[0]).collect();
    let batch = DomainBatch::<f64>::from_samples(&refs);
    let obj = build_objective(&model, &batch).unwrap();
    let grads = obj
        .forward
        .tape
        .backward(obj.loss.total, BackwardMode::Full);
    let analytic: Vec<ArrayD<f64>> = model
        .params
        .iter()
        .map(|(id, p)| match obj.forward.grad(&grads, id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(p.value.raw_dim()),
        })
        .collect();
    let report = check_param_gradients(
        &model.params,
        &analytic,
        |ps| {
            build_objective_with(&model, ps, &batch)
                .unwrap()
                .loss
                .bundle
                .total
        },
        1e-5,
        1e-3,
        3,
        99,
    );
    assert!(
        report.passed(),
        "{} of {} coordinates failed; worst {} at {:.3e}",
        report.failures.len(),
        report.checked,
        report.worst,
        report.max_rel_err
    );
}

#[test]
fn criterion_05_loss_identities() {
    let shape = [2usize, 1, 4, 4];

    // MKD is exactly symmetric under argument swap.
    let a = random(&shape, 0.05, 0.95, 6);
    let b = random(&shape, 0.05, 0.95, 7);
    let eval_mkd = |x: &ArrayD<f64>, y: &ArrayD<f64>| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let yv = tape.leaf(y.clone());
        let l = mkd_loss(&mut tape, xv, yv).unwrap();
        tape.value(l).sum()
    };
    assert_eq!(eval_mkd(&a, &b).to_bits(), eval_mkd(&b, &a).to_bits());

    // Eq. 1 assembles to machine precision.
    let (model, batch) = balanced_tiny_batch();
    let obj = build_objective(&model, &batch).unwrap();
    let bundle = &obj.loss.bundle;
    let recomputed = bundle.recompute_total(model.config.alpha, model.config.beta);
    assert!(rel_error(bundle.total, recomputed) < 1e-12);
    let taped = obj.forward.tape.value(obj.loss.total).sum();
    assert!(rel_error(bundle.total, taped) < 1e-12);

    // dice(x, x) saturates to zero only for binary masks; otherwise it
    // matches the smoothed closed form from the loop oracle.
    let eval_dice = |x: &ArrayD<f64>, y: &ArrayD<f64>| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let yv = tape.leaf(y.clone());
        let l = dice_loss(&mut tape, xv, yv).unwrap();
        tape.value(l).sum()
    };
    let binary = random(&shape, 0.0, 1.0, 8).mapv(|v| f64::from(v > 0.5));
    assert_eq!(eval_dice(&binary, &binary), 0.0);
    let soft = random(&shape, 0.1, 0.9, 9);
    let got = eval_dice(&soft, &soft);
    assert!(got > 0.0, "soft self-dice must stay positive");
    assert!(rel_error(got, dice_loss_loop(&soft, &soft)) < 1e-12);
}

#[test]
fn criterion_06_metric_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for case in 0..1000 {
        let n = rng.gen_range(1..64);
        let pred: ArrayD<u8> =
            ArrayD::from_shape_vec(IxDyn(&[n]), (0..n).map(|_| rng.gen_range(0..=1)).collect())
                .unwrap();
        let target: ArrayD<u8> =
            ArrayD::from_shape_vec(IxDyn(&[n]), (0..n).map(|_| rng.gen_range(0..=1)).collect())
                .unwrap();
        let (inter, p, t) = overlap_counts(&pred, &target).unwrap();
        let dice = dice_from_counts(inter, p, t);
        let iou = iou_from_counts(inter, p, t);
        // Exact on the integer counts: Dice is the rational 2I/(P+T) and
        // IOU is I/U with U = P+T-I, so each float must be the single
        // correctly rounded division of those integers (all counts fit in
        // f64 exactly at this size). The identity Dice = 2 IOU / (1 + IOU)
        // shares the rational 2I/(P+T), leaving only rounding noise in the
        // float composition.
        let union = p + t - inter;
        if p + t > 0 {
            let exact = 2.0 * inter as f64 / (p + t) as f64;
            assert_eq!(dice.to_bits(), exact.to_bits(), "case {case}");
        }
        if union > 0 {
            let exact = inter as f64 / union as f64;
            assert_eq!(iou.to_bits(), exact.to_bits(), "case {case}");
        }
        assert!(
            (dice - 2.0 * iou / (1.0 + iou)).abs() < 1e-12,
            "case {case}: dice {dice} vs iou identity"
        );
    }

    // Empty-vs-empty pins the boundary convention: both metrics report 1.0
    // and the identity still holds exactly.
    let dice = dice_from_counts(0, 0, 0);
    let iou = iou_from_counts(0, 0, 0);
    assert_eq!(dice, 1.0);
    assert_eq!(iou, 1.0);
    assert_eq!(dice, 2.0 * iou / (1.0 + iou));
}

#[test]
fn criterion_07_overfit_sanity() {
    let datasets = make_synthetic(&SyntheticOptions {
        num_domains: 4,
        n_per_domain: 8,
        size: 64,
        conflict: false,
        seed: 17,
    });
    let mut model_cfg = ModelConfig::tiny();
    model_cfg.image_size = (64, 64);
    let train_cfg = TrainConfig {
        paradigm: Paradigm::Mat,
        epochs: 150,
        batch_size: 16,
        base_lr: 1e-3,
        lr_step: 1000,
        augment: false,
        seed: 17,
        ..TrainConfig::default()
    };
    let opts = TrainOptions {
        fold: None,
        out_dir: None,
        max_steps: Some(300),
        val_fraction: 0.0,
        verbose: false,
    };
    let outcome = train::<f32>(&datasets, &model_cfg, &train_cfg, &opts).unwrap();
    assert!(outcome.report.runs[0].steps <= 300);
    for ds in &datasets {
        let all: Vec<usize> = (0..ds.len()).collect();
        let dice = mean_dice_on(&outcome.models[0], ds, &all).unwrap();
        assert!(dice >= 0.95, "{} train Dice {dice:.4} < 0.95", ds.name);
    }
}

fn nkt_train_cfg(paradigm: Paradigm, seed: u64) -> TrainConfig {
    TrainConfig {
        paradigm,
        epochs: 60,
        batch_size: 16,
        base_lr: 1e-3,
        lr_step: 40,
        augment: false,
        seed,
        ..TrainConfig::default()
    }
}

fn nkt_seed(seed: u64) -> Comparison {
    let datasets = make_synthetic(&SyntheticOptions {
        num_domains: 4,
        n_per_domain: 64,
        size: 64,
        conflict: true,
        seed,
    });
    let mut model_cfg = ModelConfig::tiny();
    model_cfg.image_size = (64, 64);
    let refs: Vec<&DomainDataset> = datasets.iter().collect();
    let opts = TrainOptions {
        fold: Some(0),
        out_dir: None,
        max_steps: None,
        val_fraction: 0.0,
        verbose: false,
    };

    let st_out = train::<f32>(
        &datasets,
        &model_cfg,
        &nkt_train_cfg(Paradigm::St, seed),
        &opts,
    )
    .unwrap();
    let st_reports: Vec<EvalReport> = st_out
        .models
        .iter()
        .zip(&datasets)
        .map(|(model, ds)| evaluate(model, &[ds], 0, "st").unwrap())
        .collect();
    let st = merge_reports(st_reports).unwrap();
    let jt_out = train::<f32>(
        &datasets,
        &model_cfg,
        &nkt_train_cfg(Paradigm::Jt, seed),
        &opts,
    )
    .unwrap();
    let jt = evaluate(&jt_out.models[0], &refs, 0, "jt").unwrap();
    let mat_out = train::<f32>(
        &datasets,
        &model_cfg,
        &nkt_train_cfg(Paradigm::Mat, seed),
        &opts,
    )
    .unwrap();
    let mat = evaluate(&mat_out.models[0], &refs, 0, "mat").unwrap();

    compare_paradigms(&[st, jt, mat], 5.0).unwrap()
}

#[test]
fn criterion_08_nkt_trend() {
    let mut held = 0;
    for seed in [17u64, 18, 19] {
        let cmp = nkt_seed(seed);
        let any_flagged = cmp.rows.iter().any(|r| r.nkt);
        let mat_recovers = cmp.rows.iter().all(|r| {
            let mat = r.mat_dice.unwrap_or(f64::NAN);
            let best = r.st_dice.max(r.jt_dice);
            (best - mat) * 100.0 <= 2.0 && (!r.nkt || mat > r.jt_dice)
        });
        held += usize::from(any_flagged && mat_recovers);
    }
    assert!(held >= 2, "NKT trend held on only {held} of 3 seeds");
}

#[test]
fn criterion_09_fixed_size() {
    let build = |m: usize| {
        let mut cfg = ModelConfig::tiny();
        cfg.num_domains = m;
        let model = Mdvit::<f32>::new(&cfg, 0);
        (
            cfg,
            Checkpoint::from_model(&model, CheckpointRole::Inference),
        )
    };
    let (cfg, small) = build(2);
    let (_, large) = build(8);

    // Same tensor set; only the DA embedding matrices change, and each by
    // exactly (8 - 2) rows of K/r scalars.
    assert_eq!(small.tensors.len(), large.tensors.len());
    let per_instance: usize = 6;
    for ((name_s, t_s), (name_l, t_l)) in small.tensors.iter().zip(large.tensors.iter()) {
        assert_eq!(name_s, name_l);
        if name_s.ends_with(".da.embed.weight") {
            assert_eq!(t_s.shape()[0], 2);
            assert_eq!(t_l.shape()[0], 8);
            assert_eq!(t_l.len() - t_s.len(), per_instance * t_s.shape()[1]);
        } else {
            assert_eq!(t_s.shape(), t_l.shape(), "tensor {name_s} changed shape");
        }
    }
    let expected: usize = (1..=8)
        .map(|b| cfg.layers_per_block[b - 1] * per_instance * cfg.da_dim(b))
        .sum();
    assert_eq!(large.scalar_count() - small.scalar_count(), expected);
}

#[test]
fn criterion_10_batch_composition() {
    let lists: Vec<Vec<usize>> = (0..4).map(|d| (d * 100..d * 100 + 64).collect()).collect();
    let batches = balanced_batches(&lists, 16, 17, 0);
    assert_eq!(batches.len(), 16);
    for (bi, batch) in batches.iter().enumerate() {
        assert_eq!(batch.len(), 16);
        for d in 0..4 {
            let n = batch.iter().filter(|(dom, _)| *dom == d).count();
            assert_eq!(n, 4, "batch {bi}: domain {d} has {n} samples, not 4");
        }
    }
}

#[test]
fn criterion_11_lr_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 1e-4);
    assert_eq!(lr_at(50, &cfg), 5e-5);
    assert_eq!(lr_at(100, &cfg), 2.5e-5);
}
