//! Finite-difference gradient verification, in two stages.
//!
//! Stage 1 checks the loss functions in isolation: analytic input gradients
//! of Dice, BCE, and MKD on small 4x4 inputs against central differences.
//! Stage 2 sweeps the whole network: a tiny MDViT records the full Eq. 1
//! objective on one batch, and every parameter tensor is probed at a few
//! random coordinates, comparing the tape's gradient with
//! (f(p + eps) - f(p - eps)) / (2 eps). Everything runs in f64.
//!
//! Run with: cargo run --release --example gradient_check

use anyhow::Result;
use mdvit::autodiff::{BackwardMode, Tape};
use mdvit::config::ModelConfig;
use mdvit::data::{make_synthetic, DomainBatch, Sample, SyntheticOptions};
use mdvit::losses::{bce_loss, dice_loss, mkd_loss};
use mdvit::model::Mdvit;
use mdvit::reference::{central_diff, check_param_gradients, rel_error};
use mdvit::trainer::{build_objective, build_objective_with};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(
        IxDyn(shape),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Max relative error between the analytic input gradient of `build` and
/// central differences, probing every coordinate of `x`.
fn input_grad_err(
    x: &ArrayD<f64>,
    build: impl Fn(&mut Tape<f64>, mdvit::autodiff::Var) -> mdvit::autodiff::Var,
) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = build(&mut tape, xv);
    let grads = tape.backward(loss, BackwardMode::Full);
    let analytic = grads.get(xv).unwrap().clone();

    let numeric = central_diff(x, EPS, |probe| {
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

fn main() -> Result<()> {
    let shape = [2usize, 1, 4, 4];
    let target = random(&shape, 0.0, 1.0, 1).mapv(|v| f64::from(v > 0.5));

    let probs = random(&shape, 0.05, 0.95, 2);
    let e = input_grad_err(&probs, |tape, x| {
        let t = tape.leaf(target.clone());
        dice_loss(tape, x, t).unwrap()
    });
    println!("dice input gradient: max rel err {e:.3e} (tol {TOL:.0e})");
    assert!(e < TOL);

    let logits = random(&shape, -2.0, 2.0, 3);
    let e = input_grad_err(&logits, |tape, x| bce_loss(tape, x, &target).unwrap());
    println!("bce input gradient:  max rel err {e:.3e}");
    assert!(e < TOL);

    let peer = random(&shape, 0.05, 0.95, 4);
    let e = input_grad_err(&probs, |tape, x| {
        let p = tape.leaf(peer.clone());
        mkd_loss(tape, x, p).unwrap()
    });
    println!("mkd input gradient:  max rel err {e:.3e}");
    assert!(e < TOL);

    // Stage 2: full-network parameter sweep on a tiny model.
    let start = Instant::now();
    let cfg = ModelConfig::tiny();
    let model: Mdvit<f64> = Mdvit::new(&cfg, 12);
    let sets = make_synthetic(&SyntheticOptions {
        num_domains: 4,
        n_per_domain: 1,
        size: 32,
        conflict: false,
        seed: 5,
    });
    let refs: Vec<&Sample> = sets.iter().map(|ds| &ds.samples[0]).collect();
    let batch = DomainBatch::<f64>::from_samples(&refs);

    let obj = build_objective(&model, &batch)?;
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
        EPS,
        TOL,
        3,
        99,
    );
    println!(
        "network sweep: {} coordinates over {} tensors, max rel err {:.3e} at {} ({:.1?})",
        report.checked,
        model.params.len(),
        report.max_rel_err,
        report.worst,
        start.elapsed()
    );
    for f in &report.failures {
        println!("  FAIL {f}");
    }
    assert!(
        report.passed(),
        "{} coordinates failed",
        report.failures.len()
    );
    println!("all gradients agree with finite differences");
    Ok(())
}
