//! Domain Adapter oracles: the cross-head softmax hand example, the
//! normalization property, embedding-row equivariance, stop-gradient
//! behaviour, and parameter accounting.

use mdvit::autodiff::BackwardMode;
use mdvit::config::ModelConfig;
use mdvit::domain_adapter::DomainAdapter;
use mdvit::model::{da_params_per_layer, Mdvit, ParamRole};
use mdvit::nn::Forward;
use mdvit::params::ParamSet;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn one_hot(batch_domains: &[usize], m: usize) -> ArrayD<f64> {
    let mut v = ArrayD::zeros(IxDyn(&[batch_domains.len(), m]));
    for (i, &d) in batch_domains.iter().enumerate() {
        v[[i, d]] = 1.0;
    }
    v
}

fn set_param(ps: &mut ParamSet<f64>, name: &str, value: ArrayD<f64>) {
    let id = ps
        .id_by_name(name)
        .unwrap_or_else(|| panic!("missing {name}"));
    assert_eq!(ps.get(id).value.shape(), value.shape());
    ps.get_mut(id).value = value;
}

#[test]
fn hand_example_softmax_across_heads() {
    // d = relu(0 + 1) = 1; head logits per channel are (ln 3, 0) for
    // channel 0 and (0, ln 3) for channel 1, so the head weights are
    // (0.75, 0.25) and (0.25, 0.75).
    let mut ps = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let da = DomainAdapter::new(&mut ps, &mut rng, "da", 1, 2, 2, 2);
    let ln3 = 3.0f64.ln();
    set_param(&mut ps, "da.embed.weight", ArrayD::zeros(IxDyn(&[1, 1])));
    set_param(
        &mut ps,
        "da.embed.bias",
        ArrayD::from_elem(IxDyn(&[1]), 1.0),
    );
    set_param(
        &mut ps,
        "da.heads.weight",
        ArrayD::from_shape_vec(IxDyn(&[2, 1, 2]), vec![ln3, 0.0, 0.0, ln3]).unwrap(),
    );

    let mut f = Forward::new(&ps);
    let oh = f.input(one_hot(&[0], 1));
    let a = da.head_attention(&mut f, oh);
    let v = f.tape.value(a);
    assert_eq!(v.shape(), &[1, 2, 2]);
    assert!((v[[0, 0, 0]] - 0.75).abs() < 1e-12);
    assert!((v[[0, 1, 0]] - 0.25).abs() < 1e-12);
    assert!((v[[0, 0, 1]] - 0.25).abs() < 1e-12);
    assert!((v[[0, 1, 1]] - 0.75).abs() < 1e-12);
}

#[test]
fn head_weights_sum_to_one_over_heads() {
    // A down-scaled version of the acceptance sweep: random adapters and
    // labels at the corner (K, H) combinations.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &k in &[4usize, 8, 64] {
        for &h in &[2usize, 8] {
            for draw in 0..10 {
                let m = rng.gen_range(1..=6);
                let mut ps = ParamSet::<f64>::new();
                let mut prng = ChaCha8Rng::seed_from_u64(1000 + draw);
                let da = DomainAdapter::new(&mut ps, &mut prng, "da", m, h, k, 2);
                let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..m)).collect();
                let mut f = Forward::new(&ps);
                let oh = f.input(one_hot(&labels, m));
                let a = da.head_attention(&mut f, oh);
                let v = f.tape.value(a);
                for b in 0..labels.len() {
                    for c in 0..k {
                        let s: f64 = (0..h).map(|hi| v[[b, hi, c]]).sum();
                        assert!(
                            (s - 1.0).abs() < 1e-6,
                            "K={k} H={h} draw {draw}: column sums to {s}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn domain_identity_enters_only_through_embedding_rows() {
    // Permuting the embedding rows and the label identically leaves the
    // output unchanged: domain m only selects row m of E.
    let mut ps = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let da = DomainAdapter::new(&mut ps, &mut rng, "da", 4, 2, 8, 2);
    let embed_id = ps.id_by_name("da.embed.weight").unwrap();
    let orig = ps.get(embed_id).value.clone();

    let run = |ps: &ParamSet<f64>, label: usize| {
        let mut f = Forward::new(ps);
        let oh = f.input(one_hot(&[label], 4));
        let a = da.head_attention(&mut f, oh);
        f.tape.value(a).clone()
    };
    let base: Vec<ArrayD<f64>> = (0..4).map(|m| run(&ps, m)).collect();

    // Rotate rows by one: new row m holds old row (m + 1) % 4.
    let mut rotated = orig.clone();
    for m in 0..4 {
        for c in 0..orig.shape()[1] {
            rotated[[m, c]] = orig[[(m + 1) % 4, c]];
        }
    }
    ps.get_mut(embed_id).value = rotated;
    for m in 0..4 {
        assert_eq!(run(&ps, m), base[(m + 1) % 4]);
    }
}

#[test]
fn head_attention_output_is_a_barrier() {
    let mut ps = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let da = DomainAdapter::new(&mut ps, &mut rng, "da", 2, 2, 4, 2);
    let mut f = Forward::new(&ps);
    let oh = f.input(one_hot(&[0, 1], 2));
    let a = da.head_attention(&mut f, oh);
    let root = f.tape.mean_all(a);

    let full = f.tape.backward(root, BackwardMode::Full);
    let blocked = f.tape.backward(root, BackwardMode::BlockBarriers);
    for name in ["da.embed.weight", "da.embed.bias", "da.heads.weight"] {
        let id = ps.id_by_name(name).unwrap();
        assert!(
            f.grad(&full, id).is_some(),
            "{name} must receive gradient in full mode"
        );
        assert!(
            f.grad(&blocked, id).is_none(),
            "{name} must be cut off behind the barrier"
        );
    }
}

#[test]
fn parameter_count_matches_formula() {
    for (m, h, k, r) in [
        (4usize, 2usize, 8usize, 2usize),
        (6, 8, 64, 2),
        (2, 2, 4, 4),
    ] {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _da = DomainAdapter::new(&mut ps, &mut rng, "da", m, h, k, r);
        let d = k / r;
        assert_eq!(ps.scalar_count(), m * d + d + h * d * k);
        assert_eq!(ps.scalar_count(), da_params_per_layer(m, h, k, r));
    }
}

#[test]
fn inference_size_grows_only_by_embedding_rows() {
    // Same architecture, different domain counts: the entire difference is
    // the extra one-hot embedding rows, (8 - 2) * (K / r) per DA instance.
    let mut cfg2 = ModelConfig::tiny();
    cfg2.num_domains = 2;
    let mut cfg8 = ModelConfig::tiny();
    cfg8.num_domains = 8;
    let m2 = Mdvit::<f32>::new(&cfg2, 0);
    let m8 = Mdvit::<f32>::new(&cfg8, 0);
    let c2 = m2.count_parameters(ParamRole::Inference);
    let c8 = m8.count_parameters(ParamRole::Inference);

    // One attention layer per block in the tiny config; block channels are
    // mirrored [8, 16, 24, 32, 32, 24, 16, 8] with 2 heads and r = 2, so
    // the per-layer K/r values sum to 40.
    let expected_rows_per_domain: usize = (1..=8).map(|b| cfg2.da_dim(b)).sum();
    assert_eq!(expected_rows_per_domain, 40);
    assert_eq!(c8 - c2, (8 - 2) * expected_rows_per_domain);
    assert_eq!(c8 - c2, 240);
}

#[test]
fn da_parameters_are_absent_when_disabled() {
    let mut cfg = ModelConfig::tiny();
    cfg.da_enabled = false;
    let model = Mdvit::<f32>::new(&cfg, 0);
    assert_eq!(model.count_da_parameters(), 0);
    assert!(model.da_parameter_names().is_empty());

    let with_da = Mdvit::<f32>::new(&ModelConfig::tiny(), 0);
    assert!(with_da.count_da_parameters() > 0);
    assert!(with_da
        .da_parameter_names()
        .iter()
        .all(|n| n.contains(".da.")));
}
