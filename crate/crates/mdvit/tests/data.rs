//! Data pipeline oracles: fold partitions, balanced batch composition,
//! augmentation determinism, and the synthetic generator's label geometry.

use mdvit::data::synthetic::{domain_rule, render_sample, style, LabelRule, CORE_SCALE};
use mdvit::data::{
    augment, balanced_batches, load_root, make_synthetic, write_datasets, AugmentOptions,
    DomainBatch, DomainDataset, Sample, SyntheticOptions, NUM_FOLDS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{HashMap, HashSet};

fn synth_opts(conflict: bool) -> SyntheticOptions {
    SyntheticOptions {
        num_domains: 4,
        n_per_domain: 10,
        size: 32,
        conflict,
        seed: 7,
    }
}

#[test]
fn folds_partition_every_sample() {
    let ds = &make_synthetic(&synth_opts(false))[0];
    let n = ds.len();
    let mut seen = vec![false; n];
    for fold in 0..NUM_FOLDS {
        let train = ds.train_indices(fold);
        let test = ds.test_indices(fold);
        assert_eq!(train.len() + test.len(), n);
        let train_set: HashSet<_> = train.iter().collect();
        assert!(test.iter().all(|i| !train_set.contains(i)));
        for &i in &test {
            assert!(!seen[i], "sample {i} in two folds");
            seen[i] = true;
        }
    }
    assert!(
        seen.iter().all(|&s| s),
        "every sample must land in some fold"
    );

    // Near-equal fold sizes: with n = 10 and 5 folds, 2 each.
    for fold in 0..NUM_FOLDS {
        assert_eq!(ds.test_indices(fold).len(), 2);
    }
}

#[test]
fn fold_sizes_differ_by_at_most_one() {
    let samples = make_synthetic(&SyntheticOptions {
        n_per_domain: 23,
        ..synth_opts(false)
    })[0]
        .samples
        .clone();
    let ds = DomainDataset::new("odd", samples, 3);
    let sizes: Vec<usize> = (0..NUM_FOLDS).map(|f| ds.test_indices(f).len()).collect();
    assert_eq!(sizes.iter().sum::<usize>(), 23);
    let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
    assert!(max - min <= 1, "fold sizes {sizes:?}");
}

#[test]
fn every_batch_holds_equal_domain_shares() {
    // M = 4 domains, B = 16: each batch takes exactly 4 from each domain.
    let lists: Vec<Vec<usize>> = vec![
        (0..64).collect(),
        (0..10).collect(),
        (100..107).collect(),
        (0..32).collect(),
    ];
    let batches = balanced_batches(&lists, 16, 99, 0);
    assert_eq!(batches.len(), 16); // largest domain, 64 / 4
    for batch in &batches {
        assert_eq!(batch.len(), 16);
        let mut per_domain = [0usize; 4];
        for &(d, idx) in batch {
            per_domain[d] += 1;
            assert!(
                lists[d].contains(&idx),
                "index {idx} not in domain {d} list"
            );
        }
        assert_eq!(per_domain, [4, 4, 4, 4]);
    }
}

#[test]
fn epoch_cycles_largest_domain_exactly_once() {
    let lists: Vec<Vec<usize>> = vec![(0..64).collect(), (0..8).collect()];
    let batches = balanced_batches(&lists, 16, 5, 0);
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for batch in &batches {
        for &(d, idx) in batch {
            if d == 0 {
                *counts.entry(idx).or_default() += 1;
            }
        }
    }
    assert_eq!(counts.len(), 64, "all indices of the largest domain appear");
    assert!(
        counts.values().all(|&c| c == 1),
        "each exactly once per epoch"
    );
}

#[test]
fn sampler_is_deterministic_in_seed_and_epoch() {
    let lists: Vec<Vec<usize>> = vec![(0..12).collect(), (0..12).collect()];
    let a = balanced_batches(&lists, 4, 11, 3);
    let b = balanced_batches(&lists, 4, 11, 3);
    assert_eq!(a, b);
    let c = balanced_batches(&lists, 4, 11, 4);
    assert_ne!(a, c, "different epoch must reshuffle");
    let d = balanced_batches(&lists, 4, 12, 3);
    assert_ne!(a, d, "different seed must reshuffle");
}

#[test]
#[should_panic(expected = "not divisible")]
fn sampler_rejects_indivisible_batch() {
    let lists: Vec<Vec<usize>> = vec![vec![0], vec![1], vec![2]];
    balanced_batches(&lists, 16, 0, 0);
}

#[test]
fn augment_is_deterministic_and_preserves_contracts() {
    let ds = &make_synthetic(&synth_opts(false))[1];
    let sample = &ds.samples[0];
    let opts = AugmentOptions::all();
    for seed in 0..20u64 {
        let a = augment(sample, &opts, seed);
        let b = augment(sample, &opts, seed);
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        assert!(a.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.mask.iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(a.domain, sample.domain);
        assert_eq!(a.id, sample.id);
    }
}

#[test]
fn augment_none_is_identity() {
    let ds = &make_synthetic(&synth_opts(false))[0];
    let sample = &ds.samples[3];
    let out = augment(sample, &AugmentOptions::none(), 1234);
    assert_eq!(out.image, sample.image);
    assert_eq!(out.mask, sample.mask);
}

#[test]
fn augment_can_move_the_mask() {
    // With all transforms enabled some seed must produce a different mask;
    // otherwise augmentation is a no-op and the toggles are dead.
    let ds = &make_synthetic(&synth_opts(false))[0];
    let sample = &ds.samples[0];
    let opts = AugmentOptions::all();
    let moved = (0..20u64).any(|seed| augment(sample, &opts, seed).mask != sample.mask);
    assert!(moved);
}

#[test]
fn conflict_rules_are_exactly_disjoint_on_shared_geometry() {
    // Render the same geometry (identical RNG stream) under all three label
    // rules: core and ring tile the full blob without overlap.
    let sty = style(0);
    let mut r1 = ChaCha8Rng::seed_from_u64(99);
    let mut r2 = r1.clone();
    let mut r3 = r1.clone();
    let core = render_sample(&sty, LabelRule::Core, 64, 0, "c", &mut r1);
    let ring = render_sample(&sty, LabelRule::Ring, 64, 0, "r", &mut r2);
    let full = render_sample(&sty, LabelRule::Full, 64, 0, "f", &mut r3);

    assert_eq!(
        core.image, ring.image,
        "appearance must not depend on the rule"
    );
    let mut core_px = 0usize;
    let mut ring_px = 0usize;
    for ((c, r), f) in core.mask.iter().zip(ring.mask.iter()).zip(full.mask.iter()) {
        assert!(c * r == 0.0, "core and ring overlap");
        assert_eq!(c + r, *f, "core and ring must tile the full blob");
        core_px += (*c == 1.0) as usize;
        ring_px += (*r == 1.0) as usize;
    }
    assert!(core_px > 0 && ring_px > 0, "both regions must be nonempty");
    // The split radius at CORE_SCALE = 0.6 puts roughly a third of the blob
    // area in the core; allow generous slack for discretization.
    let frac = core_px as f64 / (core_px + ring_px) as f64;
    assert!((0.15..0.6).contains(&frac), "core fraction {frac}");
}

#[test]
fn domain_rules_pair_conflicting_styles() {
    // Conflict mode: domains m and m + M/2 share a style but label
    // complementary regions.
    assert_eq!(domain_rule(0, 4, true), (LabelRule::Core, 0));
    assert_eq!(domain_rule(1, 4, true), (LabelRule::Core, 1));
    assert_eq!(domain_rule(2, 4, true), (LabelRule::Ring, 0));
    assert_eq!(domain_rule(3, 4, true), (LabelRule::Ring, 1));
    // Odd M: ceil(M/2) core domains.
    assert_eq!(domain_rule(2, 5, true), (LabelRule::Core, 2));
    assert_eq!(domain_rule(3, 5, true), (LabelRule::Ring, 0));
    // Without conflict every domain labels the whole blob in its own style.
    for m in 0..4 {
        assert_eq!(domain_rule(m, 4, false), (LabelRule::Full, m));
    }
    assert!((0.0..1.0).contains(&CORE_SCALE));
}

#[test]
fn generator_is_deterministic() {
    let a = make_synthetic(&synth_opts(true));
    let b = make_synthetic(&synth_opts(true));
    assert_eq!(a.len(), 4);
    for (da, db) in a.iter().zip(b.iter()) {
        assert_eq!(da.name, db.name);
        assert_eq!(da.folds, db.folds);
        for (sa, sb) in da.samples.iter().zip(db.samples.iter()) {
            assert_eq!(sa.image, sb.image);
            assert_eq!(sa.mask, sb.mask);
            assert_eq!(sa.id, sb.id);
        }
    }
}

#[test]
fn generated_samples_validate() {
    for (m, ds) in make_synthetic(&synth_opts(true)).iter().enumerate() {
        assert_eq!(ds.name, format!("domain{m}"));
        assert_eq!(ds.len(), 10);
        for s in &ds.samples {
            s.validate().unwrap();
            assert_eq!(s.domain, m);
            assert_eq!(s.image.dim(), (32, 32, 3));
            assert!(s.mask.iter().any(|&v| v == 1.0), "mask must be nonempty");
        }
    }
}

#[test]
fn write_then_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let datasets = make_synthetic(&SyntheticOptions {
        num_domains: 2,
        n_per_domain: 6,
        size: 32,
        conflict: false,
        seed: 21,
    });
    write_datasets(dir.path(), &datasets).unwrap();
    let loaded = load_root(dir.path(), (32, 32), 21).unwrap();
    assert_eq!(loaded.len(), 2);
    for (orig, ld) in datasets.iter().zip(loaded.iter()) {
        assert_eq!(orig.name, ld.name);
        assert_eq!(orig.len(), ld.len());
        // Masks survive the 8-bit round trip exactly; match them by id since
        // loading orders by file stem.
        let by_id: HashMap<&str, &Sample> = ld.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        for s in &orig.samples {
            let l = by_id[s.id.as_str()];
            assert_eq!(s.mask, l.mask);
            assert_eq!(s.domain, l.domain);
            for (a, b) in s.image.iter().zip(l.image.iter()) {
                assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
            }
        }
        // split.json preserves the fold of every id.
        let orig_folds: HashMap<&str, usize> = orig
            .samples
            .iter()
            .zip(orig.folds.iter())
            .map(|(s, &f)| (s.id.as_str(), f))
            .collect();
        for (s, &f) in ld.samples.iter().zip(ld.folds.iter()) {
            assert_eq!(orig_folds[s.id.as_str()], f, "fold drifted for {}", s.id);
        }
    }
}

#[test]
fn load_root_rejects_empty_roots() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_root(dir.path(), (32, 32), 0).is_err());
}

#[test]
fn batch_layout_and_one_hot() {
    let datasets = make_synthetic(&synth_opts(false));
    let picks: Vec<&Sample> = vec![
        &datasets[0].samples[0],
        &datasets[1].samples[1],
        &datasets[1].samples[2],
        &datasets[3].samples[0],
    ];
    let batch = DomainBatch::<f32>::from_samples(&picks);
    assert_eq!(batch.images.shape(), &[4, 3, 32, 32]);
    assert_eq!(batch.masks.shape(), &[4, 1, 32, 32]);
    assert_eq!(batch.domains, vec![0, 1, 1, 3]);

    let oh = batch.one_hot(4);
    assert_eq!(oh.shape(), &[4, 4]);
    for (i, &d) in batch.domains.iter().enumerate() {
        for m in 0..4 {
            assert_eq!(oh[[i, m]], f32::from(u8::from(m == d)));
        }
    }
    assert_eq!(batch.domain_rows(1), vec![1, 2]);
    assert_eq!(batch.domain_rows(2), Vec::<usize>::new());

    // HWC samples become CHW batch rows.
    let s = &datasets[0].samples[0];
    assert_eq!(batch.images[[0, 2, 5, 7]], s.image[[5, 7, 2]]);
    assert_eq!(batch.masks[[0, 0, 9, 4]], s.mask[[9, 4]]);
}
