//! Balanced multi-domain batch composition.
//!
//! Every batch draws exactly B/M samples from each domain. One epoch cycles
//! the largest domain's index list once (shuffled); smaller domains are
//! resampled by repeating fresh shuffles of their own lists until they cover
//! the epoch. Batch contents are a pure function of (lists, B, seed, epoch).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn epoch_rng(seed: u64, epoch: usize, domain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 16) ^ domain as u64 ^ 0xB5);
    rng
}

/// Yield one epoch of balanced batches as (domain, index-into-domain-list)
/// pairs. `per_domain[m]` lists the usable sample indices of domain m.
///
/// Panics if `batch_size` is not divisible by the domain count or any domain
/// list is empty.
pub fn balanced_batches(
    per_domain: &[Vec<usize>],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<(usize, usize)>> {
    let m = per_domain.len();
    assert!(m >= 1, "need at least one domain");
    assert!(
        batch_size.is_multiple_of(m),
        "batch_size {batch_size} not divisible by {m} domains"
    );
    assert!(
        per_domain.iter().all(|l| !l.is_empty()),
        "every domain needs at least one sample"
    );
    let per_batch = batch_size / m;
    let largest = per_domain.iter().map(|l| l.len()).max().unwrap();
    let num_batches = (largest / per_batch).max(1);
    let need = num_batches * per_batch;

    // Per-domain epoch streams: repeated independent shuffles, truncated.
    let mut streams: Vec<Vec<usize>> = Vec::with_capacity(m);
    for (d, list) in per_domain.iter().enumerate() {
        let mut rng = epoch_rng(seed, epoch, d);
        let mut stream = Vec::with_capacity(need);
        while stream.len() < need {
            let mut pass = list.clone();
            pass.shuffle(&mut rng);
            stream.extend(pass);
        }
        stream.truncate(need);
        streams.push(stream);
    }

    (0..num_batches)
        .map(|b| {
            let mut batch = Vec::with_capacity(batch_size);
            for (d, stream) in streams.iter().enumerate() {
                for i in 0..per_batch {
                    batch.push((d, stream[b * per_batch + i]));
                }
            }
            batch
        })
        .collect()
}
