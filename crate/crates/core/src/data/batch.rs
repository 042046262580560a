use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Shuffles `items` with `seed` and packs them greedily into batches of at
/// most `batch_size`. With a `dedupe_key`, no batch holds two items with the
/// same key; an item that collides waits for a later batch. The final batch
/// may be short.
pub fn make_batches<T, K, F>(
    items: Vec<T>,
    batch_size: usize,
    seed: u64,
    dedupe_key: Option<F>,
) -> Vec<Vec<T>>
where
    K: Eq + std::hash::Hash,
    F: Fn(&T) -> K,
{
    let batch_size = batch_size.max(1);
    let mut pending = items;
    pending.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let Some(key) = dedupe_key else {
        let mut out = Vec::with_capacity(pending.len().div_ceil(batch_size));
        let mut it = pending.into_iter().peekable();
        while it.peek().is_some() {
            out.push(it.by_ref().take(batch_size).collect());
        }
        return out;
    };
    let mut out = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut keys = HashSet::new();
        let mut rest = Vec::new();
        for item in pending {
            if batch.len() < batch_size && !keys.contains(&key(&item)) {
                keys.insert(key(&item));
                batch.push(item);
            } else {
                rest.push(item);
            }
        }
        out.push(batch);
        pending = rest;
    }
    out
}
