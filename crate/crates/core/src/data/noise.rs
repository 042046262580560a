use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{TokenId, BOS, EOS};

/// Deletes each non-sentinel token independently with probability `ratio`.
///
/// BOS and EOS are never deleted. If every interior token would go, one of
/// them, chosen uniformly, is kept. The result depends only on
/// `(ids, ratio, seed)`.
pub fn delete_noise(ids: &[TokenId], ratio: f64, seed: u64) -> Vec<TokenId> {
    let ratio = ratio.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let interior: Vec<usize> = (0..ids.len())
        .filter(|&i| ids[i] != BOS && ids[i] != EOS)
        .collect();
    let mut keep = vec![true; ids.len()];
    for &i in &interior {
        if rng.random::<f64>() < ratio {
            keep[i] = false;
        }
    }
    if !interior.is_empty() && interior.iter().all(|&i| !keep[i]) {
        keep[interior[rng.random_range(0..interior.len())]] = true;
    }
    ids.iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&id, _)| id)
        .collect()
}
