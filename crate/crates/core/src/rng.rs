//! Named random substreams.
//!
//! Every random draw derives from one user seed. Each consumer asks for a
//! stream by name (`"train"`, `"chain.17"`, `"verify.trial.3"`), so adding a
//! consumer never shifts the numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// FNV-1a, used only to map stream names to ChaCha stream ids.
fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn substream(seed: u64, name: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}

pub fn chain_stream(seed: u64, chain: usize) -> Rng {
    substream(seed, &format!("chain.{chain}"))
}

/// Uniform draw on (0, 1]. Never returns zero, so `z <= 1 - exp(-h*0)` is
/// always false.
pub fn open_closed_unit(rng: &mut Rng) -> f64 {
    use rand::Rng as _;
    1.0 - rng.gen::<f64>()
}

/// Draws an index from unnormalized non-negative weights.
pub fn sample_weighted(weights: &[f64], rng: &mut Rng) -> Option<usize> {
    use rand::Rng as _;
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let mut u = rng.gen::<f64>() * total;
    let mut last_positive = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if u < w {
                return Some(i);
            }
            u -= w;
            last_positive = Some(i);
        }
    }
    last_positive
}
