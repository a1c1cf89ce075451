//! Seeded generator construction.
//!
//! Every replicate owns its own ChaCha8 generator. The splitting rule is:
//! seed the generator from the master seed with `seed_from_u64`, then select
//! the ChaCha stream equal to the replicate index. Streams of one key are
//! independent, so results never depend on the order replicates are run in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SmcRng = ChaCha8Rng;

/// Generator for replicate `index` under `master` seed.
pub fn replicate_rng(master: u64, index: u64) -> SmcRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

/// Derives a child master seed, used when one experiment needs several
/// independent families of replicates (for example one per training step).
pub fn derive_seed(master: u64, label: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = master ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
