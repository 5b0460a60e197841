//! Seeded random streams, one independent ChaCha stream per purpose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Init,
    Data,
    Probe,
    Shuffle,
    Augment,
    Attack,
    ProbeAttack,
    EvalAttack,
    Trials,
}

impl Purpose {
    fn id(self) -> u64 {
        match self {
            Purpose::Init => 1,
            Purpose::Data => 2,
            Purpose::Probe => 3,
            Purpose::Shuffle => 4,
            Purpose::Augment => 5,
            Purpose::Attack => 6,
            Purpose::ProbeAttack => 7,
            Purpose::EvalAttack => 8,
            Purpose::Trials => 9,
        }
    }
}

pub fn stream(seed: u64, purpose: Purpose) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose.id());
    rng
}

/// A stream that is also keyed by an index (an epoch, a trial).
pub fn indexed(seed: u64, purpose: Purpose, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(purpose.id());
    rng
}
