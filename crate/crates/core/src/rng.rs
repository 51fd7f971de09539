//! Seeded random streams. Each consumer draws from its own ChaCha stream of
//! the run seed, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Shuffle(u64),
    Synth,
    GradCheck,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Synth => 2,
            Stream::GradCheck => 3,
            Stream::Shuffle(epoch) => 1_000 + epoch,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
