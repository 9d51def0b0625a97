//! Seeded random streams. Every stage of an experiment draws from its own
//! named stream derived from one 64-bit seed, so stages can be re-seeded
//! independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Dataset,
    Surrogate,
    Attack,
    Victim,
    Eval,
    Encoder,
    Analysis,
    /// Base model initialisation and training.
    Base,
}

impl Stream {
    pub const ALL: [Stream; 8] = [
        Stream::Dataset,
        Stream::Surrogate,
        Stream::Attack,
        Stream::Victim,
        Stream::Eval,
        Stream::Encoder,
        Stream::Analysis,
        Stream::Base,
    ];

    pub fn id(self) -> u64 {
        match self {
            Stream::Dataset => 1,
            Stream::Surrogate => 2,
            Stream::Attack => 3,
            Stream::Victim => 4,
            Stream::Eval => 5,
            Stream::Encoder => 6,
            Stream::Analysis => 7,
            Stream::Base => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Dataset => "dataset",
            Stream::Surrogate => "surrogate",
            Stream::Attack => "attack",
            Stream::Victim => "victim",
            Stream::Eval => "eval",
            Stream::Encoder => "encoder",
            Stream::Analysis => "analysis",
            Stream::Base => "base",
        }
    }
}

/// Generator for `stream` under the experiment seed `seed`.
pub fn stream(seed: u64, stream: Stream) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Plain seeded generator, for tests and one-off draws.
pub fn seeded(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}
