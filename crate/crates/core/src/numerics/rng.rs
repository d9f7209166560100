use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Counter-based generator used for every stochastic operation.
pub type Rng = ChaCha8Rng;

/// Generator for `(seed, stream)`. Distinct streams of one seed never overlap,
/// so independent consumers (data split, masking, dropout, init) can each own
/// a stream without the order of their draws leaking into each other.
pub fn rng_for(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream identifiers, kept in one place so they stay unique.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const CONTEXT: u64 = 4;
    pub const SYNTH_NORMAL: u64 = 5;
    pub const SYNTH_ANOMALY: u64 = 6;
    pub const SYNTH_VAL: u64 = 7;
    pub const KNN_BANK: u64 = 8;
}
