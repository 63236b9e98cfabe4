use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Buffer = 1,
    Algorithm = 2,
    Evaluation = 3,
    Hypotheses = 4,
    /// Replacement trajectories and replaced indices in the stability probe.
    Pair = 5,
    /// Environments, buffers and policies of the randomized gradient suite.
    GradCheck = 6,
}

/// ChaCha8 keyed by the master seed, on a stream selected by `(kind, index)`.
///
/// Distinct `(kind, index)` pairs never share keystream, so buffer sampling cannot leak
/// into algorithm or evaluation randomness.
pub fn substream(master_seed: u64, kind: Stream, index: u64) -> ChaCha8Rng {
    assert!(index < 1 << 56, "substream index out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((kind as u64) << 56) | index);
    rng
}

/// Two-level index for nested loops (e.g. buffer pair `i`, algorithm seed `j`).
pub fn nested_index(outer: u64, inner: u64) -> u64 {
    assert!(outer < 1 << 28 && inner < 1 << 28, "nested substream index out of range");
    (outer << 28) | inner
}
