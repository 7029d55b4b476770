//! Seeded, counter-based random streams.
//!
//! Each [`RngStream`] is identified by a `(seed, stream_id)` pair and always
//! produces the same sample sequence, independent of thread scheduling or the
//! order in which streams are drawn from. Distinct stream ids select distinct
//! ChaCha streams of the same keyed generator, so per-client sampling can run
//! in parallel without sharing state.

use crate::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream id namespaces, kept disjoint so that per-client data streams never
/// collide with model-initialization or sampling streams under the same seed.
pub mod purpose {
    /// Per-client data generation uses the client index directly.
    pub const CLIENT_BASE: u64 = 0;
    /// Model initialization (representation block).
    pub const INIT_REP: u64 = 1 << 32;
    /// Model initialization (head block).
    pub const INIT_HEADS: u64 = (1 << 32) + 1;
    /// Class-mean generation for the classification corpus.
    pub const CLASS_MEANS: u64 = 2 << 32;
    /// Per-round client sampling; add the round index.
    pub const CLIENT_SAMPLING: u64 = 3 << 32;
    /// Class partition shuffling.
    pub const CLASS_PARTITION: u64 = 4 << 32;
    /// Ground-truth left factor.
    pub const GT_LEFT: u64 = 5 << 32;
    /// Ground-truth right factor.
    pub const GT_RIGHT: u64 = 6 << 32;
}

/// A deterministic random stream: one `(seed, stream_id)` pair per client or
/// per purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Stream for client `i`'s data.
    pub fn client(seed: u64, i: usize) -> Self {
        Self::new(seed, purpose::CLIENT_BASE + i as u64)
    }

    /// Instantiate the generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Sample a `rows x cols` matrix of IID `Normal(0, std^2)` entries.
///
/// Entries are drawn in row-major order. `std = 0` yields the zero matrix
/// without consuming randomness differently from the general case.
pub fn seeded_gaussian(rows: usize, cols: usize, std: f64, stream: RngStream) -> Matrix {
    assert!(rows >= 1 && cols >= 1, "empty matrix requested");
    assert!(std >= 0.0, "negative standard deviation");
    let mut rng = stream.rng();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let z: f64 = StandardNormal.sample(&mut rng);
            out[(r, c)] = std * z;
        }
    }
    out
}

/// Sample a vector of IID `Normal(0, std^2)` entries from the stream's
/// current position.
pub fn gaussian_vector(rng: &mut ChaCha12Rng, len: usize, std: f64) -> crate::Vector {
    crate::Vector::from_iterator(
        len,
        (0..len).map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        }),
    )
}
