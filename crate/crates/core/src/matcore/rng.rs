use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Matrix;

/// Named random streams. Every consumer of randomness in the simulator
/// draws from its own stream so that parallel client work cannot reorder
/// draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Task,
    Distances,
    AdapterInit,
    OfflineChannel,
    Schedule { round: usize },
    Channel { round: usize },
    Client { id: usize, round: usize },
    Sparsifier { id: usize, round: usize },
    Raw(u64),
}

impl Stream {
    pub fn id(self) -> u64 {
        let (tag, a, b) = match self {
            Stream::Raw(id) => return id,
            Stream::Task => (1, 0, 0),
            Stream::Distances => (2, 0, 0),
            Stream::AdapterInit => (3, 0, 0),
            Stream::OfflineChannel => (4, 0, 0),
            Stream::Schedule { round } => (5, round as u64, 0),
            Stream::Channel { round } => (6, round as u64, 0),
            Stream::Client { id, round } => (7, id as u64, round as u64),
            Stream::Sparsifier { id, round } => (8, id as u64, round as u64),
        };
        mix(mix(mix(tag) ^ a) ^ b)
    }
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded ChaCha8 generator addressed by `(seed, stream)`.
#[derive(Debug, Clone)]
pub struct SimRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SimRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn stream(seed: u64, stream: Stream) -> Self {
        Self::new(seed, stream.id())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// I.i.d. `N(0, stddev²)` entries.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, stddev: f64) -> Matrix {
        assert!(stddev > 0.0, "gaussian_matrix requires stddev > 0");
        Matrix::from_fn(rows, cols, |_, _| stddev * self.standard_normal())
    }

    /// `amount` distinct indices from `0..len`, in sampling order.
    pub fn sample_indices(&mut self, len: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, len, amount).into_vec()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for SimRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
