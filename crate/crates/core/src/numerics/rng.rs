use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Matrix;

/// Seeded, stream-addressable random source.
///
/// Backed by ChaCha8, which produces the same word sequence on every
/// platform for a given `(seed, stream)`. Independent consumers should take
/// distinct streams (see [`RngState::derive`]) rather than share one state.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Fresh generator on the same seed with a different stream. Does not
    /// advance `self`.
    pub fn derive(&self, stream: u64) -> RngState {
        RngState::new(self.seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, bound)`.
    pub fn below(&mut self, bound: usize) -> usize {
        self.inner.random_range(0..bound)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// I.i.d. normal matrix, filled in row-major order.
    pub fn gaussian(&mut self, rows: usize, cols: usize, mean: f64, std: f64) -> Matrix {
        gaussian(self, rows, cols, mean, std)
    }
}

/// I.i.d. `N(mean, std^2)` entries. With `std == 0` the result is exactly
/// `mean` everywhere (the generator still advances).
pub fn gaussian(rng: &mut RngState, rows: usize, cols: usize, mean: f64, std: f64) -> Matrix {
    assert!(std >= 0.0, "negative standard deviation");
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        let z = rng.standard_normal();
        *v = if std == 0.0 { mean } else { mean + std * z };
    }
    m
}
