use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Image;

/// Explicitly threaded random state.
///
/// Backed by a ChaCha8 counter-mode generator. [`RngState::derive`] opens an
/// independent stream keyed on the original seed, so per-chain or per-slice
/// streams do not depend on how many numbers the parent already produced.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream `stream` of this seed, distinct from the parent stream.
    pub fn derive(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1);
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.inner.sample(StandardNormal);
        }
    }

    /// Generator access for `rand` APIs (shuffles and the like).
    pub fn raw(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

/// Image of i.i.d. standard normal draws.
pub fn gaussian_field(rows: usize, cols: usize, rng: &mut RngState) -> Image {
    let mut img = Image::zeros(rows, cols);
    rng.fill_normal(img.data_mut());
    img
}
