//! Counter-based random streams and the worker pool used by every ensemble.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Identifies one reproducible random stream: identical pairs give identical draws,
/// distinct indices give independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub master: u64,
    pub index: u64,
}

impl RngStream {
    pub fn new(master: u64, index: u64) -> Self {
        RngStream { master, index }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        stream(self.master, self.index)
    }
}

pub fn stream(master: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

pub fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Evaluates f(0..n) on the worker pool; output order is index order regardless of scheduling.
#[cfg(feature = "parallel")]
pub fn par_map<T, F>(n: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, F>(n: u64, f: F) -> Vec<T>
where
    F: Fn(u64) -> T,
{
    (0..n).map(f).collect()
}
