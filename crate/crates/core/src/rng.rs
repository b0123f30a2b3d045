//! Counter-based seeded random numbers with explicit stream derivation.
//!
//! Per-neuron Bayesian linear model batches and per-sample Monte Carlo
//! passes must stay reproducible under parallel execution, so instead of
//! a shared mutable generator each unit of work derives its own stream
//! from `(seed, stream id)`. The output is a pure function of
//! `(key, counter)` in the SplitMix64 construction.

use crate::linalg::DenseMatrix;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic, splittable random number generator.
///
/// The same seed and the same call sequence produce a bit-identical
/// stream. [`Rng::derive`] is a pure function of the generator's key and
/// the stream id, independent of how many values have been drawn.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    ctr: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix64(seed.wrapping_add(GOLDEN)),
            ctr: 0,
            spare_normal: None,
        }
    }

    /// Child generator for the given stream id. Independent of draws made
    /// so far; `r.derive(s)` always names the same stream.
    pub fn derive(&self, stream: u64) -> Rng {
        Rng {
            key: mix64(self.key ^ mix64(stream.wrapping_add(GOLDEN))),
            ctr: 0,
            spare_normal: None,
        }
    }

    /// Fresh child that also advances this generator, for call sites that
    /// need a sequence of unrelated streams.
    pub fn split(&mut self) -> Rng {
        let id = self.next_u64();
        self.derive(id)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = mix64(self.key.wrapping_add(self.ctr.wrapping_mul(GOLDEN)));
        self.ctr += 1;
        v
    }

    /// Uniform draw in (0, 1].
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (((self.next_u64() >> 11) + 1) as f64) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Matrix of i.i.d. Gaussian entries. `std = 0` yields a constant
    /// matrix without consuming randomness per entry.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, mean: f64, std: f64) -> DenseMatrix {
        assert!(std >= 0.0, "gaussian_matrix needs std >= 0");
        if std == 0.0 {
            return DenseMatrix::filled(rows, cols, mean);
        }
        let data = (0..rows * cols).map(|_| mean + std * self.normal()).collect();
        DenseMatrix::from_vec_unchecked(rows, cols, data)
    }
}
