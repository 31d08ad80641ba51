//! Deterministic random number generation.
//!
//! The generator is SplitMix64: the 64-bit state advances by the golden-ratio
//! increment and each output is a fixed bit-mix of the new state. It is pure
//! integer arithmetic, so a given seed produces the same stream on every
//! platform. Gaussian variates come from the Box–Muller transform (cosine
//! branch), evaluated in `f64` and rounded once at the end; each variate
//! consumes exactly two raw outputs, which keeps stream positions predictable.
//!
//! This is a statistical generator for simulation, not a cryptographic one.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seeded deterministic random number generator (SplitMix64).
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Next raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`, unbiased via rejection sampling.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is undefined");
        let zone = (u64::MAX / n) * n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal variate (Box–Muller, cosine branch).
    pub fn gaussian_f64(&mut self) -> f64 {
        // u1 in (0, 1] so the logarithm is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Derives an independent stream seed from a base seed and a stream tag.
///
/// Used to give every (sample, step, purpose) its own generator so that
/// resuming a run at step `k` reproduces exactly the stream step `k` saw.
pub fn substream(seed: u64, tag: u64) -> u64 {
    let mut r = Rng::new(seed.wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03)));
    r.next_u64()
}

/// Tensor of i.i.d. standard-normal samples, filled in row-major order.
pub fn gaussian<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(T::of(rng.gaussian_f64()));
    }
    Tensor::new(shape, data)
}

/// Tensor of i.i.d. uniform `[0, 1)` samples, filled in row-major order.
pub fn uniform<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(T::of(rng.next_f64()));
    }
    Tensor::new(shape, data)
}
