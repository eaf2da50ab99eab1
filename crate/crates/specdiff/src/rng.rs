//! Counter-based deterministic random source.
//!
//! The integer stream is a pure function of (seed, counter):
//!
//! ```text
//! out_i = mix64(seed + (i + 1) * GAMMA)
//! ```
//!
//! with `GAMMA = 0x9E3779B97F4A7C15` and `mix64` the SplitMix64 finalizer
//! (constants `0xBF58476D1CE4E5B9`, `0x94D049BB133111EB`, shifts 30/27/31).
//! A reimplementation in another language reproduces the stream bit-exactly.
//!
//! Uniforms take the top 53 bits mapped into (0, 1]; normals use Box-Muller
//! on one uniform pair per draw (no caching, so the counter advances by
//! exactly two per normal).

use crate::tensor::Tensor;

const GAMMA: u64 = 0x9E3779B97F4A7C15;
const STREAM_SALT: u64 = 0xD1B54A32D192ED03;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    counter: u64,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        RandomSource { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in (0, 1].
    pub fn next_uniform(&mut self) -> f64 {
        let bits = self.next_u64() >> 11; // 53 bits
        (bits + 1) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in 0..n via the 128-bit multiply trick (no modulo bias
    /// beyond 2^-64, deterministic across platforms).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.next_normal()).collect();
        Tensor::new(shape.to_vec(), data).expect("shape/data consistent by construction")
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * self.next_uniform()).collect();
        Tensor::new(shape.to_vec(), data).expect("shape/data consistent by construction")
    }

    /// Derive an independent child stream. The rule is documented so
    /// per-chain sub-seeds are reproducible: child_seed =
    /// mix64(seed ^ mix64(stream * GAMMA ^ STREAM_SALT)).
    pub fn fork(&self, stream: u64) -> RandomSource {
        RandomSource::new(mix64(self.seed ^ mix64(stream.wrapping_mul(GAMMA) ^ STREAM_SALT)))
    }
}
