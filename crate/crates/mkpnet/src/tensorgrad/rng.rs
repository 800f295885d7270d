//! Seeded, splittable randomness. Every stochastic draw in the crate goes
//! through an explicit [`Rng`] value; there is no global generator.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Derives an independent stream without disturbing this generator.
    pub fn split(&self, stream: u64) -> Self {
        let mut inner = self.0.clone();
        inner.set_stream(stream.wrapping_add(1));
        Rng(inner)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f32 {
        self.0.gen::<f32>()
    }

    pub fn gen_range(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    /// Standard normal via Box-Muller (two uniforms per call, one value kept;
    /// keeps the draw count deterministic and implementation-independent).
    pub fn normal(&mut self) -> f32 {
        let u1 = (1.0 - self.0.gen::<f64>()).max(1e-12);
        let u2: f64 = self.0.gen();
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    pub fn normal_vec(&mut self, n: usize, std: f32) -> Vec<f32> {
        (0..n).map(|_| self.normal() * std).collect()
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.0.gen_range(0..=i);
            xs.swap(i, j);
        }
    }
}
