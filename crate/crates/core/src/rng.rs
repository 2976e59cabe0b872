//! Counter-based deterministic random numbers.
//!
//! The generator is SplitMix64 driven by an explicit counter: draw `n` is
//! `mix(seed + (n + 1) * 0x9E3779B97F4A7C15)` with the SplitMix64 finalizer.
//! Uniforms take the top 53 bits; normals use Box-Muller in pairs (the
//! second value of each pair is cached). A stored noise record is therefore
//! replayable from `(seed, counter)` alone.

use crate::error::{Error, Result};
use crate::latent::Latent;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            counter: 0,
            spare_normal: None,
        }
    }

    /// Independent stream for parallel task `index` under a master seed.
    pub fn derive(master: u64, index: u64) -> Self {
        Self::new(mix64(master ^ mix64(index.wrapping_add(GOLDEN_GAMMA))))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// A latent with i.i.d. standard normal entries.
    pub fn sample_gaussian(&mut self, shape: &[usize]) -> Result<Latent> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.standard_normal()).collect();
        Latent::new(data, shape.to_vec())
    }

    /// Uniform time in `[t_min, t_max)`.
    pub fn sample_time(&mut self, t_min: f64, t_max: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&t_min) || !(t_min < t_max && t_max <= 1.0) {
            return Err(Error::Domain(format!(
                "time range [{t_min}, {t_max}) must satisfy 0 <= t_min < t_max <= 1"
            )));
        }
        Ok(t_min + (t_max - t_min) * self.uniform())
    }

    /// Index in `0..n` (n > 0).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }
}
