//! Deterministic synthetic volumes for tests, demos and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Dims;
use crate::volume::{DType, Volume};

/// Two-phase "grain and pore" texture: a random superposition of plane
/// waves pushed through a steep `tanh`, giving sharp but smooth-walled
/// boundaries similar to a rock CT slice stack. `uint8`.
pub fn textured_volume(dims: Dims, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<([f64; 3], f64)> = (0..6)
        .map(|_| {
            let mut k = [0f64; 3];
            let mut norm = 0.0;
            for c in &mut k {
                *c = rng.random_range(-1.0..1.0);
                norm += *c * *c;
            }
            let len = rng.random_range(0.35..0.8) / norm.sqrt().max(1e-9);
            for c in &mut k {
                *c *= len;
            }
            (k, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let shade: ([f64; 3], f64) = (
        [0.11, -0.07, 0.05],
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let mut values = Vec::with_capacity(dims.len());
    for z in 0..dims.depth {
        for y in 0..dims.height {
            for x in 0..dims.width {
                let p = [z as f64, y as f64, x as f64];
                let phase = |k: &[f64; 3], phi: f64| k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phi;
                let s: f64 = waves
                    .iter()
                    .map(|(k, phi)| phase(k, *phi).cos())
                    .sum::<f64>()
                    / 6f64.sqrt();
                let v = 125.0 + 70.0 * (2.5 * s).tanh() + 12.0 * phase(&shade.0, shade.1).cos();
                values.push(v);
            }
        }
    }
    Volume::from_reals(dims, DType::U8, 1.0, values).expect("generated values fit uint8")
}

/// Smooth product of sinusoids in `[0, 255]`, `uint8`.
pub fn smooth_volume(dims: Dims) -> Volume {
    let mut values = Vec::with_capacity(dims.len());
    let w = |n: usize| std::f64::consts::TAU / n as f64;
    for z in 0..dims.depth {
        for y in 0..dims.height {
            for x in 0..dims.width {
                let v = (w(dims.depth) * z as f64).sin()
                    * (w(dims.height) * y as f64).cos()
                    * (w(dims.width) * x as f64 + 0.3).sin();
                values.push(127.5 + 120.0 * v);
            }
        }
    }
    Volume::from_reals(dims, DType::U8, 1.0, values).expect("generated values fit uint8")
}
