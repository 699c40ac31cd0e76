//! Helpers shared by the integration tests: scalar reference metrics and the
//! toy training task.
#![allow(dead_code)]

use voxsr::dataset::{build_training_set, CropSpec, Dataset};
use voxsr::network::Network;
use voxsr::optimizer::{train_with, IterationRecord, OptimizerState, TrainConfig};
use voxsr::synthetic::textured_volume;
use voxsr::{Dims, NetworkConfig, Result, Volume};

pub fn mse_reference(a: &Volume, b: &Volume) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.data().len() {
        let d = a.data()[i] as f64 - b.data()[i] as f64;
        sum += d * d;
    }
    sum / a.data().len() as f64
}

/// Mean SSIM over all window positions fully inside the volume, computed
/// with explicit 3D window sums at every position.
pub fn ssim_reference(
    a: &Volume,
    b: &Volume,
    window: usize,
    sigma: f64,
    dynamic_range: f64,
) -> f64 {
    let d = a.dims();
    let r = window as i64 / 2;
    let mut w3 = vec![0.0; window * window * window];
    let mut total_w = 0.0;
    for i in 0..window {
        for j in 0..window {
            for k in 0..window {
                let (di, dj, dk) = (i as i64 - r, j as i64 - r, k as i64 - r);
                let v = (-((di * di + dj * dj + dk * dk) as f64) / (2.0 * sigma * sigma)).exp();
                w3[(i * window + j) * window + k] = v;
                total_w += v;
            }
        }
    }
    for v in &mut w3 {
        *v /= total_w;
    }
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let mut sum = 0.0;
    let mut count = 0usize;
    for z in 0..=d.depth - window {
        for y in 0..=d.height - window {
            for x in 0..=d.width - window {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..window {
                    for j in 0..window {
                        for k in 0..window {
                            let w = w3[(i * window + j) * window + k];
                            let p = a.get(z + i, y + j, x + k) as f64;
                            let q = b.get(z + i, y + j, x + k) as f64;
                            ma += w * p;
                            mb += w * q;
                            aa += w * p * p;
                            bb += w * q * q;
                            ab += w * p * q;
                        }
                    }
                }
                let va = aa - ma * ma;
                let vb = bb - mb * mb;
                let cov = ab - ma * mb;
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// The toy task: one textured 32³ volume at factor 2, cut into 27 blocks
/// of 16³ (4 batches of 8 per epoch).
pub const TOY_EDGE: usize = 32;
pub const TOY_VOLUME_SEED: u64 = 7;
pub const TOY_CROP: CropSpec = CropSpec {
    i_sub: 16,
    stride: 8,
};
pub const TOY_BATCH: usize = 8;

pub fn toy_volume() -> Volume {
    textured_volume(Dims::cube(TOY_EDGE), TOY_VOLUME_SEED)
}

pub fn toy_dataset(seed: u64) -> Dataset {
    build_training_set(&[toy_volume()], &[2], &TOY_CROP, seed).expect("toy dataset")
}

pub fn toy_train_config(ds: &Dataset, iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: TOY_BATCH,
        epochs: iterations.div_ceil(ds.batches_per_epoch(TOY_BATCH)),
        seed,
        ..TrainConfig::default()
    }
}

pub struct ToyRun {
    pub net: Network<f32>,
    pub iterations: Vec<IterationRecord>,
    pub epoch_losses: Vec<f64>,
}

/// Train a freshly initialized network on the toy task for `iterations`
/// updates (rounded up to whole epochs). `stop` ends training after the
/// first epoch in which it returns true for some iteration.
pub fn train_toy(
    cfg: NetworkConfig,
    seed: u64,
    iterations: usize,
    mut stop: impl FnMut(&IterationRecord) -> bool,
) -> Result<ToyRun> {
    let ds = toy_dataset(seed);
    let tc = toy_train_config(&ds, iterations, seed);
    let mut net = voxsr::init_network(cfg, seed)?;
    let mut state = OptimizerState::new(&net);
    let mut run_iterations = Vec::new();
    let mut epoch_losses = Vec::new();
    for _ in 0..tc.epochs {
        let one = TrainConfig { epochs: 1, ..tc };
        let mut done = false;
        let h = train_with(&mut net, &ds, &one, &mut state, |r| done |= stop(r))?;
        run_iterations.extend(h.iterations);
        epoch_losses.extend(h.epochs.iter().map(|e| e.loss));
        if done {
            break;
        }
    }
    Ok(ToyRun {
        net,
        iterations: run_iterations,
        epoch_losses,
    })
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}
