//! Run configuration and the drivers behind the `voxsr` binary's `bench`
//! and `gradcheck` subcommands.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::CropSpec;
use crate::error::{Error, Result};
use crate::network::{cost_model, gradient_check_with, GradCheckOptions, Network, NetworkConfig};
use crate::optimizer::{mse_residual_loss, TrainConfig};
use crate::reconstruct::TileSpec;
use crate::resample::CubicParams;
use crate::tensor::{Dims, Real, Shape4, Tensor4};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

/// Process exit code for an error: configuration problems are usage errors,
/// everything else is a runtime failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig { .. } | Error::Json(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub crop: CropSpec,
    /// Scale factors mixed into the training set.
    pub factors: Vec<usize>,
    pub cubic: CubicParams,
    pub tile: TileSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            crop: CropSpec::default(),
            factors: vec![2, 3, 4],
            cubic: CubicParams::default(),
            tile: TileSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.crop.validate()?;
        self.cubic.validate()?;
        self.tile.validate()?;
        if self.factors.is_empty() {
            return Err(Error::config("factors", "must list at least one factor"));
        }
        if let Some(f) = self.factors.iter().find(|&&f| f < 2) {
            return Err(Error::config(
                "factors",
                format!("factors must be at least 2, got {f}"),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse a JSON run configuration. Missing keys take their defaults; unknown
/// keys and invariant violations are rejected with the key in the message.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub depth: usize,
    pub kernel: usize,
    pub channels: usize,
    pub m: usize,
    /// Modelled forward multiply-accumulates.
    pub macs: u64,
    /// Median wall time of one forward plus backward pass.
    pub median_seconds: f64,
    pub macs_per_second: f64,
}

/// Time forward+backward for every `(depth, kernel)` pair on a random `m³`
/// input. The other network fields come from `base`.
pub fn run_bench<T: Real>(
    base: &NetworkConfig,
    depths: &[usize],
    kernels: &[usize],
    m: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if m == 0 || reps == 0 {
        return Err(Error::config("bench", "m and reps must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape4::new(1, Dims::cube(m));
    let x = Tensor4::<T>::from_vec(shape, (0..m * m * m).map(|_| T::of(rng.random())).collect())?;
    let target = Tensor4::<T>::zeros(shape);
    let mut rows = Vec::new();
    for &depth in depths {
        for &kernel in kernels {
            let cfg = NetworkConfig {
                depth,
                kernel,
                ..*base
            };
            cfg.validate()?;
            let net = Network::<f64>::init_gaussian(cfg, seed, 0.01)?.cast::<T>();
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let start = Instant::now();
                let (y, cache) = net.forward(&x)?;
                let (_, d_y) =
                    mse_residual_loss(std::slice::from_ref(&y), std::slice::from_ref(&target))?;
                net.backward(&cache, &d_y[0])?;
                times.push(start.elapsed().as_secs_f64());
            }
            times.sort_by(f64::total_cmp);
            let median = times[times.len() / 2];
            let macs = cost_model(&cfg, m);
            log::info!("bench depth {depth} kernel {kernel}: {macs} MACs, {median:.4} s");
            rows.push(BenchRow {
                depth,
                kernel,
                channels: cfg.channels,
                m,
                macs,
                median_seconds: median,
                macs_per_second: macs as f64 / median,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckGrid {
    pub depths: Vec<usize>,
    pub kernels: Vec<usize>,
    pub residual: Vec<bool>,
    pub channels: usize,
    pub spatial: Dims,
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradcheckGrid {
    fn default() -> Self {
        GradcheckGrid {
            depths: vec![2, 6, 12],
            kernels: vec![1, 3, 5],
            residual: vec![true, false],
            channels: 8,
            spatial: Dims::cube(5),
            seed: 1,
            eps: 1e-5,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub depth: usize,
    pub kernel: usize,
    pub residual: bool,
    pub channels: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
    pub pass: bool,
}

/// Finite-difference check of every config in the grid, always in 64-bit.
pub fn run_gradcheck(grid: &GradcheckGrid, opts: &GradCheckOptions) -> Result<Vec<GradcheckRow>> {
    let mut rows = Vec::new();
    for &depth in &grid.depths {
        for &kernel in &grid.kernels {
            for &residual in &grid.residual {
                let cfg = NetworkConfig {
                    depth,
                    channels: grid.channels,
                    kernel,
                    residual,
                };
                let r = gradient_check_with(cfg, grid.spatial, grid.seed, grid.eps, opts)?;
                rows.push(GradcheckRow {
                    depth,
                    kernel,
                    residual,
                    channels: grid.channels,
                    max_rel_error: r.max_rel_error,
                    checked: r.checked,
                    excluded: r.excluded,
                    pass: r.checked > 0 && r.max_rel_error <= grid.tolerance,
                });
            }
        }
    }
    Ok(rows)
}

/// Write rows as CSV with a header row.
pub fn write_csv<R: Serialize>(rows: &[R], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
