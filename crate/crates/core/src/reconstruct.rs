//! Whole-volume super-resolution in bounded memory.
//!
//! The cubic-upsampled volume is partitioned into disjoint core tiles. Each
//! tile is run through the network together with a halo of `margin` voxels
//! of real context, and only the core of the result is kept. With a margin
//! at least the network's receptive-field radius the tiled result is
//! bitwise equal to running the whole volume at once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ActivationMeter, Network};
use crate::resample::{upsample_cubic, CubicParams};
use crate::tensor::{Dims, Real, Shape4, Tensor4};
use crate::volume::{from_normalized, to_normalized, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Margin {
    /// Use the network's receptive-field radius.
    #[default]
    Auto,
    Voxels(usize),
}

impl Margin {
    pub fn resolve(self, net_radius: usize) -> usize {
        match self {
            Margin::Auto => net_radius,
            Margin::Voxels(n) => n,
        }
    }
}

impl std::str::FromStr for Margin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Margin::Auto);
        }
        s.parse().map(Margin::Voxels).map_err(|_| {
            Error::config(
                "tile.margin",
                format!("expected \"auto\" or a voxel count, got {s:?}"),
            )
        })
    }
}

impl Serialize for Margin {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Margin::Auto => s.serialize_str("auto"),
            Margin::Voxels(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Margin {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Count(usize),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Count(n) => Ok(Margin::Voxels(n)),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileSpec {
    pub tile: usize,
    pub margin: Margin,
}

impl Default for TileSpec {
    fn default() -> Self {
        TileSpec {
            tile: 100,
            margin: Margin::Auto,
        }
    }
}

impl TileSpec {
    pub fn new(tile: usize, margin: Margin) -> Self {
        TileSpec { tile, margin }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 {
            return Err(Error::config("tile.tile", "must be positive"));
        }
        if let Margin::Voxels(m) = self.margin {
            check_margin(self.tile, m)?;
        }
        Ok(())
    }
}

fn check_margin(tile: usize, margin: usize) -> Result<()> {
    if tile <= 2 * margin {
        return Err(Error::config(
            "tile.margin",
            format!("tile edge {tile} must exceed twice the margin {margin}"),
        ));
    }
    Ok(())
}

/// Axis-aligned box `[start, start + size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub start: [usize; 3],
    pub size: Dims,
}

impl Region {
    pub fn end(&self) -> [usize; 3] {
        let s = self.size.as_array();
        [
            self.start[0] + s[0],
            self.start[1] + s[1],
            self.start[2] + s[2],
        ]
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        let e = self.end();
        (0..3).all(|a| p[a] >= self.start[a] && p[a] < e[a])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TilePlan {
    /// Voxels this tile is responsible for writing.
    pub core: Region,
    /// Core grown by the margin, clamped to the volume.
    pub read: Region,
}

/// Partition `dims` into cores of edge `tile` (the last per axis truncated
/// at the boundary) and attach halo-extended read regions.
pub fn tile_plan(dims: Dims, tile: usize, margin: usize) -> Vec<TilePlan> {
    let axis = |n: usize| -> Vec<((usize, usize), (usize, usize))> {
        let t = tile.clamp(1, n.max(1));
        (0..n)
            .step_by(t)
            .map(|s| {
                let e = (s + t).min(n);
                let rs = s.saturating_sub(margin);
                let re = (e + margin).min(n);
                ((s, e - s), (rs, re - rs))
            })
            .collect()
    };
    let (zs, ys, xs) = (axis(dims.depth), axis(dims.height), axis(dims.width));
    let mut plan = Vec::with_capacity(zs.len() * ys.len() * xs.len());
    for &(cz, rz) in &zs {
        for &(cy, ry) in &ys {
            for &(cx, rx) in &xs {
                plan.push(TilePlan {
                    core: Region {
                        start: [cz.0, cy.0, cx.0],
                        size: Dims::new(cz.1, cy.1, cx.1),
                    },
                    read: Region {
                        start: [rz.0, ry.0, rx.0],
                        size: Dims::new(rz.1, ry.1, rx.1),
                    },
                });
            }
        }
    }
    plan
}

/// Run the network over an already normalized single-channel volume tile by
/// tile. Tiles are processed one after another so that peak activation
/// memory is that of a single halo-extended tile.
pub fn predict_tiled<T: Real>(
    net: &Network<T>,
    x: &Tensor4<T>,
    spec: &TileSpec,
    meter: Option<&ActivationMeter>,
) -> Result<Tensor4<T>> {
    spec.validate()?;
    let radius = net.config().receptive_radius();
    let margin = spec.margin.resolve(radius);
    check_margin(spec.tile, margin)?;
    if spec.tile < 2 * radius + 1 {
        log::warn!(
            "tile edge {} is smaller than the receptive field ({} voxels)",
            spec.tile,
            2 * radius + 1
        );
    }
    if margin < radius {
        log::warn!(
            "margin {margin} is below the receptive-field radius {radius}; tile seams will differ"
        );
    }
    let dims = x.spatial();
    let mut out = Tensor4::zeros(Shape4::new(1, dims));
    for t in tile_plan(dims, spec.tile, margin) {
        let piece = x.crop(t.read.start, t.read.size);
        let y = net.predict(&piece, meter)?;
        let offset = [
            t.core.start[0] - t.read.start[0],
            t.core.start[1] - t.read.start[1],
            t.core.start[2] - t.read.start[2],
        ];
        out.paste(t.core.start, &y, offset, t.core.size);
    }
    Ok(out)
}

/// Normalized network output for `lr` upscaled by `f`, before quantization.
pub fn super_resolve_tensor<T: Real>(
    net: &Network<T>,
    lr: &Volume,
    f: usize,
    spec: &TileSpec,
    cubic: &CubicParams,
    meter: Option<&ActivationMeter>,
) -> Result<Tensor4<T>> {
    let up = upsample_cubic(lr, f, cubic)?;
    let x = to_normalized::<T>(&up);
    predict_tiled(net, &x, spec, meter)
}

/// Upscale `lr` by `f`: cubic upsampling followed by tiled network
/// inference, quantized back to the input dtype.
pub fn super_resolve<T: Real>(
    net: &Network<T>,
    lr: &Volume,
    f: usize,
    spec: &TileSpec,
) -> Result<Volume> {
    super_resolve_with(net, lr, f, spec, &CubicParams::default(), None)
}

pub fn super_resolve_with<T: Real>(
    net: &Network<T>,
    lr: &Volume,
    f: usize,
    spec: &TileSpec,
    cubic: &CubicParams,
    meter: Option<&ActivationMeter>,
) -> Result<Volume> {
    let y = super_resolve_tensor(net, lr, f, spec, cubic, meter)?;
    from_normalized(&y, lr.dtype(), lr.voxel_size_um() / f as f64)
}

/// Bytes a training-style forward pass would keep alive over the whole
/// volume (input plus pre- and post-activations of every layer).
pub fn full_forward_cache_bytes(
    net_channels: usize,
    depth: usize,
    voxels: usize,
    elem_bytes: usize,
) -> u128 {
    let per_voxel = 1 + 2 * (depth as u128 - 1) * net_channels as u128 + 1;
    per_voxel * voxels as u128 * elem_bytes as u128
}
