//! Integer-factor degradation geometry: box-mean downsampling and separable
//! cubic-convolution upsampling in three dimensions.
//!
//! Grid convention: output sample `o` along an axis maps to source
//! coordinate `(o + 0.5) / f - 0.5` (centers aligned). Reads beyond the
//! volume clamp to the nearest edge voxel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Dims;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CubicParams {
    pub a: f64,
}

impl Default for CubicParams {
    fn default() -> Self {
        CubicParams { a: -0.5 }
    }
}

impl CubicParams {
    pub fn new(a: f64) -> Result<Self> {
        let p = CubicParams { a };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a < 0.0 && self.a.is_finite()) {
            return Err(Error::config(
                "cubic.a",
                format!("must be negative, got {}", self.a),
            ));
        }
        Ok(())
    }
}

/// Cubic convolution kernel weight at offset `t`.
pub fn cubic_kernel(t: f64, params: &CubicParams) -> f64 {
    let a = params.a;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t <= 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Z,
    Y,
    X,
}

impl Axis {
    const fn slot(self) -> usize {
        match self {
            Axis::Z => 0,
            Axis::Y => 1,
            Axis::X => 2,
        }
    }
}

/// Trailing voxels dropped so that every axis divides by the factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropReport {
    pub original: Dims,
    pub kept: Dims,
}

impl CropReport {
    pub fn is_cropped(&self) -> bool {
        self.original != self.kept
    }
}

/// Largest leading region of `dims` whose edges are multiples of `f`.
pub fn divisible_dims(dims: Dims, f: usize) -> Dims {
    Dims::new(dims.depth / f * f, dims.height / f * f, dims.width / f * f)
}

fn check_factor(f: usize) -> Result<()> {
    if f < 2 {
        return Err(Error::InvalidFactor(f));
    }
    Ok(())
}

/// Average each `f³` block into one voxel, rounding onto the dtype grid.
/// Dimensions that do not divide by `f` lose their trailing remainder.
pub fn downsample_box(vol: &Volume, f: usize) -> Result<(Volume, CropReport)> {
    check_factor(f)?;
    let src = vol.dims();
    let kept = divisible_dims(src, f);
    if kept.is_empty() {
        return Err(Error::InvalidVolume(format!(
            "volume {src} is smaller than factor {f}"
        )));
    }
    let report = CropReport {
        original: src,
        kept,
    };
    if report.is_cropped() {
        log::warn!("downsample x{f}: cropped {src} to {kept}");
    }
    let out_dims = Dims::new(kept.depth / f, kept.height / f, kept.width / f);
    let data = vol.data();
    let inv = 1.0 / (f * f * f) as f64;
    let slab = out_dims.height * out_dims.width;
    let mut out = vec![0f64; out_dims.len()];
    out.par_chunks_mut(slab)
        .enumerate()
        .for_each(|(oz, plane)| {
            for oy in 0..out_dims.height {
                for ox in 0..out_dims.width {
                    let mut sum = 0f64;
                    for dz in 0..f {
                        for dy in 0..f {
                            let row = src.index(oz * f + dz, oy * f + dy, ox * f);
                            sum += data[row..row + f]
                                .iter()
                                .map(|&v| f64::from(v))
                                .sum::<f64>();
                        }
                    }
                    plane[oy * out_dims.width + ox] = sum * inv;
                }
            }
        });
    let down = Volume::from_reals(out_dims, vol.dtype(), vol.voxel_size_um() * f as f64, out)?;
    Ok((down, report))
}

type Taps = [(usize, f64); 4];

fn axis_taps(n_in: usize, f: usize, params: &CubicParams) -> Vec<Taps> {
    let last = n_in as isize - 1;
    (0..n_in * f)
        .map(|o| {
            let s = (o as f64 + 0.5) / f as f64 - 0.5;
            let base = s.floor();
            let t = s - base;
            let base = base as isize;
            let mut taps = [(0usize, 0f64); 4];
            for (j, tap) in taps.iter_mut().enumerate() {
                let offset = j as isize - 1;
                let idx = (base + offset).clamp(0, last) as usize;
                *tap = (idx, cubic_kernel(t - offset as f64, params));
            }
            taps
        })
        .collect()
}

/// Upsample a real-valued grid by `f` along one axis.
pub fn upsample_axis(
    data: &[f64],
    dims: Dims,
    axis: Axis,
    f: usize,
    params: &CubicParams,
) -> (Vec<f64>, Dims) {
    let mut out_arr = dims.as_array();
    out_arr[axis.slot()] *= f;
    let out_dims = Dims::from_array(out_arr);
    let taps = axis_taps(dims.as_array()[axis.slot()], f, params);
    let slab = out_dims.height * out_dims.width;
    let mut out = vec![0f64; out_dims.len()];
    out.par_chunks_mut(slab).enumerate().for_each(|(z, plane)| {
        for y in 0..out_dims.height {
            let row = &mut plane[y * out_dims.width..(y + 1) * out_dims.width];
            match axis {
                Axis::X => {
                    let src = &data[dims.index(z, y, 0)..dims.index(z, y, 0) + dims.width];
                    for (o, t) in row.iter_mut().zip(&taps) {
                        *o = t.iter().map(|&(i, w)| w * src[i]).sum();
                    }
                }
                Axis::Y => {
                    let t = &taps[y];
                    for (x, o) in row.iter_mut().enumerate() {
                        *o = t.iter().map(|&(i, w)| w * data[dims.index(z, i, x)]).sum();
                    }
                }
                Axis::Z => {
                    let t = &taps[z];
                    for (x, o) in row.iter_mut().enumerate() {
                        *o = t.iter().map(|&(i, w)| w * data[dims.index(i, y, x)]).sum();
                    }
                }
            }
        }
    });
    (out, out_dims)
}

/// Separable tricubic upsampling of a real grid, applying the axes in `order`.
pub fn upsample_grid(
    data: &[f64],
    dims: Dims,
    f: usize,
    params: &CubicParams,
    order: [Axis; 3],
) -> (Vec<f64>, Dims) {
    let mut cur = data.to_vec();
    let mut cur_dims = dims;
    for axis in order {
        let (next, next_dims) = upsample_axis(&cur, cur_dims, axis, f, params);
        cur = next;
        cur_dims = next_dims;
    }
    (cur, cur_dims)
}

/// Cubic-convolution upsampling by `f` along x, then y, then z. Integer
/// volumes are rounded and clamped to their dtype range.
pub fn upsample_cubic(vol: &Volume, f: usize, params: &CubicParams) -> Result<Volume> {
    check_factor(f)?;
    params.validate()?;
    let src: Vec<f64> = vol.data().iter().map(|&v| f64::from(v)).collect();
    let (out, dims) = upsample_grid(&src, vol.dims(), f, params, [Axis::X, Axis::Y, Axis::Z]);
    Volume::from_reals(dims, vol.dtype(), vol.voxel_size_um() / f as f64, out)
}
