//! Volumetric image quality: MSE, PSNR and a Gaussian-windowed 3D SSIM,
//! all computed in 64-bit on raw (unnormalized) voxel values.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Dims;
use crate::volume::{DType, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L` of the voxel values.
    pub dynamic_range: f64,
}

impl SsimParams {
    pub fn for_dtype(dtype: DType) -> Self {
        SsimParams {
            window: 7,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: dtype.max_value(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 {
            return Err(Error::config(
                "ssim.window",
                format!("must be odd, got {}", self.window),
            ));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(Error::config("ssim.sigma", "must be positive"));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::config("ssim.k1/k2", "must be positive"));
        }
        if self.dynamic_range.is_nan() || self.dynamic_range <= 0.0 {
            return Err(Error::config("ssim.dynamic_range", "must be positive"));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

fn check_pair(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "volumes {} and {} differ",
            a.dims(),
            b.dims()
        )));
    }
    if a.dtype() != b.dtype() {
        return Err(Error::ShapeMismatch(format!(
            "dtypes {} and {} differ",
            a.dtype(),
            b.dtype()
        )));
    }
    Ok(())
}

pub fn mse3d(a: &Volume, b: &Volume) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum / a.dims().len() as f64)
}

/// `10·log10(MAX_I² / MSE)` in dB; `+∞` for identical volumes.
pub fn psnr(a: &Volume, b: &Volume) -> Result<f64> {
    let mse = mse3d(a, b)?;
    Ok(psnr_from_mse(mse, a.dtype().max_value()))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (max_value * max_value / mse).log10()
}

/// Report formatting: infinite PSNR prints as `inf`.
pub fn format_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

/// Normalized 1D Gaussian of odd length `window`.
pub fn gaussian_window(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as f64;
    let raw: Vec<f64> = (0..window)
        .map(|i| {
            let t = i as f64 - r;
            (-t * t / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode filtering of a real grid along one axis.
fn filter_axis(data: &[f64], dims: Dims, axis: usize, g: &[f64]) -> (Vec<f64>, Dims) {
    let n = g.len();
    let mut out_arr = dims.as_array();
    out_arr[axis] -= n - 1;
    let od = Dims::from_array(out_arr);
    let mut out = vec![0f64; od.len()];
    out.par_chunks_mut(od.height * od.width)
        .enumerate()
        .for_each(|(z, plane)| {
            for y in 0..od.height {
                for x in 0..od.width {
                    let mut acc = 0f64;
                    for (t, &w) in g.iter().enumerate() {
                        let idx = match axis {
                            0 => dims.index(z + t, y, x),
                            1 => dims.index(z, y + t, x),
                            _ => dims.index(z, y, x + t),
                        };
                        acc += w * data[idx];
                    }
                    plane[y * od.width + x] = acc;
                }
            }
        });
    (out, od)
}

fn gaussian_moment(data: &[f64], dims: Dims, g: &[f64]) -> (Vec<f64>, Dims) {
    let (a, d) = filter_axis(data, dims, 2, g);
    let (b, d) = filter_axis(&a, d, 1, g);
    filter_axis(&b, d, 0, g)
}

/// Mean SSIM over every window center whose window lies inside the volume.
pub fn ssim3d(a: &Volume, b: &Volume, p: &SsimParams) -> Result<f64> {
    check_pair(a, b)?;
    p.validate()?;
    if a.dims().min_edge() < p.window {
        return Err(Error::ShapeMismatch(format!(
            "volume {} is smaller than the {}-voxel SSIM window",
            a.dims(),
            p.window
        )));
    }
    let dims = a.dims();
    let g = gaussian_window(p.window, p.sigma);
    let xa: Vec<f64> = a.data().iter().map(|&v| f64::from(v)).collect();
    let xb: Vec<f64> = b.data().iter().map(|&v| f64::from(v)).collect();
    let sq = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(x, y)| x * y).collect() };

    let (mu_a, od) = gaussian_moment(&xa, dims, &g);
    let (mu_b, _) = gaussian_moment(&xb, dims, &g);
    let (e_aa, _) = gaussian_moment(&sq(&xa, &xa), dims, &g);
    let (e_bb, _) = gaussian_moment(&sq(&xb, &xb), dims, &g);
    let (e_ab, _) = gaussian_moment(&sq(&xa, &xb), dims, &g);

    let (c1, c2) = (p.c1(), p.c2());
    let mut total = 0f64;
    for i in 0..od.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
        total += num / den;
    }
    Ok(total / od.len() as f64)
}
