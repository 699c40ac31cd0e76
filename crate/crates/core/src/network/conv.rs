//! Same-padded, stride-1 3D convolution kernels.
//!
//! Both kernels lower the convolution to matrix products: the input around
//! a slab of output rows is unrolled into a `(c_in·k³) × columns` matrix
//! (zeros where a tap falls in the padding) and multiplied by the weight
//! matrix. Work is split into a fixed set of slabs that does not depend on
//! the thread count, and partial results are combined in slab order, so
//! outputs are bitwise identical for any number of threads.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::tensor::{Dims, Real};

/// Upper bound on output voxels per slab.
const SLAB_COLUMNS: usize = 4096;

/// Counts multiply-accumulates issued by [`conv_same`]. Taps that read the
/// zero padding are tallied separately.
#[derive(Debug, Default)]
pub struct MacCounter {
    computed: AtomicU64,
    padded: AtomicU64,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn computed(&self) -> u64 {
        self.computed.load(Ordering::Relaxed)
    }

    pub fn padded(&self) -> u64 {
        self.padded.load(Ordering::Relaxed)
    }

    /// Dense count: computed MACs plus zero-padding reads.
    pub fn total(&self) -> u64 {
        self.computed() + self.padded()
    }

    fn add(&self, computed: u64, padded: u64) {
        self.computed.fetch_add(computed, Ordering::Relaxed);
        self.padded.fetch_add(padded, Ordering::Relaxed);
    }
}

/// Valid output range along one axis for kernel offset `d` (already
/// centered, i.e. in `-r..=r`). Empty when `|d| >= n`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(n), hi.max(lo.min(n)))
}

/// Output rows `y0..y0 + rows` of plane `z`.
#[derive(Debug, Clone, Copy)]
struct Slab {
    z: usize,
    y0: usize,
    rows: usize,
}

impl Slab {
    fn offset(&self, dims: Dims) -> usize {
        (self.z * dims.height + self.y0) * dims.width
    }

    fn columns(&self, dims: Dims) -> usize {
        self.rows * dims.width
    }
}

fn slabs(dims: Dims) -> Vec<Slab> {
    let rows = (SLAB_COLUMNS / dims.width.max(1)).clamp(1, dims.height.max(1));
    let mut out = Vec::new();
    for z in 0..dims.depth {
        for y0 in (0..dims.height).step_by(rows) {
            out.push(Slab {
                z,
                y0,
                rows: rows.min(dims.height - y0),
            });
        }
    }
    out
}

/// Unroll the receptive fields of `slab` into `col`, one row per
/// `(channel, kz, ky, kx)` and one column per output voxel. Returns the
/// number of entries read from the volume and the number zero-filled.
fn im2col<T: Real>(
    input: &[T],
    c_in: usize,
    dims: Dims,
    k: usize,
    slab: Slab,
    col: &mut Vec<T>,
) -> (u64, u64) {
    let (d, h, w) = (dims.depth, dims.height, dims.width);
    let vol = dims.len();
    let r = (k / 2) as isize;
    let n = slab.columns(dims);
    col.clear();
    col.resize(c_in * k * k * k * n, T::zero());
    let (mut valid, mut zero) = (0u64, 0u64);
    let mut rows = col.chunks_exact_mut(n);
    for i in 0..c_in {
        let chan = &input[i * vol..(i + 1) * vol];
        for kz in 0..k {
            let sz = slab.z as isize + kz as isize - r;
            for ky in 0..k {
                for kx in 0..k {
                    let dst = rows.next().expect("row per tap");
                    if sz < 0 || sz >= d as isize {
                        zero += n as u64;
                        continue;
                    }
                    let shift = kx as isize - r;
                    let (lo, hi) = valid_range(w, shift);
                    for (yy, seg) in dst.chunks_exact_mut(w).enumerate() {
                        let sy = (slab.y0 + yy) as isize + ky as isize - r;
                        if sy < 0 || sy >= h as isize || lo >= hi {
                            zero += w as u64;
                            continue;
                        }
                        let src = &chan[(sz as usize * h + sy as usize) * w..][..w];
                        let s_lo = (lo as isize + shift) as usize;
                        seg[lo..hi].copy_from_slice(&src[s_lo..s_lo + (hi - lo)]);
                        valid += (hi - lo) as u64;
                        zero += (w - (hi - lo)) as u64;
                    }
                }
            }
        }
    }
    (valid, zero)
}

/// Raw output pointer shared by slab tasks that write disjoint elements.
#[derive(Clone, Copy)]
struct SharedMut<T>(*mut T);

// SAFETY: tasks holding a `SharedMut` write disjoint elements (see `conv_same`).
unsafe impl<T: Send> Send for SharedMut<T> {}
unsafe impl<T: Send> Sync for SharedMut<T> {}

/// `out[o, p] = bias[o] + Σ_i Σ_δ weights[o, i, δ] · input[i, p + δ - r]`
/// with zero reads outside the volume. `weights` is laid out
/// `(c_out, c_in, k, k, k)`.
#[allow(clippy::too_many_arguments)]
pub fn conv_same<T: Real>(
    input: &[T],
    c_in: usize,
    dims: Dims,
    weights: &[T],
    bias: Option<&[T]>,
    c_out: usize,
    k: usize,
    out: &mut [T],
    counter: Option<&MacCounter>,
) {
    let vol = dims.len();
    let kk = c_in * k * k * k;
    assert_eq!(input.len(), c_in * vol, "input size");
    assert_eq!(weights.len(), c_out * kk, "weight size");
    assert_eq!(out.len(), c_out * vol, "output size");
    if vol == 0 {
        return;
    }
    for (o, chan) in out.chunks_exact_mut(vol).enumerate() {
        chan.fill(bias.map_or(T::zero(), |b| b[o]));
    }
    let dst = SharedMut(out.as_mut_ptr());
    slabs(dims)
        .into_par_iter()
        .for_each_init(Vec::new, |col, slab| {
            let (valid, zero) = im2col(input, c_in, dims, k, slab, col);
            if let Some(c) = counter {
                c.add(valid * c_out as u64, zero * c_out as u64);
            }
            let n = slab.columns(dims);
            // capture the whole Send wrapper, not its raw pointer field
            #[allow(clippy::redundant_locals)]
            let dst = dst;
            if c_out == 1 {
                // SAFETY: as below, with a single destination row.
                let row =
                    unsafe { std::slice::from_raw_parts_mut(dst.0.add(slab.offset(dims)), n) };
                for (&w, src) in weights.iter().zip(col.chunks_exact(n)) {
                    for (o, &v) in row.iter_mut().zip(src) {
                        *o = *o + w * v;
                    }
                }
                return;
            }
            // SAFETY: `weights` is c_out × kk row-major and `col` kk × n row-major,
            // both fully in bounds. The destination view has rows `o·vol +
            // offset .. + n` for o < c_out, which lie inside `out` and belong to
            // this slab alone since slabs partition every channel's voxels.
            unsafe {
                T::gemm_acc(
                    c_out,
                    kk,
                    n,
                    weights.as_ptr(),
                    kk as isize,
                    1,
                    col.as_ptr(),
                    n as isize,
                    1,
                    dst.0.add(slab.offset(dims)),
                    vol as isize,
                    1,
                );
            }
        });
}

/// Accumulate `grad_w[o, i, δ] += Σ_p d_out[o, p] · input[i, p + δ - r]` and
/// `grad_b[o] += Σ_p d_out[o, p]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_weight_grad<T: Real>(
    input: &[T],
    c_in: usize,
    dims: Dims,
    d_out: &[T],
    c_out: usize,
    k: usize,
    grad_w: &mut [T],
    grad_b: &mut [T],
) {
    let vol = dims.len();
    let kk = c_in * k * k * k;
    assert_eq!(input.len(), c_in * vol, "input size");
    assert_eq!(d_out.len(), c_out * vol, "output gradient size");
    assert_eq!(grad_w.len(), c_out * kk, "weight gradient size");
    assert_eq!(grad_b.len(), c_out, "bias gradient size");
    if vol == 0 {
        return;
    }
    let partials: Vec<Vec<T>> = slabs(dims)
        .into_par_iter()
        .map_init(Vec::new, |col, slab| {
            im2col(input, c_in, dims, k, slab, col);
            let n = slab.columns(dims);
            let mut g = vec![T::zero(); c_out * kk];
            if c_out == 1 {
                let d = &d_out[slab.offset(dims)..][..n];
                for (gw, src) in g.iter_mut().zip(col.chunks_exact(n)) {
                    *gw = dot(d, src);
                }
                return g;
            }
            // SAFETY: the d_out view has rows `o·vol + offset .. + n`, inside
            // `d_out`; `col` is kk × n and is read transposed; `g` is
            // c_out × kk and owned by this task.
            unsafe {
                T::gemm_acc(
                    c_out,
                    n,
                    kk,
                    d_out.as_ptr().add(slab.offset(dims)),
                    vol as isize,
                    1,
                    col.as_ptr(),
                    1,
                    n as isize,
                    g.as_mut_ptr(),
                    kk as isize,
                    1,
                );
            }
            g
        })
        .collect();
    for g in partials {
        for (a, b) in grad_w.iter_mut().zip(g) {
            *a = *a + b;
        }
    }
    for (gb, chan) in grad_b.iter_mut().zip(d_out.chunks_exact(vol)) {
        *gb = *gb + chan.iter().fold(T::zero(), |acc, &v| acc + v);
    }
}

/// Dot product with eight interleaved accumulators so it vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] = acc[j] + x[j] * y[j];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// Weights of the adjoint convolution: channels transposed and spatial taps
/// mirrored, `(c_in, c_out, k, k, k)`.
pub fn adjoint_weights<T: Real>(weights: &[T], c_out: usize, c_in: usize, k: usize) -> Vec<T> {
    let k3 = k * k * k;
    let mut out = vec![T::zero(); weights.len()];
    for o in 0..c_out {
        for i in 0..c_in {
            let src = &weights[(o * c_in + i) * k3..][..k3];
            let dst = &mut out[(i * c_out + o) * k3..][..k3];
            for (t, v) in src.iter().enumerate() {
                dst[k3 - 1 - t] = *v;
            }
        }
    }
    out
}
