//! Training-set construction: degrade ground-truth volumes, crop matching
//! sub-blocks from the degraded and original volumes, and store the
//! residual between them.
//!
//! Dataset file layout (little-endian):
//!
//! ```text
//! magic "3DDS" | version u32 | pair count u64 | i_sub u32
//! per pair: input f32 × i_sub³ | residual f32 × i_sub³ | scale u32
//! ```

use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::{downsample_box, upsample_cubic, CubicParams};
use crate::tensor::{Dims, Shape4, Tensor4};
use crate::volume::{to_normalized, write_atomic, Volume};

pub const DATASET_MAGIC: &[u8; 4] = b"3DDS";
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Stream reserved for dataset construction; epoch permutations use the
/// epoch number as their stream.
const BUILD_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropSpec {
    pub i_sub: usize,
    pub stride: usize,
}

impl Default for CropSpec {
    fn default() -> Self {
        CropSpec {
            i_sub: 25,
            stride: 13,
        }
    }
}

impl CropSpec {
    pub fn validate(&self) -> Result<()> {
        if self.i_sub == 0 {
            return Err(Error::config("crop.i_sub", "must be positive"));
        }
        if self.stride == 0 || self.stride > self.i_sub {
            return Err(Error::config(
                "crop.stride",
                format!("must lie in 1..={}, got {}", self.i_sub, self.stride),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    /// Normalized, degraded sub-block `x`.
    pub input: Tensor4<f32>,
    /// `y − x` in the normalized domain.
    pub residual: Tensor4<f32>,
    pub scale: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<SamplePair>,
    pub seed: u64,
    pub i_sub: usize,
}

/// Downsample by `f` then cubic-upsample by `f`. The result matches `vol`
/// cropped to dimensions divisible by `f`.
pub fn degrade(vol: &Volume, f: usize) -> Result<Volume> {
    degrade_with(vol, f, &CubicParams::default())
}

pub fn degrade_with(vol: &Volume, f: usize, cubic: &CubicParams) -> Result<Volume> {
    if !(2..=4).contains(&f) {
        log::warn!("degrading with factor {f}, outside the usual 2..=4");
    }
    let (down, _) = downsample_box(vol, f)?;
    upsample_cubic(&down, f, cubic).map(|v| v.with_voxel_size(vol.voxel_size_um()))
}

/// Window positions along one axis: `⌊(dim − i_sub) / stride⌋ + 1`.
pub fn crop_count(dim: usize, spec: &CropSpec) -> Result<usize> {
    spec.validate()?;
    if dim < spec.i_sub {
        return Err(Error::ShapeMismatch(format!(
            "axis of {dim} voxels is shorter than sub-block edge {}",
            spec.i_sub
        )));
    }
    Ok((dim - spec.i_sub) / spec.stride + 1)
}

fn anchors(dim: usize, spec: &CropSpec) -> Result<Vec<usize>> {
    let n = crop_count(dim, spec)?;
    Ok((0..n).map(|i| i * spec.stride).collect())
}

/// One pair per window position, windows anchored at multiples of the stride.
pub fn crop_subblocks(
    hr: &Volume,
    lr_up: &Volume,
    spec: &CropSpec,
    f: usize,
) -> Result<Vec<SamplePair>> {
    if hr.dims() != lr_up.dims() {
        return Err(Error::ShapeMismatch(format!(
            "ground truth {} vs degraded {}",
            hr.dims(),
            lr_up.dims()
        )));
    }
    let dims = hr.dims();
    let zs = anchors(dims.depth, spec)?;
    let ys = anchors(dims.height, spec)?;
    let xs = anchors(dims.width, spec)?;
    let y = to_normalized::<f32>(hr);
    let x = to_normalized::<f32>(lr_up);
    let block = Dims::cube(spec.i_sub);
    let mut pairs = Vec::with_capacity(zs.len() * ys.len() * xs.len());
    for &z in &zs {
        for &yy in &ys {
            for &xx in &xs {
                let input = x.crop([z, yy, xx], block);
                let target = y.crop([z, yy, xx], block);
                let residual: Vec<f32> = target
                    .data()
                    .iter()
                    .zip(input.data())
                    .map(|(&t, &i)| t - i)
                    .collect();
                pairs.push(SamplePair {
                    residual: Tensor4::from_vec(Shape4::new(1, block), residual)?,
                    input,
                    scale: f as u32,
                });
            }
        }
    }
    Ok(pairs)
}

/// Degrade every volume at every factor, crop, truncate each factor's pool
/// to the smallest pool's size, and shuffle the union.
pub fn build_training_set(
    vols: &[Volume],
    factors: &[usize],
    spec: &CropSpec,
    seed: u64,
) -> Result<Dataset> {
    build_training_set_with(vols, factors, spec, &CubicParams::default(), seed)
}

pub fn build_training_set_with(
    vols: &[Volume],
    factors: &[usize],
    spec: &CropSpec,
    cubic: &CubicParams,
    seed: u64,
) -> Result<Dataset> {
    if vols.is_empty() {
        return Err(Error::Empty("no input volumes".into()));
    }
    if factors.is_empty() {
        return Err(Error::Empty("no scale factors".into()));
    }
    spec.validate()?;
    for v in vols {
        if v.dims().min_edge() < spec.i_sub {
            return Err(Error::ShapeMismatch(format!(
                "volume {} is smaller than sub-block edge {}",
                v.dims(),
                spec.i_sub
            )));
        }
    }

    let jobs: Vec<(usize, &Volume)> = factors
        .iter()
        .flat_map(|&f| vols.iter().map(move |v| (f, v)))
        .collect();
    let cropped: Vec<Result<Vec<SamplePair>>> = jobs
        .par_iter()
        .map(|&(f, vol)| {
            let lr_up = degrade_with(vol, f, cubic)?;
            let hr = vol.crop_leading(lr_up.dims());
            crop_subblocks(&hr, &lr_up, spec, f)
        })
        .collect();

    let mut pools: Vec<Vec<SamplePair>> = vec![Vec::new(); factors.len()];
    for (job, pairs) in cropped.into_iter().enumerate() {
        pools[job / vols.len()].extend(pairs?);
    }
    let keep = pools.iter().map(Vec::len).min().unwrap_or(0);
    if keep == 0 {
        return Err(Error::Empty("a scale factor produced no sub-blocks".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BUILD_STREAM);
    let mut pairs = Vec::with_capacity(keep * pools.len());
    for pool in pools {
        if pool.len() == keep {
            pairs.extend(pool);
            continue;
        }
        let mut picked = index::sample(&mut rng, pool.len(), keep).into_vec();
        picked.sort_unstable();
        let mut slots: Vec<Option<SamplePair>> = pool.into_iter().map(Some).collect();
        pairs.extend(
            picked
                .into_iter()
                .map(|i| slots[i].take().expect("indices are distinct")),
        );
    }
    pairs.shuffle(&mut rng);
    Ok(Dataset {
        pairs,
        seed,
        i_sub: spec.i_sub,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Permutation of pair indices for `epoch`, a pure function of the seed
    /// and the epoch number.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.pairs.len().div_ceil(batch_size.max(1))
    }

    pub fn count_by_scale(&self, scale: u32) -> usize {
        self.pairs.iter().filter(|p| p.scale == scale).count()
    }
}

/// Batch `index` of `epoch`: consecutive slices of the epoch permutation,
/// the last one possibly short.
pub fn next_batch(
    ds: &Dataset,
    batch_size: usize,
    epoch: usize,
    index: usize,
) -> Result<Vec<&SamplePair>> {
    if batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be positive"));
    }
    let batches = ds.batches_per_epoch(batch_size);
    if index >= batches {
        return Err(Error::BatchOutOfRange {
            epoch,
            index,
            batches,
        });
    }
    let order = ds.epoch_order(epoch);
    let end = ((index + 1) * batch_size).min(order.len());
    Ok(order[index * batch_size..end]
        .iter()
        .map(|&i| &ds.pairs[i])
        .collect())
}

fn write_dataset(ds: &Dataset, w: &mut dyn Write) -> std::io::Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LittleEndian>(DATASET_FORMAT_VERSION)?;
    w.write_u64::<LittleEndian>(ds.pairs.len() as u64)?;
    w.write_u32::<LittleEndian>(ds.i_sub as u32)?;
    for pair in &ds.pairs {
        for &v in pair.input.data().iter().chain(pair.residual.data()) {
            w.write_f32::<LittleEndian>(v)?;
        }
        w.write_u32::<LittleEndian>(pair.scale)?;
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), |w| write_dataset(ds, w))
}

/// Read a dataset file. The file does not record a seed; `seed` drives the
/// epoch permutations of the loaded dataset.
pub fn load_dataset(path: impl AsRef<Path>, seed: u64) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(&mut BufReader::new(file), seed)
}

pub fn read_dataset(r: &mut impl Read, seed: u64) -> Result<Dataset> {
    let bad = |e: std::io::Error| Error::Format(format!("truncated dataset: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!("bad dataset magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(bad)?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let count = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
    let i_sub = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
    if i_sub == 0 {
        return Err(Error::Format("sub-block edge is zero".into()));
    }
    let block = Dims::cube(i_sub);
    let shape = Shape4::new(1, block);
    let mut pairs = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let mut input = vec![0f32; block.len()];
        let mut residual = vec![0f32; block.len()];
        r.read_f32_into::<LittleEndian>(&mut input).map_err(bad)?;
        r.read_f32_into::<LittleEndian>(&mut residual)
            .map_err(bad)?;
        let scale = r.read_u32::<LittleEndian>().map_err(bad)?;
        pairs.push(SamplePair {
            input: Tensor4::from_vec(shape, input)?,
            residual: Tensor4::from_vec(shape, residual)?,
            scale,
        });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)
        .map_err(|e| Error::Format(e.to_string()))?
        != 0
    {
        return Err(Error::Format("trailing bytes after last pair".into()));
    }
    Ok(Dataset { pairs, seed, i_sub })
}
