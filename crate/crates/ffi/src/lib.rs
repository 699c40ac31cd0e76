//! C ABI for `voxsr`.
//!
//! Volumes and networks are exposed as opaque handles created by
//! `voxsr_*_new`/`_load`/`_init` functions and released with the matching
//! `_free`. Every fallible call returns a [`VoxsrStatus`]; on failure
//! [`voxsr_last_error_message`] describes the error. Results are written
//! through out-pointers only on success. Panics never cross the boundary:
//! they are caught and reported as [`VoxsrStatus::Panic`].
//!
//! Handles are not synchronized. A handle may be read from several threads
//! at once but must not be freed while in use.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use voxsr::dataset::degrade;
use voxsr::metrics::{mse3d, psnr, ssim3d, SsimParams};
use voxsr::network::{load_model, save_model};
use voxsr::reconstruct::{super_resolve, Margin, TileSpec};
use voxsr::{
    init_network, load_volume, save_volume, DType, Dims, Error, Network, NetworkConfig, Volume,
};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxsrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ShapeMismatch = 5,
    Runtime = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxsrDtype {
    Uint8 = 0,
    Uint16 = 1,
    Float32 = 2,
}

impl From<VoxsrDtype> for DType {
    fn from(d: VoxsrDtype) -> Self {
        match d {
            VoxsrDtype::Uint8 => DType::U8,
            VoxsrDtype::Uint16 => DType::U16,
            VoxsrDtype::Float32 => DType::F32,
        }
    }
}

impl From<DType> for VoxsrDtype {
    fn from(d: DType) -> Self {
        match d {
            DType::U8 => VoxsrDtype::Uint8,
            DType::U16 => VoxsrDtype::Uint16,
            DType::F32 => VoxsrDtype::Float32,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoxsrNetworkConfig {
    pub depth: u32,
    pub channels: u32,
    pub kernel: u32,
    pub residual: bool,
}

/// Opaque volume handle.
pub struct VoxsrVolume(Volume);

/// Opaque network handle.
pub struct VoxsrNetwork(Network<f32>);

/// Pass as `margin` to use the network's receptive-field radius.
pub const VOXSR_MARGIN_AUTO: i64 = -1;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(VoxsrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => VoxsrStatus::Io,
            Error::Sidecar { .. }
            | Error::SizeMismatch { .. }
            | Error::Format(_)
            | Error::Json(_)
            | Error::Csv(_) => VoxsrStatus::Format,
            Error::ShapeMismatch(_) => VoxsrStatus::ShapeMismatch,
            Error::UnknownDtype(_)
            | Error::InvalidVolume(_)
            | Error::InvalidFactor(_)
            | Error::InvalidConfig { .. }
            | Error::Empty(_) => VoxsrStatus::InvalidArgument,
            _ => VoxsrStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(VoxsrStatus::NullPointer, format!("{what} is null"))
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VoxsrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VoxsrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            VoxsrStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| {
        Failure(
            VoxsrStatus::InvalidArgument,
            "path is not valid UTF-8".into(),
        )
    })?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_f64(out: *mut f64, v: Result<f64, Error>) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = v?;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn voxsr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message describing the last failed call on this thread. Empty if none.
/// The pointer is valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn voxsr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Create a volume from `len` voxel values in z-major order. Values are
/// checked against the dtype's range and integrality.
///
/// # Safety
/// `data` must point to `len` readable floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxsr_volume_new(
    depth: usize,
    height: usize,
    width: usize,
    dtype: VoxsrDtype,
    voxel_size_um: f64,
    data: *const f32,
    len: usize,
    out: *mut *mut VoxsrVolume,
) -> VoxsrStatus {
    guard(|| {
        if data.is_null() && len > 0 {
            return Err(null("data"));
        }
        let values = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(data, len).to_vec()
        };
        let vol = Volume::new(
            Dims::new(depth, height, width),
            dtype.into(),
            voxel_size_um,
            values,
        )?;
        put(out, VoxsrVolume(vol))
    })
}

/// Load `<path>.raw` with its `<path>.json` sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxsr_volume_load(
    path: *const c_char,
    out: *mut *mut VoxsrVolume,
) -> VoxsrStatus {
    guard(|| {
        let vol = load_volume(path_arg(path)?)?;
        put(out, VoxsrVolume(vol))
    })
}

/// # Safety
/// `vol` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn voxsr_volume_save(
    vol: *const VoxsrVolume,
    path: *const c_char,
) -> VoxsrStatus {
    guard(|| {
        let vol = as_ref(vol, "volume")?;
        save_volume(&vol.0, path_arg(path)?)?;
        Ok(())
    })
}

/// Write `[depth, height, width]` to `dims`.
///
/// # Safety
/// `vol` must be a live handle; `dims` must point to 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn voxsr_volume_dims(
    vol: *const VoxsrVolume,
    dims: *mut usize,
) -> VoxsrStatus {
    guard(|| {
        let vol = as_ref(vol, "volume")?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        let d = vol.0.dims().as_array();
        std::ptr::copy_nonoverlapping(d.as_ptr(), dims, 3);
        Ok(())
    })
}

/// # Safety
/// `vol` must be a live handle; `dtype` and `voxel_size_um` writable or null.
#[no_mangle]
pub unsafe extern "C" fn voxsr_volume_info(
    vol: *const VoxsrVolume,
    dtype: *mut VoxsrDtype,
    voxel_size_um: *mut f64,
) -> VoxsrStatus {
    guard(|| {
        let vol = as_ref(vol, "volume")?;
        if let Some(d) = dtype.as_mut() {
            *d = vol.0.dtype().into();
        }
        if let Some(v) = voxel_size_um.as_mut() {
            *v = vol.0.voxel_size_um();
        }
        Ok(())
    })
}

/// Copy the voxels into `dst`, which must hold exactly the voxel count.
///
/// # Safety
/// `vol` must be a live handle; `dst` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn voxsr_volume_copy_data(
    vol: *const VoxsrVolume,
    dst: *mut f32,
    len: usize,
) -> VoxsrStatus {
    guard(|| {
        let vol = as_ref(vol, "volume")?;
        let src = vol.0.data();
        if len != src.len() {
            return Err(Failure(
                VoxsrStatus::ShapeMismatch,
                format!("buffer holds {len} values, volume has {}", src.len()),
            ));
        }
        if dst.is_null() && len > 0 {
            return Err(null("dst"));
        }
        if len > 0 {
            std::ptr::copy_nonoverlapping(src.as_ptr(), dst, len);
        }
        Ok(())
    })
}

/// Release a volume. Null is ignored.
///
/// # Safety
/// `vol` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn voxsr_volume_free(vol: *mut VoxsrVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Box-downsample then cubic-upsample by `factor`.
///
/// # Safety
/// `vol` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxsr_degrade(
    vol: *const VoxsrVolume,
    factor: usize,
    out: *mut *mut VoxsrVolume,
) -> VoxsrStatus {
    guard(|| {
        let vol = as_ref(vol, "volume")?;
        put(out, VoxsrVolume(degrade(&vol.0, factor)?))
    })
}

/// # Safety
/// Both handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxsr_psnr(
    a: *const VoxsrVolume,
    b: *const VoxsrVolume,
    out: *mut f64,
) -> VoxsrStatus {
    guard(|| put_f64(out, psnr(&as_ref(a, "a")?.0, &as_ref(b, "b")?.0)))
}

/// SSIM with the default window for the dtype of `a`.
///
/// # Safety
/// Both handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxsr_ssim(
    a: *const VoxsrVolume,
    b: *const VoxsrVolume,
    out: *mut f64,
) -> VoxsrStatus {
    guard(|| {
        let (a, b) = (&as_ref(a, "a")?.0, &as_ref(b, "b")?.0);
        put_f64(out, ssim3d(a, b, &SsimParams::for_dtype(a.dtype())))
    })
}

/// # Safety
/// Both handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxsr_mse(
    a: *const VoxsrVolume,
    b: *const VoxsrVolume,
    out: *mut f64,
) -> VoxsrStatus {
    guard(|| put_f64(out, mse3d(&as_ref(a, "a")?.0, &as_ref(b, "b")?.0)))
}

/// Fresh network with the training initialization.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxsr_network_init(
    config: VoxsrNetworkConfig,
    seed: u64,
    out: *mut *mut VoxsrNetwork,
) -> VoxsrStatus {
    guard(|| {
        let cfg = NetworkConfig {
            depth: config.depth as usize,
            channels: config.channels as usize,
            kernel: config.kernel as usize,
            residual: config.residual,
        };
        put(out, VoxsrNetwork(init_network(cfg, seed)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxsr_network_load(
    path: *const c_char,
    out: *mut *mut VoxsrNetwork,
) -> VoxsrStatus {
    guard(|| {
        let net = load_model(path_arg(path)?)?;
        put(out, VoxsrNetwork(net))
    })
}

/// # Safety
/// `net` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn voxsr_network_save(
    net: *const VoxsrNetwork,
    path: *const c_char,
) -> VoxsrStatus {
    guard(|| {
        save_model(&as_ref(net, "network")?.0, path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `net` must be a live handle; `config` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxsr_network_config(
    net: *const VoxsrNetwork,
    config: *mut VoxsrNetworkConfig,
) -> VoxsrStatus {
    guard(|| {
        let cfg = *as_ref(net, "network")?.0.config();
        let out = config.as_mut().ok_or_else(|| null("config"))?;
        *out = VoxsrNetworkConfig {
            depth: cfg.depth as u32,
            channels: cfg.channels as u32,
            kernel: cfg.kernel as u32,
            residual: cfg.residual,
        };
        Ok(())
    })
}

/// Release a network. Null is ignored.
///
/// # Safety
/// `net` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn voxsr_network_free(net: *mut VoxsrNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Upscale `lr` by `factor` with tiled inference. `margin` is a voxel count
/// or [`VOXSR_MARGIN_AUTO`].
///
/// # Safety
/// Both handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxsr_super_resolve(
    net: *const VoxsrNetwork,
    lr: *const VoxsrVolume,
    factor: usize,
    tile: usize,
    margin: i64,
    out: *mut *mut VoxsrVolume,
) -> VoxsrStatus {
    guard(|| {
        let margin = match margin {
            VOXSR_MARGIN_AUTO => Margin::Auto,
            m if m >= 0 => Margin::Voxels(m as usize),
            m => {
                return Err(Failure(
                    VoxsrStatus::InvalidArgument,
                    format!("margin {m} is negative"),
                ))
            }
        };
        let hr = super_resolve(
            &as_ref(net, "network")?.0,
            &as_ref(lr, "volume")?.0,
            factor,
            &TileSpec::new(tile, margin),
        )?;
        put(out, VoxsrVolume(hr))
    })
}
