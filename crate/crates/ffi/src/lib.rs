//! C ABI over `ccsd-core`.
//!
//! Every function returns a [`CcsdStatus`]; on failure the message is kept per
//! thread and can be read with [`ccsd_last_error_message`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ccsd_core::checkpoint;
use ccsd_core::config::TrainConfig;
use ccsd_core::lattice::{enumerate_combos, ModalityCombo};
use ccsd_core::metrics::{dice, write_reports};
use ccsd_core::ssnet::SsNet;
use ccsd_core::tensor::Tensor;
use ccsd_core::trainer::{train, Dataset};
use ccsd_core::CcsdError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcsdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Incompatible = 6,
    BufferTooSmall = 7,
    Runtime = 8,
    Panic = 9,
}

/// Training configuration handle.
pub struct CcsdConfig {
    inner: TrainConfig,
}

/// Network handle (single precision).
pub struct CcsdModel {
    net: SsNet<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(CcsdStatus, String);

impl From<CcsdError> for Fail {
    fn from(e: CcsdError) -> Self {
        let status = match &e {
            CcsdError::InvalidArgument(_) | CcsdError::WouldBeEmpty { .. } | CcsdError::ShapeMismatch { .. } => {
                CcsdStatus::InvalidArgument
            }
            CcsdError::Config(_) => CcsdStatus::Config,
            CcsdError::Incompatible(_) => CcsdStatus::Incompatible,
            CcsdError::Format { .. } | CcsdError::Json(_) => CcsdStatus::Format,
            CcsdError::Io { .. } => CcsdStatus::Io,
            CcsdError::NonFiniteLoss { .. } | CcsdError::Generation(_) => CcsdStatus::Runtime,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CcsdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CcsdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CcsdStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(CcsdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Fail(CcsdStatus::InvalidArgument, format!("{what} is not UTF-8: {e}")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ccsd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn ccsd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccsd_config_new(out: *mut *mut CcsdConfig) -> CcsdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(CcsdConfig {
            inner: TrainConfig::default(),
        }));
        Ok(())
    })
}

/// Defaults overlaid with a `key = value` config file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccsd_config_load(path: *const c_char, out: *mut *mut CcsdConfig) -> CcsdStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        let inner = TrainConfig::load(&path)?;
        *out = Box::into_raw(Box::new(CcsdConfig { inner }));
        Ok(())
    })
}

/// Sets one dotted key.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ccsd_config_set(cfg: *mut CcsdConfig, key: *const c_char, value: *const c_char) -> CcsdStatus {
    guard(|| {
        let cfg = out_arg(cfg, "cfg")?;
        cfg.inner.set(str_arg(key, "key")?, str_arg(value, "value")?)?;
        Ok(())
    })
}

/// Copies the value of `key` into `buf` (NUL-terminated). `needed` receives
/// the required size including the terminator; when `cap` is too small the
/// call returns `BufferTooSmall` and leaves `buf` untouched.
///
/// # Safety
/// `buf` must hold `cap` bytes (or be NULL with `cap == 0`); `needed` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccsd_config_get(
    cfg: *const CcsdConfig,
    key: *const c_char,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> CcsdStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let value = cfg.inner.get(str_arg(key, "key")?)?;
        let needed = out_arg(needed, "needed")?;
        *needed = value.len() + 1;
        if cap < value.len() + 1 {
            return Err(Fail(
                CcsdStatus::BufferTooSmall,
                format!("value needs {} bytes, buffer has {cap}", value.len() + 1),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(value.as_ptr(), buf.cast::<u8>(), value.len());
        *buf.add(value.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library or be NULL; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ccsd_config_free(cfg: *mut CcsdConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Freshly initialized network for the `net.*` keys of `cfg`.
///
/// # Safety
/// `cfg` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccsd_model_new(cfg: *const CcsdConfig, seed: u64, out: *mut *mut CcsdModel) -> CcsdStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let out = out_arg(out, "out")?;
        let net = SsNet::new(cfg.inner.net.clone(), seed)?;
        *out = Box::into_raw(Box::new(CcsdModel { net }));
        Ok(())
    })
}

/// Loads a checkpoint written by training (the `.meta` sidecar must sit next to it).
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ccsd_model_load(path: *const c_char, out: *mut *mut CcsdModel) -> CcsdStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        let (net, _) = checkpoint::load::<f32>(&path, None)?;
        *out = Box::into_raw(Box::new(CcsdModel { net }));
        Ok(())
    })
}

/// Number of modalities and voxels per modality volume.
///
/// # Safety
/// `model` must come from this library; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccsd_model_shape(
    model: *const CcsdModel,
    n_modalities: *mut usize,
    voxels: *mut usize,
) -> CcsdStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let cfg = model.net.config();
        *out_arg(n_modalities, "n_modalities")? = cfg.n_modalities;
        *out_arg(voxels, "voxels")? = cfg.dims().iter().product();
        Ok(())
    })
}

/// Segments one case. `volumes` holds `n_modalities * voxels` values,
/// modality-major, each volume in depth/height/width order. Modalities whose
/// bit is clear in `combo_bits` are treated as missing. `labels` receives
/// `voxels` class indices.
///
/// # Safety
/// `volumes` and `labels` must hold `volumes_len` and `labels_len` elements.
#[no_mangle]
pub unsafe extern "C" fn ccsd_model_segment(
    model: *const CcsdModel,
    volumes: *const f32,
    volumes_len: usize,
    combo_bits: u32,
    labels: *mut u8,
    labels_len: usize,
) -> CcsdStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let net = &model.net;
        let n = net.config().n_modalities;
        let shape = net.input_shape(1);
        let voxels: usize = shape.iter().product();
        if volumes_len != n * voxels || labels_len != voxels {
            return Err(Fail(
                CcsdStatus::InvalidArgument,
                format!(
                    "expected {} input values and {voxels} labels, got {volumes_len} and {labels_len}",
                    n * voxels
                ),
            ));
        }
        let combo = ModalityCombo::from_bits(combo_bits)?;
        if combo.min_modalities() > n {
            return Err(Fail(
                CcsdStatus::InvalidArgument,
                format!("combination {combo} names a modality beyond {n}"),
            ));
        }
        let data = slice_arg(volumes, volumes_len, "volumes")?;
        let inputs = data
            .chunks_exact(voxels)
            .map(|v| Tensor::from_vec(shape, v.to_vec()))
            .collect::<ccsd_core::Result<Vec<_>>>()?;
        let out = net.infer_combo(&inputs, combo)?.labels();
        if labels.is_null() {
            return Err(null("labels"));
        }
        ptr::copy_nonoverlapping(out.as_ptr(), labels, voxels);
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be NULL; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ccsd_model_free(model: *mut CcsdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Trains on generated phantoms and writes the run directory `out_dir`
/// (record, log, checkpoint, table and curve files). `mean_dice` receives the
/// test mean Dice over every combination and region.
///
/// # Safety
/// `cfg` must come from this library, `out_dir` be NUL-terminated, `mean_dice` valid.
#[no_mangle]
pub unsafe extern "C" fn ccsd_train(cfg: *const CcsdConfig, out_dir: *const c_char, mean_dice: *mut f64) -> CcsdStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let mean_dice = out_arg(mean_dice, "mean_dice")?;
        cfg.inner.validate()?;
        let data = Dataset::generate(&cfg.inner)?;
        let outcome = train::<f32>(&cfg.inner, &data, Some(&dir))?;
        let table = outcome
            .record
            .test_table
            .as_ref()
            .ok_or_else(|| Fail(CcsdStatus::Runtime, "training produced no test table".into()))?;
        write_reports(table, &dir, false)?;
        *mean_dice = table.mean_dice();
        Ok(())
    })
}

/// Writes the bitmasks of every non-empty combination of `n` modalities in
/// canonical order (size, then bitmask). `count` receives `2^n - 1`.
///
/// # Safety
/// `bits` must hold `cap` elements (or be NULL with `cap == 0`); `count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccsd_enumerate_combos(n: usize, bits: *mut u32, cap: usize, count: *mut usize) -> CcsdStatus {
    guard(|| {
        let lattice = enumerate_combos(n)?;
        *out_arg(count, "count")? = lattice.len();
        if cap < lattice.len() {
            return Err(Fail(
                CcsdStatus::BufferTooSmall,
                format!("{} combinations, buffer has {cap}", lattice.len()),
            ));
        }
        if bits.is_null() {
            return Err(null("bits"));
        }
        for (i, c) in lattice.iter().enumerate() {
            *bits.add(i) = c.bits();
        }
        Ok(())
    })
}

/// Dice overlap of two binary masks (non-zero bytes are foreground).
///
/// # Safety
/// `pred` and `gt` must hold `len` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccsd_dice(pred: *const u8, gt: *const u8, len: usize, out: *mut f64) -> CcsdStatus {
    guard(|| {
        let p: Vec<bool> = slice_arg(pred, len, "pred")?.iter().map(|&v| v != 0).collect();
        let g: Vec<bool> = slice_arg(gt, len, "gt")?.iter().map(|&v| v != 0).collect();
        *out_arg(out, "out")? = dice(&p, &g)?;
        Ok(())
    })
}
