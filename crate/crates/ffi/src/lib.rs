//! C ABI over the v2r serving kernel.
//!
//! Every function returns a [`V2rStatus`]; on failure a message is kept per
//! thread and can be copied out with [`v2r_last_error_message`]. Objects are
//! opaque handles created by `*_new`/`*_load` and released by `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use v2r_core::data_engine::{detect_shots, read_stream};
use v2r_core::executors::embed_histogram;
use v2r_core::matching::{FeatureVector, FlatIndex, Metric};
use v2r_core::profiler::percentile;
use v2r_core::{Error, ExitCode};

/// Result codes. Values 2..=11 match the `v2r` binary's exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum V2rStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Registry = 4,
    Executor = 5,
    Profiler = 6,
    Orchestrator = 7,
    DataEngine = 8,
    Server = 9,
    Matching = 10,
    Monitor = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum V2rMetric {
    Cosine = 0,
    L2 = 1,
}

/// One detected shot; frame indices are inclusive.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct V2rShot {
    pub start_frame: u32,
    pub end_frame: u32,
    pub keyframe: u32,
}

/// Opaque exact similarity index.
pub struct V2rIndex {
    inner: FlatIndex,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> V2rStatus {
    match err.exit_code() {
        ExitCode::Ok => V2rStatus::Ok,
        ExitCode::Usage => V2rStatus::InvalidArgument,
        ExitCode::Io => V2rStatus::Io,
        ExitCode::Registry => V2rStatus::Registry,
        ExitCode::Executor => V2rStatus::Executor,
        ExitCode::Profiler => V2rStatus::Profiler,
        ExitCode::Orchestrator => V2rStatus::Orchestrator,
        ExitCode::DataEngine => V2rStatus::DataEngine,
        ExitCode::Server => V2rStatus::Server,
        ExitCode::Matching => V2rStatus::Matching,
        ExitCode::Monitor => V2rStatus::Monitor,
    }
}

struct Fail(V2rStatus, String);

impl<E: Into<Error>> From<E> for Fail {
    fn from(e: E) -> Self {
        let e = e.into();
        Fail(status_of(&e), e.to_string())
    }
}

fn fail(status: V2rStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> V2rStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => V2rStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            V2rStatus::Panic
        }
    }
}

fn not_null<T>(p: *const T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(fail(V2rStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Fail> {
    not_null(p, name)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(V2rStatus::InvalidArgument, format!("{name} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn v2r_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length
/// excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn v2r_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates an empty index with `metric` one of [`V2rMetric`]'s values.
/// Free it with [`v2r_index_free`].
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn v2r_index_new(
    dim: u32,
    metric: u32,
    out: *mut *mut V2rIndex,
) -> V2rStatus {
    guard(|| {
        not_null(out, "out")?;
        let metric = match metric {
            m if m == V2rMetric::Cosine as u32 => Metric::Cosine,
            m if m == V2rMetric::L2 as u32 => Metric::L2,
            other => {
                return Err(fail(
                    V2rStatus::InvalidArgument,
                    format!("unknown metric {other}"),
                ))
            }
        };
        let inner = FlatIndex::new(dim, metric)?;
        *out = Box::into_raw(Box::new(V2rIndex { inner }));
        Ok(())
    })
}

/// Releases an index. Null is ignored.
///
/// # Safety
/// `index` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn v2r_index_free(index: *mut V2rIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Number of stored vectors, 0 for a null handle.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn v2r_index_len(index: *const V2rIndex) -> usize {
    index.as_ref().map_or(0, |i| i.inner.len())
}

/// Adds `count` vectors stored row-major in `values` (`count × dim` floats).
/// All-or-nothing: on error the index is unchanged.
///
/// # Safety
/// `ids` must hold `count` u64s and `values` `count × dim` floats.
#[no_mangle]
pub unsafe extern "C" fn v2r_index_add(
    index: *mut V2rIndex,
    ids: *const u64,
    values: *const f32,
    count: usize,
) -> V2rStatus {
    guard(|| {
        not_null(index, "index")?;
        let index = &mut *index;
        if count == 0 {
            return Ok(());
        }
        not_null(ids, "ids")?;
        not_null(values, "values")?;
        let dim = index.inner.dim() as usize;
        let ids = std::slice::from_raw_parts(ids, count);
        let values = std::slice::from_raw_parts(values, count * dim);
        let vectors: Vec<FeatureVector> = ids
            .iter()
            .zip(values.chunks_exact(dim))
            .map(|(&id, v)| FeatureVector::new(id, v.to_vec()))
            .collect();
        index.inner.add(&vectors)?;
        Ok(())
    })
}

/// Exact top-`k` search. Writes up to `k` results to `out_ids` and
/// `out_scores` and the number written to `out_count`.
///
/// # Safety
/// `query` must hold `dim` floats (the index dimension); the output arrays
/// must each hold `k` elements.
#[no_mangle]
pub unsafe extern "C" fn v2r_index_search(
    index: *const V2rIndex,
    query: *const f32,
    k: usize,
    out_ids: *mut u64,
    out_scores: *mut f32,
    out_count: *mut usize,
) -> V2rStatus {
    guard(|| {
        not_null(index, "index")?;
        not_null(query, "query")?;
        not_null(out_ids, "out_ids")?;
        not_null(out_scores, "out_scores")?;
        not_null(out_count, "out_count")?;
        let index = &*index;
        let q = std::slice::from_raw_parts(query, index.inner.dim() as usize);
        let result = index.inner.search(&FeatureVector::new(0, q.to_vec()), k)?;
        for (i, n) in result.neighbors.iter().enumerate() {
            *out_ids.add(i) = n.id;
            *out_scores.add(i) = n.score;
        }
        *out_count = result.neighbors.len();
        Ok(())
    })
}

/// Saves the index in the HYIX format.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn v2r_index_save(index: *const V2rIndex, path: *const c_char) -> V2rStatus {
    guard(|| {
        not_null(index, "index")?;
        let path = path_arg(path, "path")?;
        (*index).inner.save(path)?;
        Ok(())
    })
}

/// Loads an HYIX file into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn v2r_index_load(path: *const c_char, out: *mut *mut V2rIndex) -> V2rStatus {
    guard(|| {
        not_null(out, "out")?;
        let path = path_arg(path, "path")?;
        let inner = FlatIndex::load(path)?;
        *out = Box::into_raw(Box::new(V2rIndex { inner }));
        Ok(())
    })
}

/// Histogram embedding of an `h × w × 3` u8 image into `dim` floats.
///
/// # Safety
/// `image` must hold `h·w·3` bytes and `out` `dim` floats.
#[no_mangle]
pub unsafe extern "C" fn v2r_embed_histogram(
    image: *const u8,
    h: u32,
    w: u32,
    seed: u64,
    dim: u32,
    out: *mut f32,
) -> V2rStatus {
    guard(|| {
        not_null(image, "image")?;
        not_null(out, "out")?;
        let pixels = (h as usize)
            .checked_mul(w as usize)
            .and_then(|p| p.checked_mul(3))
            .ok_or_else(|| fail(V2rStatus::InvalidArgument, "image size overflows"))?;
        let img = std::slice::from_raw_parts(image, pixels);
        let f = embed_histogram(img, h, w, seed, dim)?;
        ptr::copy_nonoverlapping(f.as_ptr(), out, f.len());
        Ok(())
    })
}

/// Detects shots in an HYF stream. At most `capacity` shots are written;
/// `out_count` always receives the total, and `BufferTooSmall` is returned
/// when it exceeds `capacity`.
///
/// # Safety
/// `path` must be NUL-terminated; `out_shots` must hold `capacity` shots
/// (may be null when `capacity` is 0).
#[no_mangle]
pub unsafe extern "C" fn v2r_detect_shots(
    path: *const c_char,
    threshold: f32,
    min_shot_len: u32,
    out_shots: *mut V2rShot,
    capacity: usize,
    out_count: *mut usize,
) -> V2rStatus {
    guard(|| {
        not_null(out_count, "out_count")?;
        let path = path_arg(path, "path")?;
        let stream = read_stream(path)?;
        let shots = detect_shots(&stream, threshold, min_shot_len as usize)?;
        *out_count = shots.len();
        if capacity > 0 {
            not_null(out_shots, "out_shots")?;
        }
        for (i, s) in shots.iter().take(capacity).enumerate() {
            *out_shots.add(i) = V2rShot {
                start_frame: s.start_frame,
                end_frame: s.end_frame,
                keyframe: s.keyframe,
            };
        }
        if shots.len() > capacity {
            return Err(fail(
                V2rStatus::BufferTooSmall,
                format!("{} shots, capacity {capacity}", shots.len()),
            ));
        }
        Ok(())
    })
}

/// Nearest-rank percentile of `n` samples, `p` in (0, 1].
///
/// # Safety
/// `samples` must hold `n` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn v2r_percentile(
    samples: *const f32,
    n: usize,
    p: f32,
    out: *mut f32,
) -> V2rStatus {
    guard(|| {
        not_null(out, "out")?;
        let s = if n == 0 {
            &[][..]
        } else {
            not_null(samples, "samples")?;
            std::slice::from_raw_parts(samples, n)
        };
        *out = percentile(s, p)?;
        Ok(())
    })
}
