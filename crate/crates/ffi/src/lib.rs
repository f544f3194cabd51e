//! C ABI over the cirloop engine.
//!
//! Every fallible call returns a [`CirloopStatus`]; on failure the message is
//! kept per thread and read with [`cirloop_last_error`]. Galleries are opaque
//! handles released with [`cirloop_gallery_free`]. Strings handed out by the
//! library are released with [`cirloop_string_free`].

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use cirloop::config::RunConfig;
use cirloop::gallery::{load_gallery, normalize};
use cirloop::metrics::{hits_at_k_ranks, recall_at_k_ranks};
use cirloop::ranker::{fuse_history, rank_gallery};
use cirloop::{EmbeddingGallery, EmbeddingVector, Error, GalleryFormat};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CirloopStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    NotFound = 5,
    Config = 6,
    Internal = 7,
}

/// Gallery file encodings accepted by [`cirloop_gallery_load`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CirloopFormat {
    /// Chosen from the file extension.
    Auto = 0,
    Binary = 1,
    Jsonl = 2,
}

/// A loaded embedding gallery.
pub struct CirloopGallery {
    gallery: EmbeddingGallery,
    index: HashMap<String, u32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> CirloopStatus {
    match e {
        Error::Io { .. } => CirloopStatus::Io,
        Error::Format(_) | Error::Json(_) => CirloopStatus::Format,
        Error::UnknownImage(_) => CirloopStatus::NotFound,
        Error::Config(_) => CirloopStatus::Config,
        Error::DimensionMismatch { .. }
        | Error::NonFinite(_)
        | Error::InvalidRequest(_)
        | Error::ZeroVector
        | Error::AllExcluded => {
            CirloopStatus::InvalidArgument
        }
        _ => CirloopStatus::Internal,
    }
}

fn fail(e: Error) -> CirloopStatus {
    let status = status_of(&e);
    set_error(e.to_string());
    status
}

fn reject(status: CirloopStatus, msg: &str) -> CirloopStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning a panic into `Internal`.
fn guard(f: impl FnOnce() -> CirloopStatus) -> CirloopStatus {
    clear_error();
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => reject(CirloopStatus::Internal, "panic inside cirloop"),
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, CirloopStatus> {
    if p.is_null() {
        return Err(reject(CirloopStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| reject(CirloopStatus::InvalidArgument, "path is not UTF-8"))
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message of the last failed call on this thread, or null. Owned by the
/// library and valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cirloop_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, static.
#[no_mangle]
pub extern "C" fn cirloop_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn cirloop_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a gallery file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cirloop_gallery_load(
    path: *const c_char,
    format: CirloopFormat,
    out: *mut *mut CirloopGallery,
) -> CirloopStatus {
    guard(|| {
        if out.is_null() {
            return reject(CirloopStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let format = match format {
            CirloopFormat::Auto => GalleryFormat::from_path(path),
            CirloopFormat::Binary => GalleryFormat::Binary,
            CirloopFormat::Jsonl => GalleryFormat::Jsonl,
        };
        match load_gallery(path, format) {
            Ok(gallery) => {
                let index = gallery
                    .entries()
                    .iter()
                    .enumerate()
                    .map(|(i, e)| (e.image_id.clone(), i as u32))
                    .collect();
                *out = Box::into_raw(Box::new(CirloopGallery { gallery, index }));
                CirloopStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `g` must be null or a handle from [`cirloop_gallery_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn cirloop_gallery_free(g: *mut CirloopGallery) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Number of entries, 0 for a null handle.
///
/// # Safety
/// `g` must be null or a live gallery handle.
#[no_mangle]
pub unsafe extern "C" fn cirloop_gallery_len(g: *const CirloopGallery) -> usize {
    g.as_ref().map_or(0, |g| g.gallery.len())
}

/// Embedding dimension, 0 for a null handle.
///
/// # Safety
/// `g` must be null or a live gallery handle.
#[no_mangle]
pub unsafe extern "C" fn cirloop_gallery_dim(g: *const CirloopGallery) -> usize {
    g.as_ref().map_or(0, |g| g.gallery.dim())
}

/// Image id of entry `index` as a new string (free with
/// [`cirloop_string_free`]), or null when out of range.
///
/// # Safety
/// `g` must be null or a live gallery handle.
#[no_mangle]
pub unsafe extern "C" fn cirloop_gallery_image_id(g: *const CirloopGallery, index: usize) -> *mut c_char {
    clear_error();
    let Some(g) = g.as_ref() else {
        set_error("gallery is null");
        return ptr::null_mut();
    };
    match g.gallery.entries().get(index) {
        Some(e) => to_c_string(e.image_id.clone()),
        None => {
            set_error(format!("index {index} out of range"));
            ptr::null_mut()
        }
    }
}

/// Ranks the gallery by cosine similarity to `query` (normalized here) and
/// writes the best `k` entry indices and scores, best first, ties by id.
/// `*written` receives min(k, len).
///
/// # Safety
/// `query` must point to `dim` floats; `out_indices` and `out_scores` to
/// room for `k` values each (`out_scores` may be null).
#[no_mangle]
pub unsafe extern "C" fn cirloop_rank(
    g: *const CirloopGallery,
    query: *const f32,
    dim: usize,
    k: usize,
    out_indices: *mut u32,
    out_scores: *mut f64,
    written: *mut usize,
) -> CirloopStatus {
    guard(|| {
        let Some(g) = g.as_ref() else {
            return reject(CirloopStatus::NullPointer, "gallery is null");
        };
        if query.is_null() || out_indices.is_null() || written.is_null() {
            return reject(CirloopStatus::NullPointer, "query, out_indices or written is null");
        }
        *written = 0;
        if dim != g.gallery.dim() {
            return reject(CirloopStatus::InvalidArgument, "query dimension does not match the gallery");
        }
        let q = match EmbeddingVector::new(std::slice::from_raw_parts(query, dim).to_vec()).and_then(|v| normalize(&v)) {
            Ok(q) => q,
            Err(e) => return fail(e),
        };
        let ranking = match rank_gallery(&q, &g.gallery, &HashSet::new()) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        let top = ranking.top(k);
        for (i, s) in top.iter().enumerate() {
            *out_indices.add(i) = g.index[&s.image_id];
            if !out_scores.is_null() {
                *out_scores.add(i) = s.score;
            }
        }
        *written = top.len();
        CirloopStatus::Ok
    })
}

/// Mean of `count` row-major vectors of `dim` floats, renormalized, into `out`.
///
/// # Safety
/// `vectors` must point to `count * dim` floats and `out` to `dim`.
#[no_mangle]
pub unsafe extern "C" fn cirloop_fuse_history(
    vectors: *const f32,
    count: usize,
    dim: usize,
    out: *mut f32,
) -> CirloopStatus {
    guard(|| {
        if vectors.is_null() || out.is_null() {
            return reject(CirloopStatus::NullPointer, "vectors or out is null");
        }
        if count == 0 || dim == 0 {
            return reject(CirloopStatus::InvalidArgument, "count and dim must be positive");
        }
        let flat = std::slice::from_raw_parts(vectors, count * dim);
        let history: Result<Vec<EmbeddingVector>, Error> =
            flat.chunks(dim).map(|c| EmbeddingVector::new(c.to_vec())).collect();
        match history.and_then(|h| fuse_history(&h)) {
            Ok(f) => {
                std::ptr::copy_nonoverlapping(f.vector.as_slice().as_ptr(), out, dim);
                CirloopStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

unsafe fn rank_series(ranks: *const usize, lengths: *const usize, sessions: usize) -> Result<Vec<Vec<usize>>, CirloopStatus> {
    if sessions == 0 {
        return Ok(Vec::new());
    }
    if ranks.is_null() || lengths.is_null() {
        return Err(reject(CirloopStatus::NullPointer, "ranks or lengths is null"));
    }
    let lengths = std::slice::from_raw_parts(lengths, sessions);
    let mut offset = 0;
    let mut out = Vec::with_capacity(sessions);
    for &len in lengths {
        if len == 0 {
            return Err(reject(CirloopStatus::InvalidArgument, "every session needs at least one round"));
        }
        out.push(std::slice::from_raw_parts(ranks.add(offset), len).to_vec());
        offset += len;
    }
    Ok(out)
}

type RankMetric = fn(&[Vec<usize>], usize, usize) -> cirloop::Result<f64>;

unsafe fn rank_metric(
    metric: RankMetric,
    ranks: *const usize,
    lengths: *const usize,
    sessions: usize,
    k: usize,
    round: usize,
    out: *mut f64,
) -> CirloopStatus {
    guard(|| {
        if out.is_null() {
            return reject(CirloopStatus::NullPointer, "out is null");
        }
        let series = match rank_series(ranks, lengths, sessions) {
            Ok(s) => s,
            Err(s) => return s,
        };
        match metric(&series, k, round) {
            Ok(v) => {
                *out = v;
                CirloopStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Hits@K at `round` in percent. `ranks` holds every session's 1-based
/// target ranks back to back; `lengths[i]` is session i's round count.
///
/// # Safety
/// `lengths` must hold `sessions` values and `ranks` their sum.
#[no_mangle]
pub unsafe extern "C" fn cirloop_hits_at_k(
    ranks: *const usize,
    lengths: *const usize,
    sessions: usize,
    k: usize,
    round: usize,
    out: *mut f64,
) -> CirloopStatus {
    rank_metric(hits_at_k_ranks, ranks, lengths, sessions, k, round, out)
}

/// Recall@K at `round` in percent; same layout as [`cirloop_hits_at_k`].
///
/// # Safety
/// As for [`cirloop_hits_at_k`].
#[no_mangle]
pub unsafe extern "C" fn cirloop_recall_at_k(
    ranks: *const usize,
    lengths: *const usize,
    sessions: usize,
    k: usize,
    round: usize,
    out: *mut f64,
) -> CirloopStatus {
    rank_metric(recall_at_k_ranks, ranks, lengths, sessions, k, round, out)
}

/// Runs the evaluation described by a TOML run config and stores the report
/// JSON in `*out_json` (free with [`cirloop_string_free`]). Nothing is
/// written to disk.
///
/// # Safety
/// `config_path` must be a NUL-terminated string and `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn cirloop_eval(config_path: *const c_char, out_json: *mut *mut c_char) -> CirloopStatus {
    guard(|| {
        if out_json.is_null() {
            return reject(CirloopStatus::NullPointer, "out_json is null");
        }
        *out_json = ptr::null_mut();
        let path = match path_arg(config_path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let result = RunConfig::load(path)
            .and_then(|c| c.evaluate())
            .and_then(|(_, report)| serde_json::to_string(&report).map_err(Error::from));
        match result {
            Ok(json) => {
                *out_json = to_c_string(json);
                CirloopStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
