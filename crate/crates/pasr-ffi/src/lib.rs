//! C ABI surface for the pasr recommender: geohash codec access and
//! checkpoint-backed candidate ranking through an opaque model handle.
//!
//! Every function is safe to call with null pointers and reports
//! failures through `PasrStatus` codes; no error state is global.

use std::ffi::CStr;
use std::os::raw::c_char;
use std::path::Path;

use pasr::geocode::{decode_geohash, encode_geohash, GeoCoordinate};
use pasr::model::Pasr;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PasrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    IoError = 4,
    BadCheckpoint = 5,
    InternalError = 6,
}

/// Opaque handle to a loaded model.
pub struct PasrModel {
    inner: Pasr,
}

/// Encode a coordinate as a geohash string of `length` characters into
/// `out` (NUL-terminated). `out_len` is the capacity of `out` in
/// bytes; it must be at least `length + 1`.
///
/// # Safety
/// `out` must point to writable memory of at least `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pasr_geohash_encode(
    lat: f64,
    lon: f64,
    length: usize,
    out: *mut c_char,
    out_len: usize,
) -> PasrStatus {
    if out.is_null() {
        return PasrStatus::NullArgument;
    }
    if out_len < length + 1 {
        return PasrStatus::BufferTooSmall;
    }
    let coord = match GeoCoordinate::new(lat, lon) {
        Ok(c) => c,
        Err(_) => return PasrStatus::InvalidArgument,
    };
    let hash = match encode_geohash(&coord, length) {
        Ok(h) => h,
        Err(_) => return PasrStatus::InvalidArgument,
    };
    let bytes = hash.as_bytes();
    std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, out, bytes.len());
    *out.add(bytes.len()) = 0;
    PasrStatus::Ok
}

/// Decode a geohash into its cell bounds.
///
/// # Safety
/// `hash` must be a NUL-terminated string; the out pointers must be
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pasr_geohash_decode(
    hash: *const c_char,
    lat_min: *mut f64,
    lat_max: *mut f64,
    lon_min: *mut f64,
    lon_max: *mut f64,
) -> PasrStatus {
    if hash.is_null() || lat_min.is_null() || lat_max.is_null() || lon_min.is_null() || lon_max.is_null() {
        return PasrStatus::NullArgument;
    }
    let text = match CStr::from_ptr(hash).to_str() {
        Ok(s) => s,
        Err(_) => return PasrStatus::InvalidArgument,
    };
    match decode_geohash(text) {
        Ok(cell) => {
            *lat_min = cell.lat_min;
            *lat_max = cell.lat_max;
            *lon_min = cell.lon_min;
            *lon_max = cell.lon_max;
            PasrStatus::Ok
        }
        Err(_) => PasrStatus::InvalidArgument,
    }
}

/// Load a model checkpoint. Returns null on failure; inspect the
/// status through `pasr_model_load_status` style calls is deliberately
/// avoided — the checkpoint either loads fully or not at all.
///
/// # Safety
/// `path` must be a NUL-terminated file path.
#[no_mangle]
pub unsafe extern "C" fn pasr_model_load(path: *const c_char) -> *mut PasrModel {
    if path.is_null() {
        return std::ptr::null_mut();
    }
    let text = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => return std::ptr::null_mut(),
    };
    match pasr::checkpoint::load(Path::new(text)) {
        Ok((_, inner)) => Box::into_raw(Box::new(PasrModel { inner })),
        Err(_) => std::ptr::null_mut(),
    }
}

/// Release a model handle. Null is accepted and ignored.
///
/// # Safety
/// `model` must have come from `pasr_model_load` and not been freed.
#[no_mangle]
pub unsafe extern "C" fn pasr_model_free(model: *mut PasrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of locations the model was trained over, or 0 for null.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pasr_model_num_locations(model: *const PasrModel) -> u64 {
    if model.is_null() {
        return 0;
    }
    (*model).inner.num_locations() as u64
}

/// Rank `candidates` against a visit history. Location ids are the
/// 1-based ids of the training dataset. On success `out_ids` holds the
/// candidate ids in descending score order and `out_scores` the
/// matching scores; both must have room for `num_candidates` entries.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn pasr_model_rank(
    model: *const PasrModel,
    history: *const u64,
    history_len: usize,
    candidates: *const u64,
    num_candidates: usize,
    out_ids: *mut u64,
    out_scores: *mut f64,
) -> PasrStatus {
    if model.is_null() || history.is_null() || candidates.is_null() || out_ids.is_null() || out_scores.is_null()
    {
        return PasrStatus::NullArgument;
    }
    if history_len == 0 || num_candidates == 0 {
        return PasrStatus::InvalidArgument;
    }
    let history: Vec<usize> = std::slice::from_raw_parts(history, history_len)
        .iter()
        .map(|&v| v as usize)
        .collect();
    let candidates: Vec<usize> = std::slice::from_raw_parts(candidates, num_candidates)
        .iter()
        .map(|&v| v as usize)
        .collect();
    match (*model).inner.rank_candidates(&history, &candidates) {
        Ok(ranked) => {
            for (i, r) in ranked.iter().enumerate() {
                *out_ids.add(i) = r.location_id as u64;
                *out_scores.add(i) = r.score;
            }
            PasrStatus::Ok
        }
        Err(pasr::PasrError::Domain(_)) => PasrStatus::InvalidArgument,
        Err(_) => PasrStatus::InternalError,
    }
}
