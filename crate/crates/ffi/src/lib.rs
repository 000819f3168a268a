//! C interface to the sunet model, post-processing and analysis.
//!
//! Every function returns a [`SunetStatus`]. On failure the message is kept
//! in a thread-local slot readable through [`sunet_last_error`]. Models are
//! opaque handles created by [`sunet_model_load`] and released with
//! [`sunet_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sunet::analysis::{analyze_files, AnalysisConfig};
use sunet::channel::gumbel_softmax;
use sunet::model::SunetModel;
use sunet::synthdata::{region_stats, Laterality, Location, RegionStats, SegmentationSample};
use sunet::trainer::{dsc, predict};
use sunet::Error;

/// Codes 2 to 4 match the exit codes of the `sunet` command.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SunetStatus {
    Ok = 0,
    /// Bad configuration, argument or shape.
    InvalidArgument = 2,
    /// File access, parse or join failure.
    Data = 3,
    Numerical = 4,
    NullPointer = 5,
    Panic = 6,
}

impl From<&Error> for SunetStatus {
    fn from(e: &Error) -> Self {
        match e.exit_code() {
            3 => SunetStatus::Data,
            4 => SunetStatus::Numerical,
            _ => SunetStatus::InvalidArgument,
        }
    }
}

/// Opaque model handle.
pub struct SunetModelHandle {
    model: SunetModel,
}

/// `laterality`: 0 none, 1 left, 2 right. `location`: 0 none, 1 upper, 2 lower.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SunetRegionStats {
    pub present: u8,
    pub area: u64,
    pub eccentricity: f64,
    pub laterality: u8,
    pub location: u8,
}

impl From<&RegionStats> for SunetRegionStats {
    fn from(s: &RegionStats) -> Self {
        Self {
            present: s.present as u8,
            area: s.area as u64,
            eccentricity: s.eccentricity,
            laterality: match s.laterality {
                Laterality::None => 0,
                Laterality::Left => 1,
                Laterality::Right => 2,
            },
            location: match s.location {
                Location::None => 0,
                Location::Upper => 1,
                Location::Lower => 2,
            },
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

struct Fail(SunetStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SunetStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SunetStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SunetStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SunetStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SunetStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut_arg<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sunet_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a model directory written by `sunet train`.
///
/// # Safety
/// `dir` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sunet_model_load(dir: *const c_char, out: *mut *mut SunetModelHandle) -> SunetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dir = path_arg(dir, "dir")?;
        let model = SunetModel::load_dir(&dir)?;
        *out = Box::into_raw(Box::new(SunetModelHandle { model }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`sunet_model_load`] and not be used afterwards.
/// Null is accepted.
#[no_mangle]
pub unsafe extern "C" fn sunet_model_free(handle: *mut SunetModelHandle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Input height and width the model was built for, and its sentence length
/// (0 for a model without a channel).
///
/// # Safety
/// `handle` must be live; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sunet_model_info(
    handle: *const SunetModelHandle,
    height: *mut usize,
    width: *mut usize,
    sentence_length: *mut usize,
) -> SunetStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if height.is_null() || width.is_null() || sentence_length.is_null() {
            return Err(null("output"));
        }
        let [ih, iw] = h.model.config.backbone.input_size;
        *height = ih;
        *width = iw;
        *sentence_length = h.model.config.channel.as_ref().map_or(0, |c| c.sentence_length);
        Ok(())
    })
}

/// Segments one `height * width` image (row-major, values in [0, 1]).
/// Writes the post-processed 0/1 mask into `mask_out` and, when the model
/// has a channel and `ids_out` is not null, the emitted symbol ids into
/// `ids_out`, which must hold `ids_len` >= the sentence length.
///
/// # Safety
/// Buffers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn sunet_model_predict(
    handle: *const SunetModelHandle,
    image: *const f64,
    height: usize,
    width: usize,
    mask_out: *mut u8,
    ids_out: *mut u32,
    ids_len: usize,
) -> SunetStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let n = height
            .checked_mul(width)
            .ok_or_else(|| Fail(SunetStatus::InvalidArgument, "image size overflows".into()))?;
        let image = slice_arg(image, n, "image")?;
        let mask_out = slice_mut_arg(mask_out, n, "mask_out")?;
        let sample = SegmentationSample {
            sample_id: "ffi".into(),
            slice_index: 0,
            height,
            width,
            image: image.to_vec(),
            mask: vec![0; n],
            stats: RegionStats::absent(),
        };
        let pred = predict(&h.model, std::slice::from_ref(&sample))?
            .pop()
            .expect("one prediction per sample");
        if let (Some(sentence), false) = (&pred.sentence, ids_out.is_null()) {
            if ids_len < sentence.ids.len() {
                return Err(Fail(
                    SunetStatus::InvalidArgument,
                    format!("ids_len {ids_len} is shorter than the sentence length {}", sentence.ids.len()),
                ));
            }
            slice_mut_arg(ids_out, ids_len, "ids_out")?[..sentence.ids.len()].copy_from_slice(&sentence.ids);
        }
        mask_out.copy_from_slice(&pred.mask);
        Ok(())
    })
}

/// Region statistics of a 0/1 mask.
///
/// # Safety
/// `mask` must hold `height * width` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sunet_region_stats(
    mask: *const u8,
    height: usize,
    width: usize,
    out: *mut SunetRegionStats,
) -> SunetStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let mask = slice_arg(mask, height * width, "mask")?;
        *out = (&region_stats(mask, height, width)).into();
        Ok(())
    })
}

/// Dice coefficient of two 0/1 masks of `len` bytes; 1 when both are empty.
///
/// # Safety
/// `a` and `b` must hold `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sunet_dsc(a: *const u8, b: *const u8, len: usize, out: *mut f64) -> SunetStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = dsc(slice_arg(a, len, "a")?, slice_arg(b, len, "b")?)?;
        Ok(())
    })
}

/// `softmax((log p + g) / tau)` over `len` entries.
///
/// # Safety
/// `p`, `g` and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn sunet_gumbel_softmax(
    p: *const f64,
    g: *const f64,
    len: usize,
    tau: f64,
    out: *mut f64,
) -> SunetStatus {
    guard(|| {
        let y = gumbel_softmax(slice_arg(p, len, "p")?, tau, slice_arg(g, len, "g")?)?;
        slice_mut_arg(out, len, "out")?.copy_from_slice(&y);
        Ok(())
    })
}

/// Runs the symbol analysis on a sentence log and stats.csv, writing
/// `table2.csv` and `patterns.txt` into `out_dir`.
///
/// # Safety
/// The paths must be nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn sunet_analyze_files(
    sentences: *const c_char,
    stats: *const c_char,
    out_dir: *const c_char,
    min_count: usize,
    max_k: usize,
    min_coverage: f64,
) -> SunetStatus {
    guard(|| {
        let cfg = AnalysisConfig {
            min_count,
            max_k,
            min_coverage,
        };
        analyze_files(
            &path_arg(sentences, "sentences")?,
            &path_arg(stats, "stats")?,
            &path_arg(out_dir, "out_dir")?,
            &cfg,
        )?;
        Ok(())
    })
}
