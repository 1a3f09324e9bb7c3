//! C interface to trelm.
//!
//! Every fallible call returns a [`TrelmStatus`]. On anything other than
//! `TRELM_STATUS_OK` a description is kept per thread and can be read with
//! [`trelm_last_error_message`]. Objects cross the boundary as opaque
//! handles that the caller releases with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use trelm::datakit::RunConfig;
use trelm::error::Error as CoreError;
use trelm::evalkit::{self, BleuUnit};
use trelm::model::TransformerStack;
use trelm::pipeline;
use trelm::tokenizer::Vocab;
use trelm::trainer::{SRC_LANG, TGT_LANG};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrelmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Checkpoint = 6,
    InvalidArgument = 7,
    BufferTooSmall = 8,
    Internal = 9,
    Panic = 10,
}

#[derive(Debug, thiserror::Error)]
enum FfiError {
    #[error("argument `{0}` is null")]
    Null(&'static str),
    #[error("argument `{0}` is not valid UTF-8")]
    Utf8(&'static str),
    #[error("buffer holds {cap} elements, {needed} needed")]
    BufferTooSmall { cap: usize, needed: usize },
    #[error("{0}")]
    Argument(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl FfiError {
    fn status(&self) -> TrelmStatus {
        match self {
            FfiError::Null(_) => TrelmStatus::NullArgument,
            FfiError::Utf8(_) => TrelmStatus::InvalidUtf8,
            FfiError::BufferTooSmall { .. } => TrelmStatus::BufferTooSmall,
            FfiError::Argument(_) => TrelmStatus::InvalidArgument,
            FfiError::Core(e) => core_status(e),
        }
    }
}

fn core_status(e: &CoreError) -> TrelmStatus {
    match e {
        CoreError::Io { .. } => TrelmStatus::Io,
        CoreError::Utf8 { .. } => TrelmStatus::InvalidUtf8,
        CoreError::Parse { .. } => TrelmStatus::Parse,
        CoreError::Config(_) => TrelmStatus::Config,
        CoreError::Checkpoint { .. } => TrelmStatus::Checkpoint,
        CoreError::Stage { source, .. } => core_status(source),
        CoreError::Tensor(_) | CoreError::Model(_) | CoreError::Batch(_) => TrelmStatus::Internal,
        _ => TrelmStatus::InvalidArgument,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), FfiError>) -> TrelmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TrelmStatus::Ok,
        Ok(Err(e)) => {
            set_last_error(e.to_string());
            e.status()
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            TrelmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, FfiError> {
    if p.is_null() {
        return Err(FfiError::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| FfiError::Utf8(name))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, FfiError> {
    p.as_ref().ok_or(FfiError::Null(name))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, FfiError> {
    p.as_mut().ok_or(FfiError::Null(name))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Run configuration holding every key at its default.
pub struct TrelmConfig(RunConfig);

/// A joint subword vocabulary.
pub struct TrelmVocab(Vocab);

/// A transformer checkpoint.
pub struct TrelmModel(TransformerStack);

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn trelm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next trelm call on the same thread.
#[no_mangle]
pub extern "C" fn trelm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Byte length of the last error message, 0 if there is none.
#[no_mangle]
pub extern "C" fn trelm_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |s| s.as_bytes().len()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn trelm_status_name(status: TrelmStatus) -> *const c_char {
    let s: &'static str = match status {
        TrelmStatus::Ok => "ok\0",
        TrelmStatus::NullArgument => "null argument\0",
        TrelmStatus::InvalidUtf8 => "invalid utf-8\0",
        TrelmStatus::Io => "i/o error\0",
        TrelmStatus::Parse => "parse error\0",
        TrelmStatus::Config => "config error\0",
        TrelmStatus::Checkpoint => "checkpoint error\0",
        TrelmStatus::InvalidArgument => "invalid argument\0",
        TrelmStatus::BufferTooSmall => "buffer too small\0",
        TrelmStatus::Internal => "internal error\0",
        TrelmStatus::Panic => "panic\0",
    };
    s.as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` is NULL or came from this library and has not been freed.
#[no_mangle]
pub unsafe extern "C" fn trelm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub extern "C" fn trelm_config_new() -> *mut TrelmConfig {
    boxed(TrelmConfig(RunConfig::default()))
}

/// # Safety
/// `cfg` is NULL or a live handle from [`trelm_config_new`].
#[no_mangle]
pub unsafe extern "C" fn trelm_config_free(cfg: *mut TrelmConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Sets one `key` to `value`. Unknown keys are rejected.
///
/// # Safety
/// `cfg` is a live config handle; `key` and `value` are NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn trelm_config_set(cfg: *mut TrelmConfig, key: *const c_char, value: *const c_char) -> TrelmStatus {
    guard(|| {
        let cfg = out_arg(cfg, "cfg")?;
        cfg.0.set(str_arg(key, "key")?, str_arg(value, "value")?)?;
        Ok(())
    })
}

/// Merges a file of `key=value` lines.
///
/// # Safety
/// `cfg` is a live config handle; `path` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn trelm_config_load(cfg: *mut TrelmConfig, path: *const c_char) -> TrelmStatus {
    guard(|| {
        let cfg = out_arg(cfg, "cfg")?;
        cfg.0.merge_file(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Current value of `key` as a new string; free it with [`trelm_string_free`].
///
/// # Safety
/// `cfg` is a live config handle, `key` is NUL-terminated and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn trelm_config_get(cfg: *const TrelmConfig, key: *const c_char, out: *mut *mut c_char) -> TrelmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let v = ref_arg(cfg, "cfg")?.0.get(str_arg(key, "key")?)?;
        *out = CString::new(v).map_err(|e| FfiError::Argument(e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `path` is NUL-terminated and `out` is writable. On success `*out` owns a
/// handle released with [`trelm_vocab_free`].
#[no_mangle]
pub unsafe extern "C" fn trelm_vocab_load(path: *const c_char, out: *mut *mut TrelmVocab) -> TrelmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let v = Vocab::load(Path::new(str_arg(path, "path")?))?;
        *out = boxed(TrelmVocab(v));
        Ok(())
    })
}

/// # Safety
/// `v` is NULL or a live vocabulary handle.
#[no_mangle]
pub unsafe extern "C" fn trelm_vocab_free(v: *mut TrelmVocab) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// Number of tokens, 0 for a NULL handle.
///
/// # Safety
/// `v` is NULL or a live vocabulary handle.
#[no_mangle]
pub unsafe extern "C" fn trelm_vocab_size(v: *const TrelmVocab) -> usize {
    v.as_ref().map_or(0, |v| v.0.len())
}

/// Encodes `text` into `ids`. `*len` receives the id count; when it exceeds
/// `cap` nothing is written and the call returns `TRELM_STATUS_BUFFER_TOO_SMALL`.
///
/// # Safety
/// `v` is a live handle, `text` is NUL-terminated, `ids` points to `cap`
/// writable elements (or is NULL when `cap` is 0) and `len` is writable.
#[no_mangle]
pub unsafe extern "C" fn trelm_vocab_encode(
    v: *const TrelmVocab,
    text: *const c_char,
    ids: *mut u32,
    cap: usize,
    len: *mut usize,
) -> TrelmStatus {
    guard(|| {
        let len = out_arg(len, "len")?;
        let encoded = ref_arg(v, "vocab")?.0.encode(str_arg(text, "text")?);
        *len = encoded.len();
        if encoded.len() > cap {
            return Err(FfiError::BufferTooSmall { cap, needed: encoded.len() });
        }
        if !encoded.is_empty() {
            if ids.is_null() {
                return Err(FfiError::Null("ids"));
            }
            ptr::copy_nonoverlapping(encoded.as_ptr(), ids, encoded.len());
        }
        Ok(())
    })
}

/// Decodes `len` ids, dropping special tokens, into a new string.
///
/// # Safety
/// `v` is a live handle, `ids` points to `len` readable elements and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn trelm_vocab_decode(v: *const TrelmVocab, ids: *const u32, len: usize, out: *mut *mut c_char) -> TrelmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ids = if len == 0 {
            &[][..]
        } else if ids.is_null() {
            return Err(FfiError::Null("ids"));
        } else {
            std::slice::from_raw_parts(ids, len)
        };
        let s = ref_arg(v, "vocab")?.0.decode(ids, true)?;
        *out = CString::new(s).map_err(|e| FfiError::Argument(e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `path` is NUL-terminated and `out` is writable. On success `*out` owns a
/// handle released with [`trelm_model_free`].
#[no_mangle]
pub unsafe extern "C" fn trelm_model_load(path: *const c_char, out: *mut *mut TrelmModel) -> TrelmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let m = TransformerStack::load(Path::new(str_arg(path, "path")?))?;
        *out = boxed(TrelmModel(m));
        Ok(())
    })
}

/// # Safety
/// `m` is NULL or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn trelm_model_free(m: *mut TrelmModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

fn lang_id(lang: u32) -> Result<u32, FfiError> {
    match lang {
        SRC_LANG | TGT_LANG => Ok(lang),
        l => Err(FfiError::Argument(format!("language id {l} is neither 0 (source) nor 1 (target)"))),
    }
}

/// Bits per word of masked tokens over the non-empty lines of `text`, under
/// the evaluation mask drawn from `mask_seed`. `lang` is 0 for source, 1 for target.
///
/// # Safety
/// Handles are live, `text` is NUL-terminated and `bpw` is writable.
#[no_mangle]
pub unsafe extern "C" fn trelm_model_bpw(
    m: *const TrelmModel,
    v: *const TrelmVocab,
    text: *const c_char,
    lang: u32,
    mask_seed: u64,
    bpw: *mut f64,
) -> TrelmStatus {
    guard(|| {
        let bpw = out_arg(bpw, "bpw")?;
        let (m, v) = (&ref_arg(m, "model")?.0, &ref_arg(v, "vocab")?.0);
        let t_max = m.cfg.t_max;
        let sents: Vec<Vec<u32>> = str_arg(text, "text")?
            .lines()
            .map(|l| v.encode(l))
            .filter(|s| !s.is_empty())
            .map(|mut s| {
                s.truncate(t_max.saturating_sub(trelm::datakit::RESERVED).max(1));
                s
            })
            .collect();
        *bpw = evalkit::bpw(m, &sents, lang_id(lang)?, mask_seed, evalkit::EVAL_BATCH)?.bpw;
        Ok(())
    })
}

/// Translates one source sentence with the CdLM decoder into a new string.
///
/// # Safety
/// Handles are live, `source` is NUL-terminated and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn trelm_generate(m: *const TrelmModel, v: *const TrelmVocab, source: *const c_char, out: *mut *mut c_char) -> TrelmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (m, v) = (&ref_arg(m, "model")?.0, &ref_arg(v, "vocab")?.0);
        let ids = v.encode(str_arg(source, "source")?);
        let limit = m.cfg.t_max.saturating_sub(trelm::datakit::RESERVED);
        if ids.len() > limit {
            return Err(FfiError::Argument(format!("source has {} tokens, the model takes at most {limit}", ids.len())));
        }
        let text = pipeline::generate_text(m, v, &[&ids])?.pop().unwrap_or_default();
        *out = CString::new(text).map_err(|e| FfiError::Argument(e.to_string()))?.into_raw();
        Ok(())
    })
}

/// Corpus BLEU-1..`max_n` of newline-separated hypotheses against references,
/// as percentages written to `scores[0..max_n]`. `unit` is 0 for words, 1 for characters.
///
/// # Safety
/// Strings are NUL-terminated and `scores` points to `max_n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn trelm_bleu(hyp: *const c_char, refs: *const c_char, unit: u32, max_n: usize, scores: *mut f64) -> TrelmStatus {
    guard(|| {
        if scores.is_null() {
            return Err(FfiError::Null("scores"));
        }
        let unit = match unit {
            0 => BleuUnit::Word,
            1 => BleuUnit::Char,
            u => return Err(FfiError::Argument(format!("unit {u} is neither 0 (word) nor 1 (char)"))),
        };
        let split = |s: &str| -> Vec<Vec<String>> { s.lines().map(|l| evalkit::units(l, unit)).collect() };
        let b = evalkit::bleu(&split(str_arg(hyp, "hyp")?), &split(str_arg(refs, "refs")?), max_n)?;
        ptr::copy_nonoverlapping(b.as_ptr(), scores, b.len());
        Ok(())
    })
}

/// Runs every pipeline stage into `out_dir`, reusing cached stages.
///
/// # Safety
/// `cfg` is a live config handle and `out_dir` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn trelm_run_pipeline(cfg: *const TrelmConfig, seed: u64, out_dir: *const c_char) -> TrelmStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        pipeline::run_pipeline(&cfg.0, seed, Path::new(str_arg(out_dir, "out_dir")?))?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let p = trelm_last_error_message();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
    }

    #[test]
    fn panics_become_status() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, TrelmStatus::Panic);
        assert!(last_error().contains("boom"));
    }

    #[test]
    fn success_clears_the_error() {
        guard(|| Err(FfiError::Argument("x".into())));
        assert_eq!(trelm_last_error_length(), 1);
        assert_eq!(guard(|| Ok(())), TrelmStatus::Ok);
        assert!(trelm_last_error_message().is_null());
    }

    #[test]
    fn stage_errors_map_to_the_inner_status() {
        let inner = CoreError::Config("bad".into());
        let e = CoreError::Stage { stage: "donor".into(), source: Box::new(inner) };
        assert_eq!(core_status(&e), TrelmStatus::Config);
    }

    #[test]
    fn status_names_are_distinct() {
        let all = [
            TrelmStatus::Ok,
            TrelmStatus::NullArgument,
            TrelmStatus::InvalidUtf8,
            TrelmStatus::Io,
            TrelmStatus::Parse,
            TrelmStatus::Config,
            TrelmStatus::Checkpoint,
            TrelmStatus::InvalidArgument,
            TrelmStatus::BufferTooSmall,
            TrelmStatus::Internal,
            TrelmStatus::Panic,
        ];
        let names: std::collections::BTreeSet<_> =
            all.iter().map(|&s| unsafe { CStr::from_ptr(trelm_status_name(s)) }.to_owned()).collect();
        assert_eq!(names.len(), all.len());
    }
}
