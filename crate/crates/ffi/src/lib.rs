//! C ABI over the imagechat metrics and chat engine.
//!
//! Every function returns an [`IcStatus`]. On failure the message is kept in
//! a thread-local slot readable with [`ic_last_error`]. Strings returned
//! through out-pointers are owned by the caller and must be released with
//! [`ic_string_free`]; engines with [`ic_engine_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use imagechat::data::{is_question, tokenize};
use imagechat::harness::commands::build_engine;
use imagechat::harness::RunConfig;
use imagechat::metrics::{binomial_two_tailed, bleu4, rouge_l, token_f1, PreferenceTally};
use imagechat::service::{ApiError, Engine, RankRequest};
use serde_json::{json, Value};

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IcStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// An argument was well-formed but rejected, e.g. malformed JSON.
    InvalidArgument = 3,
    /// Loading a file or model failed.
    LoadFailed = 4,
    /// The engine answered with a structured error; the out JSON holds
    /// `{code, message}`.
    ApiError = 5,
    /// A panic was caught at the boundary.
    Internal = 6,
}

/// Opaque chat engine.
pub struct IcEngine {
    engine: Engine,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(IcStatus, String, Option<Value>);

type Outcome = Result<(), Failure>;

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Outcome) -> IcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(Failure(IcStatus::Internal, format!("panic: {}", msg.unwrap_or_default()), None))
    });
    match outcome {
        Ok(()) => IcStatus::Ok,
        Err(Failure(status, msg, _)) => {
            set_last_error(&msg);
            status
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(IcStatus::NullArgument, format!("{name} is null"), None)
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(IcStatus::InvalidArgument, msg.into(), None)
}

/// # Safety
/// `p` is null or a valid nul-terminated string.
unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(IcStatus::InvalidUtf8, format!("{name} is not valid UTF-8"), None))
}

/// # Safety
/// `p` is null or points to `n` valid string pointers.
unsafe fn texts<'a>(p: *const *const c_char, n: usize, name: &str) -> Result<Vec<&'a str>, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    (0..n).map(|i| text(*p.add(i), name)).collect()
}

/// # Safety
/// `out` is null or valid for a write of `T`.
unsafe fn write<T>(out: *mut T, v: T, name: &str) -> Outcome {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(v);
    Ok(())
}

fn to_c(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn ic_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn ic_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` is null or was returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ic_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// ROUGE-L F-measure between a hypothesis and a reference, both tokenized
/// the same way as the evaluation pipeline.
///
/// # Safety
/// String arguments are nul-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ic_rouge_l(hyp: *const c_char, reference: *const c_char, out: *mut f64) -> IcStatus {
    guard(|| {
        let v = rouge_l(&tokenize(text(hyp, "hyp")?), &tokenize(text(reference, "reference")?));
        write(out, v, "out")
    })
}

/// Unigram F1 over token multisets.
///
/// # Safety
/// String arguments are nul-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ic_token_f1(hyp: *const c_char, reference: *const c_char, out: *mut f64) -> IcStatus {
    guard(|| {
        let v = token_f1(&tokenize(text(hyp, "hyp")?), &tokenize(text(reference, "reference")?));
        write(out, v, "out")
    })
}

/// Corpus BLEU-4 in [0, 1] over `n` aligned hypothesis and reference
/// strings. `smoothed` selects add-one smoothing on the 2- to 4-gram
/// precisions.
///
/// # Safety
/// `hyps` and `refs` each point to `n` nul-terminated strings; `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ic_bleu4(
    hyps: *const *const c_char,
    refs: *const *const c_char,
    n: usize,
    smoothed: bool,
    out: *mut f64,
) -> IcStatus {
    guard(|| {
        let h: Vec<Vec<String>> = texts(hyps, n, "hyps")?.into_iter().map(tokenize).collect();
        let r: Vec<Vec<String>> = texts(refs, n, "refs")?.into_iter().map(tokenize).collect();
        let b = bleu4(&h, &r).map_err(|e| invalid(e.to_string()))?;
        write(out, if smoothed { b.smoothed } else { b.unsmoothed }, "out")
    })
}

/// Exact two-tailed binomial p-value of `wins_a` against `wins_b` under
/// p = 1/2.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ic_binomial_two_tailed(wins_a: u64, wins_b: u64, out: *mut f64) -> IcStatus {
    guard(|| {
        let tally = PreferenceTally::new(wins_a, wins_b).map_err(|e| invalid(e.to_string()))?;
        write(out, binomial_two_tailed(tally), "out")
    })
}

/// Whether an utterance counts as a question.
///
/// # Safety
/// `s` is nul-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ic_is_question(s: *const c_char, out: *mut bool) -> IcStatus {
    guard(|| write(out, is_question(text(s, "s")?), "out"))
}

/// Builds an engine from a JSON run config with the same keys as the
/// command-line config file, e.g.
/// `{"features": "f.imf", "checkpoint": "r.ckpt", "data": "d.jsonl"}`.
///
/// # Safety
/// `config_json` is nul-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ic_engine_open(config_json: *const c_char, out: *mut *mut IcEngine) -> IcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        out.write(ptr::null_mut());
        let cfg: RunConfig = serde_json::from_str(text(config_json, "config_json")?).map_err(|e| invalid(format!("config: {e}")))?;
        let engine = build_engine(&cfg, &cfg.hash()).map_err(|e| Failure(IcStatus::LoadFailed, e.to_string(), None))?;
        out.write(Box::into_raw(Box::new(IcEngine { engine })));
        Ok(())
    })
}

/// Releases an engine. Null is ignored.
///
/// # Safety
/// `engine` is null or was returned by [`ic_engine_open`] and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ic_engine_free(engine: *mut IcEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Runs `f` on the engine and writes its JSON answer, or the error body on
/// an engine error.
unsafe fn answer(
    engine: *const IcEngine,
    out_json: *mut *mut c_char,
    f: impl FnOnce(&Engine) -> Result<Value, Failure>,
) -> Outcome {
    if out_json.is_null() {
        return Err(null("out_json"));
    }
    out_json.write(ptr::null_mut());
    let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
    match f(&engine.engine) {
        Ok(v) => {
            out_json.write(to_c(v.to_string()));
            Ok(())
        }
        Err(failure) => {
            if let Some(body) = &failure.2 {
                out_json.write(to_c(body.to_string()));
            }
            Err(failure)
        }
    }
}

fn parse(body: &str) -> Result<Value, Failure> {
    serde_json::from_str(body).map_err(|e| invalid(format!("request: {e}")))
}

fn api(e: ApiError) -> Failure {
    let body = json!({"code": e.code, "message": e.message});
    Failure(IcStatus::ApiError, format!("{}: {}", e.code, e.message), Some(body))
}

/// The chat endpoint: a session operation (a body with `op`) or a one-shot
/// reply request. Writes the JSON answer to `out_json`; on an engine error
/// the status is `IC_STATUS_API_ERROR` and `out_json` holds `{code, message}`.
///
/// # Safety
/// `engine` is valid; `request_json` is nul-terminated; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn ic_engine_chat(engine: *const IcEngine, request_json: *const c_char, out_json: *mut *mut c_char) -> IcStatus {
    guard(|| {
        let body = parse(text(request_json, "request_json")?)?;
        answer(engine, out_json, |e| e.chat(body).map_err(api))
    })
}

/// Scores caller-supplied candidates for a context, best first.
///
/// # Safety
/// As for [`ic_engine_chat`].
#[no_mangle]
pub unsafe extern "C" fn ic_engine_rank(engine: *const IcEngine, request_json: *const c_char, out_json: *mut *mut c_char) -> IcStatus {
    guard(|| {
        let req: RankRequest = serde_json::from_value(parse(text(request_json, "request_json")?)?).map_err(|e| invalid(format!("request: {e}")))?;
        answer(engine, out_json, |e| {
            let r = e.rank(&req).map_err(api)?;
            serde_json::to_value(r).map_err(|e| api(ApiError::internal(e.to_string())))
        })
    })
}

/// Style traits with their classes and the known image ids.
///
/// # Safety
/// `engine` is valid; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn ic_engine_catalog(engine: *const IcEngine, out_json: *mut *mut c_char) -> IcStatus {
    guard(|| answer(engine, out_json, |e| serde_json::to_value(e.catalog()).map_err(|e| api(ApiError::internal(e.to_string())))))
}
