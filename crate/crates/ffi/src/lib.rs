//! C interface to the railtrace pipeline.
//!
//! Every function returns an `int32_t` status (`RT_OK` on success) and
//! writes results through out-pointers. After a failure,
//! [`rt_last_error`] describes it on the calling thread. Strings returned
//! by the library are owned by the caller and released with
//! [`rt_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use railtrace::config::PipelineConfig;
use railtrace::pipeline::{cmd_evaluate, cmd_infer, cmd_simulate, InferenceOutput};
use railtrace::prob::{kl_normal, normal_pdf, NormalParams};
use railtrace::Error;

pub const RT_OK: i32 = 0;
/// Invalid configuration, scenario, or argument value.
pub const RT_ERR_CONFIG: i32 = 1;
/// Unreadable or malformed input data.
pub const RT_ERR_DATA: i32 = 2;
/// An internal consistency check failed.
pub const RT_ERR_INTERNAL: i32 = 3;
/// A required pointer argument was null.
pub const RT_ERR_NULL: i32 = 4;
/// A Rust panic was caught at the boundary.
pub const RT_ERR_PANIC: i32 = 5;
/// The call needs a completed inference run.
pub const RT_ERR_STATE: i32 = 6;

/// Opaque pipeline handle.
pub struct RtPipeline {
    config: PipelineConfig,
    output: Option<InferenceOutput>,
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

fn fail(code: i32, msg: impl Into<String>) -> i32 {
    set_error(msg);
    code
}

fn from_error(e: &Error) -> i32 {
    let code = match e.exit_code() {
        1 => RT_ERR_CONFIG,
        3 => RT_ERR_INTERNAL,
        _ => RT_ERR_DATA,
    };
    fail(code, e.to_string())
}

/// Runs `f` with panics converted to `RT_ERR_PANIC`.
fn guard(f: impl FnOnce() -> i32) -> i32 {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(p) => {
            let what = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(RT_ERR_PANIC, format!("panic: {what}"))
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, i32> {
    if p.is_null() {
        return Err(fail(RT_ERR_NULL, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(RT_ERR_CONFIG, format!("{name} is not valid UTF-8")))
}

unsafe fn handle<'a>(p: *mut RtPipeline) -> Result<&'a mut RtPipeline, i32> {
    p.as_mut().ok_or_else(|| fail(RT_ERR_NULL, "pipeline handle is null"))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

fn boxed(config: PipelineConfig, out: *mut *mut RtPipeline) -> i32 {
    if let Err(e) = config.validate() {
        return from_error(&e);
    }
    let h = Box::new(RtPipeline { config, output: None });
    unsafe { *out = Box::into_raw(h) };
    RT_OK
}

/// Message for the most recent failure on this thread, or null.
///
/// The pointer stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn rt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn rt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a pipeline from a JSON config document. Null or an empty
/// string gives the defaults. Relative paths resolve against the process
/// working directory.
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rt_pipeline_new(config_json: *const c_char, out: *mut *mut RtPipeline) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail(RT_ERR_NULL, "out is null");
        }
        *out = ptr::null_mut();
        let text = if config_json.is_null() {
            ""
        } else {
            match str_arg(config_json, "config_json") {
                Ok(s) => s,
                Err(c) => return c,
            }
        };
        let config = if text.trim().is_empty() {
            PipelineConfig::default()
        } else {
            match serde_json::from_str(text) {
                Ok(c) => c,
                Err(e) => return fail(RT_ERR_CONFIG, format!("invalid configuration: {e}")),
            }
        };
        boxed(config, out)
    })
}

/// Creates a pipeline from a config file; relative paths inside it resolve
/// against the file's directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rt_pipeline_new_from_file(path: *const c_char, out: *mut *mut RtPipeline) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail(RT_ERR_NULL, "out is null");
        }
        *out = ptr::null_mut();
        let path = match str_arg(path, "path") {
            Ok(s) => s,
            Err(c) => return c,
        };
        match PipelineConfig::load(Path::new(path)) {
            Ok(c) => boxed(c, out),
            Err(e) => from_error(&e),
        }
    })
}

/// Creates a pipeline over explicit AFC, AVL and topology files.
/// `ground_truth` may be null.
///
/// # Safety
/// Path arguments must be NUL-terminated strings (or null where allowed);
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rt_pipeline_new_from_files(
    afc: *const c_char,
    avl: *const c_char,
    topology: *const c_char,
    ground_truth: *const c_char,
    out: *mut *mut RtPipeline,
) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail(RT_ERR_NULL, "out is null");
        }
        *out = ptr::null_mut();
        let mut config = PipelineConfig::default();
        let paths = (|| -> Result<_, i32> {
            let truth = if ground_truth.is_null() {
                None
            } else {
                Some(PathBuf::from(str_arg(ground_truth, "ground_truth")?))
            };
            Ok((
                PathBuf::from(str_arg(afc, "afc")?),
                PathBuf::from(str_arg(avl, "avl")?),
                PathBuf::from(str_arg(topology, "topology")?),
                truth,
            ))
        })();
        match paths {
            Ok((a, v, t, g)) => {
                config.inputs.afc = Some(a);
                config.inputs.avl = Some(v);
                config.inputs.topology = Some(t);
                config.inputs.ground_truth = g;
                boxed(config, out)
            }
            Err(c) => c,
        }
    })
}

/// Frees a pipeline. Null is ignored.
///
/// # Safety
/// `p` must come from an `rt_pipeline_new*` call and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn rt_pipeline_free(p: *mut RtPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Sets the output directory used by the run and simulate calls.
///
/// # Safety
/// `p` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rt_pipeline_set_output_dir(p: *mut RtPipeline, dir: *const c_char) -> i32 {
    guard(|| {
        let h = match handle(p) {
            Ok(h) => h,
            Err(c) => return c,
        };
        match str_arg(dir, "dir") {
            Ok(d) => {
                h.config.output_dir = PathBuf::from(d);
                RT_OK
            }
            Err(c) => c,
        }
    })
}

/// Overrides the scenario seed.
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rt_pipeline_set_seed(p: *mut RtPipeline, seed: u64) -> i32 {
    guard(|| match handle(p) {
        Ok(h) => {
            h.config.seed = Some(seed);
            RT_OK
        }
        Err(c) => c,
    })
}

/// Writes a synthetic scenario (AFC, AVL, topology, ground truth) to the
/// output directory.
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rt_pipeline_simulate(p: *mut RtPipeline) -> i32 {
    guard(|| {
        let h = match handle(p) {
            Ok(h) => h,
            Err(c) => return c,
        };
        match cmd_simulate(&h.config) {
            Ok(_) => RT_OK,
            Err(e) => from_error(&e),
        }
    })
}

/// Runs inference and writes its output files. Without input files in the
/// config, a scenario is simulated first.
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rt_pipeline_run(p: *mut RtPipeline) -> i32 {
    guard(|| {
        let h = match handle(p) {
            Ok(h) => h,
            Err(c) => return c,
        };
        match cmd_infer(&h.config) {
            Ok(o) => {
                h.output = Some(o);
                RT_OK
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Runs inference and scores it against ground truth. Either out-pointer
/// may be null.
///
/// # Safety
/// `p` must be a live handle; non-null out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn rt_pipeline_evaluate(
    p: *mut RtPipeline,
    accuracy: *mut f64,
    baseline_accuracy: *mut f64,
) -> i32 {
    guard(|| {
        let h = match handle(p) {
            Ok(h) => h,
            Err(c) => return c,
        };
        match cmd_evaluate(&h.config) {
            Ok(ev) => {
                if !accuracy.is_null() {
                    *accuracy = ev.doc.inferred.accuracy;
                }
                if !baseline_accuracy.is_null() {
                    *baseline_accuracy = ev.doc.baseline.accuracy;
                }
                h.output = Some(ev.output);
                RT_OK
            }
            Err(e) => from_error(&e),
        }
    })
}

fn output(h: &RtPipeline) -> Result<&InferenceOutput, i32> {
    h.output
        .as_ref()
        .ok_or_else(|| fail(RT_ERR_STATE, "no inference results; call rt_pipeline_run first"))
}

/// Number of itineraries from the last run.
///
/// # Safety
/// `p` must be a live handle; `count` writable.
#[no_mangle]
pub unsafe extern "C" fn rt_pipeline_itinerary_count(p: *mut RtPipeline, count: *mut usize) -> i32 {
    guard(|| {
        if count.is_null() {
            return fail(RT_ERR_NULL, "count is null");
        }
        match handle(p).and_then(|h| output(h)) {
            Ok(o) => {
                *count = o.itineraries.len();
                RT_OK
            }
            Err(c) => c,
        }
    })
}

/// Itinerary `index` as a JSON object; free with [`rt_string_free`].
///
/// # Safety
/// `p` must be a live handle; `json` writable.
#[no_mangle]
pub unsafe extern "C" fn rt_pipeline_itinerary_json(p: *mut RtPipeline, index: usize, json: *mut *mut c_char) -> i32 {
    guard(|| {
        if json.is_null() {
            return fail(RT_ERR_NULL, "json is null");
        }
        *json = ptr::null_mut();
        let o = match handle(p).and_then(|h| output(h)) {
            Ok(o) => o,
            Err(c) => return c,
        };
        match o.itineraries.get(index) {
            Some(it) => {
                *json = into_c_string(serde_json::to_string(it).expect("itinerary serializes"));
                RT_OK
            }
            None => fail(
                RT_ERR_CONFIG,
                format!("index {index} out of range ({} itineraries)", o.itineraries.len()),
            ),
        }
    })
}

/// Fitted models of the last run as JSON; free with [`rt_string_free`].
///
/// # Safety
/// `p` must be a live handle; `json` writable.
#[no_mangle]
pub unsafe extern "C" fn rt_pipeline_models_json(p: *mut RtPipeline, json: *mut *mut c_char) -> i32 {
    guard(|| {
        if json.is_null() {
            return fail(RT_ERR_NULL, "json is null");
        }
        *json = ptr::null_mut();
        match handle(p).and_then(|h| output(h)) {
            Ok(o) => {
                *json = into_c_string(serde_json::to_string(&o.models).expect("models serialize"));
                RT_OK
            }
            Err(c) => c,
        }
    })
}

fn check_normal(mu: f64, sigma2: f64) -> Result<NormalParams, i32> {
    if !mu.is_finite() || !sigma2.is_finite() || sigma2 <= 0.0 {
        return Err(fail(
            RT_ERR_CONFIG,
            format!("need finite mu and positive finite sigma2, got ({mu}, {sigma2})"),
        ));
    }
    Ok(NormalParams::new(mu, sigma2))
}

/// `KL(N(mu_p, sigma2_p) ‖ N(mu_q, sigma2_q))` in nats.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rt_kl_normal(mu_p: f64, sigma2_p: f64, mu_q: f64, sigma2_q: f64, out: *mut f64) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail(RT_ERR_NULL, "out is null");
        }
        match (check_normal(mu_p, sigma2_p), check_normal(mu_q, sigma2_q)) {
            (Ok(p), Ok(q)) => {
                *out = kl_normal(&p, &q);
                RT_OK
            }
            (Err(c), _) | (_, Err(c)) => c,
        }
    })
}

/// Normal density at `x`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rt_normal_pdf(x: f64, mu: f64, sigma2: f64, out: *mut f64) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail(RT_ERR_NULL, "out is null");
        }
        match check_normal(mu, sigma2) {
            Ok(p) => {
                *out = normal_pdf(x, &p);
                RT_OK
            }
            Err(c) => c,
        }
    })
}
