//! C ABI over the `gkv` engine.
//!
//! Every fallible function returns a [`GkvStatus`]; on failure the message is
//! available from [`gkv_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gkv::engine::{retention_ratio, EvictionConfig, EvictionLog, Policy, RunMetrics, TieBreak};
use gkv::train::{self, SparseMaskSet};
use gkv::{DecodeTrace, Error, TraceDims};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GkvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Compute = 5,
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> GkvStatus {
    match e {
        Error::Config(_) | Error::Missing(_) | Error::OutOfRange(_) | Error::Shape(_) => GkvStatus::InvalidArgument,
        Error::Io(_) => GkvStatus::Io,
        Error::Degenerate(_) => GkvStatus::Compute,
        _ => GkvStatus::Format,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard<F>(f: F) -> GkvStatus
where
    F: FnOnce() -> Result<(), (GkvStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GkvStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GkvStatus::Panic
        }
    }
}

fn fail(e: Error) -> (GkvStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (GkvStatus, String) {
    (GkvStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (GkvStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (GkvStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn gkv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn gkv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Eviction settings. `policy` is a policy name such as `"gkv"`, `"snapkv"`
/// or `"global-mean+redundancy"`; null means `"gkv"`. A negative
/// `recent_exempt` means the window size.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GkvConfig {
    pub budget: usize,
    pub window: usize,
    pub stride: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub policy: *const c_char,
    pub prefer_old_on_ties: bool,
    pub sink_tokens: usize,
    pub compress_prompt: bool,
    pub pool_kernel: usize,
    pub global_pool: bool,
    pub normalize_local: bool,
    pub redundancy_threshold: f64,
    pub recent_exempt: i64,
    pub epsilon: f64,
}

impl GkvConfig {
    unsafe fn to_config(self) -> Result<EvictionConfig, (GkvStatus, String)> {
        let policy = if self.policy.is_null() {
            Policy::GKV
        } else {
            str_arg(self.policy, "policy")?.parse().map_err(fail)?
        };
        let cfg = EvictionConfig {
            budget: self.budget,
            window: self.window,
            stride: self.stride,
            alpha: self.alpha,
            lambda: self.lambda,
            policy,
            tie_break: if self.prefer_old_on_ties { TieBreak::PreferOld } else { TieBreak::PreferRecent },
            sink_tokens: self.sink_tokens,
            compress_prompt: self.compress_prompt,
            pool_kernel: self.pool_kernel,
            global_pool: self.global_pool,
            normalize_local: self.normalize_local,
            redundancy_threshold: self.redundancy_threshold,
            recent_exempt: usize::try_from(self.recent_exempt).ok(),
            epsilon: self.epsilon,
        };
        cfg.validate().map_err(fail)?;
        Ok(cfg)
    }
}

/// Fills `out` with the default settings (policy left null, meaning G-KV).
///
/// # Safety
/// `out` must be null or point to writable memory for one `GkvConfig`.
#[no_mangle]
pub unsafe extern "C" fn gkv_config_default(out: *mut GkvConfig) -> GkvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let d = EvictionConfig::default();
        out.write(GkvConfig {
            budget: d.budget,
            window: d.window,
            stride: d.stride,
            alpha: d.alpha,
            lambda: d.lambda,
            policy: ptr::null(),
            prefer_old_on_ties: false,
            sink_tokens: d.sink_tokens,
            compress_prompt: d.compress_prompt,
            pool_kernel: d.pool_kernel,
            global_pool: d.global_pool,
            normalize_local: d.normalize_local,
            redundancy_threshold: d.redundancy_threshold,
            recent_exempt: -1,
            epsilon: d.epsilon,
        });
        Ok(())
    })
}

/// A decoded trace.
pub struct GkvTrace(DecodeTrace);

/// The eviction log and metrics of one replay.
pub struct GkvRun {
    log: EvictionLog,
    metrics: RunMetrics,
}

/// Sparse attention masks derived from a run.
pub struct GkvMasks(SparseMaskSet);

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), (GkvStatus, String)> {
    out.write(Box::into_raw(Box::new(value)));
    Ok(())
}

/// Reads a GKVT file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gkv_trace_open(path: *const c_char, out: *mut *mut GkvTrace) -> GkvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let file = File::open(path).map_err(|e| fail(e.into()))?;
        let trace = gkv::trace::read_trace(BufReader::new(file)).map_err(fail)?;
        put(out, GkvTrace(trace))
    })
}

/// Builds a trace from step-major buffers: for each step, for each layer,
/// `n_q_heads × head_dim` query values and `n_kv_heads × head_dim` key values.
///
/// # Safety
/// `q` and `k` must point to the number of floats implied by the dimensions.
#[no_mangle]
pub unsafe extern "C" fn gkv_trace_from_buffers(
    n_layers: usize,
    n_q_heads: usize,
    n_kv_heads: usize,
    head_dim: usize,
    n_prompt: usize,
    n_steps: usize,
    q: *const f32,
    k: *const f32,
    out: *mut *mut GkvTrace,
) -> GkvStatus {
    guard(|| {
        if out.is_null() || (n_steps > 0 && (q.is_null() || k.is_null())) {
            return Err(null("buffer"));
        }
        let dims = TraceDims {
            n_layers,
            n_q_heads,
            n_kv_heads,
            head_dim,
        };
        dims.validate().map_err(fail)?;
        let copy = |p: *const f32, len: usize| if len == 0 { Vec::new() } else { std::slice::from_raw_parts(p, len).to_vec() };
        let q = copy(q, n_steps * n_layers * dims.q_len());
        let k = copy(k, n_steps * n_layers * dims.k_len());
        put(out, GkvTrace(DecodeTrace::new(dims, n_prompt, q, k).map_err(fail)?))
    })
}

/// Number of steps, or 0 for null.
///
/// # Safety
/// `trace` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gkv_trace_n_steps(trace: *const GkvTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.0.n_steps())
}

/// # Safety
/// `trace` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gkv_trace_free(trace: *mut GkvTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Replays `trace` under `config`.
///
/// # Safety
/// Pointers must be live handles / readable structs; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gkv_simulate(trace: *const GkvTrace, config: *const GkvConfig, out: *mut *mut GkvRun) -> GkvStatus {
    guard(|| {
        let (Some(trace), Some(config)) = (trace.as_ref(), config.as_ref()) else {
            return Err(null("trace or config"));
        };
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = config.to_config()?;
        let (log, mut metrics) = gkv::run(&trace.0, &cfg).map_err(fail)?;
        metrics.compress_ms.clear();
        put(out, GkvRun { log, metrics })
    })
}

/// Final cache length over sequence length.
///
/// # Safety
/// `run` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gkv_run_retention_ratio(run: *const GkvRun, out: *mut f64) -> GkvStatus {
    guard(|| {
        let Some(run) = run.as_ref() else { return Err(null("run")) };
        if out.is_null() {
            return Err(null("out"));
        }
        let seq_len = run.metrics.seq_len;
        out.write(if seq_len == 0 { 1.0 } else { retention_ratio(&run.log, seq_len).map_err(fail)? });
        Ok(())
    })
}

/// Number of per-head eviction events, or 0 for null.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gkv_run_n_events(run: *const GkvRun) -> usize {
    run.as_ref().map_or(0, |r| r.log.events.len())
}

/// Number of compressions, or 0 for null.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gkv_run_n_compressions(run: *const GkvRun) -> usize {
    run.as_ref().map_or(0, |r| r.metrics.n_compressions)
}

/// Copies the positions `(layer, head)` holds at the end of the run into
/// `buf` (ascending). `len` receives the full count even when `cap` is too
/// small, in which case nothing is copied and `InvalidArgument` is returned.
///
/// # Safety
/// `buf` must have room for `cap` values; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gkv_run_retained(
    run: *const GkvRun,
    layer: usize,
    head: usize,
    buf: *mut usize,
    cap: usize,
    len: *mut usize,
) -> GkvStatus {
    guard(|| {
        let Some(run) = run.as_ref() else { return Err(null("run")) };
        if len.is_null() {
            return Err(null("len"));
        }
        let d = run.log.dims;
        if layer >= d.n_layers || head >= d.n_kv_heads {
            return Err((GkvStatus::InvalidArgument, format!("layer {layer} head {head} out of range")));
        }
        let finals = run.log.final_retained(run.metrics.seq_len);
        let positions = &finals[layer][head];
        len.write(positions.len());
        if positions.len() > cap {
            return Err((GkvStatus::InvalidArgument, format!("buffer of {cap} too small for {}", positions.len())));
        }
        if !positions.is_empty() {
            if buf.is_null() {
                return Err(null("buf"));
            }
            ptr::copy_nonoverlapping(positions.as_ptr(), buf, positions.len());
        }
        Ok(())
    })
}

/// Writes the log as JSON lines (`binary == 0`) or in the compact binary form.
///
/// # Safety
/// `run` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gkv_run_write_log(run: *const GkvRun, path: *const c_char, binary: c_int) -> GkvStatus {
    guard(|| {
        let Some(run) = run.as_ref() else { return Err(null("run")) };
        let path = str_arg(path, "path")?;
        let mut w = BufWriter::new(File::create(path).map_err(|e| fail(e.into()))?);
        if binary != 0 {
            run.log.write_binary(&mut w).map_err(fail)?;
        } else {
            run.log.write_jsonl(&mut w).map_err(fail)?;
        }
        w.flush().map_err(|e| fail(e.into()))
    })
}

/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gkv_run_free(run: *mut GkvRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Masks implied by the run's log over `seq_len` positions (0 means the run's length).
///
/// # Safety
/// `run` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gkv_masks_from_run(run: *const GkvRun, seq_len: usize, out: *mut *mut GkvMasks) -> GkvStatus {
    guard(|| {
        let Some(run) = run.as_ref() else { return Err(null("run")) };
        if out.is_null() {
            return Err(null("out"));
        }
        let n = if seq_len == 0 { run.metrics.seq_len } else { seq_len };
        put(out, GkvMasks(train::build_masks(&run.log, n).map_err(fail)?))
    })
}

/// 1 if query `j` sees key `i` in `(layer, head)`, 0 if not, -1 on bad arguments.
///
/// # Safety
/// `masks` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gkv_masks_visible(masks: *const GkvMasks, layer: usize, head: usize, i: usize, j: usize) -> c_int {
    match masks.as_ref() {
        Some(m) if layer < m.0.n_layers() && head < m.0.n_kv_heads() && j < m.0.seq_len() => {
            c_int::from(m.0.visible(layer, head, i, j))
        }
        _ => -1,
    }
}

/// # Safety
/// `masks` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gkv_masks_free(masks: *mut GkvMasks) {
    if !masks.is_null() {
        drop(Box::from_raw(masks));
    }
}

fn write_u64(out: *mut u64, v: gkv::Result<u64>) -> Result<(), (GkvStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    unsafe { out.write(v.map_err(fail)?) };
    Ok(())
}

fn write_f64(out: *mut f64, v: gkv::Result<f64>) -> Result<(), (GkvStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    unsafe { out.write(v.map_err(fail)?) };
    Ok(())
}

/// Bytes of keys and values for a full cache.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gkv_kv_memory_bytes(
    layers: usize,
    head_dim: usize,
    n_kv_heads: usize,
    seq_len: usize,
    bytes_per_el: usize,
    batch: usize,
    out: *mut u64,
) -> GkvStatus {
    guard(|| write_u64(out, train::kv_memory_bytes(layers, head_dim, n_kv_heads, seq_len, bytes_per_el, batch)))
}

/// Bytes of one-byte dense masks.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gkv_mask_memory_bytes(batch: usize, layers: usize, n_kv_heads: usize, seq_len: usize, out: *mut u64) -> GkvStatus {
    guard(|| write_u64(out, train::mask_memory_bytes(batch, layers, n_kv_heads, seq_len)))
}

/// `(budget + stride) / seq_len`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gkv_compressed_fraction(budget: usize, stride: usize, seq_len: usize, out: *mut f64) -> GkvStatus {
    guard(|| write_f64(out, train::compressed_fraction(budget, stride, seq_len)))
}

/// Carried scores relative to the retained keys and values.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gkv_score_cache_fraction(budget: usize, window: usize, head_dim: usize, out: *mut f64) -> GkvStatus {
    guard(|| write_f64(out, train::score_cache_fraction(budget, window, head_dim)))
}

/// Group-standardized advantages. `truncated` may be null; otherwise it
/// holds `n` flags (nonzero means truncated).
///
/// # Safety
/// `rewards` and `out` must hold `n` values; `truncated` null or `n` bytes.
#[no_mangle]
pub unsafe extern "C" fn gkv_grpo_advantages(rewards: *const f64, truncated: *const u8, n: usize, out: *mut f64) -> GkvStatus {
    guard(|| {
        if rewards.is_null() || out.is_null() {
            return Err(null("rewards or out"));
        }
        let group = train::GroupSample {
            rewards: std::slice::from_raw_parts(rewards, n).to_vec(),
            truncated: if truncated.is_null() {
                Vec::new()
            } else {
                std::slice::from_raw_parts(truncated, n).iter().map(|&t| t != 0).collect()
            },
        };
        let adv = train::grpo_advantages(&group).map_err(fail)?;
        ptr::copy_nonoverlapping(adv.advantages.as_ptr(), out, n);
        Ok(())
    })
}
