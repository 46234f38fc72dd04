//! C ABI over `tprn`.
//!
//! Models are opaque `TprnModel` handles created by `tprn_model_load` or
//! `tprn_model_init` and released with `tprn_model_free`. Every fallible
//! call returns a `TprnStatus`; on failure `tprn_last_error` returns a
//! message for the calling thread, valid until that thread's next call.
//! All matrices are column-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rand::SeedableRng;
use tprn::cell::Hyper;
use tprn::checkpoint::Checkpoint;
use tprn::linalg::Vector;
use tprn::model::TprModel;
use tprn::objective::{self, TaskKind};
use tprn::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TprnStatus {
    Ok = 0,
    NullArgument = 1,
    /// Buffer length or dimension mismatch.
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    /// Corrupt, truncated or incompatible checkpoint.
    Checkpoint = 5,
    Numerical = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

/// Model dimensions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TprnHyper {
    pub n_symbols: usize,
    pub n_roles: usize,
    pub d_symbols: usize,
    pub d_roles: usize,
    pub d_word: usize,
    pub gate_enabled: bool,
    pub gated_feedback: bool,
}

impl From<Hyper> for TprnHyper {
    fn from(h: Hyper) -> Self {
        Self {
            n_symbols: h.n_symbols,
            n_roles: h.n_roles,
            d_symbols: h.d_symbols,
            d_roles: h.d_roles,
            d_word: h.d_word,
            gate_enabled: h.gate_enabled,
            gated_feedback: h.gated_feedback,
        }
    }
}

impl From<TprnHyper> for Hyper {
    fn from(h: TprnHyper) -> Self {
        Self {
            n_symbols: h.n_symbols,
            n_roles: h.n_roles,
            d_symbols: h.d_symbols,
            d_roles: h.d_roles,
            d_word: h.d_word,
            gate_enabled: h.gate_enabled,
            gated_feedback: h.gated_feedback,
        }
    }
}

/// Opaque model handle.
pub struct TprnModel {
    model: TprModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> TprnStatus {
    match e {
        Error::Config(_) => TprnStatus::Config,
        Error::Io { .. } => TprnStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) | Error::Parse { .. } => TprnStatus::Checkpoint,
        Error::Numerical(_) => TprnStatus::Numerical,
        Error::Degenerate(_) | Error::Input(_) => TprnStatus::InvalidArgument,
    }
}

struct Fail(TprnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TprnStatus::NullArgument, format!("{what} is NULL"))
}

fn invalid(msg: String) -> Fail {
    Fail(TprnStatus::InvalidArgument, msg)
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TprnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TprnStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal error: {msg}"));
            TprnStatus::Panic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Fail> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const TprnModel) -> Result<&'a TprModel, Fail> {
    m.as_ref().map(|h| &h.model).ok_or_else(|| null("model"))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, want: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len != want {
        return Err(invalid(format!("{what}: buffer holds {len} values, {want} required")));
    }
    if want == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message for the last failed call on this thread; empty after success.
#[no_mangle]
pub extern "C" fn tprn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tprn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tprn_model_load(path: *const c_char, out: *mut *mut TprnModel) -> TprnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ck = Checkpoint::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(TprnModel { model: ck.model }));
        Ok(())
    })
}

/// Fresh token-classification model with `n_labels` outputs.
///
/// # Safety
/// `hyper` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn tprn_model_init(
    hyper: *const TprnHyper,
    n_labels: usize,
    seed: u64,
    out: *mut *mut TprnModel,
) -> TprnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let h = *hyper.as_ref().ok_or_else(|| null("hyper"))?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let model = TprModel::init(h.into(), TaskKind::TokenClassification, n_labels, &mut rng)?;
        *out = Box::into_raw(Box::new(TprnModel { model }));
        Ok(())
    })
}

/// Writes the model (without optimizer state) as a checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tprn_model_save(model: *const TprnModel, path: *const c_char) -> TprnStatus {
    guard(|| {
        let m = model_ref(model)?;
        Checkpoint::new(m.clone(), None, 0, 0).save(&path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tprn_model_free(model: *mut TprnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn tprn_model_dims(model: *const TprnModel, out: *mut TprnHyper) -> TprnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.hyper.into();
        Ok(())
    })
}

/// Runs both cells over `n_tokens` word vectors (`inputs` is
/// `d_word x n_tokens`, column-major).
///
/// Per token, in token order, writes forward-cell attention to `a_s`
/// (`n_symbols x n_tokens`) and `a_r` (`n_roles x n_tokens`), and the
/// concatenated bidirectional output to `outputs`
/// (`2 d_symbols d_roles x n_tokens`). Each `*_len` is the buffer length in
/// values and must match exactly. Any output pointer may be NULL with
/// length 0 to skip it.
///
/// # Safety
/// Buffers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn tprn_model_run(
    model: *const TprnModel,
    inputs: *const f64,
    n_tokens: usize,
    inputs_len: usize,
    a_s: *mut f64,
    a_s_len: usize,
    a_r: *mut f64,
    a_r_len: usize,
    outputs: *mut f64,
    outputs_len: usize,
) -> TprnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let h = m.hyper;
        if n_tokens == 0 {
            return Err(invalid("n_tokens must be positive".into()));
        }
        if inputs.is_null() {
            return Err(null("inputs"));
        }
        if inputs_len != h.d_word * n_tokens {
            return Err(invalid(format!("inputs: {inputs_len} values, expected {}", h.d_word * n_tokens)));
        }
        let x = std::slice::from_raw_parts(inputs, inputs_len);
        let tokens =
            x.chunks_exact(h.d_word).map(|c| Vector::new(c.to_vec())).collect::<tprn::Result<Vec<_>>>()?;
        let dim = 2 * h.binding_dim();
        let want = |n: usize, len: usize| if len == 0 { 0 } else { n * n_tokens };
        let s_buf = out_slice(a_s, a_s_len, want(h.n_symbols, a_s_len), "a_s")?;
        let r_buf = out_slice(a_r, a_r_len, want(h.n_roles, a_r_len), "a_r")?;
        let o_buf = out_slice(outputs, outputs_len, want(dim, outputs_len), "outputs")?;
        let run = m.run(&tokens)?;
        for (t, tr) in run.forward.iter().enumerate() {
            if !s_buf.is_empty() {
                s_buf[t * h.n_symbols..(t + 1) * h.n_symbols].copy_from_slice(tr.a_s.as_slice());
            }
            if !r_buf.is_empty() {
                r_buf[t * h.n_roles..(t + 1) * h.n_roles].copy_from_slice(tr.a_r.as_slice());
            }
        }
        if !o_buf.is_empty() {
            for (t, v) in run.per_token.iter().enumerate() {
                o_buf[t * dim..(t + 1) * dim].copy_from_slice(v.as_slice());
            }
        }
        Ok(())
    })
}

/// Quantization penalty of one attention vector:
/// `sum a_i^2 (1 - a_i)^2 + (sum a_i^2 - 1)^2`.
///
/// # Safety
/// `a` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tprn_q_penalty(a: *const f64, n: usize, out: *mut f64) -> TprnStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let a = if n == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(a.as_ref().ok_or_else(|| null("a"))?, n)
        };
        *out = objective::q_penalty_vec(a);
        Ok(())
    })
}
