//! C ABI over `t3d-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_load` and
//! released by `*_free`. Every fallible call returns a [`T3dStatus`]; on
//! failure the message is kept per thread and read with
//! [`t3d_last_error_message`]. Panics are caught and reported as
//! [`T3dStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use t3d_core::cli::{cmd_eval, cmd_pretrain, cmd_synth, load_model, RunConfig, Task};
use t3d_core::dataset::{read_volume, tokenize, Vocab};
use t3d_core::dataset::manifest::VOCAB_FILE;
use t3d_core::encoders::{embed_texts, embed_volumes};
use t3d_core::model::Model;
use t3d_core::Error;

/// Status codes. Values 2 to 5 match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum T3dStatus {
    Ok = 0,
    Internal = 1,
    /// Invalid config, spec, prompt set or argument value.
    Config = 2,
    /// File missing, unreadable or malformed.
    Io = 3,
    /// Training produced a non-finite loss.
    Diverged = 4,
    /// Checkpoint does not match the config.
    Mismatch = 5,
    /// Null pointer, bad UTF-8 or a too-small output buffer.
    InvalidArgument = 6,
}

/// Parsed run configuration.
pub struct T3dConfig(RunConfig);

/// Trained encoders plus the vocabulary and preprocessing of their config.
pub struct T3dModel {
    model: Model,
    vocab: Vocab,
    config: RunConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(T3dStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            2 => T3dStatus::Config,
            3 => T3dStatus::Io,
            4 => T3dStatus::Diverged,
            5 => T3dStatus::Mismatch,
            _ => T3dStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(T3dStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> T3dStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => T3dStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            T3dStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| invalid(format!("{what} is null")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn t3d_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn t3d_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a JSON run config and applies `n_overrides` `key=value` strings.
///
/// # Safety
/// `path` must be a NUL-terminated string; `overrides` must point to
/// `n_overrides` NUL-terminated strings (or be null when zero); `out` must be
/// writable. The handle is freed with [`t3d_config_free`].
#[no_mangle]
pub unsafe extern "C" fn t3d_config_load(
    path: *const c_char,
    overrides: *const *const c_char,
    n_overrides: usize,
    out: *mut *mut T3dConfig,
) -> T3dStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let mut ovr = Vec::with_capacity(n_overrides);
        if n_overrides > 0 {
            if overrides.is_null() {
                return Err(invalid("overrides is null"));
            }
            for i in 0..n_overrides {
                ovr.push(str_arg(*overrides.add(i), "override")?.to_string());
            }
        }
        let cfg = RunConfig::load(&path, &ovr)?;
        *out = Box::into_raw(Box::new(T3dConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `config` must come from [`t3d_config_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn t3d_config_free(config: *mut T3dConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Writes `n` synthetic phantoms to `out_dir`. `spec_path` may be null for
/// the built-in spec; `seed` is used only when `has_seed` is nonzero.
///
/// # Safety
/// String arguments must be NUL-terminated or, for `spec_path`, null.
#[no_mangle]
pub unsafe extern "C" fn t3d_synth(
    spec_path: *const c_char,
    out_dir: *const c_char,
    n: usize,
    seed: u64,
    has_seed: i32,
) -> T3dStatus {
    guard(|| {
        let spec = if spec_path.is_null() {
            None
        } else {
            Some(path_arg(spec_path, "spec_path")?)
        };
        let out = path_arg(out_dir, "out_dir")?;
        cmd_synth(spec.as_deref(), &out, n, (has_seed != 0).then_some(seed))?;
        Ok(())
    })
}

/// Pretrains under `config`, optionally resuming from `resume_path` (may be
/// null) and stopping once `stop_after` total steps have run (0 for no limit).
/// `steps_out` (may be null) receives the final step count.
///
/// # Safety
/// `config` must be a live handle; string arguments NUL-terminated or null.
#[no_mangle]
pub unsafe extern "C" fn t3d_pretrain(
    config: *const T3dConfig,
    resume_path: *const c_char,
    stop_after: u64,
    steps_out: *mut u64,
) -> T3dStatus {
    guard(|| {
        let cfg = &ref_arg(config, "config")?.0;
        let resume = if resume_path.is_null() {
            None
        } else {
            Some(path_arg(resume_path, "resume_path")?)
        };
        let run = cmd_pretrain(cfg, resume, (stop_after > 0).then_some(stop_after))?;
        if let Some(s) = steps_out.as_mut() {
            *s = run.state.step;
        }
        Ok(())
    })
}

/// Evaluates `checkpoint` on `task` (`zeroshot`, `retrieval` or `probe`) and
/// writes the JSON report to `report_path`.
///
/// # Safety
/// `config` must be a live handle; string arguments NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn t3d_eval(
    config: *const T3dConfig,
    task: *const c_char,
    checkpoint: *const c_char,
    report_path: *const c_char,
) -> T3dStatus {
    guard(|| {
        let cfg = &ref_arg(config, "config")?.0;
        let task: Task = str_arg(task, "task")?.parse()?;
        let ckpt = path_arg(checkpoint, "checkpoint")?;
        let out = path_arg(report_path, "report_path")?;
        cmd_eval(cfg, task, &ckpt, &out)?;
        Ok(())
    })
}

/// Loads the encoders from `checkpoint`, checked against `config`, together
/// with the vocabulary of the config's corpus.
///
/// # Safety
/// `config` must be a live handle, `checkpoint` NUL-terminated and `out`
/// writable. The handle is freed with [`t3d_model_free`].
#[no_mangle]
pub unsafe extern "C" fn t3d_model_load(
    config: *const T3dConfig,
    checkpoint: *const c_char,
    out: *mut *mut T3dModel,
) -> T3dStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let cfg = &ref_arg(config, "config")?.0;
        let ckpt = path_arg(checkpoint, "checkpoint")?;
        let model = load_model(cfg, &ckpt)?;
        let vocab = Vocab::read(cfg.paths.corpus_dir.join(VOCAB_FILE))?;
        *out = Box::into_raw(Box::new(T3dModel {
            model,
            vocab,
            config: cfg.clone(),
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`t3d_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn t3d_model_free(model: *mut T3dModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Width of the shared embedding space, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn t3d_model_embedding_dim(model: *const T3dModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.shared_dim)
}

fn write_embedding(values: &[f64], out: *mut f64, len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(invalid("output buffer is null"));
    }
    if len < values.len() {
        return Err(invalid(format!("output buffer holds {len} values, need {}", values.len())));
    }
    // SAFETY: the caller guarantees `out` has room for `len >= values.len()` values.
    unsafe { ptr::copy_nonoverlapping(values.as_ptr(), out, values.len()) };
    Ok(())
}

/// Writes the unit-norm report embedding of `text` into `out[0..dim]`.
///
/// # Safety
/// `model` must be a live handle, `text` NUL-terminated and `out` valid for
/// `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn t3d_embed_text(
    model: *const T3dModel,
    text: *const c_char,
    out: *mut f64,
    len: usize,
) -> T3dStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let text = str_arg(text, "text")?;
        let seq = tokenize(text, &m.vocab, m.model.config.max_tokens)?;
        let z = embed_texts(&m.model, &[seq])?;
        write_embedding(z.values(), out, len)
    })
}

/// Reads a volume file, applies the config's preprocessing and writes its
/// unit-norm embedding into `out[0..dim]`.
///
/// # Safety
/// `model` must be a live handle, `volume_path` NUL-terminated and `out`
/// valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn t3d_embed_volume(
    model: *const T3dModel,
    volume_path: *const c_char,
    out: *mut f64,
    len: usize,
) -> T3dStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let path = path_arg(volume_path, "volume_path")?;
        let v = m.config.preprocess.apply(read_volume(Path::new(&path))?)?;
        let z = embed_volumes(&m.model, &[&v])?;
        write_embedding(z.values(), out, len)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statuses_follow_exit_codes() {
        let cases = [
            (Error::Config("x".into()), T3dStatus::Config),
            (Error::Checkpoint("x".into()), T3dStatus::Io),
            (Error::Diverged { step: 3 }, T3dStatus::Diverged),
            (Error::ArchitectureMismatch("x".into()), T3dStatus::Mismatch),
            (Error::DegenerateAttention, T3dStatus::Internal),
        ];
        for (err, want) in cases {
            assert_eq!(Failure::from(err).0, want);
        }
    }

    #[test]
    fn panics_become_internal_errors() {
        let status = guard(|| panic!("boom"));
        assert_eq!(status, T3dStatus::Internal);
        let msg = unsafe { CStr::from_ptr(t3d_last_error_message()) }.to_str().unwrap();
        assert!(msg.contains("boom"));
        assert_eq!(guard(|| Ok(())), T3dStatus::Ok);
        assert!(t3d_last_error_message().is_null());
    }

    #[test]
    fn short_buffers_are_rejected() {
        let mut buf = [0.0; 2];
        assert!(write_embedding(&[1.0, 0.0, 0.0], buf.as_mut_ptr(), 2).is_err());
        assert!(write_embedding(&[0.6, 0.8], ptr::null_mut(), 2).is_err());
        write_embedding(&[0.6, 0.8], buf.as_mut_ptr(), 2).ok().unwrap();
        assert_eq!(buf, [0.6, 0.8]);
    }
}
