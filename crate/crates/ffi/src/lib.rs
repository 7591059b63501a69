//! C ABI for loading tokenizers and checkpoints, encoding text, and
//! scoring documents with a fine-tuned classifier.
//!
//! Every fallible function returns a [`DaptStatus`]. On failure the message
//! is kept per thread and can be read with [`dapt_last_error_message`].
//! Handles are opaque; free them with the matching `*_free` function.
//! Output buffers follow one convention: the caller passes a capacity, the
//! callee always writes the required length to `out_len`, and returns
//! `DAPT_STATUS_BUFFER_TOO_SMALL` without writing data if the buffer is short.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dapt::checkpoint::Checkpoint;
use dapt::tokenizer::Tokenizer;
use dapt::training::encode_for_classification;
use dapt::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DaptStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    TokenizerMismatch = 5,
    BufferTooSmall = 6,
    Runtime = 7,
    Panic = 8,
}

/// A byte-level BPE tokenizer.
pub struct DaptTokenizer {
    inner: Tokenizer,
}

/// A model checkpoint together with the tokenizer it was trained with.
pub struct DaptCheckpoint {
    inner: Checkpoint,
    tokenizer: Tokenizer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> DaptStatus {
    match err {
        Error::Io { .. } => DaptStatus::Io,
        Error::Format(_) => DaptStatus::Format,
        Error::TokenizerMismatch { .. } => DaptStatus::TokenizerMismatch,
        e if e.is_validation() => DaptStatus::InvalidArgument,
        _ => DaptStatus::Runtime,
    }
}

struct Failure(DaptStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(DaptStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status plus last-error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DaptStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DaptStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DaptStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Failure(
            DaptStatus::InvalidArgument,
            format!("{what} is not valid UTF-8"),
        )
    })
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn copy_out<T: Copy>(
    data: &[T],
    out: *mut T,
    capacity: usize,
    out_len: *mut usize,
) -> Result<(), Failure> {
    if out_len.is_null() {
        return Err(null("out_len"));
    }
    *out_len = data.len();
    if data.len() > capacity {
        return Err(Failure(
            DaptStatus::BufferTooSmall,
            format!("buffer holds {capacity} elements, {} needed", data.len()),
        ));
    }
    if !data.is_empty() {
        if out.is_null() {
            return Err(null("output buffer"));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    }
    Ok(())
}

/// The message for the last failed call on this thread, or null. The
/// pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn dapt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dapt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a tokenizer directory (`vocab.txt` and `merges.txt`).
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dapt_tokenizer_load(
    dir: *const c_char,
    out: *mut *mut DaptTokenizer,
) -> DaptStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let inner = Tokenizer::load(&dir)?;
        *out = Box::into_raw(Box::new(DaptTokenizer { inner }));
        Ok(())
    })
}

/// # Safety
/// `tok` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dapt_tokenizer_free(tok: *mut DaptTokenizer) {
    if !tok.is_null() {
        drop(Box::from_raw(tok));
    }
}

/// Vocabulary size, or 0 for a null handle.
///
/// # Safety
/// `tok` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dapt_tokenizer_vocab_size(tok: *const DaptTokenizer) -> usize {
    tok.as_ref().map_or(0, |t| t.inner.vocab_size())
}

/// Encodes UTF-8 text into token ids.
///
/// # Safety
/// `tok` must be a live handle, `text` NUL-terminated, `out_ids` valid for
/// `capacity` writes and `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn dapt_tokenizer_encode(
    tok: *const DaptTokenizer,
    text: *const c_char,
    out_ids: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> DaptStatus {
    guard(|| {
        let tok = ref_arg(tok, "tokenizer")?;
        let ids = tok.inner.encode(str_arg(text, "text")?);
        copy_out(&ids, out_ids, capacity, out_len)
    })
}

/// Decodes ids to UTF-8 (special tokens rejected). On success the buffer
/// holds the bytes plus a terminating NUL; `out_len` counts the NUL.
///
/// # Safety
/// `tok` must be a live handle, `ids` valid for `n_ids` reads, `out`
/// valid for `capacity` writes and `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn dapt_tokenizer_decode(
    tok: *const DaptTokenizer,
    ids: *const u32,
    n_ids: usize,
    out: *mut c_char,
    capacity: usize,
    out_len: *mut usize,
) -> DaptStatus {
    guard(|| {
        let tok = ref_arg(tok, "tokenizer")?;
        let ids = if n_ids == 0 {
            &[][..]
        } else if ids.is_null() {
            return Err(null("ids"));
        } else {
            std::slice::from_raw_parts(ids, n_ids)
        };
        let text = tok.inner.decode(ids, false)?;
        let mut bytes: Vec<c_char> = text.bytes().map(|b| b as c_char).collect();
        bytes.push(0);
        copy_out(&bytes, out, capacity, out_len)
    })
}

/// Loads a checkpoint file and the tokenizer embedded in it.
///
/// # Safety
/// `path` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dapt_checkpoint_load(
    path: *const c_char,
    out: *mut *mut DaptCheckpoint,
) -> DaptStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(str_arg(path, "path")?);
        let inner = Checkpoint::load(&path)?;
        let tokenizer = inner.tokenizer()?;
        *out = Box::into_raw(Box::new(DaptCheckpoint { inner, tokenizer }));
        Ok(())
    })
}

/// # Safety
/// `ckpt` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dapt_checkpoint_free(ckpt: *mut DaptCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Number of classifier outputs, or 0 for a null handle.
///
/// # Safety
/// `ckpt` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dapt_checkpoint_num_classes(ckpt: *const DaptCheckpoint) -> usize {
    ckpt.as_ref()
        .map_or(0, |c| c.inner.model.config.num_classes)
}

/// Hidden size (length of a document embedding), or 0 for a null handle.
///
/// # Safety
/// `ckpt` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dapt_checkpoint_hidden_dim(ckpt: *const DaptCheckpoint) -> usize {
    ckpt.as_ref().map_or(0, |c| c.inner.model.config.hidden_dim)
}

/// A new tokenizer handle copied from the checkpoint.
///
/// # Safety
/// `ckpt` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dapt_checkpoint_tokenizer(
    ckpt: *const DaptCheckpoint,
    out: *mut *mut DaptTokenizer,
) -> DaptStatus {
    guard(|| {
        let ckpt = ref_arg(ckpt, "checkpoint")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(DaptTokenizer {
            inner: ckpt.tokenizer.clone(),
        }));
        Ok(())
    })
}

fn encode_document(ckpt: &DaptCheckpoint, text: &str) -> Vec<u32> {
    encode_for_classification(&ckpt.tokenizer, text, ckpt.inner.model.config.max_positions)
}

/// Class probabilities for one document (`num_classes` values).
///
/// # Safety
/// `ckpt` must be a live handle, `text` NUL-terminated, `out_probs` valid
/// for `capacity` writes and `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn dapt_checkpoint_classify(
    ckpt: *const DaptCheckpoint,
    text: *const c_char,
    out_probs: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> DaptStatus {
    guard(|| {
        let ckpt = ref_arg(ckpt, "checkpoint")?;
        let ids = encode_document(ckpt, str_arg(text, "text")?);
        let model = &ckpt.inner.model;
        let probs = model.class_probabilities(&model.forward_encoder(&ids)?)?;
        copy_out(&probs, out_probs, capacity, out_len)
    })
}

/// The final hidden state at the `<s>` position (`hidden_dim` values).
///
/// # Safety
/// Same requirements as [`dapt_checkpoint_classify`].
#[no_mangle]
pub unsafe extern "C" fn dapt_checkpoint_embed(
    ckpt: *const DaptCheckpoint,
    text: *const c_char,
    out_values: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> DaptStatus {
    guard(|| {
        let ckpt = ref_arg(ckpt, "checkpoint")?;
        let ids = encode_document(ckpt, str_arg(text, "text")?);
        let out = ckpt.inner.model.forward_encoder(&ids)?;
        copy_out(out.cls_vector(), out_values, capacity, out_len)
    })
}
