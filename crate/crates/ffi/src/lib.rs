//! C interface to the fusion block.
//!
//! Objects are opaque heap handles released with their matching `*_free`.
//! Every fallible call returns a [`C2fStatus`]; on failure the message of
//! the most recent error on the calling thread is available from
//! [`c2f_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use c2former::analysis::count_flops;
use c2former::block::{block_forward, init_params, BlockConfig, BlockParams};
use c2former::error::{Error, FormatError};
use c2former::io::{read_params, read_tensor, write_params, write_tensor};
use c2former::tensor::Tensor;

/// Result codes. File-format failures keep distinct values per cause.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum C2fStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    InvalidConfig = 4,
    Io = 5,
    Internal = 6,
    BadMagic = 11,
    BadVersion = 12,
    BadRank = 13,
    Truncated = 14,
    TrailingBytes = 15,
    BadReserved = 16,
    ZeroExtent = 17,
}

/// A dense row-major tensor of `f64`.
pub struct C2fTensor {
    inner: Tensor,
}

/// Block configuration together with its parameters.
pub struct C2fBlock {
    cfg: BlockConfig,
    params: BlockParams,
}

/// FLOP counts per component, as in the library's FLOPs model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct C2fFlops {
    pub descriptors: u64,
    pub modnorm: u64,
    pub attention_matmuls: u64,
    pub softmax: u64,
    pub value_matmuls: u64,
    pub output_projection: u64,
    pub afs: u64,
    pub total: u64,
    pub parameter_count: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> C2fStatus {
    match e {
        Error::Shape(_) | Error::KernelSize(..) => C2fStatus::ShapeMismatch,
        Error::InvalidArgument(_) | Error::Autodiff(_) => C2fStatus::InvalidArgument,
        Error::Config(_) => C2fStatus::InvalidConfig,
        Error::Io(_) => C2fStatus::Io,
        Error::Format(f) => match f {
            FormatError::BadMagic(_) => C2fStatus::BadMagic,
            FormatError::BadVersion(_) => C2fStatus::BadVersion,
            FormatError::BadRank(_) => C2fStatus::BadRank,
            FormatError::Truncated { .. } => C2fStatus::Truncated,
            FormatError::TrailingBytes { .. } => C2fStatus::TrailingBytes,
            FormatError::BadReserved => C2fStatus::BadReserved,
            FormatError::ZeroExtent(_) => C2fStatus::ZeroExtent,
        },
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> C2fStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => C2fStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            C2fStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            C2fStatus::Internal
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    // SAFETY: caller promises `p` is null or a live pointer from this library.
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    // SAFETY: non-null, caller promises a nul-terminated string.
    let s = unsafe { CStr::from_ptr(p) };
    s.to_str()
        .map(str::to_owned)
        .map_err(|_| Error::InvalidArgument("path is not UTF-8".into()).into())
}

fn out_ptr<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    // SAFETY: checked non-null; caller provides writable storage.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn c2f_status_message(status: C2fStatus) -> *const c_char {
    let s: &'static CStr = match status {
        C2fStatus::Ok => c"ok",
        C2fStatus::NullPointer => c"null pointer argument",
        C2fStatus::InvalidArgument => c"invalid argument",
        C2fStatus::ShapeMismatch => c"shape mismatch",
        C2fStatus::InvalidConfig => c"invalid configuration",
        C2fStatus::Io => c"i/o error",
        C2fStatus::Internal => c"internal error",
        C2fStatus::BadMagic => c"tensor file: bad magic",
        C2fStatus::BadVersion => c"tensor file: unsupported version",
        C2fStatus::BadRank => c"tensor file: rank out of range",
        C2fStatus::Truncated => c"tensor file: truncated",
        C2fStatus::TrailingBytes => c"tensor file: trailing bytes",
        C2fStatus::BadReserved => c"tensor file: nonzero reserved bytes",
        C2fStatus::ZeroExtent => c"tensor file: zero extent",
    };
    s.as_ptr()
}

/// Message of the last failure on this thread, or null if none. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn c2f_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Creates a tensor of rank `ndim` (1..=4). `data` may be null for zeros,
/// otherwise it must hold the product of `dims` values.
///
/// # Safety
/// `dims` must point to `ndim` values; `data`, when non-null, to the full
/// element count; `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn c2f_tensor_new(
    dims: *const usize,
    ndim: usize,
    data: *const f64,
    out: *mut *mut C2fTensor,
) -> C2fStatus {
    guard(|| {
        if dims.is_null() {
            return Err(Failure::Null("dims"));
        }
        if !(1..=4).contains(&ndim) {
            return Err(Error::InvalidArgument(format!("rank {ndim} outside 1..=4")).into());
        }
        // SAFETY: non-null with `ndim` entries per the contract.
        let dims = unsafe { std::slice::from_raw_parts(dims, ndim) }.to_vec();
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::InvalidArgument("element count overflows".into()))?;
        let values = if data.is_null() {
            vec![0.0; n]
        } else {
            // SAFETY: non-null with `n` entries per the contract.
            unsafe { std::slice::from_raw_parts(data, n) }.to_vec()
        };
        out_ptr(out, C2fTensor { inner: Tensor::new(&dims, values)? })
    })
}

/// # Safety
/// `t` must be null or a tensor from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn c2f_tensor_free(t: *mut C2fTensor) {
    if !t.is_null() {
        // SAFETY: produced by Box::into_raw in this crate.
        drop(unsafe { Box::from_raw(t) });
    }
}

/// Rank of `t`, or 0 for null.
///
/// # Safety
/// `t` must be null or a live tensor.
#[no_mangle]
pub unsafe extern "C" fn c2f_tensor_ndim(t: *const C2fTensor) -> usize {
    // SAFETY: forwarded contract.
    unsafe { t.as_ref() }.map_or(0, |t| t.inner.rank())
}

/// Element count of `t`, or 0 for null.
///
/// # Safety
/// `t` must be null or a live tensor.
#[no_mangle]
pub unsafe extern "C" fn c2f_tensor_len(t: *const C2fTensor) -> usize {
    // SAFETY: forwarded contract.
    unsafe { t.as_ref() }.map_or(0, |t| t.inner.len())
}

/// Copies the extents into `out_dims`, which holds `cap` entries.
///
/// # Safety
/// `t` must be a live tensor and `out_dims` writable for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn c2f_tensor_dims(
    t: *const C2fTensor,
    out_dims: *mut usize,
    cap: usize,
) -> C2fStatus {
    guard(|| {
        // SAFETY: forwarded contract.
        let t = unsafe { as_ref(t, "tensor") }?;
        if out_dims.is_null() {
            return Err(Failure::Null("out_dims"));
        }
        let dims = t.inner.dims();
        if cap < dims.len() {
            return Err(Error::InvalidArgument(format!("need room for {} dims", dims.len())).into());
        }
        // SAFETY: writable for `cap >= dims.len()` values.
        unsafe { ptr::copy_nonoverlapping(dims.as_ptr(), out_dims, dims.len()) };
        Ok(())
    })
}

/// Read-only view of the row-major values, or null. Valid while `t` lives.
///
/// # Safety
/// `t` must be null or a live tensor.
#[no_mangle]
pub unsafe extern "C" fn c2f_tensor_data(t: *const C2fTensor) -> *const f64 {
    // SAFETY: forwarded contract.
    unsafe { t.as_ref() }.map_or(ptr::null(), |t| t.inner.data().as_ptr())
}

/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn c2f_tensor_read(path: *const c_char, out: *mut *mut C2fTensor) -> C2fStatus {
    guard(|| {
        // SAFETY: forwarded contract.
        let path = unsafe { path_arg(path) }?;
        out_ptr(out, C2fTensor { inner: read_tensor(path)? })
    })
}

/// # Safety
/// `t` must be a live tensor and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn c2f_tensor_write(t: *const C2fTensor, path: *const c_char) -> C2fStatus {
    guard(|| {
        // SAFETY: forwarded contract.
        let t = unsafe { as_ref(t, "tensor") }?;
        // SAFETY: forwarded contract.
        let path = unsafe { path_arg(path) }?;
        write_tensor(path, &t.inner)?;
        Ok(())
    })
}

fn config(
    channels: usize,
    height: usize,
    width: usize,
    stride: usize,
    seed: u64,
    bias_enabled: bool,
) -> BlockConfig {
    BlockConfig {
        channels,
        height,
        width,
        stride,
        seed,
        bias_enabled,
    }
}

/// Creates a block with freshly initialized parameters for `seed`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn c2f_block_new(
    channels: usize,
    height: usize,
    width: usize,
    stride: usize,
    seed: u64,
    bias_enabled: bool,
    out: *mut *mut C2fBlock,
) -> C2fStatus {
    guard(|| {
        let cfg = config(channels, height, width, stride, seed, bias_enabled);
        let params = init_params(&cfg)?;
        out_ptr(out, C2fBlock { cfg, params })
    })
}

/// # Safety
/// `b` must be null or a block from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn c2f_block_free(b: *mut C2fBlock) {
    if !b.is_null() {
        // SAFETY: produced by Box::into_raw in this crate.
        drop(unsafe { Box::from_raw(b) });
    }
}

/// Number of learnable scalars, or 0 for null.
///
/// # Safety
/// `b` must be null or a live block.
#[no_mangle]
pub unsafe extern "C" fn c2f_block_param_count(b: *const C2fBlock) -> usize {
    // SAFETY: forwarded contract.
    unsafe { b.as_ref() }.map_or(0, |b| b.params.param_count(b.cfg.bias_enabled))
}

/// Replaces the parameters with those stored at `path`.
///
/// # Safety
/// `b` must be a live block and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn c2f_block_load_params(b: *mut C2fBlock, path: *const c_char) -> C2fStatus {
    guard(|| {
        // SAFETY: forwarded contract.
        let b = unsafe { b.as_mut() }.ok_or(Failure::Null("block"))?;
        // SAFETY: forwarded contract.
        let path = unsafe { path_arg(path) }?;
        b.params = read_params(path, b.cfg.channels)?;
        Ok(())
    })
}

/// # Safety
/// `b` must be a live block and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn c2f_block_save_params(b: *const C2fBlock, path: *const c_char) -> C2fStatus {
    guard(|| {
        // SAFETY: forwarded contract.
        let b = unsafe { as_ref(b, "block") }?;
        // SAFETY: forwarded contract.
        let path = unsafe { path_arg(path) }?;
        write_params(path, &b.params)?;
        Ok(())
    })
}

/// Runs the block on `(N, C, H, W)` inputs; writes two new tensors.
///
/// # Safety
/// All pointers must be live handles or writable output slots.
#[no_mangle]
pub unsafe extern "C" fn c2f_block_forward(
    b: *const C2fBlock,
    rgb: *const C2fTensor,
    ir: *const C2fTensor,
    out_rgb: *mut *mut C2fTensor,
    out_ir: *mut *mut C2fTensor,
) -> C2fStatus {
    guard(|| {
        // SAFETY: forwarded contract.
        let (b, rgb, ir) = unsafe { (as_ref(b, "block")?, as_ref(rgb, "rgb")?, as_ref(ir, "ir")?) };
        if out_rgb.is_null() || out_ir.is_null() {
            return Err(Failure::Null("output"));
        }
        let (o1, o2) = block_forward(&rgb.inner, &ir.inner, &b.params, &b.cfg)?;
        out_ptr(out_rgb, C2fTensor { inner: o1 })?;
        out_ptr(out_ir, C2fTensor { inner: o2 })
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn c2f_count_flops(
    channels: usize,
    height: usize,
    width: usize,
    stride: usize,
    bias_enabled: bool,
    out: *mut C2fFlops,
) -> C2fStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let r = count_flops(&config(channels, height, width, stride, 0, bias_enabled))?;
        let flops = C2fFlops {
            descriptors: r.descriptors,
            modnorm: r.modnorm,
            attention_matmuls: r.attention_matmuls,
            softmax: r.softmax,
            value_matmuls: r.value_matmuls,
            output_projection: r.output_projection,
            afs: r.afs,
            total: r.total(),
            parameter_count: r.parameter_count,
        };
        // SAFETY: checked non-null.
        unsafe { *out = flops };
        Ok(())
    })
}
