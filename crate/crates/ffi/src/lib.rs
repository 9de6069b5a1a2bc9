//! C ABI over the `mpcs` library.
//!
//! Every fallible function returns an [`MpcsStatus`]; on failure the message
//! is available from [`mpcs_last_error_message`] on the same thread. Handles
//! are opaque and must be released with their `_free` function. Panics never
//! cross the boundary; they surface as `MPCS_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use mpcs::dataset::ClassId;
use mpcs::eval::{image_level_accuracy, patient_level_accuracy, PredictionRecord};
use mpcs::loss::{nt_xent, nt_xent_with_grad, ContrastiveBatch, LossConfig};
use mpcs::model::{Checkpoint, EncoderAdapter};
use mpcs::report::grad_cam_map;
use mpcs::rng;
use mpcs::sampler::{PairStrategy, StrategyKind};
use mpcs::{Error, MagnificationFactor};
use ndarray::{Array2, Array3, Array4};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpcsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    ZeroVector = 4,
    DegenerateBatch = 5,
    Io = 6,
    Checkpoint = 7,
    EmptyInput = 8,
    ShapeMismatch = 9,
    Runtime = 10,
    Panic = 11,
}

/// Pair-sampling strategy selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpcsStrategy {
    /// Always 200X then 400X.
    Fixed = 0,
    /// First view uniform, second from the documented lookup.
    Ordered = 1,
    /// Uniform over the 12 ordered pairs of distinct factors.
    Random = 2,
}

/// Pair sampler with its own seeded random stream.
pub struct MpcsSampler {
    strategy: PairStrategy,
    rng: rng::Rng,
}

/// Encoder loaded from a checkpoint.
pub struct MpcsEncoder {
    inner: EncoderAdapter,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MpcsStatus {
    match e {
        Error::ZeroVector(_) => MpcsStatus::ZeroVector,
        Error::DegenerateBatch(_) => MpcsStatus::DegenerateBatch,
        Error::Io(_) => MpcsStatus::Io,
        Error::Checkpoint(_) => MpcsStatus::Checkpoint,
        Error::EmptyPredictions => MpcsStatus::EmptyInput,
        Error::ShapeMismatch { .. } => MpcsStatus::ShapeMismatch,
        e if e.is_config_error() => MpcsStatus::Config,
        _ => MpcsStatus::Runtime,
    }
}

struct Fail(MpcsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(MpcsStatus::InvalidArgument, msg.into())
}

fn null(name: &str) -> Fail {
    Fail(MpcsStatus::NullPointer, format!("{name} is null"))
}

/// Runs `f`, recording any error or panic for [`mpcs_last_error_message`].
fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> MpcsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MpcsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            MpcsStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn input<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or point to `len` writable values.
unsafe fn output<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn mpcs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mpcs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// NT-Xent over `rows` embeddings of width `dim` (row-major), where row `i`
/// and row `i + rows/2` are the two views of one specimen. Writes the mean
/// loss to `loss_out` and, when `grad_out` is non-null, the `rows * dim`
/// gradient.
///
/// # Safety
/// `z` must hold `rows * dim` doubles; `loss_out` one; `grad_out` is null or
/// holds `rows * dim`.
#[no_mangle]
pub unsafe extern "C" fn mpcs_nt_xent(
    z: *const f64,
    rows: usize,
    dim: usize,
    temperature: f64,
    exclude_positive: bool,
    loss_out: *mut f64,
    grad_out: *mut f64,
) -> MpcsStatus {
    guard(|| {
        if rows == 0 || !rows.is_multiple_of(2) || dim == 0 {
            return Err(invalid(format!("need an even, positive row count and dim, got {rows} x {dim}")));
        }
        let values = input(z, rows * dim, "z")?;
        let loss_out = output(loss_out, 1, "loss_out")?;
        let z = Array2::from_shape_vec((rows, dim), values.to_vec()).map_err(|e| invalid(e.to_string()))?;
        let n = rows / 2;
        let pair_of = (0..rows).map(|i| (i + n) % rows).collect();
        let batch = ContrastiveBatch::new(z, pair_of, temperature)?.with_config(&LossConfig {
            temperature,
            exclude_positive,
        })?;
        if grad_out.is_null() {
            loss_out[0] = nt_xent(&batch)?;
        } else {
            let grad = output(grad_out, rows * dim, "grad_out")?;
            let (loss, dz) = nt_xent_with_grad(&batch)?;
            loss_out[0] = loss;
            grad.copy_from_slice(dz.as_standard_layout().as_slice().expect("standard layout"));
        }
        Ok(())
    })
}

fn records(patients: &[u32], truth: &[u32], predicted: &[u32]) -> Vec<PredictionRecord> {
    truth
        .iter()
        .zip(predicted)
        .enumerate()
        .map(|(i, (&t, &p))| {
            let mut scores = vec![0.0; (t.max(p) as usize) + 1];
            scores[p as usize] = 1.0;
            PredictionRecord::new(
                i.to_string(),
                patients.get(i).map_or_else(|| "0".to_string(), |p| p.to_string()),
                MagnificationFactor::X40,
                None,
                t as ClassId,
                scores,
            )
        })
        .collect()
}

/// Fraction of `n` predictions equal to the true label.
///
/// # Safety
/// `truth` and `predicted` hold `n` values; `out` one.
#[no_mangle]
pub unsafe extern "C" fn mpcs_image_level_accuracy(
    truth: *const u32,
    predicted: *const u32,
    n: usize,
    out: *mut f64,
) -> MpcsStatus {
    guard(|| {
        let t = input(truth, n, "truth")?;
        let p = input(predicted, n, "predicted")?;
        let out = output(out, 1, "out")?;
        out[0] = image_level_accuracy(&records(&[], t, p))?;
        Ok(())
    })
}

/// Mean over patients of each patient's fraction of correct images.
///
/// # Safety
/// `patients`, `truth` and `predicted` hold `n` values; `out` one.
#[no_mangle]
pub unsafe extern "C" fn mpcs_patient_level_accuracy(
    patients: *const u32,
    truth: *const u32,
    predicted: *const u32,
    n: usize,
    out: *mut f64,
) -> MpcsStatus {
    guard(|| {
        let ids = input(patients, n, "patients")?;
        let t = input(truth, n, "truth")?;
        let p = input(predicted, n, "predicted")?;
        let out = output(out, 1, "out")?;
        out[0] = patient_level_accuracy(&records(ids, t, p))?;
        Ok(())
    })
}

/// Grad-CAM map from `k` channels of `h * w` activations and gradients
/// (channel-major). Writes `h * w` values in `[0, 1]`.
///
/// # Safety
/// `activations` and `gradients` hold `k * h * w` doubles; `out` `h * w`.
#[no_mangle]
pub unsafe extern "C" fn mpcs_grad_cam_map(
    activations: *const f64,
    gradients: *const f64,
    k: usize,
    h: usize,
    w: usize,
    out: *mut f64,
) -> MpcsStatus {
    guard(|| {
        let len = k * h * w;
        let a = input(activations, len, "activations")?;
        let g = input(gradients, len, "gradients")?;
        let out = output(out, h * w, "out")?;
        let shape = |v: &[f64]| Array3::from_shape_vec((k, h, w), v.to_vec()).map_err(|e| invalid(e.to_string()));
        let map = grad_cam_map(&shape(a)?, &shape(g)?)?;
        out.copy_from_slice(map.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Creates a sampler; `out` receives the handle.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpcs_sampler_new(strategy: MpcsStrategy, seed: u64, out: *mut *mut MpcsSampler) -> MpcsStatus {
    guard(|| {
        let out = output(out, 1, "out")?;
        let kind = match strategy {
            MpcsStrategy::Fixed => StrategyKind::Fixed,
            MpcsStrategy::Ordered => StrategyKind::Ordered,
            MpcsStrategy::Random => StrategyKind::Random,
        };
        let strategy = match kind {
            StrategyKind::Fixed => PairStrategy::fixed(MagnificationFactor::X200, MagnificationFactor::X400)?,
            StrategyKind::Ordered => PairStrategy::ordered_default(),
            StrategyKind::Random => PairStrategy::RandomPair,
        };
        out[0] = Box::into_raw(Box::new(MpcsSampler {
            strategy,
            rng: rng::stream(seed, &[]),
        }));
        Ok(())
    })
}

/// Draws one pair; magnifications are written as 40, 100, 200 or 400.
///
/// # Safety
/// `sampler` comes from [`mpcs_sampler_new`]; `first` and `second` are writable.
#[no_mangle]
pub unsafe extern "C" fn mpcs_sampler_draw(sampler: *mut MpcsSampler, first: *mut u32, second: *mut u32) -> MpcsStatus {
    guard(|| {
        let s = sampler.as_mut().ok_or_else(|| null("sampler"))?;
        let first = output(first, 1, "first")?;
        let second = output(second, 1, "second")?;
        let (a, b) = s.strategy.draw(&mut s.rng);
        first[0] = a.value();
        second[0] = b.value();
        Ok(())
    })
}

/// # Safety
/// `sampler` is null or an unfreed handle from [`mpcs_sampler_new`].
#[no_mangle]
pub unsafe extern "C" fn mpcs_sampler_free(sampler: *mut MpcsSampler) {
    if !sampler.is_null() {
        drop(Box::from_raw(sampler));
    }
}

/// Loads the encoder stored in a checkpoint file.
///
/// # Safety
/// `path` is a NUL-terminated UTF-8 string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mpcs_encoder_load(path: *const c_char, out: *mut *mut MpcsEncoder) -> MpcsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let out = output(out, 1, "out")?;
        let path = CStr::from_ptr(path).to_str().map_err(|e| invalid(e.to_string()))?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        out[0] = Box::into_raw(Box::new(MpcsEncoder { inner: ckpt.encoder }));
        Ok(())
    })
}

/// Width of the pooled representation; 0 for a null handle.
///
/// # Safety
/// `encoder` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mpcs_encoder_feature_dim(encoder: *const MpcsEncoder) -> usize {
    encoder.as_ref().map_or(0, |e| e.inner.feature_dim())
}

/// Expected square input side in pixels; 0 for a null handle.
///
/// # Safety
/// `encoder` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mpcs_encoder_input_size(encoder: *const MpcsEncoder) -> usize {
    encoder.as_ref().map_or(0, |e| e.inner.input_size())
}

/// Encodes `n` RGB images of `input_size * input_size * 3` bytes each
/// (row-major, interleaved) into `n * feature_dim` doubles.
///
/// # Safety
/// `encoder` is a live handle; `pixels` and `out` have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn mpcs_encoder_encode(
    encoder: *const MpcsEncoder,
    pixels: *const u8,
    n: usize,
    out: *mut f64,
) -> MpcsStatus {
    guard(|| {
        let e = &encoder.as_ref().ok_or_else(|| null("encoder"))?.inner;
        let s = e.input_size();
        let px = input(pixels, n * s * s * 3, "pixels")?;
        let out = output(out, n * e.feature_dim(), "out")?;
        if n == 0 {
            return Ok(());
        }
        let batch = Array4::from_shape_fn((n, s, s, 3), |(b, y, x, c)| px[((b * s + y) * s + x) * 3 + c] as f64 / 255.0);
        let h = e.encode(&batch)?;
        out.copy_from_slice(h.as_standard_layout().as_slice().expect("standard layout"));
        Ok(())
    })
}

/// # Safety
/// `encoder` is null or an unfreed handle from [`mpcs_encoder_load`].
#[no_mangle]
pub unsafe extern "C" fn mpcs_encoder_free(encoder: *mut MpcsEncoder) {
    if !encoder.is_null() {
        drop(Box::from_raw(encoder));
    }
}
