//! C ABI for `sfodkit`.
//!
//! Every fallible function returns an [`SfodStatus`]. On failure a message
//! is kept per thread and can be read with [`sfod_last_error`]. Objects are
//! opaque handles created by `*_new` functions and released by the matching
//! `*_free`. Passing a handle to any function after freeing it is undefined
//! behavior. Panics never cross the boundary; they are reported as
//! `SFOD_STATUS_PANIC`.
//!
//! The header is generated into `include/sfodkit.h` by the build script.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use sfodkit::ema::EmaState;
use sfodkit::fusion::{fuse_sources, Detection, FusedLabel, FusionConfig, FusionMethod};
use sfodkit::geometry::{iou, BBox};
use sfodkit::io::PROB_SUM_TOLERANCE;
use sfodkit::pgfa::{batch_patch_weights, pgfa_loss, PatchFeatureBatch, PatchWeightConfig};
use sfodkit::pifa::{batch_class_means, pifa_loss, InstanceFeature, PrototypeBank};
use sfodkit::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfodStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Parse = 3,
    Validation = 4,
    Format = 5,
    Truncated = 6,
    Io = 7,
    Panic = 8,
}

pub const SFOD_METHOD_DEPF: u32 = 0;
pub const SFOD_METHOD_NMS: u32 = 1;
pub const SFOD_METHOD_WBF: u32 = 2;
pub const SFOD_METHOD_RI: u32 = 3;

/// Detections of one image: boxes with class probability vectors.
pub struct SfodDetections {
    num_classes: usize,
    items: Vec<Detection>,
}

/// Output of [`sfod_fuse`].
pub struct SfodFused {
    labels: Vec<FusedLabel>,
    clusters: usize,
}

/// Teacher parameters under an EMA schedule.
pub struct SfodEma(EmaState);

/// Per-class momentum prototypes.
pub struct SfodPrototypeBank(PrototypeBank);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Core(Error::InvalidInput(msg.into()))
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SfodStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SfodStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SfodStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            let status = match &e {
                Error::InvalidInput(_) => SfodStatus::InvalidInput,
                Error::Parse { .. } => SfodStatus::Parse,
                Error::Validation { .. } => SfodStatus::Validation,
                Error::Format(_) => SfodStatus::Format,
                Error::Truncated { .. } => SfodStatus::Truncated,
                Error::Io { .. } => SfodStatus::Io,
            };
            set_error(e.to_string());
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SfodStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sfod_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// IoU of two `[x1, y1, x2, y2]` boxes.
///
/// # Safety
/// `a` and `b` must point to 4 doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sfod_iou(a: *const f64, b: *const f64, out: *mut f64) -> SfodStatus {
    guard(|| {
        let a = BBox::from_array(input(a, 4, "a")?.try_into().expect("4 values"))?;
        let b = BBox::from_array(input(b, 4, "b")?.try_into().expect("4 values"))?;
        *handle_mut(out, "out")? = iou(&a, &b);
        Ok(())
    })
}

/// Creates an empty detection list for `num_classes` classes.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sfod_detections_new(
    num_classes: usize,
    out: *mut *mut SfodDetections,
) -> SfodStatus {
    guard(|| {
        if num_classes == 0 {
            return Err(invalid("num_classes must be at least 1"));
        }
        store(
            out,
            SfodDetections {
                num_classes,
                items: Vec::new(),
            },
        )
    })
}

/// Appends a detection. `probs` must hold `num_classes` entries summing
/// to 1 within `1e-6`.
///
/// # Safety
/// `dets` must be a live handle, `bbox` must point to 4 doubles and
/// `probs` to `num_probs` doubles.
#[no_mangle]
pub unsafe extern "C" fn sfod_detections_push(
    dets: *mut SfodDetections,
    bbox: *const f64,
    probs: *const f64,
    num_probs: usize,
) -> SfodStatus {
    guard(|| {
        let dets = handle_mut(dets, "dets")?;
        if num_probs != dets.num_classes {
            return Err(invalid(format!(
                "{num_probs} probabilities for {} classes",
                dets.num_classes
            )));
        }
        let b = BBox::from_array(input(bbox, 4, "bbox")?.try_into().expect("4 values"))?;
        let p = input(probs, num_probs, "probs")?.to_vec();
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(invalid(format!("probabilities sum to {sum}, expected 1")));
        }
        dets.items.push(Detection::new(b, p)?);
        Ok(())
    })
}

/// Number of detections; 0 for NULL.
///
/// # Safety
/// `dets` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sfod_detections_len(dets: *const SfodDetections) -> usize {
    dets.as_ref().map_or(0, |d| d.items.len())
}

/// # Safety
/// `dets` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sfod_detections_free(dets: *mut SfodDetections) {
    if !dets.is_null() {
        drop(Box::from_raw(dets));
    }
}

/// Fuses two detection lists of one image. `method` is one of the
/// `SFOD_METHOD_*` constants; `beta` is the IoU threshold.
///
/// # Safety
/// `a` and `b` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sfod_fuse(
    a: *const SfodDetections,
    b: *const SfodDetections,
    method: u32,
    beta: f64,
    epsilon: f64,
    out: *mut *mut SfodFused,
) -> SfodStatus {
    guard(|| {
        let (a, b) = (handle(a, "a")?, handle(b, "b")?);
        if a.num_classes != b.num_classes {
            return Err(invalid(format!(
                "source A has {} classes, source B has {}",
                a.num_classes, b.num_classes
            )));
        }
        let method = match method {
            SFOD_METHOD_DEPF => FusionMethod::Depf,
            SFOD_METHOD_NMS => FusionMethod::Nms,
            SFOD_METHOD_WBF => FusionMethod::Wbf,
            SFOD_METHOD_RI => FusionMethod::Ri,
            other => return Err(invalid(format!("unknown fusion method {other}"))),
        };
        let cfg = FusionConfig {
            beta,
            epsilon,
            method,
        };
        let o = fuse_sources(&a.items, &b.items, &cfg)?;
        store(
            out,
            SfodFused {
                labels: o.fused,
                clusters: o.clusters,
            },
        )
    })
}

/// Number of fused labels; 0 for NULL.
///
/// # Safety
/// `fused` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sfod_fused_len(fused: *const SfodFused) -> usize {
    fused.as_ref().map_or(0, |f| f.labels.len())
}

/// Number of clusters formed (surviving boxes for NMS); 0 for NULL.
///
/// # Safety
/// `fused` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sfod_fused_clusters(fused: *const SfodFused) -> usize {
    fused.as_ref().map_or(0, |f| f.clusters)
}

/// Copies fused label `index`: the box into `bbox_out[4]`, the class
/// probabilities into `probs_out[num_probs]` and the class into `label_out`.
///
/// # Safety
/// `fused` must be a live handle and the outputs writable for the given sizes.
#[no_mangle]
pub unsafe extern "C" fn sfod_fused_get(
    fused: *const SfodFused,
    index: usize,
    bbox_out: *mut f64,
    probs_out: *mut f64,
    num_probs: usize,
    label_out: *mut usize,
) -> SfodStatus {
    guard(|| {
        let f = handle(fused, "fused")?;
        let l = f.labels.get(index).ok_or_else(|| {
            invalid(format!(
                "index {index} out of range ({} labels)",
                f.labels.len()
            ))
        })?;
        if num_probs != l.probs.len() {
            return Err(invalid(format!(
                "buffer of {num_probs} for {} classes",
                l.probs.len()
            )));
        }
        output(bbox_out, 4, "bbox_out")?.copy_from_slice(&l.bbox.to_array());
        output(probs_out, num_probs, "probs_out")?.copy_from_slice(&l.probs);
        *handle_mut(label_out, "label_out")? = l.label;
        Ok(())
    })
}

/// # Safety
/// `fused` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sfod_fused_free(fused: *mut SfodFused) {
    if !fused.is_null() {
        drop(Box::from_raw(fused));
    }
}

unsafe fn patch_batch(
    data: *const f64,
    batch: usize,
    patches: usize,
    channels: usize,
    what: &'static str,
) -> Result<PatchFeatureBatch, Failure> {
    let len = batch
        .checked_mul(patches)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| invalid("tensor size overflows"))?;
    Ok(PatchFeatureBatch::new(
        batch,
        patches,
        channels,
        input(data, len, what)?.to_vec(),
    )?)
}

/// Patch weights of a `batch x patches x channels` feature tensor, written
/// to `out[batch * patches]`.
///
/// # Safety
/// `features` must hold `batch * patches * channels` doubles and `out`
/// `batch * patches`.
#[no_mangle]
pub unsafe extern "C" fn sfod_pgfa_weights(
    features: *const f64,
    batch: usize,
    patches: usize,
    channels: usize,
    tau: f64,
    top_k: usize,
    epsilon: f64,
    out: *mut f64,
) -> SfodStatus {
    guard(|| {
        let feats = patch_batch(features, batch, patches, channels, "features")?;
        let w = batch_patch_weights(&feats, &PatchWeightConfig { tau, top_k }, epsilon)?;
        output(out, w.len(), "out")?.copy_from_slice(&w);
        Ok(())
    })
}

/// Weighted cosine alignment loss. `grad_out` may be NULL; otherwise it
/// receives the gradient with respect to `student`.
///
/// # Safety
/// `vfm` and `student` must hold `batch * patches * channels` doubles, as
/// must `grad_out` when not NULL; `loss_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sfod_pgfa_loss(
    vfm: *const f64,
    student: *const f64,
    batch: usize,
    patches: usize,
    channels: usize,
    tau: f64,
    top_k: usize,
    epsilon: f64,
    loss_out: *mut f64,
    grad_out: *mut f64,
) -> SfodStatus {
    guard(|| {
        let v = patch_batch(vfm, batch, patches, channels, "vfm")?;
        let s = patch_batch(student, batch, patches, channels, "student")?;
        let out = pgfa_loss(&v, &s, &PatchWeightConfig { tau, top_k }, epsilon)?;
        *handle_mut(loss_out, "loss_out")? = out.loss;
        if !grad_out.is_null() {
            output(grad_out, out.grad_student.len(), "grad_out")?
                .copy_from_slice(&out.grad_student);
        }
        Ok(())
    })
}

/// Creates an empty prototype bank.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sfod_bank_new(
    num_classes: usize,
    channels: usize,
    momentum: f64,
    out: *mut *mut SfodPrototypeBank,
) -> SfodStatus {
    guard(|| {
        store(
            out,
            SfodPrototypeBank(PrototypeBank::new(num_classes, channels, momentum)?),
        )
    })
}

unsafe fn instances(
    bank: &PrototypeBank,
    features: *const f64,
    labels: *const usize,
    count: usize,
) -> Result<Vec<InstanceFeature>, Failure> {
    let c = bank.channels();
    let feats = input(
        features,
        count
            .checked_mul(c)
            .ok_or_else(|| invalid("size overflows"))?,
        "features",
    )?;
    let labels = input(labels, count, "labels")?;
    feats
        .chunks_exact(c)
        .zip(labels)
        .map(|(f, &label)| {
            if label >= bank.num_classes() {
                return Err(invalid(format!("label {label} out of range")));
            }
            Ok(InstanceFeature {
                features: f.to_vec(),
                label,
            })
        })
        .collect()
}

/// Folds the per-class means of `count` labeled feature rows into the bank.
///
/// # Safety
/// `bank` must be a live handle, `features` must hold `count * channels`
/// doubles and `labels` `count` entries.
#[no_mangle]
pub unsafe extern "C" fn sfod_bank_update(
    bank: *mut SfodPrototypeBank,
    features: *const f64,
    labels: *const usize,
    count: usize,
) -> SfodStatus {
    guard(|| {
        let bank = &mut handle_mut(bank, "bank")?.0;
        let inst = instances(bank, features, labels, count)?;
        bank.update(&batch_class_means(&inst)?)?;
        Ok(())
    })
}

/// Copies the prototype of `class` into `out[channels]` and reports whether
/// it has been initialized.
///
/// # Safety
/// `bank` must be a live handle; `out` must hold `channels` doubles and
/// `initialized` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sfod_bank_prototype(
    bank: *const SfodPrototypeBank,
    class: usize,
    out: *mut f64,
    channels: usize,
    initialized: *mut bool,
) -> SfodStatus {
    guard(|| {
        let bank = &handle(bank, "bank")?.0;
        if class >= bank.num_classes() || channels != bank.channels() {
            return Err(invalid("class or channel count does not match the bank"));
        }
        output(out, channels, "out")?.copy_from_slice(bank.prototype(class));
        *handle_mut(initialized, "initialized")? = bank.is_initialized(class);
        Ok(())
    })
}

/// Prototype InfoNCE loss of `count` labeled rows against the bank.
/// `grad_out` may be NULL; otherwise it receives `count * channels` values.
///
/// # Safety
/// As for [`sfod_bank_update`]; `loss_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sfod_pifa_loss(
    bank: *const SfodPrototypeBank,
    features: *const f64,
    labels: *const usize,
    count: usize,
    tau: f64,
    loss_out: *mut f64,
    grad_out: *mut f64,
) -> SfodStatus {
    guard(|| {
        let bank = &handle(bank, "bank")?.0;
        let inst = instances(bank, features, labels, count)?;
        let out = pifa_loss(&inst, bank, tau)?;
        *handle_mut(loss_out, "loss_out")? = out.loss;
        if !grad_out.is_null() {
            let flat: Vec<f64> = out.grad_instances.into_iter().flatten().collect();
            output(grad_out, flat.len(), "grad_out")?.copy_from_slice(&flat);
        }
        Ok(())
    })
}

/// # Safety
/// `bank` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sfod_bank_free(bank: *mut SfodPrototypeBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Creates an EMA state from `len` initial teacher parameters.
///
/// # Safety
/// `teacher` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sfod_ema_new(
    teacher: *const f64,
    len: usize,
    alpha: f64,
    interval: u64,
    out: *mut *mut SfodEma,
) -> SfodStatus {
    guard(|| {
        let t = input(teacher, len, "teacher")?.to_vec();
        store(out, SfodEma(EmaState::new(t, alpha, interval)?))
    })
}

/// Advances the step counter and, on schedule, moves the teacher toward
/// `student`. `applied` (may be NULL) reports whether an update happened.
///
/// # Safety
/// `ema` must be a live handle and `student` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sfod_ema_step(
    ema: *mut SfodEma,
    student: *const f64,
    len: usize,
    applied: *mut bool,
) -> SfodStatus {
    guard(|| {
        let ema = &mut handle_mut(ema, "ema")?.0;
        let did = ema.step(input(student, len, "student")?)?;
        if let Some(a) = applied.as_mut() {
            *a = did;
        }
        Ok(())
    })
}

/// Copies the teacher parameters into `out[len]`.
///
/// # Safety
/// `ema` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sfod_ema_teacher(
    ema: *const SfodEma,
    out: *mut f64,
    len: usize,
) -> SfodStatus {
    guard(|| {
        let t = handle(ema, "ema")?.0.teacher();
        if len != t.len() {
            return Err(invalid(format!(
                "buffer of {len} for {} parameters",
                t.len()
            )));
        }
        output(out, len, "out")?.copy_from_slice(t);
        Ok(())
    })
}

/// # Safety
/// `ema` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sfod_ema_free(ema: *mut SfodEma) {
    if !ema.is_null() {
        drop(Box::from_raw(ema));
    }
}
