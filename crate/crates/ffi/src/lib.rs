//! C ABI over `unitlens`.
//!
//! Every fallible call returns a [`UlStatus`]; on failure a message is kept
//! per thread and read with [`ul_last_error`]. Models and activation
//! matrices cross the boundary as opaque handles that the caller frees.
//! Arrays are row-major and their lengths are passed explicitly.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use unitlens::ablation::{ablate_in_place, AblationMask};
use unitlens::activations::ActivationMatrix;
use unitlens::dataset::PIXELS;
use unitlens::embedding::procrustes_align;
use unitlens::metrics::{activational_selectivity, activational_selectivity_raw, neighborhood_hit, pearson, spearman, t_test_p_value};
use unitlens::nn::{build_network, load_checkpoint, save_checkpoint, Arch, Capture, LayerTag, ModelState};
use unitlens::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UlStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Bad argument value: unknown layer, unit out of range, bad `k`.
    InvalidArgument = 2,
    /// Unreadable or malformed file.
    Data = 3,
    /// Non-finite values or an undefined statistic.
    Numeric = 4,
    /// Array lengths disagree or an output buffer is too small.
    Shape = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

pub const UL_LAYER_CONV1: u32 = 0;
pub const UL_LAYER_CONV2: u32 = 1;
pub const UL_LAYER_CONV3: u32 = 2;
pub const UL_LAYER_FC1: u32 = 3;
pub const UL_LAYER_FC2: u32 = 4;
pub const UL_LAYER_OUT: u32 = 5;

/// Pixels per image expected by the model calls.
pub const UL_PIXELS: usize = 784;

/// A trained or freshly initialized network.
pub struct UlModel {
    inner: ModelState,
}

/// A recorded activation matrix: one row per image, one column per unit
/// (a convolutional unit spans its whole pooled plane).
pub struct UlActivations {
    inner: ActivationMatrix,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(UlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) | Error::CountMismatch { .. } => UlStatus::Shape,
            Error::Usage(_)
            | Error::InvalidArgument(_)
            | Error::UnknownLayer(_)
            | Error::UnitOutOfRange { .. }
            | Error::TooFewPoints { .. } => UlStatus::InvalidArgument,
            e if e.exit_code() == 4 => UlStatus::Numeric,
            _ => UlStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: UlStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Run `f`, record any failure and translate it into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> UlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UlStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            UlStatus::Panic
        }
    }
}

fn nonnull<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        fail(UlStatus::NullPointer, format!("{name} is null"))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must point to `len` readable values when non-null.
unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    nonnull(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must point to `len` writable values when non-null.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    nonnull(p, name)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// `out` must be valid for one write when non-null.
unsafe fn write<T>(out: *mut T, v: T, name: &str) -> Result<(), Failure> {
    nonnull(out, name)?;
    out.write(v);
    Ok(())
}

/// # Safety
/// `p` must be a nul-terminated string when non-null.
unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    nonnull(p, "path")?;
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(UlStatus::InvalidArgument, "path is not valid UTF-8"),
    }
}

fn layer_arg(layer: u32) -> Result<LayerTag, Failure> {
    match LayerTag::ALL.get(layer as usize) {
        Some(&t) => Ok(t),
        None => fail(UlStatus::InvalidArgument, format!("layer {layer} is not in 0..=5")),
    }
}

/// # Safety
/// `h` must be null or a live handle from this library.
unsafe fn model<'a>(h: *const UlModel) -> Result<&'a ModelState, Failure> {
    nonnull(h, "model")?;
    Ok(&(*h).inner)
}

/// Library version, a static nul-terminated string.
#[no_mangle]
pub extern "C" fn ul_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null after a
/// successful one. Valid until the next call into the library.
#[no_mangle]
pub extern "C" fn ul_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Fresh network with uniform `±1/sqrt(fan_in)` weights drawn from `seed`.
///
/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn ul_model_new(seed: u64, out: *mut *mut UlModel) -> UlStatus {
    guard(|| {
        nonnull(out, "out")?;
        let m = Box::new(UlModel {
            inner: build_network(Arch::canonical(), seed),
        });
        write(out, Box::into_raw(m), "out")
    })
}

/// Load a checkpoint written by the toolkit.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ul_model_load(path: *const c_char, out: *mut *mut UlModel) -> UlStatus {
    guard(|| {
        nonnull(out, "out")?;
        let inner = load_checkpoint(&path_arg(path)?)?;
        write(out, Box::into_raw(Box::new(UlModel { inner })), "out")
    })
}

/// # Safety
/// `model` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ul_model_save(model: *const UlModel, path: *const c_char) -> UlStatus {
    guard(|| Ok(save_checkpoint(self::model(model)?, &path_arg(path)?)?))
}

/// Independent copy of a model.
///
/// # Safety
/// `model` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ul_model_clone(model: *const UlModel, out: *mut *mut UlModel) -> UlStatus {
    guard(|| {
        let inner = self::model(model)?.clone();
        write(out, Box::into_raw(Box::new(UlModel { inner })), "out")
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ul_model_free(model: *mut UlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of units (channels or neurons) in `layer`.
///
/// # Safety
/// `model` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ul_model_units(model: *const UlModel, layer: u32, out: *mut usize) -> UlStatus {
    guard(|| {
        let n = self::model(model)?.arch.units(layer_arg(layer)?);
        write(out, n, "out")
    })
}

/// Values per image that `ul_model_forward_layer` writes for `layer`.
///
/// # Safety
/// `model` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ul_model_activation_width(model: *const UlModel, layer: u32, out: *mut usize) -> UlStatus {
    guard(|| {
        let n = self::model(model)?.arch.activation_width(layer_arg(layer)?);
        write(out, n, "out")
    })
}

/// Zero the incoming weights and bias of `units` in `layer`, in place.
///
/// # Safety
/// `model` must be a live handle and `units` hold `n_units` values.
#[no_mangle]
pub unsafe extern "C" fn ul_model_ablate(model: *mut UlModel, layer: u32, units: *const usize, n_units: usize) -> UlStatus {
    guard(|| {
        nonnull(model, "model")?;
        let mask = AblationMask::new(&(*model).inner.arch, layer_arg(layer)?, slice(units, n_units, "units")?.to_vec())?;
        Ok(ablate_in_place(&mut (*model).inner, &mask)?)
    })
}

/// Predicted class of `n_images` normalized 28x28 images.
///
/// # Safety
/// `images` must hold `n_images * UL_PIXELS` floats and `out_labels`
/// `n_images` bytes.
#[no_mangle]
pub unsafe extern "C" fn ul_model_predict(
    model: *const UlModel,
    images: *const f32,
    n_images: usize,
    out_labels: *mut u8,
) -> UlStatus {
    guard(|| {
        let m = self::model(model)?;
        let x = slice(images, n_images * PIXELS, "images")?;
        let out = slice_mut(out_labels, n_images, "out_labels")?;
        if n_images > 0 {
            out.copy_from_slice(&m.predict(x)?);
        }
        Ok(())
    })
}

/// Post-activation values of `layer` for `n_images` images, `(n_images,
/// width)` with width from `ul_model_activation_width`.
///
/// # Safety
/// `images` must hold `n_images * UL_PIXELS` floats and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn ul_model_forward_layer(
    model: *const UlModel,
    images: *const f32,
    n_images: usize,
    layer: u32,
    out: *mut f32,
    out_len: usize,
) -> UlStatus {
    guard(|| {
        let m = self::model(model)?;
        let tag = layer_arg(layer)?;
        let need = n_images * m.arch.activation_width(tag);
        if out_len < need {
            return fail(UlStatus::Shape, format!("output holds {out_len} values, {need} needed"));
        }
        let x = slice(images, n_images * PIXELS, "images")?;
        let dst = slice_mut(out, need, "out")?;
        if n_images > 0 {
            let f = m.forward(x, Capture::of(&[tag]))?;
            dst.copy_from_slice(&f.captured[&tag]);
        }
        Ok(())
    })
}

/// Load an activation matrix saved by the capture stage.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ul_activations_load(path: *const c_char, out: *mut *mut UlActivations) -> UlStatus {
    guard(|| {
        nonnull(out, "out")?;
        let inner = ActivationMatrix::load(&path_arg(path)?)?;
        write(out, Box::into_raw(Box::new(UlActivations { inner })), "out")
    })
}

/// Release an activation matrix. Null is ignored.
///
/// # Safety
/// `acts` must be null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ul_activations_free(acts: *mut UlActivations) {
    if !acts.is_null() {
        drop(Box::from_raw(acts));
    }
}

/// Rows (images) and unit columns of a matrix.
///
/// # Safety
/// `acts` must be a live handle; the outputs valid for one write each.
#[no_mangle]
pub unsafe extern "C" fn ul_activations_shape(acts: *const UlActivations, rows: *mut usize, cols: *mut usize) -> UlStatus {
    guard(|| {
        nonnull(acts, "acts")?;
        let a = &(*acts).inner;
        write(rows, a.rows, "rows")?;
        write(cols, a.cols, "cols")
    })
}

/// Activational selectivity and preferred class of every column.
///
/// # Safety
/// `acts` must be a live handle; both outputs must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ul_activations_selectivity(
    acts: *const UlActivations,
    out_selectivity: *mut f64,
    out_class: *mut u8,
    len: usize,
) -> UlStatus {
    guard(|| {
        nonnull(acts, "acts")?;
        let recs = activational_selectivity(&(*acts).inner)?;
        write_selectivity(&recs, out_selectivity, out_class, len)
    })
}

/// Activational selectivity of a raw `(rows, cols)` matrix with one label
/// per row.
///
/// # Safety
/// `values` must hold `rows * cols` floats, `labels` `rows` bytes and both
/// outputs `cols` values.
#[no_mangle]
pub unsafe extern "C" fn ul_selectivity(
    values: *const f32,
    rows: usize,
    cols: usize,
    labels: *const u8,
    out_selectivity: *mut f64,
    out_class: *mut u8,
) -> UlStatus {
    guard(|| {
        let v = slice(values, rows * cols, "values")?;
        let l = slice(labels, rows, "labels")?;
        let recs = activational_selectivity_raw(v, rows, cols, l)?;
        write_selectivity(&recs, out_selectivity, out_class, cols)
    })
}

unsafe fn write_selectivity(
    recs: &[unitlens::metrics::SelectivityRecord],
    out_selectivity: *mut f64,
    out_class: *mut u8,
    len: usize,
) -> Result<(), Failure> {
    if len != recs.len() {
        return fail(UlStatus::Shape, format!("{} units, output length {len}", recs.len()));
    }
    let s = slice_mut(out_selectivity, len, "out_selectivity")?;
    let c = slice_mut(out_class, len, "out_class")?;
    for (i, r) in recs.iter().enumerate() {
        s[i] = r.selectivity;
        c[i] = r.argmax;
    }
    Ok(())
}

/// Neighborhood hit of `n` labelled 2-D points (`coords` is `x0, y0, x1,
/// ...`): the fraction of each point's `k` nearest neighbors sharing its
/// label, or with `strict` the fraction of points whose neighbors all do.
///
/// # Safety
/// `coords` must hold `2 * n` doubles, `labels` `n` bytes.
#[no_mangle]
pub unsafe extern "C" fn ul_neighborhood_hit(
    coords: *const f64,
    n: usize,
    labels: *const u8,
    k: usize,
    strict: bool,
    out: *mut f64,
) -> UlStatus {
    guard(|| {
        let c = slice(coords, 2 * n, "coords")?;
        let l = slice(labels, n, "labels")?;
        let v = neighborhood_hit(c, 2, l, k, strict)?;
        write(out, v, "out")
    })
}

/// # Safety
/// `x` and `y` must hold `n` doubles; outputs valid for one write each.
#[no_mangle]
pub unsafe extern "C" fn ul_spearman(x: *const f64, y: *const f64, n: usize, out_r: *mut f64, out_p: *mut f64) -> UlStatus {
    guard(|| {
        let r = spearman(slice(x, n, "x")?, slice(y, n, "y")?)?;
        write(out_r, r.r, "out_r")?;
        write(out_p, r.p, "out_p")
    })
}

/// # Safety
/// `x` and `y` must hold `n` doubles; outputs valid for one write each.
#[no_mangle]
pub unsafe extern "C" fn ul_pearson(x: *const f64, y: *const f64, n: usize, out_r: *mut f64, out_p: *mut f64) -> UlStatus {
    guard(|| {
        let r = pearson(slice(x, n, "x")?, slice(y, n, "y")?)?;
        write(out_r, r.r, "out_r")?;
        write(out_p, r.p, "out_p")
    })
}

/// Two-sided p-value of a correlation `r` over `n` pairs (t-test with
/// `n - 2` degrees of freedom).
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ul_correlation_p_value(r: f64, n: usize, out: *mut f64) -> UlStatus {
    guard(|| {
        if n < 3 || !(-1.0..=1.0).contains(&r) {
            return fail(UlStatus::InvalidArgument, format!("need n >= 3 and r in [-1, 1], got n = {n}, r = {r}"));
        }
        write(out, t_test_p_value(r, n), "out")
    })
}

/// Procrustes disparity of `n` 2-D points after removing translation,
/// scale, rotation and reflection. With `out_aligned` non-null the
/// standardized, aligned target (`2 * n` doubles) is written there.
///
/// # Safety
/// `reference` and `target` must hold `2 * n` doubles; `out_aligned`, if
/// non-null, `2 * n`.
#[no_mangle]
pub unsafe extern "C" fn ul_procrustes(
    reference: *const f64,
    target: *const f64,
    n: usize,
    out_disparity: *mut f64,
    out_aligned: *mut f64,
) -> UlStatus {
    guard(|| {
        let pairs = |s: &[f64]| s.chunks_exact(2).map(|p| [p[0], p[1]]).collect::<Vec<_>>();
        let a = pairs(slice(reference, 2 * n, "reference")?);
        let b = pairs(slice(target, 2 * n, "target")?);
        let al = procrustes_align(&a, &b)?;
        write(out_disparity, al.disparity, "out_disparity")?;
        if !out_aligned.is_null() {
            let dst = slice_mut(out_aligned, 2 * n, "out_aligned")?;
            for (d, p) in dst.chunks_exact_mut(2).zip(&al.aligned) {
                d.copy_from_slice(p);
            }
        }
        Ok(())
    })
}
