//! C ABI over `tryflow`.
//!
//! Every fallible function returns a [`TfStatus`]; on failure a message is
//! available from [`tf_last_error`] on the same thread. Images are row-major
//! `height x width x 3` `float` buffers in `[0, 1]`; masks are one byte per
//! pixel, nonzero meaning masked. A canvas is the garment image followed by
//! the person image, so it is `2 * width` pixels wide.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use tryflow::flow::{self, CorrectionPlan, NoiseSchedule, TemperatureParams, TokenCounts};
use tryflow::layout::{apply_mask, build_mask, concat_pair, Canvas, Category, Image, Mask, MaskCanvas, Mode, TaskToken};
use tryflow::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use tryflow::synthwear::gen_pair;
use tryflow::Error;

/// Status codes; the nonzero values match the library's error codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TfStatus {
    Ok = 0,
    /// NaN or infinity where finite values are required.
    Numeric = 2,
    Config = 3,
    Usage = 4,
    /// More tokens than the model's `n_max`.
    Capacity = 5,
    UndefinedRegion = 6,
    /// Malformed checkpoint or JSON.
    Format = 7,
    Io = 8,
    NullPointer = 9,
    /// A Rust panic was caught at the boundary.
    Panic = 10,
}

/// Generation direction.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TfMode {
    On = 0,
    Off = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TfCategory {
    Upper = 0,
    Lower = 1,
    Full = 2,
}

/// Opaque model handle.
pub struct TfModel {
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> TfStatus {
    match e.code() {
        2 => TfStatus::Numeric,
        3 => TfStatus::Config,
        4 => TfStatus::Usage,
        5 => TfStatus::Capacity,
        6 => TfStatus::UndefinedRegion,
        7 => TfStatus::Format,
        _ => TfStatus::Io,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TfStatus::Ok
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            TfStatus::NullPointer
        }
        Err(_) => {
            set_error("internal panic");
            TfStatus::Panic
        }
    }
}

fn usage(msg: impl Into<String>) -> Fail {
    Fail::Lib(Error::Usage(msg.into()))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| usage(format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn model<'a>(m: *const TfModel) -> Result<&'a TfModel, Fail> {
    m.as_ref().ok_or(Fail::Null("model"))
}

fn mode_of(v: i32) -> Result<Mode, Fail> {
    match v {
        0 => Ok(Mode::On),
        1 => Ok(Mode::Off),
        _ => Err(usage(format!("mode {v} (expected 0 = on, 1 = off)"))),
    }
}

fn category_of(v: i32) -> Result<Category, Fail> {
    usize::try_from(v).ok().and_then(|i| Category::ALL.get(i).copied()).ok_or_else(|| usage(format!("category {v} (expected 0, 1 or 2)")))
}

fn mask_of(bytes: &[u8], h: usize, w: usize) -> Result<Mask, Fail> {
    Ok(Mask::new(h, w, bytes.iter().map(|&b| b != 0).collect())?)
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn tf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Fresh model. `config_json` is a model config object (missing keys take
/// defaults) or NULL for the default config.
///
/// # Safety
/// `config_json` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tf_model_init(config_json: *const c_char, seed: u64, out: *mut *mut TfModel) -> TfStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let config: ModelConfig =
            if config_json.is_null() { ModelConfig::default() } else { serde_json::from_str(str_arg(config_json, "config_json")?).map_err(Error::from)? };
        let params = ModelParams::init(&config, seed)?;
        *out = Box::into_raw(Box::new(TfModel { params }));
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tf_model_load(path: *const c_char, out: *mut *mut TfModel) -> TfStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let params = load_checkpoint(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(TfModel { params }));
        Ok(())
    })
}

/// # Safety
/// `model` comes from this library; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tf_model_save(model: *const TfModel, path: *const c_char) -> TfStatus {
    guard(|| {
        let m = self::model(model)?;
        save_checkpoint(&m.params, Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Releases a model; NULL is ignored.
///
/// # Safety
/// `model` is NULL or comes from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tf_model_free(model: *mut TfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` comes from this library; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tf_model_parameter_count(model: *const TfModel, out: *mut u64) -> TfStatus {
    guard(|| {
        let m = self::model(model)?;
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        *out = m.params.parameter_count() as u64;
        Ok(())
    })
}

/// Token-count-aware attention temperature.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn tf_temperature(
    head_dim: usize,
    n_infer: usize,
    n_train: usize,
    n_mask: usize,
    n_garment: usize,
    alpha: f64,
    beta: f64,
    c: f64,
    out: *mut f64,
) -> TfStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        let tp = TemperatureParams { alpha, beta, c };
        tp.validate()?;
        *out = flow::temperature(head_dim, TokenCounts { n_infer, n_train, n_mask, n_garment }, &tp)?;
        Ok(())
    })
}

struct Inputs {
    condition: Canvas,
    mask: MaskCanvas,
    task: TaskToken,
    garment_region: Mask,
}

#[allow(clippy::too_many_arguments)]
unsafe fn inputs(
    garment: *const f32,
    person: *const f32,
    person_mask: *const u8,
    height: usize,
    width: usize,
    mode: i32,
    category: i32,
) -> Result<Inputs, Fail> {
    let n = height * width;
    let g = Image::new(height, width, slice(garment, n * 3, "garment")?.to_vec())?;
    let p = Image::new(height, width, slice(person, n * 3, "person")?.to_vec())?;
    let task = TaskToken::new(mode_of(mode)?, category_of(category)?);
    let pm = if person_mask.is_null() { None } else { Some(mask_of(slice(person_mask, n, "person_mask")?, height, width)?) };
    if task.mode == Mode::On && pm.is_none() {
        return Err(Fail::Null("person_mask (required for try-on)"));
    }
    let canvas = concat_pair(&g, &p)?;
    let mask = build_mask(task, height, width, pm.as_ref())?;
    let garment_region = tryflow::synthwear::garment_region(&g);
    Ok(Inputs { condition: apply_mask(&canvas, &mask)?, mask, task, garment_region })
}

fn write_canvas(out: &mut [f32], canvas: &Canvas) {
    out.copy_from_slice(canvas.image().data());
}

/// Samples the masked half. `person_mask` may be NULL for try-off (mode 1).
/// `steps` of 0 means the default schedule. `temp_scale` nonzero enables
/// the temperature override with default constants. `out_canvas` receives
/// `height * 2 * width * 3` floats.
///
/// # Safety
/// Buffers have the sizes described above; `model` comes from this library.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn tf_sample(
    model: *const TfModel,
    garment: *const f32,
    person: *const f32,
    person_mask: *const u8,
    height: usize,
    width: usize,
    mode: i32,
    category: i32,
    steps: usize,
    temp_scale: i32,
    seed: u64,
    out_canvas: *mut f32,
) -> TfStatus {
    guard(|| {
        let m = self::model(model)?;
        let i = inputs(garment, person, person_mask, height, width, mode, category)?;
        let out = slice_mut(out_canvas, height * width * 6, "out_canvas")?;
        let schedule = if steps == 0 { NoiseSchedule::default() } else { NoiseSchedule::linear(steps)? };
        let tp = (temp_scale != 0).then(TemperatureParams::default);
        let r = flow::sample(&m.params, &i.condition, &i.mask, i.task, &schedule, tp.as_ref(), seed)?;
        write_canvas(out, &r.canvas);
        Ok(())
    })
}

/// Try-on with the default self-correction plan. The garment-tight region
/// is taken from the non-white pixels of the garment image.
///
/// # Safety
/// As for [`tf_sample`]; `person_mask` must not be NULL.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn tf_self_correct(
    model: *const TfModel,
    garment: *const f32,
    person: *const f32,
    person_mask: *const u8,
    height: usize,
    width: usize,
    category: i32,
    steps: usize,
    temp_scale: i32,
    seed: u64,
    out_canvas: *mut f32,
) -> TfStatus {
    guard(|| {
        let m = self::model(model)?;
        let i = inputs(garment, person, person_mask, height, width, 0, category)?;
        let out = slice_mut(out_canvas, height * width * 6, "out_canvas")?;
        let schedule = if steps == 0 { NoiseSchedule::default() } else { NoiseSchedule::linear(steps)? };
        let tp = (temp_scale != 0).then(TemperatureParams::default);
        let r = flow::self_corrective_sample(
            &m.params,
            &i.condition,
            &i.mask,
            i.task,
            Some(&i.garment_region),
            &CorrectionPlan::default(),
            &schedule,
            tp.as_ref(),
            seed,
        )?;
        write_canvas(out, &r.canvas);
        Ok(())
    })
}

/// One synthetic pair: garment and person images (`height * width * 3`
/// floats each) and the person-side garment mask (`height * width` bytes).
///
/// # Safety
/// Output buffers have the sizes described above.
#[no_mangle]
pub unsafe extern "C" fn tf_gen_pair(
    seed: u64,
    category: i32,
    height: usize,
    width: usize,
    out_garment: *mut f32,
    out_person: *mut f32,
    out_mask: *mut u8,
) -> TfStatus {
    guard(|| {
        let n = height * width;
        let g = slice_mut(out_garment, n * 3, "out_garment")?;
        let p = slice_mut(out_person, n * 3, "out_person")?;
        let mk = slice_mut(out_mask, n, "out_mask")?;
        let pair = gen_pair(seed, category_of(category)?, height, width)?;
        g.copy_from_slice(pair.garment.data());
        p.copy_from_slice(pair.person.data());
        let m = pair.require_person_mask()?;
        for (d, &b) in mk.iter_mut().zip(m.bits()) {
            *d = u8::from(b);
        }
        Ok(())
    })
}
