//! C ABI for scoring images with a trained teacher/student pair, plus the
//! AUROC and Sinkhorn utilities.
//!
//! Every fallible function returns an [`OnStatus`]; on failure the message
//! is available from [`on_last_error_message`] on the same thread. Handles
//! are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use candle_core::Device;
use object_novelty::dataset::{load_image, PixelNorm};
use object_novelty::defend::{load_tuned_backbone, sinkhorn, Matrix, SinkhornConfig};
use object_novelty::encoder::{BackboneHandle, ImageTensor};
use object_novelty::mkd::{DistillConfig, StudentModel};
use object_novelty::runner::RunConfig;
use object_novelty::scoring::{auroc, novelty_score, Label, NoveltyRecord};
use object_novelty::Error;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Range = 4,
    NumericalFailure = 5,
    UndefinedMetric = 6,
    Io = 7,
    UnsupportedArchitecture = 8,
    Internal = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> OnStatus {
    match e {
        Error::Config(_) | Error::Split { .. } | Error::Toml(_) | Error::Json(_) | Error::Annotation { .. } => {
            OnStatus::Config
        }
        Error::Range(_) => OnStatus::Range,
        Error::NumericalFailure { .. } => OnStatus::NumericalFailure,
        Error::UndefinedMetric(_) | Error::Aggregation(_) => OnStatus::UndefinedMetric,
        Error::Io(_) | Error::Image(_) | Error::Csv(_) => OnStatus::Io,
        Error::UnsupportedArchitecture(_) => OnStatus::UnsupportedArchitecture,
        Error::Stage { source, .. } => status_of(source),
        Error::Tensor(_) => OnStatus::Internal,
    }
}

struct Fail(OnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> OnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OnStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            OnStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(OnStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(OnStatus::InvalidArgument, format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// A loaded teacher/student pair and the scoring configuration.
pub struct OnScorer {
    teacher: BackboneHandle,
    student: StudentModel,
    cfg: DistillConfig,
    norm: PixelNorm,
    image_size: usize,
}

fn load_teacher(cfg: &RunConfig, path: &Path) -> Result<BackboneHandle, Error> {
    let vit = cfg.vit_config()?;
    let arch = &cfg.backbone.arch;
    // A stage-1 checkpoint stores the backbone under a prefix.
    match BackboneHandle::from_checkpoint(arch, vit.clone(), path, cfg.backbone.pretraining, &Device::Cpu) {
        Ok(b) => Ok(b),
        Err(plain) => {
            let b = BackboneHandle::random(arch, vit, 0, &Device::Cpu)?;
            load_tuned_backbone(&b, path).map_err(|_| plain)?;
            Ok(b)
        }
    }
}

/// Opens a scorer from a TOML run configuration, a teacher checkpoint (plain
/// backbone or stage-1 file) and a student checkpoint.
///
/// # Safety
/// The path arguments must be valid NUL-terminated strings and `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn on_scorer_open(
    config_path: *const c_char,
    teacher_path: *const c_char,
    student_path: *const c_char,
    out: *mut *mut OnScorer,
) -> OnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = RunConfig::from_file(&path_arg(config_path, "config_path")?)?;
        cfg.validate()?;
        let teacher = load_teacher(&cfg, &path_arg(teacher_path, "teacher_path")?)?;
        let student = StudentModel::load(&teacher, &path_arg(student_path, "student_path")?)?;
        let scorer = OnScorer {
            teacher,
            student,
            cfg: cfg.distill.clone(),
            norm: cfg.backbone.pixel_norm,
            image_size: cfg.image_size,
        };
        *out = Box::into_raw(Box::new(scorer));
        Ok(())
    })
}

/// Releases a scorer. Null is ignored.
///
/// # Safety
/// `scorer` must come from [`on_scorer_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn on_scorer_free(scorer: *mut OnScorer) {
    if !scorer.is_null() {
        drop(Box::from_raw(scorer));
    }
}

/// Input side length the scorer expects.
///
/// # Safety
/// `scorer` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn on_scorer_image_size(scorer: *const OnScorer) -> usize {
    scorer.as_ref().map_or(0, |s| s.image_size)
}

/// Scores `batch` normalized CHW float images of `height × width` and
/// writes one novelty score per image to `out_scores`.
///
/// # Safety
/// `pixels` must hold `batch * 3 * height * width` floats and `out_scores`
/// room for `batch` doubles.
#[no_mangle]
pub unsafe extern "C" fn on_scorer_score(
    scorer: *const OnScorer,
    pixels: *const f32,
    batch: usize,
    height: usize,
    width: usize,
    out_scores: *mut f64,
) -> OnStatus {
    guard(|| {
        let s = scorer.as_ref().ok_or_else(|| null("scorer"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if out_scores.is_null() {
            return Err(null("out_scores"));
        }
        if batch == 0 {
            return Err(Fail(OnStatus::InvalidArgument, "empty batch".into()));
        }
        let per = 3 * height * width;
        let all = std::slice::from_raw_parts(pixels, batch * per);
        let imgs: Vec<&[f32]> = all.chunks(per).collect();
        let x = ImageTensor::from_chw(&imgs, height, width, &Device::Cpu)?;
        let scores = novelty_score(&x, &s.teacher, &s.student, &s.cfg)?;
        std::slice::from_raw_parts_mut(out_scores, batch).copy_from_slice(&scores);
        Ok(())
    })
}

/// Loads, resizes and normalizes an image file, then scores it.
///
/// # Safety
/// `image_path` must be a valid NUL-terminated string and `out_score` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn on_scorer_score_file(
    scorer: *const OnScorer,
    image_path: *const c_char,
    out_score: *mut f64,
) -> OnStatus {
    guard(|| {
        let s = scorer.as_ref().ok_or_else(|| null("scorer"))?;
        if out_score.is_null() {
            return Err(null("out_score"));
        }
        let img = load_image(&path_arg(image_path, "image_path")?, s.image_size, &s.norm)?;
        let x = ImageTensor::from_chw(&[img.data.as_slice()], img.height, img.width, &Device::Cpu)?;
        *out_score = novelty_score(&x, &s.teacher, &s.student, &s.cfg)?[0];
        Ok(())
    })
}

/// Rank-based AUROC; `labels[i]` is nonzero for abnormal samples.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn on_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> OnStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() || out.is_null() {
            return Err(null("scores/labels/out"));
        }
        let s = std::slice::from_raw_parts(scores, n);
        let l = std::slice::from_raw_parts(labels, n);
        let records: Vec<NoveltyRecord> = s
            .iter()
            .zip(l)
            .enumerate()
            .map(|(i, (&score, &lab))| {
                let label = if lab != 0 { Label::Abnormal } else { Label::Normal };
                NoveltyRecord::new(i.to_string(), score, label)
            })
            .collect();
        *out = auroc(&records)?;
        Ok(())
    })
}

/// Balanced soft assignment of a row-major `rows × cols` score matrix.
/// Writes the row-stochastic result into `out_q` (same shape) and the final
/// column residual into `out_residual` when it is not null.
///
/// # Safety
/// `scores` and `out_q` must hold `rows * cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn on_sinkhorn(
    scores: *const f64,
    rows: usize,
    cols: usize,
    iterations: u32,
    epsilon: f64,
    out_q: *mut f64,
    out_residual: *mut f64,
) -> OnStatus {
    guard(|| {
        if scores.is_null() || out_q.is_null() {
            return Err(null("scores/out_q"));
        }
        let data = std::slice::from_raw_parts(scores, rows * cols).to_vec();
        let cfg = SinkhornConfig {
            iterations: iterations as usize,
            epsilon,
            tolerance: None,
        };
        let a = sinkhorn(&Matrix::new(rows, cols, data), &cfg)?;
        std::slice::from_raw_parts_mut(out_q, rows * cols).copy_from_slice(&a.q.data);
        if !out_residual.is_null() {
            *out_residual = a.residual;
        }
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length.
///
/// # Safety
/// `buf` must have room for `len` bytes, or be null.
#[no_mangle]
pub unsafe extern "C" fn on_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn on_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
