//! C ABI over the `gaussclust` core.
//!
//! Datasets and models are opaque heap handles released with their `_free`
//! function. Every fallible call returns a [`GcStatus`]; on failure the
//! message is kept per thread and read with [`gc_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gaussclust::datasets::{load_dataset, make_synthetic_shapes, Dataset, DatasetSpec};
use gaussclust::error::Error;
use gaussclust::metrics::report;
use gaussclust::model::{Model, ModelConfig};
use gaussclust::trainer::{final_inference, TrainConfig, Trainer};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    GroundTruthRequired = 5,
    Runtime = 6,
    Panic = 7,
}

/// External clustering scores.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GcReport {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

/// Opaque in-memory image collection.
pub struct GcDataset(Dataset);

/// Opaque clustering network.
pub struct GcModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = message);
}

fn status_of(e: &Error) -> GcStatus {
    match e {
        Error::InvalidConfig(_)
        | Error::Shape(_)
        | Error::TooManyShapes { .. }
        | Error::TooFewSamples { .. }
        | Error::EmptyInput
        | Error::ZeroNorm
        | Error::InvalidAttention(_)
        | Error::Toml(_) => GcStatus::InvalidArgument,
        Error::MissingPath(_) | Error::NoSamples(_) | Error::Decode { .. } | Error::Io(_) | Error::Image(_) => {
            GcStatus::Io
        }
        Error::Checkpoint(_) | Error::CheckpointVersion { .. } | Error::Incompatible(_) => GcStatus::Checkpoint,
        Error::GroundTruthRequired => GcStatus::GroundTruthRequired,
        _ => GcStatus::Runtime,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Core(e)
    }
}

/// Runs `f`, converting errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            GcStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            GcStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(message))) => {
            set_error(message);
            GcStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            GcStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Invalid(format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

fn out_ptr<T>(p: *mut *mut T, what: &'static str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(())
    }
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn gc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Generates the synthetic shapes dataset.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn gc_dataset_synthetic(
    k: usize,
    n_per_class: usize,
    image_size: usize,
    seed: u64,
    out: *mut *mut GcDataset,
) -> GcStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let ds = make_synthetic_shapes(k, n_per_class, image_size, seed)?;
        *out = Box::into_raw(Box::new(GcDataset(ds)));
        Ok(())
    })
}

/// Loads an image folder. With `has_ground_truth`, each subdirectory of
/// `root` is one class.
///
/// # Safety
/// `root` must be a NUL-terminated string and `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn gc_dataset_load_folder(
    root: *const c_char,
    height: usize,
    width: usize,
    grayscale: bool,
    k: usize,
    has_ground_truth: bool,
    out: *mut *mut GcDataset,
) -> GcStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let spec = DatasetSpec {
            root_path: PathBuf::from(str_arg(root, "root")?),
            image_size: [height, width],
            grayscale,
            cluster_count: k,
            has_ground_truth,
            manifest: None,
        };
        *out = Box::into_raw(Box::new(GcDataset(load_dataset(&spec)?)));
        Ok(())
    })
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn gc_dataset_len(ds: *const GcDataset) -> usize {
    ds.as_ref().map(|d| d.0.len()).unwrap_or(0)
}

/// Copies the reference labels into `out` (`len` entries).
///
/// # Safety
/// `ds` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn gc_dataset_labels(ds: *const GcDataset, out: *mut usize, len: usize) -> GcStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let truth = ds.0.ground_truth().ok_or(Error::GroundTruthRequired)?;
        if len != truth.len() {
            return Err(Failure::Invalid(format!("buffer holds {len} labels, dataset has {}", truth.len())));
        }
        ptr::copy_nonoverlapping(truth.labels().as_ptr(), out, len);
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gc_dataset_free(ds: *mut GcDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Fresh small network sized for `ds`.
///
/// # Safety
/// `ds` must be a live handle and `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn gc_model_new_small(ds: *const GcDataset, seed: u64, out: *mut *mut GcModel) -> GcStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        out_ptr(out, "out")?;
        let [h, w] = ds.0.image_size();
        if h != w {
            return Err(Failure::Invalid("the small network needs square images".into()));
        }
        let cfg = ModelConfig::small(h, ds.0.output_channels(), ds.0.cluster_count());
        *out = Box::into_raw(Box::new(GcModel(Model::new(cfg, seed)?)));
        Ok(())
    })
}

/// Network stored in a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn gc_model_load(path: *const c_char, out: *mut *mut GcModel) -> GcStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let path = str_arg(path, "path")?;
        let model = gaussclust::checkpoint::load_model(std::path::Path::new(path))?;
        *out = Box::into_raw(Box::new(GcModel(model)));
        Ok(())
    })
}

/// Number of clusters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn gc_model_cluster_count(model: *const GcModel) -> usize {
    model.as_ref().map(|m| m.0.config().cluster_count).unwrap_or(0)
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gc_model_free(model: *mut GcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Trains `model` in place. `config_toml` holds training settings in the
/// config-file syntax; null or empty keeps the defaults.
///
/// # Safety
/// Handles must be live and `config_toml` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gc_train(model: *mut GcModel, ds: *const GcDataset, config_toml: *const c_char) -> GcStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let model = model.as_mut().ok_or(Failure::Null("model"))?;
        let cfg: TrainConfig = if config_toml.is_null() {
            TrainConfig::default()
        } else {
            toml::from_str(str_arg(config_toml, "config_toml")?).map_err(Error::from)?
        };
        let mut trainer = Trainer::new(&ds.0, model.0.clone(), cfg)?;
        trainer.run()?;
        model.0 = trainer.into_model();
        Ok(())
    })
}

/// Cluster id of every sample, written to `out` (`len` must equal the
/// dataset size).
///
/// # Safety
/// Handles must be live and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn gc_predict(model: *const GcModel, ds: *const GcDataset, out: *mut usize, len: usize) -> GcStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let ds = handle(ds, "dataset")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        if len != ds.0.len() {
            return Err(Failure::Invalid(format!("buffer holds {len} ids, dataset has {}", ds.0.len())));
        }
        let ids = final_inference(&model.0, &ds.0, 100)?;
        ptr::copy_nonoverlapping(ids.as_ptr(), out, len);
        Ok(())
    })
}

/// Scores `n` predicted ids against `n` reference labels.
///
/// # Safety
/// `pred` and `truth` must be valid for `n` reads, `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn gc_evaluate(pred: *const usize, truth: *const usize, n: usize, out: *mut GcReport) -> GcStatus {
    guard(|| {
        if pred.is_null() || truth.is_null() || out.is_null() {
            return Err(Failure::Null("pred, truth or out"));
        }
        let pred = std::slice::from_raw_parts(pred, n);
        let truth = std::slice::from_raw_parts(truth, n);
        let r = report(pred, truth)?;
        *out = GcReport { acc: r.acc, nmi: r.nmi, ari: r.ari };
        Ok(())
    })
}

/// Planar position of a `k`-entry label feature.
///
/// # Safety
/// `l` must be valid for `k` reads; `x` and `y` for one write each.
#[no_mangle]
pub unsafe extern "C" fn gc_map_to_2d(l: *const f64, k: usize, x: *mut f64, y: *mut f64) -> GcStatus {
    guard(|| {
        if l.is_null() || x.is_null() || y.is_null() {
            return Err(Failure::Null("l, x or y"));
        }
        if k == 0 {
            return Err(Failure::Invalid("k must be >= 1".into()));
        }
        let (vx, vy) = gaussclust::viz::map_to_2d(std::slice::from_raw_parts(l, k));
        *x = vx;
        *y = vy;
        Ok(())
    })
}
