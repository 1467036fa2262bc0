//! C interface to the autolabel3d toolkit.
//!
//! Every function returns an [`Al3dStatus`]. On failure the message is kept per
//! thread and read back with [`al3d_last_error_message`]. Handles are opaque
//! non-zero integers; closing an unknown or already closed handle is a no-op.
//!
//! Buffers are row-major `double` arrays whose row widths are the `AL3D_*_STRIDE`
//! constants. Output buffers are written only when the call succeeds.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use autolabel3d::annotator::{annotate_direct, prior_for};
use autolabel3d::app::{dataset_for, run_on};
use autolabel3d::config::Config;
use autolabel3d::dataset::{Dataset, FrameData};
use autolabel3d::geometry::{Box2D, Box3D, Size3, NUM_HEADING_BINS};
use autolabel3d::losses::{loss_2d, loss_2d_norm, loss_3d_box, loss_box2d, Box3dPrediction};
use autolabel3d::pipeline::{export, export_frame_text, FrameLabels};

/// Opaque dataset handle. Zero is never a valid handle.
pub type Al3dHandle = u64;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Al3dStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidHandle = 2,
    InvalidArgument = 3,
    Utf8 = 4,
    Config = 5,
    Dataset = 6,
    Annotation = 7,
    Loss = 8,
    Pipeline = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Row of `al3d_annotate_frame`: object index, ok flag (1 or 0), cx, cy, cz, h, w, l,
/// heading, agreement IoU. Failed rows carry NaN geometry.
pub const AL3D_LABEL_STRIDE: usize = 10;
/// 2D box row: x1, y1, x2, y2.
pub const AL3D_BOX2D_STRIDE: usize = 4;
/// Row of `al3d_eval_losses_2d` output: plain 2D loss, normalized 2D loss, configured 2D loss.
pub const AL3D_LOSS2D_STRIDE: usize = 3;
/// 3D prediction row: cx, cy, cz, h, w, l, 12 heading logits, 12 heading residuals.
pub const AL3D_PRED3D_STRIDE: usize = 30;
const _: () = assert!(AL3D_PRED3D_STRIDE == 6 + 2 * NUM_HEADING_BINS);
/// 3D ground-truth row: cx, cy, cz, h, w, l, heading.
pub const AL3D_BOX3D_STRIDE: usize = 7;
/// Row of `al3d_eval_losses_3d` output: center, size, heading bin, heading residual, weighted total.
pub const AL3D_LOSS3D_STRIDE: usize = 5;

struct Context {
    config: Config,
    dataset: Dataset,
}

fn registry() -> &'static Mutex<HashMap<Al3dHandle, Arc<Context>>> {
    static REG: OnceLock<Mutex<HashMap<Al3dHandle, Arc<Context>>>> = OnceLock::new();
    REG.get_or_init(Default::default)
}

static NEXT_HANDLE: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(Al3dStatus, String);

fn fail<E: std::fmt::Display>(status: Al3dStatus) -> impl FnOnce(E) -> Failure {
    move |e| Failure(status, e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> Al3dStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
        Err(Failure(Al3dStatus::Panic, msg.unwrap_or_else(|| "panic".into())))
    });
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            Al3dStatus::Ok
        }
        Err(Failure(status, msg)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = msg);
            status
        }
    }
}

unsafe fn opt_str(p: *const c_char) -> Result<Option<String>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p).to_str().map(|s| Some(s.to_owned())).map_err(fail(Al3dStatus::Utf8))
}

unsafe fn config_from(toml: *const c_char) -> Result<Config, Failure> {
    let cfg = match opt_str(toml)? {
        Some(text) => Config::from_toml(&text).map_err(fail(Al3dStatus::Config))?,
        None => Config::default(),
    };
    cfg.validate().map_err(fail(Al3dStatus::Config))?;
    Ok(cfg)
}

fn context(h: Al3dHandle) -> Result<Arc<Context>, Failure> {
    let reg = registry().lock().unwrap_or_else(|p| p.into_inner());
    reg.get(&h).cloned().ok_or_else(|| Failure(Al3dStatus::InvalidHandle, format!("no open handle {h}")))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(Al3dStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn frame(ctx: &Context, frame_id: u32) -> Result<&FrameData, Failure> {
    ctx.dataset
        .frames
        .iter()
        .find(|f| f.frame_id == frame_id)
        .ok_or_else(|| Failure(Al3dStatus::InvalidArgument, format!("frame {frame_id} not in dataset")))
}

/// Direct-optimizer labels for every weak label of a frame; failures become `None`.
fn annotate(ctx: &Context, frame: &FrameData) -> Result<FrameLabels, Failure> {
    let cfg = &ctx.config;
    let mut labels = Vec::with_capacity(frame.weak.len());
    for (i, w) in frame.weak.iter().enumerate() {
        let sample = frame.target_sample(i, w).map_err(fail(Al3dStatus::Annotation))?;
        let label = prior_for(&cfg.priors, &w.class_name).and_then(|p| annotate_direct(&sample, &p, &cfg.loss, &cfg.annotator));
        labels.push(label.ok());
    }
    Ok(FrameLabels { frame_id: frame.frame_id, labels })
}

/// Copies the calling thread's last error message, NUL terminated and truncated to
/// `capacity`. Returns the size needed including the terminator.
///
/// # Safety
/// `buf` must be null or valid for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn al3d_last_error_message(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && capacity > 0 {
            let n = bytes.len().min(capacity - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Loads a dataset. `root` null means the configured root, or the synthetic corpus
/// when none is configured. `config_toml` null means defaults.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn al3d_load_dataset(root: *const c_char, config_toml: *const c_char, out: *mut Al3dHandle) -> Al3dStatus {
    guard(|| {
        non_null(out, "out")?;
        let mut config = config_from(config_toml)?;
        if let Some(r) = opt_str(root)? {
            config.dataset.root = Some(PathBuf::from(r));
        }
        let dataset = dataset_for(&config).map_err(fail(Al3dStatus::Dataset))?;
        let h = NEXT_HANDLE.fetch_add(1, Ordering::Relaxed);
        registry().lock().unwrap_or_else(|p| p.into_inner()).insert(h, Arc::new(Context { config, dataset }));
        *out = h;
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn al3d_num_frames(h: Al3dHandle, out: *mut usize) -> Al3dStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = context(h)?.dataset.frames.len();
        Ok(())
    })
}

/// Writes frame ids in dataset order. `out_len` always receives the count; the ids are
/// written only if `capacity` suffices.
///
/// # Safety
/// `ids` must be valid for `capacity` elements; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn al3d_frame_ids(h: Al3dHandle, ids: *mut u32, capacity: usize, out_len: *mut usize) -> Al3dStatus {
    guard(|| {
        non_null(out_len, "out_len")?;
        let ctx = context(h)?;
        let n = ctx.dataset.frames.len();
        *out_len = n;
        if capacity < n {
            return Err(Failure(Al3dStatus::BufferTooSmall, format!("need {n} ids, have room for {capacity}")));
        }
        if n > 0 {
            non_null(ids, "ids")?;
        }
        for (i, f) in ctx.dataset.frames.iter().enumerate() {
            *ids.add(i) = f.frame_id;
        }
        Ok(())
    })
}

/// Annotates every weak label of a frame with the direct optimizer and writes one
/// `AL3D_LABEL_STRIDE` row per label. `out_count` always receives the row count.
///
/// # Safety
/// `rows` must be valid for `capacity * AL3D_LABEL_STRIDE` doubles; `out_count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn al3d_annotate_frame(
    h: Al3dHandle,
    frame_id: u32,
    rows: *mut f64,
    capacity: usize,
    out_count: *mut usize,
) -> Al3dStatus {
    guard(|| {
        non_null(out_count, "out_count")?;
        let ctx = context(h)?;
        let f = frame(&ctx, frame_id)?;
        *out_count = f.weak.len();
        if capacity < f.weak.len() {
            return Err(Failure(Al3dStatus::BufferTooSmall, format!("need {} rows, have room for {capacity}", f.weak.len())));
        }
        let labels = annotate(&ctx, f)?;
        if !labels.labels.is_empty() {
            non_null(rows, "rows")?;
        }
        for (i, l) in labels.labels.iter().enumerate() {
            let row = std::slice::from_raw_parts_mut(rows.add(i * AL3D_LABEL_STRIDE), AL3D_LABEL_STRIDE);
            row.fill(f64::NAN);
            row[0] = i as f64;
            row[1] = 0.0;
            if let Some(l) = l {
                let b = &l.box3d;
                row[1] = 1.0;
                row[2..9].copy_from_slice(&[b.center.x, b.center.y, b.center.z, b.size.h, b.size.w, b.size.l, b.heading]);
                row[9] = l.agreement_iou;
            }
        }
        Ok(())
    })
}

/// As `al3d_annotate_frame`, rendered as a KITTI label file exactly as `export`
/// writes it. `out_len` receives the size needed including the NUL terminator.
///
/// # Safety
/// `buf` must be valid for `capacity` bytes; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn al3d_annotate_frame_text(
    h: Al3dHandle,
    frame_id: u32,
    buf: *mut c_char,
    capacity: usize,
    out_len: *mut usize,
) -> Al3dStatus {
    guard(|| {
        non_null(out_len, "out_len")?;
        let ctx = context(h)?;
        let f = frame(&ctx, frame_id)?;
        let text = export_frame_text(f, &annotate(&ctx, f)?);
        let need = text.len() + 1;
        *out_len = need;
        if capacity < need {
            return Err(Failure(Al3dStatus::BufferTooSmall, format!("need {need} bytes, have {capacity}")));
        }
        non_null(buf, "buf")?;
        std::ptr::copy_nonoverlapping(text.as_ptr(), buf as *mut u8, text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}

/// Per-row 2D box losses between `n` predicted and ground-truth boxes
/// (`AL3D_BOX2D_STRIDE` each), written as `AL3D_LOSS2D_STRIDE` rows.
///
/// # Safety
/// `pred` and `gt` must hold `n * AL3D_BOX2D_STRIDE` doubles; `out` must hold `n * AL3D_LOSS2D_STRIDE`.
#[no_mangle]
pub unsafe extern "C" fn al3d_eval_losses_2d(
    pred: *const f64,
    gt: *const f64,
    n: usize,
    config_toml: *const c_char,
    out: *mut f64,
) -> Al3dStatus {
    guard(|| {
        let cfg = config_from(config_toml)?.loss;
        if n == 0 {
            return Ok(());
        }
        non_null(pred, "pred")?;
        non_null(gt, "gt")?;
        non_null(out, "out")?;
        let p = std::slice::from_raw_parts(pred, n * AL3D_BOX2D_STRIDE);
        let g = std::slice::from_raw_parts(gt, n * AL3D_BOX2D_STRIDE);
        let mut result = Vec::with_capacity(n * AL3D_LOSS2D_STRIDE);
        for i in 0..n {
            let b = |s: &[f64]| {
                let r = &s[i * AL3D_BOX2D_STRIDE..(i + 1) * AL3D_BOX2D_STRIDE];
                Box2D::new(r[0], r[1], r[2], r[3]).map_err(|e| Failure(Al3dStatus::InvalidArgument, format!("row {i}: {e}")))
            };
            let (pb, gb) = (b(p)?, b(g)?);
            let row_err = |e: autolabel3d::losses::LossError| Failure(Al3dStatus::Loss, format!("row {i}: {e}"));
            result.push(loss_2d(&pb, &gb, &cfg).0);
            result.push(loss_2d_norm(&pb, &gb, &cfg).map_err(row_err)?.0);
            result.push(loss_box2d(&pb, &gb, &cfg).map_err(row_err)?.0);
        }
        std::ptr::copy_nonoverlapping(result.as_ptr(), out, result.len());
        Ok(())
    })
}

/// Per-row 3D box losses between `n` predictions (`AL3D_PRED3D_STRIDE`) and
/// ground-truth boxes (`AL3D_BOX3D_STRIDE`), written as `AL3D_LOSS3D_STRIDE` rows.
///
/// # Safety
/// Buffers must hold `n` rows of their respective strides.
#[no_mangle]
pub unsafe extern "C" fn al3d_eval_losses_3d(
    pred: *const f64,
    gt: *const f64,
    n: usize,
    config_toml: *const c_char,
    out: *mut f64,
) -> Al3dStatus {
    guard(|| {
        let cfg = config_from(config_toml)?.loss;
        if n == 0 {
            return Ok(());
        }
        non_null(pred, "pred")?;
        non_null(gt, "gt")?;
        non_null(out, "out")?;
        let p = std::slice::from_raw_parts(pred, n * AL3D_PRED3D_STRIDE);
        let g = std::slice::from_raw_parts(gt, n * AL3D_BOX3D_STRIDE);
        let mut result = Vec::with_capacity(n * AL3D_LOSS3D_STRIDE);
        for i in 0..n {
            let pr = &p[i * AL3D_PRED3D_STRIDE..(i + 1) * AL3D_PRED3D_STRIDE];
            let gr = &g[i * AL3D_BOX3D_STRIDE..(i + 1) * AL3D_BOX3D_STRIDE];
            let k = NUM_HEADING_BINS;
            let prediction = Box3dPrediction {
                center: [pr[0], pr[1], pr[2]].into(),
                size: Size3::new(pr[3], pr[4], pr[5]),
                heading_logits: pr[6..6 + k].try_into().expect("stride"),
                heading_residuals: pr[6 + k..6 + 2 * k].try_into().expect("stride"),
            };
            let truth = Box3D::new([gr[0], gr[1], gr[2]].into(), Size3::new(gr[3], gr[4], gr[5]), gr[6])
                .map_err(|e| Failure(Al3dStatus::InvalidArgument, format!("row {i}: {e}")))?;
            let l = loss_3d_box(&prediction, &truth, &cfg);
            result.extend_from_slice(&[l.center, l.size, l.heading_bin, l.heading_residual, l.total]);
        }
        std::ptr::copy_nonoverlapping(result.as_ptr(), out, result.len());
        Ok(())
    })
}

/// Runs the full pipeline on the handle's dataset and writes `label_2/` and
/// `manifest.toml` under `out_dir`, as the command-line `run` does.
///
/// # Safety
/// `out_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn al3d_export(h: Al3dHandle, out_dir: *const c_char) -> Al3dStatus {
    guard(|| {
        let dir = opt_str(out_dir)?.ok_or_else(|| Failure(Al3dStatus::NullPointer, "out_dir is null".into()))?;
        let ctx = context(h)?;
        let out = run_on(&ctx.config, &ctx.dataset, &mut |_| {}).map_err(fail(Al3dStatus::Pipeline))?;
        export(&PathBuf::from(dir), &ctx.dataset, out.final_labels(), &out.manifest).map_err(fail(Al3dStatus::Pipeline))
    })
}

/// Releases a handle. Unknown and already closed handles are ignored.
#[no_mangle]
pub extern "C" fn al3d_close(h: Al3dHandle) -> Al3dStatus {
    guard(|| {
        registry().lock().unwrap_or_else(|p| p.into_inner()).remove(&h);
        Ok(())
    })
}
