//! C ABI for the switchable quantized network library.
//!
//! Everything crosses the boundary as plain C types: opaque handles with
//! paired create/free functions, status codes instead of panics, and
//! NUL-terminated UTF-8 strings. Out-parameters are written only when a call
//! returns [`RtfqStatus::Ok`]; on failure a human-readable message is parked
//! in a thread-local slot readable through [`rtfq_last_error_message`].
//!
//! The build script renders `include/rtfq.h` with cbindgen, and the test
//! suite compiles and runs a C program against that header to keep the two
//! in sync.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::Path;
use std::slice;

use rtfq_core::adapt::{evaluate, TrainerState};
use rtfq_core::budget::{enumerate_configs, partition_budgets, BudgetAxis};
use rtfq_core::config::{OptimizerChoice, RunConfig};
use rtfq_core::data::{generate_pair, load_dataset, DomainDataset};
use rtfq_core::io::checkpoint::{load_plain, load_trainer, save_plain, save_trainer};
use rtfq_core::numerics::optim::Optimizer;
use rtfq_core::numerics::Tensor;
use rtfq_core::quant::{self, QuantBounds, UnsignedRange};
use rtfq_core::supernet::{build_supernet, export_plain, import_plain, Domain, SubnetConfig};
use rtfq_core::{Error, Result};

/// Outcome of a C API call. Anything other than `Ok` leaves a message in
/// the thread-local error slot.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RtfqStatus {
    /// The call succeeded and all out-parameters were written.
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument violated a documented precondition.
    InvalidArgument = 2,
    /// A structured file (dataset, checkpoint) failed to parse.
    ParseError = 3,
    /// A run configuration was rejected.
    ConfigError = 4,
    /// The operating system reported an I/O failure.
    IoError = 5,
    /// A computation produced a non-finite value.
    NumericError = 6,
    /// A string argument was not valid UTF-8.
    Utf8Error = 7,
}

/// Opaque parsed run description.
///
/// Create with [`rtfq_config_parse`] or [`rtfq_config_load`], destroy with
/// [`rtfq_config_free`].
pub struct RtfqConfig {
    inner: RunConfig,
}

/// Opaque source/target dataset pair.
///
/// Generated pairs keep the held-out target labels for evaluation; datasets
/// loaded from disk carry labels only if the files do. Create with
/// [`rtfq_data_prepare`], destroy with [`rtfq_data_free`].
pub struct RtfqData {
    source: DomainDataset,
    target: DomainDataset,
    target_labels: Option<Vec<u32>>,
}

/// Opaque teacher/student trainer over one elastic network.
///
/// Create with [`rtfq_trainer_new`] or [`rtfq_trainer_load`], destroy with
/// [`rtfq_trainer_free`].
pub struct RtfqTrainer {
    inner: TrainerState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn store_error(msg: impl Into<String>) {
    let mut text = msg.into();
    if text.as_bytes().contains(&0) {
        text = text.replace('\0', " ");
    }
    let c = CString::new(text).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

/// Record the error message and map the library error onto a status code.
fn fail(e: Error) -> RtfqStatus {
    let status = match &e {
        Error::Shape { .. } | Error::Invalid(_) => RtfqStatus::InvalidArgument,
        Error::NonFinite { .. } => RtfqStatus::NumericError,
        Error::Parse { .. } => RtfqStatus::ParseError,
        Error::Config(_) => RtfqStatus::ConfigError,
        Error::Io { .. } => RtfqStatus::IoError,
    };
    store_error(e.to_string());
    status
}

fn null_arg(name: &str) -> RtfqStatus {
    store_error(format!("{name} must not be null"));
    RtfqStatus::NullPointer
}

/// View `len` readable floats, tolerating a null pointer when `len == 0`.
unsafe fn slice_arg<'a>(ptr: *const f32, len: usize) -> Option<&'a [f32]> {
    if len == 0 {
        Some(&[])
    } else if ptr.is_null() {
        None
    } else {
        Some(slice::from_raw_parts(ptr, len))
    }
}

/// View `len` writable floats, tolerating a null pointer when `len == 0`.
unsafe fn slice_arg_mut<'a>(ptr: *mut f32, len: usize) -> Option<&'a mut [f32]> {
    if len == 0 {
        Some(&mut [])
    } else if ptr.is_null() {
        None
    } else {
        Some(slice::from_raw_parts_mut(ptr, len))
    }
}

/// Borrow a NUL-terminated UTF-8 argument, reporting nulls and bad bytes.
unsafe fn str_arg<'a>(ptr: *const c_char, name: &str) -> std::result::Result<&'a str, RtfqStatus> {
    if ptr.is_null() {
        return Err(null_arg(name));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        store_error(format!("{name} must be valid UTF-8"));
        RtfqStatus::Utf8Error
    })
}

fn bounds(bits: u32, is_signed: bool, narrow_unsigned: bool) -> Result<QuantBounds> {
    if is_signed {
        QuantBounds::signed(bits)
    } else if narrow_unsigned {
        QuantBounds::unsigned(bits, UnsignedRange::Narrow)
    } else {
        QuantBounds::unsigned(bits, UnsignedRange::Full)
    }
}

/// Mirrors the CLI's optimizer construction so both front ends drive
/// identical runs.
fn make_optimizer(choice: OptimizerChoice) -> Optimizer {
    match choice {
        OptimizerChoice::Sgd { momentum } => Optimizer::sgd(momentum as f32),
        OptimizerChoice::Adam { beta1, beta2, eps } => {
            Optimizer::adam(beta1 as f32, beta2 as f32, eps as f32)
        }
    }
}

/// Library version as a static NUL-terminated string. Never null; do not
/// free.
#[no_mangle]
pub extern "C" fn rtfq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message from the most recent failing call on this thread, as a
/// NUL-terminated UTF-8 string. Empty before any failure. The pointer stays
/// valid until the next failing call on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn rtfq_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Release a string returned by this library (currently only
/// [`rtfq_plan_json`]). Null is ignored.
///
/// # Safety
///
/// `s` must be a pointer previously returned by this library and not yet
/// freed, or null.
#[no_mangle]
pub unsafe extern "C" fn rtfq_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: ownership round-trips through CString::into_raw.
        drop(CString::from_raw(s));
    }
}

/// Constant scaling the step gradient for a tensor of `len` values:
/// `1 / sqrt(len * upper)` where `upper` is the top of the code range.
///
/// # Safety
///
/// `out` must point to one writable float.
#[no_mangle]
pub unsafe extern "C" fn rtfq_grad_scale(
    len: usize,
    bits: u32,
    is_signed: bool,
    narrow_unsigned: bool,
    out: *mut f32,
) -> RtfqStatus {
    if out.is_null() {
        return null_arg("out");
    }
    let b = match bounds(bits, is_signed, narrow_unsigned) {
        Ok(b) => b,
        Err(e) => return fail(e),
    };
    match quant::grad_scale(len, b) {
        Ok(g) => {
            *out = g;
            RtfqStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Fake-quantize `len` values: divide by `step`, clamp to the code range
/// chosen by `bits`/`is_signed`/`narrow_unsigned`, round ties to even, and
/// rescale. `narrow_unsigned` restricts the unsigned range to
/// `[0, 2^(bits-1)]` and is ignored when `is_signed` is set. In-place
/// operation (`out == values`) is allowed.
///
/// # Safety
///
/// `values` must point to `len` readable floats and `out` to `len` writable
/// floats (either may be null when `len == 0`).
#[no_mangle]
pub unsafe extern "C" fn rtfq_quantize(
    values: *const f32,
    len: usize,
    step: f32,
    bits: u32,
    is_signed: bool,
    narrow_unsigned: bool,
    out: *mut f32,
) -> RtfqStatus {
    let v = match slice_arg(values, len) {
        Some(v) => v,
        None => return null_arg("values"),
    };
    let b = match bounds(bits, is_signed, narrow_unsigned) {
        Ok(b) => b,
        Err(e) => return fail(e),
    };
    // Copy first so the kernel sees a stable input even when out == values.
    let snapshot = v.to_vec();
    let o = match slice_arg_mut(out, len) {
        Some(o) => o,
        None => return null_arg("out"),
    };
    match quant::quantize_slice(&snapshot, step, b, o) {
        Ok(()) => RtfqStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Straight-through gradients of the fake-quantizer: writes `∂L/∂values`
/// (zero where the input clamped) and the scalar `∂L/∂step` accumulated over
/// all positions and scaled by `grad_scale`.
///
/// # Safety
///
/// `values` and `upstream` must each point to `len` readable floats,
/// `grad_values` to `len` writable floats, and `grad_step` to one writable
/// float. The float buffers may be null only when `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn rtfq_quantize_backward(
    values: *const f32,
    len: usize,
    step: f32,
    bits: u32,
    is_signed: bool,
    narrow_unsigned: bool,
    grad_scale: f32,
    upstream: *const f32,
    grad_values: *mut f32,
    grad_step: *mut f32,
) -> RtfqStatus {
    let v = match slice_arg(values, len) {
        Some(v) => v,
        None => return null_arg("values"),
    };
    let dy = match slice_arg(upstream, len) {
        Some(d) => d,
        None => return null_arg("upstream"),
    };
    let gv = match slice_arg_mut(grad_values, len) {
        Some(g) => g,
        None => return null_arg("grad_values"),
    };
    if grad_step.is_null() {
        return null_arg("grad_step");
    }
    let b = match bounds(bits, is_signed, narrow_unsigned) {
        Ok(b) => b,
        Err(e) => return fail(e),
    };
    let run = || -> Result<(Tensor, f32)> {
        let vt = Tensor::new(vec![len], v.to_vec())?;
        let dyt = Tensor::new(vec![len], dy.to_vec())?;
        quant::lsq_backward(&vt, step, b, grad_scale, &dyt)
    };
    match run() {
        Ok((dx, ds)) => {
            gv.copy_from_slice(dx.data());
            *grad_step = ds;
            RtfqStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Parse a run configuration from `key = value` text (same format the `rtfq`
/// command-line tool reads). On success `*out` owns the new handle.
///
/// # Safety
///
/// `text` must be a NUL-terminated string and `out` a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn rtfq_config_parse(
    text: *const c_char,
    out: *mut *mut RtfqConfig,
) -> RtfqStatus {
    if out.is_null() {
        return null_arg("out");
    }
    let text = match str_arg(text, "text") {
        Ok(t) => t,
        Err(status) => return status,
    };
    match RunConfig::parse(text, Path::new("<memory>")) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(RtfqConfig { inner }));
            RtfqStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Load a run configuration from a file. On success `*out` owns the new
/// handle.
///
/// # Safety
///
/// `path` must be a NUL-terminated string and `out` a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn rtfq_config_load(
    path: *const c_char,
    out: *mut *mut RtfqConfig,
) -> RtfqStatus {
    if out.is_null() {
        return null_arg("out");
    }
    let path = match str_arg(path, "path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    match RunConfig::load(Path::new(path)) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(RtfqConfig { inner }));
            RtfqStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Override the run seed, equivalent to the `RTFQ_SEED` environment variable
/// of the command-line tool.
///
/// # Safety
///
/// `config` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn rtfq_config_set_seed(config: *mut RtfqConfig, seed: u64) -> RtfqStatus {
    match config.as_mut() {
        Some(c) => {
            c.inner.seed = seed;
            RtfqStatus::Ok
        }
        None => null_arg("config"),
    }
}

/// Destroy a configuration handle. Null is ignored.
///
/// # Safety
///
/// `config` must be a handle from this library, not yet freed, or null.
#[no_mangle]
pub unsafe extern "C" fn rtfq_config_free(config: *mut RtfqConfig) {
    if !config.is_null() {
        // SAFETY: ownership round-trips through Box::into_raw.
        drop(Box::from_raw(config));
    }
}

/// Cost table and budget partition for the configuration grid, as a JSON
/// document (`axis`, `configs`, `budgets` — the same content the `plan`
/// subcommand writes). On success `*out` owns a NUL-terminated string; free
/// it with [`rtfq_string_free`].
///
/// # Safety
///
/// `config` must be a live handle and `out` a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn rtfq_plan_json(
    config: *const RtfqConfig,
    out: *mut *mut c_char,
) -> RtfqStatus {
    if out.is_null() {
        return null_arg("out");
    }
    let cfg = match config.as_ref() {
        Some(c) => &c.inner,
        None => return null_arg("config"),
    };
    let run = || -> Result<String> {
        let costs = enumerate_configs(&cfg.arch, &cfg.space)?;
        let plan = partition_budgets(&costs, cfg.budget_intervals, BudgetAxis::Macs)?;
        let json = serde_json::json!({
            "axis": "macs",
            "configs": plan.costs.iter().map(|c| serde_json::json!({
                "width": c.config.width,
                "resolution": c.config.resolution,
                "bits": c.config.bits,
                "macs": c.macs,
                "bitops": c.bitops,
                "fp32_bitops_ratio": (c.config.bits * c.config.bits) as f64 / 1024.0,
            })).collect::<Vec<_>>(),
            "budgets": plan.entries.iter().map(|e| serde_json::json!({
                "interval": e.interval,
                "budget": e.budget,
                "admissible": e.admissible.len(),
            })).collect::<Vec<_>>(),
        });
        serde_json::to_string(&json).map_err(|e| Error::invalid(format!("plan encode: {e}")))
    };
    match run() {
        Ok(text) => match CString::new(text) {
            Ok(c) => {
                *out = c.into_raw();
                RtfqStatus::Ok
            }
            Err(_) => {
                store_error("plan JSON contained an interior NUL byte");
                RtfqStatus::InvalidArgument
            }
        },
        Err(e) => fail(e),
    }
}

/// Build the source/target dataset pair the configuration describes: loaded
/// from `source_path`/`target_path` when both are set, otherwise generated
/// from the seed. On success `*out` owns the new handle.
///
/// # Safety
///
/// `config` must be a live handle and `out` a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn rtfq_data_prepare(
    config: *const RtfqConfig,
    out: *mut *mut RtfqData,
) -> RtfqStatus {
    if out.is_null() {
        return null_arg("out");
    }
    let cfg = match config.as_ref() {
        Some(c) => &c.inner,
        None => return null_arg("config"),
    };
    let run = || -> Result<RtfqData> {
        if let (Some(sp), Some(tp)) = (&cfg.source_path, &cfg.target_path) {
            let source = load_dataset(sp, Domain::Source)?;
            let target = load_dataset(tp, Domain::Target)?;
            let target_labels = target.labels.clone();
            Ok(RtfqData {
                source,
                target,
                target_labels,
            })
        } else {
            let (source, target, labels) = generate_pair(
                cfg.classes as u32,
                cfg.source_size,
                cfg.target_size,
                &cfg.shift,
                cfg.seed,
            )?;
            Ok(RtfqData {
                source,
                target,
                target_labels: Some(labels),
            })
        }
    };
    match run() {
        Ok(data) => {
            *out = Box::into_raw(Box::new(data));
            RtfqStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Destroy a dataset handle. Null is ignored.
///
/// # Safety
///
/// `data` must be a handle from this library, not yet freed, or null.
#[no_mangle]
pub unsafe extern "C" fn rtfq_data_free(data: *mut RtfqData) {
    if !data.is_null() {
        // SAFETY: ownership round-trips through Box::into_raw.
        drop(Box::from_raw(data));
    }
}

/// Build a fresh trainer (elastic network, teacher copy, optimizer) from a
/// configuration. On success `*out` owns the new handle.
///
/// # Safety
///
/// `config` must be a live handle and `out` a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn rtfq_trainer_new(
    config: *const RtfqConfig,
    out: *mut *mut RtfqTrainer,
) -> RtfqStatus {
    if out.is_null() {
        return null_arg("out");
    }
    let cfg = match config.as_ref() {
        Some(c) => &c.inner,
        None => return null_arg("config"),
    };
    let run = || -> Result<TrainerState> {
        let net = build_supernet(&cfg.arch, &cfg.space, cfg.unsigned_range, cfg.seed)?;
        TrainerState::new(
            net,
            cfg.weights,
            cfg.sampling,
            cfg.k_random,
            cfg.ema,
            cfg.lr,
            make_optimizer(cfg.optimizer),
            cfg.seed,
        )
    };
    match run() {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(RtfqTrainer { inner }));
            RtfqStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Destroy a trainer handle. Null is ignored.
///
/// # Safety
///
/// `trainer` must be a handle from this library, not yet freed, or null.
#[no_mangle]
pub unsafe extern "C" fn rtfq_trainer_free(trainer: *mut RtfqTrainer) {
    if !trainer.is_null() {
        // SAFETY: ownership round-trips through Box::into_raw.
        drop(Box::from_raw(trainer));
    }
}

/// Run `epochs` passes of labeled source warmup with the given batch size.
/// At the end the teacher is a bit-exact copy of the student.
///
/// # Safety
///
/// `trainer` and `data` must be live handles from this library.
#[no_mangle]
pub unsafe extern "C" fn rtfq_trainer_warmup(
    trainer: *mut RtfqTrainer,
    data: *const RtfqData,
    epochs: u64,
    batch: usize,
) -> RtfqStatus {
    let t = match trainer.as_mut() {
        Some(t) => t,
        None => return null_arg("trainer"),
    };
    let d = match data.as_ref() {
        Some(d) => d,
        None => return null_arg("data"),
    };
    match t
        .inner
        .run_warmup(&d.source, epochs, batch, &mut |_, _| Ok(()))
    {
        Ok(()) => RtfqStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Run `epochs` passes of adaptation, pairing labeled source batches with
/// unlabeled target batches. Requires a completed warmup.
///
/// # Safety
///
/// `trainer` and `data` must be live handles from this library.
#[no_mangle]
pub unsafe extern "C" fn rtfq_trainer_adapt(
    trainer: *mut RtfqTrainer,
    data: *const RtfqData,
    epochs: u64,
    batch: usize,
) -> RtfqStatus {
    let t = match trainer.as_mut() {
        Some(t) => t,
        None => return null_arg("trainer"),
    };
    let d = match data.as_ref() {
        Some(d) => d,
        None => return null_arg("data"),
    };
    match t
        .inner
        .run_adapt(&d.source, &d.target, epochs, batch, &mut |_, _| Ok(()))
    {
        Ok(()) => RtfqStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Top-1 accuracy of the student at one configuration (`width`,
/// `resolution`, `bits`), evaluated on the target split when
/// `target_domain` is set and on the source split otherwise. Fails with
/// `InvalidArgument` when the requested split carries no labels.
///
/// # Safety
///
/// `trainer` and `data` must be live handles and `out_accuracy` a writable
/// pointer to one double.
#[no_mangle]
pub unsafe extern "C" fn rtfq_trainer_evaluate(
    trainer: *const RtfqTrainer,
    data: *const RtfqData,
    width: f64,
    resolution: u32,
    bits: u32,
    target_domain: bool,
    batch: usize,
    out_accuracy: *mut f64,
) -> RtfqStatus {
    let t = match trainer.as_ref() {
        Some(t) => t,
        None => return null_arg("trainer"),
    };
    let d = match data.as_ref() {
        Some(d) => d,
        None => return null_arg("data"),
    };
    if out_accuracy.is_null() {
        return null_arg("out_accuracy");
    }
    let run = || -> Result<f64> {
        let config = SubnetConfig {
            width,
            resolution,
            bits,
        };
        if target_domain {
            let labels = d.target_labels.as_ref().ok_or_else(|| {
                Error::invalid("target labels are unknown; provide a labeled target dataset")
            })?;
            evaluate(
                &t.inner.student,
                &d.target,
                labels,
                &config,
                Domain::Target,
                batch,
            )
        } else {
            let labels = d
                .source
                .labels
                .as_ref()
                .ok_or_else(|| Error::invalid("source dataset is unlabeled"))?;
            evaluate(
                &t.inner.student,
                &d.source,
                labels,
                &config,
                Domain::Source,
                batch,
            )
        }
    };
    match run() {
        Ok(acc) => {
            *out_accuracy = acc;
            RtfqStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Number of optimizer steps taken over the trainer's lifetime.
///
/// # Safety
///
/// `trainer` must be a live handle and `out` a writable pointer to one
/// 64-bit integer.
#[no_mangle]
pub unsafe extern "C" fn rtfq_trainer_global_step(
    trainer: *const RtfqTrainer,
    out: *mut u64,
) -> RtfqStatus {
    let t = match trainer.as_ref() {
        Some(t) => t,
        None => return null_arg("trainer"),
    };
    if out.is_null() {
        return null_arg("out");
    }
    *out = t.inner.global_step;
    RtfqStatus::Ok
}

/// Write the full trainer state (both networks, optimizer moments, RNG,
/// phase counters) to a checkpoint file. A later [`rtfq_trainer_load`]
/// resumes bit-exactly.
///
/// # Safety
///
/// `trainer` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rtfq_trainer_save(
    trainer: *const RtfqTrainer,
    path: *const c_char,
) -> RtfqStatus {
    let t = match trainer.as_ref() {
        Some(t) => t,
        None => return null_arg("trainer"),
    };
    let path = match str_arg(path, "path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    match save_trainer(Path::new(path), &t.inner) {
        Ok(()) => RtfqStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Restore a trainer from a checkpoint file. On success `*out` owns the new
/// handle.
///
/// # Safety
///
/// `path` must be a NUL-terminated string and `out` a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn rtfq_trainer_load(
    path: *const c_char,
    out: *mut *mut RtfqTrainer,
) -> RtfqStatus {
    if out.is_null() {
        return null_arg("out");
    }
    let path = match str_arg(path, "path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    match load_trainer(Path::new(path)) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(RtfqTrainer { inner }));
            RtfqStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Extract the student's width-1.0 view as a plain (non-switchable,
/// unquantized) network — conv and head weights plus source-domain
/// batch-norm state — and write it to a file.
///
/// # Safety
///
/// `trainer` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rtfq_trainer_export_plain(
    trainer: *const RtfqTrainer,
    path: *const c_char,
) -> RtfqStatus {
    let t = match trainer.as_ref() {
        Some(t) => t,
        None => return null_arg("trainer"),
    };
    let path = match str_arg(path, "path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    let run = || -> Result<()> {
        let plain = export_plain(&t.inner.student, Domain::Source)?;
        save_plain(Path::new(path), &plain)
    };
    match run() {
        Ok(()) => RtfqStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Seed the trainer from a plain-weights file: the student inherits the
/// weights (quantizer steps re-derived from them) and the teacher becomes a
/// bit-exact copy of the student.
///
/// # Safety
///
/// `trainer` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rtfq_trainer_import_plain(
    trainer: *mut RtfqTrainer,
    path: *const c_char,
) -> RtfqStatus {
    let t = match trainer.as_mut() {
        Some(t) => t,
        None => return null_arg("trainer"),
    };
    let path = match str_arg(path, "path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    let mut run = || -> Result<()> {
        let plain = load_plain(Path::new(path))?;
        import_plain(&mut t.inner.student, &plain)?;
        t.inner.teacher = t.inner.student.clone();
        Ok(())
    };
    match run() {
        Ok(()) => RtfqStatus::Ok,
        Err(e) => fail(e),
    }
}
