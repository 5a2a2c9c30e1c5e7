//! C ABI for the cbadc library.
//!
//! Objects are opaque handles created by `cbadc_*_new`-style functions and
//! released with the matching `*_free`. Every fallible function returns a
//! [`CbadcStatus`]; on failure the message is available from
//! [`cbadc_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cbadc::analyze::{psd, snr_in_band, DEFAULT_GUARD, DEFAULT_HARMONICS};
use cbadc::design::{design, parallelize, FilterCoefficients};
use cbadc::estimate::{estimate_batch, estimate_mixed, estimate_parallel, EstimateTrace};
use cbadc::model::{build_chain, AnalogSystem, ChainSpec, Readout};
use cbadc::sim::{simulate, ControlSpec, ControlTrace, InputSignal, SimOptions};
use cbadc::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbadcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    /// Riccati solve, matrix inversion or eigen-decomposition failed.
    Numerical = 4,
    /// Stability conditions fail or the states ran away.
    Unstable = 5,
    /// Not enough data, or no tone to measure.
    InsufficientData = 6,
    Format = 7,
    Io = 8,
    /// A Rust panic was caught at the boundary.
    Panic = 9,
    BufferTooSmall = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbadcInputKind {
    Zero = 0,
    Constant = 1,
    Sine = 2,
}

/// Input signal. `value` is the constant level or the sine amplitude;
/// `frequency` (Hz) and `phase` (rad) apply to sines only.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CbadcInput {
    pub kind: CbadcInputKind,
    pub value: f64,
    pub frequency: f64,
    pub phase: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbadcForm {
    Batch = 0,
    Mixed = 1,
    Parallel = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CbadcToneReport {
    pub snr_db: f64,
    pub sndr_db: f64,
    pub sfdr_db: f64,
    pub tone_hz: f64,
    pub tone_amp: f64,
    pub noise_power: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CbadcSimSummary {
    pub max_abs_state: f64,
    pub bound_violations: u64,
}

/// Analog system (opaque).
pub struct CbadcSystem(AnalogSystem);

/// Estimation-filter coefficients (opaque).
pub struct CbadcCoefficients(FilterCoefficients);

/// Control trace (opaque).
pub struct CbadcTrace(ControlTrace);

/// Input estimates (opaque).
pub struct CbadcEstimate(EstimateTrace);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> CbadcStatus {
    match e {
        Error::Dimension(_) => CbadcStatus::Dimension,
        Error::InvalidParameter(_) | Error::NonIntegerDuration | Error::PeriodMismatch { .. } | Error::NonBinaryControls => {
            CbadcStatus::InvalidArgument
        }
        Error::Pole { .. }
        | Error::NotBracketed { .. }
        | Error::NoConvergence { .. }
        | Error::Indefinite { .. }
        | Error::Singular(_)
        | Error::IllConditioned { .. }
        | Error::ImaginaryResidue { .. }
        | Error::OracleDiverged(_) => CbadcStatus::Numerical,
        Error::Runaway { .. } | Error::NotStable(_) => CbadcStatus::Unstable,
        Error::EmptyTrace | Error::TooFewSamples { .. } | Error::NoTone => CbadcStatus::InsufficientData,
        Error::Format(_) | Error::Json(_) => CbadcStatus::Format,
        Error::Io(_) => CbadcStatus::Io,
    }
}

enum Failure {
    Lib(Error),
    Null(&'static str),
    Arg(String),
    Small(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> CbadcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            CbadcStatus::Ok
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            CbadcStatus::NullPointer
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_error(msg);
            CbadcStatus::InvalidArgument
        }
        Ok(Err(Failure::Small(need))) => {
            set_error(format!("buffer too small: {need} elements needed"));
            CbadcStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic".into());
            CbadcStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, capacity: usize) -> Result<(), Failure> {
    if capacity < src.len() {
        return Err(Failure::Small(src.len()));
    }
    if src.is_empty() {
        return Ok(());
    }
    if dst.is_null() {
        return Err(Failure::Null("output buffer"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

fn input_signal(i: &CbadcInput) -> InputSignal {
    match i.kind {
        CbadcInputKind::Zero => InputSignal::Zero,
        CbadcInputKind::Constant => InputSignal::Constant { value: i.value },
        CbadcInputKind::Sine => InputSignal::Sine { amplitude: i.value, frequency: i.frequency, phase: i.phase },
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cbadc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes (without the terminating NUL) of the last error message.
#[no_mangle]
pub extern "C" fn cbadc_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copy the last error message on this thread into `buf` (NUL-terminated,
/// truncated to `len − 1` bytes). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cbadc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Integrator chain with uniform stage gain `beta` and control scale `kappa`,
/// read out at its last state. `feedback` holds the extra first-stage
/// feedback coefficients κ_{1,2}..κ_{1,n} (`feedback_len` is 0 or n − 1).
///
/// # Safety
/// `feedback` must point to `feedback_len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbadc_chain_new(
    n: usize,
    beta: f64,
    kappa: f64,
    feedback: *const f64,
    feedback_len: usize,
    bound: f64,
    out: *mut *mut CbadcSystem,
) -> CbadcStatus {
    guard(|| {
        let mut spec = ChainSpec::uniform(n, beta, kappa);
        spec.feedback = slice(feedback, feedback_len, "feedback")?.to_vec();
        spec.validate()?;
        put(out, CbadcSystem(build_chain(&spec, Readout::LastState, bound)?))
    })
}

/// Analog system from a JSON document: either a chain description
/// (`{"n":…,"beta":[…],"kappa":[…]}`) or the `system` object of a
/// pipeline configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbadc_system_from_json(json: *const c_char, out: *mut *mut CbadcSystem) -> CbadcStatus {
    guard(|| {
        if json.is_null() {
            return Err(Failure::Null("json"));
        }
        let text = CStr::from_ptr(json).to_str().map_err(|_| Failure::Arg("json is not UTF-8".into()))?;
        let sys = match serde_json::from_str::<ChainSpec>(text) {
            Ok(spec) => {
                spec.validate()?;
                build_chain(&spec, Readout::LastState, 1.0)?
            }
            Err(_) => {
                let cfg: cbadc::config::SystemConfig = serde_json::from_str(text).map_err(Error::from)?;
                let wrapper = cbadc::config::PipelineConfig {
                    system: cfg,
                    control: cbadc::config::ControlConfig { t: 1.0, quantizer_bits: None, dither_amplitude: None },
                    design: Default::default(),
                    input: InputSignal::Zero,
                    run: serde_json::from_str(r#"{"periods":1}"#).map_err(Error::from)?,
                    analysis: Default::default(),
                    paths: Default::default(),
                };
                wrapper.system()?
            }
        };
        put(out, CbadcSystem(sys))
    })
}

/// State dimension of a system, 0 for null.
///
/// # Safety
/// `sys` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbadc_system_order(sys: *const CbadcSystem) -> usize {
    sys.as_ref().map_or(0, |s| s.0.order())
}

/// # Safety
/// `sys` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn cbadc_system_free(sys: *mut CbadcSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// η² for an integrator chain with γ = Tβ at oversampling ratio `osr`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbadc_eta2_from_osr(gamma: f64, osr: f64, n: usize, out: *mut f64) -> CbadcStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = cbadc::xfer::eta_from_osr(gamma, osr, n)?.powi(2);
        Ok(())
    })
}

/// Design the estimation filter for estimate period `t_u`.
///
/// # Safety
/// `sys` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbadc_design(
    sys: *const CbadcSystem,
    eta2: f64,
    t_u: f64,
    out: *mut *mut CbadcCoefficients,
) -> CbadcStatus {
    guard(|| {
        let sys = get(sys, "system")?;
        let (c, d) = design(&sys.0, eta2, t_u)?;
        let failed = d.failed_gates();
        if !failed.is_empty() {
            return Err(Failure::Lib(Error::InvalidParameter(format!("design gates failed: {}", failed.join(", ")))));
        }
        put(out, CbadcCoefficients(c))
    })
}

/// Copy the n×k matrix W, row-major, into `buf`.
///
/// # Safety
/// `coeffs` must be a live handle; `buf` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn cbadc_coefficients_w(coeffs: *const CbadcCoefficients, buf: *mut f64, capacity: usize) -> CbadcStatus {
    guard(|| {
        let c = &get(coeffs, "coefficients")?.0;
        let w: Vec<f64> = (0..c.w.nrows()).flat_map(|r| (0..c.w.ncols()).map(move |k| (r, k))).map(|ij| c.w[ij]).collect();
        copy_out(&w, buf, capacity)
    })
}

/// # Safety
/// `coeffs` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn cbadc_coefficients_free(coeffs: *mut CbadcCoefficients) {
    if !coeffs.is_null() {
        drop(Box::from_raw(coeffs));
    }
}

/// Simulate `periods` clock periods with a 1-bit quantizer per state.
/// `summary` may be null.
///
/// # Safety
/// `sys` and `input` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbadc_simulate(
    sys: *const CbadcSystem,
    t: f64,
    input: *const CbadcInput,
    periods: usize,
    seed: u64,
    out: *mut *mut CbadcTrace,
    summary: *mut CbadcSimSummary,
) -> CbadcStatus {
    guard(|| {
        let sys = get(sys, "system")?;
        let input = input_signal(get(input, "input")?);
        let control = ControlSpec { t, quantizer_bits: 1, dither_amplitude: 0.0 };
        let opts = SimOptions { seed, ..Default::default() };
        let (trace, rep) = simulate(&sys.0, &control, &input, periods, &opts)?;
        if let Some(s) = summary.as_mut() {
            s.max_abs_state = rep.max_abs_state.iter().fold(0.0, |a: f64, &v| a.max(v));
            s.bound_violations = rep.bound_violations;
        }
        put(out, CbadcTrace(trace))
    })
}

/// Trace from `len` periods of `n` control values each, row-major.
/// `levels` is the quantizer level count (2 for 1-bit).
///
/// # Safety
/// `data` must point to `len · n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbadc_trace_from_samples(
    t: f64,
    n: usize,
    levels: u32,
    data: *const f64,
    len: usize,
    out: *mut *mut CbadcTrace,
) -> CbadcStatus {
    guard(|| {
        let total = len.checked_mul(n).ok_or_else(|| Failure::Arg("trace size overflows".into()))?;
        let samples = slice(data, total, "data")?.to_vec();
        put(out, CbadcTrace(ControlTrace::new(t, n, levels, samples)?))
    })
}

/// Number of periods in a trace, 0 for null.
///
/// # Safety
/// `trace` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbadc_trace_len(trace: *const CbadcTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.0.len())
}

/// Copy the trace, row-major, into `buf`.
///
/// # Safety
/// `trace` must be a live handle; `buf` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn cbadc_trace_copy(trace: *const CbadcTrace, buf: *mut f64, capacity: usize) -> CbadcStatus {
    guard(|| copy_out(&get(trace, "trace")?.0.samples, buf, capacity))
}

/// # Safety
/// `trace` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn cbadc_trace_free(trace: *mut CbadcTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Estimate the input from a trace. `latency` is used by the mixed form only.
///
/// # Safety
/// `coeffs` and `trace` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbadc_estimate(
    coeffs: *const CbadcCoefficients,
    trace: *const CbadcTrace,
    form: CbadcForm,
    latency: usize,
    out: *mut *mut CbadcEstimate,
) -> CbadcStatus {
    guard(|| {
        let c = &get(coeffs, "coefficients")?.0;
        let t = &get(trace, "trace")?.0;
        let est = match form {
            CbadcForm::Batch => estimate_batch(c, t)?,
            CbadcForm::Mixed => estimate_mixed(c, t, latency)?,
            CbadcForm::Parallel => estimate_parallel(&parallelize(c)?, t)?,
        };
        put(out, CbadcEstimate(est))
    })
}

/// Number of estimate samples (all channels count as one), 0 for null.
///
/// # Safety
/// `est` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbadc_estimate_len(est: *const CbadcEstimate) -> usize {
    est.as_ref().map_or(0, |e| e.0.len())
}

/// Half-open index range of settled estimates.
///
/// # Safety
/// `est` must be a live handle; `start` and `end` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbadc_estimate_valid_range(est: *const CbadcEstimate, start: *mut usize, end: *mut usize) -> CbadcStatus {
    guard(|| {
        let e = &get(est, "estimate")?.0;
        if start.is_null() || end.is_null() {
            return Err(Failure::Null("range output"));
        }
        (*start, *end) = e.valid_range;
        Ok(())
    })
}

/// Copy channel `channel` of the estimate into `buf`.
///
/// # Safety
/// `est` must be a live handle; `buf` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn cbadc_estimate_channel(
    est: *const CbadcEstimate,
    channel: usize,
    buf: *mut f64,
    capacity: usize,
) -> CbadcStatus {
    guard(|| {
        let e = &get(est, "estimate")?.0;
        if channel >= e.k {
            return Err(Failure::Arg(format!("channel {channel} out of range ({} channels)", e.k)));
        }
        copy_out(&e.channel(channel), buf, capacity)
    })
}

/// # Safety
/// `est` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn cbadc_estimate_free(est: *mut CbadcEstimate) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// SNR, SNDR and SFDR of the strongest tone in `[band_lo, band_hi]` Hz,
/// from a Hann-windowed Welch PSD with power-of-two `segment`.
///
/// # Safety
/// `samples` must point to `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbadc_tone_report(
    samples: *const f64,
    len: usize,
    sample_rate: f64,
    segment: usize,
    band_lo: f64,
    band_hi: f64,
    out: *mut CbadcToneReport,
) -> CbadcStatus {
    guard(|| {
        let x = slice(samples, len, "samples")?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let spec = psd(x, sample_rate, segment, 0.5)?;
        let m = snr_in_band(&spec, (band_lo, band_hi), DEFAULT_GUARD, DEFAULT_HARMONICS)?;
        *out = CbadcToneReport {
            snr_db: m.snr_db,
            sndr_db: m.sndr_db,
            sfdr_db: m.sfdr_db,
            tone_hz: m.tone_hz,
            tone_amp: m.tone_amp,
            noise_power: m.noise_power,
        };
        Ok(())
    })
}
