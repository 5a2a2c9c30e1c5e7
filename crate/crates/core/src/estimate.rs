//! Input estimation from control traces.
//!
//! Three equivalent filter organizations are provided: the batch
//! forward/backward recursion, a streaming mixed IIR/FIR filter with fixed
//! latency (and its pure FIR variant), and a fully parallel form of decoupled
//! complex scalar recursions. A finite-step discrete-time Kalman smoother
//! serves as an independent reference.

use nalgebra::DVector;
use num_complex::Complex64;

use crate::design::{lookup_index, FilterCoefficients, ParallelForm};
use crate::error::{Error, Result};
use crate::linalg::{expm, spectral_norm, Mat};
use crate::model::AnalogSystem;
use crate::sim::ControlTrace;

/// Boundary effects are considered gone once the recursion matrices have
/// decayed below this spectral norm.
pub const BOUNDARY_TOL: f64 = 1e-12;
/// Backward-pass block length (in clock periods) for the blocked batch form.
pub const BACKWARD_BLOCK: usize = 1 << 16;
const MAX_SETTLE: usize = 1 << 22;

/// Estimated input samples `û(t_j)`, `t_j = j T_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateTrace {
    pub t_u: f64,
    /// Number of input channels.
    pub k: usize,
    /// Row-major, `len() × k`.
    pub samples: Vec<f64>,
    /// Half-open index range where boundary effects are below tolerance.
    pub valid_range: (usize, usize),
}

impl EstimateTrace {
    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.samples.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, j: usize) -> &[f64] {
        &self.samples[j * self.k..(j + 1) * self.k]
    }

    /// One channel as a contiguous series.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.samples.iter().skip(c).step_by(self.k).copied().collect()
    }

    /// Channel `c` restricted to the valid range.
    pub fn valid_channel(&self, c: usize) -> Vec<f64> {
        let (a, b) = self.valid_range;
        (a..b).map(|j| self.samples[j * self.k + c]).collect()
    }

    pub fn sample_rate(&self) -> f64 {
        1.0 / self.t_u
    }
}

/// Forward and backward mean messages at one time index.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherState {
    pub m_f: DVector<f64>,
    pub m_b: DVector<f64>,
}

impl SmootherState {
    pub fn zeros(n: usize) -> Self {
        Self { m_f: DVector::zeros(n), m_b: DVector::zeros(n) }
    }
}

/// Row-major dense matrix for the inner loops.
#[derive(Debug, Clone)]
struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    fn from(m: &Mat) -> Self {
        let (rows, cols) = m.shape();
        Self { rows, cols, data: (0..rows * cols).map(|i| m[(i / cols, i % cols)]).collect() }
    }

    /// `out = self · x (+ out if accumulate)`.
    #[inline]
    fn mul_into(&self, x: &[f64], out: &mut [f64], accumulate: bool) {
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = if accumulate { out[i] } else { 0.0 };
            for j in 0..self.cols {
                acc += row[j] * x[j];
            }
            out[i] = acc;
        }
    }
}

/// Number of estimate samples per clock period.
fn replication(t: f64, t_u: f64) -> Result<usize> {
    let c = (t / t_u).round();
    if !(c >= 1.0) || (c * t_u - t).abs() > 1e-9 * t {
        return Err(Error::PeriodMismatch { t, t_u });
    }
    Ok(c as usize)
}

fn check_trace(coeffs: &FilterCoefficients, trace: &ControlTrace) -> Result<usize> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    if trace.n != coeffs.controls() {
        return Err(Error::Dimension(format!(
            "trace has {} controls, coefficients expect {}",
            trace.n,
            coeffs.controls()
        )));
    }
    replication(trace.t, coeffs.t_u)
}

/// Smallest `L` with `‖M^L‖₂ < tol` for every `M` in `mats`.
pub fn decay_length(mats: &[&Mat], tol: f64) -> Result<usize> {
    let mut powers: Vec<Mat> = mats.iter().map(|m| Mat::identity(m.nrows(), m.ncols())).collect();
    for l in 0..=MAX_SETTLE {
        if powers.iter().all(|p| spectral_norm(p) < tol) {
            return Ok(l);
        }
        for (p, m) in powers.iter_mut().zip(mats) {
            *p = *m * &*p;
        }
    }
    Err(Error::InvalidParameter(format!("recursion matrices do not decay below {tol:e} within {MAX_SETTLE} steps")))
}

/// Boundary length `L*` (in estimate samples) of the batch form.
pub fn settle_length(coeffs: &FilterCoefficients) -> Result<usize> {
    decay_length(&[&coeffs.af, &coeffs.ab], BOUNDARY_TOL)
}

fn valid_range(len: usize, settle: usize) -> (usize, usize) {
    if 2 * settle >= len {
        (0, 0)
    } else {
        (settle, len - settle)
    }
}

struct BatchKernel {
    n: usize,
    k: usize,
    af: Dense,
    bf: Dense,
    ab: Dense,
    bb: Dense,
    wt: Dense,
}

impl BatchKernel {
    fn new(coeffs: &FilterCoefficients) -> Self {
        Self {
            n: coeffs.order(),
            k: coeffs.inputs(),
            af: Dense::from(&coeffs.af),
            bf: Dense::from(&coeffs.bf),
            ab: Dense::from(&coeffs.ab),
            bb: Dense::from(&coeffs.bb),
            wt: Dense::from(&coeffs.w.transpose()),
        }
    }

    /// Writes `−Wᵀ m_f(j)` into `out` for every sample.
    fn forward(&self, trace: &ControlTrace, c: usize, out: &mut [f64]) {
        let (n, k) = (self.n, self.k);
        let mut m = vec![0.0; n];
        let mut next = vec![0.0; n];
        let mut proj = vec![0.0; k];
        for j in 0..out.len() / k {
            self.wt.mul_into(&m, &mut proj, false);
            for (o, p) in out[j * k..(j + 1) * k].iter_mut().zip(&proj) {
                *o = -p;
            }
            self.af.mul_into(&m, &mut next, false);
            self.bf.mul_into(trace.get(j / c), &mut next, true);
            std::mem::swap(&mut m, &mut next);
        }
    }

    /// Adds `Wᵀ m_b(j)` for `j ∈ [lo, hi)`, starting the recursion from
    /// `m_b(end) = 0`.
    fn backward(&self, trace: &ControlTrace, c: usize, out: &mut [f64], lo: usize, hi: usize, end: usize) {
        let (n, k) = (self.n, self.k);
        let mut m = vec![0.0; n];
        let mut next = vec![0.0; n];
        let mut proj = vec![0.0; k];
        for j in (lo..end).rev() {
            self.ab.mul_into(&m, &mut next, false);
            self.bb.mul_into(trace.get(j / c), &mut next, true);
            std::mem::swap(&mut m, &mut next);
            if j < hi {
                self.wt.mul_into(&m, &mut proj, false);
                for (o, p) in out[j * k..(j + 1) * k].iter_mut().zip(&proj) {
                    *o += p;
                }
            }
        }
    }
}

/// Batch forward/backward estimate with `m_f(0) = 0` and `m_b(N) = 0`.
///
/// When the trace's clock period is `c · T_u` each control is held for `c`
/// estimate samples.
pub fn estimate_batch(coeffs: &FilterCoefficients, trace: &ControlTrace) -> Result<EstimateTrace> {
    let c = check_trace(coeffs, trace)?;
    let settle = settle_length(coeffs)?;
    let kernel = BatchKernel::new(coeffs);
    let len = trace.len() * c;
    let mut out = vec![0.0; len * kernel.k];
    kernel.forward(trace, c, &mut out);
    kernel.backward(trace, c, &mut out, 0, len, len);
    Ok(EstimateTrace { t_u: coeffs.t_u, k: kernel.k, samples: out, valid_range: valid_range(len, settle) })
}

/// Batch estimate whose backward pass runs over blocks of `block_periods`
/// clock periods, each restarted from zero `2 L*` samples past its end.
pub fn estimate_batch_blocked(
    coeffs: &FilterCoefficients,
    trace: &ControlTrace,
    block_periods: usize,
) -> Result<EstimateTrace> {
    let c = check_trace(coeffs, trace)?;
    if block_periods == 0 {
        return Err(Error::InvalidParameter("block length must be positive".into()));
    }
    let settle = settle_length(coeffs)?;
    let kernel = BatchKernel::new(coeffs);
    let len = trace.len() * c;
    let mut out = vec![0.0; len * kernel.k];
    kernel.forward(trace, c, &mut out);
    let block = block_periods * c;
    let mut lo = 0;
    while lo < len {
        let hi = (lo + block).min(len);
        let end = (hi + 2 * settle).min(len);
        kernel.backward(trace, c, &mut out, lo, hi, end);
        lo = hi;
    }
    Ok(EstimateTrace { t_u: coeffs.t_u, k: kernel.k, samples: out, valid_range: valid_range(len, settle) })
}

/// Mixed-filter impulse response `h̃_ℓ = Wᵀ A_b^ℓ B_b`, `ℓ = 0..=L`.
pub fn backward_taps(coeffs: &FilterCoefficients, latency: usize) -> Vec<Mat> {
    let wt = coeffs.w.transpose();
    let mut p = coeffs.bb.clone();
    let mut taps = Vec::with_capacity(latency + 1);
    for _ in 0..=latency {
        taps.push(&wt * &p);
        p = &coeffs.ab * p;
    }
    taps
}

/// FIR expansion of the forward term, `Wᵀ A_f^{ℓ−1} B_f`, `ℓ = 1..=L_f`.
pub fn forward_taps(coeffs: &FilterCoefficients, lookback: usize) -> Vec<Mat> {
    let wt = coeffs.w.transpose();
    let mut p = coeffs.bf.clone();
    let mut taps = Vec::with_capacity(lookback);
    for _ in 0..lookback {
        taps.push(&wt * &p);
        p = &coeffs.af * p;
    }
    taps
}

fn matrix_power(m: &Mat, e: usize) -> Mat {
    let mut result = Mat::identity(m.nrows(), m.ncols());
    let mut base = m.clone();
    let mut e = e;
    while e > 0 {
        if e & 1 == 1 {
            result = &result * &base;
        }
        base = &base * &base;
        e >>= 1;
    }
    result
}

/// Nominal mixed-filter tolerance `‖A_b^{L+1}‖₂ ‖W‖₂ √n`.
pub fn mixed_tolerance(coeffs: &FilterCoefficients, latency: usize) -> f64 {
    spectral_norm(&matrix_power(&coeffs.ab, latency + 1)) * spectral_norm(&coeffs.w) * (coeffs.order() as f64).sqrt()
}

/// Bound on `sup ‖Σ_{ℓ≥0} M^ℓ B s_ℓ‖₂` over controls in `[−1, 1]`.
fn message_bound(m: &Mat, b: &Mat) -> f64 {
    let scale = (b.ncols() as f64).sqrt();
    let mut p = b.clone();
    let mut total = 0.0;
    for _ in 0..MAX_SETTLE {
        let term = spectral_norm(&p);
        total += term;
        if term <= 1e-18 * total {
            break;
        }
        p = m * p;
    }
    total * scale
}

/// Worst-case truncation error of the mixed filter with latency `L` for
/// controls in `[−1, 1]`: `‖Wᵀ A_b^{L+1}‖₂ · sup ‖m_b‖₂`.
pub fn mixed_truncation_bound(coeffs: &FilterCoefficients, latency: usize) -> f64 {
    let tail = coeffs.w.transpose() * matrix_power(&coeffs.ab, latency + 1);
    spectral_norm(&tail) * message_bound(&coeffs.ab, &coeffs.bb)
}

/// Same bound for the forward term truncated to `L_f` taps.
pub fn fir_truncation_bound(coeffs: &FilterCoefficients, lookback: usize) -> f64 {
    let tail = coeffs.w.transpose() * matrix_power(&coeffs.af, lookback);
    spectral_norm(&tail) * message_bound(&coeffs.af, &coeffs.bf)
}

/// Streaming mixed IIR/FIR estimator: forward IIR plus an `L+1`-tap FIR on
/// the future controls.
#[derive(Debug, Clone)]
pub struct MixedEstimator {
    latency: usize,
    k: usize,
    af: Dense,
    bf: Dense,
    wt: Dense,
    /// Taps, each `k × p`.
    taps: Vec<Dense>,
    /// Last `L + 1` controls, oldest first.
    window: std::collections::VecDeque<Vec<f64>>,
    m_f: Vec<f64>,
    scratch: Vec<f64>,
}

impl MixedEstimator {
    pub fn new(coeffs: &FilterCoefficients, latency: usize) -> Result<Self> {
        if latency < 1 {
            return Err(Error::InvalidParameter("latency must be at least 1".into()));
        }
        let n = coeffs.order();
        Ok(Self {
            latency,
            k: coeffs.inputs(),
            af: Dense::from(&coeffs.af),
            bf: Dense::from(&coeffs.bf),
            wt: Dense::from(&coeffs.w.transpose()),
            taps: backward_taps(coeffs, latency).iter().map(Dense::from).collect(),
            window: std::collections::VecDeque::with_capacity(latency + 1),
            m_f: vec![0.0; n],
            scratch: vec![0.0; n],
        })
    }

    /// Feed `s(t_{k+L})`; returns `û(t_k)` once `L + 1` controls are buffered.
    pub fn push(&mut self, s: &[f64]) -> Option<Vec<f64>> {
        self.window.push_back(s.to_vec());
        if self.window.len() <= self.latency {
            return None;
        }
        let mut u = vec![0.0; self.k];
        self.wt.mul_into(&self.m_f, &mut u, false);
        for v in u.iter_mut() {
            *v = -*v;
        }
        for (tap, sl) in self.taps.iter().zip(&self.window) {
            tap.mul_into(sl, &mut u, true);
        }
        let oldest = self.window.pop_front().expect("window is full");
        self.af.mul_into(&self.m_f, &mut self.scratch, false);
        self.bf.mul_into(&oldest, &mut self.scratch, true);
        std::mem::swap(&mut self.m_f, &mut self.scratch);
        Some(u)
    }
}

/// Mixed IIR/FIR estimate with latency `L` (requires `T_u = T`). Produces
/// `û(t_k)` for `k = 0..len−L`.
pub fn estimate_mixed(coeffs: &FilterCoefficients, trace: &ControlTrace, latency: usize) -> Result<EstimateTrace> {
    if check_trace(coeffs, trace)? != 1 {
        return Err(Error::PeriodMismatch { t: trace.t, t_u: coeffs.t_u });
    }
    let mut est = MixedEstimator::new(coeffs, latency)?;
    let k = coeffs.inputs();
    let len = trace.len().saturating_sub(latency);
    let mut out = Vec::with_capacity(len * k);
    for j in 0..trace.len() {
        if let Some(u) = est.push(trace.get(j)) {
            out.extend_from_slice(&u);
        }
    }
    let settle = decay_length(&[&coeffs.af], BOUNDARY_TOL)?;
    let valid = if settle < len { (settle, len) } else { (0, 0) };
    Ok(EstimateTrace { t_u: coeffs.t_u, k, samples: out, valid_range: valid })
}

/// Pure FIR estimate: `L_f` past taps and `L + 1` future taps.
pub fn estimate_fir(
    coeffs: &FilterCoefficients,
    trace: &ControlTrace,
    lookback: usize,
    latency: usize,
) -> Result<EstimateTrace> {
    if check_trace(coeffs, trace)? != 1 {
        return Err(Error::PeriodMismatch { t: trace.t, t_u: coeffs.t_u });
    }
    if latency < 1 || lookback < 1 {
        return Err(Error::InvalidParameter("latency and lookback must be at least 1".into()));
    }
    let k = coeffs.inputs();
    let past: Vec<Dense> = forward_taps(coeffs, lookback).iter().map(Dense::from).collect();
    let future: Vec<Dense> = backward_taps(coeffs, latency).iter().map(Dense::from).collect();
    let len = trace.len().saturating_sub(latency);
    let mut out = vec![0.0; len * k];
    let mut neg = vec![0.0; k];
    for j in 0..len {
        let u = &mut out[j * k..(j + 1) * k];
        neg.iter_mut().for_each(|v| *v = 0.0);
        for (l, tap) in past.iter().enumerate() {
            if j > l {
                tap.mul_into(trace.get(j - l - 1), &mut neg, true);
            }
        }
        for (l, tap) in future.iter().enumerate() {
            tap.mul_into(trace.get(j + l), u, true);
        }
        for (o, v) in u.iter_mut().zip(&neg) {
            *o -= v;
        }
    }
    let valid = if lookback < len { (lookback, len) } else { (0, 0) };
    Ok(EstimateTrace { t_u: coeffs.t_u, k, samples: out, valid_range: valid })
}

/// How the parallel form evaluates `Q^{-1} B s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LookupMode {
    /// Tables when present and the trace is binary.
    #[default]
    Auto,
    Always,
    Never,
}

pub fn estimate_parallel(pform: &ParallelForm, trace: &ControlTrace) -> Result<EstimateTrace> {
    estimate_parallel_with(pform, trace, LookupMode::Auto)
}

/// Fully parallel estimate from decoupled complex scalar recursions.
pub fn estimate_parallel_with(pform: &ParallelForm, trace: &ControlTrace, mode: LookupMode) -> Result<EstimateTrace> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let n = pform.order();
    let k = pform.wf.ncols();
    if trace.n != pform.qf_inv_bf.ncols() {
        return Err(Error::Dimension("trace controls do not match the parallel form".into()));
    }
    let c = replication(trace.t, pform.t_u)?;
    let use_lookup = match mode {
        LookupMode::Never => false,
        LookupMode::Always => {
            if pform.lookup.is_none() {
                return Err(Error::InvalidParameter("parallel form has no lookup tables".into()));
            }
            if !trace.is_binary() {
                return Err(Error::NonBinaryControls);
            }
            true
        }
        LookupMode::Auto => pform.lookup.is_some() && trace.is_binary(),
    };
    let periods = trace.len();
    // Per-period drive vectors, shared by all `c` sub-samples.
    let drive = |m: &nalgebra::DMatrix<Complex64>, table: Option<&Vec<DVector<Complex64>>>| -> Result<Vec<Complex64>> {
        let mut out = Vec::with_capacity(periods * n);
        for j in 0..periods {
            let s = trace.get(j);
            match table {
                Some(t) => out.extend(t[lookup_index(s)?].iter().copied()),
                None => {
                    for i in 0..n {
                        out.push((0..s.len()).map(|l| m[(i, l)] * s[l]).sum());
                    }
                }
            }
        }
        Ok(out)
    };
    let tables = pform.lookup.as_ref().filter(|_| use_lookup);
    let f_drive = drive(&pform.qf_inv_bf, tables.map(|t| &t.forward))?;
    let b_drive = drive(&pform.qb_inv_bb, tables.map(|t| &t.backward))?;

    let len = periods * c;
    let mut acc = vec![Complex64::new(0.0, 0.0); len * k];
    let mut m = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..len {
        let d = &f_drive[(j / c) * n..(j / c + 1) * n];
        for i in 0..n {
            for ch in 0..k {
                acc[j * k + ch] += pform.wf[(i, ch)] * m[i];
            }
            m[i] = pform.lambda_f[i] * m[i] + d[i];
        }
    }
    m.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
    for j in (0..len).rev() {
        let d = &b_drive[(j / c) * n..(j / c + 1) * n];
        for i in 0..n {
            m[i] = pform.lambda_b[i] * m[i] + d[i];
            for ch in 0..k {
                acc[j * k + ch] += pform.wb[(i, ch)] * m[i];
            }
        }
    }
    let peak = acc.iter().fold(0.0f64, |p, v| p.max(v.re.abs()));
    let imag = acc.iter().fold(0.0f64, |p, v| p.max(v.im.abs()));
    if imag > 1e-9 * peak.max(f64::MIN_POSITIVE) && imag > 0.0 {
        return Err(Error::ImaginaryResidue { ratio: imag / peak });
    }
    let lam_decay = |l: &[Complex64]| l.iter().fold(0.0f64, |p, v| p.max(v.norm()));
    let rate = lam_decay(&pform.lambda_f).max(lam_decay(&pform.lambda_b));
    let settle = if rate < 1.0 { (BOUNDARY_TOL.ln() / rate.ln()).ceil() as usize } else { len };
    Ok(EstimateTrace { t_u: pform.t_u, k, samples: acc.iter().map(|v| v.re).collect(), valid_range: valid_range(len, settle) })
}

/// Result of the discrete-time smoother.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub estimate: EstimateTrace,
    /// Steady-state forward and backward posterior covariances (normalized
    /// by the input variance).
    pub vf: Mat,
    pub vb: Mat,
    /// Δ-steps taken to reach covariance steady state per direction.
    pub settle_steps: (usize, usize),
}

struct SteadyFilter {
    /// `(I − K Cᵀ) e^{±AΔ}`.
    m: Mat,
    /// `(I − K Cᵀ)`, applied to the control increment.
    gain: Mat,
    v: Mat,
    steps: usize,
}

/// Iterate the Δ-step covariance recursion from zero to steady state.
fn steady_filter(phi: &Mat, b: &Mat, c_t: &Mat, eta2: f64, delta: f64) -> Result<SteadyFilter> {
    let n = phi.nrows();
    let q = b * b.transpose() * delta;
    let c = c_t.transpose();
    let r = Mat::identity(c_t.nrows(), c_t.nrows()) * (eta2 / delta);
    let mut v = Mat::zeros(n, n);
    let update = |v: &Mat| -> Result<(Mat, Mat)> {
        let vm = phi * v * phi.transpose() + &q;
        let s = &r + c_t * &vm * &c;
        let s_inv = s.try_inverse().ok_or_else(|| Error::OracleDiverged("singular innovation covariance".into()))?;
        let k = &vm * &c * s_inv;
        let post = &vm - &k * c_t * &vm;
        Ok(((&post + post.transpose()) * 0.5, k))
    };
    const CHECK: usize = 256;
    const MAX_STEPS: usize = 1 << 28;
    let mut steps = 0;
    let mut prev_change = f64::INFINITY;
    loop {
        let start = v.clone();
        for _ in 0..CHECK {
            v = update(&v)?.0;
        }
        steps += CHECK;
        let norm = v.norm();
        if !norm.is_finite() {
            return Err(Error::OracleDiverged(format!("covariance became non-finite after {steps} steps")));
        }
        let change = (&v - &start).norm();
        // Remaining distance estimated from the geometric contraction rate.
        let ratio = change / prev_change;
        let remaining = if ratio < 1.0 { change / (1.0 - ratio) } else { f64::INFINITY };
        if change == 0.0 || remaining <= 1e-14 * norm {
            break;
        }
        prev_change = change;
        if steps >= MAX_STEPS {
            return Err(Error::OracleDiverged(format!("covariance did not settle within {steps} steps")));
        }
    }
    let (_, k) = update(&v)?;
    let gain = Mat::identity(n, n) - &k * c_t;
    Ok(SteadyFilter { m: &gain * phi, gain, v, steps })
}

/// Finite-step Kalman smoother at `Δ = T/2^p` used as a reference for the
/// batch estimate. Means start from zero at both ends; the valid range drops
/// the boundary where the per-period recursion has not decayed to 1e-12.
pub fn oracle_smoother(system: &AnalogSystem, eta2: f64, trace: &ControlTrace, p: u32) -> Result<OracleResult> {
    if p < 4 || p > 24 {
        return Err(Error::InvalidParameter("oracle step exponent p must be in 4..=24".into()));
    }
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let n = system.order();
    if trace.n != system.controls() {
        return Err(Error::Dimension("trace controls do not match the system".into()));
    }
    let sub = 1usize << p;
    let delta = trace.t / sub as f64;
    let fwd = steady_filter(&expm(&(&system.a * delta)), &system.b, &system.c_t, eta2, delta)?;
    let bwd = steady_filter(&expm(&(&system.a * -delta)), &system.b, &system.c_t, eta2, delta)?;
    let wt = {
        let sum = &fwd.v + &bwd.v;
        let w = sum
            .lu()
            .solve(&system.b)
            .ok_or_else(|| Error::OracleDiverged("singular covariance sum".into()))?;
        Dense::from(&w.transpose())
    };
    let k = system.inputs();
    let f_in = Dense::from(&(&fwd.gain * &system.gamma * delta));
    let b_in = Dense::from(&(&bwd.gain * &system.gamma * -delta));
    let (fm, bm) = (Dense::from(&fwd.m), Dense::from(&bwd.m));

    let periods = trace.len();
    let mut out = vec![0.0; periods * k];
    let mut m = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut drive = vec![0.0; n];
    let mut proj = vec![0.0; k];
    for j in 0..periods {
        wt.mul_into(&m, &mut proj, false);
        for (o, v) in out[j * k..(j + 1) * k].iter_mut().zip(&proj) {
            *o = -v;
        }
        f_in.mul_into(trace.get(j), &mut drive, false);
        for _ in 0..sub {
            fm.mul_into(&m, &mut next, false);
            for i in 0..n {
                next[i] += drive[i];
            }
            std::mem::swap(&mut m, &mut next);
        }
    }
    m.iter_mut().for_each(|v| *v = 0.0);
    for j in (0..periods).rev() {
        b_in.mul_into(trace.get(j), &mut drive, false);
        for _ in 0..sub {
            bm.mul_into(&m, &mut next, false);
            for i in 0..n {
                next[i] += drive[i];
            }
            std::mem::swap(&mut m, &mut next);
        }
        wt.mul_into(&m, &mut proj, false);
        for (o, v) in out[j * k..(j + 1) * k].iter_mut().zip(&proj) {
            *o += v;
        }
    }
    let settle = decay_length(&[&matrix_power(&fwd.m, sub), &matrix_power(&bwd.m, sub)], BOUNDARY_TOL)?;
    Ok(OracleResult {
        estimate: EstimateTrace { t_u: trace.t, k, samples: out, valid_range: valid_range(periods, settle) },
        vf: fwd.v,
        vb: bwd.v,
        settle_steps: (fwd.steps, bwd.steps),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{design, parallelize};
    use crate::model::{build_chain, ChainSpec, Readout};
    use crate::sim::{simulate_chain, ChainRun, InputSignal};
    use crate::xfer::eta_from_osr;

    const T: f64 = 1.0 / 21.5;

    fn reference(n: usize) -> (ChainSpec, AnalogSystem, f64) {
        let spec = ChainSpec::uniform(n, 10.0, 1.05);
        let sys = build_chain(&spec, Readout::LastState, 1.0).unwrap();
        let eta = eta_from_osr(10.0 * T, 32.0, n).unwrap();
        (spec, sys, eta * eta)
    }

    fn trace(spec: &ChainSpec, periods: usize, input: InputSignal) -> ControlTrace {
        simulate_chain(&ChainRun::new(spec, T, input, periods)).unwrap().0
    }

    fn sine() -> InputSignal {
        InputSignal::Sine { amplitude: 0.8, frequency: 0.1, phase: 0.0 }
    }

    #[test]
    fn first_forward_step() {
        let (_, sys, eta2) = reference(3);
        let (coeffs, _) = design(&sys, eta2, T).unwrap();
        let tr = ControlTrace::new(T, 3, 2, vec![1.0, -1.0, 1.0]).unwrap();
        let kernel = BatchKernel::new(&coeffs);
        let mut out = vec![0.0; 2];
        let tr2 = ControlTrace::new(T, 3, 2, vec![1.0, -1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        kernel.forward(&tr2, 1, &mut out);
        let m1 = &coeffs.bf * DVector::from_column_slice(tr.get(0));
        let expect = -(coeffs.w.transpose() * m1)[(0, 0)];
        assert!((out[1] - expect).abs() < 1e-15 * expect.abs().max(1.0));
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn scalar_hand_recursion() {
        let (af, bf, ab, bb, w) = (0.5, 0.25, 0.4, -0.3, 0.1);
        let m = |v: f64| Mat::from_element(1, 1, v);
        let coeffs = FilterCoefficients {
            af: m(af),
            bf: m(bf),
            ab: m(ab),
            bb: m(bb),
            w: m(w),
            vf: m(1.0),
            vb: m(1.0),
            t_u: 1.0,
            eta2: 1.0,
        };
        let s = [1.0, -1.0, 1.0];
        let tr = ControlTrace::new(1.0, 1, 2, s.to_vec()).unwrap();
        let est = estimate_batch(&coeffs, &tr).unwrap();
        let mf = [0.0, bf * s[0], af * bf * s[0] + bf * s[1]];
        let mb2 = bb * s[2];
        let mb1 = ab * mb2 + bb * s[1];
        let mb0 = ab * mb1 + bb * s[0];
        let expect = [w * (mb0 - mf[0]), w * (mb1 - mf[1]), w * (mb2 - mf[2])];
        for j in 0..3 {
            assert!((est.samples[j] - expect[j]).abs() < 1e-15, "{j}");
        }
    }

    #[test]
    fn period_mismatch() {
        let (_, sys, eta2) = reference(2);
        let (coeffs, _) = design(&sys, eta2, T / 3.0).unwrap();
        let tr = ControlTrace::new(T * 1.1, 2, 2, vec![1.0, 1.0]).unwrap();
        assert!(matches!(estimate_batch(&coeffs, &tr), Err(Error::PeriodMismatch { .. })));
        let empty = ControlTrace::new(T, 2, 2, vec![]).unwrap();
        assert!(matches!(estimate_batch(&coeffs, &empty), Err(Error::EmptyTrace)));
    }

    #[test]
    fn sub_period_estimates_interpolate() {
        let (spec, sys, eta2) = reference(3);
        let tr = trace(&spec, 3000, sine());
        let (c1, _) = design(&sys, eta2, T).unwrap();
        let (c4, _) = design(&sys, eta2, T / 4.0).unwrap();
        let e1 = estimate_batch(&c1, &tr).unwrap();
        let e4 = estimate_batch(&c4, &tr).unwrap();
        assert_eq!(e4.len(), 4 * e1.len());
        // On-tick samples agree closely; the in-between samples follow the tone.
        let (a, b) = e1.valid_range;
        let mut worst = 0.0f64;
        for j in a.max(e4.valid_range.0 / 4 + 1)..b.min(e4.valid_range.1 / 4) {
            worst = worst.max((e1.samples[j] - e4.samples[4 * j]).abs());
        }
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn blocked_matches_monolithic() {
        let (spec, sys, eta2) = reference(4);
        let tr = trace(&spec, 5000, sine());
        let (coeffs, _) = design(&sys, eta2, T).unwrap();
        let a = estimate_batch(&coeffs, &tr).unwrap();
        let b = estimate_batch_blocked(&coeffs, &tr, 700).unwrap();
        let worst = a.samples.iter().zip(&b.samples).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(worst <= 1e-12, "{worst}");
    }

    #[test]
    fn mixed_and_fir_agree_with_batch() {
        let (spec, sys, eta2) = reference(3);
        let tr = trace(&spec, 4000, sine());
        let (coeffs, _) = design(&sys, eta2, T).unwrap();
        let batch = estimate_batch(&coeffs, &tr).unwrap();
        let settle = settle_length(&coeffs).unwrap();
        for latency in [5, 20, settle] {
            let mixed = estimate_mixed(&coeffs, &tr, latency).unwrap();
            assert_eq!(mixed.len(), tr.len() - latency);
            let bound = mixed_truncation_bound(&coeffs, latency);
            let (a, b) = batch.valid_range;
            let worst = (a..b.min(mixed.len())).fold(0.0f64, |m, j| m.max((batch.samples[j] - mixed.samples[j]).abs()));
            assert!(worst <= bound * (1.0 + 1e-9) + 1e-13, "L={latency}: {worst} > {bound}");
        }
        let mixed = estimate_mixed(&coeffs, &tr, settle).unwrap();
        let fir = estimate_fir(&coeffs, &tr, settle, settle).unwrap();
        let bound = fir_truncation_bound(&coeffs, settle);
        let worst = (settle..fir.len()).fold(0.0f64, |m, j| m.max((fir.samples[j] - mixed.samples[j]).abs()));
        assert!(worst <= bound + 1e-12, "{worst} > {bound}");
        assert!(matches!(estimate_mixed(&coeffs, &tr, 0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn parallel_agrees_with_batch() {
        let (spec, sys, eta2) = reference(5);
        let tr = trace(&spec, 1 << 13, sine());
        let (coeffs, _) = design(&sys, eta2, T).unwrap();
        let batch = estimate_batch(&coeffs, &tr).unwrap();
        let pform = parallelize(&coeffs).unwrap();
        let par = estimate_parallel(&pform, &tr).unwrap();
        let mult = estimate_parallel_with(&pform, &tr, LookupMode::Never).unwrap();
        let worst = batch.samples.iter().zip(&par.samples).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(worst <= 1e-9, "{worst}");
        let diff = par.samples.iter().zip(&mult.samples).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn lookup_needs_binary() {
        let (_, sys, eta2) = reference(2);
        let (coeffs, _) = design(&sys, eta2, T).unwrap();
        let pform = parallelize(&coeffs).unwrap();
        let tr = ControlTrace::real(T, 2, vec![0.5, 1.0]).unwrap();
        assert!(matches!(estimate_parallel_with(&pform, &tr, LookupMode::Always), Err(Error::NonBinaryControls)));
        assert!(estimate_parallel(&pform, &tr).is_ok());
    }

    #[test]
    fn parallel_n1_matches_batch() {
        let (spec, sys, eta2) = reference(1);
        let tr = trace(&spec, 500, InputSignal::Constant { value: 0.3 });
        let (coeffs, _) = design(&sys, eta2, T).unwrap();
        let a = estimate_batch(&coeffs, &tr).unwrap();
        let b = estimate_parallel(&parallelize(&coeffs).unwrap(), &tr).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!((x - y).abs() <= 1e-14 * x.abs().max(1.0));
        }
    }

    #[test]
    fn estimate_recovers_constant() {
        let (spec, sys, eta2) = reference(3);
        let tr = trace(&spec, 4000, InputSignal::Constant { value: 0.37 });
        let (coeffs, _) = design(&sys, eta2, T).unwrap();
        let est = estimate_batch(&coeffs, &tr).unwrap();
        let v = est.valid_channel(0);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 0.37).abs() < 2e-3, "{mean}");
    }

    #[test]
    fn oracle_zero_trace_is_zero() {
        let (_, sys, eta2) = reference(2);
        let tr = ControlTrace::real(T, 2, vec![0.0; 200]).unwrap();
        let res = oracle_smoother(&sys, eta2, &tr, 4).unwrap();
        assert!(res.estimate.samples.iter().all(|&v| v == 0.0));
        assert!(matches!(oracle_smoother(&sys, eta2, &tr, 3), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn oracle_covariance_approaches_closed_form() {
        let (beta, eta): (f64, f64) = (10.0, 10.21);
        let sys = build_chain(&ChainSpec::uniform(2, beta, 1.0), Readout::LastState, 1.0).unwrap();
        let tr = ControlTrace::real(T, 2, vec![0.0; 2]).unwrap();
        let s = (2.0 * eta).sqrt();
        let vf = Mat::from_row_slice(2, 2, &[beta * s, beta * eta, beta * eta, beta * eta * s]);
        let mut errs = Vec::new();
        for p in [6, 8, 10] {
            let r = oracle_smoother(&sys, eta * eta, &tr, p).unwrap();
            errs.push((&r.vf - &vf).norm() / vf.norm());
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        // First order: each quartering of Δ cuts the error about fourfold.
        assert!(errs[1] / errs[2] > 3.0, "{errs:?}");
    }
}
