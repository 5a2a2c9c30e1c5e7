//! Clocked simulation of an analog system under digital control.
//!
//! Between clock edges the system is linear with constant controls, so the
//! state is propagated exactly: controls and constant inputs through the
//! zero-order-hold integral, sinusoidal inputs through an exponential of the
//! system augmented with a harmonic oscillator. Each period is split into
//! substeps for bound monitoring and thermal-noise injection.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{expm, expm_integral, Mat};
use crate::model::{build_chain, check_stability, AnalogSystem, ChainSpec, Readout, Stability};
use crate::xfer::NoiseSource;

pub const DEFAULT_SUBSTEPS: usize = 64;
/// Snapshot decimation keeps at most this many points per stage.
pub const MAX_SNAPSHOTS: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSignal {
    Zero,
    Constant { value: f64 },
    /// `amplitude · sin(2π frequency t + phase)`, frequency in Hz.
    Sine {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
}

impl InputSignal {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            InputSignal::Zero => 0.0,
            InputSignal::Constant { value } => value,
            InputSignal::Sine { amplitude, frequency, phase } => amplitude * (2.0 * PI * frequency * t + phase).sin(),
        }
    }

    pub fn peak(&self) -> f64 {
        match *self {
            InputSignal::Zero => 0.0,
            InputSignal::Constant { value } => value.abs(),
            InputSignal::Sine { amplitude, .. } => amplitude.abs(),
        }
    }

    pub fn within_bound(&self, b_u: f64) -> bool {
        self.peak() <= b_u
    }

    /// Parse `zero`, `const:<c>` or `sine:<amplitude>,<frequency>[,<phase>]`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("cannot parse input signal '{text}'"));
        let (kind, args) = text.split_once(':').unwrap_or((text, ""));
        let nums = || -> Result<Vec<f64>> {
            args.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| bad())).collect()
        };
        match kind.trim() {
            "zero" => Ok(InputSignal::Zero),
            "const" | "constant" => match nums()?.as_slice() {
                [c] => Ok(InputSignal::Constant { value: *c }),
                _ => Err(bad()),
            },
            "sine" => match nums()?.as_slice() {
                [a, f] => Ok(InputSignal::Sine { amplitude: *a, frequency: *f, phase: 0.0 }),
                [a, f, p] => Ok(InputSignal::Sine { amplitude: *a, frequency: *f, phase: *p }),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

/// Sequence of control vectors, one per clock period.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrace {
    /// Clock period in seconds.
    pub t: f64,
    /// Number of controls per period.
    pub n: usize,
    /// Quantizer level count `2^N`; zero marks a real-valued trace (e.g. a
    /// superposition of traces).
    pub levels: u32,
    /// Row-major, `len() × n`.
    pub samples: Vec<f64>,
}

impl ControlTrace {
    pub fn new(t: f64, n: usize, levels: u32, samples: Vec<f64>) -> Result<Self> {
        if n == 0 || samples.len() % n != 0 {
            return Err(Error::Dimension(format!("{} samples do not split into rows of {n}", samples.len())));
        }
        if !(t > 0.0) {
            return Err(Error::InvalidParameter("clock period must be positive".into()));
        }
        let trace = Self { t, n, levels, samples };
        if levels != 0 {
            if levels < 2 {
                return Err(Error::InvalidParameter("a quantized trace needs at least 2 levels".into()));
            }
            if let Some(bad) = trace.samples.iter().find(|&&v| trace.code_of(v).is_none()) {
                return Err(Error::Format(format!("control value {bad} is not one of {levels} levels")));
            }
        }
        Ok(trace)
    }

    /// A real-valued trace with no level set.
    pub fn real(t: f64, n: usize, samples: Vec<f64>) -> Result<Self> {
        Self::new(t, n, 0, samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, k: usize) -> &[f64] {
        &self.samples[k * self.n..(k + 1) * self.n]
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 * self.t
    }

    pub fn is_binary(&self) -> bool {
        self.samples.iter().all(|&v| v == 1.0 || v == -1.0)
    }

    /// Level value for integer code `c ∈ [0, levels − 1]`.
    pub fn level_value(levels: u32, code: u32) -> f64 {
        let m = (levels - 1) as f64;
        (2.0 * code as f64 - m) / m
    }

    /// Integer code of a level value, if it is one.
    pub fn code_of(&self, v: f64) -> Option<u32> {
        if self.levels < 2 {
            return None;
        }
        let m = (self.levels - 1) as f64;
        let c = ((v + 1.0) * m / 2.0).round();
        (c >= 0.0 && c <= m && Self::level_value(self.levels, c as u32) == v).then_some(c as u32)
    }
}

/// A thermal noise source with in-band PSD `sigma2` entering at a stage.
pub type ThermalNoise = NoiseSource;

/// Multiplicative component deviations of a chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub beta_factors: Vec<f64>,
    pub kappa_factors: Vec<f64>,
}

impl Mismatch {
    /// Same factor on every β (e.g. `1.02` for +2%).
    pub fn uniform_beta(n: usize, factor: f64) -> Self {
        Self { beta_factors: vec![factor; n], kappa_factors: vec![1.0; n] }
    }

    /// Factors drawn once from `1 ± p` uniformly.
    pub fn sample_uniform(n: usize, p: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let mut draw = || 1.0 + p * (2.0 * rng.random::<f64>() - 1.0);
        let beta_factors = (0..n).map(|_| draw()).collect();
        let kappa_factors = (0..n).map(|_| draw()).collect();
        Self { beta_factors, kappa_factors }
    }

    pub fn apply(&self, spec: &ChainSpec) -> Result<ChainSpec> {
        if self.beta_factors.len() != spec.n || self.kappa_factors.len() != spec.n {
            return Err(Error::Dimension("mismatch factors must have one entry per stage".into()));
        }
        let mut out = spec.clone();
        for l in 0..spec.n {
            out.beta[l] *= self.beta_factors[l];
            out.kappa[l] *= self.kappa_factors[l];
        }
        Ok(out)
    }
}

/// Clocked control parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlSpec {
    /// Clock period in seconds.
    pub t: f64,
    #[serde(default = "one_bit")]
    pub quantizer_bits: u32,
    /// Threshold dither amplitude as a fraction of the state bound.
    #[serde(default)]
    pub dither_amplitude: f64,
}

fn one_bit() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub substeps: usize,
    pub seed: u64,
    pub noise: Vec<ThermalNoise>,
    /// System actually propagated when it differs from the nominal one
    /// (component mismatch). The nominal system still sets the quantizer.
    pub actual: Option<AnalogSystem>,
    /// Store the state at every `stride`-th clock edge.
    pub snapshot_stride: Option<usize>,
    pub initial_state: Option<Vec<f64>>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { substeps: DEFAULT_SUBSTEPS, seed: 0, noise: Vec::new(), actual: None, snapshot_stride: None, initial_state: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub periods: usize,
    /// Largest |x_ℓ| seen at any substep, per stage.
    pub max_abs_state: Vec<f64>,
    /// Number of (stage, substep) samples with |x_ℓ| > b.
    pub bound_violations: u64,
    /// States at every `snapshot_stride`-th clock edge, row-major.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshots: Option<Vec<f64>>,
    pub snapshot_stride: Option<usize>,
    pub input_within_bound: bool,
    pub final_state: Vec<f64>,
}

/// Number of periods in `duration`; errors unless it is an integer multiple
/// of `t`.
pub fn periods_for_duration(duration: f64, t: f64) -> Result<usize> {
    let m = duration / t;
    let r = m.round();
    if !(r >= 1.0) || (m - r).abs() > 1e-9 * r.max(1.0) {
        return Err(Error::NonIntegerDuration);
    }
    Ok(r as usize)
}

/// Chain spec with the limit-cycle feedback `κ_{1,ℓ} = β/(n(n−1))` added,
/// unless feedback is already configured.
pub fn dither_feedback_augment(spec: &ChainSpec) -> Result<ChainSpec> {
    if spec.n < 2 {
        return Err(Error::InvalidParameter("extra feedback needs at least two stages".into()));
    }
    let mut out = spec.clone();
    if out.feedback.is_empty() {
        let n = spec.n as f64;
        out.feedback = vec![spec.beta[0] / (n * (n - 1.0)); spec.n - 1];
    }
    Ok(out)
}

/// Per-stage quantizer: picks the level whose control increment over one
/// period lands the state closest to zero. Thresholds sit at the midpoints
/// of `T κ_ℓ β_ℓ · levels`; for one bit this is `sign` with `sign(0) = +1`.
#[derive(Debug, Clone)]
struct Quantizer {
    /// `−T Γ_ℓℓ` per stage.
    step: Vec<f64>,
    max_code: f64,
}

impl Quantizer {
    fn new(gamma: &Mat, t: f64, bits: u32) -> Self {
        let step = (0..gamma.nrows()).map(|l| -t * gamma[(l, l)]).collect();
        Self { step, max_code: (2u64.pow(bits) - 1) as f64 }
    }

    fn quantize(&self, l: usize, x: f64) -> f64 {
        let step = self.step[l];
        let z = if step != 0.0 { x / step } else { x };
        let m = self.max_code;
        let code = ((z + 1.0) * m / 2.0 + 0.5).floor().clamp(0.0, m);
        if m == 1.0 {
            // Exact sign, immune to the division above.
            let positive = if step < 0.0 { x < 0.0 } else { x >= 0.0 };
            return if positive { 1.0 } else { -1.0 };
        }
        (2.0 * code - m) / m
    }
}

/// Exact one-substep propagation operators.
struct Propagator {
    n: usize,
    /// `e^{A h}`, row-major.
    phi: Vec<f64>,
    /// `∫ e^{A(h−τ)} Γ dτ`, row-major n × controls.
    psi_gamma: Mat,
    /// `∫ e^{A(h−τ)} B 1 dτ` (every input driven by the same signal).
    psi_b: Vec<f64>,
    /// Responses to `cos(ωτ)` and `sin(ωτ)` inputs over one substep.
    k_cos: Vec<f64>,
    k_sin: Vec<f64>,
}

impl Propagator {
    fn new(system: &AnalogSystem, h: f64, omega: f64) -> Self {
        let n = system.order();
        let b1 = Mat::from_fn(n, 1, |i, _| system.b.row(i).sum());
        let (phi, psi_gamma) = expm_integral(&system.a, &system.gamma, h);
        let (_, psi_b) = expm_integral(&system.a, &b1, h);
        let mut aug = Mat::zeros(n + 2, n + 2);
        aug.view_mut((0, 0), (n, n)).copy_from(&(&system.a * h));
        aug.view_mut((0, n), (n, 1)).copy_from(&(&b1 * h));
        aug[(n, n + 1)] = -omega * h;
        aug[(n + 1, n)] = omega * h;
        let e = expm(&aug);
        let k_cos = (0..n).map(|i| e[(i, n)]).collect();
        let k_sin = (0..n).map(|i| -e[(i, n + 1)]).collect();
        Self {
            n,
            phi: (0..n * n).map(|idx| phi[(idx / n, idx % n)]).collect(),
            psi_gamma,
            psi_b: psi_b.column(0).iter().copied().collect(),
            k_cos,
            k_sin,
        }
    }

    #[inline]
    fn apply(&self, x: &mut [f64], scratch: &mut [f64], drive: &[f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.phi[i * n..(i + 1) * n];
            let mut acc = drive[i];
            for j in 0..n {
                acc += row[j] * x[j];
            }
            scratch[i] = acc;
        }
        x.copy_from_slice(&scratch[..n]);
    }
}

/// Simulate `periods` clock periods of `system` under the given control.
pub fn simulate(
    system: &AnalogSystem,
    control: &ControlSpec,
    input: &InputSignal,
    periods: usize,
    options: &SimOptions,
) -> Result<(ControlTrace, SimReport)> {
    let n = system.order();
    let nc = system.controls();
    if nc != n {
        return Err(Error::Dimension("the clocked controller needs one control per state".into()));
    }
    if periods == 0 {
        return Err(Error::EmptyTrace);
    }
    if !(control.t > 0.0) || options.substeps == 0 {
        return Err(Error::InvalidParameter("clock period and substeps must be positive".into()));
    }
    if !(1..=16).contains(&control.quantizer_bits) {
        return Err(Error::InvalidParameter("quantizer_bits must be in 1..=16".into()));
    }
    let plant = options.actual.as_ref().unwrap_or(system);
    if plant.order() != n || plant.controls() != nc || plant.inputs() != system.inputs() {
        return Err(Error::Dimension("actual system differs in shape from the nominal one".into()));
    }
    for src in &options.noise {
        if src.stage == 0 || src.stage > n {
            return Err(Error::InvalidParameter(format!("noise stage {} out of range", src.stage)));
        }
    }

    let s_count = options.substeps;
    let h = control.t / s_count as f64;
    let omega = match *input {
        InputSignal::Sine { frequency, .. } => 2.0 * PI * frequency,
        _ => 0.0,
    };
    let prop = Propagator::new(plant, h, omega);
    let quant = Quantizer::new(&system.gamma, control.t, control.quantizer_bits);
    let b = system.state_bound;
    let limit = b * (1.0 + 1e-12);
    let levels = 2u32.pow(control.quantizer_bits);

    let mut dither_rngs: Vec<ChaCha8Rng> = (0..n).map(|l| stage_rng(options.seed, 2 * l as u64)).collect();
    let mut noise_rngs: Vec<ChaCha8Rng> = options
        .noise
        .iter()
        .enumerate()
        .map(|(i, _)| stage_rng(options.seed, 2 * (n + i) as u64 + 1))
        .collect();
    let noise_gain: Vec<f64> = options.noise.iter().map(|s| s.gain * s.lambda * (s.sigma2 * h).sqrt()).collect();

    let mut x = match &options.initial_state {
        Some(x0) if x0.len() == n => x0.clone(),
        Some(_) => return Err(Error::Dimension("initial state length".into())),
        None => vec![0.0; n],
    };
    let mut scratch = vec![0.0; n];
    let mut drive = vec![0.0; n];
    let mut ctrl_drive = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut samples = Vec::with_capacity(periods * n);
    let mut max_abs = vec![0.0f64; n];
    let mut violations = 0u64;
    let stride = options.snapshot_stride.filter(|&v| v > 0);
    let mut snapshots = stride.map(|st| Vec::with_capacity((periods / st + 1) * n));

    for k in 0..periods {
        for l in 0..n {
            max_abs[l] = max_abs[l].max(x[l].abs());
        }
        if let (Some(st), Some(snap)) = (stride, snapshots.as_mut()) {
            if k % st == 0 {
                snap.extend_from_slice(&x);
            }
        }
        for l in 0..n {
            let d = if control.dither_amplitude > 0.0 {
                control.dither_amplitude * b * (2.0 * dither_rngs[l].random::<f64>() - 1.0)
            } else {
                0.0
            };
            s[l] = quant.quantize(l, x[l] + d);
        }
        samples.extend_from_slice(&s);
        for i in 0..n {
            ctrl_drive[i] = (0..n).map(|j| prop.psi_gamma[(i, j)] * s[j]).sum();
        }
        for j in 0..s_count {
            let t0 = (k * s_count + j) as f64 * h;
            match *input {
                InputSignal::Zero => drive.copy_from_slice(&ctrl_drive),
                InputSignal::Constant { value } => {
                    for i in 0..n {
                        drive[i] = ctrl_drive[i] + prop.psi_b[i] * value;
                    }
                }
                InputSignal::Sine { amplitude, phase, .. } => {
                    let (sn, cs) = (omega * t0 + phase).sin_cos();
                    for i in 0..n {
                        drive[i] = ctrl_drive[i] + amplitude * (sn * prop.k_cos[i] + cs * prop.k_sin[i]);
                    }
                }
            }
            for (src, (rng, g)) in options.noise.iter().zip(noise_rngs.iter_mut().zip(&noise_gain)) {
                let z: f64 = rng.sample(StandardNormal);
                drive[src.stage - 1] += g * z;
            }
            prop.apply(&mut x, &mut scratch, &drive);
            for l in 0..n {
                let a = x[l].abs();
                if a > limit {
                    violations += 1;
                    if a > 10.0 * b || !a.is_finite() {
                        return Err(Error::Runaway { stage: l + 1, value: x[l], period: k });
                    }
                }
                if a > max_abs[l] {
                    max_abs[l] = a;
                }
            }
        }
    }

    let trace = ControlTrace { t: control.t, n, levels, samples };
    let report = SimReport {
        periods,
        max_abs_state: max_abs,
        bound_violations: violations,
        snapshots,
        snapshot_stride: stride,
        input_within_bound: input.within_bound(system.input_bound),
        final_state: x,
    };
    Ok((trace, report))
}

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Everything needed to simulate an integrator chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainRun<'a> {
    pub spec: &'a ChainSpec,
    pub t: f64,
    pub bound: f64,
    pub input: InputSignal,
    pub periods: usize,
    pub seed: u64,
    pub noise: Vec<ThermalNoise>,
    pub mismatch: Option<Mismatch>,
    /// Simulate even when stability is not guaranteed.
    pub allow_unstable: bool,
    pub substeps: usize,
    pub snapshot_stride: Option<usize>,
}

impl<'a> ChainRun<'a> {
    pub fn new(spec: &'a ChainSpec, t: f64, input: InputSignal, periods: usize) -> Self {
        Self {
            spec,
            t,
            bound: 1.0,
            input,
            periods,
            seed: 0,
            noise: Vec::new(),
            mismatch: None,
            allow_unstable: false,
            substeps: DEFAULT_SUBSTEPS,
            snapshot_stride: None,
        }
    }
}

/// Simulate a chain after checking its stability conditions.
pub fn simulate_chain(run: &ChainRun<'_>) -> Result<(ControlTrace, SimReport)> {
    let spec = run.spec;
    if let Stability::NotGuaranteed(stages) = check_stability(spec, run.t, run.bound) {
        if !run.allow_unstable {
            return Err(Error::NotStable(stages));
        }
    }
    let nominal = build_chain(spec, Readout::LastState, run.bound)?;
    let actual = match &run.mismatch {
        Some(m) => Some(build_chain(&m.apply(spec)?, Readout::LastState, run.bound)?),
        None => None,
    };
    let control = ControlSpec { t: run.t, quantizer_bits: spec.quantizer_bits, dither_amplitude: spec.dither_amplitude };
    let options = SimOptions {
        substeps: run.substeps,
        seed: run.seed,
        noise: run.noise.clone(),
        actual,
        snapshot_stride: run.snapshot_stride,
        initial_state: None,
    };
    simulate(&nominal, &control, &run.input, run.periods, &options)
}

/// States at the clock edges `0, T, …, periods·T` of the system driven by
/// `input` and (optionally) a recorded control trace, without any feedback.
pub fn propagate_open_loop(
    system: &AnalogSystem,
    input: &InputSignal,
    controls: Option<&ControlTrace>,
    t: f64,
    periods: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = system.order();
    if let Some(c) = controls {
        if c.n != system.controls() || c.len() < periods {
            return Err(Error::Dimension("control trace does not cover the run".into()));
        }
    }
    let omega = match *input {
        InputSignal::Sine { frequency, .. } => 2.0 * PI * frequency,
        _ => 0.0,
    };
    let prop = Propagator::new(system, t, omega);
    let mut x = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut drive = vec![0.0; n];
    let mut out = Vec::with_capacity(periods + 1);
    out.push(x.clone());
    for k in 0..periods {
        for i in 0..n {
            drive[i] = match controls {
                Some(c) => (0..n).map(|j| prop.psi_gamma[(i, j)] * c.get(k)[j]).sum(),
                None => 0.0,
            };
            drive[i] += match *input {
                InputSignal::Zero => 0.0,
                InputSignal::Constant { value } => prop.psi_b[i] * value,
                InputSignal::Sine { amplitude, phase, .. } => {
                    let (sn, cs) = (omega * k as f64 * t + phase).sin_cos();
                    amplitude * (sn * prop.k_cos[i] + cs * prop.k_sin[i])
                }
            };
        }
        prop.apply(&mut x, &mut scratch, &drive);
        out.push(x.clone());
    }
    Ok(out)
}

/// Classical fourth-order Runge–Kutta reference for the same open-loop run,
/// with `steps` RK4 steps per clock period.
pub fn propagate_rk4(
    system: &AnalogSystem,
    input: &InputSignal,
    controls: &ControlTrace,
    t: f64,
    periods: usize,
    steps: usize,
) -> Vec<Vec<f64>> {
    let n = system.order();
    let h = t / steps as f64;
    let b1: Vec<f64> = (0..n).map(|i| system.b.row(i).sum()).collect();
    let f = |x: &[f64], time: f64, gs: &[f64]| -> Vec<f64> {
        let u = input.value(time);
        (0..n)
            .map(|i| (0..n).map(|j| system.a[(i, j)] * x[j]).sum::<f64>() + b1[i] * u + gs[i])
            .collect()
    };
    let mut x = vec![0.0; n];
    let mut out = vec![x.clone()];
    for k in 0..periods {
        let s = controls.get(k);
        let gs: Vec<f64> = (0..n).map(|i| (0..n).map(|j| system.gamma[(i, j)] * s[j]).sum()).collect();
        for j in 0..steps {
            let t0 = k as f64 * t + j as f64 * h;
            let k1 = f(&x, t0, &gs);
            let x2: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * h * k1[i]).collect();
            let k2 = f(&x2, t0 + 0.5 * h, &gs);
            let x3: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * h * k2[i]).collect();
            let k3 = f(&x3, t0 + 0.5 * h, &gs);
            let x4: Vec<f64> = (0..n).map(|i| x[i] + h * k3[i]).collect();
            let k4 = f(&x4, t0 + h, &gs);
            for i in 0..n {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        out.push(x.clone());
    }
    out
}
