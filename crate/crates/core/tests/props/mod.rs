//! Property checks shared by the proptest suite and the acceptance run.

use std::sync::OnceLock;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cbadc::analyze::psd;
use cbadc::design::{design, FilterCoefficients};
use cbadc::estimate::{estimate_batch, estimate_mixed};
use cbadc::model::{atf, build_chain, chain_atf_product, ChainSpec, Readout};
use cbadc::sim::{simulate, ControlSpec, ControlTrace, InputSignal, SimOptions, ThermalNoise};
use cbadc::xfer::eta_from_osr;

pub const T: f64 = 1.0 / 21.5;
pub const LINEARITY_TOL: f64 = 1e-10;
pub const PARSEVAL_TOL: f64 = 0.01;
pub const ATF_TOL: f64 = 1e-12;

pub fn config(cases: u32) -> Config {
    Config { cases, rng_seed: RngSeed::Fixed(0x5eed), failure_persistence: None, ..Config::default() }
}

fn coefficients(n: usize) -> &'static FilterCoefficients {
    static CACHE: OnceLock<Vec<FilterCoefficients>> = OnceLock::new();
    &CACHE.get_or_init(|| {
        (1..=5)
            .map(|n| {
                let sys = build_chain(&ChainSpec::uniform(n, 10.0, 1.05), Readout::LastState, 1.0).unwrap();
                let eta2 = eta_from_osr(10.0 * T, 32.0, n).unwrap().powi(2);
                design(&sys, eta2, T).unwrap().0
            })
            .collect()
    })[n - 1]
}

fn binary_trace(n: usize, len: usize, seed: u64) -> ControlTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n * len).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    ControlTrace::new(T, n, 2, samples).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub type LinearityCase = (usize, usize, u64, u64, f64, f64);

pub fn linearity_cases() -> impl Strategy<Value = LinearityCase> {
    (1usize..=5, 512usize..2048, any::<u64>(), any::<u64>(), -2.0f64..2.0, -2.0f64..2.0)
}

/// Batch and mixed estimates of `a·s1 + b·s2` equal the same combination of
/// the separate estimates.
pub fn check_linearity((n, len, s1, s2, a, b): LinearityCase) -> Result<(), TestCaseError> {
    let c = coefficients(n);
    let t1 = binary_trace(n, len, s1);
    let t2 = binary_trace(n, len, s2);
    let mix: Vec<f64> = t1.samples.iter().zip(&t2.samples).map(|(x, y)| a * x + b * y).collect();
    let t12 = ControlTrace::real(T, n, mix).unwrap();
    let e1 = estimate_batch(c, &t1).unwrap();
    let e2 = estimate_batch(c, &t2).unwrap();
    let e12 = estimate_batch(c, &t12).unwrap();
    let sum: Vec<f64> = e1.samples.iter().zip(&e2.samples).map(|(x, y)| a * x + b * y).collect();
    prop_assert!(max_abs_diff(&sum, &e12.samples) <= LINEARITY_TOL);

    let m1 = estimate_mixed(c, &t1, 32).unwrap();
    let m2 = estimate_mixed(c, &t2, 32).unwrap();
    let m12 = estimate_mixed(c, &t12, 32).unwrap();
    let sum: Vec<f64> = m1.samples.iter().zip(&m2.samples).map(|(x, y)| a * x + b * y).collect();
    prop_assert!(max_abs_diff(&sum, &m12.samples) <= LINEARITY_TOL);
    Ok(())
}

pub fn shift_cases() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..=5, 2048usize..4096, any::<u64>())
}

/// Dropping the first period of the trace shifts the estimate by one period
/// on the valid range.
pub fn check_time_invariance((n, len, seed): (usize, usize, u64)) -> Result<(), TestCaseError> {
    let c = coefficients(n);
    let full = binary_trace(n, len, seed);
    let shifted = ControlTrace::new(T, n, 2, full.samples[n..].to_vec()).unwrap();
    let e = estimate_batch(c, &full).unwrap();
    let es = estimate_batch(c, &shifted).unwrap();
    let lo = e.valid_range.0.max(es.valid_range.0 + 1);
    let hi = e.valid_range.1.min(es.valid_range.1 + 1);
    prop_assert!(lo < hi);
    for j in lo..hi {
        prop_assert!((e.get(j)[0] - es.get(j - 1)[0]).abs() <= LINEARITY_TOL, "period {}", j);
    }
    Ok(())
}

pub type SimCase = (usize, u64, f64, f64, f64);

pub fn sim_cases() -> impl Strategy<Value = SimCase> {
    (1usize..=4, any::<u64>(), 0.0f64..0.03, 0.0f64..0.8, 0.0f64..1e-4)
}

/// Same configuration and seed, with dither and thermal noise, give
/// bit-identical traces and final states.
pub fn check_determinism((n, seed, dither, amp, sigma2): SimCase) -> Result<(), TestCaseError> {
    let sys = build_chain(&ChainSpec::uniform(n, 10.0, 1.05), Readout::LastState, 1.0).unwrap();
    let control = ControlSpec { t: T, quantizer_bits: 1, dither_amplitude: dither };
    let input = InputSignal::Sine { amplitude: amp, frequency: 0.1, phase: 0.3 };
    let opts = SimOptions { seed, noise: vec![ThermalNoise { stage: 1, gain: 1.0, lambda: 1.0, sigma2 }], ..Default::default() };
    let (a, ra) = simulate(&sys, &control, &input, 2000, &opts).unwrap();
    let (b, rb) = simulate(&sys, &control, &input, 2000, &opts).unwrap();
    prop_assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x.to_bits() == y.to_bits()));
    prop_assert!(ra.final_state.iter().zip(&rb.final_state).all(|(x, y)| x.to_bits() == y.to_bits()));
    Ok(())
}

pub fn atf_cases() -> impl Strategy<Value = (usize, f64, f64, f64)> {
    (1usize..=8, 0.5f64..1e4, 0.0f64..1.0, -2.0f64..2.0)
}

/// Resolvent-based ATF of an all-states chain against the stage products.
pub fn check_atf((n, beta, rho_frac, log_w): (usize, f64, f64, f64)) -> Result<(), TestCaseError> {
    let spec = ChainSpec::uniform(n, beta, 1.0).with_rho(rho_frac * beta);
    let sys = build_chain(&spec, Readout::AllStates, 1.0).unwrap();
    let omega = beta * 10f64.powf(log_w);
    let g = atf(&sys, omega).unwrap().g;
    let p = chain_atf_product(&spec, omega);
    for l in 0..n {
        let err = (g[(l, 0)] - p[l]).norm() / p[l].norm();
        prop_assert!(err <= ATF_TOL, "stage {} error {:e}", l + 1, err);
    }
    Ok(())
}

pub type PsdCase = (u64, u32, f64, f64, f64, f64, f64);

pub fn psd_cases() -> impl Strategy<Value = PsdCase> {
    (any::<u64>(), 8u32..=11, 0.0f64..2.0, 4.0f64..100.0, 0.01f64..1.0, 0.0f64..0.95, -3.0f64..3.0)
}

/// Tone plus AR(1) noise plus offset: non-negative density integrating to
/// the sample variance.
pub fn check_parseval((seed, log_seg, amp, bin, noise, pole, offset): PsdCase) -> Result<(), TestCaseError> {
    let segment = 1usize << log_seg;
    let len = 1usize << 18;
    let fs = 21.5;
    let f = (bin / segment as f64 * fs).min(0.45 * fs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = 0.0;
    let x: Vec<f64> = (0..len)
        .map(|i| {
            let w: f64 = rng.random::<f64>() - 0.5;
            state = pole * state + noise * w;
            offset + amp * (2.0 * std::f64::consts::PI * f * i as f64 / fs).sin() + state
        })
        .collect();
    let mean = x.iter().sum::<f64>() / len as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
    let spec = psd(&x, fs, segment, 0.5).unwrap();
    prop_assert!(spec.psd.iter().all(|&p| p >= 0.0));
    let total = spec.total_power();
    prop_assert!((total - var).abs() / var <= PARSEVAL_TOL, "integral {} variance {}", total, var);
    Ok(())
}

pub const LINEARITY_CASES: u32 = 24;
pub const SIM_CASES: u32 = 24;
pub const ATF_CASES: u32 = 256;
pub const PSD_CASES: u32 = 48;

/// Run every suite; one `(name, outcome)` per suite.
#[allow(dead_code)]
pub fn run_all() -> Vec<(&'static str, Result<(), String>)> {
    fn run<S: Strategy>(cases: u32, s: S, f: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
        TestRunner::new(config(cases)).run(&s, f).map_err(|e| e.to_string())
    }
    vec![
        ("estimator linearity", run(LINEARITY_CASES, linearity_cases(), check_linearity)),
        ("estimator time invariance", run(LINEARITY_CASES, shift_cases(), check_time_invariance)),
        ("PSD Parseval", run(PSD_CASES, psd_cases(), check_parseval)),
        ("simulator determinism", run(SIM_CASES, sim_cases(), check_determinism)),
        ("ATF product form", run(ATF_CASES, atf_cases(), check_atf)),
    ]
}
