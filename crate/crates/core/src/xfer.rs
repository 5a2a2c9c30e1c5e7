//! Signal and noise transfer functions, bandwidth, and white-noise
//! performance predictions.
//!
//! Bands are given one-sided (`0 ≤ lo < hi`, rad/s) and integrated two-sided,
//! i.e. over `lo ≤ |ω| ≤ hi`.

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CMat;
use crate::model::{atf, resolvent_solve, AnalogSystem};

/// Relative tolerance of the noise quadratures.
pub const QUAD_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TransferPoint {
    pub omega: f64,
    /// k×k signal transfer function.
    pub stf: CMat,
    /// k×m noise transfer function.
    pub ntf: CMat,
    pub eta2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo >= 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::InvalidParameter(format!("invalid band [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    /// `[0, ω_hi]`.
    pub fn baseband(hi: f64) -> Result<Self> {
        Self::new(0.0, hi)
    }
}

/// NTF from an ATF sample: `Gᴴ/(‖G‖² + η²)` for scalar inputs, else
/// `(Gᴴ G + η² I)^{-1} Gᴴ`.
pub fn ntf_from_atf(g: &CMat, eta2: f64) -> CMat {
    if g.ncols() == 1 {
        let denom = g.norm_squared() + eta2;
        g.adjoint() / Complex64::new(denom, 0.0)
    } else {
        let k = g.ncols();
        let mut gram = g.adjoint() * g;
        for i in 0..k {
            gram[(i, i)] += Complex64::new(eta2, 0.0);
        }
        gram.cholesky()
            .expect("Gᴴ G + η² I is positive definite for η² > 0")
            .solve(&g.adjoint())
    }
}

/// The NTF through the explicit m×m inverse, valid for any k.
pub fn ntf_general_from_atf(g: &CMat, eta2: f64) -> CMat {
    let m = g.nrows();
    let mut gram = g * g.adjoint();
    for i in 0..m {
        gram[(i, i)] += Complex64::new(eta2, 0.0);
    }
    let inv = gram
        .try_inverse()
        .expect("G Gᴴ + η² I is positive definite for η² > 0");
    g.adjoint() * inv
}

fn check_eta2(eta2: f64) -> Result<()> {
    if eta2 > 0.0 && eta2.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("eta2 must be positive, got {eta2}")))
    }
}

pub fn ntf(system: &AnalogSystem, eta2: f64, omega: f64) -> Result<CMat> {
    check_eta2(eta2)?;
    Ok(ntf_from_atf(&atf(system, omega)?.g, eta2))
}

pub fn stf(system: &AnalogSystem, eta2: f64, omega: f64) -> Result<CMat> {
    check_eta2(eta2)?;
    let g = atf(system, omega)?.g;
    Ok(ntf_from_atf(&g, eta2) * g)
}

/// Scalar-input STF `‖G‖²/(‖G‖² + η²)`; tends to 1 at poles of G.
pub fn stf_scalar(system: &AnalogSystem, eta2: f64, omega: f64) -> Result<f64> {
    check_eta2(eta2)?;
    if system.inputs() != 1 {
        return Err(Error::Dimension("scalar STF needs a single input".into()));
    }
    match atf(system, omega) {
        Ok(s) => {
            let g2 = s.g.norm_squared();
            Ok(g2 / (g2 + eta2))
        }
        Err(Error::Pole { .. }) => Ok(1.0),
        Err(e) => Err(e),
    }
}

pub fn transfer_point(system: &AnalogSystem, eta2: f64, omega: f64) -> Result<TransferPoint> {
    check_eta2(eta2)?;
    let g = atf(system, omega)?.g;
    let h = ntf_from_atf(&g, eta2);
    let stf = &h * &g;
    Ok(TransferPoint { omega, stf, ntf: h, eta2 })
}

/// Bandwidth `ω_crit` solving `‖G(ω_crit)‖ = η` by bisection on `log ω`
/// over `[r·1e-6, r·1e3]`, `r` the system's characteristic rate.
pub fn bandwidth(system: &AnalogSystem, eta2: f64) -> Result<f64> {
    check_eta2(eta2)?;
    let r = system.characteristic_rate();
    bandwidth_in(system, eta2, r * 1e-6, r * 1e3)
}

pub fn bandwidth_in(system: &AnalogSystem, eta2: f64, lo: f64, hi: f64) -> Result<f64> {
    let ln_eta = 0.5 * eta2.ln();
    let f = |w: f64| -> Result<f64> { Ok(atf(system, w)?.norm().ln() - ln_eta) };
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let (fa, fb) = (f(lo)?, f(hi)?);
    if !(fa > 0.0 && fb < 0.0) {
        return Err(Error::NotBracketed { lo, hi });
    }
    for _ in 0..400 {
        let mid = 0.5 * (a + b);
        if f(mid.exp())? > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
        if b - a < 1e-14 {
            break;
        }
    }
    Ok((0.5 * (a + b)).exp())
}

/// `ω_crit = |β| / η^{1/n}` for an undamped chain with scalar readout.
pub fn chain_bandwidth(beta: f64, eta: f64, n: usize) -> f64 {
    beta.abs() / eta.powf(1.0 / n as f64)
}

/// `η = ((γ/π)·OSR)ⁿ`.
pub fn eta_from_osr(gamma: f64, osr: f64, n: usize) -> Result<f64> {
    if !(gamma > 0.0 && osr > 0.0 && n >= 1) {
        return Err(Error::InvalidParameter("gamma, osr must be positive and n >= 1".into()));
    }
    Ok((gamma / std::f64::consts::PI * osr).powi(n as i32))
}

/// `OSR = (1/T) / (2 f_crit) = π / (T ω_crit)`.
pub fn osr_from_bandwidth(omega_crit: f64, t: f64) -> f64 {
    std::f64::consts::PI / (t * omega_crit)
}

/// Conversion-noise prediction over a band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePrediction {
    pub band: Band,
    /// `(σ²/2π) ∫_B 1/‖G‖² dω`.
    pub s_n: f64,
    /// `(σ²/2π) ∫_B ‖G‖²/(‖G‖² + η²)² dω`, the form before the in-band
    /// approximation.
    pub s_n_white: f64,
    pub sigma2_y_b: f64,
    /// Analytic value of `s_n` for undamped chains read at the last state.
    pub closed_form: Option<f64>,
    /// Per-source powers of additional noise sources, if any were included.
    pub contributions: Vec<f64>,
    /// Set when `‖G‖ < η` somewhere in the band.
    pub band_exceeds_bandwidth: bool,
}

/// `σ²_{y|B} ≈ α T (2b)²/12`.
pub fn sigma2_from_alpha(alpha: f64, t: f64, b: f64) -> f64 {
    alpha * t * (2.0 * b).powi(2) / 12.0
}

/// Closed-form in-band conversion noise of an undamped chain over
/// `|ω| ≤ ω_crit`: `(σ²/T)(1/(2n+1))(π/γ)^{2n} OSR^{-(2n+1)}`.
pub fn closed_form_conversion_noise(sigma2: f64, t: f64, n: usize, gamma: f64, osr: f64) -> f64 {
    let n2 = 2 * n as i32;
    sigma2 / t / (n2 + 1) as f64 * (std::f64::consts::PI / gamma).powi(n2) * osr.powi(-(n2 + 1))
}

fn inv_g2(system: &AnalogSystem, w: f64) -> Result<f64> {
    match atf(system, w) {
        Ok(s) => Ok(1.0 / s.g.norm_squared()),
        Err(Error::Pole { .. }) => Ok(0.0),
        Err(e) => Err(e),
    }
}

fn ntf_power(system: &AnalogSystem, eta2: f64, w: f64) -> Result<f64> {
    match atf(system, w) {
        Ok(s) => {
            let g2 = s.g.norm_squared();
            Ok(g2 / (g2 + eta2).powi(2))
        }
        Err(Error::Pole { .. }) => Ok(0.0),
        Err(e) => Err(e),
    }
}

pub fn predict_conversion_noise(
    system: &AnalogSystem,
    eta2: f64,
    band: Band,
    sigma2_y_b: f64,
) -> Result<NoisePrediction> {
    check_eta2(eta2)?;
    if system.inputs() != 1 {
        return Err(Error::Dimension("noise prediction needs a scalar input".into()));
    }
    let scale = sigma2_y_b / (2.0 * std::f64::consts::PI) * 2.0;
    let s_n = scale * integrate(|w| inv_g2(system, w), band.lo, band.hi, QUAD_REL_TOL)?;
    let s_n_white = scale * integrate(|w| ntf_power(system, eta2, w), band.lo, band.hi, QUAD_REL_TOL)?;
    let closed_form = system.pure_chain_gain().map(|gain| {
        let n = system.order() as i32;
        let p = 2 * n + 1;
        scale * (band.hi.powi(p) - band.lo.powi(p)) / (p as f64 * gain * gain)
    });
    let eta = eta2.sqrt();
    let band_exceeds_bandwidth = [band.lo, 0.5 * (band.lo + band.hi), band.hi]
        .iter()
        .filter(|&&w| w > 0.0)
        .any(|&w| atf(system, w).map(|s| s.norm() < eta * (1.0 - 1e-9)).unwrap_or(false));
    Ok(NoisePrediction {
        band,
        s_n,
        s_n_white,
        sigma2_y_b,
        closed_form,
        contributions: Vec::new(),
        band_exceeds_bandwidth,
    })
}

/// White-noise SNR approximation for a chain, in dB:
/// `α^{-1} (3A²/2b²)(2n+1)(γ/π)^{2n} OSR^{2n+1}`.
pub fn predict_snr_db(amplitude: f64, bound: f64, n: usize, gamma: f64, osr: f64, alpha: f64) -> f64 {
    let n2 = 2 * n as i32;
    let snr = 1.0 / alpha * 3.0 * amplitude * amplitude / (2.0 * bound * bound)
        * (n2 + 1) as f64
        * (gamma / std::f64::consts::PI).powi(n2)
        * osr.powi(n2 + 1);
    10.0 * snr.log10()
}

/// A white noise source entering the analog system at one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSource {
    /// 1-based stage index.
    pub stage: usize,
    /// Gain with which the source drives the stage's derivative (β_ℓ for a
    /// chain).
    pub gain: f64,
    /// Coupling factor λ (1 for thermal noise).
    #[serde(default = "one")]
    pub lambda: f64,
    /// In-band PSD σ²_{z|B}.
    pub sigma2: f64,
}

fn one() -> f64 {
    1.0
}

/// ATF from a source at `stage` (1-based) to the outputs: `Cᵀ(iωI − A)^{-1} e_ℓ g λ`.
pub fn source_atf(system: &AnalogSystem, source: &NoiseSource, omega: f64) -> Result<CMat> {
    let n = system.order();
    if source.stage == 0 || source.stage > n {
        return Err(Error::InvalidParameter(format!("stage {} out of range 1..={n}", source.stage)));
    }
    let mut e = crate::linalg::Mat::zeros(n, 1);
    e[(source.stage - 1, 0)] = source.gain * source.lambda;
    let x = resolvent_solve(&system.a, omega, &e)?;
    Ok(system.c_t.map(|v| Complex64::new(v, 0.0)) * x)
}

/// Integrand `‖Gᴴ G_z‖² / (‖G‖² + η²)²` of the thermal-noise contribution.
pub fn thermal_integrand(system: &AnalogSystem, eta2: f64, source: &NoiseSource, omega: f64) -> Result<f64> {
    let g = match atf(system, omega) {
        Ok(s) => s.g,
        Err(Error::Pole { .. }) => return Ok(pole_limit_thermal(system, eta2, source, omega)),
        Err(e) => return Err(e),
    };
    let gz = source_atf(system, source, omega)?;
    let num = (g.adjoint() * gz).norm_squared();
    Ok(num / (g.norm_squared() + eta2).powi(2))
}

// Approach the pole from a slightly shifted frequency; the integrand is
// continuous there.
fn pole_limit_thermal(system: &AnalogSystem, eta2: f64, source: &NoiseSource, omega: f64) -> f64 {
    let delta = system.characteristic_rate().max(1.0) * 1e-9;
    thermal_integrand(system, eta2, source, omega + delta).unwrap_or(0.0)
}

pub fn predict_thermal_noise(system: &AnalogSystem, eta2: f64, source: &NoiseSource, band: Band) -> Result<f64> {
    check_eta2(eta2)?;
    if source.lambda == 0.0 || source.sigma2 == 0.0 {
        return Ok(0.0);
    }
    let scale = source.sigma2 / (2.0 * std::f64::consts::PI) * 2.0;
    Ok(scale * integrate(|w| thermal_integrand(system, eta2, source, w), band.lo, band.hi, QUAD_REL_TOL)?)
}

/// Total contribution of several independent sources (powers add).
pub fn predict_thermal_noise_total(
    system: &AnalogSystem,
    eta2: f64,
    sources: &[NoiseSource],
    band: Band,
) -> Result<(f64, Vec<f64>)> {
    let parts = sources
        .iter()
        .map(|s| predict_thermal_noise(system, eta2, s, band))
        .collect::<Result<Vec<_>>>()?;
    Ok((parts.iter().sum(), parts))
}

/// `λ = 1 − nominal/actual`.
pub fn mismatch_lambda(nominal: f64, actual: f64) -> f64 {
    1.0 - nominal / actual
}

/// White-noise models for the signals driving the mismatch error terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MismatchInputModel {
    /// In-band PSD of the input u.
    pub input_psd: f64,
    /// In-band PSD of each control signal (≈ T for ±1 controls).
    pub control_psd: f64,
}

/// In-band powers `(ε_g̃, ε_q̃)` of the two mismatch error terms: the STF
/// modification `h̃ ∗ (g − g̃) ∗ u` and the control term
/// `h̃ ∗ Σ_ℓ (g̃_{qℓ} − g_{qℓ}) ∗ s_ℓ`, both under white-noise assumptions.
pub fn predict_mismatch_noise(
    nominal: &AnalogSystem,
    actual: &AnalogSystem,
    eta2: f64,
    band: Band,
    model: MismatchInputModel,
) -> Result<(f64, f64)> {
    check_eta2(eta2)?;
    if nominal.order() != actual.order()
        || nominal.inputs() != actual.inputs()
        || nominal.outputs() != actual.outputs()
        || nominal.controls() != actual.controls()
    {
        return Err(Error::Dimension("nominal and actual systems differ in shape".into()));
    }
    let shift = nominal.characteristic_rate().max(1.0) * 1e-9;
    let eval = |w: f64| -> Result<(f64, f64)> {
        let w = if atf(nominal, w).is_err() || atf(actual, w).is_err() { w + shift } else { w };
        let g_nom = atf(nominal, w)?.g;
        let g_act = atf(actual, w)?.g;
        let h = ntf_from_atf(&g_nom, eta2);
        let eg = (&h * (&g_act - &g_nom)).norm_squared();
        let c_nom = nominal.c_t.map(|v| Complex64::new(v, 0.0));
        let c_act = actual.c_t.map(|v| Complex64::new(v, 0.0));
        let q_nom = c_nom * resolvent_solve(&nominal.a, w, &nominal.gamma)?;
        let q_act = c_act * resolvent_solve(&actual.a, w, &actual.gamma)?;
        let eq = (&h * (q_nom - q_act)).norm_squared();
        Ok((eg, eq))
    };
    let scale = 2.0 / (2.0 * std::f64::consts::PI);
    let eg = integrate(|w| eval(w).map(|p| p.0), band.lo, band.hi, QUAD_REL_TOL)?;
    let eq = integrate(|w| eval(w).map(|p| p.1), band.lo, band.hi, QUAD_REL_TOL)?;
    Ok((scale * model.input_psd * eg, scale * model.control_psd * eq))
}

/// Frequency grid with STF magnitude and per-output NTF magnitudes.
pub fn response_grid(system: &AnalogSystem, eta2: f64, omegas: &[f64]) -> Result<Vec<(f64, f64, DVector<f64>)>> {
    omegas
        .iter()
        .map(|&w| {
            let tp = transfer_point(system, eta2, w)?;
            let stf_mag = tp.stf.norm();
            let ntf_mags = DVector::from_iterator(tp.ntf.ncols(), tp.ntf.row(0).iter().map(|z| z.norm()));
            Ok((w, stf_mag, ntf_mags))
        })
        .collect()
}

/// Adaptive Simpson quadrature over `[a, b]` on a log-spaced pre-grid.
/// The integrand is assumed nonnegative-ish and smooth on each panel.
pub fn integrate<F>(f: F, a: f64, b: f64, rel_tol: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    if b <= a {
        return Ok(0.0);
    }
    let mut edges = Vec::new();
    let panels = 48;
    let start = if a > 0.0 { a } else { b * 1e-6 };
    if a == 0.0 {
        edges.push(0.0);
    }
    let ratio = (b / start).ln();
    for i in 0..=panels {
        edges.push(start * (ratio * i as f64 / panels as f64).exp());
    }
    *edges.last_mut().unwrap() = b;
    let mut total = 0.0;
    for w in edges.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let fa = f(lo)?;
        let fm = f(0.5 * (lo + hi))?;
        let fb = f(hi)?;
        let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
        total += simpson_rec(&f, lo, hi, fa, fm, fb, whole, rel_tol, 50)?;
    }
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm)?;
    let frm = f(rm)?;
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let both = left + right;
    let err = both - whole;
    if depth == 0 || err.abs() <= 15.0 * tol * both.abs() || (b - a) <= f64::EPSILON * b.abs() * 8.0 {
        return Ok(both + err / 15.0);
    }
    Ok(simpson_rec(f, a, m, fa, flm, fm, left, tol, depth - 1)?
        + simpson_rec(f, m, b, fm, frm, fb, right, tol, depth - 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_chain, ChainSpec, Readout};

    fn chain(n: usize, beta: f64, readout: Readout) -> AnalogSystem {
        build_chain(&ChainSpec::uniform(n, beta, 1.0), readout, 1.0).unwrap()
    }

    #[test]
    fn scalar_hand_values() {
        let sys = chain(1, 1.0, Readout::LastState);
        let h = ntf(&sys, 1.0, 1.0).unwrap();
        assert!((h[(0, 0)] - Complex64::new(0.0, 0.5)).norm() < 1e-15);
        let s = stf(&sys, 1.0, 1.0).unwrap();
        assert!((s[(0, 0)] - Complex64::new(0.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn zero_atf_gives_zero_ntf() {
        let g = CMat::zeros(3, 1);
        assert_eq!(ntf_from_atf(&g, 2.0), CMat::zeros(1, 3));
    }

    #[test]
    fn matrix_inversion_lemma_form_agrees() {
        let sys = chain(4, 10.0, Readout::AllStates);
        for w in [4.0, 6.0, 9.0, 40.0] {
            let g = atf(&sys, w).unwrap().g;
            let a = ntf_from_atf(&g, 104.3);
            let b = ntf_general_from_atf(&g, 104.3);
            assert!((&a - &b).norm() <= 1e-10 * b.norm(), "{}", (&a - &b).norm() / b.norm());
        }
    }

    #[test]
    fn stf_limits() {
        let sys = chain(5, 10.0, Readout::LastState);
        let eta2 = 104.3;
        let wc = bandwidth(&sys, eta2).unwrap();
        assert!((stf_scalar(&sys, eta2, wc).unwrap() - 0.5).abs() < 1e-10);
        assert!((stf_scalar(&sys, eta2, 10.0 * 1e-4).unwrap() - 1.0).abs() < 1e-9);
        let tp = transfer_point(&sys, eta2, wc).unwrap();
        let ratio = tp.stf[(0, 0)].re / tp.ntf.norm();
        assert!((ratio - eta2.sqrt()).abs() < 1e-8 * eta2.sqrt());
    }

    #[test]
    fn bandwidth_closed_form() {
        let sys = chain(5, 10.0, Readout::LastState);
        let wc = bandwidth(&sys, 104.3).unwrap();
        let closed = chain_bandwidth(10.0, 104.3f64.sqrt(), 5);
        assert!((wc - closed).abs() < 1e-9 * closed);
        assert!((closed - 6.2832).abs() < 1e-3);

        let sys = chain(1, 7.0, Readout::LastState);
        let wc = bandwidth(&sys, 4.0).unwrap();
        assert!((wc - 3.5).abs() < 1e-9 * 3.5);
    }

    #[test]
    fn bandwidth_all_states_is_close_to_proxy() {
        let sys = chain(5, 10.0, Readout::AllStates);
        let wc = bandwidth(&sys, 104.3).unwrap();
        let proxy = chain_bandwidth(10.0, 104.3f64.sqrt(), 5);
        assert!((wc - proxy).abs() < 0.1 * proxy, "{wc} vs {proxy}");
    }

    #[test]
    fn bandwidth_not_bracketed() {
        let sys = chain(2, 10.0, Readout::LastState);
        assert!(matches!(bandwidth_in(&sys, 1.0, 100.0, 1000.0), Err(Error::NotBracketed { .. })));
    }

    #[test]
    fn eta_from_osr_examples() {
        let g = 10.0 / 21.5;
        let eta = eta_from_osr(g, 32.0, 5).unwrap();
        assert!((eta - (g / std::f64::consts::PI * 32.0).powi(5)).abs() < 1e-9 * eta);
        assert!((eta - 2386.5).abs() < 0.5, "{eta}");
        assert!((eta_from_osr(g, std::f64::consts::PI / g, 4).unwrap() - 1.0).abs() < 1e-14);
        assert!((eta_from_osr(0.3, 12.0, 1).unwrap() - 0.3 * 12.0 / std::f64::consts::PI).abs() < 1e-15);

        // Round trip through the designed bandwidth.
        let sys = chain(5, 10.0, Readout::LastState);
        let wc = bandwidth(&sys, eta * eta).unwrap();
        assert!((osr_from_bandwidth(wc, 1.0 / 21.5) - 32.0).abs() < 1e-6);
    }

    #[test]
    fn conversion_noise_n1_hand_integral() {
        let sys = chain(1, 1.0, Readout::LastState);
        let wc = 0.8;
        let p = predict_conversion_noise(&sys, 0.01, Band::baseband(wc).unwrap(), 2.0).unwrap();
        let expected = 2.0 * wc.powi(3) / (3.0 * std::f64::consts::PI);
        assert!((p.s_n - expected).abs() < 1e-8 * expected);
        assert!((p.closed_form.unwrap() - expected).abs() < 1e-12 * expected);
        assert!(!p.band_exceeds_bandwidth);
    }

    #[test]
    fn conversion_noise_closed_form_matches_osr_expression() {
        let t = 1.0 / 21.5;
        let gamma = 10.0 * t;
        for n in 1..=6 {
            let eta = eta_from_osr(gamma, 32.0, n).unwrap();
            let sys = chain(n, 10.0, Readout::LastState);
            let wc = chain_bandwidth(10.0, eta, n);
            let p = predict_conversion_noise(&sys, eta * eta, Band::baseband(wc).unwrap(), 1.0).unwrap();
            let cf = closed_form_conversion_noise(1.0, t, n, gamma, 32.0);
            assert!((p.s_n - cf).abs() <= 1e-6 * cf, "n={n}");
            assert!((p.closed_form.unwrap() - cf).abs() <= 1e-10 * cf);
            // Doubling OSR scales by 2^{-(2n+1)}.
            let cf2 = closed_form_conversion_noise(1.0, t, n, gamma, 64.0);
            assert!((cf2 / cf - 2f64.powi(-(2 * n as i32 + 1))).abs() < 1e-14);
        }
    }

    #[test]
    fn band_beyond_bandwidth_is_flagged() {
        let sys = chain(3, 10.0, Readout::LastState);
        let p = predict_conversion_noise(&sys, 100.0, Band::baseband(100.0).unwrap(), 1.0).unwrap();
        assert!(p.band_exceeds_bandwidth);
    }

    #[test]
    fn snr_prediction_scalings() {
        let g = 10.0 / 21.5;
        let full = predict_snr_db(1.0, 1.0, 5, g, 32.0, 1.0);
        let half = predict_snr_db(0.5, 1.0, 5, g, 32.0, 1.0);
        assert!((full - half - 20.0 * 2f64.log10()).abs() < 1e-12);
        let a = predict_snr_db(1.0, 1.0, 1, g, 16.0, 1.0);
        let b = predict_snr_db(1.0, 1.0, 1, g, 32.0, 1.0);
        assert!((b - a - 30.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn thermal_noise_properties() {
        let n = 3;
        let beta = 10.0;
        let sys = chain(n, beta, Readout::LastState);
        let eta2 = 1e4;
        let band = Band::baseband(3.0).unwrap();
        let src = NoiseSource { stage: n, gain: beta, lambda: 1.0, sigma2: 1e-6 };
        let off = NoiseSource { lambda: 0.0, ..src };
        assert_eq!(predict_thermal_noise(&sys, eta2, &off, band).unwrap(), 0.0);
        let single = predict_thermal_noise(&sys, eta2, &src, band).unwrap();
        assert!(single > 0.0);
        let (total, parts) = predict_thermal_noise_total(&sys, eta2, &[src, src], band).unwrap();
        assert_eq!(parts.len(), 2);
        assert!((total - 2.0 * single).abs() <= 1e-15 * total);
    }

    #[test]
    fn thermal_integrand_n1_hand_reduction() {
        // n = 1: |G|⁴/(|G|² + η²)² = β⁴/(β² + η²ω²)².
        let beta = 4.0;
        let eta2 = 9.0;
        let sys = chain(1, beta, Readout::LastState);
        let src = NoiseSource { stage: 1, gain: beta, lambda: 1.0, sigma2: 1.0 };
        for w in [0.1, 1.3, 7.0] {
            let got = thermal_integrand(&sys, eta2, &src, w).unwrap();
            let hand = beta.powi(4) / (beta * beta + eta2 * w * w).powi(2);
            assert!((got - hand).abs() < 1e-13 * hand);
        }
    }

    #[test]
    fn mismatch_lambda_and_zero_mismatch() {
        assert!((mismatch_lambda(0.98, 1.0) - 0.02).abs() < 1e-15);
        let sys = chain(3, 10.0, Readout::LastState);
        let model = MismatchInputModel { input_psd: 1.0, control_psd: 0.05 };
        let (eg, eq) = predict_mismatch_noise(&sys, &sys, 1e4, Band::baseband(2.0).unwrap(), model).unwrap();
        assert_eq!((eg, eq), (0.0, 0.0));
    }

    #[test]
    fn kappa_mismatch_is_control_dominated() {
        let t = 1.0 / 21.5;
        let eta = eta_from_osr(10.0 * t, 32.0, 5).unwrap();
        let spec = ChainSpec::uniform(5, 10.0, 1.05);
        let nominal = build_chain(&spec, Readout::LastState, 1.0).unwrap();
        let mut actual_spec = spec.clone();
        actual_spec.kappa[0] *= 1.02;
        let actual = build_chain(&actual_spec, Readout::LastState, 1.0).unwrap();
        let band = Band::baseband(chain_bandwidth(10.0, eta, 5)).unwrap();
        let model = MismatchInputModel { input_psd: 1.0, control_psd: t };
        let (eg, eq) = predict_mismatch_noise(&nominal, &actual, eta * eta, band, model).unwrap();
        assert!(eq > 0.0);
        assert!(eq > eg);
    }
}
