//! Analog systems under digital control.
//!
//! An [`AnalogSystem`] is the state-space model
//! `dx/dt = A x + B u + Γ s`, `y = Cᵀ x` together with the amplitude bounds
//! the digital control is meant to enforce. [`build_chain`] produces the
//! integrator-chain example, optionally with extra first-stage feedback of all
//! controls.

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CMat, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct AnalogSystem {
    /// State matrix, n×n, in 1/s.
    pub a: Mat,
    /// Input matrix, n×k, in 1/s.
    pub b: Mat,
    /// Control matrix, n×n, in 1/s.
    pub gamma: Mat,
    /// Readout selecting the control-bounded signals, m×n.
    pub c_t: Mat,
    /// Bound on every state variable.
    pub state_bound: f64,
    /// Bound on every input component.
    pub input_bound: f64,
}

impl AnalogSystem {
    pub fn new(a: Mat, b: Mat, gamma: Mat, c_t: Mat, state_bound: f64, input_bound: f64) -> Result<Self> {
        let n = a.nrows();
        if n == 0 {
            return Err(Error::InvalidParameter("state dimension must be at least 1".into()));
        }
        if !a.is_square() {
            return Err(Error::Dimension(format!("A is {}x{}, expected square", a.nrows(), a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::Dimension(format!("B has {} rows, expected {n}", b.nrows())));
        }
        if gamma.nrows() != n || gamma.ncols() != n {
            return Err(Error::Dimension(format!(
                "Gamma is {}x{}, expected {n}x{n}",
                gamma.nrows(),
                gamma.ncols()
            )));
        }
        if c_t.ncols() != n {
            return Err(Error::Dimension(format!("C^T has {} columns, expected {n}", c_t.ncols())));
        }
        if !(state_bound > 0.0) || !(input_bound > 0.0) {
            return Err(Error::InvalidParameter("bounds must be positive".into()));
        }
        if a.iter().chain(b.iter()).chain(gamma.iter()).chain(c_t.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("system matrices must be finite".into()));
        }
        Ok(Self { a, b, gamma, c_t, state_bound, input_bound })
    }

    /// State dimension n.
    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension k.
    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    /// Number of control-bounded outputs m.
    pub fn outputs(&self) -> usize {
        self.c_t.nrows()
    }

    /// Number of control signals (columns of Γ).
    pub fn controls(&self) -> usize {
        self.gamma.ncols()
    }

    /// `C Cᵀ` (n×n).
    pub fn c_ct(&self) -> Mat {
        self.c_t.transpose() * &self.c_t
    }

    /// A rate characterizing the system: the largest absolute entry of A or B.
    pub fn characteristic_rate(&self) -> f64 {
        self.a.iter().chain(self.b.iter()).fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    /// The product of stage gains when the system is an undamped integrator
    /// chain read out at its last state (so that `|G(ω)| = ∏β / |ω|ⁿ`).
    pub fn pure_chain_gain(&self) -> Option<f64> {
        let n = self.order();
        if self.inputs() != 1 || self.outputs() != 1 {
            return None;
        }
        for r in 0..n {
            for c in 0..n {
                let v = self.a[(r, c)];
                let allowed = r >= 1 && c == r - 1;
                if !allowed && v != 0.0 {
                    return None;
                }
            }
        }
        if (1..n).any(|r| self.b[(r, 0)] != 0.0) {
            return None;
        }
        if (0..n).any(|c| self.c_t[(0, c)] != if c == n - 1 { 1.0 } else { 0.0 }) {
            return None;
        }
        let mut prod = self.b[(0, 0)];
        for r in 1..n {
            prod *= self.a[(r, r - 1)];
        }
        (prod != 0.0).then_some(prod.abs())
    }
}

/// Which states are treated as control-bounded outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// `y = x_n` (m = 1).
    #[default]
    LastState,
    /// `y = x` (m = n).
    AllStates,
}

/// Parameters of an integrator chain with digital control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub n: usize,
    /// Per-stage gains β_ℓ (1/s).
    pub beta: Vec<f64>,
    /// Per-stage dampings ρ_ℓ ≥ 0 (1/s).
    #[serde(default)]
    pub rho: Vec<f64>,
    /// Per-stage control scale factors κ_ℓ.
    pub kappa: Vec<f64>,
    /// Extra first-stage feedback coefficients κ_{1,2}..κ_{1,n} (1/s).
    /// Empty means no extra feedback.
    #[serde(default)]
    pub feedback: Vec<f64>,
    #[serde(default = "default_bits")]
    pub quantizer_bits: u32,
    /// Threshold dither amplitude as a fraction of the state bound.
    #[serde(default)]
    pub dither_amplitude: f64,
}

fn default_bits() -> u32 {
    1
}

impl ChainSpec {
    /// A chain of `n` identical undamped stages without extra feedback.
    pub fn uniform(n: usize, beta: f64, kappa: f64) -> Self {
        Self {
            n,
            beta: vec![beta; n],
            rho: vec![0.0; n],
            kappa: vec![kappa; n],
            feedback: Vec::new(),
            quantizer_bits: 1,
            dither_amplitude: 0.0,
        }
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = vec![rho; self.n];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if n == 0 {
            return Err(Error::InvalidParameter("chain needs at least one stage".into()));
        }
        if self.beta.len() != n || self.kappa.len() != n {
            return Err(Error::Dimension(format!(
                "beta has {} and kappa {} entries, expected {n}",
                self.beta.len(),
                self.kappa.len()
            )));
        }
        if !self.rho.is_empty() && self.rho.len() != n {
            return Err(Error::Dimension(format!("rho has {} entries, expected {n}", self.rho.len())));
        }
        if !self.feedback.is_empty() && self.feedback.len() + 1 != n {
            return Err(Error::Dimension(format!(
                "feedback has {} entries, expected {}",
                self.feedback.len(),
                n - 1
            )));
        }
        if self.rho.iter().any(|&r| r < 0.0 || !r.is_finite()) {
            return Err(Error::InvalidParameter("dampings must be finite and nonnegative".into()));
        }
        if self.quantizer_bits == 0 || self.quantizer_bits > 16 {
            return Err(Error::InvalidParameter("quantizer_bits must be in 1..=16".into()));
        }
        if !(self.dither_amplitude >= 0.0) {
            return Err(Error::InvalidParameter("dither amplitude must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn rho_at(&self, l: usize) -> f64 {
        self.rho.get(l).copied().unwrap_or(0.0)
    }

    /// Sum of |κ_{1,ℓ}| over the extra feedback paths.
    pub fn feedback_total(&self) -> f64 {
        self.feedback.iter().map(|v| v.abs()).sum()
    }
}

/// Build the state-space model of an integrator chain.
///
/// `A` is lower bidiagonal (`-ρ_ℓ` on the diagonal, `β_{ℓ+1}` below it),
/// `B = (β_1, 0, …, 0)ᵀ`, `Γ = diag(-κ_ℓ β_ℓ)` with the extra feedback
/// entering the first row as `-κ_{1,ℓ}`.
pub fn build_chain(spec: &ChainSpec, readout: Readout, bound: f64) -> Result<AnalogSystem> {
    spec.validate()?;
    let n = spec.n;
    let mut a = Mat::zeros(n, n);
    let mut gamma = Mat::zeros(n, n);
    for l in 0..n {
        a[(l, l)] = -spec.rho_at(l);
        if l > 0 {
            a[(l, l - 1)] = spec.beta[l];
        }
        gamma[(l, l)] = -spec.kappa[l] * spec.beta[l];
    }
    for (j, &fb) in spec.feedback.iter().enumerate() {
        gamma[(0, j + 1)] = -fb;
    }
    let mut b = Mat::zeros(n, 1);
    b[(0, 0)] = spec.beta[0];
    let c_t = match readout {
        Readout::AllStates => Mat::identity(n, n),
        Readout::LastState => {
            let mut c = Mat::zeros(1, n);
            c[(0, n - 1)] = 1.0;
            c
        }
    };
    AnalogSystem::new(a, b, gamma, c_t, bound, bound)
}

/// One sample of the analog transfer function matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AtfSample {
    pub omega: f64,
    /// m×k.
    pub g: CMat,
}

impl AtfSample {
    /// Frobenius norm (the vector 2-norm when k = 1).
    pub fn norm(&self) -> f64 {
        self.g.norm()
    }
}

/// `(iωI − A)^{-1} X` for a real right-hand side, with pole detection.
pub(crate) fn resolvent_solve(a: &Mat, omega: f64, rhs: &Mat) -> Result<CMat> {
    let n = a.nrows();
    let mut m = CMat::from_fn(n, n, |r, c| Complex64::new(-a[(r, c)], 0.0));
    for k in 0..n {
        m[(k, k)] += Complex64::new(0.0, omega);
    }
    let scale = a.iter().fold(omega.abs(), |acc, v| acc.max(v.abs())).max(f64::MIN_POSITIVE);
    let dist = eigenvalues(a)
        .iter()
        .map(|l| (Complex64::new(0.0, omega) - l).norm())
        .fold(f64::INFINITY, f64::min);
    if dist <= 1e-13 * scale {
        return Err(Error::Pole { omega });
    }
    let lu = m.lu();
    let rhs = rhs.map(|v| Complex64::new(v, 0.0));
    lu.solve(&rhs).ok_or(Error::Pole { omega })
}

fn eigenvalues(a: &Mat) -> Vec<Complex64> {
    let n = a.nrows();
    let triangular = (0..n).all(|r| (r + 1..n).all(|c| a[(r, c)] == 0.0)) || (0..n).all(|r| (0..r).all(|c| a[(r, c)] == 0.0));
    if triangular {
        (0..n).map(|k| Complex64::new(a[(k, k)], 0.0)).collect()
    } else {
        a.complex_eigenvalues().iter().copied().collect()
    }
}

/// Evaluate `G(ω) = Cᵀ (iωI − A)^{-1} B`.
pub fn atf(system: &AnalogSystem, omega: f64) -> Result<AtfSample> {
    let x = resolvent_solve(&system.a, omega, &system.b)?;
    let c = system.c_t.map(|v| Complex64::new(v, 0.0));
    Ok(AtfSample { omega, g: c * x })
}

/// Per-stage ATF `G_k(ω) = ∏_{ℓ≤k} β_ℓ/(iω + ρ_ℓ)` of a chain, straight from
/// the product formula.
pub fn chain_atf_product(spec: &ChainSpec, omega: f64) -> DVector<Complex64> {
    let mut acc = Complex64::new(1.0, 0.0);
    DVector::from_iterator(
        spec.n,
        (0..spec.n).map(|l| {
            acc *= Complex64::new(spec.beta[l], 0.0) / Complex64::new(spec.rho_at(l), omega);
            acc
        }),
    )
}

/// Outcome of the stability check.
#[derive(Debug, Clone, PartialEq)]
pub enum Stability {
    Guaranteed,
    /// 1-based indices of the stages that fail the admissibility test.
    NotGuaranteed(Vec<usize>),
}

impl Stability {
    pub fn is_guaranteed(&self) -> bool {
        matches!(self, Stability::Guaranteed)
    }
}

/// Largest admissible `γ = T|β|` for an N-bit quantizer with `κ = b`.
pub fn gamma_max(bits: u32) -> f64 {
    1.0 / (2f64.powi(1 - bits as i32) + 1.0)
}

/// Per-stage admissibility of `γ_ℓ = T|β_ℓ|` for a clock period `t` and
/// state bound `b`.
///
/// A stage passes when the control dominates its worst-case drive,
/// `|κ_ℓ β_ℓ| ≥ |β_ℓ| b + F_ℓ`, and one clock period cannot carry the state
/// across the bound,
/// `T (|κ_ℓ β_ℓ| 2^{1−N} + |β_ℓ| b + F_ℓ) ≤ b (1 − d)`,
/// where `F_1 = Σ|κ_{1,ℓ}|` (zero for later stages) and `d` is the threshold
/// dither amplitude. For N = 1, no feedback and no dither this is exactly
/// `|κ_ℓ| ≥ b` and `T|β_ℓ|(|κ_ℓ| + b) ≤ b`.
pub fn check_stability(spec: &ChainSpec, t: f64, b: f64) -> Stability {
    let q = 2f64.powi(1 - spec.quantizer_bits as i32);
    let slack = 1.0 + 1e-12;
    let failed: Vec<usize> = (0..spec.n)
        .filter(|&l| {
            let beta = spec.beta[l].abs();
            let control = (spec.kappa[l] * spec.beta[l]).abs();
            let fb = if l == 0 { spec.feedback_total() } else { 0.0 };
            let dominance = control * slack >= beta * b + fb;
            let step = t * (control * q + beta * b + fb) <= b * (1.0 - spec.dither_amplitude) * slack;
            !(dominance && step)
        })
        .map(|l| l + 1)
        .collect();
    if failed.is_empty() {
        Stability::Guaranteed
    } else {
        Stability::NotGuaranteed(failed)
    }
}
