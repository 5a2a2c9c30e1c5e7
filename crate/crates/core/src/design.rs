//! Offline computation of the estimation-filter coefficients.

use nalgebra::{DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    condition_number, eigen_decompose, expm_integral, spectral_norm, spectral_radius, symmetrize, to_complex, CMat,
    Mat,
};
use crate::model::AnalogSystem;

/// Residual target for both Riccati equations, relative to `‖BBᵀ‖_F`.
pub const CARE_REL_TOL: f64 = 1e-10;
/// Largest eigenvector condition number accepted for the parallel form.
pub const MAX_EIGVEC_COND: f64 = 1e8;
/// Largest order for which lookup tables are built.
pub const MAX_LOOKUP_ORDER: usize = 12;

const MAX_ITERATIONS: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CareSolution {
    pub v: Mat,
    /// `‖R(V)‖_F / ‖BBᵀ‖_F`.
    pub residual: f64,
    /// `‖R(V)‖_F` over the sum of the Frobenius norms of its terms; this is
    /// what floating point can resolve.
    pub term_residual: f64,
    pub iterations: usize,
}

struct CareTerms {
    a: Mat,
    q: Mat,
    g: Mat,
}

impl CareTerms {
    fn new(a: &Mat, b: &Mat, c_t: &Mat, eta2: f64, direction: Direction) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || b.nrows() != n || c_t.ncols() != n {
            return Err(Error::Dimension("Riccati matrices have inconsistent shapes".into()));
        }
        if !(eta2 > 0.0 && eta2.is_finite()) {
            return Err(Error::InvalidParameter(format!("eta2 must be positive, got {eta2}")));
        }
        let a = match direction {
            Direction::Forward => a.clone(),
            Direction::Backward => -a,
        };
        Ok(Self { a, q: b * b.transpose(), g: c_t.transpose() * c_t / eta2 })
    }

    fn residual(&self, v: &Mat) -> Mat {
        let av = &self.a * v;
        &av + av.transpose() + &self.q - v * &self.g * v
    }

    fn term_scale(&self, v: &Mat) -> f64 {
        let av = &self.a * v;
        2.0 * av.norm() + self.q.norm() + (v * &self.g * v).norm()
    }
}

/// Residual `AV + (AV)ᵀ + BBᵀ − V C Cᵀ V/η²` (with `A → −A` backwards).
pub fn care_residual(a: &Mat, b: &Mat, c_t: &Mat, eta2: f64, direction: Direction, v: &Mat) -> Result<Mat> {
    Ok(CareTerms::new(a, b, c_t, eta2, direction)?.residual(v))
}

/// Solve the filter Riccati equation by the damped fixed-point iteration
/// `V ← V + τ R(V)` from `V₀ = ‖B‖₂ η I`.
///
/// The residual along the iteration is not monotone (it rises during the
/// initial transient), so τ is adapted over windows of steps: a window whose
/// residual grows tenfold is rolled back and τ halved, otherwise τ grows by
/// 25%. The best iterate is kept. The iteration stops at the residual target or once the residual
/// stops improving (floating-point floor); in the latter case the solution
/// is accepted only if the residual is at rounding level relative to the
/// magnitude of the equation's terms.
pub fn care_solve(a: &Mat, b: &Mat, c_t: &Mat, eta2: f64, direction: Direction) -> Result<CareSolution> {
    const WINDOW: usize = 50;
    const DIVERGENCE_GROWTH: f64 = 10.0;
    let terms = CareTerms::new(a, b, c_t, eta2, direction)?;
    let n = a.nrows();
    let q_norm = terms.q.norm();
    if q_norm == 0.0 {
        return Ok(CareSolution { v: Mat::zeros(n, n), residual: 0.0, term_residual: 0.0, iterations: 0 });
    }
    let target = CARE_REL_TOL * q_norm;
    let mut v = Mat::identity(n, n) * (spectral_norm(b) * eta2.sqrt());
    let mut r = terms.residual(&v);
    let mut rn = r.norm();
    let a_cl = &terms.a - &v * &terms.g;
    let mut tau = 0.1 / spectral_norm(&a_cl).max(f64::MIN_POSITIVE);
    let mut checkpoint = (v.clone(), rn);
    let mut best = (v.clone(), rn);
    let mut stalls = 0usize;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS && best.1 > target {
        let step = tau.min(euler_step_limit(&(&terms.a - &v * &terms.g)));
        for _ in 0..WINDOW {
            v = symmetrize(&(&v + &r * step));
            r = terms.residual(&v);
            iterations += 1;
            if r.norm() <= target {
                break;
            }
        }
        rn = r.norm();
        if !rn.is_finite() || rn > DIVERGENCE_GROWTH * checkpoint.1 {
            v = checkpoint.0.clone();
            r = terms.residual(&v);
            tau = step * 0.5;
        } else {
            checkpoint = (v.clone(), rn);
            tau = step * 1.25;
        }
        // Only windows near the best residual count as stalls; during the
        // initial transient the residual sits far above it.
        if rn < 0.9 * best.1 {
            stalls = 0;
        } else if rn < 10.0 * best.1 {
            stalls += 1;
        }
        if rn < best.1 {
            best = (v.clone(), rn);
        }
        if stalls > 100 || tau < f64::MIN_POSITIVE {
            break;
        }
    }
    let (v, rn) = best;
    let term_residual = rn / terms.term_scale(&v);
    let residual = rn / q_norm;
    if residual > CARE_REL_TOL && term_residual > 1e-12 {
        return Err(Error::NoConvergence { iterations, residual });
    }
    check_psd(&v)?;
    Ok(CareSolution { v, residual, term_residual, iterations })
}

// Largest stable explicit-Euler step for the linearized iteration, whose
// modes are μ_i + μ_j over eigenvalue pairs of the closed-loop matrix; 90%
// of the bound over the decaying modes.
fn euler_step_limit(a_cl: &Mat) -> f64 {
    let mu = a_cl.complex_eigenvalues();
    let mut limit = f64::INFINITY;
    for i in 0..mu.len() {
        for j in i..mu.len() {
            let nu = mu[i] + mu[j];
            if nu.re < 0.0 {
                limit = limit.min(-2.0 * nu.re / nu.norm_sqr());
            }
        }
    }
    0.9 * limit
}

fn check_psd(v: &Mat) -> Result<()> {
    let eig = SymmetricEigen::new(v.clone()).eigenvalues;
    let min = eig.min();
    let max = eig.max().abs().max(f64::MIN_POSITIVE);
    if min < -1e-9 * max {
        return Err(Error::Indefinite { min_eig: min });
    }
    Ok(())
}

/// Independent Riccati solve through the stable invariant subspace of the
/// Hamiltonian matrix, found with the scaled Newton iteration for the matrix
/// sign function. Used to cross-check [`care_solve`].
pub fn care_hamiltonian(a: &Mat, b: &Mat, c_t: &Mat, eta2: f64, direction: Direction) -> Result<Mat> {
    let terms = CareTerms::new(a, b, c_t, eta2, direction)?;
    let n = a.nrows();
    // Diagonal state scaling keeps the Hamiltonian entries comparable.
    let d = state_scaling(&terms);
    let d_inv = d.map(|x| 1.0 / x);
    let a_s = Mat::from_fn(n, n, |i, j| terms.a[(i, j)] * d_inv[i] * d[j]);
    let q_s = Mat::from_fn(n, n, |i, j| terms.q[(i, j)] * d_inv[i] * d_inv[j]);
    let g_s = Mat::from_fn(n, n, |i, j| terms.g[(i, j)] * d[i] * d[j]);

    let mut h = Mat::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(&a_s.transpose());
    h.view_mut((0, n), (n, n)).copy_from(&(-&g_s));
    h.view_mut((n, 0), (n, n)).copy_from(&(-&q_s));
    h.view_mut((n, n), (n, n)).copy_from(&(-&a_s));

    let w = matrix_sign(&h)?;
    let i = Mat::identity(n, n);
    let mut lhs = Mat::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w.view((n, n), (n, n)) + &i));
    let mut rhs = Mat::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w.view((0, 0), (n, n)) + &i)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w.view((n, 0), (n, n))));
    let x_s = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Singular(format!("Hamiltonian subspace: {e}")))?;
    let x = Mat::from_fn(n, n, |i, j| x_s[(i, j)] * d[i] * d[j]);
    Ok(symmetrize(&x))
}

// Scale state ℓ by the geometric mean of the diagonal terms of Q and G^{-1}
// that it couples to, so that the scaled Riccati solution is O(1)-ish.
fn state_scaling(terms: &CareTerms) -> DVector<f64> {
    let n = terms.a.nrows();
    let q_diag = (0..n).map(|i| terms.q[(i, i)]).fold(0.0, f64::max);
    let g_diag = (0..n).map(|i| terms.g[(i, i)]).fold(0.0, f64::max);
    if q_diag == 0.0 || g_diag == 0.0 {
        return DVector::from_element(n, 1.0);
    }
    // For integrator-like structure the solution grows geometrically along
    // the state index; estimate the per-index growth from the overall ratio.
    let total = (q_diag / g_diag).sqrt();
    let growth = total.powf(1.0 / n as f64);
    let base = (q_diag.sqrt() / growth).max(f64::MIN_POSITIVE);
    let mut d = DVector::from_fn(n, |i, _| (base * growth.powi(2 * i as i32 + 1)).sqrt());
    if !d.iter().all(|x| x.is_finite() && *x > 0.0) {
        d = DVector::from_element(n, 1.0);
    }
    d
}

fn matrix_sign(h: &Mat) -> Result<Mat> {
    let dim = h.nrows();
    let mut z = h.clone();
    for _ in 0..200 {
        let lu = z.clone().lu();
        let det = lu.determinant();
        let zi = lu
            .try_inverse()
            .ok_or_else(|| Error::Singular("Hamiltonian has eigenvalues on the imaginary axis".into()))?;
        let c = if det.is_finite() && det != 0.0 { det.abs().powf(-1.0 / dim as f64) } else { 1.0 };
        let next = (&z * c + &zi / c) * 0.5;
        let delta = (&next - &z).norm();
        z = next;
        if delta <= 1e-14 * z.norm() {
            let lu = z.clone().lu();
            let zi = lu.try_inverse().ok_or_else(|| Error::Singular("sign iteration".into()))?;
            return Ok((&z + zi) * 0.5);
        }
    }
    Err(Error::NoConvergence { iterations: 200, residual: f64::NAN })
}

/// Zero-order-hold pair `(e^{A_cl T_u}, ∫₀^{T_u} e^{A_cl (T_u − t)} Γ dt)`.
pub fn discretize(a_cl: &Mat, gamma: &Mat, t_u: f64) -> Result<(Mat, Mat)> {
    if !(t_u > 0.0 && t_u.is_finite()) {
        return Err(Error::InvalidParameter(format!("T_u must be positive, got {t_u}")));
    }
    if gamma.nrows() != a_cl.nrows() {
        return Err(Error::Dimension("Γ rows must match the state dimension".into()));
    }
    Ok(expm_integral(a_cl, gamma, t_u))
}

/// `W` solving `(V_f + V_b) W = B`.
pub fn solve_w(vf: &Mat, vb: &Mat, b: &Mat) -> Result<Mat> {
    let sum = vf + vb;
    if b.iter().all(|x| *x == 0.0) {
        return Ok(Mat::zeros(b.nrows(), b.ncols()));
    }
    let lu = sum.lu();
    let w = lu.solve(b).ok_or_else(|| Error::Singular("Vf + Vb".into()))?;
    if !w.iter().all(|x| x.is_finite()) {
        return Err(Error::Singular("Vf + Vb".into()));
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterCoefficients {
    pub af: Mat,
    pub bf: Mat,
    pub ab: Mat,
    pub bb: Mat,
    pub w: Mat,
    pub vf: Mat,
    pub vb: Mat,
    pub t_u: f64,
    pub eta2: f64,
}

impl FilterCoefficients {
    pub fn order(&self) -> usize {
        self.af.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn controls(&self) -> usize {
        self.bf.ncols()
    }
}

/// Quality figures of a design, checked against the gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignDiagnostics {
    pub residual_f: f64,
    pub residual_b: f64,
    pub term_residual_f: f64,
    pub term_residual_b: f64,
    pub iterations_f: usize,
    pub iterations_b: usize,
    pub rho_f: f64,
    pub rho_b: f64,
    pub w_residual: f64,
}

impl DesignDiagnostics {
    /// Names of the failed gates; empty when all pass.
    pub fn failed_gates(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.residual_f > CARE_REL_TOL {
            out.push("forward Riccati residual");
        }
        if self.residual_b > CARE_REL_TOL {
            out.push("backward Riccati residual");
        }
        if self.rho_f >= 1.0 {
            out.push("forward spectral radius");
        }
        if self.rho_b >= 1.0 {
            out.push("backward spectral radius");
        }
        if self.w_residual > 1e-12 {
            out.push("W residual");
        }
        out
    }
}

/// Full offline design for estimate period `t_u`.
pub fn design(system: &AnalogSystem, eta2: f64, t_u: f64) -> Result<(FilterCoefficients, DesignDiagnostics)> {
    let fwd = care_solve(&system.a, &system.b, &system.c_t, eta2, Direction::Forward)?;
    let bwd = care_solve(&system.a, &system.b, &system.c_t, eta2, Direction::Backward)?;
    design_from_riccati(system, eta2, t_u, &fwd, &bwd)
}

/// Build the coefficients from already solved Riccati equations.
pub fn design_from_riccati(
    system: &AnalogSystem,
    eta2: f64,
    t_u: f64,
    fwd: &CareSolution,
    bwd: &CareSolution,
) -> Result<(FilterCoefficients, DesignDiagnostics)> {
    let cct = system.c_ct() / eta2;
    let af_cl = &system.a - &fwd.v * &cct;
    let ab_cl = -(&system.a + &bwd.v * &cct);
    let (af, bf) = discretize(&af_cl, &system.gamma, t_u)?;
    let (ab, bb) = discretize(&ab_cl, &(-&system.gamma), t_u)?;
    let w = solve_w(&fwd.v, &bwd.v, &system.b)?;
    let b_norm = system.b.norm();
    let w_residual = if b_norm == 0.0 { 0.0 } else { ((&fwd.v + &bwd.v) * &w - &system.b).norm() / b_norm };
    let diag = DesignDiagnostics {
        residual_f: fwd.residual,
        residual_b: bwd.residual,
        term_residual_f: fwd.term_residual,
        term_residual_b: bwd.term_residual,
        iterations_f: fwd.iterations,
        iterations_b: bwd.iterations,
        rho_f: spectral_radius(&af),
        rho_b: spectral_radius(&ab),
        w_residual,
    };
    let coeffs = FilterCoefficients { af, bf, ab, bb, w, vf: fwd.v.clone(), vb: bwd.v.clone(), t_u, eta2 };
    Ok((coeffs, diag))
}

/// Diagonalized recursions.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelForm {
    pub lambda_f: Vec<Complex64>,
    pub lambda_b: Vec<Complex64>,
    /// `Q_f^{-1} B_f`, n×(controls).
    pub qf_inv_bf: CMat,
    pub qb_inv_bb: CMat,
    /// `−Q_fᵀ W`, n×k.
    pub wf: CMat,
    /// `Q_bᵀ W`, n×k.
    pub wb: CMat,
    pub qf: CMat,
    pub qb: CMat,
    pub lookup: Option<LookupTables>,
    pub t_u: f64,
}

/// Precomputed `Q^{-1} B s` for every binary control vector. Entry index bit
/// `j` set means `s_j = +1`, cleared means `s_j = −1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTables {
    pub forward: Vec<DVector<Complex64>>,
    pub backward: Vec<DVector<Complex64>>,
}

pub fn lookup_index(s: &[f64]) -> Result<usize> {
    let mut idx = 0usize;
    for (j, &v) in s.iter().enumerate() {
        if v == 1.0 {
            idx |= 1 << j;
        } else if v != -1.0 {
            return Err(Error::NonBinaryControls);
        }
    }
    Ok(idx)
}

fn build_table(m: &CMat) -> Vec<DVector<Complex64>> {
    let p = m.ncols();
    (0..1usize << p)
        .map(|idx| {
            let mut acc = DVector::zeros(m.nrows());
            for j in 0..p {
                let col = m.column(j);
                if idx & (1 << j) != 0 {
                    acc += col;
                } else {
                    acc -= col;
                }
            }
            acc
        })
        .collect()
}

/// Eigendecompose `A_f` and `A_b`; refuses ill-conditioned eigenvector
/// matrices.
pub fn parallelize(coeffs: &FilterCoefficients) -> Result<ParallelForm> {
    let (lambda_f, qf) = eigen_decompose(&coeffs.af)?;
    let (lambda_b, qb) = eigen_decompose(&coeffs.ab)?;
    for q in [&qf, &qb] {
        let cond = condition_number(q);
        if !(cond <= MAX_EIGVEC_COND) {
            return Err(Error::IllConditioned { cond });
        }
    }
    let qf_inv = qf.clone().try_inverse().ok_or_else(|| Error::Singular("Q_f".into()))?;
    let qb_inv = qb.clone().try_inverse().ok_or_else(|| Error::Singular("Q_b".into()))?;
    let qf_inv_bf = &qf_inv * to_complex(&coeffs.bf);
    let qb_inv_bb = &qb_inv * to_complex(&coeffs.bb);
    let w = to_complex(&coeffs.w);
    let wf = -(qf.transpose() * &w);
    let wb = qb.transpose() * &w;
    let lookup = (coeffs.controls() <= MAX_LOOKUP_ORDER)
        .then(|| LookupTables { forward: build_table(&qf_inv_bf), backward: build_table(&qb_inv_bb) });
    Ok(ParallelForm { lambda_f, lambda_b, qf_inv_bf, qb_inv_bb, wf, wb, qf, qb, lookup, t_u: coeffs.t_u })
}

impl ParallelForm {
    pub fn order(&self) -> usize {
        self.lambda_f.len()
    }

    /// `Q Λ Q^{-1}` for the forward and backward state matrices.
    pub fn reconstruct(&self) -> (CMat, CMat) {
        let rec = |q: &CMat, l: &[Complex64]| {
            let lam = CMat::from_diagonal(&DVector::from_column_slice(l));
            q * lam * q.clone().try_inverse().expect("checked at construction")
        };
        (rec(&self.qf, &self.lambda_f), rec(&self.qb, &self.lambda_b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_chain, ChainSpec, Readout};
    use crate::xfer::eta_from_osr;

    fn rel(a: &Mat, b: &Mat) -> f64 {
        (a - b).norm() / b.norm()
    }

    fn n2_closed(beta: f64, eta: f64) -> (Mat, Mat, Mat) {
        let s = (2.0 * eta).sqrt();
        let vf = Mat::from_row_slice(2, 2, &[beta * s, beta * eta, beta * eta, beta * eta * s]);
        let vb = Mat::from_row_slice(2, 2, &[beta * s, -beta * eta, -beta * eta, beta * eta * s]);
        let w = Mat::from_column_slice(2, 1, &[1.0 / (2.0 * s), 0.0]);
        (vf, vb, w)
    }

    fn chain(n: usize, beta: f64, kappa: f64) -> AnalogSystem {
        build_chain(&ChainSpec::uniform(n, beta, kappa), Readout::LastState, 1.0).unwrap()
    }

    #[test]
    fn n2_closed_form() {
        for beta in [1.0, 10.0, 6250.0] {
            for eta in [2.0, 10.21, 100.0] {
                let sys = chain(2, beta, 1.0);
                let (vf, vb, w) = n2_closed(beta, eta);
                let f = care_solve(&sys.a, &sys.b, &sys.c_t, eta * eta, Direction::Forward).unwrap();
                let b = care_solve(&sys.a, &sys.b, &sys.c_t, eta * eta, Direction::Backward).unwrap();
                assert!(rel(&f.v, &vf) < 1e-9, "beta={beta} eta={eta}: {}", rel(&f.v, &vf));
                assert!(rel(&b.v, &vb) < 1e-9);
                let got_w = solve_w(&f.v, &b.v, &sys.b).unwrap();
                assert!(rel(&got_w, &w) < 1e-9);
            }
        }
    }

    #[test]
    fn n1_closed_form() {
        let (beta, eta) = (3.0, 7.0);
        let sys = chain(1, beta, 1.0);
        let f = care_solve(&sys.a, &sys.b, &sys.c_t, eta * eta, Direction::Forward).unwrap();
        let b = care_solve(&sys.a, &sys.b, &sys.c_t, eta * eta, Direction::Backward).unwrap();
        assert!((f.v[(0, 0)] - beta * eta).abs() < 1e-10 * beta * eta);
        assert!((b.v[(0, 0)] - beta * eta).abs() < 1e-10 * beta * eta);
        let w = solve_w(&f.v, &b.v, &sys.b).unwrap();
        assert!((w[(0, 0)] - 1.0 / (2.0 * eta)).abs() < 1e-12);
    }

    #[test]
    fn zero_forcing() {
        let sys = chain(3, 2.0, 1.0);
        let b = Mat::zeros(3, 1);
        let f = care_solve(&sys.a, &b, &sys.c_t, 4.0, Direction::Forward).unwrap();
        assert_eq!(f.v, Mat::zeros(3, 3));
        assert_eq!(solve_w(&Mat::identity(3, 3), &Mat::identity(3, 3), &b).unwrap(), b);
    }

    #[test]
    fn hamiltonian_matches_closed_form() {
        let (beta, eta) = (10.0, 10.21);
        let sys = chain(2, beta, 1.0);
        let (vf, vb, _) = n2_closed(beta, eta);
        let hf = care_hamiltonian(&sys.a, &sys.b, &sys.c_t, eta * eta, Direction::Forward).unwrap();
        let hb = care_hamiltonian(&sys.a, &sys.b, &sys.c_t, eta * eta, Direction::Backward).unwrap();
        assert!(rel(&hf, &vf) < 1e-10, "{}", rel(&hf, &vf));
        assert!(rel(&hb, &vb) < 1e-10);
    }

    #[test]
    fn iteration_agrees_with_hamiltonian_all_states() {
        let sys = build_chain(&ChainSpec::uniform(4, 10.0, 1.05), Readout::AllStates, 1.0).unwrap();
        let eta2 = 104.3;
        for dir in [Direction::Forward, Direction::Backward] {
            let it = care_solve(&sys.a, &sys.b, &sys.c_t, eta2, dir).unwrap();
            let h = care_hamiltonian(&sys.a, &sys.b, &sys.c_t, eta2, dir).unwrap();
            assert!(rel(&it.v, &h) < 1e-8, "{dir:?}: {}", rel(&it.v, &h));
        }
    }

    #[test]
    fn discretize_scalar_closed_form() {
        let (beta, eta, kappa, t) = (10.0, 50.0, 1.05, 1.0 / 21.5);
        let a_cl = Mat::from_element(1, 1, -beta / eta);
        let gamma = Mat::from_element(1, 1, -kappa * beta);
        let (af, bf) = discretize(&a_cl, &gamma, t).unwrap();
        let e = (-beta * t / eta).exp();
        assert!((af[(0, 0)] - e).abs() < 1e-15);
        let expected = -kappa * eta * (1.0 - e);
        assert!((bf[(0, 0)] - expected).abs() < 1e-13 * expected.abs());
        let (_, zero) = discretize(&a_cl, &Mat::zeros(1, 1), t).unwrap();
        assert_eq!(zero[(0, 0)], 0.0);
        assert!(discretize(&a_cl, &gamma, 0.0).is_err());
    }

    #[test]
    fn discretize_small_step_is_near_identity() {
        let a = Mat::from_row_slice(2, 2, &[-1.0, 0.5, 2.0, -3.0]);
        let t = 1e-6;
        let (af, _) = discretize(&a, &Mat::identity(2, 2), t).unwrap();
        let dev = (&af - Mat::identity(2, 2)).norm();
        assert!(dev <= a.norm() * t * 1.01);
    }

    #[test]
    fn reference_designs_are_stable() {
        let t = 1.0 / 21.5;
        for n in 1..=6 {
            let eta = eta_from_osr(10.0 * t, 32.0, n).unwrap();
            let (_, diag) = design(&chain(n, 10.0, 1.05), eta * eta, t).unwrap();
            assert!(diag.rho_f < 1.0 && diag.rho_b < 1.0, "n={n}");
            assert!(diag.w_residual < 1e-12);
        }
    }

    #[test]
    fn parallel_reconstructs() {
        let t = 1.0 / 21.5;
        let eta = eta_from_osr(10.0 * t, 32.0, 2).unwrap();
        let (c, _) = design(&chain(2, 10.0, 1.05), eta * eta, t).unwrap();
        let p = parallelize(&c).unwrap();
        let (rf, rb) = p.reconstruct();
        assert!((rf - to_complex(&c.af)).norm() < 1e-10 * c.af.norm());
        assert!((rb - to_complex(&c.ab)).norm() < 1e-10 * c.ab.norm());
    }

    #[test]
    fn diagonal_state_matrix_gives_identity_vectors() {
        let c = FilterCoefficients {
            af: Mat::from_diagonal(&DVector::from_vec(vec![0.5, 0.25])),
            bf: Mat::identity(2, 2),
            ab: Mat::from_diagonal(&DVector::from_vec(vec![0.7, 0.1])),
            bb: Mat::identity(2, 2),
            w: Mat::from_column_slice(2, 1, &[1.0, 2.0]),
            vf: Mat::identity(2, 2),
            vb: Mat::identity(2, 2),
            t_u: 1.0,
            eta2: 1.0,
        };
        let p = parallelize(&c).unwrap();
        assert_eq!(p.lambda_f, vec![Complex64::new(0.5, 0.0), Complex64::new(0.25, 0.0)]);
        assert!((p.qf.clone() - CMat::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn lookup_tables() {
        let t = 1.0 / 21.5;
        let eta = eta_from_osr(10.0 * t, 32.0, 3).unwrap();
        let (c, _) = design(&chain(3, 10.0, 1.05), eta * eta, t).unwrap();
        let p = parallelize(&c).unwrap();
        let tables = p.lookup.as_ref().unwrap();
        assert_eq!(tables.forward.len(), 8);
        assert_eq!(tables.backward.len(), 8);
        let all_plus = lookup_index(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(all_plus, 7);
        let col_sum: DVector<Complex64> = p.qf_inv_bf.column_sum();
        assert!((&tables.forward[all_plus] - col_sum).norm() < 1e-14 * p.qf_inv_bf.norm());
        assert!(matches!(lookup_index(&[1.0, 0.5]), Err(Error::NonBinaryControls)));
    }

    #[test]
    fn ill_conditioned_eigenvectors_are_refused() {
        // A Jordan-like block with a tiny perturbation.
        let af = Mat::from_row_slice(2, 2, &[0.5, 1.0, 1e-20, 0.5]);
        let c = FilterCoefficients {
            af: af.clone(),
            bf: Mat::identity(2, 2),
            ab: af,
            bb: Mat::identity(2, 2),
            w: Mat::zeros(2, 1),
            vf: Mat::identity(2, 2),
            vb: Mat::identity(2, 2),
            t_u: 1.0,
            eta2: 1.0,
        };
        assert!(matches!(parallelize(&c), Err(Error::IllConditioned { .. }) | Err(Error::Singular(_))));
    }
}
