//! Dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type CMat = DMatrix<Complex64>;

const THETA_3: f64 = 1.495_585_217_958_292e-2;
const THETA_5: f64 = 2.539_398_330_063_230e-1;
const THETA_7: f64 = 9.504_178_996_162_932e-1;
const THETA_9: f64 = 2.097_847_961_257_068;
const THETA_13: f64 = 5.371_920_351_148_152;

const PADE_3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE_5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE_7: [f64; 8] = [
    17_297_280.0,
    8_648_640.0,
    1_995_840.0,
    277_200.0,
    25_200.0,
    1_512.0,
    56.0,
    1.0,
];
const PADE_9: [f64; 10] = [
    17_643_225_600.0,
    8_821_612_800.0,
    2_075_673_600.0,
    302_702_400.0,
    30_270_240.0,
    2_162_160.0,
    110_880.0,
    3_960.0,
    90.0,
    1.0,
];
const PADE_13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

fn norm1(a: &Mat) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with diagonal Padé
/// approximants of degree 3 to 13 (Higham's 2005 thresholds, unit-roundoff
/// backward error).
pub fn expm(a: &Mat) -> Mat {
    assert!(a.is_square(), "expm needs a square matrix");
    let n = a.nrows();
    if n == 0 {
        return Mat::zeros(0, 0);
    }
    let ident = Mat::identity(n, n);
    let nrm = norm1(a);
    if nrm == 0.0 {
        return ident;
    }

    let small: [(f64, &[f64]); 4] = [
        (THETA_3, &PADE_3),
        (THETA_5, &PADE_5),
        (THETA_7, &PADE_7),
        (THETA_9, &PADE_9),
    ];
    for (theta, coef) in small {
        if nrm <= theta {
            return pade_low(a, coef);
        }
    }

    let s = ((nrm / THETA_13).log2().ceil()).max(0.0) as i32;
    let scaled = a * 2f64.powi(-s);
    let b = &PADE_13;
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = &scaled * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];
    let mut r = pade_solve(&u, &v);
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

fn pade_low(a: &Mat, coef: &[f64]) -> Mat {
    let n = a.nrows();
    let ident = Mat::identity(n, n);
    let a2 = a * a;
    // Even powers of A up to the approximant degree.
    let mut powers = vec![ident.clone()];
    for k in 1..coef.len() / 2 {
        let next = &powers[k - 1] * &a2;
        powers.push(next);
    }
    let mut u_inner = Mat::zeros(n, n);
    let mut v = Mat::zeros(n, n);
    for (k, p) in powers.iter().enumerate() {
        u_inner += p * coef[2 * k + 1];
        v += p * coef[2 * k];
    }
    let u = a * u_inner;
    pade_solve(&u, &v)
}

fn pade_solve(u: &Mat, v: &Mat) -> Mat {
    let p = v + u;
    let q = v - u;
    q.lu()
        .solve(&p)
        .expect("Padé denominator is nonsingular for scaled arguments")
}

/// Exact zero-order-hold discretization of `dx/dt = A x + G w` over `t`:
/// returns `(e^{A t}, ∫_0^t e^{A (t - τ)} G dτ)` from one exponential of the
/// augmented block matrix `[[A, G], [0, 0]]`.
pub fn expm_integral(a: &Mat, g: &Mat, t: f64) -> (Mat, Mat) {
    let n = a.nrows();
    let p = g.ncols();
    assert_eq!(g.nrows(), n, "input matrix rows must match state dimension");
    let mut aug = Mat::zeros(n + p, n + p);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * t));
    aug.view_mut((0, n), (n, p)).copy_from(&(g * t));
    let e = expm(&aug);
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, p)).into_owned(),
    )
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

pub fn spectral_radius(m: &Mat) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// 2-norm condition number of a complex matrix.
pub fn condition_number(m: &CMat) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn to_complex(m: &Mat) -> CMat {
    m.map(|v| Complex64::new(v, 0.0))
}

/// Eigendecomposition `A = Q Λ Q^{-1}` of a real, diagonalizable matrix.
///
/// Eigenvalues come from the real Schur form; eigenvectors from inverse
/// iteration, normalized to unit 2-norm. Conjugate eigenvalue pairs get
/// conjugate eigenvectors.
pub fn eigen_decompose(a: &Mat) -> Result<(Vec<Complex64>, CMat)> {
    let n = a.nrows();
    if !a.is_square() {
        return Err(Error::Dimension("eigendecomposition of a non-square matrix".into()));
    }
    let mut lambdas: Vec<Complex64> = a.complex_eigenvalues().iter().copied().collect();
    // Deterministic ordering: descending modulus, then by imaginary part.
    lambdas.sort_by(|x, y| {
        y.norm()
            .partial_cmp(&x.norm())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(y.im.partial_cmp(&x.im).unwrap_or(std::cmp::Ordering::Equal))
    });
    let scale = norm1(a).max(f64::MIN_POSITIVE);
    let ac = to_complex(a);
    let mut q = CMat::zeros(n, n);
    let mut done = vec![false; n];
    for i in 0..n {
        if done[i] {
            continue;
        }
        let lam = lambdas[i];
        let v = inverse_iteration(&ac, lam, scale)?;
        q.set_column(i, &v);
        done[i] = true;
        if lam.im.abs() > 1e-14 * scale {
            // Pair with the conjugate partner.
            if let Some(j) = (i + 1..n).find(|&j| {
                !done[j] && (lambdas[j] - lam.conj()).norm() <= 1e-9 * scale.max(lam.norm())
            }) {
                lambdas[j] = lam.conj();
                q.set_column(j, &v.map(|z| z.conj()));
                done[j] = true;
            }
        }
    }
    Ok((lambdas, q))
}

fn inverse_iteration(a: &CMat, lam: Complex64, scale: f64) -> Result<DVector<Complex64>> {
    let n = a.nrows();
    let shift = lam + Complex64::new(1.0, 0.5) * (scale * 1e-13);
    let mut m = a.clone();
    for k in 0..n {
        m[(k, k)] -= shift;
    }
    let lu = m.lu();
    let mut v = DVector::from_fn(n, |i, _| Complex64::new(1.0 + 0.1 * i as f64, 0.05 * i as f64));
    for _ in 0..3 {
        let w = lu
            .solve(&v)
            .ok_or_else(|| Error::Singular("inverse iteration".into()))?;
        let nrm = w.norm();
        if !nrm.is_finite() || nrm == 0.0 {
            return Err(Error::Singular("inverse iteration".into()));
        }
        v = w / Complex64::new(nrm, 0.0);
    }
    // Fix the phase so the largest component is real positive.
    let (imax, _) = v
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (i, z)| if z.norm() > acc.1 { (i, z.norm()) } else { acc });
    let ph = v[imax] / Complex64::new(v[imax].norm(), 0.0);
    Ok(v.map(|z| z / ph))
}

/// Solve the Lyapunov-type equation `A X + X Aᵀ + Q = 0` through the
/// Kronecker-product linear system. Meant for small state dimensions.
pub fn lyapunov(a: &Mat, q: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let nn = n * n;
    let mut k = Mat::zeros(nn, nn);
    // vec is column-major: vec(A X) = (I ⊗ A) vec X, vec(X Aᵀ) = (A ⊗ I) vec X.
    for col in 0..n {
        for row in 0..n {
            let idx = col * n + row;
            for r in 0..n {
                k[(col * n + r, idx)] += a[(r, row)];
                k[(r * n + row, idx)] += a[(r, col)];
            }
        }
    }
    let rhs = DVector::from_iterator(nn, q.iter().map(|v| -v));
    let x = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("Lyapunov operator".into()))?;
    Ok(Mat::from_column_slice(n, n, x.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::assert_close;

    mod approx_eq {
        macro_rules! assert_close {
            ($a:expr, $b:expr, $tol:expr) => {{
                let (a, b): (f64, f64) = ($a, $b);
                assert!((a - b).abs() <= $tol * (1.0 + b.abs()), "{a} vs {b}");
            }};
        }
        pub(crate) use assert_close;
    }

    fn taylor_expm(a: &Mat) -> Mat {
        // Plain Taylor series with squaring; an independent reference.
        let n = a.nrows();
        let s = 12;
        let scaled = a / 2f64.powi(s);
        let mut term = Mat::identity(n, n);
        let mut sum = Mat::identity(n, n);
        for k in 1..30 {
            term = &term * &scaled / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn expm_matches_taylor_reference() {
        for scale in [1e-3, 0.1, 1.0, 7.5, 40.0] {
            let a = Mat::from_row_slice(3, 3, &[-1.0, 0.3, 0.0, 2.0, -0.5, 0.1, 0.0, 1.5, -2.0])
                * scale;
            let e = expm(&a);
            let r = taylor_expm(&a);
            let err = (&e - &r).norm() / r.norm();
            assert!(err < 1e-11, "scale {scale}: {err}");
        }
    }

    #[test]
    fn expm_scalar_and_rotation() {
        let e = expm(&Mat::from_element(1, 1, -0.7));
        assert_close!(e[(0, 0)], (-0.7f64).exp(), 1e-15);
        let w = 3.0;
        let e = expm(&Mat::from_row_slice(2, 2, &[0.0, -w, w, 0.0]));
        assert_close!(e[(0, 0)], w.cos(), 1e-14);
        assert_close!(e[(1, 0)], w.sin(), 1e-14);
    }

    #[test]
    fn zoh_integral_scalar() {
        let (phi, psi) = expm_integral(&Mat::from_element(1, 1, -2.0), &Mat::from_element(1, 1, 3.0), 0.5);
        assert_close!(phi[(0, 0)], (-1.0f64).exp(), 1e-15);
        assert_close!(psi[(0, 0)], 3.0 * (1.0 - (-1.0f64).exp()) / 2.0, 1e-15);
    }

    #[test]
    fn eigen_decomposition_reconstructs() {
        let a = Mat::from_row_slice(3, 3, &[0.9, -0.2, 0.0, 0.3, 0.8, 0.1, 0.0, 0.05, 0.5]);
        let (lam, q) = eigen_decompose(&a).unwrap();
        let qi = q.clone().try_inverse().unwrap();
        let l = CMat::from_diagonal(&DVector::from_vec(lam));
        let rec = &q * l * qi;
        let err = (rec - to_complex(&a)).norm();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn lyapunov_solves() {
        let a = Mat::from_row_slice(2, 2, &[-1.0, 0.0, 2.0, -3.0]);
        let q = Mat::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0]);
        let x = lyapunov(&a, &q).unwrap();
        let res = &a * &x + &x * a.transpose() + &q;
        assert!(res.norm() < 1e-13);
    }
}
