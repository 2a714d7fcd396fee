//! Dense linear-algebra kernels shared by the rest of the crate: matrix
//! exponentials, Hurwitz (spectral abscissa) checks, and the stationary
//! covariance of a linear diffusion.
//!
//! Everything operates on real dense matrices of dimension at most 16.
//! That cap is a deliberate desk-scale contract: it keeps Kronecker
//! systems (dimension d^2) tiny and lets every routine favour clarity and
//! checkable residuals over asymptotic speed.

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

/// Largest state dimension accepted anywhere in the crate.
pub const MAX_DIMENSION: usize = 16;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix entries must be finite")]
    NonFinite,
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension {0} exceeds the supported maximum of {MAX_DIMENSION}")]
    DimensionTooLarge(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("eigenvalue iteration failed to converge")]
    EigenFailed,
    #[error(
        "matrix is not Hurwitz: eigenvalue {re:.6}{im:+.6}i has nonnegative real part"
    )]
    NotHurwitz { re: f64, im: f64 },
    #[error("linear solve failed: {0}")]
    SolveFailed(String),
}

fn check_square(a: &DMatrix<f64>) -> Result<usize, LinalgError> {
    if a.nrows() != a.ncols() {
        return Err(LinalgError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    let d = a.nrows();
    if d == 0 || d > MAX_DIMENSION {
        return Err(LinalgError::DimensionTooLarge(d));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    Ok(d)
}

/// Matrix exponential `exp(a * t)` by scaling-and-squaring with a degree-13
/// Pade approximant.  Relative accuracy on well-conditioned inputs is
/// better than 1e-10, which downstream propagator cross-checks rely on.
pub fn mat_exp(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>, LinalgError> {
    let d = check_square(a)?;
    if !t.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let m = a * t;
    if m.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    // One-norm based scaling: bring ||M / 2^s|| under ~0.5 before the Pade
    // step, then square s times.
    let norm = m
        .column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = &m / 2.0_f64.powi(s as i32);
    let mut result = pade_13(&scaled, d);
    for _ in 0..s {
        result = &result * &result;
    }
    Ok(result)
}

/// Degree-13 Pade approximant of `exp(m)`, accurate to machine precision
/// for `||m|| <= 0.5`.
fn pade_13(m: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    const B: [f64; 14] = [
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
    let id = DMatrix::<f64>::identity(d, d);
    let m2 = m * m;
    let m4 = &m2 * &m2;
    let m6 = &m4 * &m2;
    let u_inner = &m6 * (B[13] * &m6 + B[11] * &m4 + B[9] * &m2)
        + B[7] * &m6
        + B[5] * &m4
        + B[3] * &m2
        + B[1] * &id;
    let u = m * u_inner;
    let v = &m6 * (B[12] * &m6 + B[10] * &m4 + B[8] * &m2)
        + B[6] * &m6
        + B[4] * &m4
        + B[2] * &m2
        + B[0] * &id;
    let num = &v + &u;
    let den = &v - &u;
    den.lu()
        .solve(&num)
        .expect("Pade denominator is nonsingular for scaled inputs")
}

/// Operator norm (largest singular value).
pub fn operator_norm(a: &DMatrix<f64>) -> f64 {
    if a.iter().all(|x| *x == 0.0) {
        return 0.0;
    }
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0_f64, f64::max)
}

/// Complex eigenvalues of a real square matrix.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex<f64>>, LinalgError> {
    check_square(a)?;
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), 1e-14, 10_000)
        .ok_or(LinalgError::EigenFailed)?;
    let eigs = schur
        .complex_eigenvalues()
        .iter()
        .copied()
        .collect::<Vec<_>>();
    Ok(eigs)
}

/// Whether every eigenvalue has strictly negative real part, together
/// with the spectral abscissa (largest real part).
pub fn hurwitz_check(a: &DMatrix<f64>) -> Result<(bool, f64), LinalgError> {
    let eigs = eigenvalues(a)?;
    let abscissa = eigs.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    Ok((abscissa < 0.0, abscissa))
}

/// Stationary covariance `P` of the linear diffusion `dX = A X dt + G dW`:
/// the unique symmetric solution of `A P + P A' + G G' = 0` for Hurwitz
/// `A`.  Solved as a dense Kronecker system of dimension d^2, which is
/// exact up to the LU solve and cheap for d <= 16.
pub fn lyapunov_stationary_cov(
    a: &DMatrix<f64>,
    g: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LinalgError> {
    let d = check_square(a)?;
    if g.nrows() != d {
        return Err(LinalgError::DimensionMismatch(format!(
            "noise matrix has {} rows, drift matrix is {}x{}",
            g.nrows(),
            d,
            d
        )));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let (stable, abscissa) = hurwitz_check(a)?;
    if !stable {
        let eigs = eigenvalues(a)?;
        let worst = eigs
            .iter()
            .copied()
            .max_by(|x, y| x.re.total_cmp(&y.re))
            .unwrap_or(Complex::new(abscissa, 0.0));
        return Err(LinalgError::NotHurwitz {
            re: worst.re,
            im: worst.im,
        });
    }
    let q = g * g.transpose();
    // vec(A P + P A') = (I (x) A + A (x) I) vec(P) with column-major vec.
    let mut k = DMatrix::<f64>::zeros(d * d, d * d);
    // I (x) A part: vec(A P)[col d + r] = sum_c A[r, c] P[c, col].
    for col in 0..d {
        for row in 0..d {
            for r in 0..d {
                k[(col * d + r, col * d + row)] += a[(r, row)];
            }
        }
    }
    // A (x) I part: vec(P A')[j d + i] = sum_r A[j, r] P[i, r].
    for i in 0..d {
        for j in 0..d {
            for r in 0..d {
                k[(j * d + i, r * d + i)] += a[(j, r)];
            }
        }
    }
    let rhs = DVector::<f64>::from_iterator(d * d, (0..d * d).map(|idx| -q[(idx % d, idx / d)]));
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| LinalgError::SolveFailed("Kronecker system is singular".into()))?;
    let mut p = DMatrix::<f64>::zeros(d, d);
    for col in 0..d {
        for row in 0..d {
            p[(row, col)] = sol[col * d + row];
        }
    }
    // Symmetrize away the LU round-off; the true solution is symmetric.
    let p = 0.5 * (&p + &p.transpose());
    let residual = operator_norm(&(a * &p + &p * a.transpose() + &q));
    let scale = 1.0 + q.norm();
    if residual > 1e-10 * scale {
        return Err(LinalgError::SolveFailed(format!(
            "stationary covariance residual {residual:.3e} exceeds 1e-10 * (1 + ||GG'||)"
        )));
    }
    Ok(p)
}

/// Symmetric positive-semidefinite square root.  Eigenvalues within
/// round-off below zero are clamped; anything more negative is an error.
pub fn symmetric_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let d = check_square(m)?;
    if m.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let asym = (m - m.transpose()).norm();
    if asym > 1e-10 * (1.0 + m.norm()) {
        return Err(LinalgError::DimensionMismatch(format!(
            "matrix is not symmetric (asymmetry {asym:.3e})"
        )));
    }
    let sym = 0.5 * (m + m.transpose());
    let eig = nalgebra::linalg::SymmetricEigen::new(sym);
    let floor = -1e-10 * (1.0 + m.norm());
    let mut roots = DVector::<f64>::zeros(d);
    for (r, lambda) in roots.iter_mut().zip(eig.eigenvalues.iter()) {
        if *lambda < floor {
            return Err(LinalgError::SolveFailed(format!(
                "matrix has negative eigenvalue {lambda:.3e}"
            )));
        }
        *r = lambda.max(0.0).sqrt();
    }
    let mut scaled = eig.eigenvectors.clone();
    for (mut col, r) in scaled.column_iter_mut().zip(roots.iter()) {
        col *= *r;
    }
    Ok(&scaled * eig.eigenvectors.transpose())
}
