//! Inertial-parameter representations and the smooth maps among them.
//!
//! Three equivalent views of a link's inertia are used throughout:
//!
//! * standard parameters `pi` (mass, first mass moment, rotational inertia
//!   about the link-frame origin),
//! * the symmetric pseudo-inertia matrix, whose positive definiteness is
//!   equivalent to physical (density-realizable) consistency,
//! * an unconstrained Log-Cholesky vector `theta` parameterizing an
//!   upper-triangular factor of the pseudo-inertia.
//!
//! Both the full 3D forms and the planar (4-parameter) analogs used by the
//! planar dynamics core are provided, together with closed-form Jacobians.

use nalgebra::{Matrix2, Matrix3, Matrix4, SMatrix, SVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum InertiaError {
    #[error("non-finite entry in inertial input")]
    NonFinite,
    #[error("inertial parameters are not physically consistent: {0}")]
    Inconsistent(String),
}

/// Standard inertial parameters of one 3D link:
/// `[m, h_x, h_y, h_z, I_xx, I_yy, I_zz, I_xy, I_yz, I_xz]`.
///
/// `h = m c` is the first mass moment and `I` is taken about the link-frame
/// origin (not the COM).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InertialParams3D {
    pub pi: SVector<f64, 10>,
}

/// Symmetric 4x4 pseudo-inertia `[[Sigma, h], [h^T, m]]` with
/// `Sigma = 1/2 tr(I) 1 - I`. Positive definite iff the parameters are
/// physically consistent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoInertia3D {
    pub p: Matrix4<f64>,
}

/// Unconstrained Log-Cholesky vector
/// `[alpha, d1, d2, d3, s12, s23, s13, t1, t2, t3]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogCholeskyParams3D {
    pub theta: SVector<f64, 10>,
}

/// Planar inertial parameters `[m, h_x, h_y, I_z]` with `I_z` about the
/// link-frame origin (out-of-plane axis).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InertialParams2D {
    pub pi2: SVector<f64, 4>,
}

/// Planar Log-Cholesky vector `[alpha, d1, d2, s12, t1, t2]` parameterizing
/// the upper-triangular factor of the 3x3 planar pseudo-inertia.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogCholeskyParams2D {
    pub theta2: SVector<f64, 6>,
}

impl InertialParams2D {
    pub fn new(m: f64, hx: f64, hy: f64, iz: f64) -> Self {
        Self {
            pi2: SVector::<f64, 4>::new(m, hx, hy, iz),
        }
    }
    pub fn mass(&self) -> f64 {
        self.pi2[0]
    }
    pub fn h(&self) -> (f64, f64) {
        (self.pi2[1], self.pi2[2])
    }
    pub fn iz(&self) -> f64 {
        self.pi2[3]
    }
}

impl LogCholeskyParams2D {
    pub fn zeros() -> Self {
        Self {
            theta2: SVector::<f64, 6>::zeros(),
        }
    }
}

fn upper_factor_3d(theta: &SVector<f64, 10>) -> Matrix4<f64> {
    let (alpha, d1, d2, d3) = (theta[0], theta[1], theta[2], theta[3]);
    let (s12, s23, s13) = (theta[4], theta[5], theta[6]);
    let (t1, t2, t3) = (theta[7], theta[8], theta[9]);
    let ea = alpha.exp();
    ea * Matrix4::new(
        d1.exp(),
        s12,
        s13,
        t1,
        0.0,
        d2.exp(),
        s23,
        t2,
        0.0,
        0.0,
        d3.exp(),
        t3,
        0.0,
        0.0,
        0.0,
        1.0,
    )
}

fn pseudo_to_pi_vec(p: &Matrix4<f64>) -> SVector<f64, 10> {
    let sigma = p.fixed_view::<3, 3>(0, 0).into_owned();
    let h = p.fixed_view::<3, 1>(0, 3).into_owned();
    let m = p[(3, 3)];
    // Sigma = 1/2 tr(I) 1 - I  =>  I = tr(Sigma) 1 - Sigma
    let i = Matrix3::identity() * sigma.trace() - sigma;
    SVector::<f64, 10>::from_column_slice(&[
        m,
        h[0],
        h[1],
        h[2],
        i[(0, 0)],
        i[(1, 1)],
        i[(2, 2)],
        i[(0, 1)],
        i[(1, 2)],
        i[(0, 2)],
    ])
}

/// Maps the unconstrained Log-Cholesky vector to standard inertial
/// parameters, guaranteeing a positive-definite pseudo-inertia.
pub fn theta_to_pi_3d(theta: &LogCholeskyParams3D) -> Result<InertialParams3D, InertiaError> {
    if !theta.theta.iter().all(|x| x.is_finite()) {
        return Err(InertiaError::NonFinite);
    }
    let u = upper_factor_3d(&theta.theta);
    let p = u * u.transpose();
    Ok(InertialParams3D {
        pi: pseudo_to_pi_vec(&p),
    })
}

pub fn pi_to_pseudo_3d(pi: &InertialParams3D) -> Result<PseudoInertia3D, InertiaError> {
    if !pi.pi.iter().all(|x| x.is_finite()) {
        return Err(InertiaError::NonFinite);
    }
    let v = &pi.pi;
    let i = Matrix3::new(v[4], v[7], v[9], v[7], v[5], v[8], v[9], v[8], v[6]);
    let sigma = Matrix3::identity() * (0.5 * i.trace()) - i;
    let mut p = Matrix4::zeros();
    p.fixed_view_mut::<3, 3>(0, 0).copy_from(&sigma);
    p[(0, 3)] = v[1];
    p[(1, 3)] = v[2];
    p[(2, 3)] = v[3];
    p[(3, 0)] = v[1];
    p[(3, 1)] = v[2];
    p[(3, 2)] = v[3];
    p[(3, 3)] = v[0];
    Ok(PseudoInertia3D { p })
}

pub fn pseudo_to_pi_3d(pseudo: &PseudoInertia3D) -> InertialParams3D {
    InertialParams3D {
        pi: pseudo_to_pi_vec(&pseudo.p),
    }
}

/// Closed-form Jacobian of `theta_to_pi_3d`, 10x10 with columns ordered as
/// the theta entries.
pub fn pi_jacobian_3d(theta: &LogCholeskyParams3D) -> SMatrix<f64, 10, 10> {
    let u = upper_factor_3d(&theta.theta);
    let mut jac = SMatrix::<f64, 10, 10>::zeros();
    for j in 0..10 {
        let du = upper_factor_derivative_3d(&theta.theta, &u, j);
        let dp = du * u.transpose() + u * du.transpose();
        jac.set_column(j, &pseudo_to_pi_vec(&dp));
    }
    jac
}

fn upper_factor_derivative_3d(
    theta: &SVector<f64, 10>,
    u: &Matrix4<f64>,
    j: usize,
) -> Matrix4<f64> {
    let ea = theta[0].exp();
    let mut du = Matrix4::zeros();
    match j {
        0 => du = *u, // d/dalpha of e^alpha * (...) = U itself
        1 => du[(0, 0)] = u[(0, 0)],
        2 => du[(1, 1)] = u[(1, 1)],
        3 => du[(2, 2)] = u[(2, 2)],
        4 => du[(0, 1)] = ea,
        5 => du[(1, 2)] = ea,
        6 => du[(0, 2)] = ea,
        7 => du[(0, 3)] = ea,
        8 => du[(1, 3)] = ea,
        9 => du[(2, 3)] = ea,
        _ => unreachable!(),
    }
    du
}

fn upper_factor_2d(theta2: &SVector<f64, 6>) -> Matrix3<f64> {
    let (alpha, d1, d2, s12, t1, t2) = (
        theta2[0], theta2[1], theta2[2], theta2[3], theta2[4], theta2[5],
    );
    alpha.exp()
        * Matrix3::new(
            d1.exp(),
            s12,
            t1,
            0.0,
            d2.exp(),
            t2,
            0.0,
            0.0,
            1.0,
        )
}

/// Planar analog of the Log-Cholesky map: `pi2` from the 3x3 planar
/// pseudo-inertia `P2 = U2 U2^T` with `I_z = tr(Sigma2)`.
pub fn theta_to_pi_2d(theta2: &LogCholeskyParams2D) -> Result<InertialParams2D, InertiaError> {
    if !theta2.theta2.iter().all(|x| x.is_finite()) {
        return Err(InertiaError::NonFinite);
    }
    let u = upper_factor_2d(&theta2.theta2);
    let p = u * u.transpose();
    Ok(InertialParams2D::new(
        p[(2, 2)],
        p[(0, 2)],
        p[(1, 2)],
        p[(0, 0)] + p[(1, 1)],
    ))
}

/// 4x6 Jacobian of `theta_to_pi_2d`.
pub fn pi_jacobian_2d(theta2: &LogCholeskyParams2D) -> SMatrix<f64, 4, 6> {
    let t = &theta2.theta2;
    let e2a = (2.0 * t[0]).exp();
    let (a, b) = (t[1].exp(), t[2].exp());
    let (s, t1, t2) = (t[3], t[4], t[5]);
    // pi2 = e^{2 alpha} [1, t1, t2, a^2 + b^2 + s^2 + t1^2 + t2^2]
    let iz_core = a * a + b * b + s * s + t1 * t1 + t2 * t2;
    let mut jac = SMatrix::<f64, 4, 6>::zeros();
    jac[(0, 0)] = 2.0 * e2a;
    jac[(1, 0)] = 2.0 * e2a * t1;
    jac[(2, 0)] = 2.0 * e2a * t2;
    jac[(3, 0)] = 2.0 * e2a * iz_core;
    jac[(1, 4)] = e2a;
    jac[(2, 5)] = e2a;
    jac[(3, 1)] = 2.0 * e2a * a * a;
    jac[(3, 2)] = 2.0 * e2a * b * b;
    jac[(3, 3)] = 2.0 * e2a * s;
    jac[(3, 4)] = 2.0 * e2a * t1;
    jac[(3, 5)] = 2.0 * e2a * t2;
    jac
}

/// Recovers a planar Log-Cholesky vector reproducing `pi2` exactly.
///
/// The planar parameters fix only the trace of `Sigma2`, so a concrete
/// positive-definite completion is chosen: isotropic when possible,
/// otherwise weighted toward the `h` direction.
pub fn theta_from_pi_2d(pi2: &InertialParams2D) -> Result<LogCholeskyParams2D, InertiaError> {
    let (m, iz) = (pi2.mass(), pi2.iz());
    let (hx, hy) = pi2.h();
    let h2 = hx * hx + hy * hy;
    if !(m > 0.0 && iz > 0.0 && iz * m > h2) {
        return Err(InertiaError::Inconsistent(format!(
            "m={m}, Iz={iz}, |h|^2={h2}"
        )));
    }
    let sigma = planar_sigma_completion(m, hx, hy, iz);
    let p = Matrix3::new(
        sigma[(0, 0)],
        sigma[(0, 1)],
        hx,
        sigma[(0, 1)],
        sigma[(1, 1)],
        hy,
        hx,
        hy,
        m,
    );
    // Factor P = U U^T with U upper triangular, solving rows bottom-up.
    let u22 = p[(2, 2)].sqrt();
    let u12 = p[(1, 2)] / u22;
    let u11 = (p[(1, 1)] - u12 * u12).sqrt();
    let u02 = p[(0, 2)] / u22;
    let u01 = (p[(0, 1)] - u02 * u12) / u11;
    let u00 = (p[(0, 0)] - u01 * u01 - u02 * u02).sqrt();
    if !(u00.is_finite() && u11.is_finite() && u00 > 0.0 && u11 > 0.0) {
        return Err(InertiaError::Inconsistent(
            "pseudo-inertia completion not positive definite".into(),
        ));
    }
    let alpha = u22.ln();
    Ok(LogCholeskyParams2D {
        theta2: SVector::<f64, 6>::from_column_slice(&[
            alpha,
            (u00 / u22).ln(),
            (u11 / u22).ln(),
            u01 / u22,
            u02 / u22,
            u12 / u22,
        ]),
    })
}

fn planar_sigma_completion(m: f64, hx: f64, hy: f64, iz: f64) -> Matrix2<f64> {
    let h2 = hx * hx + hy * hy;
    // Isotropic completion works whenever Iz m > 2 |h|^2; otherwise tilt
    // Sigma2 toward h to keep the Schur complement positive.
    if iz * m > 2.0 * h2 * (1.0 + 1e-9) || h2 == 0.0 {
        return Matrix2::identity() * (0.5 * iz);
    }
    let eps = 0.25 * (iz - h2 / m);
    let b = (iz - 2.0 * eps) / h2;
    Matrix2::identity() * eps + Matrix2::new(hx * hx, hx * hy, hx * hy, hy * hy) * b
}

/// Physical-consistency check: Cholesky pivots of the pseudo-inertia with
/// tolerance `1e-12 tr(P)`, plus the smallest-eigenvalue margin.
pub fn is_physically_consistent_3d(pi: &InertialParams3D) -> (bool, f64) {
    let p = match pi_to_pseudo_3d(pi) {
        Ok(p) => p.p,
        Err(_) => return (false, f64::NEG_INFINITY),
    };
    let ok = cholesky_pivots_positive(p.as_slice(), 4, 1e-12 * p.trace());
    let margin = p
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    (ok, margin)
}

/// Planar consistency: positive definiteness of the 2x2 surrogate
/// `[[I_z, |h|], [|h|, m]]`, equivalent to `m > 0`, `I_z > 0`,
/// `I_z m > |h|^2` (existence of a consistent Sigma2 completion).
pub fn is_physically_consistent_2d(pi2: &InertialParams2D) -> (bool, f64) {
    let (m, iz) = (pi2.mass(), pi2.iz());
    let (hx, hy) = pi2.h();
    let hn = (hx * hx + hy * hy).sqrt();
    let s = Matrix2::new(iz, hn, hn, m);
    let ok = cholesky_pivots_positive(s.as_slice(), 2, 1e-12 * s.trace());
    let tr = iz + m;
    let det = iz * m - hn * hn;
    let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
    let margin = 0.5 * (tr - disc);
    (ok, margin)
}

fn cholesky_pivots_positive(col_major: &[f64], n: usize, tol: f64) -> bool {
    let mut a: Vec<f64> = col_major.to_vec();
    let tol = tol.max(0.0);
    for k in 0..n {
        let pivot = a[k * n + k];
        if !(pivot > tol) {
            return false;
        }
        let l = pivot.sqrt();
        for i in k + 1..n {
            a[k * n + i] /= l;
        }
        for j in k + 1..n {
            for i in j..n {
                a[j * n + i] -= a[k * n + i] * a[k * n + j];
            }
        }
    }
    true
}
