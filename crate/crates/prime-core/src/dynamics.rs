//! Planar kinematics and smooth dynamics quantities: mass matrix, bias,
//! contact Jacobians and signed distances, free velocity, configuration
//! integration, and the classical regressor.
//!
//! All Jacobians and Hessians are analytic. Link positions are propagated
//! along the chain together with their first, second, and (optionally) third
//! derivatives in `q`; every world angle is linear in `q`, which keeps the
//! propagation closed-form per joint.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use std::ops::AddAssign;
use thiserror::Error;

use crate::inertia::InertialParams2D;
use crate::model::{Joint, PlanarModel};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("mass matrix factorization failed (model degenerate)")]
    SingularMass,
}

fn rot(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// World position of one point with derivatives in `q` up to third order.
///
/// `third[c][k]` is the symmetric matrix `(l, m) -> d^3 p_c / dq_k dq_l dq_m`.
#[derive(Debug, Clone)]
pub struct PointKin {
    pub pos: Vector2<f64>,
    pub jac: [DVector<f64>; 2],
    pub hess: [DMatrix<f64>; 2],
    pub third: Option<[Vec<DMatrix<f64>>; 2]>,
}

impl PointKin {
    fn zeros(n: usize, with_third: bool) -> Self {
        let third = with_third.then(|| {
            [
                vec![DMatrix::zeros(n, n); n],
                vec![DMatrix::zeros(n, n); n],
            ]
        });
        Self {
            pos: Vector2::zeros(),
            jac: [DVector::zeros(n), DVector::zeros(n)],
            hess: [DMatrix::zeros(n, n), DMatrix::zeros(n, n)],
            third,
        }
    }

    /// Accumulates `s(q) R(theta(q)) b` where `theta = const + a^T q` and
    /// `s` is either 1 or the joint coordinate named by `lin`.
    fn add_rotated(
        &mut self,
        theta: f64,
        a: &DVector<f64>,
        b: Vector2<f64>,
        lin: Option<(usize, f64)>,
    ) {
        let n = self.jac[0].len();
        let r0 = rot(theta) * b;
        let r1 = rot(theta + std::f64::consts::FRAC_PI_2) * b;
        let r2 = -r0;
        let r3 = -r1;
        let s = lin.map_or(1.0, |(_, v)| v);
        self.pos += s * r0;
        for c in 0..2 {
            self.jac[c].axpy(s * r1[c], a, 1.0);
            if let Some((j, _)) = lin {
                self.jac[c][j] += r0[c];
            }
            // hess += s r2 a a^T (+ prismatic cross terms)
            let aat = a * a.transpose();
            self.hess[c] += (s * r2[c]) * &aat;
            if let Some((j, _)) = lin {
                for i in 0..n {
                    self.hess[c][(i, j)] += r1[c] * a[i];
                    self.hess[c][(j, i)] += r1[c] * a[i];
                }
            }
            if let Some(third) = self.third.as_mut() {
                for k in 0..n {
                    if a[k] != 0.0 || lin.map_or(false, |(j, _)| j == k) {
                        let t = &mut third[c][k];
                        *t += (s * r3[c] * a[k]) * &aat;
                        if let Some((j, _)) = lin {
                            if j == k {
                                *t += r2[c] * &aat;
                            }
                            for i in 0..n {
                                t[(i, j)] += r2[c] * a[k] * a[i];
                                t[(j, i)] += r2[c] * a[k] * a[i];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// World frame of one link: angle (linear in `q`) plus origin point.
#[derive(Debug, Clone)]
pub struct FrameKin {
    pub angle: f64,
    pub dangle: DVector<f64>,
    pub point: PointKin,
}

/// Forward kinematics with derivatives for every link frame.
pub fn frame_kinematics(model: &PlanarModel, q: &DVector<f64>, with_third: bool) -> Vec<FrameKin> {
    let n = model.dof();
    let mut frames: Vec<FrameKin> = Vec::with_capacity(model.links.len());

    let mut base_point = PointKin::zeros(n, with_third);
    base_point.pos = Vector2::new(q[0], q[1]);
    base_point.jac[0][0] = 1.0;
    base_point.jac[1][1] = 1.0;
    let mut base_dangle = DVector::zeros(n);
    base_dangle[2] = 1.0;
    frames.push(FrameKin {
        angle: q[2],
        dangle: base_dangle,
        point: base_point,
    });

    for (i, link) in model.links.iter().enumerate().skip(1) {
        let parent = &frames[link.parent as usize];
        let jq = 3 + (i - 1);
        let mut point = parent.point.clone();
        point.add_rotated(parent.angle, &parent.dangle, link.offset_xy, None);
        let post_angle = parent.angle + link.offset_angle;
        let (angle, dangle) = match link.joint.expect("validated: non-base link has joint") {
            Joint::Revolute { sign } => {
                let mut da = parent.dangle.clone();
                da[jq] += sign;
                (post_angle + sign * q[jq], da)
            }
            Joint::Prismatic { axis } => {
                point.add_rotated(post_angle, &parent.dangle, axis, Some((jq, q[jq])));
                (post_angle, parent.dangle.clone())
            }
        };
        frames.push(FrameKin {
            angle,
            dangle,
            point,
        });
    }
    frames
}

/// Per-contact signed distance, Jacobian rows, and the configuration
/// derivative of each row (for `d(J^T lambda)/dq`).
#[derive(Debug, Clone)]
pub struct ContactKin {
    /// Signed distance of the contact point above the ground plane, at `q`.
    pub phi: f64,
    /// Normal (world z) Jacobian row.
    pub jn: DVector<f64>,
    /// Tangential (world x) Jacobian row.
    pub jt: DVector<f64>,
    /// `d_jn[(k, m)] = d jn[m] / dq_k` (symmetric).
    pub d_jn: DMatrix<f64>,
    pub d_jt: DMatrix<f64>,
    pub mu: f64,
}

#[derive(Debug, Clone)]
pub struct ContactKinematics {
    pub contacts: Vec<ContactKin>,
}

pub fn contact_kinematics(model: &PlanarModel, q: &DVector<f64>) -> ContactKinematics {
    let frames = frame_kinematics(model, q, false);
    contact_kinematics_from_frames(model, &frames)
}

pub fn contact_kinematics_from_frames(
    model: &PlanarModel,
    frames: &[FrameKin],
) -> ContactKinematics {
    let contacts = model
        .contacts
        .iter()
        .map(|c| {
            let frame = &frames[c.link];
            let mut point = frame.point.clone();
            point.third = None;
            point.add_rotated(frame.angle, &frame.dangle, c.point, None);
            ContactKin {
                phi: point.pos[1],
                jt: point.jac[0].clone(),
                jn: point.jac[1].clone(),
                d_jt: point.hess[0].clone(),
                d_jn: point.hess[1].clone(),
                mu: c.mu,
            }
        })
        .collect();
    ContactKinematics { contacts }
}

fn link_inertias(model: &PlanarModel) -> Vec<InertialParams2D> {
    model.links.iter().map(|l| l.inertia).collect()
}

/// Joint-space mass matrix, symmetric positive definite.
pub fn mass_matrix(model: &PlanarModel, q: &DVector<f64>) -> DMatrix<f64> {
    let frames = frame_kinematics(model, q, false);
    assemble_mass(&frames, &link_inertias(model))
}

fn assemble_mass(frames: &[FrameKin], inertias: &[InertialParams2D]) -> DMatrix<f64> {
    let n = frames[0].dangle.len();
    let mut m = DMatrix::zeros(n, n);
    for (frame, inertia) in frames.iter().zip(inertias) {
        let mass = inertia.mass();
        let (hx, hy) = inertia.h();
        let iz = inertia.iz();
        let w = rot(frame.angle) * Vector2::new(-hy, hx);
        let j0 = &frame.point.jac[0];
        let j1 = &frame.point.jac[1];
        let a = &frame.dangle;
        let jw = w.x * j0 + w.y * j1;
        m += mass * (j0 * j0.transpose() + j1 * j1.transpose());
        m += &jw * a.transpose() + a * jw.transpose();
        m += iz * (a * a.transpose());
    }
    m
}

/// Per-coordinate derivative of the mass matrix.
fn assemble_dmass(frames: &[FrameKin], inertias: &[InertialParams2D]) -> Vec<DMatrix<f64>> {
    let n = frames[0].dangle.len();
    let mut dm = vec![DMatrix::zeros(n, n); n];
    for (frame, inertia) in frames.iter().zip(inertias) {
        let mass = inertia.mass();
        let (hx, hy) = inertia.h();
        let bh = Vector2::new(-hy, hx);
        let w = rot(frame.angle) * bh;
        let w1 = rot(frame.angle + std::f64::consts::FRAC_PI_2) * bh;
        let j0 = &frame.point.jac[0];
        let j1 = &frame.point.jac[1];
        let a = &frame.dangle;
        for k in 0..n {
            let h0k = frame.point.hess[0].column(k).into_owned();
            let h1k = frame.point.hess[1].column(k).into_owned();
            let dk = &mut dm[k];
            *dk += mass * (&h0k * j0.transpose() + j0 * h0k.transpose());
            *dk += mass * (&h1k * j1.transpose() + j1 * h1k.transpose());
            let djw = w.x * &h0k + w.y * &h1k + a[k] * (w1.x * j0 + w1.y * j1);
            *dk += &djw * a.transpose() + a * djw.transpose();
        }
    }
    dm
}

/// Second derivative of the mass matrix; requires third-order kinematics.
fn assemble_ddmass(frames: &[FrameKin], inertias: &[InertialParams2D]) -> Vec<Vec<DMatrix<f64>>> {
    let n = frames[0].dangle.len();
    let mut ddm = vec![vec![DMatrix::zeros(n, n); n]; n];
    for (frame, inertia) in frames.iter().zip(inertias) {
        let mass = inertia.mass();
        let (hx, hy) = inertia.h();
        let bh = Vector2::new(-hy, hx);
        let w = rot(frame.angle) * bh;
        let w1 = rot(frame.angle + std::f64::consts::FRAC_PI_2) * bh;
        let w2 = -w;
        let third = frame
            .point
            .third
            .as_ref()
            .expect("ddmass needs third-order kinematics");
        let j0 = &frame.point.jac[0];
        let j1 = &frame.point.jac[1];
        let a = &frame.dangle;
        for k in 0..n {
            let h0k = frame.point.hess[0].column(k).into_owned();
            let h1k = frame.point.hess[1].column(k).into_owned();
            for l in 0..n {
                let h0l = frame.point.hess[0].column(l).into_owned();
                let h1l = frame.point.hess[1].column(l).into_owned();
                let t0 = third[0][k].column(l).into_owned();
                let t1 = third[1][k].column(l).into_owned();
                let d = &mut ddm[k][l];
                *d += mass * (&t0 * j0.transpose() + j0 * t0.transpose());
                *d += mass * (&h0k * h0l.transpose() + &h0l * h0k.transpose());
                *d += mass * (&t1 * j1.transpose() + j1 * t1.transpose());
                *d += mass * (&h1k * h1l.transpose() + &h1l * h1k.transpose());
                let u = w.x * &t0
                    + w.y * &t1
                    + a[l] * (w1.x * &h0k + w1.y * &h1k)
                    + a[k] * (w1.x * &h0l + w1.y * &h1l)
                    + a[k] * a[l] * (w2.x * j0 + w2.y * j1);
                *d += &u * a.transpose() + a * u.transpose();
            }
        }
    }
    ddm
}

/// Generalized gravity force `Q_g` (positive when gravity does positive work).
fn assemble_gravity(
    frames: &[FrameKin],
    inertias: &[InertialParams2D],
    g: Vector2<f64>,
) -> DVector<f64> {
    let n = frames[0].dangle.len();
    let mut qg = DVector::zeros(n);
    for (frame, inertia) in frames.iter().zip(inertias) {
        let mass = inertia.mass();
        let (hx, hy) = inertia.h();
        let hv = Vector2::new(hx, hy);
        qg += mass * (g.x * &frame.point.jac[0] + g.y * &frame.point.jac[1]);
        let gw = g.dot(&(rot(frame.angle + std::f64::consts::FRAC_PI_2) * hv));
        qg += gw * &frame.dangle;
    }
    qg
}

fn assemble_dgravity(
    frames: &[FrameKin],
    inertias: &[InertialParams2D],
    g: Vector2<f64>,
) -> DMatrix<f64> {
    let n = frames[0].dangle.len();
    let mut dqg = DMatrix::zeros(n, n);
    for (frame, inertia) in frames.iter().zip(inertias) {
        let mass = inertia.mass();
        let (hx, hy) = inertia.h();
        let hv = Vector2::new(hx, hy);
        let gw2 = g.dot(&(rot(frame.angle + std::f64::consts::PI) * hv));
        for l in 0..n {
            let col = mass
                * (g.x * frame.point.hess[0].column(l).into_owned()
                    + g.y * frame.point.hess[1].column(l).into_owned())
                + gw2 * frame.dangle[l] * &frame.dangle;
            dqg.column_mut(l).add_assign(&col);
        }
    }
    dqg
}

fn bias_from(
    frames: &[FrameKin],
    inertias: &[InertialParams2D],
    g: Vector2<f64>,
    v: &DVector<f64>,
) -> DVector<f64> {
    let n = v.len();
    let dm = assemble_dmass(frames, inertias);
    let qg = assemble_gravity(frames, inertias, g);
    let mut h = -qg;
    for k in 0..n {
        h += (&dm[k] * v) * v[k];
        h[k] -= 0.5 * (v.transpose() * &dm[k] * v)[0];
    }
    h
}

/// Bias vector (Coriolis, centrifugal, gravity): `M vdot + h = Q`.
pub fn bias(model: &PlanarModel, q: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    let frames = frame_kinematics(model, q, false);
    bias_from(&frames, &link_inertias(model), model.gravity, v)
}

/// Smooth dynamics quantities and their analytic derivatives, evaluated once
/// per `(q, v)` and shared by the contact steppers.
#[derive(Debug, Clone)]
pub struct DynDerivatives {
    pub mass: DMatrix<f64>,
    pub dmass: Vec<DMatrix<f64>>,
    pub bias: DVector<f64>,
    pub dbias_dq: DMatrix<f64>,
    pub dbias_dv: DMatrix<f64>,
}

pub fn dynamics_derivatives(
    model: &PlanarModel,
    q: &DVector<f64>,
    v: &DVector<f64>,
) -> DynDerivatives {
    let frames = frame_kinematics(model, q, true);
    let inertias = link_inertias(model);
    let n = model.dof();
    let mass = assemble_mass(&frames, &inertias);
    let dm = assemble_dmass(&frames, &inertias);
    let ddm = assemble_ddmass(&frames, &inertias);
    let qg = assemble_gravity(&frames, &inertias, model.gravity);
    let dqg = assemble_dgravity(&frames, &inertias, model.gravity);

    let mut h = -qg;
    let mut dh_dq = -dqg;
    let mut dh_dv = DMatrix::zeros(n, n);
    for k in 0..n {
        let dmk_v = &dm[k] * v;
        h += &dmk_v * v[k];
        h[k] -= 0.5 * (v.transpose() * &dm[k] * v)[0];
        // dh/dv
        for m in 0..n {
            dh_dv[(m, k)] += dmk_v[m];
        }
        dh_dv += v[k] * &dm[k];
        let row = (v.transpose() * &dm[k]).transpose();
        for m in 0..n {
            dh_dv[(k, m)] -= row[m];
        }
        // dh/dq
        for l in 0..n {
            let dd = &ddm[l][k];
            let col = dd * v * v[k];
            dh_dq.column_mut(l).add_assign(&col);
            dh_dq[(k, l)] -= 0.5 * (v.transpose() * dd * v)[0];
        }
    }
    DynDerivatives {
        mass,
        dmass: dm,
        bias: h,
        dbias_dq: dh_dq,
        dbias_dv: dh_dv,
    }
}

/// Applies the input map: scatters actuated joint torques into the
/// generalized force space (base rows stay zero).
pub fn input_force(model: &PlanarModel, u: &DVector<f64>) -> DVector<f64> {
    let mut f = DVector::zeros(model.dof());
    for (col, &qi) in model.actuated_indices().iter().enumerate() {
        f[qi] = u[col];
    }
    f
}

/// Contact-free integrated velocity `v + dt M^{-1} (B u - h)`.
pub fn free_velocity(
    model: &PlanarModel,
    q: &DVector<f64>,
    v: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>, DynamicsError> {
    let m = mass_matrix(model, q);
    let rhs = input_force(model, u) - bias(model, q, v);
    let chol = m
        .cholesky()
        .ok_or(DynamicsError::SingularMass)?;
    Ok(v + dt * chol.solve(&rhs))
}

/// Semi-implicit configuration update `q + dt v_plus` (angles unwrapped).
pub fn integrate_config(q: &DVector<f64>, v_plus: &DVector<f64>, dt: f64) -> DVector<f64> {
    q + dt * v_plus
}

/// Classical regressor: `Y(q, v, a) stack(pi2 per link) = M(q) a + h(q, v)`.
pub fn regressor(
    model: &PlanarModel,
    q: &DVector<f64>,
    v: &DVector<f64>,
    a: &DVector<f64>,
) -> DMatrix<f64> {
    let frames = frame_kinematics(model, q, false);
    let n = model.dof();
    let n_links = model.links.len();
    let mut y = DMatrix::zeros(n, 4 * n_links);
    let mut basis: Vec<InertialParams2D> = vec![InertialParams2D::new(0.0, 0.0, 0.0, 0.0); n_links];
    for link in 0..n_links {
        for p in 0..4 {
            let mut pi = nalgebra::SVector::<f64, 4>::zeros();
            pi[p] = 1.0;
            basis[link] = InertialParams2D { pi2: pi };
            let col = assemble_mass(&frames, &basis) * a + bias_from(&frames, &basis, model.gravity, v);
            y.column_mut(4 * link + p).copy_from(&col);
            basis[link] = InertialParams2D::new(0.0, 0.0, 0.0, 0.0);
        }
    }
    y
}

/// Stacks every link's `pi2` into the regressor's parameter vector.
pub fn stacked_parameters(model: &PlanarModel) -> DVector<f64> {
    let mut pi = DVector::zeros(4 * model.links.len());
    for (i, link) in model.links.iter().enumerate() {
        for p in 0..4 {
            pi[4 * i + p] = link.inertia.pi2[p];
        }
    }
    pi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ContactPoint, Link, PlanarModel};
    use approx::assert_relative_eq;
    use rand_core::{RngCore, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn uniform(rng: &mut Xoshiro256PlusPlus, lo: f64, hi: f64) -> f64 {
        let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * u
    }

    fn randv(rng: &mut Xoshiro256PlusPlus, n: usize, scale: f64) -> DVector<f64> {
        DVector::from_fn(n, |_, _| uniform(rng, -scale, scale))
    }

    fn free_body(m: f64, hx: f64, hy: f64, iz: f64) -> PlanarModel {
        PlanarModel {
            links: vec![Link {
                name: "body".into(),
                parent: -1,
                joint: None,
                offset_xy: Vector2::zeros(),
                offset_angle: 0.0,
                inertia: InertialParams2D::new(m, hx, hy, iz),
            }],
            contacts: vec![ContactPoint {
                link: 0,
                point: Vector2::new(0.0, -0.5),
                mu: 0.7,
            }],
            gravity: Vector2::new(0.0, -9.81),
            actuated: vec![],
        }
    }

    pub(crate) fn hopper() -> PlanarModel {
        crate::datagen::hopper_model()
    }

    /// Independent forward kinematics: walks the chain with plain planar
    /// transforms, no derivative propagation.
    fn simple_fk(model: &PlanarModel, q: &DVector<f64>) -> Vec<(Vector2<f64>, f64)> {
        let mut poses: Vec<(Vector2<f64>, f64)> = Vec::new();
        poses.push((Vector2::new(q[0], q[1]), q[2]));
        for (i, link) in model.links.iter().enumerate().skip(1) {
            let (pp, ap) = poses[link.parent as usize];
            let jq = 3 + (i - 1);
            let mut pos = pp + rot(ap) * link.offset_xy;
            let mut ang = ap + link.offset_angle;
            match link.joint.unwrap() {
                Joint::Revolute { sign } => ang += sign * q[jq],
                Joint::Prismatic { axis } => pos += rot(ang) * axis * q[jq],
            }
            poses.push((pos, ang));
        }
        poses
    }

    /// Energy-Hessian oracle: per-link COM kinetic energy with COM velocities
    /// obtained by finite differences of the independent FK.
    fn kinetic_energy_fd(model: &PlanarModel, q: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let eps = 1e-6;
        let plus = simple_fk(model, &(q + eps * v));
        let minus = simple_fk(model, &(q - eps * v));
        let mut ke = 0.0;
        for (i, link) in model.links.iter().enumerate() {
            let m = link.inertia.mass();
            let (hx, hy) = link.inertia.h();
            let c = Vector2::new(hx / m, hy / m);
            let i_com = link.inertia.iz() - (hx * hx + hy * hy) / m;
            let com_p = plus[i].0 + rot(plus[i].1) * c;
            let com_m = minus[i].0 + rot(minus[i].1) * c;
            let v_com = (com_p - com_m) / (2.0 * eps);
            let omega = (plus[i].1 - minus[i].1) / (2.0 * eps);
            ke += 0.5 * m * v_com.norm_squared() + 0.5 * i_com * omega * omega;
        }
        ke
    }

    fn mass_oracle(model: &PlanarModel, q: &DVector<f64>) -> DMatrix<f64> {
        let n = model.dof();
        let mut m = DMatrix::zeros(n, n);
        let e = |i: usize| {
            let mut v = DVector::zeros(n);
            v[i] = 1.0;
            v
        };
        for i in 0..n {
            m[(i, i)] = 2.0 * kinetic_energy_fd(model, q, &e(i));
        }
        for i in 0..n {
            for j in 0..i {
                let kij = kinetic_energy_fd(model, q, &(e(i) + e(j)));
                let val = kij - 0.5 * m[(i, i)] - 0.5 * m[(j, j)];
                m[(i, j)] = val;
                m[(j, i)] = val;
            }
        }
        m
    }

    #[test]
    fn free_body_mass_matrix() {
        let model = free_body(2.0, 0.0, 0.0, 0.3);
        let q = DVector::zeros(3);
        let m = mass_matrix(&model, &q);
        let expected = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.3]);
        assert_relative_eq!(m, expected, epsilon = 1e-13);

        let model = free_body(2.0, 0.3, -0.1, 0.4);
        let m = mass_matrix(&model, &q);
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 0.0, 0.1, 0.0, 2.0, 0.3, 0.1, 0.3, 0.4],
        );
        assert_relative_eq!(m, expected, epsilon = 1e-13);
    }

    #[test]
    fn mass_matches_energy_hessian_oracle() {
        let model = hopper();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(21);
        for _ in 0..100 {
            let q = randv(&mut rng, model.dof(), 1.0);
            let m = mass_matrix(&model, &q);
            let oracle = mass_oracle(&model, &q);
            assert!(
                (&m - &oracle).amax() <= 1e-9 * (1.0 + m.amax()),
                "mass mismatch {:.3e}",
                (&m - &oracle).amax()
            );
            assert!(m.clone().cholesky().is_some(), "mass not PD");
            assert_relative_eq!(m.clone(), m.transpose(), epsilon = 1e-12);
        }
    }

    #[test]
    fn bias_gravity_examples() {
        let model = free_body(2.0, 0.3, -0.1, 0.4);
        let q = DVector::zeros(3);
        let v = DVector::zeros(3);
        let h = bias(&model, &q, &v);
        assert_relative_eq!(h[0], 0.0, epsilon = 1e-13);
        assert_relative_eq!(h[1], 2.0 * 9.81, epsilon = 1e-12); // m g
        assert_relative_eq!(h[2], 9.81 * 0.3, epsilon = 1e-12); // g h_x at theta = 0

        let mut model0 = model.clone();
        model0.gravity = Vector2::zeros();
        let h0 = bias(&model0, &q, &v);
        assert_relative_eq!(h0.amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn bias_matches_potential_gradient_oracle() {
        // v = 0: bias is the generalized gravity force, check against
        // finite differences of the potential energy from independent FK.
        let model = hopper();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(23);
        let potential = |q: &DVector<f64>| {
            let poses = simple_fk(&model, q);
            let g = model.gravity;
            let mut pe = 0.0;
            for (i, link) in model.links.iter().enumerate() {
                let (hx, hy) = link.inertia.h();
                let world_h = poses[i].0 * link.inertia.mass() + rot(poses[i].1) * Vector2::new(hx, hy);
                pe -= g.dot(&world_h);
            }
            pe
        };
        for _ in 0..20 {
            let q = randv(&mut rng, model.dof(), 1.0);
            let h = bias(&model, &q, &DVector::zeros(model.dof()));
            let eps = 1e-6;
            for k in 0..model.dof() {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += eps;
                qm[k] -= eps;
                let fd = (potential(&qp) - potential(&qm)) / (2.0 * eps);
                assert_relative_eq!(h[k], fd, epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn contact_kinematics_examples() {
        let model = hopper();
        // Foot at link-frame (0, -0.4), leg extension q3 along (0,-1).
        let mut q = DVector::zeros(4);
        q[1] = 0.4; // base at z such that foot touches ground with q3 = 0
        let ck = contact_kinematics(&model, &q);
        assert_relative_eq!(ck.contacts[0].phi, 0.0, epsilon = 1e-13);
        q[1] += 0.3;
        let ck = contact_kinematics(&model, &q);
        assert_relative_eq!(ck.contacts[0].phi, 0.3, epsilon = 1e-13);
    }

    #[test]
    fn contact_jacobians_match_finite_differences() {
        let model = hopper();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(31);
        for _ in 0..50 {
            let q = randv(&mut rng, model.dof(), 1.0);
            let ck = contact_kinematics(&model, &q);
            let eps = 1e-6;
            for k in 0..model.dof() {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += eps;
                qm[k] -= eps;
                let cp = contact_kinematics(&model, &qp);
                let cm = contact_kinematics(&model, &qm);
                for (i, c) in ck.contacts.iter().enumerate() {
                    let dphi = (cp.contacts[i].phi - cm.contacts[i].phi) / (2.0 * eps);
                    assert_relative_eq!(c.jn[k], dphi, epsilon = 1e-7, max_relative = 1e-7);
                    let djn = (&cp.contacts[i].jn - &cm.contacts[i].jn) / (2.0 * eps);
                    let djt = (&cp.contacts[i].jt - &cm.contacts[i].jt) / (2.0 * eps);
                    assert!((c.d_jn.column(k) - &djn).amax() < 1e-6);
                    assert!((c.d_jt.column(k) - &djt).amax() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn free_velocity_examples() {
        let mut model = free_body(1.0, 0.0, 0.0, 0.1);
        model.gravity = Vector2::zeros();
        let q = DVector::zeros(3);
        let v = DVector::from_column_slice(&[0.3, -0.2, 0.1]);
        let vf = free_velocity(&model, &q, &v, &DVector::zeros(0), 0.01).unwrap();
        assert_relative_eq!(vf, v, epsilon = 1e-13);

        let model = free_body(1.0, 0.0, 0.0, 0.1);
        let vf = free_velocity(&model, &q, &v, &DVector::zeros(0), 0.01).unwrap();
        assert_relative_eq!(vf[1], v[1] - 0.0981, epsilon = 1e-12);
    }

    #[test]
    fn free_velocity_matches_dense_solve() {
        let model = hopper();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(37);
        for _ in 0..20 {
            let q = randv(&mut rng, 4, 1.0);
            let v = randv(&mut rng, 4, 1.0);
            let u = randv(&mut rng, 1, 5.0);
            let dt = 0.01;
            let vf = free_velocity(&model, &q, &v, &u, dt).unwrap();
            let m = mass_matrix(&model, &q);
            let rhs = input_force(&model, &u) - bias(&model, &q, &v);
            let oracle = &v + dt * m.lu().solve(&rhs).unwrap();
            assert!((vf - oracle).amax() < 1e-10);
        }
    }

    #[test]
    fn integrate_config_composition() {
        let q = DVector::from_column_slice(&[0.1, 0.2, 0.3, 0.4]);
        let v = DVector::from_column_slice(&[1.0, -1.0, 0.5, 2.0]);
        assert_relative_eq!(integrate_config(&q, &DVector::zeros(4), 0.01), q);
        let mut qk = q.clone();
        for _ in 0..10 {
            qk = integrate_config(&qk, &v, 0.02);
        }
        assert_relative_eq!(qk, &q + 0.2 * &v, epsilon = 1e-13);
    }

    #[test]
    fn regressor_identity() {
        let model = hopper();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(41);
        let pi = stacked_parameters(&model);
        for _ in 0..100 {
            let q = randv(&mut rng, 4, 1.0);
            let v = randv(&mut rng, 4, 1.0);
            let a = randv(&mut rng, 4, 1.0);
            let y = regressor(&model, &q, &v, &a);
            let lhs = &y * &pi;
            let rhs = mass_matrix(&model, &q) * &a + bias(&model, &q, &v);
            let scale = 1.0 + rhs.amax();
            assert!((lhs.clone() - &rhs).amax() <= 1e-10 * scale);
            // linearity: doubling parameters doubles Y pi
            assert!((&y * (2.0 * &pi) - 2.0 * lhs).amax() <= 1e-10 * scale);
        }
    }

    #[test]
    fn free_body_momentum_conserved() {
        let mut model = free_body(2.0, 0.0, 0.0, 0.4);
        model.gravity = Vector2::zeros();
        let mut q = DVector::from_column_slice(&[0.0, 1.0, 0.2]);
        let mut v = DVector::from_column_slice(&[0.5, 0.1, 0.8]);
        let p0 = mass_matrix(&model, &q) * &v;
        let dt = 0.01;
        for _ in 0..200 {
            let vf = free_velocity(&model, &q, &v, &DVector::zeros(0), dt).unwrap();
            q = integrate_config(&q, &vf, dt);
            v = vf;
        }
        let p1 = mass_matrix(&model, &q) * &v;
        assert!((p1 - p0).amax() < 1e-10, "momentum drifted");
    }

    #[test]
    fn analytic_dynamics_derivatives_match_fd() {
        let model = hopper();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(43);
        for _ in 0..20 {
            let q = randv(&mut rng, 4, 1.0);
            let v = randv(&mut rng, 4, 1.0);
            let d = dynamics_derivatives(&model, &q, &v);
            assert!((&d.mass - mass_matrix(&model, &q)).amax() < 1e-13);
            assert!((&d.bias - bias(&model, &q, &v)).amax() < 1e-13);
            let eps = 1e-6;
            for k in 0..4 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += eps;
                qm[k] -= eps;
                let dm_fd = (mass_matrix(&model, &qp) - mass_matrix(&model, &qm)) / (2.0 * eps);
                assert!(
                    (&d.dmass[k] - &dm_fd).amax() <= 1e-6 * (1.0 + dm_fd.amax()),
                    "dM/dq mismatch"
                );
                let dh_fd = (bias(&model, &qp, &v) - bias(&model, &qm, &v)) / (2.0 * eps);
                assert!(
                    (d.dbias_dq.column(k) - &dh_fd).amax() <= 1e-6 * (1.0 + dh_fd.amax()),
                    "dh/dq mismatch"
                );
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[k] += eps;
                vm[k] -= eps;
                let dhv_fd = (bias(&model, &q, &vp) - bias(&model, &q, &vm)) / (2.0 * eps);
                assert!(
                    (d.dbias_dv.column(k) - &dhv_fd).amax() <= 1e-6 * (1.0 + dhv_fd.amax()),
                    "dh/dv mismatch"
                );
            }
        }
    }
}
