//! Contact time-steppers and their analytic derivatives.
//!
//! Three interchangeable solvers advance the velocity through contact:
//!
//! * [`solve_lcp`]: exact complementarity by per-contact mode enumeration
//!   (open / stick / slide), deterministic at desk scale,
//! * [`solve_socp`]: the convex cone-relaxed program, solved exactly by
//!   active-set enumeration (planar friction cones are polyhedral),
//! * [`solve_smoothed`]: the log-barrier smoothing of the cone program,
//!   solved by a damped Newton method; twice differentiable, with contact
//!   impulses recovered from the first-order optimality conditions.
//!
//! A fixed-contact KKT stepper backs the contact-constrained baseline
//! estimator. Step derivatives for the smoothed and fixed-contact dynamics
//! come from the implicit function theorem applied to their respective
//! optimality systems.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{
    bias, contact_kinematics, dynamics_derivatives, input_force, integrate_config, mass_matrix,
    regressor, ContactKinematics, DynamicsError,
};
use crate::model::{PlanarModel, State};

#[derive(Debug, Error)]
pub enum ContactError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("no consistent contact mode combination found: {0}")]
    NoMode(String),
    #[error("cone-program active-set search failed: {0}")]
    SocpFailure(String),
    #[error("no strictly feasible interior point found for the barrier solve")]
    FeasibilityFailed,
    #[error("Newton solve did not converge within {iters} iterations (residual {residual:.3e})")]
    NewtonMaxIters { iters: usize, residual: f64 },
    #[error("slack {0} is non-positive ({1:.3e}); impulses undefined")]
    InvalidSlack(usize, f64),
    #[error("solver failure at step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<ContactError>,
    },
}

/// Log-barrier smoothing configuration.
#[derive(Debug, Clone, Copy)]
pub struct SmoothingConfig {
    /// Barrier weight; larger values approach rigid contact.
    pub kappa: f64,
    /// Newton gradient tolerance, scaled by `1 + |v_free|`.
    pub tol: f64,
    pub max_iters: usize,
    /// Minimum slack enforced by the feasibility initializer.
    pub eps_feas: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            kappa: 500.0,
            tol: 1e-10,
            max_iters: 100,
            eps_feas: 1e-8,
        }
    }
}

impl SmoothingConfig {
    pub fn with_kappa(kappa: f64) -> Self {
        Self {
            kappa,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stepper {
    Lcp,
    Socp,
    Smoothed,
}

/// Per-contact impulse over one time step (N s).
#[derive(Debug, Clone, Copy, Default)]
pub struct Impulse {
    pub normal: f64,
    pub tangential: f64,
}

#[derive(Debug, Clone)]
pub struct ContactStepResult {
    pub v_plus: DVector<f64>,
    pub q_plus: DVector<f64>,
    pub impulses: Vec<Impulse>,
    /// Cone slack per contact (positive in the strict interior).
    pub slacks: Vec<f64>,
    pub newton_iters: usize,
    pub converged: bool,
    pub residual: f64,
    /// Baseline-only flags: reported friction cone violation, KKT fallback.
    pub cone_clamped: bool,
    pub kkt_fallback: bool,
}

struct StepContext {
    mass: DMatrix<f64>,
    /// `M v + dt (B u - h)`, the momentum-side right-hand side.
    rhs: DVector<f64>,
    v_free: DVector<f64>,
    ck: ContactKinematics,
}

fn step_context(
    model: &PlanarModel,
    q: &DVector<f64>,
    v: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<StepContext, ContactError> {
    let mass = mass_matrix(model, q);
    let rhs = &mass * v + dt * (input_force(model, u) - bias(model, q, v));
    let v_free = mass
        .clone()
        .cholesky()
        .ok_or(DynamicsError::SingularMass)?
        .solve(&rhs);
    Ok(StepContext {
        mass,
        rhs,
        v_free,
        ck: contact_kinematics(model, q),
    })
}

fn kinetic_energy(mass: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    0.5 * (v.transpose() * mass * v)[0]
}

// ---------------------------------------------------------------------------
// Exact LCP stepper by mode enumeration.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ContactMode {
    Open,
    Stick,
    SlidePos,
    SlideNeg,
}

const MODES: [ContactMode; 4] = [
    ContactMode::Open,
    ContactMode::Stick,
    ContactMode::SlidePos,
    ContactMode::SlideNeg,
];

/// Exact complementarity step: per-contact open/stick/slide enumeration with
/// lowest post-step kinetic energy as the grazing tie-break.
pub fn solve_lcp(
    model: &PlanarModel,
    q: &DVector<f64>,
    v: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<ContactStepResult, ContactError> {
    let ctx = step_context(model, q, v, u, dt)?;
    let nc = ctx.ck.contacts.len();
    assert!(nc <= 6, "LCP enumeration supports at most 6 contacts");
    let tol = 1e-9 * (1.0 + ctx.v_free.amax());

    let mut best: Option<(f64, DVector<f64>, Vec<Impulse>)> = None;
    let mut tried = 0usize;
    let mut modes = vec![ContactMode::Open; nc];
    'outer: loop {
        tried += 1;
        if let Some((v_plus, impulses)) = try_mode_combination(&ctx, &modes, dt, tol) {
            let ke = kinetic_energy(&ctx.mass, &v_plus);
            let better = match &best {
                None => true,
                Some((best_ke, _, _)) => ke < best_ke - 1e-12 * (1.0 + best_ke.abs()),
            };
            if better {
                best = Some((ke, v_plus, impulses));
            }
        }
        // lexicographic advance
        for i in 0..nc {
            let pos = MODES.iter().position(|m| *m == modes[i]).unwrap();
            if pos + 1 < MODES.len() {
                modes[i] = MODES[pos + 1];
                continue 'outer;
            }
            modes[i] = MODES[0];
        }
        break;
    }

    match best {
        Some((_, v_plus, impulses)) => {
            let q_plus = integrate_config(q, &v_plus, dt);
            let residual = (&ctx.mass * (&v_plus - &ctx.v_free)
                - contact_force(&ctx.ck, &impulses))
            .amax();
            let slacks = cone_slacks(&ctx.ck, &v_plus, dt);
            Ok(ContactStepResult {
                v_plus,
                q_plus,
                impulses,
                slacks,
                newton_iters: 0,
                converged: true,
                residual,
                cone_clamped: false,
                kkt_fallback: false,
            })
        }
        None => Err(ContactError::NoMode(format!(
            "{tried} combinations tried for {nc} contacts at q = {q:?}"
        ))),
    }
}

fn contact_force(ck: &ContactKinematics, impulses: &[Impulse]) -> DVector<f64> {
    let n = ck.contacts.first().map_or(0, |c| c.jn.len());
    let mut f = DVector::zeros(n);
    for (c, imp) in ck.contacts.iter().zip(impulses) {
        f += imp.normal * &c.jn + imp.tangential * &c.jt;
    }
    f
}

fn cone_slacks(ck: &ContactKinematics, v_plus: &DVector<f64>, dt: f64) -> Vec<f64> {
    ck.contacts
        .iter()
        .map(|c| {
            let nvel = c.phi / dt + c.jn.dot(v_plus);
            let tvel = c.jt.dot(v_plus);
            nvel * nvel / (c.mu * c.mu) - tvel * tvel
        })
        .collect()
}

fn try_mode_combination(
    ctx: &StepContext,
    modes: &[ContactMode],
    dt: f64,
    tol: f64,
) -> Option<(DVector<f64>, Vec<Impulse>)> {
    let n = ctx.v_free.len();
    let nc = modes.len();
    // Unknowns: v_plus, lambda_n per closed contact, lambda_t per stick.
    let closed: Vec<usize> = (0..nc)
        .filter(|i| modes[*i] != ContactMode::Open)
        .collect();
    let stick: Vec<usize> = (0..nc)
        .filter(|i| modes[*i] == ContactMode::Stick)
        .collect();
    let dim = n + closed.len() + stick.len();
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);
    a.view_mut((0, 0), (n, n)).copy_from(&ctx.mass);
    b.rows_mut(0, n).copy_from(&ctx.rhs);
    for (col, &i) in closed.iter().enumerate() {
        let c = &ctx.ck.contacts[i];
        // force direction for the normal impulse (slide folds friction in)
        let dir = match modes[i] {
            ContactMode::SlidePos => &c.jn - c.mu * &c.jt,
            ContactMode::SlideNeg => &c.jn + c.mu * &c.jt,
            _ => c.jn.clone(),
        };
        for r in 0..n {
            a[(r, n + col)] = -dir[r];
        }
        // normal velocity constraint: phi/dt + jn v_plus = 0
        for m in 0..n {
            a[(n + col, m)] = c.jn[m];
        }
        b[n + col] = -c.phi / dt;
    }
    for (col, &i) in stick.iter().enumerate() {
        let c = &ctx.ck.contacts[i];
        let idx = n + closed.len() + col;
        for r in 0..n {
            a[(r, idx)] = -c.jt[r];
        }
        for m in 0..n {
            a[(idx, m)] = c.jt[m];
        }
    }
    let sol = a.lu().solve(&b)?;
    let v_plus = sol.rows(0, n).into_owned();

    let mut impulses = vec![Impulse::default(); nc];
    for (col, &i) in closed.iter().enumerate() {
        impulses[i].normal = sol[n + col];
    }
    for (col, &i) in stick.iter().enumerate() {
        impulses[i].tangential = sol[n + closed.len() + col];
    }
    // check inequalities per mode
    for i in 0..nc {
        let c = &ctx.ck.contacts[i];
        let nvel = c.phi / dt + c.jn.dot(&v_plus);
        let tvel = c.jt.dot(&v_plus);
        match modes[i] {
            ContactMode::Open => {
                if nvel < -tol {
                    return None;
                }
            }
            ContactMode::Stick => {
                let ln = impulses[i].normal;
                if ln < -tol || impulses[i].tangential.abs() > c.mu * ln + tol {
                    return None;
                }
            }
            ContactMode::SlidePos => {
                let ln = impulses[i].normal;
                if ln < -tol || tvel < -tol {
                    return None;
                }
                impulses[i].tangential = -c.mu * ln;
            }
            ContactMode::SlideNeg => {
                let ln = impulses[i].normal;
                if ln < -tol || tvel > tol {
                    return None;
                }
                impulses[i].tangential = c.mu * ln;
            }
        }
    }
    Some((v_plus, impulses))
}

// ---------------------------------------------------------------------------
// Anitescu cone program, solved exactly by active-set enumeration.
// In the plane the cone constraint splits into two linear half-planes
//   phi/dt + jn v -+ mu jt v >= 0,
// so each active set is an equality-constrained QP.

pub fn solve_socp(
    model: &PlanarModel,
    q: &DVector<f64>,
    v: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<ContactStepResult, ContactError> {
    let ctx = step_context(model, q, v, u, dt)?;
    let n = model.dof();
    let nc = ctx.ck.contacts.len();
    assert!(nc <= 6, "active-set enumeration supports at most 6 contacts");
    let tol = 1e-9 * (1.0 + ctx.v_free.amax());

    // constraint rows: for contact i, row 2i is the "+" side (jn - mu jt),
    // row 2i+1 the "-" side (jn + mu jt); offsets are phi/dt.
    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(2 * nc);
    let mut offs: Vec<f64> = Vec::with_capacity(2 * nc);
    for c in &ctx.ck.contacts {
        rows.push(&c.jn - c.mu * &c.jt);
        rows.push(&c.jn + c.mu * &c.jt);
        offs.push(c.phi / dt);
        offs.push(c.phi / dt);
    }

    let mut best: Option<(f64, DVector<f64>, Vec<f64>)> = None;
    for mask in 0u32..(1 << (2 * nc)) {
        let active: Vec<usize> = (0..2 * nc).filter(|j| mask & (1 << j) != 0).collect();
        let na = active.len();
        let dim = n + na;
        let mut a = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        a.view_mut((0, 0), (n, n)).copy_from(&ctx.mass);
        b.rows_mut(0, n).copy_from(&ctx.rhs);
        for (col, &j) in active.iter().enumerate() {
            for r in 0..n {
                a[(r, n + col)] = -rows[j][r];
                a[(n + col, r)] = rows[j][r];
            }
            b[n + col] = -offs[j];
        }
        let Some(sol) = a.lu().solve(&b) else {
            continue;
        };
        let v_plus = sol.rows(0, n).into_owned();
        let mut nu = vec![0.0; 2 * nc];
        let mut ok = true;
        for (col, &j) in active.iter().enumerate() {
            nu[j] = sol[n + col];
            if nu[j] < -tol {
                ok = false;
            }
        }
        if ok {
            for j in 0..2 * nc {
                if mask & (1 << j) == 0 && offs[j] + rows[j].dot(&v_plus) < -tol {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let obj = {
            let d = &v_plus - &ctx.v_free;
            0.5 * (d.transpose() * &ctx.mass * &d)[0]
        };
        if best.as_ref().map_or(true, |(bo, _, _)| obj < bo - 1e-14) {
            best = Some((obj, v_plus, nu));
        }
    }

    let Some((_, v_plus, nu)) = best else {
        return Err(ContactError::SocpFailure(format!(
            "no feasible active set among {} candidates",
            1u32 << (2 * nc)
        )));
    };
    let impulses: Vec<Impulse> = (0..nc)
        .map(|i| Impulse {
            normal: nu[2 * i] + nu[2 * i + 1],
            tangential: ctx.ck.contacts[i].mu * (nu[2 * i + 1] - nu[2 * i]),
        })
        .collect();
    let residual = (&ctx.mass * (&v_plus - &ctx.v_free) - contact_force(&ctx.ck, &impulses)).amax();
    let slacks = cone_slacks(&ctx.ck, &v_plus, dt);
    let q_plus = integrate_config(q, &v_plus, dt);
    Ok(ContactStepResult {
        v_plus,
        q_plus,
        impulses,
        slacks,
        newton_iters: 0,
        converged: true,
        residual,
        cone_clamped: false,
        kkt_fallback: false,
    })
}

// ---------------------------------------------------------------------------
// Log-barrier smoothed stepper.

struct BarrierEval {
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    cost: f64,
    slacks: Vec<f64>,
    feasible: bool,
}

fn barrier_eval(ctx: &StepContext, v: &DVector<f64>, dt: f64, kappa: f64) -> BarrierEval {
    let d = v - &ctx.v_free;
    let mut grad = &ctx.mass * &d;
    let mut hess = ctx.mass.clone();
    let mut cost = 0.5 * (d.transpose() * &ctx.mass * &d)[0];
    let mut slacks = Vec::with_capacity(ctx.ck.contacts.len());
    let mut feasible = true;
    for c in &ctx.ck.contacts {
        let mu2 = c.mu * c.mu;
        let nvel = c.phi / dt + c.jn.dot(v);
        let tvel = c.jt.dot(v);
        let s = nvel * nvel / mu2 - tvel * tvel;
        slacks.push(s);
        if !(s > 0.0 && nvel > 0.0) {
            feasible = false;
            continue;
        }
        cost -= s.ln() / kappa;
        let ds: DVector<f64> = (2.0 * nvel / mu2) * &c.jn - (2.0 * tvel) * &c.jt;
        grad -= (1.0 / (kappa * s)) * &ds;
        // hess += (ds ds^T / s^2 - d2s / s) / kappa
        hess += (1.0 / (kappa * s * s)) * (&ds * ds.transpose());
        let jn_outer = &c.jn * c.jn.transpose();
        let jt_outer = &c.jt * c.jt.transpose();
        hess -= (1.0 / (kappa * s)) * ((2.0 / mu2) * jn_outer - 2.0 * jt_outer);
    }
    BarrierEval {
        grad,
        hess,
        cost,
        slacks,
        feasible,
    }
}

fn min_interior_margin(ctx: &StepContext, v: &DVector<f64>, dt: f64) -> f64 {
    let mut m = f64::INFINITY;
    for c in &ctx.ck.contacts {
        let nvel = c.phi / dt + c.jn.dot(v);
        let tvel = c.jt.dot(v);
        let s = nvel * nvel / (c.mu * c.mu) - tvel * tvel;
        m = m.min(if nvel <= 0.0 { nvel } else { s });
    }
    m
}

/// Projects the start point into the strict interior of every velocity cone
/// by pushing along the mass-weighted normals.
fn feasibility_initializer(
    ctx: &StepContext,
    start: &DVector<f64>,
    dt: f64,
    eps: f64,
) -> Result<DVector<f64>, ContactError> {
    let interior =
        |v: &DVector<f64>| -> bool { min_interior_margin(ctx, v, dt) >= eps };
    if interior(start) {
        return Ok(start.clone());
    }
    let chol = ctx
        .mass
        .clone()
        .cholesky()
        .ok_or(DynamicsError::SingularMass)?;
    let mut lo = 0.0f64;
    let mut beta = 1e-6f64;
    loop {
        // push along the normals that are currently violated
        let mut dir = DVector::zeros(start.len());
        for c in &ctx.ck.contacts {
            let nvel = c.phi / dt + c.jn.dot(start);
            let tvel = c.jt.dot(start);
            let s = nvel * nvel / (c.mu * c.mu) - tvel * tvel;
            if !(s >= eps && nvel > 0.0) {
                dir += &c.jn;
            }
        }
        if dir.amax() == 0.0 {
            dir = ctx.ck.contacts.iter().map(|c| &c.jn).fold(
                DVector::zeros(start.len()),
                |acc: DVector<f64>, jn| acc + jn,
            );
        }
        let push = chol.solve(&dir);
        let candidate = start + beta * &push;
        if interior(&candidate) {
            // bisect down toward the smallest sufficient push
            let mut hi = beta;
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if interior(&(start + mid * &push)) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(start + hi * &push);
        }
        lo = beta;
        beta *= 2.0;
        if beta > 1e8 {
            return Err(ContactError::FeasibilityFailed);
        }
    }
}

/// Newton solve of the log-barrier smoothed contact step.
pub fn solve_smoothed(
    model: &PlanarModel,
    q: &DVector<f64>,
    v: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    cfg: &SmoothingConfig,
    warm: Option<&DVector<f64>>,
) -> Result<ContactStepResult, ContactError> {
    let ctx = step_context(model, q, v, u, dt)?;
    let result = smoothed_from_context(&ctx, q, dt, cfg, warm)?;
    Ok(result)
}

fn smoothed_from_context(
    ctx: &StepContext,
    q: &DVector<f64>,
    dt: f64,
    cfg: &SmoothingConfig,
    warm: Option<&DVector<f64>>,
) -> Result<ContactStepResult, ContactError> {
    assert!(cfg.kappa > 0.0 && dt > 0.0);
    let start = warm.cloned().unwrap_or_else(|| ctx.v_free.clone());
    let mut vk = feasibility_initializer(ctx, &start, dt, cfg.eps_feas)?;
    let scale = 1.0 + ctx.v_free.norm();
    let tol = cfg.tol * scale;

    let mut eval = barrier_eval(ctx, &vk, dt, cfg.kappa);
    let mut iters = 0;
    while eval.grad.norm() > tol {
        if iters >= cfg.max_iters {
            return Err(ContactError::NewtonMaxIters {
                iters,
                residual: eval.grad.norm(),
            });
        }
        let mut step = eval
            .hess
            .clone()
            .cholesky()
            .map(|c| c.solve(&eval.grad))
            .unwrap_or_else(|| {
                // barrier Hessian is PD in the interior; LU as a fallback
                eval.hess
                    .clone()
                    .lu()
                    .solve(&eval.grad)
                    .unwrap_or_else(|| eval.grad.clone())
            });
        // the cone slack is a difference of quadratics, so the barrier
        // Hessian can lose definiteness near the boundary; regularize
        // until the Newton direction is a descent direction
        let mut tau = 1e-8 * (1.0 + eval.hess.diagonal().amax());
        while eval.grad.dot(&step) <= 0.0 && tau < 1e20 {
            let mut h = eval.hess.clone();
            for i in 0..h.nrows() {
                h[(i, i)] += tau;
            }
            if let Some(c) = h.cholesky() {
                step = c.solve(&eval.grad);
            }
            tau *= 10.0;
        }
        if eval.grad.dot(&step) <= 0.0 {
            step = eval.grad.clone();
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &vk - alpha * &step;
            let cand_eval = barrier_eval(ctx, &cand, dt, cfg.kappa);
            // near the optimum the cost decrease falls below f64 noise, so
            // a step that contracts the gradient also counts as progress
            let noise = 1e-12 * (1.0 + eval.cost.abs());
            if cand_eval.feasible
                && (cand_eval.cost <= eval.cost
                    || (cand_eval.cost <= eval.cost + noise
                        && cand_eval.grad.norm() < 0.9 * eval.grad.norm()))
            {
                vk = cand;
                eval = cand_eval;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        iters += 1;
        let stalled = !accepted
            || (alpha * &step).amax() <= 1e-14 * (1.0 + vk.amax());
        if stalled {
            // stationarity has hit the floating-point floor for this
            // conditioning; accept if we are within a couple of digits
            if eval.grad.norm() <= 1e3 * tol {
                break;
            }
            return Err(ContactError::NewtonMaxIters {
                iters,
                residual: eval.grad.norm(),
            });
        }
    }

    let impulses = impulses_from_velocity(&ctx.ck, &vk, dt, cfg.kappa)?;
    let residual = eval.grad.norm();
    let q_plus = integrate_config(q, &vk, dt);
    Ok(ContactStepResult {
        slacks: eval.slacks,
        v_plus: vk,
        q_plus,
        impulses,
        newton_iters: iters,
        converged: true,
        residual,
        cone_clamped: false,
        kkt_fallback: false,
    })
}

fn impulses_from_velocity(
    ck: &ContactKinematics,
    v_plus: &DVector<f64>,
    dt: f64,
    kappa: f64,
) -> Result<Vec<Impulse>, ContactError> {
    ck.contacts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mu2 = c.mu * c.mu;
            let nvel = c.phi / dt + c.jn.dot(v_plus);
            let tvel = c.jt.dot(v_plus);
            let s = nvel * nvel / mu2 - tvel * tvel;
            if s <= 0.0 {
                return Err(ContactError::InvalidSlack(i, s));
            }
            Ok(Impulse {
                normal: 2.0 * nvel / (mu2 * kappa * s),
                tangential: -2.0 * tvel / (kappa * s),
            })
        })
        .collect()
}

/// Approximates the latent impulses from a smoothed solution's contact
/// velocities and slacks.
pub fn recover_impulses(
    model: &PlanarModel,
    q: &DVector<f64>,
    v_plus: &DVector<f64>,
    dt: f64,
    kappa: f64,
) -> Result<Vec<Impulse>, ContactError> {
    let ck = contact_kinematics(model, q);
    impulses_from_velocity(&ck, v_plus, dt, kappa)
}

// ---------------------------------------------------------------------------
// Full step and analytic derivatives.

/// Advances the state by one contact step with the selected stepper.
pub fn step(
    model: &PlanarModel,
    x: &State,
    u: &DVector<f64>,
    dt: f64,
    cfg: &SmoothingConfig,
    stepper: Stepper,
    warm: Option<&DVector<f64>>,
) -> Result<(State, ContactStepResult), ContactError> {
    let result = match stepper {
        Stepper::Lcp => solve_lcp(model, &x.q, &x.v, u, dt)?,
        Stepper::Socp => solve_socp(model, &x.q, &x.v, u, dt)?,
        Stepper::Smoothed => solve_smoothed(model, &x.q, &x.v, u, dt, cfg, warm)?,
    };
    let state = State::new(result.q_plus.clone(), result.v_plus.clone());
    Ok((state, result))
}

/// Linearization of one smoothed (or fixed-contact) step.
///
/// States stack as `[q; v]`; `b_pi` is the sensitivity to the stacked
/// per-link standard inertial parameters (4 per link).
#[derive(Debug, Clone)]
pub struct StepDerivatives {
    pub a: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub b_pi: DMatrix<f64>,
    /// Sensitivity of `v_plus` to the barrier weight (diagnostic).
    pub dv_dkappa: DVector<f64>,
}

/// Solves the smoothed step and differentiates it through the stationarity
/// condition of the barrier objective.
pub fn step_derivatives(
    model: &PlanarModel,
    x: &State,
    u: &DVector<f64>,
    dt: f64,
    cfg: &SmoothingConfig,
    warm: Option<&DVector<f64>>,
) -> Result<(ContactStepResult, StepDerivatives), ContactError> {
    let ctx = step_context(model, &x.q, &x.v, u, dt)?;
    let result = smoothed_from_context(&ctx, &x.q, dt, cfg, warm)?;
    let v_plus = &result.v_plus;
    let n = model.dof();

    let dd = dynamics_derivatives(model, &x.q, &x.v);
    let eval = barrier_eval(&ctx, v_plus, dt, cfg.kappa);
    let hess_chol = eval
        .hess
        .clone()
        .cholesky()
        .ok_or(ContactError::SocpFailure("singular barrier Hessian".into()))?;

    // dg/dq: mass and bias terms plus the barrier force's q-dependence.
    let dv = v_plus - &x.v;
    let mut dg_dq = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        let col = &dd.dmass[k] * &dv + dt * dd.dbias_dq.column(k);
        dg_dq.column_mut(k).copy_from(&col);
    }
    for c in &ctx.ck.contacts {
        let mu2 = c.mu * c.mu;
        let nvel = c.phi / dt + c.jn.dot(v_plus);
        let tvel = c.jt.dot(v_plus);
        let s = nvel * nvel / mu2 - tvel * tvel;
        let ln = 2.0 * nvel / (mu2 * cfg.kappa * s);
        let lt = -2.0 * tvel / (cfg.kappa * s);
        for k in 0..n {
            let djn_k = c.d_jn.column(k);
            let djt_k = c.d_jt.column(k);
            let dn = c.jn[k] / dt + djn_k.dot(v_plus);
            let dtv = djt_k.dot(v_plus);
            let ds = (2.0 * nvel / mu2) * dn - 2.0 * tvel * dtv;
            let dln = 2.0 * (dn * s - nvel * ds) / (mu2 * cfg.kappa * s * s);
            let dlt = -2.0 * (dtv * s - tvel * ds) / (cfg.kappa * s * s);
            let dforce = dln * &c.jn + ln * djn_k + dlt * &c.jt + lt * djt_k;
            let col = dg_dq.column(k) - dforce;
            dg_dq.column_mut(k).copy_from(&col);
        }
    }

    // dg/dv and dg/du
    let dg_dv = -&ctx.mass + dt * &dd.dbias_dv;
    let act = model.actuated_indices();
    let mut dg_du = DMatrix::<f64>::zeros(n, act.len());
    for (col, &qi) in act.iter().enumerate() {
        dg_du[(qi, col)] = -dt;
    }

    // dg/dpi: M (v_plus - v) + dt h(q, v) is dt * Y(q, v, (v_plus - v)/dt) pi
    let accel = &dv / dt;
    let dg_dpi = dt * regressor(model, &x.q, &x.v, &accel);

    let dvp_dq = -hess_chol.solve(&dg_dq);
    let dvp_dv = -hess_chol.solve(&dg_dv);
    let dvp_du = -hess_chol.solve(&dg_du);
    let dvp_dpi = -hess_chol.solve(&dg_dpi);
    // At stationarity dg/dkappa = M (v_plus - v_free) / kappa.
    let dg_dkappa = (&ctx.mass * (v_plus - &ctx.v_free)) / cfg.kappa;
    let dv_dkappa = -hess_chol.solve(&dg_dkappa);

    let mut a = DMatrix::<f64>::zeros(2 * n, 2 * n);
    a.view_mut((0, 0), (n, n))
        .copy_from(&(DMatrix::identity(n, n) + dt * &dvp_dq));
    a.view_mut((0, n), (n, n)).copy_from(&(dt * &dvp_dv));
    a.view_mut((n, 0), (n, n)).copy_from(&dvp_dq);
    a.view_mut((n, n), (n, n)).copy_from(&dvp_dv);

    let stack = |dv_d: &DMatrix<f64>| {
        let mut b = DMatrix::<f64>::zeros(2 * n, dv_d.ncols());
        b.view_mut((0, 0), (n, dv_d.ncols())).copy_from(&(dt * dv_d));
        b.view_mut((n, 0), (n, dv_d.ncols())).copy_from(dv_d);
        b
    };

    Ok((
        result,
        StepDerivatives {
            a,
            b_u: stack(&dvp_du),
            b_pi: stack(&dvp_dpi),
            dv_dkappa,
        },
    ))
}

// ---------------------------------------------------------------------------
// Fixed-contact KKT stepper (baseline estimator dynamics).

/// Rigid-constraint step: active contacts are pinned (`J v_plus = 0`),
/// friction is reported but not enforced; cone violations are clamped in
/// the report and flagged.
pub fn solve_fixed_contact(
    model: &PlanarModel,
    q: &DVector<f64>,
    v: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    active: &[bool],
) -> Result<ContactStepResult, ContactError> {
    let ctx = step_context(model, q, v, u, dt)?;
    let (v_plus, lambda, fallback) = fixed_contact_kkt(&ctx, active)?;
    let nc = ctx.ck.contacts.len();
    let mut impulses = vec![Impulse::default(); nc];
    let mut cone_clamped = false;
    let mut li = 0;
    for i in 0..nc {
        if active[i] {
            let lt = lambda[2 * li];
            let ln = lambda[2 * li + 1];
            let mu = ctx.ck.contacts[i].mu;
            let (ln_rep, lt_rep) = if ln < 0.0 {
                cone_clamped = true;
                (0.0, 0.0)
            } else if lt.abs() > mu * ln {
                cone_clamped = true;
                (ln, lt.signum() * mu * ln)
            } else {
                (ln, lt)
            };
            impulses[i] = Impulse {
                normal: ln_rep,
                tangential: lt_rep,
            };
            li += 1;
        }
    }
    let residual = {
        let mut f = DVector::zeros(model.dof());
        let mut li = 0;
        for i in 0..nc {
            if active[i] {
                f += lambda[2 * li] * &ctx.ck.contacts[i].jt + lambda[2 * li + 1] * &ctx.ck.contacts[i].jn;
                li += 1;
            }
        }
        (&ctx.mass * (&v_plus - &ctx.v_free) - f).amax()
    };
    let slacks = cone_slacks(&ctx.ck, &v_plus, dt);
    let q_plus = integrate_config(q, &v_plus, dt);
    Ok(ContactStepResult {
        v_plus,
        q_plus,
        impulses,
        slacks,
        newton_iters: 0,
        converged: true,
        residual,
        cone_clamped,
        kkt_fallback: fallback,
    })
}

fn fixed_contact_kkt(
    ctx: &StepContext,
    active: &[bool],
) -> Result<(DVector<f64>, DVector<f64>, bool), ContactError> {
    let n = ctx.v_free.len();
    let rows: Vec<&DVector<f64>> = ctx
        .ck
        .contacts
        .iter()
        .zip(active)
        .filter(|(_, a)| **a)
        .flat_map(|(c, _)| [&c.jt, &c.jn])
        .collect();
    let na = rows.len();
    if na == 0 {
        return Ok((ctx.v_free.clone(), DVector::zeros(0), false));
    }
    let dim = n + na;
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);
    a.view_mut((0, 0), (n, n)).copy_from(&ctx.mass);
    b.rows_mut(0, n).copy_from(&ctx.rhs);
    for (col, row) in rows.iter().enumerate() {
        for r in 0..n {
            a[(r, n + col)] = -row[r];
            a[(n + col, r)] = row[r];
        }
    }
    match a.clone().lu().solve(&b) {
        Some(sol) if sol.iter().all(|x| x.is_finite()) && kkt_residual_ok(&a, &sol, &b) => Ok((
            sol.rows(0, n).into_owned(),
            sol.rows(n, na).into_owned(),
            false,
        )),
        _ => {
            let svd = a.svd(true, true);
            let sol = svd
                .solve(&b, 1e-10)
                .map_err(|e| ContactError::SocpFailure(e.to_string()))?;
            Ok((
                sol.rows(0, n).into_owned(),
                sol.rows(n, na).into_owned(),
                true,
            ))
        }
    }
}

fn kkt_residual_ok(a: &DMatrix<f64>, sol: &DVector<f64>, b: &DVector<f64>) -> bool {
    (a * sol - b).amax() <= 1e-8 * (1.0 + b.amax())
}

/// Implicit differentiation of the fixed-contact KKT step.
pub fn fixed_contact_derivatives(
    model: &PlanarModel,
    x: &State,
    u: &DVector<f64>,
    dt: f64,
    active: &[bool],
) -> Result<(ContactStepResult, StepDerivatives), ContactError> {
    let ctx = step_context(model, &x.q, &x.v, u, dt)?;
    let result = solve_fixed_contact(model, &x.q, &x.v, u, dt, active)?;
    let (v_plus, lambda, _) = fixed_contact_kkt(&ctx, active)?;
    let n = model.dof();
    let dd = dynamics_derivatives(model, &x.q, &x.v);

    let active_contacts: Vec<usize> = (0..active.len()).filter(|i| active[*i]).collect();
    let na = 2 * active_contacts.len();
    let dim = n + na;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&ctx.mass);
    for (col, &i) in active_contacts.iter().enumerate() {
        let c = &ctx.ck.contacts[i];
        for (off, row) in [&c.jt, &c.jn].iter().enumerate() {
            let idx = n + 2 * col + off;
            for r in 0..n {
                kkt[(r, idx)] = -row[r];
                kkt[(idx, r)] = row[r];
            }
        }
    }
    let lu = kkt.clone().lu();

    let dv = &v_plus - &x.v;
    // dG/dq
    let mut dg_dq = DMatrix::<f64>::zeros(dim, n);
    for k in 0..n {
        let mut top = &dd.dmass[k] * &dv + dt * dd.dbias_dq.column(k).into_owned();
        for (col, &i) in active_contacts.iter().enumerate() {
            let c = &ctx.ck.contacts[i];
            let djt_k = c.d_jt.column(k).into_owned();
            let djn_k = c.d_jn.column(k).into_owned();
            top -= lambda[2 * col] * &djt_k + lambda[2 * col + 1] * &djn_k;
            dg_dq[(n + 2 * col, k)] = djt_k.dot(&v_plus);
            dg_dq[(n + 2 * col + 1, k)] = djn_k.dot(&v_plus);
        }
        for r in 0..n {
            dg_dq[(r, k)] += top[r];
        }
    }
    let mut dg_dv = DMatrix::<f64>::zeros(dim, n);
    dg_dv
        .view_mut((0, 0), (n, n))
        .copy_from(&(-&ctx.mass + dt * &dd.dbias_dv));
    let act = model.actuated_indices();
    let mut dg_du = DMatrix::<f64>::zeros(dim, act.len());
    for (col, &qi) in act.iter().enumerate() {
        dg_du[(qi, col)] = -dt;
    }
    let accel = &dv / dt;
    let y = regressor(model, &x.q, &x.v, &accel);
    let mut dg_dpi = DMatrix::<f64>::zeros(dim, y.ncols());
    dg_dpi.view_mut((0, 0), (n, y.ncols())).copy_from(&(dt * &y));

    let solve_block = |rhs: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = DMatrix::<f64>::zeros(n, rhs.ncols());
        for c in 0..rhs.ncols() {
            let col = rhs.column(c).into_owned();
            let sol = lu.solve(&col).unwrap_or_else(|| DVector::zeros(dim));
            out.column_mut(c).copy_from(&(-sol.rows(0, n)));
        }
        out
    };
    let dvp_dq = solve_block(&dg_dq);
    let dvp_dv = solve_block(&dg_dv);
    let dvp_du = solve_block(&dg_du);
    let dvp_dpi = solve_block(&dg_dpi);

    let mut a = DMatrix::<f64>::zeros(2 * n, 2 * n);
    a.view_mut((0, 0), (n, n))
        .copy_from(&(DMatrix::identity(n, n) + dt * &dvp_dq));
    a.view_mut((0, n), (n, n)).copy_from(&(dt * &dvp_dv));
    a.view_mut((n, 0), (n, n)).copy_from(&dvp_dq);
    a.view_mut((n, n), (n, n)).copy_from(&dvp_dv);
    let stack = |dv_d: &DMatrix<f64>| {
        let mut b = DMatrix::<f64>::zeros(2 * n, dv_d.ncols());
        b.view_mut((0, 0), (n, dv_d.ncols())).copy_from(&(dt * dv_d));
        b.view_mut((n, 0), (n, dv_d.ncols())).copy_from(dv_d);
        b
    };
    Ok((
        result,
        StepDerivatives {
            a,
            b_u: stack(&dvp_du),
            b_pi: stack(&dvp_dpi),
            dv_dkappa: DVector::zeros(n),
        },
    ))
}
