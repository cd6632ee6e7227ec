//! Full-information estimation over contact dynamics.
//!
//! The estimator refines a noisy measured trajectory into one that is
//! consistent with the smoothed contact dynamics, optionally identifying
//! inertial parameters at the same time. Decision variables are the initial
//! state, a per-step generalized-velocity disturbance, and (for parameter
//! estimation) the log-Cholesky coordinates of selected links, which ride
//! along as static augmented state.
//!
//! The solver is differential dynamic programming with a value-function
//! backward pass and feedback forward rollout; the multiple-shooting
//! variant tolerates dynamics gaps in early iterations so the raw
//! measurements can seed the trajectory directly. A fixed-contact-sequence
//! baseline using rigid KKT dynamics is provided for comparison.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contact::{
    fixed_contact_derivatives, solve_fixed_contact, solve_smoothed, step_derivatives,
    ContactError, Impulse, SmoothingConfig,
};
use crate::dynamics::contact_kinematics;
use crate::inertia::{
    pi_jacobian_2d, theta_from_pi_2d, InertiaError, LogCholeskyParams2D,
};
use crate::model::{ModelError, PlanarModel, State};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Contact(#[from] ContactError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inertia(#[from] InertiaError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

// ---------------------------------------------------------------------------
// Measurement model.

/// Which measurement channel groups are present.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct ChannelMask {
    pub base_pos: bool,
    pub base_angle: bool,
    pub base_linvel: bool,
    pub base_angvel: bool,
    pub joint_pos: bool,
    pub joint_vel: bool,
}

impl Default for ChannelMask {
    fn default() -> Self {
        Self {
            base_pos: true,
            base_angle: true,
            base_linvel: true,
            base_angvel: true,
            joint_pos: true,
            joint_vel: true,
        }
    }
}

/// One time-step of sensor data.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MeasurementSample {
    pub base_pos: [f64; 2],
    pub base_angle: f64,
    pub base_linvel: [f64; 2],
    pub base_angvel: f64,
    pub joint_pos: Vec<f64>,
    pub joint_vel: Vec<f64>,
    #[serde(default)]
    pub mask: ChannelMask,
}

/// Pure selection of base pose/velocity and joint states from `x`.
pub fn measure(model: &PlanarModel, x: &State) -> MeasurementSample {
    let n = model.n_joints();
    MeasurementSample {
        base_pos: [x.q[0], x.q[1]],
        base_angle: x.q[2],
        base_linvel: [x.v[0], x.v[1]],
        base_angvel: x.v[2],
        joint_pos: (0..n).map(|j| x.q[3 + j]).collect(),
        joint_vel: (0..n).map(|j| x.v[3 + j]).collect(),
        mask: ChannelMask::default(),
    }
}

/// Diagonal inverse-covariance weights for every cost channel.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeightConfig {
    pub process_base: f64,
    pub process_joint: f64,
    pub base_pos: f64,
    pub base_vel: f64,
    pub base_angle: f64,
    pub base_angvel: f64,
    pub joint_pos: f64,
    pub joint_vel: f64,
    pub param_prior: f64,
    pub initial_state: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        // Measurement weights are the inverse variances of the default sensor
        // noise (sigma 0.002 m / 0.002 rad positions, 0.01 rad angle,
        // 0.02 rad/s joint rates); the base velocity channels come from
        // differentiated poses, so their effective noise is sigma*sqrt(2)/dt
        // plus the direct term, giving far smaller weights. The process
        // weight reflects the per-step model error of the smoothed dynamics
        // against a rigid rollout rather than a physical disturbance.
        Self {
            process_base: 1e5,
            process_joint: 1e5,
            base_pos: 2.5e5,
            base_vel: 6.5e1,
            base_angle: 1e4,
            base_angvel: 3e0,
            joint_pos: 2.5e5,
            joint_vel: 2.5e3,
            param_prior: 4e-2,
            initial_state: 1e3,
        }
    }
}

/// Per-channel (state index, weight, measured value) triples for one sample,
/// honoring the presence mask.
fn measurement_terms(
    n_joints: usize,
    w: &WeightConfig,
    y: &MeasurementSample,
) -> Vec<(usize, f64, f64)> {
    let n = 3 + n_joints;
    let mut terms = Vec::with_capacity(2 * n);
    if y.mask.base_pos {
        terms.push((0, w.base_pos, y.base_pos[0]));
        terms.push((1, w.base_pos, y.base_pos[1]));
    }
    if y.mask.base_angle {
        terms.push((2, w.base_angle, y.base_angle));
    }
    if y.mask.base_linvel {
        terms.push((n, w.base_vel, y.base_linvel[0]));
        terms.push((n + 1, w.base_vel, y.base_linvel[1]));
    }
    if y.mask.base_angvel {
        terms.push((n + 2, w.base_angvel, y.base_angvel));
    }
    if y.mask.joint_pos {
        for (j, &v) in y.joint_pos.iter().enumerate() {
            terms.push((3 + j, w.joint_pos, v));
        }
    }
    if y.mask.joint_vel {
        for (j, &v) in y.joint_vel.iter().enumerate() {
            terms.push((n + 3 + j, w.joint_vel, v));
        }
    }
    terms
}

// ---------------------------------------------------------------------------
// Problem description.

/// Selects which log-Cholesky coordinates of a link are identified.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdSpec {
    pub link: usize,
    /// Indices into the 6-vector theta2.
    pub entries: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub fddp: bool,
    pub threads: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-9,
            fddp: true,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimationProblem {
    /// Prior model; link inertias double as the parameter prior.
    pub model: PlanarModel,
    pub ys: Vec<MeasurementSample>,
    pub us: Vec<DVector<f64>>,
    pub dt: f64,
    pub weights: WeightConfig,
    /// Initial-state prior mean; defaults to the measurement-seeded state.
    pub x0_prior: Option<State>,
    pub id_links: Vec<IdSpec>,
    pub smoothing: SmoothingConfig,
    pub solver: SolverOptions,
}

impl EstimationProblem {
    pub fn new(
        model: PlanarModel,
        ys: Vec<MeasurementSample>,
        us: Vec<DVector<f64>>,
        dt: f64,
    ) -> Self {
        Self {
            model,
            ys,
            us,
            dt,
            weights: WeightConfig::default(),
            x0_prior: None,
            id_links: Vec::new(),
            smoothing: SmoothingConfig::default(),
            solver: SolverOptions::default(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.us.len()
    }

    fn check(&self) -> Result<(), EstimatorError> {
        if self.ys.len() != self.us.len() + 1 {
            return Err(EstimatorError::Dimension(format!(
                "{} measurements for {} inputs (need T+1)",
                self.ys.len(),
                self.us.len()
            )));
        }
        if self.us.is_empty() {
            return Err(EstimatorError::Dimension("horizon must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub process: f64,
    pub measurement: f64,
    pub prior: f64,
    pub parameter: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub cost: f64,
    pub gap_norm: f64,
    pub step_length: f64,
    pub regularization: f64,
}

#[derive(Debug, Clone)]
pub struct EstimationSolution {
    pub states: Vec<State>,
    pub disturbances: Vec<DVector<f64>>,
    /// Identified coordinates per `IdSpec`, same order as the problem mask.
    pub thetas: Vec<LogCholeskyParams2D>,
    /// Model with identified inertias applied.
    pub model: PlanarModel,
    pub impulses: Vec<Vec<Impulse>>,
    pub cost: CostBreakdown,
    pub trace: Vec<IterRecord>,
    pub converged: bool,
    pub gap_norm: f64,
    /// Set when any baseline KKT node needed pseudo-inverse or clamping.
    pub baseline_flags: usize,
}

// ---------------------------------------------------------------------------
// Generic DDP/FDDP solver over an abstract problem.

pub struct NodeLin {
    pub x_next: DVector<f64>,
    pub fx: DMatrix<f64>,
    pub fw: DMatrix<f64>,
}

pub struct StageQuad {
    pub lx: DVector<f64>,
    pub lw: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub lww: DMatrix<f64>,
    pub lwx: DMatrix<f64>,
}

/// Discrete-time estimation/control problem in DDP form: disturbances `w`
/// act as the controls, the initial state is free.
pub trait DdpProblem: Sync {
    fn horizon(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn dynamics(&self, k: usize, x: &DVector<f64>, w: &DVector<f64>)
        -> Result<DVector<f64>, EstimatorError>;
    fn linearize(&self, k: usize, x: &DVector<f64>, w: &DVector<f64>)
        -> Result<NodeLin, EstimatorError>;
    fn stage_cost(&self, k: usize, x: &DVector<f64>, w: &DVector<f64>) -> f64;
    fn stage_quad(&self, k: usize, x: &DVector<f64>, w: &DVector<f64>) -> StageQuad;
    fn terminal_cost(&self, x: &DVector<f64>) -> f64;
    fn terminal_quad(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
    fn initial_cost(&self, x: &DVector<f64>) -> f64;
    fn initial_quad(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
    fn initial_guess(&self) -> (Vec<DVector<f64>>, Vec<DVector<f64>>);
    /// Merit contribution of a dynamics gap; the default keeps infeasible
    /// iterates strongly discouraged for problems without natural units.
    fn gap_cost(&self, _k: usize, gap: &DVector<f64>) -> f64 {
        1e6 * gap.norm_squared()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DdpOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub fddp: bool,
    pub eta_init: f64,
    pub eta_max: f64,
    pub threads: usize,
}

impl Default for DdpOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-9,
            fddp: true,
            eta_init: 1e-9,
            eta_max: 1e6,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DdpOutcome {
    pub xs: Vec<DVector<f64>>,
    pub ws: Vec<DVector<f64>>,
    pub cost: f64,
    pub trace: Vec<IterRecord>,
    pub converged: bool,
    pub gap_norm: f64,
}

fn total_cost<P: DdpProblem>(p: &P, xs: &[DVector<f64>], ws: &[DVector<f64>]) -> f64 {
    let t = p.horizon();
    let mut c = p.initial_cost(&xs[0]) + p.terminal_cost(&xs[t]);
    for k in 0..t {
        c += p.stage_cost(k, &xs[k], &ws[k]);
    }
    c
}

struct BackwardOut {
    ks: Vec<DVector<f64>>,
    gains: Vec<DMatrix<f64>>,
    d1: f64,
    vx0: DVector<f64>,
    vxx0: DMatrix<f64>,
}

fn backward_pass<P: DdpProblem>(
    p: &P,
    xs: &[DVector<f64>],
    ws: &[DVector<f64>],
    lins: &[NodeLin],
    gaps: &[DVector<f64>],
    eta: f64,
) -> Option<BackwardOut> {
    let t = p.horizon();
    let (mut vx, mut vxx) = p.terminal_quad(&xs[t]);
    let mut ks = vec![DVector::zeros(0); t];
    let mut gains = vec![DMatrix::zeros(0, 0); t];
    let mut d1 = 0.0;
    for k in (0..t).rev() {
        let lin = &lins[k];
        let q = p.stage_quad(k, &xs[k], &ws[k]);
        // deflect the value gradient across the shooting gap
        let vx_def = &vx + &vxx * &gaps[k];
        let qx = &q.lx + lin.fx.transpose() * &vx_def;
        let qw = &q.lw + lin.fw.transpose() * &vx_def;
        let qxx = &q.lxx + lin.fx.transpose() * &vxx * &lin.fx;
        let mut qww = &q.lww + lin.fw.transpose() * &vxx * &lin.fw;
        for i in 0..qww.nrows() {
            qww[(i, i)] += eta;
        }
        let qwx = &q.lwx + lin.fw.transpose() * &vxx * &lin.fx;
        let chol = qww.clone().cholesky()?;
        let kk = -chol.solve(&qw);
        let gain = -chol.solve(&qwx);
        d1 += qw.dot(&kk);
        vx = &qx + gain.transpose() * (&qww * &kk) + gain.transpose() * &qw
            + qwx.transpose() * &kk;
        vxx = &qxx + gain.transpose() * (&qww * &gain) + gain.transpose() * &qwx
            + qwx.transpose() * &gain;
        vxx = 0.5 * (&vxx + vxx.transpose());
        ks[k] = kk;
        gains[k] = gain;
    }
    Some(BackwardOut {
        ks,
        gains,
        d1,
        vx0: vx,
        vxx0: vxx,
    })
}

fn linearize_all<P: DdpProblem>(
    p: &P,
    xs: &[DVector<f64>],
    ws: &[DVector<f64>],
    threads: usize,
) -> Result<Vec<NodeLin>, EstimatorError> {
    let t = p.horizon();
    if threads <= 1 || t < 8 {
        return (0..t).map(|k| p.linearize(k, &xs[k], &ws[k])).collect();
    }
    let chunk = t.div_ceil(threads);
    let mut out: Vec<Option<Result<NodeLin, EstimatorError>>> = Vec::new();
    out.resize_with(t, || None);
    std::thread::scope(|scope| {
        for (c, slot) in out.chunks_mut(chunk).enumerate() {
            let start = c * chunk;
            scope.spawn(move || {
                for (i, s) in slot.iter_mut().enumerate() {
                    let k = start + i;
                    *s = Some(p.linearize(k, &xs[k], &ws[k]));
                }
            });
        }
    });
    out.into_iter().map(|o| o.expect("chunk filled")).collect()
}

/// DDP with free initial state; multiple-shooting gaps when `fddp` is set.
pub fn solve_ddp_generic<P: DdpProblem>(
    p: &P,
    opts: &DdpOptions,
) -> Result<DdpOutcome, EstimatorError> {
    let t = p.horizon();
    let (mut xs, mut ws) = p.initial_guess();
    assert_eq!(xs.len(), t + 1);
    assert_eq!(ws.len(), t);
    if !opts.fddp {
        // close all gaps up front: plain single-shooting DDP
        for k in 0..t {
            xs[k + 1] = p.dynamics(k, &xs[k], &ws[k])?;
        }
    }

    let gap_norm_of = |gaps: &[DVector<f64>]| -> f64 {
        gaps.iter().map(|g| g.amax()).fold(0.0, f64::max)
    };
    let merit_of = |p: &P, xs: &[DVector<f64>], ws: &[DVector<f64>], gaps: &[DVector<f64>]| {
        total_cost(p, xs, ws)
            + gaps
                .iter()
                .enumerate()
                .map(|(k, g)| p.gap_cost(k, g))
                .sum::<f64>()
    };

    let mut eta = opts.eta_init;
    let mut trace: Vec<IterRecord> = Vec::new();
    let mut converged = false;

    let mut lins = linearize_all(p, &xs, &ws, opts.threads)?;
    let mut gaps: Vec<DVector<f64>> = (0..t).map(|k| &lins[k].x_next - &xs[k + 1]).collect();
    let mut merit = merit_of(p, &xs, &ws, &gaps);
    trace.push(IterRecord {
        iteration: 0,
        cost: merit,
        gap_norm: gap_norm_of(&gaps),
        step_length: 0.0,
        regularization: eta,
    });

    'iters: for iteration in 1..=opts.max_iters {
        // backward pass, inflating the regularization until it factors
        let bw = loop {
            match backward_pass(p, &xs, &ws, &lins, &gaps, eta) {
                Some(bw) => break bw,
                None => {
                    eta *= 2.0;
                    if eta > opts.eta_max {
                        break 'iters;
                    }
                }
            }
        };

        // initial-node step on x0 (and any augmented statics)
        let (lx0, lxx0) = p.initial_quad(&xs[0]);
        let g0 = &bw.vx0 + &lx0;
        let mut h0 = &bw.vxx0 + &lxx0;
        for i in 0..h0.nrows() {
            h0[(i, i)] += eta;
        }
        let Some(h0c) = h0.cholesky() else {
            eta *= 2.0;
            if eta > opts.eta_max {
                break;
            }
            continue;
        };
        let dx0 = -h0c.solve(&g0);
        let expected = -bw.d1 - g0.dot(&dx0);
        let gnorm = gap_norm_of(&gaps);
        if expected.abs() <= opts.tol * (1.0 + merit.abs()) && gnorm <= 1e-6 {
            converged = true;
            break;
        }

        // forward pass with Armijo backtracking
        let mut accepted = false;
        let mut alpha = 1.0;
        for _ in 0..=10 {
            let mut nxs = xs.clone();
            let mut nws = ws.clone();
            nxs[0] = &xs[0] + alpha * &dx0;
            let mut ok = true;
            for k in 0..t {
                let dx = &nxs[k] - &xs[k];
                nws[k] = &ws[k] + alpha * &bw.ks[k] + &bw.gains[k] * &dx;
                match p.dynamics(k, &nxs[k], &nws[k]) {
                    Ok(next) => nxs[k + 1] = next - (1.0 - alpha) * &gaps[k],
                    Err(_) => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                let ngaps: Vec<DVector<f64>> =
                    gaps.iter().map(|g| (1.0 - alpha) * g).collect();
                let nmerit = merit_of(p, &nxs, &nws, &ngaps);
                if nmerit <= merit - 1e-6 * alpha * expected.max(0.0) {
                    let improvement = merit - nmerit;
                    xs = nxs;
                    ws = nws;
                    gaps = ngaps;
                    merit = nmerit;
                    eta = (eta * 0.5).max(opts.eta_init);
                    trace.push(IterRecord {
                        iteration,
                        cost: merit,
                        gap_norm: gap_norm_of(&gaps),
                        step_length: alpha,
                        regularization: eta,
                    });
                    accepted = true;
                    if improvement <= opts.tol * (1.0 + merit.abs())
                        && gap_norm_of(&gaps) <= 1e-6
                    {
                        converged = true;
                        break 'iters;
                    }
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            eta *= 2.0;
            if eta > opts.eta_max {
                break;
            }
            continue;
        }
        lins = linearize_all(p, &xs, &ws, opts.threads)?;
        gaps = (0..t).map(|k| &lins[k].x_next - &xs[k + 1]).collect();
    }

    Ok(DdpOutcome {
        cost: total_cost(p, &xs, &ws),
        gap_norm: {
            let mut g = 0.0f64;
            for k in 0..t {
                let next = p.dynamics(k, &xs[k], &ws[k])?;
                g = g.max((next - &xs[k + 1]).amax());
            }
            g
        },
        xs,
        ws,
        trace,
        converged,
    })
}

// ---------------------------------------------------------------------------
// The contact-dynamics estimation problem in DDP form.

#[derive(Debug, Clone)]
enum DynMode {
    Smoothed,
    /// Per-node active-contact flags.
    FixedContact(Vec<Vec<bool>>),
}

struct IdLayout {
    specs: Vec<IdSpec>,
    /// Prior theta per identified link (full 6-vector).
    priors: Vec<LogCholeskyParams2D>,
    n_theta: usize,
}

impl IdLayout {
    fn build(model: &PlanarModel, specs: &[IdSpec]) -> Result<IdLayout, EstimatorError> {
        let mut priors = Vec::new();
        let mut n_theta = 0;
        for s in specs {
            if s.link >= model.links.len() {
                return Err(EstimatorError::Dimension(format!(
                    "identification link {} out of range",
                    s.link
                )));
            }
            if s.entries.iter().any(|&e| e >= 6) {
                return Err(EstimatorError::Dimension(
                    "theta2 entry index out of range".into(),
                ));
            }
            priors.push(theta_from_pi_2d(&model.links[s.link].inertia)?);
            n_theta += s.entries.len();
        }
        Ok(IdLayout {
            specs: specs.to_vec(),
            priors,
            n_theta,
        })
    }

    fn prior_vector(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_theta);
        let mut i = 0;
        for (s, p) in self.specs.iter().zip(&self.priors) {
            for &e in &s.entries {
                out[i] = p.theta2[e];
                i += 1;
            }
        }
        out
    }

    /// Full theta per identified link with the masked entries overwritten
    /// from the augmented vector.
    fn link_thetas(&self, aug: &DVector<f64>) -> Vec<LogCholeskyParams2D> {
        let mut out = Vec::with_capacity(self.specs.len());
        let mut i = 0;
        for (s, p) in self.specs.iter().zip(&self.priors) {
            let mut th = *p;
            for &e in &s.entries {
                th.theta2[e] = aug[i];
                i += 1;
            }
            out.push(th);
        }
        out
    }
}

struct FieProblem<'a> {
    prob: &'a EstimationProblem,
    mode: DynMode,
    id: IdLayout,
    /// Measurement-seeded states, also the default priors.
    seed: Vec<State>,
    x0_prior: State,
    theta_prior: DVector<f64>,
    nv: usize,
}

impl<'a> FieProblem<'a> {
    fn new(prob: &'a EstimationProblem, mode: DynMode) -> Result<Self, EstimatorError> {
        prob.check()?;
        let id = IdLayout::build(&prob.model, &prob.id_links)?;
        let seed = seed_states(&prob.model, &prob.ys, prob.dt);
        let x0_prior = prob.x0_prior.clone().unwrap_or_else(|| seed[0].clone());
        let theta_prior = id.prior_vector();
        let nv = prob.model.dof();
        Ok(Self {
            prob,
            mode,
            id,
            seed,
            x0_prior,
            theta_prior,
            nv,
        })
    }

    fn split(&self, x: &DVector<f64>) -> (State, DVector<f64>) {
        let n = self.nv;
        (
            State::new(x.rows(0, n).into_owned(), x.rows(n, n).into_owned()),
            x.rows(2 * n, self.id.n_theta).into_owned(),
        )
    }

    fn model_for(&self, theta: &DVector<f64>) -> Result<PlanarModel, EstimatorError> {
        let mut m = self.prob.model.clone();
        for (spec, th) in self.id.specs.iter().zip(self.id.link_thetas(theta)) {
            m = m.set_link_theta(spec.link, &th)?;
        }
        Ok(m)
    }

    fn process_weights(&self) -> DVector<f64> {
        let w = &self.prob.weights;
        let mut out = DVector::from_element(self.nv, w.process_joint);
        for i in 0..3 {
            out[i] = w.process_base;
        }
        out
    }

    fn measurement_cost(&self, k: usize, x: &DVector<f64>) -> f64 {
        let terms = measurement_terms(
            self.prob.model.n_joints(),
            &self.prob.weights,
            &self.prob.ys[k],
        );
        terms
            .iter()
            .map(|&(i, w, y)| {
                let r = x[i] - y;
                w * r * r
            })
            .sum()
    }

    fn measurement_quad(&self, k: usize, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let nx = self.state_dim();
        let mut lx = DVector::zeros(nx);
        let mut lxx = DMatrix::zeros(nx, nx);
        for (i, w, y) in
            measurement_terms(self.prob.model.n_joints(), &self.prob.weights, &self.prob.ys[k])
        {
            lx[i] += 2.0 * w * (x[i] - y);
            lxx[(i, i)] += 2.0 * w;
        }
        (lx, lxx)
    }
}

impl DdpProblem for FieProblem<'_> {
    fn horizon(&self) -> usize {
        self.prob.horizon()
    }

    fn state_dim(&self) -> usize {
        2 * self.nv + self.id.n_theta
    }

    fn control_dim(&self) -> usize {
        self.nv
    }

    fn dynamics(
        &self,
        k: usize,
        x: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<DVector<f64>, EstimatorError> {
        let (state, theta) = self.split(x);
        let model = self.model_for(&theta)?;
        let dt = self.prob.dt;
        let u = &self.prob.us[k];
        let r = match &self.mode {
            DynMode::Smoothed => solve_smoothed(
                &model,
                &state.q,
                &state.v,
                u,
                dt,
                &self.prob.smoothing,
                None,
            )?,
            DynMode::FixedContact(flags) => {
                solve_fixed_contact(&model, &state.q, &state.v, u, dt, &flags[k])?
            }
        };
        let v_plus = r.v_plus + w;
        let q_plus = &state.q + dt * &v_plus;
        let n = self.nv;
        let mut out = DVector::zeros(self.state_dim());
        out.rows_mut(0, n).copy_from(&q_plus);
        out.rows_mut(n, n).copy_from(&v_plus);
        out.rows_mut(2 * n, self.id.n_theta).copy_from(&theta);
        Ok(out)
    }

    fn linearize(
        &self,
        k: usize,
        x: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<NodeLin, EstimatorError> {
        let (state, theta) = self.split(x);
        let model = self.model_for(&theta)?;
        let dt = self.prob.dt;
        let u = &self.prob.us[k];
        let (r, der) = match &self.mode {
            DynMode::Smoothed => {
                step_derivatives(&model, &state, u, dt, &self.prob.smoothing, None)?
            }
            DynMode::FixedContact(flags) => {
                fixed_contact_derivatives(&model, &state, u, dt, &flags[k])?
            }
        };
        let n = self.nv;
        let nx = self.state_dim();
        let mut x_next = DVector::zeros(nx);
        let v_plus = &r.v_plus + w;
        x_next.rows_mut(0, n).copy_from(&(&state.q + dt * &v_plus));
        x_next.rows_mut(n, n).copy_from(&v_plus);
        x_next.rows_mut(2 * n, self.id.n_theta).copy_from(&theta);

        let mut fx = DMatrix::zeros(nx, nx);
        fx.view_mut((0, 0), (2 * n, 2 * n)).copy_from(&der.a);
        // chain the standard-parameter sensitivity through the log-Cholesky map
        let thetas = self.id.link_thetas(&theta);
        let mut col = 0;
        for (spec, th) in self.id.specs.iter().zip(&thetas) {
            let jac = pi_jacobian_2d(th);
            for &e in &spec.entries {
                let mut dcol = DVector::zeros(2 * n);
                for pi_idx in 0..4 {
                    let b = der.b_pi.column(4 * spec.link + pi_idx);
                    for row in 0..2 * n {
                        dcol[row] += b[row] * jac[(pi_idx, e)];
                    }
                }
                for row in 0..2 * n {
                    fx[(row, 2 * n + col)] = dcol[row];
                }
                col += 1;
            }
        }
        for i in 0..self.id.n_theta {
            fx[(2 * n + i, 2 * n + i)] = 1.0;
        }

        let mut fw = DMatrix::zeros(nx, n);
        for i in 0..n {
            fw[(i, i)] = dt;
            fw[(n + i, i)] = 1.0;
        }
        Ok(NodeLin { x_next, fx, fw })
    }

    fn stage_cost(&self, k: usize, x: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let pw = self.process_weights();
        let proc: f64 = w.iter().zip(pw.iter()).map(|(d, wt)| wt * d * d).sum();
        proc + self.measurement_cost(k, x)
    }

    fn stage_quad(&self, k: usize, x: &DVector<f64>, w: &DVector<f64>) -> StageQuad {
        let (lx, lxx) = self.measurement_quad(k, x);
        let pw = self.process_weights();
        let n = self.nv;
        let mut lw = DVector::zeros(n);
        let mut lww = DMatrix::zeros(n, n);
        for i in 0..n {
            lw[i] = 2.0 * pw[i] * w[i];
            lww[(i, i)] = 2.0 * pw[i];
        }
        StageQuad {
            lx,
            lw,
            lxx,
            lww,
            lwx: DMatrix::zeros(n, self.state_dim()),
        }
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        self.measurement_cost(self.prob.horizon(), x)
    }

    fn terminal_quad(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        self.measurement_quad(self.prob.horizon(), x)
    }

    fn initial_cost(&self, x: &DVector<f64>) -> f64 {
        let w0 = self.prob.weights.initial_state;
        let n = self.nv;
        let mut c = 0.0;
        for i in 0..n {
            let rq = x[i] - self.x0_prior.q[i];
            let rv = x[n + i] - self.x0_prior.v[i];
            c += w0 * (rq * rq + rv * rv);
        }
        let wp = self.prob.weights.param_prior;
        for i in 0..self.id.n_theta {
            let r = x[2 * n + i] - self.theta_prior[i];
            c += wp * r * r;
        }
        c
    }

    fn initial_quad(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let nx = self.state_dim();
        let mut lx = DVector::zeros(nx);
        let mut lxx = DMatrix::zeros(nx, nx);
        let w0 = self.prob.weights.initial_state;
        let n = self.nv;
        for i in 0..n {
            lx[i] = 2.0 * w0 * (x[i] - self.x0_prior.q[i]);
            lx[n + i] = 2.0 * w0 * (x[n + i] - self.x0_prior.v[i]);
            lxx[(i, i)] = 2.0 * w0;
            lxx[(n + i, n + i)] = 2.0 * w0;
        }
        let wp = self.prob.weights.param_prior;
        for i in 0..self.id.n_theta {
            lx[2 * n + i] = 2.0 * wp * (x[2 * n + i] - self.theta_prior[i]);
            lxx[(2 * n + i, 2 * n + i)] = 2.0 * wp;
        }
        (lx, lxx)
    }

    fn initial_guess(&self) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let n = self.nv;
        let nx = self.state_dim();
        let xs = self
            .seed
            .iter()
            .map(|s| {
                let mut x = DVector::zeros(nx);
                x.rows_mut(0, n).copy_from(&s.q);
                x.rows_mut(n, n).copy_from(&s.v);
                x.rows_mut(2 * n, self.id.n_theta).copy_from(&self.theta_prior);
                x
            })
            .collect();
        let ws = vec![DVector::zeros(n); self.prob.horizon()];
        (xs, ws)
    }

    fn gap_cost(&self, _k: usize, gap: &DVector<f64>) -> f64 {
        // a gap is an unmodeled disturbance: price it with the process
        // weights (position gaps scaled into velocity units)
        let pw = self.process_weights();
        let n = self.nv;
        let dt = self.prob.dt;
        let mut c = 0.0;
        for i in 0..n {
            let gq = gap[i] / dt;
            let gv = gap[n + i];
            c += pw[i] * (gq * gq + gv * gv);
        }
        for i in 2 * n..gap.len() {
            c += 1e6 * gap[i] * gap[i];
        }
        c
    }
}

/// Builds the trajectory seed from raw measurements; missing velocity
/// channels fall back to finite differences of the measured positions.
pub fn seed_states(model: &PlanarModel, ys: &[MeasurementSample], dt: f64) -> Vec<State> {
    let n = model.dof();
    let nj = model.n_joints();
    let mut qs: Vec<DVector<f64>> = Vec::with_capacity(ys.len());
    for (k, y) in ys.iter().enumerate() {
        let mut q = if k == 0 {
            DVector::zeros(n)
        } else {
            qs[k - 1].clone()
        };
        if y.mask.base_pos {
            q[0] = y.base_pos[0];
            q[1] = y.base_pos[1];
        }
        if y.mask.base_angle {
            q[2] = y.base_angle;
        }
        if y.mask.joint_pos {
            for j in 0..nj {
                q[3 + j] = y.joint_pos[j];
            }
        }
        qs.push(q);
    }
    let fd = |k: usize, i: usize| -> f64 {
        if k + 1 < qs.len() {
            (qs[k + 1][i] - qs[k][i]) / dt
        } else {
            (qs[k][i] - qs[k - 1][i]) / dt
        }
    };
    ys.iter()
        .enumerate()
        .map(|(k, y)| {
            let mut v = DVector::zeros(n);
            if y.mask.base_linvel {
                v[0] = y.base_linvel[0];
                v[1] = y.base_linvel[1];
            } else {
                v[0] = fd(k, 0);
                v[1] = fd(k, 1);
            }
            if y.mask.base_angvel {
                v[2] = y.base_angvel;
            } else {
                v[2] = fd(k, 2);
            }
            for j in 0..nj {
                if y.mask.joint_vel {
                    v[3 + j] = y.joint_vel[j];
                } else {
                    v[3 + j] = fd(k, 3 + j);
                }
            }
            State::new(qs[k].clone(), v)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Public entry points.

/// FIE objective of a candidate trajectory; the disturbance at each step is
/// recovered as the generalized-velocity defect against the smoothed step.
pub fn objective(
    problem: &EstimationProblem,
    states: &[State],
    thetas: &[LogCholeskyParams2D],
) -> Result<CostBreakdown, EstimatorError> {
    problem.check()?;
    if states.len() != problem.ys.len() {
        return Err(EstimatorError::Dimension(format!(
            "{} states for {} measurements",
            states.len(),
            problem.ys.len()
        )));
    }
    let fie = FieProblem::new(problem, DynMode::Smoothed)?;
    let mut model = problem.model.clone();
    let mut theta_aug = fie.theta_prior.clone();
    if !thetas.is_empty() {
        if thetas.len() != problem.id_links.len() {
            return Err(EstimatorError::Dimension(
                "theta count does not match identification mask".into(),
            ));
        }
        let mut i = 0;
        for (spec, th) in problem.id_links.iter().zip(thetas) {
            model = model.set_link_theta(spec.link, th)?;
            for &e in &spec.entries {
                theta_aug[i] = th.theta2[e];
                i += 1;
            }
        }
    }

    let pw = fie.process_weights();
    let mut out = CostBreakdown::default();
    for k in 0..problem.horizon() {
        let r = solve_smoothed(
            &model,
            &states[k].q,
            &states[k].v,
            &problem.us[k],
            problem.dt,
            &problem.smoothing,
            None,
        )?;
        let delta = &states[k + 1].v - &r.v_plus;
        out.process += delta
            .iter()
            .zip(pw.iter())
            .map(|(d, w)| w * d * d)
            .sum::<f64>();
    }
    for (k, y) in problem.ys.iter().enumerate() {
        let terms = measurement_terms(problem.model.n_joints(), &problem.weights, y);
        let n = problem.model.dof();
        for (i, w, yv) in terms {
            let xv = if i < n {
                states[k].q[i]
            } else {
                states[k].v[i - n]
            };
            let r = xv - yv;
            out.measurement += w * r * r;
        }
    }
    let x0p = &fie.x0_prior;
    let w0 = problem.weights.initial_state;
    out.prior = w0
        * ((&states[0].q - &x0p.q).norm_squared() + (&states[0].v - &x0p.v).norm_squared());
    let wp = problem.weights.param_prior;
    out.parameter = wp * (&theta_aug - &fie.theta_prior).norm_squared();
    out.total = out.process + out.measurement + out.prior + out.parameter;
    Ok(out)
}

fn solution_from_outcome(
    problem: &EstimationProblem,
    fie: &FieProblem<'_>,
    outcome: DdpOutcome,
) -> Result<EstimationSolution, EstimatorError> {
    let n = fie.nv;
    let states: Vec<State> = outcome.xs.iter().map(|x| fie.split(x).0).collect();
    let theta_aug = fie.split(&outcome.xs[0]).1;
    let thetas = fie.id.link_thetas(&theta_aug);
    let model = fie.model_for(&theta_aug)?;

    let mut impulses = Vec::with_capacity(problem.horizon());
    let mut baseline_flags = 0usize;
    for k in 0..problem.horizon() {
        let r = match &fie.mode {
            DynMode::Smoothed => solve_smoothed(
                &model,
                &states[k].q,
                &states[k].v,
                &problem.us[k],
                problem.dt,
                &problem.smoothing,
                None,
            )?,
            DynMode::FixedContact(flags) => solve_fixed_contact(
                &model,
                &states[k].q,
                &states[k].v,
                &problem.us[k],
                problem.dt,
                &flags[k],
            )?,
        };
        if r.cone_clamped || r.kkt_fallback {
            baseline_flags += 1;
        }
        impulses.push(r.impulses);
    }

    let cost = objective_of_mode(problem, fie, &states, &theta_aug)?;
    let _ = n;
    Ok(EstimationSolution {
        states,
        disturbances: outcome.ws,
        thetas,
        model,
        impulses,
        cost,
        trace: outcome.trace,
        converged: outcome.converged,
        gap_norm: outcome.gap_norm,
        baseline_flags,
    })
}

/// Objective recomputation matching the mode actually solved (the public
/// `objective` always uses the smoothed dynamics).
fn objective_of_mode(
    problem: &EstimationProblem,
    fie: &FieProblem<'_>,
    states: &[State],
    theta_aug: &DVector<f64>,
) -> Result<CostBreakdown, EstimatorError> {
    let model = fie.model_for(theta_aug)?;
    let pw = fie.process_weights();
    let mut out = CostBreakdown::default();
    for k in 0..problem.horizon() {
        let r = match &fie.mode {
            DynMode::Smoothed => solve_smoothed(
                &model,
                &states[k].q,
                &states[k].v,
                &problem.us[k],
                problem.dt,
                &problem.smoothing,
                None,
            )?,
            DynMode::FixedContact(flags) => solve_fixed_contact(
                &model,
                &states[k].q,
                &states[k].v,
                &problem.us[k],
                problem.dt,
                &flags[k],
            )?,
        };
        let delta = &states[k + 1].v - &r.v_plus;
        out.process += delta
            .iter()
            .zip(pw.iter())
            .map(|(d, w)| w * d * d)
            .sum::<f64>();
    }
    for (k, y) in problem.ys.iter().enumerate() {
        let n = problem.model.dof();
        for (i, w, yv) in measurement_terms(problem.model.n_joints(), &problem.weights, y) {
            let xv = if i < n {
                states[k].q[i]
            } else {
                states[k].v[i - n]
            };
            let r = xv - yv;
            out.measurement += w * r * r;
        }
    }
    let w0 = problem.weights.initial_state;
    out.prior = w0
        * ((&states[0].q - &fie.x0_prior.q).norm_squared()
            + (&states[0].v - &fie.x0_prior.v).norm_squared());
    out.parameter =
        problem.weights.param_prior * (theta_aug - &fie.theta_prior).norm_squared();
    out.total = out.process + out.measurement + out.prior + out.parameter;
    Ok(out)
}

fn ddp_options(problem: &EstimationProblem, fddp: bool) -> DdpOptions {
    DdpOptions {
        max_iters: problem.solver.max_iters,
        tol: problem.solver.tol,
        fddp,
        threads: problem.solver.threads,
        ..DdpOptions::default()
    }
}

/// Full-information estimate with single-shooting DDP (feasible rollouts).
pub fn ddp_solve(problem: &EstimationProblem) -> Result<EstimationSolution, EstimatorError> {
    let fie = FieProblem::new(problem, DynMode::Smoothed)?;
    let outcome = solve_ddp_generic(&fie, &ddp_options(problem, false))?;
    solution_from_outcome(problem, &fie, outcome)
}

/// Full-information estimate with multiple shooting; the measurement-seeded
/// initial trajectory may violate dynamics.
pub fn fddp_solve(problem: &EstimationProblem) -> Result<EstimationSolution, EstimatorError> {
    let fie = FieProblem::new(problem, DynMode::Smoothed)?;
    let outcome = solve_ddp_generic(&fie, &ddp_options(problem, true))?;
    solution_from_outcome(problem, &fie, outcome)
}

/// Joint trajectory refinement and inertial identification; with an empty
/// identification mask this is exactly the FIE solve.
pub fn pfie_estimate(problem: &EstimationProblem) -> Result<EstimationSolution, EstimatorError> {
    if problem.id_links.is_empty() {
        return if problem.solver.fddp {
            fddp_solve(problem)
        } else {
            ddp_solve(problem)
        };
    }
    let fie = FieProblem::new(problem, DynMode::Smoothed)?;
    let outcome = solve_ddp_generic(&fie, &ddp_options(problem, problem.solver.fddp))?;
    solution_from_outcome(problem, &fie, outcome)
}

/// Fixed-contact-sequence baseline: contact flags are thresholded from the
/// measured kinematics and the trajectory is refined under rigid KKT
/// dynamics with that sequence pinned.
pub fn baseline_fixed_contact_estimate(
    problem: &EstimationProblem,
    height_threshold: f64,
) -> Result<EstimationSolution, EstimatorError> {
    problem.check()?;
    let seed = seed_states(&problem.model, &problem.ys, problem.dt);
    let nc = problem.model.contacts.len();
    let flags: Vec<Vec<bool>> = (0..problem.horizon())
        .map(|k| {
            let ck = contact_kinematics(&problem.model, &seed[k].q);
            (0..nc).map(|i| ck.contacts[i].phi < height_threshold).collect()
        })
        .collect();
    let mut prob = problem.clone();
    prob.id_links.clear();
    let fie = FieProblem::new(&prob, DynMode::FixedContact(flags))?;
    let outcome = solve_ddp_generic(&fie, &ddp_options(&prob, prob.solver.fddp))?;
    solution_from_outcome(&prob, &fie, outcome)
}

// ---------------------------------------------------------------------------
// Serialization helpers.

#[derive(Serialize, Deserialize)]
struct StateDoc {
    q: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SolutionDoc {
    states: Vec<StateDoc>,
    disturbances: Vec<Vec<f64>>,
    thetas: Vec<Vec<f64>>,
    impulses: Vec<Vec<[f64; 2]>>,
    cost: CostBreakdown,
    trace: Vec<IterRecord>,
    converged: bool,
    gap_norm: f64,
    baseline_flags: usize,
}

pub fn solution_to_json(sol: &EstimationSolution) -> String {
    let doc = SolutionDoc {
        states: sol
            .states
            .iter()
            .map(|s| StateDoc {
                q: s.q.iter().copied().collect(),
                v: s.v.iter().copied().collect(),
            })
            .collect(),
        disturbances: sol
            .disturbances
            .iter()
            .map(|d| d.iter().copied().collect())
            .collect(),
        thetas: sol
            .thetas
            .iter()
            .map(|t| t.theta2.iter().copied().collect())
            .collect(),
        impulses: sol
            .impulses
            .iter()
            .map(|node| node.iter().map(|i| [i.normal, i.tangential]).collect())
            .collect(),
        cost: sol.cost,
        trace: sol.trace.clone(),
        converged: sol.converged,
        gap_norm: sol.gap_norm,
        baseline_flags: sol.baseline_flags,
    };
    serde_json::to_string_pretty(&doc).expect("solution serializes")
}

pub fn trace_to_csv(trace: &[IterRecord]) -> String {
    let mut out = String::from("iteration,cost,gap_norm,step_length,regularization\n");
    for r in trace {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            r.iteration, r.cost, r.gap_norm, r.step_length, r.regularization
        ));
    }
    out
}
