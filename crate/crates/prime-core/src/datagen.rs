//! Synthetic ground-truth generation, measurement corruption, and
//! evaluation metrics for the planar hopper experiment protocol.

use nalgebra::DVector;
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contact::{step, ContactError, Impulse, SmoothingConfig, Stepper};
use crate::estimator::{measure, MeasurementSample};
use crate::model::{load_model, save_model, ModelError, PlanarModel, State};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error(transparent)]
    Contact(#[from] ContactError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("dataset parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Demo hopper: planar torso with an actuated prismatic leg and a point
/// foot. Masses are at the ~5 kg scale with the COM offset in x so the COM
/// location is identifiable. The torso COM, leg COM, and foot all sit on
/// the line x = 0.02: the base rotation is unactuated, so open-loop hopping
/// stays balanced only when gravity, contact, and the inertial reaction of
/// the accelerating leg exert no net torque about the foot — any lateral
/// offset between those lines is amplified exponentially and tips the robot
/// within a couple of seconds.
pub const HOPPER_MODEL_JSON: &str = r#"{
  "links": [
    {"name": "torso", "parent": -1,
     "offset": {"xy": [0.0, 0.0], "angle": 0.0},
     "inertia": {"m": 5.0, "hx": 0.1, "hy": 0.0, "Iz": 0.25}},
    {"name": "leg", "parent": 0,
     "joint": {"type": "prismatic", "axis": [0.0, -1.0]},
     "offset": {"xy": [0.0, 0.0], "angle": 0.0},
     "inertia": {"m": 0.8, "hx": 0.016, "hy": -0.16, "Iz": 0.07}}
  ],
  "contacts": [{"link": 1, "point": [0.02, -0.4], "mu": 0.7}],
  "gravity": [0.0, -9.81],
  "actuated": [true]
}"#;

pub fn hopper_model() -> PlanarModel {
    load_model(HOPPER_MODEL_JSON).expect("built-in hopper model is valid")
}

/// Standing start for the hopper: foot exactly on the ground.
pub fn hopper_rest_state() -> State {
    State::new(DVector::from_vec(vec![0.0, 0.4, 0.0, 0.0]), DVector::zeros(4))
}

// ---------------------------------------------------------------------------
// Deterministic Gaussian stream: xoshiro256++ with Box-Muller.

pub const PRNG_ID: &str = "xoshiro256++ / Box-Muller";

pub struct GaussianRng {
    rng: Xoshiro256PlusPlus,
    spare: Option<f64>,
}

impl GaussianRng {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }
}

// ---------------------------------------------------------------------------
// Simulation.

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimDiag {
    pub newton_iters: usize,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    /// States x_0 .. x_T.
    pub states: Vec<State>,
    /// Per-step contact impulses (length T).
    pub impulses: Vec<Vec<Impulse>>,
    pub diags: Vec<SimDiag>,
}

/// Deterministic open-loop rollout; solver failures name the step.
pub fn simulate(
    model: &PlanarModel,
    x0: &State,
    schedule: &[DVector<f64>],
    dt: f64,
    stepper: Stepper,
    smoothing: &SmoothingConfig,
) -> Result<SimOutput, ContactError> {
    let mut states = Vec::with_capacity(schedule.len() + 1);
    let mut impulses = Vec::with_capacity(schedule.len());
    let mut diags = Vec::with_capacity(schedule.len());
    let mut x = x0.clone();
    let mut warm: Option<DVector<f64>> = None;
    states.push(x.clone());
    for (k, u) in schedule.iter().enumerate() {
        let (next, r) = step(model, &x, u, dt, smoothing, stepper, warm.as_ref()).map_err(
            |e| ContactError::AtStep {
                step: k,
                source: Box::new(e),
            },
        )?;
        warm = Some(r.v_plus.clone());
        impulses.push(r.impulses);
        diags.push(SimDiag {
            newton_iters: r.newton_iters,
            residual: r.residual,
        });
        x = next;
        states.push(x.clone());
    }
    Ok(SimOutput {
        states,
        impulses,
        diags,
    })
}

/// Scripted hopping input: the torque sequence obtained by tracking a
/// sinusoidal leg-length reference with a clipped PD law on the nominal
/// model, recorded once and replayed open loop. The passive prismatic leg
/// makes a raw torque sinusoid collapse, so the script is produced this way
/// instead; it is still a fixed, deterministic schedule.
pub fn hopper_schedule(steps: usize, dt: f64) -> Vec<DVector<f64>> {
    let model = hopper_model();
    let cfg = SmoothingConfig::default();
    let mut x = hopper_rest_state();
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = k as f64 * dt;
        let alpha_ref = 0.06 * (2.0 * std::f64::consts::PI * 2.0 * t).sin();
        let raw = 2000.0 * (alpha_ref - x.q[3]) - 50.0 * x.v[3];
        let u = DVector::from_vec(vec![raw.clamp(-150.0, 150.0)]);
        if let Ok((next, _)) = step(&model, &x, &u, dt, &cfg, Stepper::Lcp, None) {
            x = next;
        }
        out.push(u);
    }
    out
}

// ---------------------------------------------------------------------------
// Measurement corruption.

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub joint_pos: f64,
    pub joint_vel: f64,
    pub base_pos: f64,
    pub base_angle: f64,
    /// Constant offset added to every base-angle sample.
    pub base_angle_bias: f64,
    pub base_vel: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            joint_pos: 0.002,
            joint_vel: 0.02,
            base_pos: 0.002,
            base_angle: 0.01,
            base_angle_bias: 0.0,
            base_vel: 0.05,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            joint_pos: 0.0,
            joint_vel: 0.0,
            base_pos: 0.0,
            base_angle: 0.0,
            base_angle_bias: 0.0,
            base_vel: 0.0,
            seed: 0,
        }
    }
}

/// Corrupts a ground-truth trajectory into sensor samples. Base velocities
/// are formed by differentiating the true base pose (the mocap pipeline)
/// before adding their noise; everything else is direct measurement plus
/// Gaussian noise. The sampling order is fixed so a seed fully determines
/// the stream.
pub fn corrupt(
    model: &PlanarModel,
    states: &[State],
    dt: f64,
    noise: &NoiseConfig,
) -> Vec<MeasurementSample> {
    let mut rng = GaussianRng::new(noise.seed);
    let last = states.len() - 1;
    states
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let mut y = measure(model, x);
            y.base_pos[0] += noise.base_pos * rng.normal();
            y.base_pos[1] += noise.base_pos * rng.normal();
            y.base_angle += noise.base_angle * rng.normal() + noise.base_angle_bias;
            if noise.base_vel > 0.0 {
                let (i0, i1) = if k < last { (k, k + 1) } else { (k - 1, k) };
                let dq = (&states[i1].q - &states[i0].q) / dt;
                y.base_linvel[0] = dq[0] + noise.base_vel * rng.normal();
                y.base_linvel[1] = dq[1] + noise.base_vel * rng.normal();
                y.base_angvel = dq[2] + noise.base_vel * rng.normal();
            }
            for v in y.joint_pos.iter_mut() {
                *v += noise.joint_pos * rng.normal();
            }
            for v in y.joint_vel.iter_mut() {
                *v += noise.joint_vel * rng.normal();
            }
            y
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset container and file format.

#[derive(Debug, Clone)]
pub struct Dataset {
    pub model: PlanarModel,
    pub dt: f64,
    pub states: Vec<State>,
    pub us: Vec<DVector<f64>>,
    pub impulses: Vec<Vec<Impulse>>,
    pub ys: Vec<MeasurementSample>,
    pub noise: NoiseConfig,
    pub stepper: String,
}

impl Dataset {
    pub fn horizon(&self) -> usize {
        self.us.len()
    }
}

/// Generates the standard hopper dataset: standing start, clipped-sinusoid
/// thrust, chosen ground-truth stepper, then measurement corruption.
pub fn hopper_dataset(
    steps: usize,
    dt: f64,
    stepper: Stepper,
    smoothing: &SmoothingConfig,
    noise: &NoiseConfig,
) -> Result<Dataset, DatagenError> {
    let model = hopper_model();
    let schedule = hopper_schedule(steps, dt);
    let sim = simulate(&model, &hopper_rest_state(), &schedule, dt, stepper, smoothing)?;
    let ys = corrupt(&model, &sim.states, dt, noise);
    Ok(Dataset {
        model,
        dt,
        states: sim.states,
        us: schedule,
        impulses: sim.impulses,
        ys,
        noise: *noise,
        stepper: stepper_name(stepper).to_string(),
    })
}

pub fn stepper_name(s: Stepper) -> &'static str {
    match s {
        Stepper::Lcp => "lcp",
        Stepper::Socp => "socp",
        Stepper::Smoothed => "smoothed",
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    model: serde_json::Value,
    dt: f64,
    steps: usize,
    stepper: String,
    noise: NoiseConfig,
    prng: String,
}

#[derive(Serialize, Deserialize)]
struct DatasetRow {
    k: usize,
    x: RowState,
    #[serde(skip_serializing_if = "Option::is_none")]
    u: Option<Vec<f64>>,
    y: MeasurementSample,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<Vec<[f64; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct RowState {
    q: Vec<f64>,
    v: Vec<f64>,
}

/// One JSON header line followed by one JSONL row per node.
pub fn dataset_to_string(ds: &Dataset) -> Result<String, DatagenError> {
    let header = DatasetHeader {
        format: "prime-dataset-v1".into(),
        model: serde_json::from_str(&save_model(&ds.model))
            .map_err(|e| DatagenError::Parse(e.to_string()))?,
        dt: ds.dt,
        steps: ds.horizon(),
        stepper: ds.stepper.clone(),
        noise: ds.noise,
        prng: PRNG_ID.into(),
    };
    let mut out = serde_json::to_string(&header).map_err(|e| DatagenError::Parse(e.to_string()))?;
    out.push('\n');
    for k in 0..ds.states.len() {
        let row = DatasetRow {
            k,
            x: RowState {
                q: ds.states[k].q.iter().copied().collect(),
                v: ds.states[k].v.iter().copied().collect(),
            },
            u: ds.us.get(k).map(|u| u.iter().copied().collect()),
            y: ds.ys[k].clone(),
            lambda: ds
                .impulses
                .get(k)
                .map(|node| node.iter().map(|i| [i.normal, i.tangential]).collect()),
        };
        out.push_str(&serde_json::to_string(&row).map_err(|e| DatagenError::Parse(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn dataset_from_string(text: &str) -> Result<Dataset, DatagenError> {
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| DatagenError::Parse("empty dataset file".into()))?;
    let header: DatasetHeader =
        serde_json::from_str(header_line).map_err(|e| DatagenError::Parse(e.to_string()))?;
    if header.format != "prime-dataset-v1" {
        return Err(DatagenError::Parse(format!(
            "unknown dataset format {:?}",
            header.format
        )));
    }
    let model = load_model(
        &serde_json::to_string(&header.model).map_err(|e| DatagenError::Parse(e.to_string()))?,
    )?;
    let mut states = Vec::new();
    let mut us = Vec::new();
    let mut impulses = Vec::new();
    let mut ys = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: DatasetRow =
            serde_json::from_str(line).map_err(|e| DatagenError::Parse(format!("row {i}: {e}")))?;
        states.push(State::new(
            DVector::from_vec(row.x.q),
            DVector::from_vec(row.x.v),
        ));
        if let Some(u) = row.u {
            us.push(DVector::from_vec(u));
        }
        if let Some(l) = row.lambda {
            impulses.push(
                l.into_iter()
                    .map(|p| Impulse {
                        normal: p[0],
                        tangential: p[1],
                    })
                    .collect(),
            );
        }
        ys.push(row.y);
    }
    if states.len() != header.steps + 1 || us.len() != header.steps {
        return Err(DatagenError::Parse(format!(
            "expected {} nodes, found {} states / {} inputs",
            header.steps + 1,
            states.len(),
            us.len()
        )));
    }
    Ok(Dataset {
        model,
        dt: header.dt,
        states,
        us,
        impulses,
        ys,
        noise: header.noise,
        stepper: header.stepper,
    })
}

pub fn save_dataset(ds: &Dataset, path: &std::path::Path) -> Result<(), DatagenError> {
    std::fs::write(path, dataset_to_string(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &std::path::Path) -> Result<Dataset, DatagenError> {
    dataset_from_string(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Evaluation metrics.

/// Impulse threshold (N s) below which a contact counts as inactive.
pub const CONTACT_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    /// RMSE per state channel, q channels first then v.
    pub state_rmse: Vec<f64>,
    /// Aggregate RMSE over the configuration channels (base pose + joints).
    pub pos_rmse: f64,
    pub vel_rmse: f64,
    /// RMSE of the per-contact normal force lambda_n / dt, in N.
    pub force_rmse: f64,
    /// Fraction of (step, contact) pairs whose activity flag matches truth.
    pub contact_timing: f64,
    pub fie_cost: Option<f64>,
}

pub fn metrics(
    states: &[State],
    impulses: &[Vec<Impulse>],
    truth_states: &[State],
    truth_impulses: &[Vec<Impulse>],
    dt: f64,
) -> Result<Metrics, DatagenError> {
    if states.len() != truth_states.len() || impulses.len() != truth_impulses.len() {
        return Err(DatagenError::LengthMismatch(format!(
            "{} vs {} states, {} vs {} impulse rows",
            states.len(),
            truth_states.len(),
            impulses.len(),
            truth_impulses.len()
        )));
    }
    let n = truth_states[0].q.len();
    let mut acc = vec![0.0f64; 2 * n];
    for (a, b) in states.iter().zip(truth_states) {
        for i in 0..n {
            acc[i] += (a.q[i] - b.q[i]).powi(2);
            acc[n + i] += (a.v[i] - b.v[i]).powi(2);
        }
    }
    let steps = states.len() as f64;
    let state_rmse: Vec<f64> = acc.iter().map(|s| (s / steps).sqrt()).collect();
    let pos_rmse = (acc[..n].iter().sum::<f64>() / (steps * n as f64)).sqrt();
    let vel_rmse = (acc[n..].iter().sum::<f64>() / (steps * n as f64)).sqrt();

    let mut fsum = 0.0;
    let mut fcount = 0usize;
    let mut agree = 0usize;
    let mut total = 0usize;
    for (a, b) in impulses.iter().zip(truth_impulses) {
        if a.len() != b.len() {
            return Err(DatagenError::LengthMismatch(
                "contact count differs between solution and truth".into(),
            ));
        }
        for (ia, ib) in a.iter().zip(b) {
            fsum += ((ia.normal - ib.normal) / dt).powi(2);
            fcount += 1;
            if (ia.normal > CONTACT_EPS) == (ib.normal > CONTACT_EPS) {
                agree += 1;
            }
            total += 1;
        }
    }
    Ok(Metrics {
        state_rmse,
        pos_rmse,
        vel_rmse,
        force_rmse: if fcount > 0 {
            (fsum / fcount as f64).sqrt()
        } else {
            0.0
        },
        contact_timing: if total > 0 {
            agree as f64 / total as f64
        } else {
            1.0
        },
        fie_cost: None,
    })
}
