//! `prime`: batch front-end for planar contact-implicit trajectory
//! refinement and inertial identification.
//!
//! Subcommands: `simulate`, `corrupt`, `estimate`, `gradcheck`,
//! `sweep-kappa`, `eval`, `plot`, plus `rerun` to replay a `run.json`
//! provenance record. Exit codes: 0 success, 1 IO/solver error, 2 usage
//! error, 3 non-convergence (or failed check).

mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use prime_core::contact::{
    solve_smoothed, solve_socp, step_derivatives, Impulse, SmoothingConfig, Stepper,
};
use prime_core::datagen::{
    corrupt, load_dataset, metrics, save_dataset, simulate, stepper_name, Dataset, GaussianRng,
    NoiseConfig, CONTACT_EPS, PRNG_ID,
};
use prime_core::estimator::{
    baseline_fixed_contact_estimate, pfie_estimate, seed_states, solution_to_json,
    trace_to_csv, EstimationProblem, EstimationSolution, IdSpec,
};
use prime_core::inertia::{pi_jacobian_2d, theta_from_pi_2d, theta_to_pi_2d};
use prime_core::model::{load_model, State};

// ---------------------------------------------------------------------------
// Errors and exit codes.

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(String),
    /// Estimate did not converge or a check exceeded its tolerance; outputs
    /// are still written.
    NotConverged(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 1,
            CliError::NotConverged(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "{m}"),
            CliError::NotConverged(m) => write!(f, "{m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(format!("io error: {e}"))
    }
}

impl From<prime_core::datagen::DatagenError> for CliError {
    fn from(e: prime_core::datagen::DatagenError) -> Self {
        CliError::Io(format!("{e}"))
    }
}

impl From<prime_core::contact::ContactError> for CliError {
    fn from(e: prime_core::contact::ContactError) -> Self {
        CliError::Io(format!("solver error: {e}"))
    }
}

impl From<prime_core::estimator::EstimatorError> for CliError {
    fn from(e: prime_core::estimator::EstimatorError) -> Self {
        CliError::Io(format!("estimator error: {e}"))
    }
}

impl From<prime_core::model::ModelError> for CliError {
    fn from(e: prime_core::model::ModelError) -> Self {
        CliError::Io(format!("model error: {e}"))
    }
}

impl From<prime_core::inertia::InertiaError> for CliError {
    fn from(e: prime_core::inertia::InertiaError) -> Self {
        CliError::Io(format!("inertia error: {e}"))
    }
}

type CliResult = Result<(), CliError>;

/// 17 significant digits, making text output suitable for golden files.
fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

// ---------------------------------------------------------------------------
// Command-line surface.

#[derive(Parser)]
#[command(name = "prime", version, about = "Planar contact-implicit estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Roll out ground-truth dynamics and write a dataset.
    Simulate(SimArgs),
    /// Apply sensor noise to a dataset's ground truth.
    Corrupt(CorruptArgs),
    /// Refine a dataset into a dynamically consistent estimate.
    Estimate(EstArgs),
    /// Compare analytic step derivatives against finite differences.
    Gradcheck(GradArgs),
    /// Sweep the smoothing weight and tabulate convergence and accuracy.
    #[command(name = "sweep-kappa")]
    SweepKappa(SweepArgs),
    /// Score a solution file against dataset ground truth.
    Eval(EvalArgs),
    /// Render dataset/solution/CSV channels as a deterministic SVG.
    Plot(PlotArgs),
    /// Re-execute a command from its run.json provenance record.
    Rerun(RerunArgs),
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct SimArgs {
    /// Robot model JSON; defaults to the built-in hopper.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0.025)]
    dt: f64,
    /// lcp | smoothed | socp
    #[arg(long, default_value = "lcp")]
    stepper: String,
    #[arg(long, default_value_t = 500.0)]
    kappa: f64,
    /// hopper (scripted hopping) | zero (passive)
    #[arg(long, default_value = "hopper")]
    schedule: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct CorruptArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.002)]
    joint_pos_sigma: f64,
    #[arg(long, default_value_t = 0.02)]
    joint_vel_sigma: f64,
    #[arg(long, default_value_t = 0.002)]
    base_pos_sigma: f64,
    #[arg(long, default_value_t = 0.01)]
    base_angle_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    base_angle_bias: f64,
    #[arg(long, default_value_t = 0.05)]
    base_vel_sigma: f64,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct EstArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip inertial identification (trajectory refinement only).
    #[arg(long, default_value_t = false)]
    no_id: bool,
    /// Fixed-contact-sequence baseline instead of the smoothed estimator.
    #[arg(long, default_value_t = false)]
    baseline: bool,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 20000.0)]
    kappa: f64,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Scale applied to the link-0 inertial prior (e.g. 1.3 = 30% heavy).
    #[arg(long, default_value_t = 1.0)]
    mass_scale: f64,
    /// Single-shooting DDP instead of the multiple-shooting default.
    #[arg(long, default_value_t = false)]
    single_shooting: bool,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct GradArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500.0)]
    kappa: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct SweepArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![50.0, 100.0, 500.0, 1000.0, 5000.0])]
    kappas: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Skip the per-kappa estimator runs (gap-to-SOCP column only).
    #[arg(long, default_value_t = false)]
    no_estimate: bool,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    solution: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct PlotArgs {
    /// Dataset file providing truth and measured channels.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Solution JSON providing estimated channels.
    #[arg(long)]
    solution: Option<PathBuf>,
    /// CSV file; channels are column names plotted against the first column.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    channels: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct RerunArgs {
    run: PathBuf,
}

// ---------------------------------------------------------------------------
// run.json provenance.

#[derive(Serialize, Deserialize)]
struct RunRecord {
    version: String,
    prng: String,
    command: String,
    config: serde_json::Value,
}

fn write_run_json<T: Serialize>(dir: &Path, command: &str, config: &T) -> CliResult {
    let rec = RunRecord {
        version: env!("CARGO_PKG_VERSION").to_string(),
        prng: PRNG_ID.to_string(),
        command: command.to_string(),
        config: serde_json::to_value(config).expect("config serializes"),
    };
    let text = serde_json::to_string_pretty(&rec).expect("record serializes");
    std::fs::write(dir.join("run.json"), text)?;
    Ok(())
}

fn ensure_out_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("cannot create output dir {}: {e}", dir.display())))
}

// ---------------------------------------------------------------------------
// simulate

fn parse_stepper(s: &str) -> Result<Stepper, CliError> {
    match s {
        "lcp" => Ok(Stepper::Lcp),
        "socp" => Ok(Stepper::Socp),
        "smoothed" => Ok(Stepper::Smoothed),
        other => Err(CliError::Usage(format!(
            "unknown stepper '{other}' (expected lcp | smoothed | socp)"
        ))),
    }
}

fn cmd_simulate(a: &SimArgs) -> CliResult {
    if a.steps == 0 {
        return Err(CliError::Usage("--steps must be positive".into()));
    }
    if a.dt <= 0.0 {
        return Err(CliError::Usage("--dt must be positive".into()));
    }
    let stepper = parse_stepper(&a.stepper)?;
    let (model, x0) = match &a.model {
        None => (
            prime_core::datagen::hopper_model(),
            prime_core::datagen::hopper_rest_state(),
        ),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("cannot read model {}: {e}", p.display())))?;
            let m = load_model(&text)?;
            let n = m.dof();
            (m, State::new(DVector::zeros(n), DVector::zeros(n)))
        }
    };
    let schedule = match a.schedule.as_str() {
        "hopper" => {
            if a.model.is_some() {
                return Err(CliError::Usage(
                    "--schedule hopper only applies to the built-in hopper model".into(),
                ));
            }
            prime_core::datagen::hopper_schedule(a.steps, a.dt)
        }
        "zero" => vec![DVector::zeros(model.n_actuated()); a.steps],
        other => Err(CliError::Usage(format!(
            "unknown schedule '{other}' (expected hopper | zero)"
        )))?,
    };
    let cfg = SmoothingConfig::with_kappa(a.kappa);
    log::info!("rolling out {} steps with the {} stepper", a.steps, a.stepper);
    let sim = simulate(&model, &x0, &schedule, a.dt, stepper, &cfg)?;
    let noise = NoiseConfig::noiseless();
    let ys = corrupt(&model, &sim.states, a.dt, &noise);
    let ds = Dataset {
        model,
        dt: a.dt,
        states: sim.states,
        us: schedule,
        impulses: sim.impulses,
        ys,
        noise,
        stepper: stepper_name(stepper).to_string(),
    };
    ensure_out_dir(&a.out)?;
    save_dataset(&ds, &a.out.join("dataset.jsonl"))?;
    write_run_json(&a.out, "simulate", a)?;
    let active = ds
        .impulses
        .iter()
        .filter(|n| n.iter().any(|i| i.normal > CONTACT_EPS))
        .count();
    println!("wrote {} ({} steps, {} stance)", a.out.join("dataset.jsonl").display(), ds.horizon(), active);
    Ok(())
}

// ---------------------------------------------------------------------------
// corrupt

fn cmd_corrupt(a: &CorruptArgs) -> CliResult {
    let mut ds = load_dataset(&a.dataset)?;
    let noise = NoiseConfig {
        joint_pos: a.joint_pos_sigma,
        joint_vel: a.joint_vel_sigma,
        base_pos: a.base_pos_sigma,
        base_angle: a.base_angle_sigma,
        base_angle_bias: a.base_angle_bias,
        base_vel: a.base_vel_sigma,
        seed: a.seed,
    };
    ds.ys = corrupt(&ds.model, &ds.states, ds.dt, &noise);
    ds.noise = noise;
    ensure_out_dir(&a.out)?;
    save_dataset(&ds, &a.out.join("dataset.jsonl"))?;
    write_run_json(&a.out, "corrupt", a)?;
    println!("wrote {}", a.out.join("dataset.jsonl").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// estimate

#[derive(Serialize)]
struct EstimateReport {
    converged: bool,
    cost_total: f64,
    cost_process: f64,
    cost_measurement: f64,
    gap_norm: f64,
    iterations: usize,
    pos_rmse: f64,
    vel_rmse: f64,
    raw_pos_rmse: f64,
    force_rmse: f64,
    contact_timing: f64,
    mass_estimate: f64,
    mass_truth: f64,
    com_x_estimate: f64,
    com_x_truth: f64,
    baseline_flags: usize,
}

fn estimate_report(
    sol: &EstimationSolution,
    ds: &Dataset,
) -> Result<EstimateReport, CliError> {
    let m = metrics(&sol.states, &sol.impulses, &ds.states, &ds.impulses, ds.dt)?;
    let raw = seed_states(&ds.model, &ds.ys, ds.dt);
    let raw_m = metrics(&raw, &ds.impulses, &ds.states, &ds.impulses, ds.dt)?;
    let est_pi = &sol.model.links[0].inertia;
    let true_pi = &ds.model.links[0].inertia;
    Ok(EstimateReport {
        converged: sol.converged,
        cost_total: sol.cost.total,
        cost_process: sol.cost.process,
        cost_measurement: sol.cost.measurement,
        gap_norm: sol.gap_norm,
        iterations: sol.trace.last().map_or(0, |r| r.iteration),
        pos_rmse: m.pos_rmse,
        vel_rmse: m.vel_rmse,
        raw_pos_rmse: raw_m.pos_rmse,
        force_rmse: m.force_rmse,
        contact_timing: m.contact_timing,
        mass_estimate: est_pi.mass(),
        mass_truth: true_pi.mass(),
        com_x_estimate: est_pi.pi2[1] / est_pi.pi2[0],
        com_x_truth: true_pi.pi2[1] / true_pi.pi2[0],
        baseline_flags: sol.baseline_flags,
    })
}

fn print_report(r: &EstimateReport) {
    println!("metric            value");
    println!("converged         {}", r.converged);
    println!("iterations        {}", r.iterations);
    println!("cost_total        {}", fmt17(r.cost_total));
    println!("gap_norm          {}", fmt17(r.gap_norm));
    println!("pos_rmse          {}", fmt17(r.pos_rmse));
    println!("raw_pos_rmse      {}", fmt17(r.raw_pos_rmse));
    println!("force_rmse        {}", fmt17(r.force_rmse));
    println!("contact_timing    {}", fmt17(r.contact_timing));
    println!("mass_estimate     {}", fmt17(r.mass_estimate));
    println!("mass_truth        {}", fmt17(r.mass_truth));
    println!("com_x_estimate    {}", fmt17(r.com_x_estimate));
    println!("com_x_truth       {}", fmt17(r.com_x_truth));
}

fn build_problem(ds: &Dataset, a: &EstArgs) -> EstimationProblem {
    let mut prior = ds.model.clone();
    prior.links[0].inertia.pi2 *= a.mass_scale;
    let mut prob = EstimationProblem::new(prior, ds.ys.clone(), ds.us.clone(), ds.dt);
    prob.smoothing = SmoothingConfig::with_kappa(a.kappa);
    prob.solver.max_iters = a.max_iters;
    prob.solver.tol = a.tol;
    prob.solver.fddp = !a.single_shooting;
    prob.solver.threads = a.threads;
    if !a.no_id && !a.baseline {
        prob.id_links = vec![IdSpec {
            link: 0,
            entries: (0..6).collect(),
        }];
    }
    prob
}

fn cmd_estimate(a: &EstArgs) -> CliResult {
    let ds = load_dataset(&a.dataset)?;
    let prob = build_problem(&ds, a);
    log::info!(
        "estimating over {} nodes (id: {}, baseline: {})",
        prob.horizon(),
        !a.no_id && !a.baseline,
        a.baseline
    );
    let sol = if a.baseline {
        baseline_fixed_contact_estimate(&prob, 1e-3)?
    } else {
        pfie_estimate(&prob)?
    };
    ensure_out_dir(&a.out)?;
    std::fs::write(a.out.join("solution.json"), solution_to_json(&sol))?;
    std::fs::write(a.out.join("trace.csv"), trace_to_csv(&sol.trace))?;
    let report = estimate_report(&sol, &ds)?;
    std::fs::write(
        a.out.join("metrics.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    write_run_json(&a.out, "estimate", a)?;
    print_report(&report);
    if !sol.converged {
        return Err(CliError::NotConverged(
            "estimate did not converge; best iterate written".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (1.0 + fd.abs())
}

fn stacked(model: &prime_core::model::PlanarModel, x: &State, u: &DVector<f64>, dt: f64, cfg: &SmoothingConfig) -> Result<DVector<f64>, CliError> {
    let r = solve_smoothed(model, &x.q, &x.v, u, dt, cfg, None)?;
    let n = model.dof();
    let mut out = DVector::zeros(2 * n);
    out.rows_mut(0, n).copy_from(&r.q_plus);
    out.rows_mut(n, n).copy_from(&r.v_plus);
    Ok(out)
}

fn cmd_gradcheck(a: &GradArgs) -> CliResult {
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    let model = match &a.model {
        None => prime_core::datagen::hopper_model(),
        Some(p) => load_model(&std::fs::read_to_string(p)?)?,
    };
    let dt = 0.025;
    let cfg = SmoothingConfig::with_kappa(a.kappa);
    let n = model.dof();
    let nu = model.n_actuated();
    let mut rng = GaussianRng::new(a.seed);
    let eps = 1e-6;

    let mut max_a = 0.0f64;
    let mut max_bu = 0.0f64;
    let mut max_bth = 0.0f64;
    let mut resampled = 0usize;
    let mut accepted = 0usize;
    while accepted < a.samples {
        // states scattered around stance height with moderate velocities
        let q = DVector::from_iterator(
            n,
            (0..n).map(|i| {
                if i == 1 {
                    0.40 + 0.03 * rng.normal()
                } else {
                    0.05 * rng.normal()
                }
            }),
        );
        let v = DVector::from_iterator(n, (0..n).map(|_| 0.3 * rng.normal()));
        let u = DVector::from_iterator(nu, (0..nu).map(|_| 2.0 * rng.normal()));
        let x = State::new(q, v);
        let (r, der) = match step_derivatives(&model, &x, &u, dt, &cfg, None) {
            Ok(out) => out,
            Err(_) => {
                resampled += 1;
                continue;
            }
        };
        // reject states hugging the cone boundary where finite differences
        // are unreliable
        if r.slacks.iter().any(|&s| s < 1e-4) {
            resampled += 1;
            continue;
        }
        accepted += 1;

        for k in 0..2 * n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            if k < n {
                xp.q[k] += eps;
                xm.q[k] -= eps;
            } else {
                xp.v[k - n] += eps;
                xm.v[k - n] -= eps;
            }
            let fd = (stacked(&model, &xp, &u, dt, &cfg)? - stacked(&model, &xm, &u, dt, &cfg)?)
                / (2.0 * eps);
            for row in 0..2 * n {
                max_a = max_a.max(rel_err(der.a[(row, k)], fd[row]));
            }
        }
        for k in 0..nu {
            let mut up = u.clone();
            let mut um = u.clone();
            up[k] += eps;
            um[k] -= eps;
            let fd = (stacked(&model, &x, &up, dt, &cfg)? - stacked(&model, &x, &um, dt, &cfg)?)
                / (2.0 * eps);
            for row in 0..2 * n {
                max_bu = max_bu.max(rel_err(der.b_u[(row, k)], fd[row]));
            }
        }
        // B_theta: chain b_pi through the log-Cholesky Jacobian, check by
        // perturbing theta coordinates of every link
        for l in 0..model.links.len() {
            let th0 = theta_from_pi_2d(&model.links[l].inertia)?;
            let jac = pi_jacobian_2d(&th0);
            for e in 0..6 {
                let mut analytic = DVector::zeros(2 * n);
                for pi_idx in 0..4 {
                    let b = der.b_pi.column(4 * l + pi_idx);
                    for row in 0..2 * n {
                        analytic[row] += b[row] * jac[(pi_idx, e)];
                    }
                }
                let mut thp = th0;
                let mut thm = th0;
                thp.theta2[e] += eps;
                thm.theta2[e] -= eps;
                let mp = model.set_link_theta(l, &thp)?;
                let mm = model.set_link_theta(l, &thm)?;
                let fd = (stacked(&mp, &x, &u, dt, &cfg)? - stacked(&mm, &x, &u, dt, &cfg)?)
                    / (2.0 * eps);
                for row in 0..2 * n {
                    max_bth = max_bth.max(rel_err(analytic[row], fd[row]));
                }
            }
        }
    }

    // inertia-map Jacobians at random theta
    let mut max_pi = 0.0f64;
    for _ in 0..a.samples {
        let mut th = prime_core::inertia::LogCholeskyParams2D::zeros();
        for e in 0..6 {
            th.theta2[e] = 0.5 * rng.normal();
        }
        let jac = pi_jacobian_2d(&th);
        for e in 0..6 {
            let mut thp = th;
            let mut thm = th;
            thp.theta2[e] += 1e-7;
            thm.theta2[e] -= 1e-7;
            let pp = theta_to_pi_2d(&thp)?;
            let pm = theta_to_pi_2d(&thm)?;
            for i in 0..4 {
                let fd = (pp.pi2[i] - pm.pi2[i]) / 2e-7;
                max_pi = max_pi.max(rel_err(jac[(i, e)], fd));
            }
        }
    }

    let mut report = String::new();
    report.push_str("quantity      max_rel_err              tolerance\n");
    report.push_str(&format!("A             {}  1e-4\n", fmt17(max_a)));
    report.push_str(&format!("B_u           {}  1e-4\n", fmt17(max_bu)));
    report.push_str(&format!("B_theta       {}  1e-4\n", fmt17(max_bth)));
    report.push_str(&format!("dpi_dtheta    {}  1e-6\n", fmt17(max_pi)));
    report.push_str(&format!("samples       {accepted}\n"));
    report.push_str(&format!("resampled     {resampled}\n"));
    print!("{report}");
    if let Some(out) = &a.out {
        ensure_out_dir(out)?;
        std::fs::write(out.join("gradcheck.txt"), &report)?;
        write_run_json(out, "gradcheck", a)?;
    }
    if max_a > 1e-4 || max_bu > 1e-4 || max_bth > 1e-4 || max_pi > 1e-6 {
        return Err(CliError::NotConverged(
            "gradient check exceeded tolerance".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep-kappa

fn cmd_sweep_kappa(a: &SweepArgs) -> CliResult {
    if a.kappas.is_empty() {
        return Err(CliError::Usage("--kappas must be non-empty".into()));
    }
    let ds = load_dataset(&a.dataset)?;
    // up to 50 stance states for the per-step gap column
    let stance: Vec<usize> = (0..ds.horizon())
        .filter(|&k| ds.impulses[k].iter().any(|i| i.normal > CONTACT_EPS))
        .take(50)
        .collect();
    let mut rows = Vec::new();
    let mut gap_series = Vec::new();
    for &kappa in &a.kappas {
        let cfg = SmoothingConfig::with_kappa(kappa);
        let mut gap_sum = 0.0;
        let mut gap_n = 0usize;
        let mut failures = 0usize;
        for &k in &stance {
            let x = &ds.states[k];
            let u = &ds.us[k];
            let vs = solve_smoothed(&ds.model, &x.q, &x.v, u, ds.dt, &cfg, None);
            let vo = solve_socp(&ds.model, &x.q, &x.v, u, ds.dt);
            match (vs, vo) {
                (Ok(s), Ok(o)) => {
                    gap_sum += (s.v_plus - o.v_plus).amax();
                    gap_n += 1;
                }
                _ => failures += 1,
            }
        }
        let mean_gap = if gap_n > 0 { gap_sum / gap_n as f64 } else { f64::NAN };
        let (iterations, cost, force_rmse) = if a.no_estimate {
            (0, f64::NAN, f64::NAN)
        } else {
            let est = EstArgs {
                dataset: a.dataset.clone(),
                out: a.out.clone(),
                no_id: true,
                baseline: false,
                threads: a.threads,
                kappa,
                max_iters: 100,
                tol: 1e-9,
                mass_scale: 1.0,
                single_shooting: false,
            };
            let prob = build_problem(&ds, &est);
            match pfie_estimate(&prob) {
                Ok(sol) => {
                    let m = metrics(&sol.states, &sol.impulses, &ds.states, &ds.impulses, ds.dt)?;
                    (
                        sol.trace.last().map_or(0, |r| r.iteration),
                        sol.cost.total,
                        m.force_rmse,
                    )
                }
                Err(e) => {
                    log::warn!("estimate failed at kappa {kappa}: {e}");
                    failures += 1;
                    (0, f64::NAN, f64::NAN)
                }
            }
        };
        gap_series.push((kappa, mean_gap));
        rows.push(format!(
            "{},{},{},{},{},{}",
            fmt17(kappa),
            fmt17(mean_gap),
            iterations,
            fmt17(cost),
            fmt17(force_rmse),
            failures
        ));
    }
    ensure_out_dir(&a.out)?;
    let csv = format!(
        "kappa,mean_gap_socp,iterations,final_cost,force_rmse,failures\n{}\n",
        rows.join("\n")
    );
    std::fs::write(a.out.join("sweep.csv"), &csv)?;
    let series = [svg::Series {
        name: "mean |v+_smoothed - v+_socp|".into(),
        points: gap_series.iter().map(|&(k, g)| (k.log10(), g)).collect(),
    }];
    std::fs::write(
        a.out.join("sweep.svg"),
        svg::line_plot("smoothing sweep", "log10 kappa", "gap", &series),
    )?;
    write_run_json(&a.out, "sweep-kappa", a)?;
    print!("{csv}");
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Deserialize)]
struct SolutionFile {
    states: Vec<StateDoc>,
    impulses: Vec<Vec<[f64; 2]>>,
    cost: CostDoc,
}

#[derive(Deserialize)]
struct StateDoc {
    q: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Deserialize)]
struct CostDoc {
    total: f64,
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    let ds = load_dataset(&a.dataset)?;
    let text = std::fs::read_to_string(&a.solution)?;
    let sol: SolutionFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Io(format!("cannot parse solution: {e}")))?;
    let states: Vec<State> = sol
        .states
        .iter()
        .map(|s| State::new(DVector::from_vec(s.q.clone()), DVector::from_vec(s.v.clone())))
        .collect();
    let impulses: Vec<Vec<Impulse>> = sol
        .impulses
        .iter()
        .map(|node| {
            node.iter()
                .map(|p| Impulse {
                    normal: p[0],
                    tangential: p[1],
                })
                .collect()
        })
        .collect();
    let mut m = metrics(&states, &impulses, &ds.states, &ds.impulses, ds.dt)?;
    m.fie_cost = Some(sol.cost.total);
    ensure_out_dir(&a.out)?;
    std::fs::write(
        a.out.join("metrics.json"),
        serde_json::to_string_pretty(&m).expect("metrics serialize"),
    )?;
    write_run_json(&a.out, "eval", a)?;
    println!("pos_rmse          {}", fmt17(m.pos_rmse));
    println!("vel_rmse          {}", fmt17(m.vel_rmse));
    println!("force_rmse        {}", fmt17(m.force_rmse));
    println!("contact_timing    {}", fmt17(m.contact_timing));
    println!("fie_cost          {}", fmt17(sol.cost.total));
    Ok(())
}

// ---------------------------------------------------------------------------
// plot

fn channel_help(n: usize, nc: usize) -> String {
    let mut names: Vec<String> = Vec::new();
    for i in 0..n {
        names.push(format!("q{i}"));
        names.push(format!("v{i}"));
    }
    for c in 0..nc {
        names.push(format!("lambda{c}_n"));
        names.push(format!("lambda{c}_t"));
    }
    names.join(", ")
}

fn dataset_channel(
    ds: &Dataset,
    sol: Option<&SolutionFile>,
    name: &str,
) -> Result<Vec<svg::Series>, CliError> {
    let n = ds.model.dof();
    let nc = ds.model.contacts.len();
    let t_of = |k: usize| k as f64 * ds.dt;
    let bad = || {
        CliError::Usage(format!(
            "unknown channel '{name}'; available: {}",
            channel_help(n, nc)
        ))
    };
    let mut series = Vec::new();
    if let Some(rest) = name.strip_prefix('q') {
        let i: usize = rest.parse().map_err(|_| bad())?;
        if i >= n {
            return Err(bad());
        }
        series.push(svg::Series {
            name: format!("{name} truth"),
            points: ds.states.iter().enumerate().map(|(k, x)| (t_of(k), x.q[i])).collect(),
        });
        if let Some(m) = measured_points(ds, i, true) {
            series.push(svg::Series {
                name: format!("{name} measured"),
                points: m,
            });
        }
        if let Some(s) = sol {
            series.push(svg::Series {
                name: format!("{name} estimate"),
                points: s.states.iter().enumerate().map(|(k, x)| (t_of(k), x.q[i])).collect(),
            });
        }
    } else if let Some(rest) = name.strip_prefix('v') {
        let i: usize = rest.parse().map_err(|_| bad())?;
        if i >= n {
            return Err(bad());
        }
        series.push(svg::Series {
            name: format!("{name} truth"),
            points: ds.states.iter().enumerate().map(|(k, x)| (t_of(k), x.v[i])).collect(),
        });
        if let Some(m) = measured_points(ds, i, false) {
            series.push(svg::Series {
                name: format!("{name} measured"),
                points: m,
            });
        }
        if let Some(s) = sol {
            series.push(svg::Series {
                name: format!("{name} estimate"),
                points: s.states.iter().enumerate().map(|(k, x)| (t_of(k), x.v[i])).collect(),
            });
        }
    } else if let Some(rest) = name.strip_prefix("lambda") {
        let (idx, comp) = rest.split_once('_').ok_or_else(bad)?;
        let c: usize = idx.parse().map_err(|_| bad())?;
        if c >= nc {
            return Err(bad());
        }
        let pick = |i: &Impulse| match comp {
            "n" => Ok(i.normal),
            "t" => Ok(i.tangential),
            _ => Err(bad()),
        };
        let mut pts = Vec::new();
        for (k, node) in ds.impulses.iter().enumerate() {
            pts.push((t_of(k), pick(&node[c])?));
        }
        series.push(svg::Series {
            name: format!("{name} truth"),
            points: pts,
        });
        if let Some(s) = sol {
            let mut pts = Vec::new();
            for (k, node) in s.impulses.iter().enumerate() {
                let p = node[c];
                let val = match comp {
                    "n" => p[0],
                    "t" => p[1],
                    _ => return Err(bad()),
                };
                pts.push((t_of(k), val));
            }
            series.push(svg::Series {
                name: format!("{name} estimate"),
                points: pts,
            });
        }
    } else {
        return Err(bad());
    }
    Ok(series)
}

/// Measured overlay for a state channel when the sensors cover it.
fn measured_points(ds: &Dataset, i: usize, position: bool) -> Option<Vec<(f64, f64)>> {
    let t_of = |k: usize| k as f64 * ds.dt;
    let pick = |y: &prime_core::estimator::MeasurementSample| -> Option<f64> {
        if position {
            match i {
                0 => y.mask.base_pos.then(|| y.base_pos[0]),
                1 => y.mask.base_pos.then(|| y.base_pos[1]),
                2 => y.mask.base_angle.then_some(y.base_angle),
                j => y.mask.joint_pos.then(|| y.joint_pos[j - 3]),
            }
        } else {
            match i {
                0 => y.mask.base_linvel.then(|| y.base_linvel[0]),
                1 => y.mask.base_linvel.then(|| y.base_linvel[1]),
                2 => y.mask.base_angvel.then_some(y.base_angvel),
                j => y.mask.joint_vel.then(|| y.joint_vel[j - 3]),
            }
        }
    };
    let pts: Vec<(f64, f64)> = ds
        .ys
        .iter()
        .enumerate()
        .filter_map(|(k, y)| pick(y).map(|v| (t_of(k), v)))
        .collect();
    (!pts.is_empty()).then_some(pts)
}

fn csv_channels(path: &Path, channels: &[String]) -> Result<Vec<svg::Series>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| CliError::Io("empty csv".into()))?
        .split(',')
        .collect();
    let rows: Vec<Vec<f64>> = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(|f| f.parse().unwrap_or(f64::NAN)).collect())
        .collect();
    channels
        .iter()
        .map(|ch| {
            let col = header.iter().position(|h| h == ch).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown channel '{ch}'; available: {}",
                    header.join(", ")
                ))
            })?;
            Ok(svg::Series {
                name: ch.clone(),
                points: rows.iter().map(|r| (r[0], r[col])).collect(),
            })
        })
        .collect()
}

fn cmd_plot(a: &PlotArgs) -> CliResult {
    if a.channels.is_empty() {
        return Err(CliError::Usage("--channels must be non-empty".into()));
    }
    let mut series = Vec::new();
    if let Some(csv) = &a.csv {
        series.extend(csv_channels(csv, &a.channels)?);
    } else if let Some(dsp) = &a.dataset {
        let ds = load_dataset(dsp)?;
        let sol = match &a.solution {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                Some(serde_json::from_str::<SolutionFile>(&text).map_err(|e| {
                    CliError::Io(format!("cannot parse solution: {e}"))
                })?)
            }
            None => None,
        };
        for ch in &a.channels {
            series.extend(dataset_channel(&ds, sol.as_ref(), ch)?);
        }
    } else {
        return Err(CliError::Usage(
            "provide --dataset (optionally with --solution) or --csv".into(),
        ));
    }
    let svg_text = svg::line_plot(
        &a.channels.join(", "),
        "time [s]",
        "value",
        &series,
    );
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(&a.out, svg_text)?;
    // provenance lives next to the plot so several plots can share a dir
    let rec = RunRecord {
        version: env!("CARGO_PKG_VERSION").to_string(),
        prng: PRNG_ID.to_string(),
        command: "plot".to_string(),
        config: serde_json::to_value(a).expect("config serializes"),
    };
    std::fs::write(
        format!("{}.run.json", a.out.display()),
        serde_json::to_string_pretty(&rec).expect("record serializes"),
    )?;
    println!("wrote {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// rerun

fn cmd_rerun(a: &RerunArgs) -> CliResult {
    let text = std::fs::read_to_string(&a.run)?;
    let rec: RunRecord = serde_json::from_str(&text)
        .map_err(|e| CliError::Io(format!("cannot parse run record: {e}")))?;
    let cfg = rec.config;
    let parse = |e: serde_json::Error| CliError::Io(format!("bad run config: {e}"));
    match rec.command.as_str() {
        "simulate" => cmd_simulate(&serde_json::from_value(cfg).map_err(parse)?),
        "corrupt" => cmd_corrupt(&serde_json::from_value(cfg).map_err(parse)?),
        "estimate" => cmd_estimate(&serde_json::from_value(cfg).map_err(parse)?),
        "gradcheck" => cmd_gradcheck(&serde_json::from_value(cfg).map_err(parse)?),
        "sweep-kappa" => cmd_sweep_kappa(&serde_json::from_value(cfg).map_err(parse)?),
        "eval" => cmd_eval(&serde_json::from_value(cfg).map_err(parse)?),
        "plot" => cmd_plot(&serde_json::from_value(cfg).map_err(parse)?),
        other => Err(CliError::Usage(format!("unknown command '{other}' in run record"))),
    }
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PRIME_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Corrupt(a) => cmd_corrupt(a),
        Cmd::Estimate(a) => cmd_estimate(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::SweepKappa(a) => cmd_sweep_kappa(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Plot(a) => cmd_plot(a),
        Cmd::Rerun(a) => cmd_rerun(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
