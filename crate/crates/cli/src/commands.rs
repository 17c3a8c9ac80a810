use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use wvar_core::derivative::{
    derivative_residual_with, flat_pairing, harness_q, intrinsic_derivative, DerivativeReport,
    Verdict,
};
use wvar_core::dynamics::{
    continuity_residual, filippov_initial_velocity_check, parse_vector, solve_leader_follower,
    ControlAssignment, ControlledDynamics, FilippovReport, IterationRecord, SolverOptions,
};
use wvar_core::functionals::Functional;
use wvar_core::hjb::{
    default_control_samples, doubling_experiment, dpp_residual, hamiltonian_comparison_check,
    random_comparison_probes, subsolution_residual, supersolution_residual, value_function,
    ComparisonReport, DoublingReport, DppReport, Jet, JetBattery, ValueResult, ValueTable,
    ViscosityCheck,
};
use wvar_core::instances::ControlInstance;
use wvar_core::measure::{DiscreteMeasure, TestFunction, TorusPoint};
use wvar_core::transport::{optimal_plan, plan_cost, plan_pairing, Covector};
use wvar_core::variations::{
    builtin_field, check_admissibility, geometric_grid, integrate_field, make_eulerian_variation,
    make_flat_variation, make_lagrangian_variation, make_transport_map_variation, random_family,
    AdmissibilityReport, FamilyKind, VariationFamily,
};
use wvar_core::Error as CoreError;

use crate::report::{digest_file, output_path, write_csv, write_json, InputDigest, Report};
use crate::{
    Cli, Command, DerivArgs, HjbArgs, HjbMode, KindArg, OtArgs, SimulateArgs, ValueArgs, VaryArgs,
};

#[derive(Debug)]
struct MissingInput(PathBuf);

impl fmt::Display for MissingInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input file not found: {}", self.0.display())
    }
}

impl std::error::Error for MissingInput {}

#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn exit_code_for(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<MissingInput>().is_some() {
        return 66;
    }
    if e.downcast_ref::<Usage>().is_some() {
        return 64;
    }
    match e.downcast_ref::<CoreError>() {
        Some(CoreError::UnknownBuiltin(_)) => 64,
        Some(CoreError::Io(io)) if io.kind() == std::io::ErrorKind::NotFound => 66,
        _ => 1,
    }
}

impl From<KindArg> for FamilyKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Map => FamilyKind::TransportMap,
            KindArg::Flat => FamilyKind::Flat,
            KindArg::Lagrangian => FamilyKind::Lagrangian,
            KindArg::Eulerian => FamilyKind::Eulerian,
        }
    }
}

fn load(path: &Path, inputs: &mut Vec<InputDigest>) -> Result<DiscreteMeasure> {
    if !path.exists() {
        return Err(MissingInput(path.to_path_buf()).into());
    }
    inputs.push(digest_file(path)?);
    Ok(DiscreteMeasure::read_csv(path)?)
}

fn load_or_random(
    path: &Option<PathBuf>,
    rng: &mut ChaCha8Rng,
    atoms: usize,
    dim: usize,
    inputs: &mut Vec<InputDigest>,
) -> Result<DiscreteMeasure> {
    match path {
        Some(p) => load(p, inputs),
        None => {
            if atoms == 0 || dim == 0 {
                return Err(Usage("--atoms and --dim must be positive".into()).into());
            }
            Ok(DiscreteMeasure::random(rng, atoms, dim, false)?)
        }
    }
}

#[derive(Serialize)]
struct Config<'a, A: Serialize> {
    seed: u64,
    args: &'a A,
}

fn emit<A: Serialize, R: Serialize>(
    cli: &Cli,
    command: &'static str,
    args: &A,
    report_path: &Option<PathBuf>,
    inputs: Vec<InputDigest>,
    pass: bool,
    result: R,
) -> Result<u8> {
    let config = Config {
        seed: cli.global.seed,
        args,
    };
    let report = Report::new(command, &config, inputs, pass, result);
    let path = output_path(&cli.global.out_dir, report_path, &format!("{command}.json"));
    write_json(&path, &report).with_context(|| format!("writing {}", path.display()))?;
    Ok(if pass { 0 } else { 2 })
}

pub fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Ot(a) => ot(cli, a),
        Command::Vary(a) => vary(cli, a),
        Command::Deriv(a) => deriv(cli, a),
        Command::Simulate(a) => simulate(cli, a),
        Command::Value(a) => value(cli, a),
        Command::HjbCheck(a) => hjb_check(cli, a),
    }
}

#[derive(Serialize)]
struct OtResult {
    q: f64,
    /// `sum pi_kj d(x_k, y_j)^q` at the optimum.
    cost: f64,
    distance: f64,
    plan: serde_json::Value,
}

fn ot(cli: &Cli, a: &OtArgs) -> Result<u8> {
    let mut inputs = Vec::new();
    let mu = load(&a.mu, &mut inputs)?;
    let nu = load(&a.nu, &mut inputs)?;
    if !(a.q >= 1.0) {
        return Err(Usage(format!("--q must be at least 1, got {}", a.q)).into());
    }
    let plan = optimal_plan(&mu, &nu, a.q)?;
    let distance = plan_cost(&plan, a.q)?;
    let dump = plan.to_json()?;
    if let Some(path) = &a.emit_plan {
        std::fs::write(path, format!("{dump}\n"))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let result = OtResult {
        q: a.q,
        cost: distance.powf(a.q),
        distance,
        plan: serde_json::from_str(&dump)?,
    };
    emit(cli, "ot", a, &a.report, inputs, true, result)
}

fn vary(cli: &Cli, a: &VaryArgs) -> Result<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(cli.global.seed);
    let mut inputs = Vec::new();
    let mu = load_or_random(&a.mu, &mut rng, a.atoms, a.dim, &mut inputs)?;
    let d = mu.dim();
    let grid = match &a.tgrid {
        Some(spec) => parse_tgrid(spec)?,
        None => geometric_grid(a.horizon, a.levels),
    };
    if grid.len() < 2 {
        return Err(Usage("the time grid needs at least two points".into()).into());
    }
    let family: VariationFamily = match a.kind {
        KindArg::Map => {
            let field = builtin_field(&a.field, d)?;
            let phi = Covector::from_fn(&mu, |x| field(0.0, x))?;
            make_transport_map_variation(&mu, &phi, a.horizon)?
        }
        KindArg::Flat => {
            let nu = load_or_random(&a.nu, &mut rng, a.atoms, d, &mut inputs)?;
            make_flat_variation(&optimal_plan(&mu, &nu, 2.0)?, a.horizon)?
        }
        KindArg::Lagrangian => {
            let field = builtin_field(&a.field, d)?;
            let eta = integrate_field(&mu, &field, a.horizon, a.steps)?;
            make_lagrangian_variation(&eta, a.horizon)?
        }
        KindArg::Eulerian => {
            let field = builtin_field(&a.field, d)?;
            make_eulerian_variation(&mu, &field, a.horizon, a.steps)?
        }
    };
    let rep = check_admissibility(&family, a.q, &grid, &TestFunction::dictionary(d))?;
    let rows: Vec<Vec<f64>> = (0..grid.len())
        .map(|i| vec![grid[i], rep.rates[i], rep.narrow_gaps[i]])
        .collect();
    write_csv(
        &cli.global.out_dir.join("vary.csv"),
        &["t".into(), "rate".into(), "narrow_gap".into()],
        &rows,
    )?;
    let pass = rep.admissible;
    emit(cli, "vary", a, &a.report, inputs, pass, rep)
}

fn parse_tgrid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Usage(format!("--tgrid expects geometric:<T>:<k>, got `{spec}`"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 || parts[0] != "geometric" {
        return Err(bad().into());
    }
    let t: f64 = parts[1].parse().map_err(|_| bad())?;
    let k: usize = parts[2].parse().map_err(|_| bad())?;
    if !(t > 0.0 && t.is_finite()) {
        return Err(bad().into());
    }
    Ok(geometric_grid(t, k))
}

#[derive(Serialize)]
struct FlatComparison {
    /// `int P d(nu - mu)` with `P` the flat derivative at `mu`.
    potential_pairing: Option<f64>,
    /// `iint <p(x), y - x> dpi` for the candidate covector.
    covector_pairing: f64,
}

#[derive(Serialize)]
struct DerivResult {
    verdict: &'static str,
    candidate: &'static str,
    report: Option<DerivativeReport>,
    /// Present when the family failed the admissibility check.
    rejected: Option<AdmissibilityReport>,
    flat: Option<FlatComparison>,
}

fn deriv(cli: &Cli, a: &DerivArgs) -> Result<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(cli.global.seed);
    let mut inputs = Vec::new();
    let u = Functional::builtin(&a.functional)?;
    let mu = load_or_random(&a.mu, &mut rng, a.atoms, a.dim, &mut inputs)?;
    let kind = FamilyKind::from(a.family_kind);
    let family = random_family(kind, &mu, &mut rng)?;
    let q = a.q.unwrap_or_else(|| harness_q(kind));
    let (p, candidate) = match u.closed_gradient(&mu) {
        Some(p) => (p, "closed_form"),
        None => (intrinsic_derivative(&u, &mu, 1e-5)?, "finite_difference"),
    };
    let flat = if kind == FamilyKind::Flat {
        let plan = family.evaluate(1.0)?;
        Some(FlatComparison {
            potential_pairing: flat_pairing(&u, &mu, plan.target()),
            covector_pairing: plan_pairing(&p, &plan)?,
        })
    } else {
        None
    };
    let grid = geometric_grid(1.0, a.levels);
    let (report, rejected) = match derivative_residual_with(
        &u,
        &family,
        &p,
        q,
        &grid,
        Verdict {
            abs_tol: a.abs_tol,
            min_slope: a.min_slope,
        },
    ) {
        Ok(r) => (Some(r), None),
        Err(CoreError::NotAdmissible(adm)) => (None, Some(*adm)),
        Err(e) => return Err(e.into()),
    };
    let pass = report.as_ref().is_some_and(|r| r.is_derivative);
    if let Some(r) = &report {
        let rows: Vec<Vec<f64>> = r
            .t_grid
            .iter()
            .zip(&r.residuals)
            .map(|(t, v)| vec![*t, *v])
            .collect();
        write_csv(
            &cli.global.out_dir.join("deriv.csv"),
            &["t".into(), "residual".into()],
            &rows,
        )?;
    }
    let verdict = if pass {
        "derivative"
    } else if rejected.is_some() {
        "not admissible"
    } else {
        "not a derivative"
    };
    emit(
        cli,
        "deriv",
        a,
        &a.report,
        inputs,
        pass,
        DerivResult {
            verdict,
            candidate,
            report,
            rejected,
            flat,
        },
    )
}

#[derive(Serialize)]
struct SimulateResult {
    converged: bool,
    failure: Option<String>,
    windows: Vec<(f64, f64)>,
    iterations: usize,
    continuity_residual: Option<f64>,
    filippov: Option<FilippovReport>,
    lipschitz_audit: f64,
    log_file: String,
    trajectory_file: Option<String>,
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(cli.global.seed);
    let mut inputs = Vec::new();
    let mu = load_or_random(&a.mu, &mut rng, a.atoms, a.dim, &mut inputs)?;
    let d = mu.dim();
    let dynamics = ControlledDynamics::builtin(&a.dynamics, d)?;
    let leader = TorusPoint::new(
        parse_vector(&a.leader_x, d).map_err(|e| Usage(format!("--leader-x: {e}")))?,
    )?;
    let u0 = parse_vector(&a.u0, d).map_err(|e| Usage(format!("--u0: {e}")))?;
    let ubar = ControlAssignment::parse(&a.ubar, d)?;
    let options = SolverOptions {
        tol: a.tol,
        ..SolverOptions::default()
    };
    let audit = dynamics.lipschitz_audit(200, cli.global.seed);
    let log_path = cli.global.out_dir.join("simulate-log.json");
    let traj_path = cli.global.out_dir.join("simulate-trajectory.csv");
    let outcome = solve_leader_follower(
        &dynamics, &leader, &mu, &u0, &ubar, a.t0, a.t_end, a.steps, options,
    );
    let result = match outcome {
        Ok(sol) => {
            write_json(&log_path, &sol.log)?;
            let mut header = vec!["t".to_string()];
            header.extend((0..d).map(|c| format!("leader_{}", c + 1)));
            for k in 0..mu.len() {
                header.extend((0..d).map(|c| format!("x{k}_{}", c + 1)));
            }
            let rows: Vec<Vec<f64>> = (0..sol.times.len())
                .map(|i| {
                    let mut row = vec![sol.times[i]];
                    row.extend(
                        TorusPoint::from_lift(&sol.leader[i])
                            .map(|p| p.coords().to_vec())
                            .unwrap_or_default(),
                    );
                    for path in sol.followers.paths() {
                        row.extend(
                            TorusPoint::from_lift(&path[i])
                                .map(|p| p.coords().to_vec())
                                .unwrap_or_default(),
                        );
                    }
                    row
                })
                .collect();
            write_csv(&traj_path, &header, &rows)?;
            SimulateResult {
                converged: true,
                failure: None,
                windows: sol.windows.clone(),
                iterations: sol.iterations(),
                continuity_residual: Some(continuity_residual(
                    &sol.followers,
                    &TestFunction::dictionary(d),
                    1,
                )?),
                filippov: Some(filippov_initial_velocity_check(&sol, &dynamics)?),
                lipschitz_audit: audit,
                log_file: file_name(&log_path),
                trajectory_file: Some(file_name(&traj_path)),
            }
        }
        Err(CoreError::NonContraction {
            start,
            end,
            iterations,
            reason,
            residuals,
        }) => {
            let log: Vec<IterationRecord> = residuals
                .iter()
                .enumerate()
                .map(|(i, &r)| IterationRecord {
                    window: 0,
                    iteration: i + 1,
                    residual: r,
                    ratio: if i == 0 {
                        None
                    } else {
                        Some(r / residuals[i - 1])
                    },
                })
                .collect();
            write_json(&log_path, &log)?;
            SimulateResult {
                converged: false,
                failure: Some(format!(
                    "window [{start}, {end}] after {iterations} iterations: {reason}"
                )),
                windows: vec![],
                iterations,
                continuity_residual: None,
                filippov: None,
                lipschitz_audit: audit,
                log_file: file_name(&log_path),
                trajectory_file: None,
            }
        }
        Err(e) => return Err(e.into()),
    };
    let pass = result.converged;
    emit(cli, "simulate", a, &a.report, inputs, pass, result)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Serialize)]
struct ValueOutput {
    instance: String,
    value: ValueResult,
    dpp: DppReport,
    table_file: Option<String>,
}

fn value(cli: &Cli, a: &ValueArgs) -> Result<u8> {
    let inst = ControlInstance::builtin(&a.instance)?;
    let grid = inst.grid(a.levels)?;
    let steps = a.steps.unwrap_or(inst.steps);
    let opts = SolverOptions::default();
    let v = value_function(
        &inst.cost,
        &inst.dynamics,
        inst.t0,
        &inst.leader,
        &inst.mu,
        inst.horizon,
        &grid,
        steps,
        opts,
    )?;
    let tau = 0.5 * (inst.t0 + inst.horizon);
    let dpp = dpp_residual(
        &inst.cost,
        &inst.dynamics,
        inst.t0,
        &inst.leader,
        &inst.mu,
        tau,
        inst.horizon,
        &grid,
        steps,
        opts,
    )?;
    let table_file = match &a.emit_table {
        Some(path) => {
            let path = if path.is_absolute() {
                path.clone()
            } else {
                cli.global.out_dir.join(path)
            };
            let table = ValueTable::compute(
                &inst.cost,
                &inst.dynamics,
                &inst.probe_times(a.table_times),
                &inst.probe_states(a.table_states)?,
                inst.horizon,
                &grid,
                (inst.horizon - inst.t0) / steps as f64,
                opts,
            )?;
            write_table(&path, &table)?;
            Some(file_name(&path))
        }
        None => None,
    };
    let out = ValueOutput {
        instance: inst.id.clone(),
        value: v,
        dpp,
        table_file,
    };
    emit(cli, "value", a, &a.report, vec![], true, out)
}

fn write_table(path: &Path, table: &ValueTable) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "table".into());
    let name = |j: usize| format!("{stem}-mu-{j:03}.csv");
    for (j, st) in table.states.iter().enumerate() {
        st.mu.write_csv(dir.join(name(j)))?;
    }
    write_json(path, &table.to_json_value(name))
}

#[derive(Serialize)]
struct JetOutput {
    probe_time: f64,
    p_t: f64,
    p_x: Vec<f64>,
    p_mu: Vec<Vec<f64>>,
    check: ViscosityCheck,
}

#[derive(Serialize)]
#[serde(untagged)]
enum HjbOutput {
    Jet(Box<JetOutput>),
    Compare(ComparisonReport),
    Doubling(DoublingReport),
}

fn hjb_check(cli: &Cli, a: &HjbArgs) -> Result<u8> {
    let inst = ControlInstance::builtin(&a.instance)?;
    let grid = inst.grid(a.levels)?;
    let d = inst.dim();
    let opts = SolverOptions::default();
    let dt = (inst.horizon - inst.t0) / inst.steps as f64;
    let (pass, out) = match a.mode {
        HjbMode::Sub | HjbMode::Super => {
            let oracle = |t: f64, x: &TorusPoint, mu: &DiscreteMeasure| -> wvar_core::Result<f64> {
                let steps = (((inst.horizon - t) / dt) - 1e-9).ceil().max(1.0) as usize;
                Ok(value_function(
                    &inst.cost,
                    &inst.dynamics,
                    t,
                    x,
                    mu,
                    inst.horizon,
                    &grid,
                    steps,
                    opts,
                )?
                .value)
            };
            let t = inst.t0 + 0.25 * (inst.horizon - inst.t0);
            let jet = finite_difference_jet(&oracle, t, &inst.leader, &inst.mu, 1e-4)?;
            let battery = JetBattery::standard(&inst.mu, cli.global.seed)?;
            let samples = default_control_samples(d);
            let check = if a.mode == HjbMode::Sub {
                subsolution_residual(
                    &oracle,
                    &inst.dynamics,
                    &inst.cost,
                    t,
                    &inst.leader,
                    &inst.mu,
                    inst.horizon,
                    &jet,
                    &battery,
                    &samples,
                )?
            } else {
                supersolution_residual(
                    &oracle,
                    &inst.dynamics,
                    &inst.cost,
                    t,
                    &inst.leader,
                    &inst.mu,
                    inst.horizon,
                    &jet,
                    &battery,
                    &samples,
                )?
            };
            let pass = check.satisfied;
            (
                pass,
                HjbOutput::Jet(Box::new(JetOutput {
                    probe_time: t,
                    p_t: jet.p_t,
                    p_x: jet.p_x.clone(),
                    p_mu: jet.p_mu.values().to_vec(),
                    check,
                })),
            )
        }
        HjbMode::Compare => {
            let probes = random_comparison_probes(d, a.probes, cli.global.seed)?;
            let rep = hamiltonian_comparison_check(
                &inst.dynamics,
                &inst.cost,
                &probes,
                &default_control_samples(d),
            )?;
            (rep.passed, HjbOutput::Compare(rep))
        }
        HjbMode::Doubling => {
            let times = inst.probe_times(a.table_times);
            let states = inst.probe_states(a.table_states)?;
            let v1 = ValueTable::compute(
                &inst.cost,
                &inst.dynamics,
                &times,
                &states,
                inst.horizon,
                &grid,
                dt,
                opts,
            )?;
            let v2 = ValueTable::compute(
                &inst.cost,
                &inst.dynamics,
                &times,
                &states,
                inst.horizon,
                &grid,
                0.5 * dt,
                opts,
            )?;
            let rep = doubling_experiment(&v1, &v2, a.eps, a.eta, 1e-9)?;
            let pass =
                rep.rho_bound_holds && rep.eta_conditions_satisfied && rep.min_gap_nonnegative;
            (pass, HjbOutput::Doubling(rep))
        }
    };
    emit(cli, "hjb-check", a, &a.report, vec![], pass, out)
}

/// Central differences in time, leader position and each atom position.
fn finite_difference_jet<F>(
    v: &F,
    t: f64,
    x: &TorusPoint,
    mu: &DiscreteMeasure,
    h: f64,
) -> Result<Jet>
where
    F: Fn(f64, &TorusPoint, &DiscreteMeasure) -> wvar_core::Result<f64>,
{
    let d = x.dim();
    let p_t = (v(t + h, x, mu)? - v(t - h, x, mu)?) / (2.0 * h);
    let shift = |c: usize, s: f64| -> Result<TorusPoint> {
        let mut l = x.coords().to_vec();
        l[c] += s;
        Ok(TorusPoint::from_lift(&l)?)
    };
    let mut p_x = Vec::with_capacity(d);
    for c in 0..d {
        p_x.push((v(t, &shift(c, h)?, mu)? - v(t, &shift(c, -h)?, mu)?) / (2.0 * h));
    }
    let mut values = Vec::with_capacity(mu.len());
    for k in 0..mu.len() {
        let mut row = Vec::with_capacity(d);
        for c in 0..d {
            let moved = |s: f64| -> Result<DiscreteMeasure> {
                let mut coords: Vec<Vec<f64>> =
                    mu.points().iter().map(|p| p.coords().to_vec()).collect();
                coords[k][c] += s;
                let pts = coords
                    .iter()
                    .map(|l| TorusPoint::from_lift(l))
                    .collect::<wvar_core::Result<Vec<_>>>()?;
                Ok(DiscreteMeasure::new(pts, mu.weights().to_vec())?)
            };
            let g = (v(t, x, &moved(h)?)? - v(t, x, &moved(-h)?)?) / (2.0 * h);
            row.push(g / mu.weights()[k]);
        }
        values.push(row);
    }
    Ok(Jet {
        p_t,
        p_x,
        p_mu: Covector::new(mu.clone(), values)?,
    })
}
