//! Python access to the transport, derivative and control routines of `wvar_core`.
//!
//! Measures are passed as a list of points (each a list of coordinates) and a
//! list of weights.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wvar_core::derivative::{derivative_residual_with, harness_q, intrinsic_derivative, Verdict};
use wvar_core::dynamics::{
    solve_leader_follower, ControlAssignment, ControlledDynamics, SolverOptions,
};
use wvar_core::functionals::Functional;
use wvar_core::hjb::{
    default_control_samples, hamiltonian_comparison_check, random_comparison_probes,
    value_function, CostSpec,
};
use wvar_core::instances::ControlInstance;
use wvar_core::transport::{optimal_plan, plan_cost};
use wvar_core::variations::{geometric_grid, random_family};
use wvar_core::{DiscreteMeasure, Error, FamilyKind, TorusPoint};

fn err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn measure(points: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<DiscreteMeasure> {
    DiscreteMeasure::from_coords(&points, &weights).map_err(err)
}

/// W_q distance between two measures.
#[pyfunction]
#[pyo3(signature = (mu_points, mu_weights, nu_points, nu_weights, q = 2.0))]
fn wasserstein(
    mu_points: Vec<Vec<f64>>,
    mu_weights: Vec<f64>,
    nu_points: Vec<Vec<f64>>,
    nu_weights: Vec<f64>,
    q: f64,
) -> PyResult<f64> {
    let mu = measure(mu_points, mu_weights)?;
    let nu = measure(nu_points, nu_weights)?;
    wvar_core::transport::wasserstein(&mu, &nu, q).map_err(err)
}

/// Optimal plan as `(coupling, distance)`, the coupling given row by row.
#[pyfunction]
#[pyo3(signature = (mu_points, mu_weights, nu_points, nu_weights, q = 2.0))]
fn optimal_coupling(
    mu_points: Vec<Vec<f64>>,
    mu_weights: Vec<f64>,
    nu_points: Vec<Vec<f64>>,
    nu_weights: Vec<f64>,
    q: f64,
) -> PyResult<(Vec<Vec<f64>>, f64)> {
    let mu = measure(mu_points, mu_weights)?;
    let nu = measure(nu_points, nu_weights)?;
    let plan = optimal_plan(&mu, &nu, q).map_err(err)?;
    let cols = plan.target().len();
    let rows = plan.coupling().chunks(cols).map(<[f64]>::to_vec).collect();
    Ok((rows, plan_cost(&plan, q).map_err(err)?))
}

/// Residual test of the gradient candidate of a builtin functional along a
/// random family of the given kind.
#[pyfunction]
#[pyo3(signature = (functional, kind, points, weights, seed = 0, levels = 20, q = None))]
#[allow(clippy::too_many_arguments)]
fn derivative_check<'py>(
    py: Python<'py>,
    functional: &str,
    kind: &str,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    seed: u64,
    levels: usize,
    q: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let u = Functional::builtin(functional).map_err(err)?;
    let kind: FamilyKind = kind.parse().map_err(err)?;
    let mu = measure(points, weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let family = random_family(kind, &mu, &mut rng).map_err(err)?;
    let p = match u.closed_gradient(&mu) {
        Some(p) => p,
        None => intrinsic_derivative(&u, &mu, 1e-5).map_err(err)?,
    };
    let q = q.unwrap_or_else(|| harness_q(kind));
    let out = PyDict::new(py);
    match derivative_residual_with(
        &u,
        &family,
        &p,
        q,
        &geometric_grid(1.0, levels),
        Verdict::default(),
    ) {
        Ok(r) => {
            out.set_item("admissible", true)?;
            out.set_item("is_derivative", r.is_derivative)?;
            out.set_item("t", r.t_grid)?;
            out.set_item("residuals", r.residuals)?;
            out.set_item("slope", r.slope)?;
        }
        Err(Error::NotAdmissible(adm)) => {
            out.set_item("admissible", false)?;
            out.set_item("is_derivative", false)?;
            out.set_item("rate_exponent", adm.rate_exponent)?;
        }
        Err(e) => return Err(err(e)),
    }
    Ok(out)
}

/// Solve the leader-follower system with a builtin dynamics.
#[pyfunction]
#[pyo3(signature = (dynamics, leader, points, weights, u0, ubar = "constant:0", t0 = 0.0, t_end = 1.0, steps = 100))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    dynamics: &str,
    leader: Vec<f64>,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    u0: Vec<f64>,
    ubar: &str,
    t0: f64,
    t_end: f64,
    steps: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let mu = measure(points, weights)?;
    let d = mu.dim();
    let dyn_ = ControlledDynamics::builtin(dynamics, d).map_err(err)?;
    let leader = TorusPoint::new(leader).map_err(err)?;
    let ubar = ControlAssignment::parse(ubar, d).map_err(err)?;
    let sol = solve_leader_follower(
        &dyn_,
        &leader,
        &mu,
        &u0,
        &ubar,
        t0,
        t_end,
        steps,
        SolverOptions::default(),
    )
    .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("times", sol.times.clone())?;
    out.set_item("leader", sol.leader.clone())?;
    out.set_item("followers", sol.followers.paths().to_vec())?;
    out.set_item("windows", sol.windows.clone())?;
    out.set_item("iterations", sol.iterations())?;
    Ok(out)
}

/// Value of a builtin control instance at its initial state, with the
/// minimizing control label.
#[pyfunction]
#[pyo3(signature = (instance, levels = 9))]
fn value(instance: &str, levels: usize) -> PyResult<(f64, Option<String>)> {
    let inst = ControlInstance::builtin(instance).map_err(err)?;
    let grid = inst.grid(levels).map_err(err)?;
    let v = value_function(
        &inst.cost,
        &inst.dynamics,
        inst.t0,
        &inst.leader,
        &inst.mu,
        inst.horizon,
        &grid,
        inst.steps,
        SolverOptions::default(),
    )
    .map_err(err)?;
    Ok((v.value, v.control))
}

/// Random Hamiltonian comparison probes; returns `(violations, worst_slack)`.
#[pyfunction]
#[pyo3(signature = (dynamics, cost, dim = 1, probes = 100, seed = 0))]
fn hamiltonian_comparison(
    dynamics: &str,
    cost: &str,
    dim: usize,
    probes: usize,
    seed: u64,
) -> PyResult<(usize, f64)> {
    let dyn_ = ControlledDynamics::builtin(dynamics, dim).map_err(err)?;
    let cost = CostSpec::builtin(cost, dim).map_err(err)?;
    let probes = random_comparison_probes(dim, probes, seed).map_err(err)?;
    let r = hamiltonian_comparison_check(&dyn_, &cost, &probes, &default_control_samples(dim))
        .map_err(err)?;
    Ok((r.violations, r.worst_slack))
}

#[pymodule]
fn wvar(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(wasserstein, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_coupling, m)?)?;
    m.add_function(wrap_pyfunction!(derivative_check, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(value, m)?)?;
    m.add_function(wrap_pyfunction!(hamiltonian_comparison, m)?)?;
    Ok(())
}
