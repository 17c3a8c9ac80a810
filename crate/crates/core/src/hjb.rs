//! Value function of the leader-follower control problem, its dynamic
//! programming principle, the Hamiltonian and numerical viscosity checks.
//!
//! Sign convention: a subsolution satisfies `p_t + H >= 0` on superdifferential
//! jets and a supersolution `p_t + H <= 0` on subdifferential jets. This is the
//! reverse of the usual one and is kept on purpose.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{
    check_control, random_ball_point, solve_leader_follower, ControlAssignment, ControlledDynamics,
    LeaderFollowerSolution, SolverOptions,
};
use crate::error::{Error, Result};
use crate::measure::{
    check_dim, dot, norm, torus_distance, wrap_scalar, DiscreteMeasure, TorusPoint,
};
use crate::transport::{
    barycentric_covector, invert_plan, optimal_plan, plan_pairing, wasserstein, Covector,
    TransportPlan,
};
use crate::variations::{
    make_flat_variation, make_transport_map_variation, random_family, FamilyKind, VariationFamily,
};

pub type StateCost = Arc<dyn Fn(&TorusPoint, &DiscreteMeasure) -> f64 + Send + Sync>;

/// Running cost `L(x, mu)` and terminal cost `G(x, mu)` with declared bounds.
#[derive(Clone)]
pub struct CostSpec {
    pub name: String,
    pub running: StateCost,
    pub terminal: StateCost,
    pub running_lip: f64,
    pub running_sup: f64,
    pub terminal_lip: f64,
    pub terminal_sup: f64,
}

impl fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostSpec")
            .field("name", &self.name)
            .finish()
    }
}

fn dist_to_center(x: &TorusPoint) -> f64 {
    norm(
        &x.coords()
            .iter()
            .map(|c| wrap_scalar(c - 0.5))
            .collect::<Vec<_>>(),
    )
}

impl CostSpec {
    /// Named costs:
    ///
    /// - `zero`
    /// - `reach`: `G = d(x, c)^2` with `c` the centre of the cell, `L = 0`
    /// - `moment`: `L = m_2(mu)`, `G = 0`
    /// - `attract`: `L = int (1 - cos 2 pi (x_1 - y_1)) / (2 pi) dmu(y)`, `G = 0`
    /// - `terminal-one`: `G = 1`
    /// - `unit-running`: `L = 1`
    pub fn builtin(name: &str, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        let zero: StateCost = Arc::new(|_, _| 0.0);
        let one: StateCost = Arc::new(|_, _| 1.0);
        let rd = (d as f64).sqrt();
        let (running, terminal, rl, rs, tl, ts) = match name {
            "zero" => (zero.clone(), zero, 0.0, 0.0, 0.0, 0.0),
            "reach" => {
                let g: StateCost = Arc::new(|x, _| dist_to_center(x).powi(2));
                (zero, g, 0.0, 0.0, rd, d as f64 / 4.0)
            }
            "moment" => {
                let l: StateCost = Arc::new(|_, mu| mu.second_moment());
                (l, zero, 2.0 * rd, d as f64, 0.0, 0.0)
            }
            "attract" => {
                let l: StateCost = Arc::new(|x, mu| {
                    mu.integrate(|y| {
                        (1.0 - (2.0 * PI * (x.coords()[0] - y.coords()[0])).cos()) / (2.0 * PI)
                    })
                });
                (l, zero, 2.0, 1.0 / PI, 0.0, 0.0)
            }
            "terminal-one" => (zero, one, 0.0, 0.0, 0.0, 1.0),
            "unit-running" => (one, zero, 0.0, 1.0, 0.0, 0.0),
            other => return Err(Error::UnknownBuiltin(other.to_string())),
        };
        Ok(Self {
            name: name.to_string(),
            running,
            terminal,
            running_lip: rl,
            running_sup: rs,
            terminal_lip: tl,
            terminal_sup: ts,
        })
    }

    /// Largest `|value| / declared sup` on random states. Values above 1 are
    /// logged.
    pub fn audit_bounds(&self, d: usize, samples: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let x = TorusPoint::new((0..d).map(|_| rng.gen()).collect())?;
            let mu = DiscreteMeasure::random(&mut rng, 4, d, false)?;
            for (f, sup) in [
                (&self.running, self.running_sup),
                (&self.terminal, self.terminal_sup),
            ] {
                let v = f(&x, &mu).abs();
                let r = if sup > 0.0 {
                    v / sup
                } else if v > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                };
                worst = worst.max(r);
            }
        }
        if worst > 1.0 {
            log::warn!(
                "cost `{}`: sampled value exceeds its declared bound by factor {worst:.4}",
                self.name
            );
        }
        Ok(worst)
    }
}

/// Trapezoidal rule for the running cost on the uniform solver grid plus the
/// terminal cost.
pub fn cost_j(cost: &CostSpec, sol: &LeaderFollowerSolution) -> Result<f64> {
    let n = sol.times.len() - 1;
    let run = running_integral(cost, sol)?;
    let last = sol.leader_point(n)?;
    Ok(run + (cost.terminal)(&last, &sol.measure_at_node(n)?))
}

fn running_integral(cost: &CostSpec, sol: &LeaderFollowerSolution) -> Result<f64> {
    let n = sol.times.len() - 1;
    let h = sol.times[n] - sol.times[0];
    let mut acc = 0.0;
    for i in 0..=n {
        let l = (cost.running)(&sol.leader_point(i)?, &sol.measure_at_node(i)?);
        if !l.is_finite() {
            return Err(Error::NonFinite(format!(
                "running cost at t = {}",
                sol.times[i]
            )));
        }
        acc += if i == 0 || i == n { 0.5 * l } else { l };
    }
    Ok(h * acc / n as f64)
}

/// Leader control and follower control assignment, both constant in time.
#[derive(Debug, Clone)]
pub struct ControlPair {
    pub u0: Vec<f64>,
    pub ubar: ControlAssignment,
}

impl ControlPair {
    pub fn label(&self) -> String {
        format!(
            "u0={};ubar={}",
            self.u0
                .iter()
                .map(|c| format!("{c}"))
                .collect::<Vec<_>>()
                .join(","),
            self.ubar.label()
        )
    }
}

/// Leader controls on the grid `{-1, ..., 1}^d` with `levels` points per
/// axis, restricted to the unit ball, times every follower assignment.
pub fn control_grid(
    d: usize,
    levels: usize,
    ubar: &[ControlAssignment],
) -> Result<Vec<ControlPair>> {
    if levels < 2 {
        return Err(Error::InvalidArgument(
            "a control grid needs at least 2 levels".into(),
        ));
    }
    if ubar.is_empty() {
        return Err(Error::InvalidArgument("no follower controls given".into()));
    }
    let axis: Vec<f64> = (0..levels)
        .map(|i| -1.0 + 2.0 * i as f64 / (levels - 1) as f64)
        .collect();
    let mut leaders = vec![vec![]];
    for _ in 0..d {
        leaders = leaders
            .into_iter()
            .flat_map(|p: Vec<f64>| {
                axis.iter().map(move |&a| {
                    let mut q = p.clone();
                    q.push(a);
                    q
                })
            })
            .collect();
    }
    let mut out = Vec::new();
    for u0 in leaders.into_iter().filter(|u| norm(u) <= 1.0 + 1e-12) {
        for ub in ubar {
            out.push(ControlPair {
                u0: u0.clone(),
                ubar: ub.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ValueResult {
    pub value: f64,
    /// Index of the minimizing control pair; absent at the terminal time.
    pub argmin: Option<usize>,
    pub control: Option<String>,
}

/// Minimum of the cost over the control grid, ties going to the lowest index.
#[allow(clippy::too_many_arguments)]
pub fn value_function(
    cost: &CostSpec,
    dynamics: &ControlledDynamics,
    t0: f64,
    x: &TorusPoint,
    mu: &DiscreteMeasure,
    t_end: f64,
    grid: &[ControlPair],
    steps: usize,
    options: SolverOptions,
) -> Result<ValueResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty control grid".into()));
    }
    if t0 > t_end {
        return Err(Error::InvalidArgument(format!(
            "initial time {t0} after horizon {t_end}"
        )));
    }
    if t0 == t_end {
        return Ok(ValueResult {
            value: (cost.terminal)(x, mu),
            argmin: None,
            control: None,
        });
    }
    let costs = grid
        .par_iter()
        .map(|pair| {
            let sol = solve_leader_follower(
                dynamics, x, mu, &pair.u0, &pair.ubar, t0, t_end, steps, options,
            )?;
            cost_j(cost, &sol)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (k, v) = argmin(&costs);
    Ok(ValueResult {
        value: v,
        argmin: Some(k),
        control: Some(grid[k].label()),
    })
}

fn argmin(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v < best.1 {
            best = (k, v);
        }
    }
    best
}

#[derive(Debug, Clone, Serialize)]
pub struct DppReport {
    pub direct: f64,
    pub split: f64,
    pub split_argmin: usize,
    pub residual: f64,
}

/// `|V(t0) - min_u { int_{t0}^tau L + V(tau, xi(tau), mu_tau) }|`, the first
/// leg over the grid and the second re-optimized over the same grid.
#[allow(clippy::too_many_arguments)]
pub fn dpp_residual(
    cost: &CostSpec,
    dynamics: &ControlledDynamics,
    t0: f64,
    x: &TorusPoint,
    mu: &DiscreteMeasure,
    tau: f64,
    t_end: f64,
    grid: &[ControlPair],
    steps: usize,
    options: SolverOptions,
) -> Result<DppReport> {
    if !(t0 < tau && tau < t_end) {
        return Err(Error::InvalidArgument(format!(
            "need t0 < tau < T, got {t0}, {tau}, {t_end}"
        )));
    }
    let direct = value_function(cost, dynamics, t0, x, mu, t_end, grid, steps, options)?.value;
    let n1 = ((steps as f64 * (tau - t0) / (t_end - t0)).round() as usize).max(1);
    let n2 = steps.saturating_sub(n1).max(1);
    let legs = grid
        .par_iter()
        .map(|pair| {
            let sol =
                solve_leader_follower(dynamics, x, mu, &pair.u0, &pair.ubar, t0, tau, n1, options)?;
            let run = running_integral(cost, &sol)?;
            let xm = sol.leader_point(n1)?;
            let mm = sol.measure_at_node(n1)?;
            let rest =
                value_function(cost, dynamics, tau, &xm, &mm, t_end, grid, n2, options)?.value;
            Ok(run + rest)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (k, split) = argmin(&legs);
    Ok(DppReport {
        direct,
        split,
        split_argmin: k,
        residual: (direct - split).abs(),
    })
}

/// `0`, `+-e_i` and `2d + 1` random points of the unit ball (fixed seed).
pub fn default_control_samples(d: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; d]];
    for i in 0..d {
        for s in [1.0, -1.0] {
            let mut e = vec![0.0; d];
            e[i] = s;
            out.push(e);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..2 * d + 1 {
        out.push(random_ball_point(&mut rng, d, 1.0));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct HamiltonianEval {
    pub value: f64,
    pub leader_control: usize,
    pub follower_controls: Vec<usize>,
    /// `f(t, xi, mu, u*)` at the leader minimizer.
    pub leader_velocity: Vec<f64>,
}

struct HamiltonianTerms {
    running: f64,
    leader: Vec<f64>,
    followers: Vec<Vec<f64>>,
    leader_velocities: Vec<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn hamiltonian_terms(
    dynamics: &ControlledDynamics,
    cost: &CostSpec,
    t: f64,
    xi: &TorusPoint,
    mu: &DiscreteMeasure,
    p_x: &[f64],
    p_mu: &Covector,
    samples: &[Vec<f64>],
) -> Result<HamiltonianTerms> {
    let d = dynamics.dim;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no control samples".into()));
    }
    for u in samples {
        check_control(u, d)?;
    }
    check_dim(d, xi.dim())?;
    check_dim(d, p_x.len())?;
    if p_mu.base() != mu {
        return Err(Error::InvalidArgument(
            "covector is not based on the given measure".into(),
        ));
    }
    let leader_velocities: Vec<Vec<f64>> = samples
        .iter()
        .map(|u| (dynamics.leader)(t, xi.coords(), mu, u))
        .collect();
    let leader = leader_velocities.iter().map(|v| dot(v, p_x)).collect();
    let followers = mu
        .iter()
        .zip(p_mu.values())
        .map(|((x, w), p)| {
            samples
                .iter()
                .map(|u| w * dot(&(dynamics.follower)(t, x.coords(), xi.coords(), mu, u), p))
                .collect()
        })
        .collect();
    let running = (cost.running)(xi, mu);
    Ok(HamiltonianTerms {
        running,
        leader,
        followers,
        leader_velocities,
    })
}

/// `L(xi, mu) + min_u <f(u), p_x> + sum_k min_u m_k <g(x_k, u), p_mu(x_k)>`
/// over the control samples. The follower minimization decouples per atom.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    dynamics: &ControlledDynamics,
    cost: &CostSpec,
    t: f64,
    xi: &TorusPoint,
    mu: &DiscreteMeasure,
    p_x: &[f64],
    p_mu: &Covector,
    samples: &[Vec<f64>],
) -> Result<HamiltonianEval> {
    let terms = hamiltonian_terms(dynamics, cost, t, xi, mu, p_x, p_mu, samples)?;
    let (lk, lv) = argmin(&terms.leader);
    let mut value = terms.running + lv;
    let mut follower_controls = Vec::with_capacity(terms.followers.len());
    for row in &terms.followers {
        let (k, v) = argmin(row);
        value += v;
        follower_controls.push(k);
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("Hamiltonian".into()));
    }
    Ok(HamiltonianEval {
        value,
        leader_control: lk,
        follower_controls,
        leader_velocity: terms.leader_velocities[lk].clone(),
    })
}

/// Joint minimization over every product assignment of samples to the
/// leader and each atom. Exponential; meant as an oracle on tiny instances.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian_exhaustive(
    dynamics: &ControlledDynamics,
    cost: &CostSpec,
    t: f64,
    xi: &TorusPoint,
    mu: &DiscreteMeasure,
    p_x: &[f64],
    p_mu: &Covector,
    samples: &[Vec<f64>],
) -> Result<f64> {
    let terms = hamiltonian_terms(dynamics, cost, t, xi, mu, p_x, p_mu, samples)?;
    let m = samples.len();
    let slots = 1 + terms.followers.len();
    let total = (m as u64)
        .checked_pow(slots as u32)
        .filter(|&c| c <= 50_000_000)
        .ok_or_else(|| {
            Error::InvalidArgument("instance too large for exhaustive minimization".into())
        })?;
    let mut best = f64::INFINITY;
    let mut idx = vec![0usize; slots];
    for _ in 0..total {
        let mut v = terms.running + terms.leader[idx[0]];
        for (k, row) in terms.followers.iter().enumerate() {
            v += row[idx[k + 1]];
        }
        best = best.min(v);
        for slot in idx.iter_mut() {
            *slot += 1;
            if *slot < m {
                break;
            }
            *slot = 0;
        }
    }
    Ok(best)
}

/// Sampled Hamiltonian minus the Hamiltonian over the samples plus `extra`
/// random points of the ball. Nonnegative; an estimate of how far the
/// sampled infimum sits above the true one.
#[allow(clippy::too_many_arguments)]
pub fn sample_grid_gap(
    dynamics: &ControlledDynamics,
    cost: &CostSpec,
    t: f64,
    xi: &TorusPoint,
    mu: &DiscreteMeasure,
    p_x: &[f64],
    p_mu: &Covector,
    samples: &[Vec<f64>],
    extra: usize,
    seed: u64,
) -> Result<f64> {
    let coarse = hamiltonian(dynamics, cost, t, xi, mu, p_x, p_mu, samples)?.value;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fine = samples.to_vec();
    for _ in 0..extra {
        let u = random_ball_point(&mut rng, dynamics.dim, 1.0);
        let n = norm(&u);
        // push half of the extra points to the sphere, where linear forms attain their minimum
        fine.push(if n > 0.0 && rng.gen::<bool>() {
            u.iter().map(|c| c / n).collect()
        } else {
            u
        });
    }
    let refined = hamiltonian(dynamics, cost, t, xi, mu, p_x, p_mu, &fine)?.value;
    Ok((coarse - refined).max(0.0))
}

/// `(p_t, p_x, p_mu)` with `p_mu` based on the probe measure.
#[derive(Debug, Clone)]
pub struct Jet {
    pub p_t: f64,
    pub p_x: Vec<f64>,
    pub p_mu: Covector,
}

/// Value function evaluated at an arbitrary state.
pub trait ValueOracle: Sync {
    fn value(&self, t: f64, x: &TorusPoint, mu: &DiscreteMeasure) -> Result<f64>;
}

impl<F> ValueOracle for F
where
    F: Fn(f64, &TorusPoint, &DiscreteMeasure) -> Result<f64> + Sync,
{
    fn value(&self, t: f64, x: &TorusPoint, mu: &DiscreteMeasure) -> Result<f64> {
        self(t, x, mu)
    }
}

/// Finite set of variations, leader offsets and scales on which jet
/// membership is tested.
#[derive(Debug, Clone)]
pub struct JetBattery {
    pub families: Vec<(String, VariationFamily)>,
    /// Leader offset directions; the offset at scale `h` is `h * dir`.
    pub directions: Vec<Vec<f64>>,
    pub h0: f64,
    pub levels: usize,
    /// Quotients above `tol` (super) or below `-tol` (sub) reject the jet.
    pub tol: f64,
}

impl JetBattery {
    /// One family of each elementary kind plus the reversed transport map;
    /// the flat family moves every atom by `1e-3`.
    pub fn standard(mu: &DiscreteMeasure, seed: u64) -> Result<Self> {
        let d = mu.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi_vals: Vec<Vec<f64>> = (0..mu.len())
            .map(|_| (0..d).map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect();
        let phi = Covector::new(mu.clone(), phi_vals)?;
        let map = make_transport_map_variation(mu, &phi, 1.0)?;
        let back = make_transport_map_variation(mu, &phi.scaled(-1.0), 1.0)?;
        let small: Vec<Vec<f64>> = (0..mu.len())
            .map(|_| {
                let v = random_ball_point(&mut rng, d, 1.0);
                let n = norm(&v).max(1e-3);
                v.iter().map(|c| 1e-3 * c / n).collect()
            })
            .collect();
        let flat = make_flat_variation(&TransportPlan::deterministic(mu, &small)?, 1.0)?;
        let lag = random_family(FamilyKind::Lagrangian, mu, &mut rng)?;
        let eul = random_family(FamilyKind::Eulerian, mu, &mut rng)?;
        let mut directions = vec![vec![0.0; d]];
        for i in 0..d {
            for s in [1.0, -1.0] {
                let mut e = vec![0.0; d];
                e[i] = s;
                directions.push(e);
            }
        }
        Ok(Self {
            families: vec![
                ("map".into(), map),
                ("map-reversed".into(), back),
                ("flat".into(), flat),
                ("lagrangian".into(), lag),
                ("eulerian".into(), eul),
            ],
            directions,
            h0: 0.05,
            levels: 10,
            tol: 1e-3,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JetSide {
    Super,
    Sub,
}

#[derive(Debug, Clone, Serialize)]
pub struct QuotientSequence {
    pub family: String,
    pub direction: Vec<f64>,
    pub scales: Vec<f64>,
    pub quotients: Vec<f64>,
    /// Max (super) or min (sub) over the three finest scales.
    pub tail: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct JetReport {
    pub side: JetSide,
    pub sequences: Vec<QuotientSequence>,
    /// Worst tail over all sequences.
    pub extreme: f64,
    pub tol: f64,
    pub valid: bool,
}

/// Evaluates the differential quotient of the jet along every battery entry.
#[allow(clippy::too_many_arguments)]
pub fn check_jet<V: ValueOracle + ?Sized>(
    v: &V,
    side: JetSide,
    t: f64,
    x: &TorusPoint,
    mu: &DiscreteMeasure,
    t_end: f64,
    jet: &Jet,
    battery: &JetBattery,
) -> Result<JetReport> {
    if !(t < t_end) {
        return Err(Error::InvalidArgument(format!(
            "jet probe needs t < T, got t = {t}, T = {t_end}"
        )));
    }
    let d = x.dim();
    check_dim(d, jet.p_x.len())?;
    if jet.p_mu.base() != mu {
        return Err(Error::InvalidArgument(
            "jet covector is not based on the probe measure".into(),
        ));
    }
    let h0 = battery.h0.min(0.5 * (t_end - t));
    let scales: Vec<f64> = (0..=battery.levels)
        .map(|k| h0 * 0.5f64.powi(k as i32))
        .collect();
    let base = v.value(t, x, mu)?;
    let jobs: Vec<(usize, usize)> = (0..battery.families.len())
        .flat_map(|f| (0..battery.directions.len()).map(move |k| (f, k)))
        .collect();
    let sequences = jobs
        .par_iter()
        .map(|&(f, k)| {
            let (label, family) = &battery.families[f];
            let dir = &battery.directions[k];
            let mut quotients = Vec::with_capacity(scales.len());
            for &h in &scales {
                let hf = h.min(family.horizon());
                let plan = family.evaluate(hf)?;
                let y: Vec<f64> = dir.iter().map(|c| h * c).collect();
                let lift: Vec<f64> = x.coords().iter().zip(&y).map(|(a, b)| a + b).collect();
                let moved = TorusPoint::from_lift(&lift)?;
                let val = v.value(t + h, &moved, plan.target())?;
                let num =
                    val - base - jet.p_t * h - dot(&jet.p_x, &y) - plan_pairing(&jet.p_mu, &plan)?;
                quotients.push(num / (h + norm(&y)));
            }
            let tail_slice = &quotients[quotients.len().saturating_sub(3)..];
            let tail = match side {
                JetSide::Super => tail_slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                JetSide::Sub => tail_slice.iter().cloned().fold(f64::INFINITY, f64::min),
            };
            Ok(QuotientSequence {
                family: label.clone(),
                direction: dir.clone(),
                scales: scales.clone(),
                quotients,
                tail,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (extreme, valid) = match side {
        JetSide::Super => {
            let e = sequences
                .iter()
                .map(|s| s.tail)
                .fold(f64::NEG_INFINITY, f64::max);
            (e, e <= battery.tol)
        }
        JetSide::Sub => {
            let e = sequences
                .iter()
                .map(|s| s.tail)
                .fold(f64::INFINITY, f64::min);
            (e, e >= -battery.tol)
        }
    };
    Ok(JetReport {
        side,
        sequences,
        extreme,
        tol: battery.tol,
        valid,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ViscosityCheck {
    pub jet: JetReport,
    /// `p_t + H(t, x, mu, p_x, p_mu)`; absent when the jet was rejected.
    pub residual: Option<f64>,
    pub satisfied: bool,
}

#[allow(clippy::too_many_arguments)]
fn viscosity_check<V: ValueOracle + ?Sized>(
    side: JetSide,
    v: &V,
    dynamics: &ControlledDynamics,
    cost: &CostSpec,
    t: f64,
    x: &TorusPoint,
    mu: &DiscreteMeasure,
    t_end: f64,
    jet: &Jet,
    battery: &JetBattery,
    samples: &[Vec<f64>],
) -> Result<ViscosityCheck> {
    let report = check_jet(v, side, t, x, mu, t_end, jet, battery)?;
    if !report.valid {
        return Ok(ViscosityCheck {
            jet: report,
            residual: None,
            satisfied: false,
        });
    }
    let r = jet.p_t + hamiltonian(dynamics, cost, t, x, mu, &jet.p_x, &jet.p_mu, samples)?.value;
    let satisfied = match side {
        JetSide::Super => r >= -battery.tol,
        JetSide::Sub => r <= battery.tol,
    };
    Ok(ViscosityCheck {
        jet: report,
        residual: Some(r),
        satisfied,
    })
}

/// Superdifferential jet test followed by `p_t + H >= 0`.
#[allow(clippy::too_many_arguments)]
pub fn subsolution_residual<V: ValueOracle + ?Sized>(
    v: &V,
    dynamics: &ControlledDynamics,
    cost: &CostSpec,
    t: f64,
    x: &TorusPoint,
    mu: &DiscreteMeasure,
    t_end: f64,
    jet: &Jet,
    battery: &JetBattery,
    samples: &[Vec<f64>],
) -> Result<ViscosityCheck> {
    viscosity_check(
        JetSide::Super,
        v,
        dynamics,
        cost,
        t,
        x,
        mu,
        t_end,
        jet,
        battery,
        samples,
    )
}

/// Subdifferential jet test followed by `p_t + H <= 0`.
#[allow(clippy::too_many_arguments)]
pub fn supersolution_residual<V: ValueOracle + ?Sized>(
    v: &V,
    dynamics: &ControlledDynamics,
    cost: &CostSpec,
    t: f64,
    x: &TorusPoint,
    mu: &DiscreteMeasure,
    t_end: f64,
    jet: &Jet,
    battery: &JetBattery,
    samples: &[Vec<f64>],
) -> Result<ViscosityCheck> {
    viscosity_check(
        JetSide::Sub,
        v,
        dynamics,
        cost,
        t,
        x,
        mu,
        t_end,
        jet,
        battery,
        samples,
    )
}

/// `|t - s| + d(x, y) + W_2(mu, nu)`.
pub fn product_distance(
    t: f64,
    x: &TorusPoint,
    mu: &DiscreteMeasure,
    s: f64,
    y: &TorusPoint,
    nu: &DiscreteMeasure,
) -> Result<f64> {
    Ok((t - s).abs() + torus_distance(x, y)? + wasserstein(mu, nu, 2.0)?)
}

#[derive(Debug, Clone)]
pub struct ComparisonProbe {
    pub t: f64,
    pub x: TorusPoint,
    pub mu: DiscreteMeasure,
    pub s: f64,
    pub y: TorusPoint,
    pub nu: DiscreteMeasure,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub lambda: f64,
}

/// Independent random states, `p` in `[-2, 2]^d`, `q` within `1/2` of `p`
/// and `lambda` in `(0, 3)`.
pub fn random_comparison_probes(d: usize, count: usize, seed: u64) -> Result<Vec<ComparisonProbe>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let t = rng.gen::<f64>();
            let s = rng.gen::<f64>();
            let x = TorusPoint::new((0..d).map(|_| rng.gen()).collect())?;
            let y = TorusPoint::new((0..d).map(|_| rng.gen()).collect())?;
            let n1 = rng.gen_range(1..=4);
            let n2 = rng.gen_range(1..=4);
            let mu = DiscreteMeasure::random(&mut rng, n1, d, false)?;
            let nu = DiscreteMeasure::random(&mut rng, n2, d, false)?;
            let p: Vec<f64> = (0..d).map(|_| 4.0 * rng.gen::<f64>() - 2.0).collect();
            let q: Vec<f64> = p.iter().map(|c| c + rng.gen::<f64>() - 0.5).collect();
            let lambda = 3.0 * rng.gen::<f64>() + 1e-3;
            Ok(ComparisonProbe {
                t,
                x,
                mu,
                s,
                y,
                nu,
                p,
                q,
                lambda,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRecord {
    pub index: usize,
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs - rhs`; positive values violate the estimate.
    pub slack: f64,
    pub delta: f64,
    pub w2: f64,
    pub grid_gap: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub dynamics: String,
    pub cost: String,
    pub tolerance: f64,
    pub worst_slack: f64,
    pub max_grid_gap: f64,
    pub violations: usize,
    pub passed: bool,
    pub records: Vec<ComparisonRecord>,
}

/// Evaluates
/// `H(t, x, mu, p, lambda p^pi) - H(s, y, nu, q, lambda p^{pi^-1})
///  <= C D + k D |p| + |v| |p - q| + lambda D W_2(mu, nu)`
/// with `pi` optimal for `W_2`, `C` the running-cost Lipschitz bound, `k` the
/// dynamics Lipschitz bound, `D` the product distance and `v` the leader
/// velocity at the minimizer of the second Hamiltonian.
pub fn hamiltonian_comparison_check(
    dynamics: &ControlledDynamics,
    cost: &CostSpec,
    probes: &[ComparisonProbe],
    samples: &[Vec<f64>],
) -> Result<ComparisonReport> {
    let tolerance = 1e-8;
    let records = probes
        .par_iter()
        .enumerate()
        .map(|(index, pr)| {
            let plan = optimal_plan(&pr.mu, &pr.nu, 2.0)?;
            let w2 = wasserstein(&pr.mu, &pr.nu, 2.0)?;
            let p1 = barycentric_covector(&plan).scaled(pr.lambda);
            let p2 = barycentric_covector(&invert_plan(&plan)).scaled(pr.lambda);
            let h1 = hamiltonian(dynamics, cost, pr.t, &pr.x, &pr.mu, &pr.p, &p1, samples)?;
            let h2 = hamiltonian(dynamics, cost, pr.s, &pr.y, &pr.nu, &pr.q, &p2, samples)?;
            let delta = (pr.t - pr.s).abs() + torus_distance(&pr.x, &pr.y)? + w2;
            let dpq = norm(
                &pr.p
                    .iter()
                    .zip(&pr.q)
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>(),
            );
            let lhs = h1.value - h2.value;
            let rhs = cost.running_lip * delta
                + dynamics.lipschitz * delta * norm(&pr.p)
                + norm(&h2.leader_velocity) * dpq
                + pr.lambda * delta * w2;
            let seed = 0x9a9 + index as u64;
            let grid_gap = sample_grid_gap(
                dynamics, cost, pr.t, &pr.x, &pr.mu, &pr.p, &p1, samples, 256, seed,
            )? + sample_grid_gap(
                dynamics,
                cost,
                pr.s,
                &pr.y,
                &pr.nu,
                &pr.q,
                &p2,
                samples,
                256,
                seed + 1,
            )?;
            let slack = lhs - rhs;
            Ok(ComparisonRecord {
                index,
                lhs,
                rhs,
                slack,
                delta,
                w2,
                grid_gap,
                violated: slack > tolerance + grid_gap,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let worst_slack = records
        .iter()
        .map(|r| r.slack)
        .fold(f64::NEG_INFINITY, f64::max);
    let max_grid_gap = records.iter().map(|r| r.grid_gap).fold(0.0, f64::max);
    let violations = records.iter().filter(|r| r.violated).count();
    Ok(ComparisonReport {
        dynamics: dynamics.name.clone(),
        cost: cost.name.clone(),
        tolerance,
        worst_slack,
        max_grid_gap,
        violations,
        passed: violations == 0,
        records,
    })
}

#[derive(Debug, Clone)]
pub struct ProbeState {
    pub x: TorusPoint,
    pub mu: DiscreteMeasure,
}

/// Value function on a grid of times and probe states.
#[derive(Debug, Clone)]
pub struct ValueTable {
    pub times: Vec<f64>,
    pub horizon: f64,
    pub states: Vec<ProbeState>,
    /// `values[i][j]` at `times[i]`, `states[j]`.
    pub values: Vec<Vec<f64>>,
    pub controls: Vec<Vec<Option<String>>>,
}

impl ValueTable {
    /// Each entry uses `ceil((T - t) / max_step)` solver steps.
    #[allow(clippy::too_many_arguments)]
    pub fn compute(
        cost: &CostSpec,
        dynamics: &ControlledDynamics,
        times: &[f64],
        states: &[ProbeState],
        horizon: f64,
        grid: &[ControlPair],
        max_step: f64,
        options: SolverOptions,
    ) -> Result<Self> {
        if times.is_empty() || states.is_empty() {
            return Err(Error::InvalidArgument(
                "value table needs times and states".into(),
            ));
        }
        if times.iter().any(|&t| !(t <= horizon) || !t.is_finite()) {
            return Err(Error::InvalidArgument(
                "table times must lie before the horizon".into(),
            ));
        }
        if !(max_step > 0.0) {
            return Err(Error::InvalidArgument("max_step must be positive".into()));
        }
        let mut values = Vec::with_capacity(times.len());
        let mut controls = Vec::with_capacity(times.len());
        for &t in times {
            let steps = (((horizon - t) / max_step) - 1e-9).ceil().max(1.0) as usize;
            let row = states
                .par_iter()
                .map(|st| {
                    value_function(
                        cost, dynamics, t, &st.x, &st.mu, horizon, grid, steps, options,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            values.push(row.iter().map(|r| r.value).collect());
            controls.push(row.into_iter().map(|r| r.control).collect());
        }
        Ok(Self {
            times: times.to_vec(),
            horizon,
            states: states.to_vec(),
            values,
            controls,
        })
    }

    pub fn probe_count(&self) -> usize {
        self.times.len() * self.states.len()
    }

    /// JSON with each measure replaced by `mu_ref(state index)`.
    pub fn to_json_value<F: Fn(usize) -> String>(&self, mu_ref: F) -> serde_json::Value {
        serde_json::json!({
            "times": self.times,
            "states": self.states.iter().enumerate().map(|(j, s)| serde_json::json!({
                "x": s.x.coords(),
                "mu": mu_ref(j),
            })).collect::<Vec<_>>(),
            "values": self.values,
            "controls": self.controls,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DoublingReport {
    pub eps: f64,
    pub eta: f64,
    pub lip_v1: f64,
    /// Open interval of admissible `eta` from `4 (eta + Lip)^2 eps < eta`.
    pub eta_range: Option<(f64, f64)>,
    pub eta_conditions_satisfied: bool,
    pub minimizer: (usize, usize),
    pub minimizer_times: (f64, f64),
    pub phi_min: f64,
    pub rho: f64,
    pub rho_bound: f64,
    pub rho_bound_holds: bool,
    pub min_gap: f64,
    pub min_gap_nonnegative: bool,
    pub contradiction_branch: bool,
    pub grid_tol: f64,
}

/// Open interval of `eta` with `4 (eta + l)^2 eps < eta`, if any.
pub fn eta_interval(eps: f64, l: f64) -> Option<(f64, f64)> {
    let disc = 1.0 - 16.0 * eps * l;
    if !(eps > 0.0) || !(disc > 0.0) || eps >= 1.0 {
        return None;
    }
    let b = 1.0 - 8.0 * eps * l;
    let lo = (b - disc.sqrt()) / (8.0 * eps);
    let hi = (b + disc.sqrt()) / (8.0 * eps);
    Some((lo.max(0.0), hi))
}

/// Exhaustive minimization of
/// `V2(t, x, mu) - V1(s, y, nu) + d^2 / (2 eps) - eta s`
/// over all pairs of table probes. When `eta` is not given it is the midpoint
/// of [`eta_interval`]; with no admissible `eta` the search runs with `eta = 0`
/// and the report says so.
pub fn doubling_experiment(
    v1: &ValueTable,
    v2: &ValueTable,
    eps: f64,
    eta: Option<f64>,
    grid_tol: f64,
) -> Result<DoublingReport> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    if v1.times != v2.times || v1.states.len() != v2.states.len() {
        return Err(Error::InvalidArgument(
            "value tables must share their probe set".into(),
        ));
    }
    let np = v1.probe_count();
    if np < 2 {
        return Err(Error::InvalidArgument(
            "doubling needs at least 2 probe states".into(),
        ));
    }
    let ns = v1.states.len();
    let mut w2 = vec![0.0; ns * ns];
    let mut dx = vec![0.0; ns * ns];
    for a in 0..ns {
        for b in a + 1..ns {
            let w = wasserstein(&v1.states[a].mu, &v1.states[b].mu, 2.0)?;
            let x = torus_distance(&v1.states[a].x, &v1.states[b].x)?;
            w2[a * ns + b] = w;
            w2[b * ns + a] = w;
            dx[a * ns + b] = x;
            dx[b * ns + a] = x;
        }
    }
    let time = |p: usize| v1.times[p / ns];
    let dist = |p: usize, r: usize| -> f64 {
        let (a, b) = (p % ns, r % ns);
        (time(p) - time(r)).abs() + dx[a * ns + b] + w2[a * ns + b]
    };
    let val = |t: &ValueTable, p: usize| t.values[p / ns][p % ns];

    let lip_v1 = (0..np)
        .into_par_iter()
        .map(|p| {
            let mut m = 0.0f64;
            for r in p + 1..np {
                let d = dist(p, r);
                if d > 0.0 {
                    m = m.max((val(v1, p) - val(v1, r)).abs() / d);
                }
            }
            m
        })
        .reduce(|| 0.0, f64::max);

    let eta_range = eta_interval(eps, lip_v1);
    let eta_used = eta.unwrap_or_else(|| eta_range.map(|(a, b)| 0.5 * (a + b)).unwrap_or(0.0));
    let min_gap = (0..np)
        .map(|p| val(v2, p) - val(v1, p))
        .fold(f64::INFINITY, f64::min);
    let contradiction_branch = min_gap < -grid_tol;
    let horizon = v1.horizon;
    let mut conditions = eps < 1.0
        && eta_used > 0.0
        && 16.0 * lip_v1 * eps < 1.0
        && 4.0 * (eta_used + lip_v1).powi(2) * eps < eta_used;
    if contradiction_branch {
        let xi = -min_gap;
        conditions &=
            eta_used * horizon <= xi / 4.0 && eps * (eta_used + lip_v1) * lip_v1 <= xi / 2.0;
    }

    let best = (0..np)
        .into_par_iter()
        .map(|p| {
            let mut best = (f64::INFINITY, usize::MAX);
            for r in 0..np {
                let d = dist(p, r);
                let phi = val(v2, p) - val(v1, r) + d * d / (2.0 * eps) - eta_used * time(r);
                if phi < best.0 {
                    best = (phi, p * np + r);
                }
            }
            best
        })
        .reduce(
            || (f64::INFINITY, usize::MAX),
            |a, b| {
                if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) {
                    b
                } else {
                    a
                }
            },
        );
    let (p, r) = (best.1 / np, best.1 % np);
    let rho = dist(p, r);
    let rho_bound = 2.0 * (eta_used + lip_v1) * eps;
    Ok(DoublingReport {
        eps,
        eta: eta_used,
        lip_v1,
        eta_range,
        eta_conditions_satisfied: conditions,
        minimizer: (p, r),
        minimizer_times: (time(p), time(r)),
        phi_min: best.0,
        rho,
        rho_bound,
        rho_bound_holds: rho <= rho_bound + grid_tol,
        min_gap,
        min_gap_nonnegative: min_gap >= -grid_tol,
        contradiction_branch,
        grid_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ControlledDynamics;
    use crate::measure::TestFunction;

    fn pt(c: &[f64]) -> TorusPoint {
        TorusPoint::new(c.to_vec()).unwrap()
    }

    fn zero_ctrl(d: usize) -> ControlAssignment {
        ControlAssignment::Constant(vec![0.0; d])
    }

    fn reach_grid(levels: usize) -> Vec<ControlPair> {
        control_grid(1, levels, &[zero_ctrl(1)]).unwrap()
    }

    fn static_pair() -> DiscreteMeasure {
        DiscreteMeasure::from_coords(&[vec![0.2], vec![0.4]], &[0.5, 0.5]).unwrap()
    }

    #[test]
    fn cost_examples() {
        let dynm = ControlledDynamics::builtin("zero", 1).unwrap();
        let mu = static_pair();
        let sol = solve_leader_follower(
            &dynm,
            &pt(&[0.3]),
            &mu,
            &[0.0],
            &zero_ctrl(1),
            0.0,
            0.7,
            13,
            SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(
            cost_j(&CostSpec::builtin("terminal-one", 1).unwrap(), &sol).unwrap(),
            1.0
        );
        assert_eq!(
            cost_j(&CostSpec::builtin("unit-running", 1).unwrap(), &sol).unwrap(),
            0.7
        );
        let sol = solve_leader_follower(
            &dynm,
            &pt(&[0.3]),
            &mu,
            &[0.0],
            &zero_ctrl(1),
            0.0,
            1.0,
            10,
            SolverOptions::default(),
        )
        .unwrap();
        let m = cost_j(&CostSpec::builtin("moment", 1).unwrap(), &sol).unwrap();
        assert!((m - 0.10).abs() < 1e-15);
    }

    #[test]
    fn reach_value_matches_reachability() {
        let dynm = ControlledDynamics::builtin("reach", 1).unwrap();
        let cost = CostSpec::builtin("reach", 1).unwrap();
        let mu = static_pair();
        let grid = reach_grid(17);
        for (x, h) in [(0.05, 0.2), (0.9, 0.3), (0.45, 0.1), (0.0, 0.4)] {
            let v = value_function(
                &cost,
                &dynm,
                0.0,
                &pt(&[x]),
                &mu,
                h,
                &grid,
                20,
                SolverOptions::default(),
            )
            .unwrap();
            let d: f64 = wrap_scalar(x - 0.5).abs();
            let exact = (d - h).max(0.0).powi(2);
            assert!(
                (v.value - exact).abs() < 1e-12,
                "{x} {h}: {} vs {exact}",
                v.value
            );
            let v2 = value_function(
                &cost,
                &dynm,
                0.0,
                &pt(&[x]),
                &mu,
                2.0 * h,
                &grid,
                20,
                SolverOptions::default(),
            )
            .unwrap();
            assert!(v2.value <= v.value);
        }
    }

    #[test]
    fn terminal_and_monotone() {
        let dynm = ControlledDynamics::builtin("chase", 1).unwrap();
        let cost = CostSpec::builtin("reach", 1).unwrap();
        let mu = static_pair();
        let x = pt(&[0.13]);
        let v = value_function(
            &cost,
            &dynm,
            1.0,
            &x,
            &mu,
            1.0,
            &reach_grid(3),
            10,
            SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(v.value, (cost.terminal)(&x, &mu));
        let small = value_function(
            &cost,
            &dynm,
            0.5,
            &x,
            &mu,
            1.0,
            &reach_grid(3),
            10,
            SolverOptions::default(),
        )
        .unwrap();
        let big = value_function(
            &cost,
            &dynm,
            0.5,
            &x,
            &mu,
            1.0,
            &reach_grid(5),
            10,
            SolverOptions::default(),
        )
        .unwrap();
        assert!(big.value <= small.value);
        assert!(value_function(
            &cost,
            &dynm,
            0.5,
            &x,
            &mu,
            1.0,
            &[],
            10,
            SolverOptions::default()
        )
        .is_err());
    }

    #[test]
    fn dpp_examples() {
        let mu = static_pair();
        let cost = CostSpec::builtin("reach", 1).unwrap();
        let zero = ControlledDynamics::builtin("zero", 1).unwrap();
        let r = dpp_residual(
            &cost,
            &zero,
            0.0,
            &pt(&[0.1]),
            &mu,
            0.5,
            1.0,
            &reach_grid(9),
            10,
            SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(r.residual, 0.0);
        let reach = ControlledDynamics::builtin("reach", 1).unwrap();
        let r9 = dpp_residual(
            &cost,
            &reach,
            0.0,
            &pt(&[0.1]),
            &mu,
            0.1,
            0.3,
            &reach_grid(9),
            12,
            SolverOptions::default(),
        )
        .unwrap();
        let r17 = dpp_residual(
            &cost,
            &reach,
            0.0,
            &pt(&[0.1]),
            &mu,
            0.1,
            0.3,
            &reach_grid(17),
            12,
            SolverOptions::default(),
        )
        .unwrap();
        assert!(r9.residual <= 5e-2);
        assert!(r17.residual <= r9.residual);
    }

    fn covector(mu: &DiscreteMeasure, vals: &[f64]) -> Covector {
        Covector::new(mu.clone(), vals.iter().map(|&v| vec![v]).collect()).unwrap()
    }

    #[test]
    fn hamiltonian_examples() {
        let mu = DiscreteMeasure::from_coords(&[vec![0.1], vec![0.6], vec![0.8]], &[0.2, 0.3, 0.5])
            .unwrap();
        let cost = CostSpec::builtin("attract", 1).unwrap();
        let xi = pt(&[0.3]);
        let samples = default_control_samples(1);
        let l = (cost.running)(&xi, &mu);
        let drift = ControlledDynamics::builtin("drift", 1).unwrap();
        let h0 = hamiltonian(
            &drift,
            &cost,
            0.0,
            &xi,
            &mu,
            &[0.0],
            &Covector::zeros(&mu),
            &samples,
        )
        .unwrap();
        assert_eq!(h0.value, l);
        let pm = covector(&mu, &[0.5, -2.0, 1.0]);
        let h = hamiltonian(&drift, &cost, 0.0, &xi, &mu, &[1.5], &pm, &samples).unwrap();
        let exact = l - 1.5 - (0.2 * 0.5 + 0.3 * 2.0 + 0.5 * 1.0);
        assert!((h.value - exact).abs() < 1e-14);
        let single = ControlledDynamics::builtin("singleton", 1).unwrap();
        let h = hamiltonian(&single, &cost, 0.0, &xi, &mu, &[1.5], &pm, &samples).unwrap();
        let direct = l + 0.3 * 1.5 + (-0.2) * (0.2 * 0.5 + 0.3 * -2.0 + 0.5 * 1.0);
        assert!((h.value - direct).abs() < 1e-14);
        assert!(hamiltonian(&drift, &cost, 0.0, &xi, &mu, &[1.5], &pm, &[]).is_err());
    }

    #[test]
    fn decoupling_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for name in ["meanfield", "chase", "decoupled"] {
            for _ in 0..10 {
                let d = 2;
                let dynm = ControlledDynamics::builtin(name, d).unwrap();
                let cost = CostSpec::builtin("attract", d).unwrap();
                let mu = DiscreteMeasure::random(&mut rng, 3, d, false).unwrap();
                let xi = pt(&[rng.gen(), rng.gen()]);
                let px: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
                let vals = (0..mu.len())
                    .map(|_| vec![rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5])
                    .collect();
                let pm = Covector::new(mu.clone(), vals).unwrap();
                let samples: Vec<Vec<f64>> = (0..5)
                    .map(|_| random_ball_point(&mut rng, d, 1.0))
                    .collect();
                let a = hamiltonian(&dynm, &cost, 0.2, &xi, &mu, &px, &pm, &samples)
                    .unwrap()
                    .value;
                let b = hamiltonian_exhaustive(&dynm, &cost, 0.2, &xi, &mu, &px, &pm, &samples)
                    .unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn hamiltonian_is_concave_in_jets() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dynm = ControlledDynamics::builtin("meanfield", 1).unwrap();
        let cost = CostSpec::builtin("attract", 1).unwrap();
        let samples = default_control_samples(1);
        let mu = DiscreteMeasure::random(&mut rng, 4, 1, false).unwrap();
        let xi = pt(&[0.4]);
        for _ in 0..50 {
            let a: Vec<f64> = (0..5).map(|_| 4.0 * rng.gen::<f64>() - 2.0).collect();
            let b: Vec<f64> = (0..5).map(|_| 4.0 * rng.gen::<f64>() - 2.0).collect();
            let h = |v: &[f64]| {
                hamiltonian(
                    &dynm,
                    &cost,
                    0.0,
                    &xi,
                    &mu,
                    &[v[0]],
                    &covector(&mu, &v[1..]),
                    &samples,
                )
                .unwrap()
                .value
            };
            let mid: Vec<f64> = a.iter().zip(&b).map(|(p, q)| 0.5 * (p + q)).collect();
            assert!(h(&mid) >= 0.5 * h(&a) + 0.5 * h(&b) - 1e-9);
        }
    }

    struct Affine {
        t0: f64,
        x0: Vec<f64>,
        p_t: f64,
        p_x: Vec<f64>,
        phi: TestFunction,
    }

    impl ValueOracle for Affine {
        fn value(&self, t: f64, x: &TorusPoint, mu: &DiscreteMeasure) -> Result<f64> {
            let dx: Vec<f64> = x
                .coords()
                .iter()
                .zip(&self.x0)
                .map(|(a, b)| wrap_scalar(a - b))
                .collect();
            Ok(self.p_t * (t - self.t0)
                + dot(&self.p_x, &dx)
                + mu.integrate(|y| self.phi.eval(y.coords())))
        }
    }

    #[test]
    fn jets_of_smooth_functions() {
        let mu = DiscreteMeasure::from_coords(&[vec![0.1], vec![0.6], vec![0.8]], &[0.2, 0.3, 0.5])
            .unwrap();
        let phi = TestFunction::normalized(vec![1], vec![true]).unwrap();
        let grad = Covector::from_fn(&mu, |x| phi.gradient(x.coords())).unwrap();
        let single = ControlledDynamics::builtin("singleton", 1).unwrap();
        let cost = CostSpec::builtin("attract", 1).unwrap();
        let xi = pt(&[0.3]);
        let samples = default_control_samples(1);
        let battery = JetBattery::standard(&mu, 11).unwrap();
        let p_x = vec![0.7];
        let l = (cost.running)(&xi, &mu);
        let mut p_t = l + 0.3 * p_x[0];
        for ((_, w), p) in mu.iter().zip(grad.values()) {
            p_t += w * (-0.2 * p[0]);
        }
        let p_t = -p_t;
        let v = Affine {
            t0: 0.2,
            x0: xi.coords().to_vec(),
            p_t,
            p_x: p_x.clone(),
            phi,
        };
        let jet = Jet {
            p_t,
            p_x: p_x.clone(),
            p_mu: grad.clone(),
        };
        let sup = supersolution_residual(
            &v, &single, &cost, 0.2, &xi, &mu, 1.0, &jet, &battery, &samples,
        )
        .unwrap();
        assert!(sup.jet.valid, "{}", sup.jet.extreme);
        assert_eq!(sup.residual, Some(0.0));
        let sub = subsolution_residual(
            &v, &single, &cost, 0.2, &xi, &mu, 1.0, &jet, &battery, &samples,
        )
        .unwrap();
        assert!(sub.jet.valid && sub.satisfied);

        // a jet with the wrong measure component fails the membership test
        let wrong = Jet {
            p_t,
            p_x,
            p_mu: grad.scaled(-1.0),
        };
        let bad = supersolution_residual(
            &v, &single, &cost, 0.2, &xi, &mu, 1.0, &wrong, &battery, &samples,
        )
        .unwrap();
        assert!(!bad.jet.valid);
        assert_eq!(bad.residual, None);
        assert!(subsolution_residual(
            &v, &single, &cost, 1.0, &xi, &mu, 1.0, &jet, &battery, &samples
        )
        .is_err());
    }

    #[test]
    fn constant_value_zero_jet() {
        let mu = static_pair();
        let dynm = ControlledDynamics::builtin("drift", 1).unwrap();
        let cost = CostSpec::builtin("unit-running", 1).unwrap();
        let v = |_: f64, _: &TorusPoint, _: &DiscreteMeasure| Ok(3.0);
        let jet = Jet {
            p_t: 0.0,
            p_x: vec![0.0],
            p_mu: Covector::zeros(&mu),
        };
        let battery = JetBattery::standard(&mu, 1).unwrap();
        let r = subsolution_residual(
            &v,
            &dynm,
            &cost,
            0.1,
            &pt(&[0.5]),
            &mu,
            1.0,
            &jet,
            &battery,
            &default_control_samples(1),
        )
        .unwrap();
        assert_eq!(r.residual, Some(1.0));
        assert!(r.satisfied);
        let zero = CostSpec::builtin("zero", 1).unwrap();
        let r = supersolution_residual(
            &v,
            &dynm,
            &zero,
            0.1,
            &pt(&[0.5]),
            &mu,
            1.0,
            &jet,
            &battery,
            &default_control_samples(1),
        )
        .unwrap();
        assert_eq!(r.residual, Some(0.0));
    }

    #[test]
    fn comparison_identical_probes() {
        let mu = DiscreteMeasure::from_coords(&[vec![0.1], vec![0.6]], &[0.4, 0.6]).unwrap();
        let probe = ComparisonProbe {
            t: 0.3,
            x: pt(&[0.2]),
            mu: mu.clone(),
            s: 0.3,
            y: pt(&[0.2]),
            nu: mu,
            p: vec![0.4],
            q: vec![0.4],
            lambda: 1.3,
        };
        let dynm = ControlledDynamics::builtin("meanfield", 1).unwrap();
        let cost = CostSpec::builtin("attract", 1).unwrap();
        let rep = hamiltonian_comparison_check(&dynm, &cost, &[probe], &default_control_samples(1))
            .unwrap();
        assert_eq!(rep.records[0].lhs, 0.0);
        assert_eq!(rep.records[0].rhs, 0.0);
        assert!(rep.passed);
    }

    #[test]
    fn comparison_estimate_fails_for_split_crowds() {
        // a point mass against two atoms at distance delta: the left side is
        // lambda * delta while the right side is lambda * delta^2
        let delta = 0.1;
        let probe = ComparisonProbe {
            t: 0.5,
            x: pt(&[0.5]),
            mu: DiscreteMeasure::dirac(pt(&[0.5])),
            s: 0.5,
            y: pt(&[0.5]),
            nu: DiscreteMeasure::from_coords(&[vec![0.5 - delta], vec![0.5 + delta]], &[0.5, 0.5])
                .unwrap(),
            p: vec![0.0],
            q: vec![0.0],
            lambda: 1.0,
        };
        let dynm = ControlledDynamics::builtin("drift", 1).unwrap();
        let cost = CostSpec::builtin("zero", 1).unwrap();
        let rep = hamiltonian_comparison_check(&dynm, &cost, &[probe], &default_control_samples(1))
            .unwrap();
        let rec = &rep.records[0];
        assert!((rec.lhs - delta).abs() < 1e-12, "{rec:?}");
        assert!((rec.rhs - delta * delta).abs() < 1e-12, "{rec:?}");
        assert!(!rep.passed);
    }

    #[test]
    fn doubling_examples() {
        let states: Vec<ProbeState> = [0.3, 0.5, 0.6]
            .iter()
            .map(|&x| ProbeState {
                x: pt(&[x]),
                mu: static_pair(),
            })
            .collect();
        let table = |shift: f64| ValueTable {
            times: vec![0.0, 0.5, 1.0],
            horizon: 1.0,
            states: states.clone(),
            values: vec![vec![2.0 + shift; 3]; 3],
            controls: vec![vec![None; 3]; 3],
        };
        let r = doubling_experiment(&table(0.0), &table(0.0), 0.1, None, 1e-12).unwrap();
        assert_eq!(r.rho, 0.0);
        assert_eq!(r.minimizer.0 % 3, r.minimizer.1 % 3);
        assert!(r.eta_conditions_satisfied && r.rho_bound_holds);
        let r = doubling_experiment(&table(0.0), &table(1.0), 0.1, None, 1e-12).unwrap();
        assert_eq!(r.min_gap, 1.0);
        assert!(!r.contradiction_branch);
        let mut tiny = table(0.0);
        tiny.times = vec![0.0];
        tiny.states.truncate(1);
        tiny.values = vec![vec![0.0]];
        assert!(doubling_experiment(&tiny, &tiny, 0.1, None, 1e-12).is_err());
    }

    #[test]
    fn eta_interval_matches_condition() {
        let (lo, hi) = eta_interval(0.1, 0.5).unwrap();
        let mid = 0.5 * (lo + hi);
        assert!(4.0 * (mid + 0.5f64).powi(2) * 0.1 < mid);
        assert!(eta_interval(0.2, 0.5).is_none());
    }

    #[test]
    fn cost_bounds_hold() {
        for name in ["reach", "moment", "attract", "terminal-one", "unit-running"] {
            assert!(
                CostSpec::builtin(name, 2)
                    .unwrap()
                    .audit_bounds(2, 200, 1)
                    .unwrap()
                    <= 1.0,
                "{name}"
            );
        }
    }
}
