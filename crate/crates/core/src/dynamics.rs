//! The coupled leader-follower system
//!
//! ```text
//! xi'(t)  = f(t, xi, mu_t, u0)
//! x'(t)   = g(t, x, xi, mu_t, ubar(x(t0)))     for every follower x
//! ```
//!
//! solved by Picard iteration on windows short enough for the iteration map
//! to contract, with fixed-step RK4 on lifted coordinates.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure::{
    check_dim, dot, norm, wrap_delta, wrap_scalar, DiscreteMeasure, TestFunction, TorusPoint,
};
use crate::variations::TrajectoryEnsemble;

/// `f(t, x, mu, u)`; positions are lifts, the map is periodic in them.
pub type LeaderFn = Arc<dyn Fn(f64, &[f64], &DiscreteMeasure, &[f64]) -> Vec<f64> + Send + Sync>;
/// `g(t, x, leader, mu, u)`.
pub type FollowerFn =
    Arc<dyn Fn(f64, &[f64], &[f64], &DiscreteMeasure, &[f64]) -> Vec<f64> + Send + Sync>;

/// Parameterized dynamics over the closed unit control ball.
#[derive(Clone)]
pub struct ControlledDynamics {
    pub name: String,
    pub dim: usize,
    /// Lipschitz constant in the state, leader and `W_2` arguments.
    pub lipschitz: f64,
    /// Lipschitz constant in the control.
    pub param_constant: f64,
    pub leader: LeaderFn,
    pub follower: FollowerFn,
}

impl fmt::Debug for ControlledDynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlledDynamics")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

/// `int sin(2 pi (y - x)) / (2 pi) dmu(y)`, coordinatewise.
fn mean_pull(x: &[f64], mu: &DiscreteMeasure) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (y, w) in mu.iter() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += w * (2.0 * PI * (y.coords()[c] - x[c])).sin() / (2.0 * PI);
        }
    }
    out
}

impl ControlledDynamics {
    /// Named dynamics:
    ///
    /// - `zero`: everything at rest.
    /// - `drift`: `f = u`, `g = u`.
    /// - `reach`: `f = u`, `g = 0`.
    /// - `chase`: `f = u`, `g = wrap(xi - x)`; 1-Lipschitz away from the set
    ///   where leader and follower are antipodal.
    /// - `decoupled`: state-only drifts plus half the control, no coupling.
    /// - `meanfield`: leader and followers pulled towards the crowd, followers
    ///   also towards the leader.
    /// - `singleton`: constant velocities `f = 0.3 e_1`, `g = -0.2 e_1`.
    pub fn builtin(name: &str, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        let (lipschitz, param_constant, leader, follower): (f64, f64, LeaderFn, FollowerFn) =
            match name {
                "zero" => (
                    0.0,
                    0.0,
                    Arc::new(move |_, _, _, _| vec![0.0; d]),
                    Arc::new(move |_, _, _, _, _| vec![0.0; d]),
                ),
                "drift" => (
                    0.0,
                    1.0,
                    Arc::new(|_, _, _, u| u.to_vec()),
                    Arc::new(|_, _, _, _, u| u.to_vec()),
                ),
                "reach" => (
                    0.0,
                    1.0,
                    Arc::new(|_, _, _, u| u.to_vec()),
                    Arc::new(move |_, _, _, _, _| vec![0.0; d]),
                ),
                "chase" => (
                    1.0,
                    1.0,
                    Arc::new(|_, _, _, u| u.to_vec()),
                    Arc::new(|_, x, xi, _, _| {
                        x.iter().zip(xi).map(|(a, b)| wrap_scalar(b - a)).collect()
                    }),
                ),
                "decoupled" => (
                    2.0,
                    0.5,
                    Arc::new(|_, x, _, u| {
                        x.iter()
                            .zip(u)
                            .map(|(a, b)| 0.3 * (2.0 * PI * a).sin() / (2.0 * PI) + 0.5 * b)
                            .collect()
                    }),
                    Arc::new(|t, x, _, _, u| {
                        x.iter()
                            .zip(u)
                            .map(|(a, b)| 0.3 * (2.0 * PI * a + t).cos() + 0.5 * b)
                            .collect()
                    }),
                ),
                "meanfield" => (
                    1.0,
                    0.5,
                    Arc::new(|_, x, mu, u| {
                        let k = mean_pull(x, mu);
                        k.iter().zip(u).map(|(a, b)| 0.5 * a + 0.5 * b).collect()
                    }),
                    Arc::new(|_, x, xi, mu, u| {
                        let k = mean_pull(x, mu);
                        (0..x.len())
                            .map(|c| {
                                0.25 * (2.0 * PI * (xi[c] - x[c])).sin() / (2.0 * PI)
                                    + 0.25 * k[c]
                                    + 0.5 * u[c]
                            })
                            .collect()
                    }),
                ),
                "singleton" => (
                    0.0,
                    0.0,
                    Arc::new(move |_, _, _, _| {
                        let mut a = vec![0.0; d];
                        a[0] = 0.3;
                        a
                    }),
                    Arc::new(move |_, _, _, _, _| {
                        let mut b = vec![0.0; d];
                        b[0] = -0.2;
                        b
                    }),
                ),
                other => return Err(Error::UnknownBuiltin(other.to_string())),
            };
        Ok(Self {
            name: name.to_string(),
            dim: d,
            lipschitz,
            param_constant,
            leader,
            follower,
        })
    }

    /// Largest finite-difference Lipschitz ratio of `f` and `g` over random
    /// pairs, relative to the declared constant. Values above 1.05 are logged.
    pub fn lipschitz_audit(&self, samples: usize, seed: u64) -> f64 {
        let d = self.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let x: Vec<f64> = (0..d).map(|_| rng.gen()).collect();
            let y: Vec<f64> = x
                .iter()
                .map(|c| c + 0.05 * (rng.gen::<f64>() - 0.5))
                .collect();
            let xi: Vec<f64> = (0..d).map(|_| rng.gen()).collect();
            let u: Vec<f64> = random_ball_point(&mut rng, d, 1.0);
            let mu = DiscreteMeasure::random(&mut rng, 3, d, true).expect("valid");
            let dist = norm(&wrap_delta(&x, &y));
            if dist == 0.0 {
                continue;
            }
            let df = norm(&sub(
                &(self.leader)(0.0, &x, &mu, &u),
                &(self.leader)(0.0, &y, &mu, &u),
            ));
            let dg = norm(&sub(
                &(self.follower)(0.0, &x, &xi, &mu, &u),
                &(self.follower)(0.0, &y, &xi, &mu, &u),
            ));
            worst = worst.max(df.max(dg) / dist);
        }
        let rel = if self.lipschitz > 0.0 {
            worst / self.lipschitz
        } else if worst > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        if rel > 1.05 {
            log::warn!(
                "dynamics `{}`: sampled Lipschitz ratio {worst:.4} exceeds declared {}",
                self.name,
                self.lipschitz
            );
        }
        rel
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub(crate) fn random_ball_point<R: Rng + ?Sized>(rng: &mut R, d: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect();
        if norm(&v) <= 1.0 {
            return v.into_iter().map(|c| c * radius).collect();
        }
    }
}

/// Follower control as a function of the initial position.
#[derive(Clone)]
pub enum ControlAssignment {
    Constant(Vec<f64>),
    PerAtom(Vec<Vec<f64>>),
    Field(String, Arc<dyn Fn(&TorusPoint) -> Vec<f64> + Send + Sync>),
}

impl fmt::Debug for ControlAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlAssignment::Constant(v) => write!(f, "Constant({v:?})"),
            ControlAssignment::PerAtom(v) => write!(f, "PerAtom({} atoms)", v.len()),
            ControlAssignment::Field(name, _) => write!(f, "Field({name})"),
        }
    }
}

impl ControlAssignment {
    /// `constant:<c1>,<c2>,...`, or a field: `zero`, `center` (towards
    /// the point with all coordinates 1/2, saturating at unit speed),
    /// `outward` (the opposite).
    pub fn parse(spec: &str, d: usize) -> Result<Self> {
        if let Some(rest) = spec.strip_prefix("constant:") {
            return Ok(ControlAssignment::Constant(parse_vector(rest, d)?));
        }
        let name = spec.strip_prefix("field:").unwrap_or(spec);
        let sign = match name {
            "zero" => return Ok(ControlAssignment::Constant(vec![0.0; d])),
            "center" => 1.0,
            "outward" => -1.0,
            other => return Err(Error::UnknownBuiltin(other.to_string())),
        };
        Ok(ControlAssignment::Field(
            name.to_string(),
            Arc::new(move |x: &TorusPoint| {
                let v: Vec<f64> = x
                    .coords()
                    .iter()
                    .map(|c| sign * 4.0 * wrap_scalar(0.5 - c))
                    .collect();
                clip_to_ball(v)
            }),
        ))
    }

    pub fn label(&self) -> String {
        match self {
            ControlAssignment::Constant(v) => {
                format!(
                    "constant:{}",
                    v.iter()
                        .map(|c| format!("{c}"))
                        .collect::<Vec<_>>()
                        .join(",")
                )
            }
            ControlAssignment::PerAtom(_) => "per-atom".to_string(),
            ControlAssignment::Field(name, _) => format!("field:{name}"),
        }
    }

    /// Control of each atom of `mu`.
    pub fn resolve(&self, mu: &DiscreteMeasure) -> Result<Vec<Vec<f64>>> {
        let out = match self {
            ControlAssignment::Constant(v) => vec![v.clone(); mu.len()],
            ControlAssignment::PerAtom(v) => {
                if v.len() != mu.len() {
                    return Err(Error::DimensionMismatch {
                        expected: mu.len(),
                        found: v.len(),
                    });
                }
                v.clone()
            }
            ControlAssignment::Field(_, f) => mu.points().iter().map(|p| f(p)).collect(),
        };
        for u in &out {
            check_control(u, mu.dim())?;
        }
        Ok(out)
    }
}

fn clip_to_ball(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 1.0 {
        v.into_iter().map(|c| c / n).collect()
    } else {
        v
    }
}

pub fn parse_vector(s: &str, d: usize) -> Result<Vec<f64>> {
    let v = s
        .split(',')
        .map(|c| {
            c.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad number in `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let v = if v.len() == 1 && d > 1 {
        vec![v[0]; d]
    } else {
        v
    };
    check_dim(d, v.len())?;
    Ok(v)
}

pub(crate) fn check_control(u: &[f64], d: usize) -> Result<()> {
    check_dim(d, u.len())?;
    if u.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("control".into()));
    }
    if norm(u) > 1.0 + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "control {u:?} lies outside the unit ball"
        )));
    }
    Ok(())
}

/// `alpha^2 = 2 L^2 tau^2 e^{2 L tau} (tau + 2)^2`.
pub fn contraction_alpha(l: f64, tau: f64) -> f64 {
    (2.0 * l * l * tau * tau * (2.0 * l * tau).exp() * (tau + 2.0).powi(2)).sqrt()
}

/// Largest `tau` with `alpha^2 < 1/2`, by bisection to `1e-10`.
pub fn max_contraction_horizon(l: f64) -> Result<f64> {
    if !(l > 0.0) || !l.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "Lipschitz constant must be positive, got {l}"
        )));
    }
    let g = |tau: f64| 2.0 * l * l * tau * tau * (2.0 * l * tau).exp() * (tau + 2.0).powi(2);
    let mut lo = 0.0;
    let mut hi = 1.0;
    while g(hi) < 0.5 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e15 {
            return Ok(lo);
        }
    }
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iterations: usize,
    /// Force this many steps per window instead of the contraction horizon.
    pub steps_per_window: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iterations: 60,
            steps_per_window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub window: usize,
    pub iteration: usize,
    /// `(||w_k - w_{k-1}||_inf^2 + sum_j m_j ||x_j^k - x_j^{k-1}||_inf^2)^{1/2}`.
    pub residual: f64,
    /// Residual over the previous residual; absent for the first iteration.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LeaderFollowerSolution {
    pub times: Vec<f64>,
    /// Lifted leader positions.
    pub leader: Vec<Vec<f64>>,
    /// Leader velocities at the nodes.
    pub leader_velocity: Vec<Vec<f64>>,
    pub followers: TrajectoryEnsemble,
    pub u0: Vec<f64>,
    pub controls: Vec<Vec<f64>>,
    pub windows: Vec<(f64, f64)>,
    pub log: Vec<IterationRecord>,
}

impl LeaderFollowerSolution {
    pub fn measure_at_node(&self, i: usize) -> Result<DiscreteMeasure> {
        self.followers.node_marginal(i)
    }

    pub fn leader_point(&self, i: usize) -> Result<TorusPoint> {
        TorusPoint::from_lift(&self.leader[i])
    }

    pub fn iterations(&self) -> usize {
        self.log.len()
    }
}

fn measure_of(points: &[Vec<f64>], weights: &[f64]) -> Result<DiscreteMeasure> {
    let pts = points
        .iter()
        .map(|p| TorusPoint::from_lift(p))
        .collect::<Result<Vec<_>>>()?;
    DiscreteMeasure::new(pts, weights.to_vec())
}

fn lerp(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

fn finite(v: Vec<f64>, what: &str, t: f64) -> Result<Vec<f64>> {
    if v.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite(format!("{what} at t = {t}")));
    }
    Ok(v)
}

/// One RK4 step for `x' = h(t, x)`.
fn rk4<F: Fn(f64, &[f64], usize) -> Result<Vec<f64>>>(
    t: f64,
    dt: f64,
    x: &[f64],
    stage: F,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let axpy =
        |a: f64, k: &[f64]| -> Vec<f64> { x.iter().zip(k).map(|(p, q)| p + a * q).collect() };
    let k1 = stage(t, x, 0)?;
    let k2 = stage(t + dt / 2.0, &axpy(dt / 2.0, &k1), 1)?;
    let k3 = stage(t + dt / 2.0, &axpy(dt / 2.0, &k2), 1)?;
    let k4 = stage(t + dt, &axpy(dt, &k3), 2)?;
    let next = (0..x.len())
        .map(|c| x[c] + dt / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]))
        .collect();
    Ok((next, k1))
}

#[allow(clippy::too_many_arguments)]
pub fn solve_leader_follower(
    dynamics: &ControlledDynamics,
    leader_start: &TorusPoint,
    mu0: &DiscreteMeasure,
    u0: &[f64],
    ubar: &ControlAssignment,
    t0: f64,
    t_end: f64,
    steps: usize,
    options: SolverOptions,
) -> Result<LeaderFollowerSolution> {
    let d = dynamics.dim;
    check_dim(d, leader_start.dim())?;
    check_dim(d, mu0.dim())?;
    check_control(u0, d)?;
    if !(t_end > t0) || !t0.is_finite() || !t_end.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "need t0 < T, got [{t0}, {t_end}]"
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("need at least one time step".into()));
    }
    if !(options.tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let controls = ubar.resolve(mu0)?;
    let weights = mu0.weights().to_vec();
    let n = mu0.len();
    let dt = (t_end - t0) / steps as f64;
    let times: Vec<f64> = (0..=steps)
        .map(|i| {
            if i == steps {
                t_end
            } else {
                t0 + i as f64 * dt
            }
        })
        .collect();

    let per_window = match options.steps_per_window {
        Some(k) if k > 0 => k,
        Some(_) => {
            return Err(Error::InvalidArgument(
                "steps per window must be positive".into(),
            ))
        }
        None if dynamics.lipschitz > 0.0 => {
            let tau = max_contraction_horizon(dynamics.lipschitz)?;
            ((tau / dt).floor() as usize).max(1)
        }
        None => steps,
    };
    if options.steps_per_window.is_none() && dynamics.lipschitz > 0.0 {
        let tau = max_contraction_horizon(dynamics.lipschitz)?;
        if dt > tau {
            log::warn!(
                "time step {dt} exceeds the contraction horizon {tau}; windows are one step long"
            );
        }
    }

    let mut leader: Vec<Vec<f64>> = vec![leader_start.coords().to_vec()];
    // followers[k][i]
    let mut followers: Vec<Vec<Vec<f64>>> = mu0
        .points()
        .iter()
        .map(|p| vec![p.coords().to_vec()])
        .collect();
    let mut windows = Vec::new();
    let mut log = Vec::new();

    let mut start = 0usize;
    let mut window = 0usize;
    while start < steps {
        let end = (start + per_window).min(steps);
        let len = end - start;
        windows.push((times[start], times[end]));
        // initial guess: everything frozen at the window start
        let mut w: Vec<Vec<f64>> = vec![leader[start].clone(); len + 1];
        let mut xs: Vec<Vec<Vec<f64>>> = followers
            .iter()
            .map(|p| vec![p[start].clone(); len + 1])
            .collect();
        let mut prev_res: Option<f64> = None;
        let mut over = 0usize;
        let mut history = Vec::new();
        let mut converged = false;
        for iteration in 1..=options.max_iterations {
            // frozen data of the previous iterate at nodes and midpoints
            let node_mu = (0..=len)
                .map(|i| {
                    measure_of(
                        &xs.iter().map(|p| p[i].clone()).collect::<Vec<_>>(),
                        &weights,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let mid_mu = (0..len)
                .map(|i| {
                    measure_of(
                        &xs.iter()
                            .map(|p| lerp(&p[i], &p[i + 1]))
                            .collect::<Vec<_>>(),
                        &weights,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let mid_w: Vec<Vec<f64>> = (0..len).map(|i| lerp(&w[i], &w[i + 1])).collect();

            let mut new_w = Vec::with_capacity(len + 1);
            new_w.push(leader[start].clone());
            for i in 0..len {
                let t = times[start + i];
                let (next, _) = rk4(t, dt, &new_w[i], |s, x, stage| {
                    let mu = match stage {
                        0 => &node_mu[i],
                        1 => &mid_mu[i],
                        _ => &node_mu[i + 1],
                    };
                    finite((dynamics.leader)(s, x, mu, u0), "leader velocity", s)
                })?;
                new_w.push(next);
            }
            let new_xs = (0..n)
                .into_par_iter()
                .map(|k| {
                    let mut path = Vec::with_capacity(len + 1);
                    path.push(followers[k][start].clone());
                    for i in 0..len {
                        let t = times[start + i];
                        let (next, _) = rk4(t, dt, &path[i], |s, x, stage| {
                            let (xi, mu) = match stage {
                                0 => (&w[i], &node_mu[i]),
                                1 => (&mid_w[i], &mid_mu[i]),
                                _ => (&w[i + 1], &node_mu[i + 1]),
                            };
                            finite(
                                (dynamics.follower)(s, x, xi, mu, &controls[k]),
                                "follower velocity",
                                s,
                            )
                        })?;
                        path.push(next);
                    }
                    Ok(path)
                })
                .collect::<Result<Vec<_>>>()?;

            let sup = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
                a.iter()
                    .zip(b)
                    .map(|(p, q)| norm(&sub(p, q)))
                    .fold(0.0, f64::max)
            };
            let lead = sup(&new_w, &w);
            let crowd: f64 = (0..n)
                .map(|k| weights[k] * sup(&new_xs[k], &xs[k]).powi(2))
                .sum();
            let residual = (lead * lead + crowd).sqrt();
            let ratio = prev_res.map(|p| if p > 0.0 { residual / p } else { 0.0 });
            log.push(IterationRecord {
                window,
                iteration,
                residual,
                ratio,
            });
            history.push(residual);
            w = new_w;
            xs = new_xs;
            if residual < options.tol {
                converged = true;
                break;
            }
            if ratio.is_some_and(|r| r > 0.99) {
                over += 1;
            } else {
                over = 0;
            }
            if over >= 5 {
                return Err(Error::NonContraction {
                    start: times[start],
                    end: times[end],
                    iterations: iteration,
                    reason: "update ratio above 0.99 for 5 consecutive iterations".into(),
                    residuals: history,
                });
            }
            prev_res = Some(residual);
        }
        if !converged {
            return Err(Error::NonContraction {
                start: times[start],
                end: times[end],
                iterations: options.max_iterations,
                reason: format!("tolerance {} not reached", options.tol),
                residuals: history,
            });
        }
        leader.extend(w.into_iter().skip(1));
        for (k, path) in xs.into_iter().enumerate() {
            followers[k].extend(path.into_iter().skip(1));
        }
        start = end;
        window += 1;
    }

    // velocities of the converged paths at the nodes
    let node_mu = (0..=steps)
        .map(|i| {
            measure_of(
                &followers.iter().map(|p| p[i].clone()).collect::<Vec<_>>(),
                &weights,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let leader_velocity = (0..=steps)
        .map(|i| {
            finite(
                (dynamics.leader)(times[i], &leader[i], &node_mu[i], u0),
                "leader velocity",
                times[i],
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let follower_velocity = (0..n)
        .map(|k| {
            (0..=steps)
                .map(|i| {
                    finite(
                        (dynamics.follower)(
                            times[i],
                            &followers[k][i],
                            &leader[i],
                            &node_mu[i],
                            &controls[k],
                        ),
                        "follower velocity",
                        times[i],
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let ensemble = TrajectoryEnsemble::with_velocities(
        mu0.clone(),
        times.clone(),
        followers,
        follower_velocity,
    )?;
    Ok(LeaderFollowerSolution {
        times,
        leader,
        leader_velocity,
        followers: ensemble,
        u0: u0.to_vec(),
        controls,
        windows,
        log,
    })
}

/// Max over test functions and check nodes of
/// `|int phi dmu_t - int phi dmu_{t0} - int_{t0}^t sum_k m_k <grad phi(x_k), x_k'> ds|`,
/// the time integral by the trapezoidal rule on the solver nodes. Check nodes
/// are every `stride`-th node.
pub fn continuity_residual(
    ensemble: &TrajectoryEnsemble,
    testset: &[TestFunction],
    stride: usize,
) -> Result<f64> {
    let vel = ensemble
        .velocities()
        .ok_or_else(|| Error::InvalidArgument("ensemble carries no velocity samples".into()))?;
    if testset.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let times = ensemble.times();
    let paths = ensemble.paths();
    let weights = ensemble.base().weights();
    let mut worst = 0.0f64;
    for phi in testset {
        let mass = |i: usize| -> f64 {
            (0..paths.len())
                .map(|k| weights[k] * phi.eval(&paths[k][i]))
                .sum()
        };
        let flux = |i: usize| -> f64 {
            (0..paths.len())
                .map(|k| weights[k] * dot(&phi.gradient(&paths[k][i]), &vel[k][i]))
                .sum()
        };
        let f0 = mass(0);
        let mut integral = 0.0;
        let mut g_prev = flux(0);
        for i in 1..times.len() {
            let g = flux(i);
            integral += 0.5 * (times[i] - times[i - 1]) * (g + g_prev);
            g_prev = g;
            if i % stride == 0 || i == times.len() - 1 {
                worst = worst.max((mass(i) - f0 - integral).abs());
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize)]
pub struct FilippovReport {
    pub dt: f64,
    /// `|(xi(t0 + dt) - xi(t0)) / dt - f(t0, xbar, mubar, u0)|`.
    pub leader_error: f64,
    /// Max over followers of the same quantity for `g`.
    pub follower_max_error: f64,
}

/// Compare forward difference quotients at the first node with the
/// prescribed initial velocities.
pub fn filippov_initial_velocity_check(
    sol: &LeaderFollowerSolution,
    dynamics: &ControlledDynamics,
) -> Result<FilippovReport> {
    let dt = sol.times[1] - sol.times[0];
    let t0 = sol.times[0];
    let mu0 = sol.followers.base();
    let x0 = &sol.leader[0];
    let v0 = (dynamics.leader)(t0, x0, mu0, &sol.u0);
    let q =
        |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, r)| (p - r) / dt).collect() };
    let leader_error = norm(&sub(&q(&sol.leader[1], x0), &v0));
    let mut follower_max_error = 0.0f64;
    for (k, path) in sol.followers.paths().iter().enumerate() {
        let v = (dynamics.follower)(t0, &path[0], x0, mu0, &sol.controls[k]);
        follower_max_error = follower_max_error.max(norm(&sub(&q(&path[1], &path[0]), &v)));
    }
    Ok(FilippovReport {
        dt,
        leader_error,
        follower_max_error,
    })
}
