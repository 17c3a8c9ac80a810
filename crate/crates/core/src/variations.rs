//! Families of plans `t -> pi_t` issued from a fixed base measure, and the
//! numerical admissibility check.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure::{bounded_lipschitz_gap, check_dim, DiscreteMeasure, TestFunction, TorusPoint};
use crate::transport::{
    compose_plans, mix_plans, optimal_plan, plan_cost, Covector, TransportPlan,
};

/// Time-dependent velocity field on the torus.
pub type VelocityField = Arc<dyn Fn(f64, &TorusPoint) -> Vec<f64> + Send + Sync>;

/// Builds the correcting plan of a perturbed family from `t` and the
/// second marginal of the unperturbed plan.
pub type HatFamily = Arc<dyn Fn(f64, &DiscreteMeasure) -> Result<TransportPlan> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    TransportMap,
    Flat,
    Lagrangian,
    Eulerian,
    Perturbed,
    Mixture,
}

impl FamilyKind {
    /// The four elementary constructions.
    pub const ELEMENTARY: [FamilyKind; 4] = [
        FamilyKind::TransportMap,
        FamilyKind::Flat,
        FamilyKind::Lagrangian,
        FamilyKind::Eulerian,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FamilyKind::TransportMap => "map",
            FamilyKind::Flat => "flat",
            FamilyKind::Lagrangian => "lagrangian",
            FamilyKind::Eulerian => "eulerian",
            FamilyKind::Perturbed => "perturbed",
            FamilyKind::Mixture => "mixture",
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "map" | "transport_map" => Ok(FamilyKind::TransportMap),
            "flat" => Ok(FamilyKind::Flat),
            "lagrangian" => Ok(FamilyKind::Lagrangian),
            "eulerian" => Ok(FamilyKind::Eulerian),
            other => Err(Error::UnknownBuiltin(other.to_string())),
        }
    }
}

/// Weighted time-sampled paths, one per atom of `base`, in lifted coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    base: DiscreteMeasure,
    times: Vec<f64>,
    // [atom][time][dim]
    paths: Vec<Vec<Vec<f64>>>,
    velocities: Option<Vec<Vec<Vec<f64>>>>,
}

impl TrajectoryEnsemble {
    pub fn new(base: DiscreteMeasure, times: Vec<f64>, paths: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        Self::build(base, times, paths, None)
    }

    /// Ensemble that also records the velocity of each path at each node.
    pub fn with_velocities(
        base: DiscreteMeasure,
        times: Vec<f64>,
        paths: Vec<Vec<Vec<f64>>>,
        velocities: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        Self::build(base, times, paths, Some(velocities))
    }

    fn build(
        base: DiscreteMeasure,
        times: Vec<f64>,
        paths: Vec<Vec<Vec<f64>>>,
        velocities: Option<Vec<Vec<Vec<f64>>>>,
    ) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidArgument(
                "a trajectory needs at least two time nodes".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument(
                "time grid must be finite and strictly increasing".into(),
            ));
        }
        if paths.len() != base.len() {
            return Err(Error::DimensionMismatch {
                expected: base.len(),
                found: paths.len(),
            });
        }
        let d = base.dim();
        for (path, x) in paths.iter().zip(base.points()) {
            if path.len() != times.len() {
                return Err(Error::DimensionMismatch {
                    expected: times.len(),
                    found: path.len(),
                });
            }
            for p in path {
                check_dim(d, p.len())?;
                if p.iter().any(|c| !c.is_finite()) {
                    return Err(Error::NonFinite("path coordinate".into()));
                }
            }
            let start = TorusPoint::from_lift(&path[0])?;
            if x.delta_to(&start)?.iter().any(|c| c.abs() > 1e-12) {
                return Err(Error::InvalidArgument(
                    "path does not start at its base atom".into(),
                ));
            }
        }
        if let Some(v) = &velocities {
            if v.len() != paths.len() || v.iter().any(|vp| vp.len() != times.len()) {
                return Err(Error::InvalidArgument(
                    "velocity table has the wrong shape".into(),
                ));
            }
        }
        Ok(Self {
            base,
            times,
            paths,
            velocities,
        })
    }

    /// Paths `x + t v(x)` sampled on `times`.
    pub fn straight(base: &DiscreteMeasure, field: &Covector, times: Vec<f64>) -> Result<Self> {
        let paths = base
            .points()
            .iter()
            .zip(field.values())
            .map(|(x, v)| {
                times
                    .iter()
                    .map(|t| x.coords().iter().zip(v).map(|(a, b)| a + t * b).collect())
                    .collect()
            })
            .collect();
        let vel = field
            .values()
            .iter()
            .map(|v| vec![v.clone(); times.len()])
            .collect();
        Self::with_velocities(base.clone(), times, paths, vel)
    }

    /// Every atom at rest.
    pub fn constant(base: &DiscreteMeasure, times: Vec<f64>) -> Result<Self> {
        let paths = base
            .points()
            .iter()
            .map(|x| vec![x.coords().to_vec(); times.len()])
            .collect();
        let vel = vec![vec![vec![0.0; base.dim()]; times.len()]; base.len()];
        Self::with_velocities(base.clone(), times, paths, vel)
    }

    pub fn base(&self) -> &DiscreteMeasure {
        &self.base
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn paths(&self) -> &[Vec<Vec<f64>>] {
        &self.paths
    }

    pub fn velocities(&self) -> Option<&[Vec<Vec<f64>>]> {
        self.velocities.as_deref()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("nonempty grid")
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let (t0, t1) = (self.start(), self.end());
        if !(t >= t0 && t <= t1) {
            return Err(Error::InvalidArgument(format!(
                "time {t} outside the path grid [{t0}, {t1}]"
            )));
        }
        let k = self.times.partition_point(|&s| s <= t);
        if k == self.times.len() {
            return Ok((self.times.len() - 2, 1.0));
        }
        let a = k - 1;
        if self.times[a] == t {
            return Ok((a, 0.0));
        }
        Ok((a, (t - self.times[a]) / (self.times[a + 1] - self.times[a])))
    }

    /// Lifted displacement of path `k` between the grid start and `t`.
    pub fn displacement(&self, k: usize, t: f64) -> Result<Vec<f64>> {
        let (a, lam) = self.locate(t)?;
        let p = &self.paths[k];
        Ok((0..self.base.dim())
            .map(|c| {
                let da = p[a][c] - p[0][c];
                if lam == 0.0 {
                    da
                } else {
                    let db = p[a + 1][c] - p[0][c];
                    da + lam * (db - da)
                }
            })
            .collect())
    }

    /// Lifted position of path `k` at time `t` (linear interpolation).
    pub fn position(&self, k: usize, t: f64) -> Result<Vec<f64>> {
        let dv = self.displacement(k, t)?;
        Ok(self.paths[k][0]
            .iter()
            .zip(dv)
            .map(|(a, b)| a + b)
            .collect())
    }

    /// `e_t # eta`, one atom per path.
    pub fn marginal(&self, t: f64) -> Result<DiscreteMeasure> {
        let points = (0..self.paths.len())
            .map(|k| TorusPoint::from_lift(&self.position(k, t)?))
            .collect::<Result<Vec<_>>>()?;
        DiscreteMeasure::new(points, self.base.weights().to_vec())
    }

    /// Marginal at grid node `i`.
    pub fn node_marginal(&self, i: usize) -> Result<DiscreteMeasure> {
        let points = self
            .paths
            .iter()
            .map(|p| TorusPoint::from_lift(&p[i]))
            .collect::<Result<Vec<_>>>()?;
        DiscreteMeasure::new(points, self.base.weights().to_vec())
    }

    /// `(e_{t0}, e_t) # eta`.
    pub fn plan_at(&self, t: f64) -> Result<TransportPlan> {
        let disps = (0..self.paths.len())
            .map(|k| self.displacement(k, t))
            .collect::<Result<Vec<_>>>()?;
        TransportPlan::deterministic(&self.base, &disps)
    }
}

/// A computable family of plans `t -> pi_t`, `0 <= t <= horizon`.
#[derive(Clone)]
pub struct VariationFamily {
    base: DiscreteMeasure,
    horizon: f64,
    generator: Generator,
}

#[derive(Clone)]
enum Generator {
    TransportMap(Covector),
    Flat(TransportPlan),
    Lagrangian(TrajectoryEnsemble),
    Eulerian(TrajectoryEnsemble),
    Perturbed(Box<VariationFamily>, HatFamily),
    Mixture(Box<VariationFamily>, Box<VariationFamily>, f64),
}

impl fmt::Debug for VariationFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VariationFamily")
            .field("kind", &self.kind())
            .field("atoms", &self.base.len())
            .field("horizon", &self.horizon)
            .finish()
    }
}

fn check_horizon(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "horizon must be positive, got {t}"
        )));
    }
    Ok(())
}

impl VariationFamily {
    pub fn kind(&self) -> FamilyKind {
        match &self.generator {
            Generator::TransportMap(_) => FamilyKind::TransportMap,
            Generator::Flat(_) => FamilyKind::Flat,
            Generator::Lagrangian(_) => FamilyKind::Lagrangian,
            Generator::Eulerian(_) => FamilyKind::Eulerian,
            Generator::Perturbed(..) => FamilyKind::Perturbed,
            Generator::Mixture(..) => FamilyKind::Mixture,
        }
    }

    pub fn base(&self) -> &DiscreteMeasure {
        &self.base
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Trajectories behind a Lagrangian or Eulerian family.
    pub fn ensemble(&self) -> Option<&TrajectoryEnsemble> {
        match &self.generator {
            Generator::Lagrangian(e) | Generator::Eulerian(e) => Some(e),
            _ => None,
        }
    }

    /// `pi_t`.
    pub fn evaluate(&self, t: f64) -> Result<TransportPlan> {
        if !(t >= 0.0 && t <= self.horizon) {
            return Err(Error::InvalidArgument(format!(
                "t = {t} outside [0, {}]",
                self.horizon
            )));
        }
        match &self.generator {
            Generator::TransportMap(phi) => {
                let disps: Vec<Vec<f64>> = phi
                    .values()
                    .iter()
                    .map(|v| v.iter().map(|c| t * c).collect())
                    .collect();
                TransportPlan::deterministic(&self.base, &disps)
            }
            Generator::Flat(pi) => mix_plans(pi, &TransportPlan::diagonal(&self.base), t),
            Generator::Lagrangian(eta) | Generator::Eulerian(eta) => eta.plan_at(eta.start() + t),
            Generator::Perturbed(inner, hat) => {
                let p = inner.evaluate(t)?;
                let h = hat(t, p.target())?;
                compose_plans(&p, &h)
            }
            Generator::Mixture(f1, f2, s) => mix_plans(&f1.evaluate(t)?, &f2.evaluate(t)?, *s),
        }
    }

    /// `pr_2 # pi_t`.
    pub fn measure_at(&self, t: f64) -> Result<DiscreteMeasure> {
        Ok(self.evaluate(t)?.target().clone())
    }
}

/// `pi_t = (Id, Id + t phi) # mu`.
pub fn make_transport_map_variation(
    mu: &DiscreteMeasure,
    phi: &Covector,
    horizon: f64,
) -> Result<VariationFamily> {
    check_horizon(horizon)?;
    if !phi.base().approx_eq(mu, 1e-12) {
        return Err(Error::InvalidArgument(
            "field is not based on the given measure".into(),
        ));
    }
    Ok(VariationFamily {
        base: mu.clone(),
        horizon,
        generator: Generator::TransportMap(phi.clone()),
    })
}

/// `pi_t = (1 - t)(Id, Id) # mu + t pi` with `mu` the first marginal of `pi`.
pub fn make_flat_variation(pi: &TransportPlan, horizon: f64) -> Result<VariationFamily> {
    check_horizon(horizon)?;
    if horizon > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "flat variations live on t <= 1, horizon {horizon}"
        )));
    }
    Ok(VariationFamily {
        base: pi.source().clone(),
        horizon,
        generator: Generator::Flat(pi.clone()),
    })
}

/// `pi_t = (e_0, e_t) # eta`, time measured from the first grid node.
pub fn make_lagrangian_variation(
    eta: &TrajectoryEnsemble,
    horizon: f64,
) -> Result<VariationFamily> {
    check_horizon(horizon)?;
    if eta.start() + horizon > eta.end() * (1.0 + 1e-15) + 1e-15 {
        return Err(Error::InvalidArgument(
            "horizon extends beyond the path grid".into(),
        ));
    }
    Ok(VariationFamily {
        base: eta.base().clone(),
        horizon,
        generator: Generator::Lagrangian(eta.clone()),
    })
}

/// Integrate every atom through `v` with classical RK4 on lifts.
pub fn integrate_field(
    mu: &DiscreteMeasure,
    v: &VelocityField,
    horizon: f64,
    steps: usize,
) -> Result<TrajectoryEnsemble> {
    check_horizon(horizon)?;
    if steps == 0 {
        return Err(Error::InvalidArgument("need at least one step".into()));
    }
    let d = mu.dim();
    let h = horizon / steps as f64;
    let times: Vec<f64> = (0..=steps)
        .map(|i| if i == steps { horizon } else { i as f64 * h })
        .collect();
    let sample = |t: f64, x: &[f64]| -> Result<Vec<f64>> {
        let val = v(t, &TorusPoint::from_lift(x)?);
        check_dim(d, val.len())?;
        if val.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("velocity at t = {t}, x = {x:?}")));
        }
        Ok(val)
    };
    let axpy = |x: &[f64], a: f64, k: &[f64]| -> Vec<f64> {
        x.iter().zip(k).map(|(p, q)| p + a * q).collect()
    };
    let results: Vec<Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)>> = mu
        .points()
        .par_iter()
        .map(|x0| {
            let mut x = x0.coords().to_vec();
            let mut path = Vec::with_capacity(steps + 1);
            let mut vel = Vec::with_capacity(steps + 1);
            for i in 0..steps {
                let t = times[i];
                let k1 = sample(t, &x)?;
                let k2 = sample(t + h / 2.0, &axpy(&x, h / 2.0, &k1))?;
                let k3 = sample(t + h / 2.0, &axpy(&x, h / 2.0, &k2))?;
                let k4 = sample(t + h, &axpy(&x, h, &k3))?;
                path.push(x.clone());
                vel.push(k1.clone());
                for c in 0..d {
                    x[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
                }
            }
            vel.push(sample(horizon, &x)?);
            path.push(x);
            Ok((path, vel))
        })
        .collect();
    let mut paths = Vec::with_capacity(mu.len());
    let mut vels = Vec::with_capacity(mu.len());
    for r in results {
        let (p, v) = r?;
        paths.push(p);
        vels.push(v);
    }
    TrajectoryEnsemble::with_velocities(mu.clone(), times, paths, vels)
}

/// Eulerian family of the flow of `v`, realized through its trajectories.
pub fn make_eulerian_variation(
    mu: &DiscreteMeasure,
    v: &VelocityField,
    horizon: f64,
    steps: usize,
) -> Result<VariationFamily> {
    let eta = integrate_field(mu, v, horizon, steps)?;
    Ok(VariationFamily {
        base: mu.clone(),
        horizon,
        generator: Generator::Eulerian(eta),
    })
}

/// Pointwise composition `pi_t o hat_t`.
pub fn perturb_family(family: &VariationFamily, hat: HatFamily) -> VariationFamily {
    VariationFamily {
        base: family.base.clone(),
        horizon: family.horizon,
        generator: Generator::Perturbed(Box::new(family.clone()), hat),
    }
}

/// Hat family moving every atom `y` of its source by `scale(t) * field(y)`.
pub fn map_hat<S, F>(scale: S, field: F) -> HatFamily
where
    S: Fn(f64) -> f64 + Send + Sync + 'static,
    F: Fn(&TorusPoint) -> Vec<f64> + Send + Sync + 'static,
{
    Arc::new(move |t, nu: &DiscreteMeasure| {
        let s = scale(t);
        let disps: Vec<Vec<f64>> = nu
            .points()
            .iter()
            .map(|y| field(y).into_iter().map(|c| s * c).collect())
            .collect();
        TransportPlan::deterministic(nu, &disps)
    })
}

/// Pointwise `s pi_t + (1 - s) pi'_t`.
pub fn mix_families(f1: &VariationFamily, f2: &VariationFamily, s: f64) -> Result<VariationFamily> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!(
            "mixing weight {s} outside [0, 1]"
        )));
    }
    if !f1.base.approx_eq(&f2.base, 1e-12) {
        return Err(Error::InvalidArgument(
            "families have different base measures".into(),
        ));
    }
    if f1.horizon != f2.horizon {
        return Err(Error::InvalidArgument(
            "families have different horizons".into(),
        ));
    }
    Ok(VariationFamily {
        base: f1.base.clone(),
        horizon: f1.horizon,
        generator: Generator::Mixture(Box::new(f1.clone()), Box::new(f2.clone()), s),
    })
}

/// `t_k = T 2^{-k}`, `k = 1..=levels`.
pub fn geometric_grid(horizon: f64, levels: usize) -> Vec<f64> {
    (1..=levels)
        .map(|k| horizon * 0.5f64.powi(k as i32))
        .collect()
}

/// Numerical verdict on the three admissibility conditions.
#[derive(Debug, Clone, Serialize)]
pub struct AdmissibilityReport {
    pub kind: FamilyKind,
    pub q: f64,
    pub t_grid: Vec<f64>,
    /// First marginal equals the base at every grid time.
    pub first_marginal_exact: bool,
    /// Test-function gap between the second marginal and the base.
    pub narrow_gaps: Vec<f64>,
    pub narrow_convergent: bool,
    /// `W_q^{pi_t} / t`.
    pub rates: Vec<f64>,
    /// Max of the rates over the final half of the grid.
    pub limsup_estimate: f64,
    /// Log-log slope of the rates against `t` over the final half of the grid.
    pub rate_exponent: f64,
    pub admissible: bool,
}

/// Smallest rate exponent still read as bounded.
pub const RATE_EXPONENT_FLOOR: f64 = -0.1;

fn loglog_slope(ts: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .zip(ys)
        .filter(|(_, &y)| y > 0.0)
        .map(|(t, y)| (t.ln(), y.ln()))
        .collect();
    if pts.len() < 2 || pts.len() < ys.len() {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Least-squares slope of `ln y` against `ln t`, zero when any `y` vanishes.
pub fn fitted_exponent(ts: &[f64], ys: &[f64]) -> f64 {
    loglog_slope(ts, ys)
}

pub(crate) fn check_grid(t_grid: &[f64], horizon: f64) -> Result<()> {
    if t_grid.is_empty() {
        return Err(Error::InvalidArgument("empty t grid".into()));
    }
    if t_grid.iter().any(|&t| !(t > 0.0) || t > horizon) {
        return Err(Error::InvalidArgument(format!(
            "t grid must lie in (0, {horizon}]"
        )));
    }
    if t_grid.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidArgument(
            "t grid must be strictly decreasing".into(),
        ));
    }
    Ok(())
}

pub fn check_admissibility(
    family: &VariationFamily,
    q: f64,
    t_grid: &[f64],
    testset: &[TestFunction],
) -> Result<AdmissibilityReport> {
    check_grid(t_grid, family.horizon)?;
    if !(q >= 1.0) || !q.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "q must be finite and >= 1, got {q}"
        )));
    }
    let rows: Vec<Result<(bool, f64, f64)>> = t_grid
        .par_iter()
        .map(|&t| {
            let plan = family.evaluate(t)?;
            let exact = plan.source() == family.base();
            let gap = bounded_lipschitz_gap(plan.target(), family.base(), testset)?;
            let rate = plan_cost(&plan, q)? / t;
            Ok((exact, gap, rate))
        })
        .collect();
    let mut first_marginal_exact = true;
    let mut narrow_gaps = Vec::with_capacity(t_grid.len());
    let mut rates = Vec::with_capacity(t_grid.len());
    for r in rows {
        let (e, g, c) = r?;
        first_marginal_exact &= e;
        narrow_gaps.push(g);
        rates.push(c);
    }
    let first = narrow_gaps[0];
    let last = *narrow_gaps.last().expect("nonempty");
    let half = t_grid.len() / 2;
    // only the small-t half matters; curves may wander at macroscopic t
    let monotone = narrow_gaps[half..].windows(2).all(|w| w[1] <= w[0] + 1e-15);
    let narrow_convergent =
        last < 10.0 * f64::EPSILON * first.max(1.0) || (monotone && last < 1e-3);
    let tail_t = &t_grid[half..];
    let tail_r = &rates[half..];
    let limsup_estimate = tail_r.iter().copied().fold(0.0, f64::max);
    let rate_exponent = loglog_slope(tail_t, tail_r);
    let admissible = first_marginal_exact
        && narrow_convergent
        && limsup_estimate.is_finite()
        && rate_exponent >= RATE_EXPONENT_FLOOR;
    Ok(AdmissibilityReport {
        kind: family.kind(),
        q,
        t_grid: t_grid.to_vec(),
        first_marginal_exact,
        narrow_gaps,
        narrow_convergent,
        rates,
        limsup_estimate,
        rate_exponent,
        admissible,
    })
}

/// Named velocity fields: `zero`, `constant:<c1>,<c2>,...`, `dilation`
/// (`x - 1/2` in the unit chart), `shear`, `swirl`.
pub fn builtin_field(name: &str, d: usize) -> Result<VelocityField> {
    if let Some(rest) = name.strip_prefix("constant:") {
        let c = rest
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::UnknownBuiltin(name.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let c = if c.len() == 1 { vec![c[0]; d] } else { c };
        check_dim(d, c.len())?;
        return Ok(Arc::new(move |_, _| c.clone()));
    }
    match name {
        "zero" => Ok(Arc::new(move |_, _| vec![0.0; d])),
        "dilation" => Ok(Arc::new(|_, x: &TorusPoint| {
            x.coords().iter().map(|c| c - 0.5).collect()
        })),
        "shear" => Ok(Arc::new(move |_, x: &TorusPoint| {
            let mut v = vec![0.0; d];
            v[0] = 0.3 * (2.0 * std::f64::consts::PI * x.coords()[d - 1]).sin();
            v
        })),
        "swirl" => Ok(Arc::new(move |t, x: &TorusPoint| {
            let c = x.coords();
            (0..d)
                .map(|i| {
                    let j = (i + 1) % d;
                    0.25 * (2.0 * std::f64::consts::PI * (c[j] + 0.5 * t)).cos()
                })
                .collect()
        })),
        other => Err(Error::UnknownBuiltin(other.to_string())),
    }
}

/// A randomly generated family of the given elementary kind on horizon 1.
///
/// Map fields have entries in `[-1/2, 1/2]`; flat families use the optimal
/// plan to a random measure; Lagrangian paths are smooth curves sampled on a
/// 64-step grid; Eulerian families follow a random bounded trigonometric
/// field.
pub fn random_family<R: Rng + ?Sized>(
    kind: FamilyKind,
    base: &DiscreteMeasure,
    rng: &mut R,
) -> Result<VariationFamily> {
    let d = base.dim();
    match kind {
        FamilyKind::TransportMap => {
            let vals = (0..base.len())
                .map(|_| (0..d).map(|_| rng.gen::<f64>() - 0.5).collect())
                .collect();
            make_transport_map_variation(base, &Covector::new(base.clone(), vals)?, 1.0)
        }
        FamilyKind::Flat => {
            let nu = DiscreteMeasure::random(rng, base.len().clamp(1, 8), d, false)?;
            make_flat_variation(&optimal_plan(base, &nu, 2.0)?, 1.0)
        }
        FamilyKind::Lagrangian => {
            let steps = 64;
            let times: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
            let paths = base
                .points()
                .iter()
                .map(|x| {
                    let a: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
                    let b: Vec<f64> = (0..d).map(|_| 0.4 * (rng.gen::<f64>() - 0.5)).collect();
                    times
                        .iter()
                        .map(|&t| {
                            (0..d)
                                .map(|c| {
                                    x.coords()[c]
                                        + a[c] * t
                                        + b[c] * (std::f64::consts::PI * t).sin()
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let eta = TrajectoryEnsemble::new(base.clone(), times, paths)?;
            make_lagrangian_variation(&eta, 1.0)
        }
        FamilyKind::Eulerian => {
            let amp: Vec<f64> = (0..d).map(|_| 0.5 * (rng.gen::<f64>() - 0.5)).collect();
            let phase: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
            let drift: Vec<f64> = (0..d).map(|_| 0.4 * (rng.gen::<f64>() - 0.5)).collect();
            let field: VelocityField = Arc::new(move |t, x: &TorusPoint| {
                let c = x.coords();
                (0..d)
                    .map(|i| {
                        let j = (i + 1) % d;
                        drift[i]
                            + amp[i] * (2.0 * std::f64::consts::PI * (c[j] + phase[i]) + t).sin()
                    })
                    .collect()
            });
            make_eulerian_variation(base, &field, 1.0, 64)
        }
        other => Err(Error::InvalidArgument(format!(
            "no random generator for {other} families"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::wasserstein;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m1(coords: &[f64], weights: &[f64]) -> DiscreteMeasure {
        let rows: Vec<Vec<f64>> = coords.iter().map(|&c| vec![c]).collect();
        DiscreteMeasure::from_coords(&rows, weights).unwrap()
    }

    fn dict(d: usize) -> Vec<TestFunction> {
        TestFunction::dictionary(d)
    }

    #[test]
    fn map_family_examples() {
        let mu = m1(&[0.2, 0.7], &[0.5, 0.5]);
        let fam = make_transport_map_variation(&mu, &Covector::zeros(&mu), 1.0).unwrap();
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(fam.evaluate(t).unwrap(), TransportPlan::diagonal(&mu));
        }
        let dirac = m1(&[0.5], &[1.0]);
        let one = Covector::constant(&dirac, &[1.0]).unwrap();
        let fam = make_transport_map_variation(&dirac, &one, 1.0).unwrap();
        assert_abs_diff_eq!(
            fam.measure_at(0.1).unwrap().points()[0].coords()[0],
            0.6,
            epsilon = 1e-15
        );
        assert!(make_transport_map_variation(&dirac, &one, 0.0).is_err());
        assert!(fam.evaluate(1.5).is_err());
    }

    #[test]
    fn map_rate_is_the_field_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu = DiscreteMeasure::random(&mut rng, 7, 2, false).unwrap();
        let phi = Covector::new(
            mu.clone(),
            (0..7).map(|_| vec![rng.gen::<f64>() - 0.5, 0.2]).collect(),
        )
        .unwrap();
        let fam = make_transport_map_variation(&mu, &phi, 1.0).unwrap();
        for q in [1.0, 2.0, 3.5] {
            let rep = check_admissibility(&fam, q, &geometric_grid(1.0, 20), &dict(2)).unwrap();
            let norm = phi.norm_lq(q).unwrap();
            for r in &rep.rates {
                assert!((r - norm).abs() <= 1e-12, "q = {q}: {r} vs {norm}");
            }
            assert!(rep.admissible);
        }
    }

    #[test]
    fn flat_family_examples() {
        let mu = m1(&[0.1, 0.4], &[0.5, 0.5]);
        let nu = m1(&[0.3, 0.8, 0.9], &[0.2, 0.3, 0.5]);
        let pi = optimal_plan(&mu, &nu, 2.0).unwrap();
        let fam = make_flat_variation(&pi, 1.0).unwrap();
        assert_eq!(fam.evaluate(0.0).unwrap(), TransportPlan::diagonal(&mu));
        assert_eq!(fam.evaluate(1.0).unwrap(), pi);
        assert!(make_flat_variation(&pi, 1.5).is_err());
        let w1 = wasserstein(&mu, &nu, 1.0).unwrap();
        for (t, s) in [(0.1, 0.7), (0.25, 0.5), (0.9, 0.05)] {
            let a = fam.measure_at(t).unwrap();
            let b = fam.measure_at(s).unwrap();
            let w = wasserstein(&a, &b, 1.0).unwrap();
            assert!(w <= (t - s as f64).abs() * w1 + 1e-12);
        }
        let rep = check_admissibility(&fam, 1.0, &geometric_grid(1.0, 20), &dict(1)).unwrap();
        let c1 = plan_cost(&pi, 1.0).unwrap();
        for r in &rep.rates {
            assert_abs_diff_eq!(*r, c1, epsilon = 1e-12);
        }
        assert!(rep.admissible);
        // for q > 1 the rate blows up like t^(1/q - 1)
        let rep2 = check_admissibility(&fam, 2.0, &geometric_grid(1.0, 20), &dict(1)).unwrap();
        assert_abs_diff_eq!(rep2.rate_exponent, -0.5, epsilon = 1e-9);
        assert!(!rep2.admissible);
    }

    #[test]
    fn lagrangian_examples() {
        let mu = m1(&[0.0], &[1.0]);
        let eta =
            TrajectoryEnsemble::new(mu.clone(), vec![0.0, 1.0], vec![vec![vec![0.0], vec![0.2]]])
                .unwrap();
        let fam = make_lagrangian_variation(&eta, 1.0).unwrap();
        assert_abs_diff_eq!(
            fam.measure_at(0.5).unwrap().points()[0].coords()[0],
            0.1,
            epsilon = 1e-15
        );
        assert!(fam.evaluate(1.2).is_err());
        let rest = TrajectoryEnsemble::constant(&mu, vec![0.0, 0.5, 1.0]).unwrap();
        let fam = make_lagrangian_variation(&rest, 1.0).unwrap();
        assert_eq!(fam.evaluate(0.7).unwrap(), TransportPlan::diagonal(&mu));
    }

    #[test]
    fn straight_paths_reproduce_map_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = DiscreteMeasure::random(&mut rng, 6, 2, true).unwrap();
        let phi = Covector::new(
            mu.clone(),
            (0..6)
                .map(|_| vec![rng.gen::<f64>() - 0.5, rng.gen::<f64>()])
                .collect(),
        )
        .unwrap();
        let times: Vec<f64> = (0..=32).map(|i| i as f64 / 32.0).collect();
        let lag = make_lagrangian_variation(
            &TrajectoryEnsemble::straight(&mu, &phi, times).unwrap(),
            1.0,
        )
        .unwrap();
        let map = make_transport_map_variation(&mu, &phi, 1.0).unwrap();
        for t in geometric_grid(1.0, 12).into_iter().chain([0.3, 0.77]) {
            assert!(
                lag.evaluate(t)
                    .unwrap()
                    .max_entry_diff(&map.evaluate(t).unwrap())
                    <= 1e-12
            );
        }
    }

    #[test]
    fn eulerian_examples() {
        let mu = m1(&[0.1, 0.6], &[0.5, 0.5]);
        let zero =
            make_eulerian_variation(&mu, &builtin_field("zero", 1).unwrap(), 1.0, 10).unwrap();
        assert_eq!(zero.evaluate(0.4).unwrap(), TransportPlan::diagonal(&mu));
        let c = make_eulerian_variation(&mu, &builtin_field("constant:0.3", 1).unwrap(), 1.0, 10)
            .unwrap();
        let m = c.measure_at(0.5).unwrap();
        assert_abs_diff_eq!(m.points()[0].coords()[0], 0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(m.points()[1].coords()[0], 0.75, epsilon = 1e-14);
        let bad: VelocityField = Arc::new(|_, _| vec![f64::NAN]);
        assert!(make_eulerian_variation(&mu, &bad, 1.0, 4).is_err());
    }

    #[test]
    fn eulerian_rate_respects_holder_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mu = DiscreteMeasure::random(&mut rng, 5, 2, false).unwrap();
        let fam = random_family(FamilyKind::Eulerian, &mu, &mut rng).unwrap();
        let eta = fam.ensemble().unwrap();
        let vel = eta.velocities().unwrap();
        let times = eta.times();
        for q in [1.0, 2.0] {
            let p = if q == 1.0 {
                f64::INFINITY
            } else {
                q / (q - 1.0)
            };
            for &t in &[1.0, 0.5, 0.25, 0.125] {
                let n = times.iter().position(|&s| (s - t).abs() < 1e-12).unwrap();
                // trapezoid for int_0^t int |v_s|^q dmu_s ds
                let mut integral = 0.0;
                for i in 0..n {
                    let f = |k: usize| -> f64 {
                        (0..mu.len())
                            .map(|a| mu.weights()[a] * crate::measure::norm(&vel[a][k]).powf(q))
                            .sum()
                    };
                    integral += 0.5 * (times[i + 1] - times[i]) * (f(i) + f(i + 1));
                }
                let bound = t.powf(1.0 / p) * integral.powf(1.0 / q) / t;
                let rate = plan_cost(&fam.evaluate(t).unwrap(), q).unwrap() / t;
                assert!(
                    rate <= bound * (1.0 + 1e-3),
                    "q = {q}, t = {t}: {rate} > {bound}"
                );
            }
        }
        let rep = check_admissibility(&fam, 2.0, &geometric_grid(1.0, 20), &dict(2)).unwrap();
        assert!(rep.admissible);
    }

    #[test]
    fn admissibility_of_the_diagonal() {
        let mu = m1(&[0.1, 0.6], &[0.5, 0.5]);
        let fam = make_transport_map_variation(&mu, &Covector::zeros(&mu), 1.0).unwrap();
        let rep = check_admissibility(&fam, 2.0, &geometric_grid(1.0, 20), &dict(1)).unwrap();
        assert_eq!(rep.limsup_estimate, 0.0);
        assert!(rep.admissible);
        assert!(check_admissibility(&fam, 2.0, &[], &dict(1)).is_err());
        assert!(check_admissibility(&fam, 2.0, &[0.1, 0.2], &dict(1)).is_err());
    }

    #[test]
    fn perturbation_and_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mu = DiscreteMeasure::random(&mut rng, 6, 2, false).unwrap();
        let base = random_family(FamilyKind::TransportMap, &mu, &mut rng).unwrap();
        let grid = geometric_grid(1.0, 40);
        let same = perturb_family(&base, map_hat(|_| 0.0, |_| vec![0.0, 0.0]));
        for &t in &grid[..10] {
            assert!(
                same.evaluate(t)
                    .unwrap()
                    .max_entry_diff(&base.evaluate(t).unwrap())
                    == 0.0
            );
        }
        let hat = map_hat(
            |t| t * t,
            |y: &TorusPoint| vec![(6.0 * y.coords()[0]).sin(), 0.3],
        );
        let pert = perturb_family(&base, hat);
        let r0 = check_admissibility(&base, 2.0, &grid, &dict(2)).unwrap();
        let r1 = check_admissibility(&pert, 2.0, &grid, &dict(2)).unwrap();
        assert!((r0.limsup_estimate - r1.limsup_estimate).abs() <= 1e-6);
        let p = pert.evaluate(0.25).unwrap();
        assert!(p.source() == &mu);

        let other = random_family(FamilyKind::Lagrangian, &mu, &mut rng).unwrap();
        let m1f = mix_families(&base, &other, 1.0).unwrap();
        let m0f = mix_families(&base, &other, 0.0).unwrap();
        for t in [0.5, 0.125] {
            assert_eq!(m1f.evaluate(t).unwrap(), base.evaluate(t).unwrap());
            assert_eq!(m0f.evaluate(t).unwrap(), other.evaluate(t).unwrap());
        }
        let mix = mix_families(&base, &other, 0.3).unwrap();
        let g = geometric_grid(1.0, 12);
        let ra = check_admissibility(&base, 2.0, &g, &dict(2)).unwrap();
        let rb = check_admissibility(&other, 2.0, &g, &dict(2)).unwrap();
        let rm = check_admissibility(&mix, 2.0, &g, &dict(2)).unwrap();
        for k in 0..g.len() {
            assert!(rm.rates[k] <= ra.rates[k].max(rb.rates[k]) + 1e-9);
        }
        assert!(mix_families(&base, &other, 1.2).is_err());
    }
}
