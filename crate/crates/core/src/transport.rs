//! Transport plans between discrete measures, exact optimal transport and the
//! plan algebra used to build variations.
//!
//! Every plan carries, for each coupled pair of atoms, the displacement
//! vector `y - x` in a lifted chart. Plans built from optimal transport or
//! raw couplings use the nearest representative (the window of radius 1/2
//! around `x`); plans built from maps and paths keep the exact lifted
//! displacement, so costs along small displacements are not polluted by the
//! round trip through reduced coordinates.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure::{check_dim, dot, norm, wrap_delta, DiscreteMeasure, TorusPoint};
use crate::simplex;

/// Tolerance on plan marginals.
pub const MARGINAL_TOL: f64 = 1e-10;

/// A coupling between two discrete measures.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    source: DiscreteMeasure,
    target: DiscreteMeasure,
    // row-major n x m
    coupling: Vec<f64>,
    // row-major n x m x d
    disp: Vec<f64>,
}

fn nearest_displacements(source: &DiscreteMeasure, target: &DiscreteMeasure) -> Vec<f64> {
    let d = source.dim();
    let mut disp = Vec::with_capacity(source.len() * target.len() * d);
    for x in source.points() {
        for y in target.points() {
            disp.extend(wrap_delta(x.coords(), y.coords()));
        }
    }
    disp
}

impl TransportPlan {
    /// Plan from a dense coupling, displacements taken in the nearest chart.
    pub fn new(
        source: DiscreteMeasure,
        target: DiscreteMeasure,
        coupling: Vec<f64>,
    ) -> Result<Self> {
        check_dim(source.dim(), target.dim())?;
        let disp = nearest_displacements(&source, &target);
        Self::with_displacements(source, target, coupling, disp)
    }

    /// Plan with explicit lifted displacements (`n * m * d` numbers).
    pub fn with_displacements(
        source: DiscreteMeasure,
        target: DiscreteMeasure,
        coupling: Vec<f64>,
        disp: Vec<f64>,
    ) -> Result<Self> {
        check_dim(source.dim(), target.dim())?;
        let (n, m, d) = (source.len(), target.len(), source.dim());
        if coupling.len() != n * m {
            return Err(Error::InvalidPlan(format!(
                "coupling has {} entries, expected {}",
                coupling.len(),
                n * m
            )));
        }
        if disp.len() != n * m * d {
            return Err(Error::InvalidPlan(
                "displacement table has the wrong shape".into(),
            ));
        }
        if disp.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("plan displacement".into()));
        }
        let plan = Self {
            source,
            target,
            coupling,
            disp,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Columns whose declared target weight is zero are dropped.
    pub(crate) fn from_columns(
        source: DiscreteMeasure,
        target_points: Vec<TorusPoint>,
        target_weights: Vec<f64>,
        coupling: Vec<f64>,
        disp: Vec<f64>,
    ) -> Result<Self> {
        let (n, m, d) = (source.len(), target_points.len(), source.dim());
        if target_weights.len() != m || coupling.len() != n * m || disp.len() != n * m * d {
            return Err(Error::InvalidPlan(
                "coupling shape does not match atom counts".into(),
            ));
        }
        let keep: Vec<usize> = (0..m).filter(|&j| target_weights[j] > 0.0).collect();
        for j in (0..m).filter(|&j| target_weights[j] == 0.0) {
            let lost: f64 = (0..n).map(|i| coupling[i * m + j]).sum();
            if lost > MARGINAL_TOL {
                return Err(Error::MarginalMismatch(format!(
                    "column {j} has mass {lost} but zero weight"
                )));
            }
        }
        let points = keep.iter().map(|&j| target_points[j].clone()).collect();
        let weights = keep.iter().map(|&j| target_weights[j]).collect();
        let target = DiscreteMeasure::new(points, weights)?;
        let mut c = Vec::with_capacity(n * keep.len());
        let mut dd = Vec::with_capacity(n * keep.len() * d);
        for i in 0..n {
            for &j in &keep {
                c.push(coupling[i * m + j]);
                dd.extend_from_slice(&disp[(i * m + j) * d..(i * m + j + 1) * d]);
            }
        }
        Self::with_displacements(source, target, c, dd)
    }

    fn validate(&self) -> Result<()> {
        let (n, m) = (self.source.len(), self.target.len());
        for &c in &self.coupling {
            if !c.is_finite() {
                return Err(Error::NonFinite("coupling entry".into()));
            }
            if c < 0.0 {
                return Err(Error::InvalidPlan(format!("negative coupling entry {c}")));
            }
        }
        for (i, &w) in self.source.weights().iter().enumerate() {
            let r: f64 = self.coupling[i * m..(i + 1) * m].iter().sum();
            if (r - w).abs() > MARGINAL_TOL {
                return Err(Error::MarginalMismatch(format!(
                    "row {i} sums to {r}, source weight {w}"
                )));
            }
        }
        for (j, &w) in self.target.weights().iter().enumerate() {
            let c: f64 = (0..n).map(|i| self.coupling[i * m + j]).sum();
            if (c - w).abs() > MARGINAL_TOL {
                return Err(Error::MarginalMismatch(format!(
                    "column {j} sums to {c}, target weight {w}"
                )));
            }
        }
        let total: f64 = self.coupling.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidPlan(format!("total mass {total}")));
        }
        Ok(())
    }

    /// `(Id, Id)#mu`.
    pub fn diagonal(mu: &DiscreteMeasure) -> Self {
        let n = mu.len();
        let mut coupling = vec![0.0; n * n];
        for (k, &w) in mu.weights().iter().enumerate() {
            coupling[k * n + k] = w;
        }
        let disp = nearest_displacements(mu, mu);
        Self {
            source: mu.clone(),
            target: mu.clone(),
            coupling,
            disp,
        }
    }

    /// Independent coupling `mu x nu`.
    pub fn product(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<Self> {
        let coupling = mu
            .weights()
            .iter()
            .flat_map(|a| nu.weights().iter().map(move |b| a * b))
            .collect();
        Self::new(mu.clone(), nu.clone(), coupling)
    }

    /// `(Id, Id + v)#mu` with one lifted displacement per atom.
    /// Target atoms are not merged.
    pub fn deterministic(mu: &DiscreteMeasure, displacements: &[Vec<f64>]) -> Result<Self> {
        let (n, d) = (mu.len(), mu.dim());
        if displacements.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: displacements.len(),
            });
        }
        let mut coupling = vec![0.0; n * n];
        let mut disp = vec![0.0; n * n * d];
        let mut points = Vec::with_capacity(n);
        for (k, (x, w)) in mu.iter().enumerate() {
            check_dim(d, displacements[k].len())?;
            let y: Vec<f64> = x
                .coords()
                .iter()
                .zip(&displacements[k])
                .map(|(a, b)| a + b)
                .collect();
            points.push(TorusPoint::new(y)?);
            coupling[k * n + k] = w;
            disp[(k * n + k) * d..(k * n + k + 1) * d].copy_from_slice(&displacements[k]);
        }
        // off-diagonal entries carry no mass; fill them with nearest displacements
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let dv = wrap_delta(mu.points()[i].coords(), points[j].coords());
                    disp[(i * n + j) * d..(i * n + j + 1) * d].copy_from_slice(&dv);
                }
            }
        }
        Self::from_columns(mu.clone(), points, mu.weights().to_vec(), coupling, disp)
    }

    pub fn source(&self) -> &DiscreteMeasure {
        &self.source
    }

    pub fn target(&self) -> &DiscreteMeasure {
        &self.target
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    /// Row-major coupling matrix.
    pub fn coupling(&self) -> &[f64] {
        &self.coupling
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.coupling[i * self.target.len() + j]
    }

    /// Lifted displacement from source atom `i` to target atom `j`.
    pub fn displacement(&self, i: usize, j: usize) -> &[f64] {
        let d = self.dim();
        let idx = (i * self.target.len() + j) * d;
        &self.disp[idx..idx + d]
    }

    /// Entries with positive mass as `(i, j, mass)`, in row-major order.
    pub fn support(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let m = self.target.len();
        self.coupling
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0.0)
            .map(move |(idx, &c)| (idx / m, idx % m, c))
    }

    /// Largest entrywise difference in coupling and displacement, or infinity
    /// if the shapes differ.
    pub fn max_entry_diff(&self, other: &TransportPlan) -> f64 {
        if self.coupling.len() != other.coupling.len() || self.disp.len() != other.disp.len() {
            return f64::INFINITY;
        }
        let c = self
            .coupling
            .iter()
            .zip(&other.coupling)
            .map(|(a, b)| (a - b).abs());
        let d = self
            .disp
            .iter()
            .zip(&other.disp)
            .map(|(a, b)| (a - b).abs());
        c.chain(d).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Atom<'a> {
            x: &'a [f64],
            weight: f64,
        }
        #[derive(Serialize)]
        struct Dump<'a> {
            source: Vec<Atom<'a>>,
            target: Vec<Atom<'a>>,
            coupling: Vec<&'a [f64]>,
        }
        fn atoms(m: &DiscreteMeasure) -> Vec<Atom<'_>> {
            m.iter()
                .map(|(p, w)| Atom {
                    x: p.coords(),
                    weight: w,
                })
                .collect()
        }
        fn rows(c: &[f64], m: usize) -> Vec<&[f64]> {
            c.chunks(m).collect()
        }
        let dump = Dump {
            source: atoms(&self.source),
            target: atoms(&self.target),
            coupling: rows(&self.coupling, self.target.len()),
        };
        Ok(serde_json::to_string_pretty(&dump)?)
    }
}

/// `W_q^pi = (sum pi_kj |y_j - x_k|^q)^(1/q)`.
///
/// Terms are summed in sorted order so the value depends only on the
/// multiset of (mass, length) pairs.
pub fn plan_cost(plan: &TransportPlan, q: f64) -> Result<f64> {
    if !(q >= 1.0) || !q.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "plan cost needs finite q >= 1, got {q}"
        )));
    }
    let mut terms: Vec<f64> = plan
        .support()
        .map(|(i, j, c)| {
            let v = plan.displacement(i, j);
            let len_q = if q == 2.0 { dot(v, v) } else { norm(v).powf(q) };
            c * len_q
        })
        .collect();
    terms.sort_by(|a, b| a.total_cmp(b));
    let s: f64 = terms.iter().sum();
    Ok(if q == 1.0 {
        s
    } else if q == 2.0 {
        s.sqrt()
    } else {
        s.powf(1.0 / q)
    })
}

/// Exact optimal plan for the cost `d(x, y)^q`.
pub fn optimal_plan(mu: &DiscreteMeasure, nu: &DiscreteMeasure, q: f64) -> Result<TransportPlan> {
    if !(q >= 1.0) || !q.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "optimal transport needs finite q >= 1, got {q}"
        )));
    }
    check_dim(mu.dim(), nu.dim())?;
    let disp = nearest_displacements(mu, nu);
    let d = mu.dim();
    let cost: Vec<f64> = disp
        .chunks(d)
        .map(|v| if q == 2.0 { dot(v, v) } else { norm(v).powf(q) })
        .collect();
    let sol = simplex::solve(mu.weights(), nu.weights(), &cost)?;
    log::debug!(
        "optimal plan {}x{} solved in {} pivots",
        mu.len(),
        nu.len(),
        sol.pivots
    );
    TransportPlan::with_displacements(mu.clone(), nu.clone(), sol.flow, disp)
}

/// Wasserstein distance `W_q`.
pub fn wasserstein(mu: &DiscreteMeasure, nu: &DiscreteMeasure, q: f64) -> Result<f64> {
    plan_cost(&optimal_plan(mu, nu, q)?, q)
}

/// Glue `pi12` and `pi23` along their common middle marginal.
pub fn compose_plans(p12: &TransportPlan, p23: &TransportPlan) -> Result<TransportPlan> {
    check_dim(p12.dim(), p23.dim())?;
    if !p12.target.approx_eq(&p23.source, MARGINAL_TOL) {
        return Err(Error::MarginalMismatch(
            "second marginal of the first plan differs from first marginal of the second".into(),
        ));
    }
    let (n, m, k) = (p12.source.len(), p12.target.len(), p23.target.len());
    let d = p12.dim();
    let mid = p23.source.weights();
    let mut coupling = vec![0.0; n * k];
    let mut disp = vec![0.0; n * k * d];
    for i in 0..n {
        for l in 0..k {
            let mut mass = 0.0;
            let mut contributors = 0usize;
            let mut last = 0usize;
            for j in 0..m {
                let a = p12.coupling[i * m + j];
                let b = p23.coupling[j * k + l];
                if a > 0.0 && b > 0.0 {
                    mass += a * (b / mid[j]);
                    contributors += 1;
                    last = j;
                }
            }
            coupling[i * k + l] = mass;
            let slot = &mut disp[(i * k + l) * d..(i * k + l + 1) * d];
            if contributors == 1 {
                let (u, v) = (p12.displacement(i, last), p23.displacement(last, l));
                for c in 0..d {
                    slot[c] = u[c] + v[c];
                }
            } else {
                slot.copy_from_slice(&wrap_delta(
                    p12.source.points()[i].coords(),
                    p23.target.points()[l].coords(),
                ));
            }
        }
    }
    TransportPlan::with_displacements(p12.source.clone(), p23.target.clone(), coupling, disp)
}

/// Transpose: swap the marginals and reverse every displacement.
pub fn invert_plan(plan: &TransportPlan) -> TransportPlan {
    let (n, m, d) = (plan.source.len(), plan.target.len(), plan.dim());
    let mut coupling = vec![0.0; n * m];
    let mut disp = vec![0.0; n * m * d];
    for i in 0..n {
        for j in 0..m {
            coupling[j * n + i] = plan.coupling[i * m + j];
            let src = plan.displacement(i, j);
            for c in 0..d {
                disp[(j * n + i) * d + c] = -src[c];
            }
        }
    }
    TransportPlan {
        source: plan.target.clone(),
        target: plan.source.clone(),
        coupling,
        disp,
    }
}

/// Convex combination `s pi1 + (1 - s) pi2` of plans with the same source.
/// Target atom lists are concatenated.
pub fn mix_plans(p1: &TransportPlan, p2: &TransportPlan, s: f64) -> Result<TransportPlan> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!(
            "mixing weight {s} outside [0, 1]"
        )));
    }
    if !p1.source.approx_eq(&p2.source, 1e-12) {
        return Err(Error::MarginalMismatch(
            "plans have different sources".into(),
        ));
    }
    let (n, m1, m2, d) = (p1.source.len(), p1.target.len(), p2.target.len(), p1.dim());
    let m = m1 + m2;
    let mut coupling = Vec::with_capacity(n * m);
    let mut disp = Vec::with_capacity(n * m * d);
    for i in 0..n {
        for j in 0..m1 {
            coupling.push(s * p1.coupling[i * m1 + j]);
            disp.extend_from_slice(p1.displacement(i, j));
        }
        for j in 0..m2 {
            coupling.push((1.0 - s) * p2.coupling[i * m2 + j]);
            disp.extend_from_slice(p2.displacement(i, j));
        }
    }
    let points = p1
        .target
        .points()
        .iter()
        .chain(p2.target.points())
        .cloned()
        .collect();
    let weights = p1
        .target
        .weights()
        .iter()
        .map(|w| s * w)
        .chain(p2.target.weights().iter().map(|w| (1.0 - s) * w))
        .collect();
    TransportPlan::from_columns(p1.source.clone(), points, weights, coupling, disp)
}

/// A vector field sampled on the atoms of a measure.
#[derive(Debug, Clone, PartialEq)]
pub struct Covector {
    base: DiscreteMeasure,
    values: Vec<Vec<f64>>,
}

impl Covector {
    pub fn new(base: DiscreteMeasure, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != base.len() {
            return Err(Error::DimensionMismatch {
                expected: base.len(),
                found: values.len(),
            });
        }
        for v in &values {
            check_dim(base.dim(), v.len())?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("covector value".into()));
            }
        }
        Ok(Self { base, values })
    }

    pub fn zeros(base: &DiscreteMeasure) -> Self {
        Self {
            values: vec![vec![0.0; base.dim()]; base.len()],
            base: base.clone(),
        }
    }

    /// Sample `f` at each atom.
    pub fn from_fn<F: Fn(&TorusPoint) -> Vec<f64>>(base: &DiscreteMeasure, f: F) -> Result<Self> {
        let values = base.points().iter().map(f).collect();
        Self::new(base.clone(), values)
    }

    pub fn constant(base: &DiscreteMeasure, v: &[f64]) -> Result<Self> {
        Self::new(base.clone(), vec![v.to_vec(); base.len()])
    }

    pub fn base(&self) -> &DiscreteMeasure {
        &self.base
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            base: self.base.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|x| c * x).collect())
                .collect(),
        }
    }

    pub fn add(&self, other: &Covector) -> Result<Self> {
        self.check_base(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        Ok(Self {
            base: self.base.clone(),
            values,
        })
    }

    fn check_base(&self, other: &Covector) -> Result<()> {
        if !self.base.approx_eq(&other.base, 1e-12) {
            return Err(Error::InvalidArgument(
                "covectors live on different measures".into(),
            ));
        }
        Ok(())
    }

    /// `<a, b>_{L^2_mu}`.
    pub fn inner(&self, other: &Covector) -> Result<f64> {
        self.check_base(other)?;
        Ok(self
            .base
            .weights()
            .iter()
            .zip(self.values.iter().zip(&other.values))
            .map(|(w, (a, b))| w * dot(a, b))
            .sum())
    }

    /// `||v||_{L^q_mu}`.
    pub fn norm_lq(&self, q: f64) -> Result<f64> {
        if !(q >= 1.0) || !q.is_finite() {
            return Err(Error::InvalidArgument(format!("norm exponent {q}")));
        }
        let s: f64 = self
            .base
            .weights()
            .iter()
            .zip(&self.values)
            .map(|(w, v)| {
                if q == 2.0 {
                    w * dot(v, v)
                } else {
                    w * norm(v).powf(q)
                }
            })
            .sum();
        Ok(if q == 1.0 {
            s
        } else if q == 2.0 {
            s.sqrt()
        } else {
            s.powf(1.0 / q)
        })
    }

    pub fn max_abs_diff(&self, other: &Covector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// `p^pi(x) = x - int y dpi_x(y)` in the plan's displacement chart.
pub fn barycentric_covector(plan: &TransportPlan) -> Covector {
    let (n, m, d) = (plan.source.len(), plan.target.len(), plan.dim());
    let mut values = vec![vec![0.0; d]; n];
    for (i, (_, w)) in plan.source.iter().enumerate() {
        for j in 0..m {
            let c = plan.coupling[i * m + j];
            if c > 0.0 {
                for (k, v) in plan.displacement(i, j).iter().enumerate() {
                    values[i][k] -= c * v;
                }
            }
        }
        for v in values[i].iter_mut() {
            *v /= w;
        }
    }
    Covector {
        base: plan.source.clone(),
        values,
    }
}

/// `iint <p(x), y - x> dpi(x, y)`.
pub fn plan_pairing(p: &Covector, plan: &TransportPlan) -> Result<f64> {
    if p.base.len() != plan.source.len() || p.base.dim() != plan.dim() {
        return Err(Error::InvalidArgument(
            "covector is not based on the plan's source".into(),
        ));
    }
    Ok(plan
        .support()
        .map(|(i, j, c)| c * dot(&p.values[i], plan.displacement(i, j)))
        .sum())
}

/// Conditional measure of a plan at one source atom.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    pub index: usize,
    pub atom: TorusPoint,
    /// Row mass of the plan at this atom.
    pub mass: f64,
    /// Target atom indices carrying positive mass.
    pub targets: Vec<usize>,
    pub displacements: Vec<Vec<f64>>,
    pub measure: DiscreteMeasure,
}

/// Disintegrate with respect to the first marginal.
pub fn disintegrate(plan: &TransportPlan) -> Result<Vec<Conditional>> {
    let m = plan.target.len();
    let mut out = Vec::with_capacity(plan.source.len());
    for (i, x) in plan.source.points().iter().enumerate() {
        let row = &plan.coupling[i * m..(i + 1) * m];
        let mass: f64 = row.iter().sum();
        let targets: Vec<usize> = (0..m).filter(|&j| row[j] > 0.0).collect();
        let points = targets
            .iter()
            .map(|&j| plan.target.points()[j].clone())
            .collect();
        let weights = targets.iter().map(|&j| row[j] / mass).collect();
        let displacements = targets
            .iter()
            .map(|&j| plan.displacement(i, j).to_vec())
            .collect();
        out.push(Conditional {
            index: i,
            atom: x.clone(),
            mass,
            targets,
            displacements,
            measure: DiscreteMeasure::new(points, weights)?,
        });
    }
    Ok(out)
}

/// Rebuild a plan from its disintegration.
pub fn reintegrate(
    source: &DiscreteMeasure,
    target: &DiscreteMeasure,
    conditionals: &[Conditional],
) -> Result<TransportPlan> {
    let (n, m, d) = (source.len(), target.len(), source.dim());
    let mut coupling = vec![0.0; n * m];
    let mut disp = nearest_displacements(source, target);
    for c in conditionals {
        if c.index >= n {
            return Err(Error::InvalidPlan(format!(
                "conditional for atom {} out of range",
                c.index
            )));
        }
        for ((&j, w), v) in c
            .targets
            .iter()
            .zip(c.measure.weights())
            .zip(&c.displacements)
        {
            if j >= m {
                return Err(Error::InvalidPlan(format!("target index {j} out of range")));
            }
            coupling[c.index * m + j] = c.mass * w;
            disp[(c.index * m + j) * d..(c.index * m + j + 1) * d].copy_from_slice(v);
        }
    }
    TransportPlan::with_displacements(source.clone(), target.clone(), coupling, disp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m1(coords: &[f64], weights: &[f64]) -> DiscreteMeasure {
        let rows: Vec<Vec<f64>> = coords.iter().map(|&c| vec![c]).collect();
        DiscreteMeasure::from_coords(&rows, weights).unwrap()
    }

    #[test]
    fn plan_cost_examples() {
        let mu = m1(&[0.1, 0.7], &[0.5, 0.5]);
        let diag = TransportPlan::diagonal(&mu);
        for q in [1.0, 1.5, 2.0, 3.0] {
            assert_eq!(plan_cost(&diag, q).unwrap(), 0.0);
        }
        let p = TransportPlan::product(&m1(&[0.0], &[1.0]), &m1(&[0.3], &[1.0])).unwrap();
        assert_abs_diff_eq!(plan_cost(&p, 1.0).unwrap(), 0.3, epsilon = 1e-15);
        let a = m1(&[0.0, 0.5], &[0.5, 0.5]);
        let b = m1(&[0.1, 0.6], &[0.5, 0.5]);
        let ident = TransportPlan::new(a, b, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        let oracle = (0.5f64 * 0.01 + 0.5 * 0.01).sqrt();
        assert_abs_diff_eq!(plan_cost(&ident, 2.0).unwrap(), oracle, epsilon = 1e-15);
        assert!(plan_cost(&ident, 0.5).is_err());
    }

    #[test]
    fn optimal_plan_examples() {
        let a = m1(&[0.0, 0.5], &[0.5, 0.5]);
        let b = m1(&[0.1, 0.6], &[0.5, 0.5]);
        let plan = optimal_plan(&a, &b, 2.0).unwrap();
        // the two matchings: straight 0.1 each, crossed 0.4 each
        let straight = (0.5f64 * 0.01 + 0.5 * 0.01).sqrt();
        let crossed = (0.5f64 * 0.16 + 0.5 * 0.16).sqrt();
        assert_abs_diff_eq!(
            plan_cost(&plan, 2.0).unwrap(),
            straight.min(crossed),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(plan.entry(0, 0), 0.5);
        let w = wasserstein(&m1(&[0.9], &[1.0]), &m1(&[0.1], &[1.0]), 1.0).unwrap();
        assert_abs_diff_eq!(w, 0.2, epsilon = 1e-15);
        let mu = m1(&[0.2, 0.4, 0.9], &[0.2, 0.3, 0.5]);
        let same = optimal_plan(&mu, &mu, 2.0).unwrap();
        assert_eq!(plan_cost(&same, 2.0).unwrap(), 0.0);
        for i in 0..3 {
            assert_eq!(same.entry(i, i), mu.weights()[i]);
        }
    }

    #[test]
    fn composition_examples() {
        let mu = m1(&[0.0, 0.5], &[0.5, 0.5]);
        let diag = TransportPlan::diagonal(&mu);
        assert_eq!(compose_plans(&diag, &diag).unwrap(), diag);
        let p12 = TransportPlan::deterministic(&mu, &[vec![0.1], vec![0.1]]).unwrap();
        let right = TransportPlan::diagonal(p12.target());
        assert_eq!(compose_plans(&p12, &right).unwrap(), p12);
        let p23 = TransportPlan::deterministic(p12.target(), &[vec![0.1], vec![0.1]]).unwrap();
        let p13 = compose_plans(&p12, &p23).unwrap();
        assert_abs_diff_eq!(p13.target().points()[0].coords()[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(p13.entry(0, 0), 0.5, epsilon = 1e-15);
        assert_eq!(p13.entry(0, 1), 0.0);
        assert_abs_diff_eq!(p13.displacement(0, 0)[0], 0.2, epsilon = 1e-15);
        let other = TransportPlan::diagonal(&m1(&[0.3, 0.5], &[0.5, 0.5]));
        assert!(matches!(
            compose_plans(&p12, &other),
            Err(Error::MarginalMismatch(_))
        ));
    }

    #[test]
    fn inversion_examples() {
        let mu = m1(&[0.1, 0.6, 0.8], &[0.2, 0.3, 0.5]);
        let nu = m1(&[0.3, 0.95], &[0.4, 0.6]);
        let diag = TransportPlan::diagonal(&mu);
        assert_eq!(invert_plan(&diag), diag);
        let pi = optimal_plan(&mu, &nu, 2.0).unwrap();
        assert_eq!(invert_plan(&invert_plan(&pi)), pi);
        let back = optimal_plan(&nu, &mu, 2.0).unwrap();
        assert_abs_diff_eq!(
            plan_cost(&invert_plan(&pi), 2.0).unwrap(),
            plan_cost(&back, 2.0).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn barycentric_examples() {
        let mu = m1(&[0.1, 0.6], &[0.5, 0.5]);
        let zero = barycentric_covector(&TransportPlan::diagonal(&mu));
        assert!(zero.values().iter().all(|v| v[0] == 0.0));
        let p = TransportPlan::product(&m1(&[0.5], &[1.0]), &m1(&[0.7], &[1.0])).unwrap();
        assert_abs_diff_eq!(
            barycentric_covector(&p).values()[0][0],
            -0.2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn duality_identity_on_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mu = DiscreteMeasure::random(&mut rng, 5, 2, false).unwrap();
            let nu = DiscreteMeasure::random(&mut rng, 4, 2, false).unwrap();
            let pi = optimal_plan(&mu, &nu, 2.0).unwrap();
            let phi = Covector::new(
                mu.clone(),
                (0..5)
                    .map(|_| {
                        vec![
                            rand::Rng::gen::<f64>(&mut rng) - 0.5,
                            rand::Rng::gen::<f64>(&mut rng),
                        ]
                    })
                    .collect(),
            )
            .unwrap();
            // iint <phi(x), x - y> dpi
            let lhs = -plan_pairing(&phi, &pi).unwrap();
            let rhs = phi.inner(&barycentric_covector(&pi)).unwrap();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-15);
        }
    }

    #[test]
    fn disintegration_round_trip() {
        let mu = m1(&[0.1, 0.6], &[0.5, 0.5]);
        let nu = m1(&[0.2, 0.3, 0.9], &[0.2, 0.3, 0.5]);
        let diag = TransportPlan::diagonal(&mu);
        for c in disintegrate(&diag).unwrap() {
            assert_eq!(c.measure, DiscreteMeasure::dirac(c.atom.clone()));
        }
        let prod = TransportPlan::product(&mu, &nu).unwrap();
        for c in disintegrate(&prod).unwrap() {
            assert!(c.measure.approx_eq(&nu, 1e-15));
        }
        let pi = optimal_plan(&mu, &nu, 1.0).unwrap();
        let back = reintegrate(&mu, &nu, &disintegrate(&pi).unwrap()).unwrap();
        assert!(back.max_entry_diff(&pi) <= 1e-14);
    }

    #[test]
    fn json_dump_shape() {
        let mu = m1(&[0.25], &[1.0]);
        let text = TransportPlan::diagonal(&mu).to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["coupling"][0][0], 1.0);
        assert_eq!(v["source"][0]["x"][0], 0.25);
        assert_eq!(v["target"][0]["weight"], 1.0);
    }

    fn arb_measure(n: usize, d: usize) -> impl Strategy<Value = DiscreteMeasure> {
        (
            prop::collection::vec(prop::collection::vec(0.0f64..1.0, d), n),
            prop::collection::vec(0.1f64..1.0, n),
        )
            .prop_map(|(pts, w)| {
                let s: f64 = w.iter().sum();
                let mut w: Vec<f64> = w.iter().map(|x| x / s).collect();
                let r = 1.0 - w.iter().sum::<f64>();
                w[0] += r;
                DiscreteMeasure::from_coords(&pts, &w).unwrap()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn inversion_preserves_cost_exactly(mu in arb_measure(4, 2), nu in arb_measure(3, 2), q in 1.0f64..3.0) {
            let pi = optimal_plan(&mu, &nu, 2.0).unwrap();
            prop_assert_eq!(plan_cost(&invert_plan(&pi), q).unwrap(), plan_cost(&pi, q).unwrap());
        }

        #[test]
        fn composition_cost_is_subadditive(
            a in arb_measure(3, 2), b in arb_measure(4, 2), c in arb_measure(3, 2), p in 1.0f64..3.0,
        ) {
            let p12 = optimal_plan(&a, &b, 1.0).unwrap();
            let p23 = TransportPlan::product(&b, &c).unwrap();
            let p13 = compose_plans(&p12, &p23).unwrap();
            let lhs = plan_cost(&p13, p).unwrap();
            let rhs = plan_cost(&p12, p).unwrap() + plan_cost(&p23, p).unwrap();
            prop_assert!(rhs - lhs >= -1e-10);
            prop_assert!(p13.source().approx_eq(&a, 0.0));
        }

        #[test]
        fn wasserstein_is_symmetric(a in arb_measure(4, 1), b in arb_measure(5, 1)) {
            let ab = wasserstein(&a, &b, 2.0).unwrap();
            let ba = wasserstein(&b, &a, 2.0).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
        }
    }
}
