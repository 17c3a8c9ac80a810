//! Derivatives of functionals along variation families, directional
//! derivatives, flat and intrinsic derivatives, and consistency harnesses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::extrapolate::{richardson, Extrapolation};
use crate::functionals::{flat_quotient, neumaier_sum, Functional};
use crate::measure::{DiscreteMeasure, TestFunction, TorusPoint};
use crate::transport::{optimal_plan, plan_pairing, Covector, TransportPlan};
use crate::variations::{
    check_admissibility, check_grid, fitted_exponent, geometric_grid, make_flat_variation,
    random_family, AdmissibilityReport, FamilyKind, TrajectoryEnsemble, VariationFamily,
};

/// Mixing weight used by flat-derivative probes.
pub const FLAT_PROBE_WEIGHT: f64 = 1e-5;

/// Levels of the default step grid for extrapolated limits.
pub const RICHARDSON_LEVELS: usize = 12;
pub const RICHARDSON_RATIO: f64 = 2.0;
pub const RICHARDSON_ORDER: usize = 6;

/// Thresholds deciding whether a residual sequence tends to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Verdict {
    /// The final residual must be below this (or the roundoff floor).
    pub abs_tol: f64,
    /// Alternatively, the log-log slope of the residuals must reach this.
    pub min_slope: f64,
}

impl Default for Verdict {
    fn default() -> Self {
        Self {
            abs_tol: 1e-6,
            min_slope: 0.9,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivativeReport {
    pub functional: String,
    pub kind: FamilyKind,
    pub q: f64,
    pub t_grid: Vec<f64>,
    /// `R(t) = |U(mu_t) - U(mu) - iint <p(x), y - x> dpi_t| / t`.
    pub residuals: Vec<f64>,
    pub slope: f64,
    pub final_residual: f64,
    /// Threshold the final residual was compared with.
    pub threshold: f64,
    pub is_derivative: bool,
    pub admissibility: AdmissibilityReport,
}

/// `t_k = h0 2^{-k}`, `k = 0..levels`, the default grid for extrapolated limits.
pub fn step_grid(h0: f64, levels: usize) -> Vec<f64> {
    (0..levels).map(|k| h0 * 0.5f64.powi(k as i32)).collect()
}

pub fn derivative_residual(
    u: &Functional,
    family: &VariationFamily,
    p: &Covector,
    q: f64,
    t_grid: &[f64],
) -> Result<DerivativeReport> {
    derivative_residual_with(u, family, p, q, t_grid, Verdict::default())
}

pub fn derivative_residual_with(
    u: &Functional,
    family: &VariationFamily,
    p: &Covector,
    q: f64,
    t_grid: &[f64],
    verdict: Verdict,
) -> Result<DerivativeReport> {
    if !p.base().approx_eq(family.base(), 1e-12) {
        return Err(Error::InvalidArgument(
            "covector is not based on the family's base measure".into(),
        ));
    }
    let testset = TestFunction::dictionary(family.base().dim());
    let adm = check_admissibility(family, q, t_grid, &testset)?;
    if !adm.admissible {
        return Err(Error::NotAdmissible(Box::new(adm)));
    }
    let u0 = u.evaluate(family.base());
    let residuals = t_grid
        .par_iter()
        .map(|&t| {
            let plan = family.evaluate(t)?;
            let pairing = plan_pairing(p, &plan)?;
            let r = (u.evaluate(plan.target()) - u0 - pairing).abs() / t;
            if !r.is_finite() {
                return Err(Error::NonFinite(format!("residual at t = {t}")));
            }
            Ok(r)
        })
        .collect::<Result<Vec<f64>>>()?;
    let half = t_grid.len() / 2;
    let slope = fitted_exponent(&t_grid[half..], &residuals[half..]);
    let final_residual = *residuals.last().expect("nonempty grid");
    let t_last = *t_grid.last().expect("nonempty grid");
    // below this the residual is indistinguishable from evaluation roundoff
    let floor = 1e3 * f64::EPSILON * u0.abs().max(1.0) / t_last;
    let threshold = verdict.abs_tol.max(floor);
    let is_derivative = final_residual < threshold || slope >= verdict.min_slope;
    Ok(DerivativeReport {
        functional: u.name().to_string(),
        kind: family.kind(),
        q,
        t_grid: t_grid.to_vec(),
        residuals,
        slope,
        final_residual,
        threshold,
        is_derivative,
        admissibility: adm,
    })
}

fn check_ratio(t_grid: &[f64]) -> Result<f64> {
    if t_grid.len() < 2 {
        return Err(Error::InvalidArgument(
            "extrapolation needs at least two steps".into(),
        ));
    }
    let ratio = t_grid[0] / t_grid[1];
    for w in t_grid.windows(2) {
        if !(w[1] > 0.0) || ((w[0] / w[1]) - ratio).abs() > 1e-9 * ratio {
            return Err(Error::InvalidArgument(
                "step grid must be geometric and decreasing".into(),
            ));
        }
    }
    if !(ratio > 1.0) {
        return Err(Error::InvalidArgument(
            "step grid must be decreasing".into(),
        ));
    }
    Ok(ratio)
}

fn extrapolated_quotient<F>(
    u: &Functional,
    base: &DiscreteMeasure,
    t_grid: &[f64],
    moved: F,
) -> Result<Extrapolation>
where
    F: Fn(f64) -> Result<DiscreteMeasure> + Sync,
{
    let ratio = check_ratio(t_grid)?;
    let u0 = u.evaluate(base);
    let quotients = t_grid
        .par_iter()
        .map(|&t| Ok((u.evaluate(&moved(t)?) - u0) / t))
        .collect::<Result<Vec<f64>>>()?;
    if quotients.iter().any(|q| !q.is_finite()) {
        return Err(Error::NonFinite(format!(
            "difference quotient of {}",
            u.name()
        )));
    }
    richardson(&quotients, ratio, RICHARDSON_ORDER)
}

/// `lim (U((Id + t psi)#mu) - U(mu)) / t` by extrapolation.
pub fn directional_derivative_map(
    u: &Functional,
    mu: &DiscreteMeasure,
    psi: &Covector,
    t_grid: &[f64],
) -> Result<f64> {
    if !psi.base().approx_eq(mu, 1e-12) {
        return Err(Error::InvalidArgument(
            "direction is not based on the measure".into(),
        ));
    }
    let e = extrapolated_quotient(u, mu, t_grid, |t| {
        let points = mu
            .points()
            .iter()
            .zip(psi.values())
            .map(|(x, v)| {
                TorusPoint::new(x.coords().iter().zip(v).map(|(a, b)| a + t * b).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        DiscreteMeasure::new(points, mu.weights().to_vec())
    })?;
    Ok(e.value)
}

/// `lim (U((1 - t) mu + t nu) - U(mu)) / t` along the flat family of `pi`.
pub fn directional_derivative_flat(
    u: &Functional,
    pi: &TransportPlan,
    t_grid: &[f64],
) -> Result<f64> {
    if t_grid.iter().any(|&t| t > 1.0) {
        return Err(Error::InvalidArgument(
            "flat steps must not exceed 1".into(),
        ));
    }
    let (mu, nu) = (pi.source(), pi.target());
    let e = extrapolated_quotient(u, mu, t_grid, |t| {
        DiscreteMeasure::mixture(&[(1.0 - t, mu), (t, nu)])
    })?;
    Ok(e.value)
}

/// `D_m U(m, x_k)` at every atom: fourth-order central differences in `y`
/// of the flat quotient at weight [`FLAT_PROBE_WEIGHT`].
pub fn intrinsic_derivative(
    u: &Functional,
    m: &DiscreteMeasure,
    grid_step: f64,
) -> Result<Covector> {
    if !(grid_step > 0.0) || grid_step > 0.1 {
        return Err(Error::InvalidArgument(format!(
            "grid step must lie in (0, 0.1], got {grid_step}"
        )));
    }
    let d = m.dim();
    let values = m
        .points()
        .par_iter()
        .map(|x| {
            (0..d)
                .map(|c| {
                    let at = |off: f64| -> Result<f64> {
                        let mut y = x.coords().to_vec();
                        y[c] += off;
                        flat_quotient(u, m, &TorusPoint::new(y)?, FLAT_PROBE_WEIGHT)
                    };
                    let h = grid_step;
                    let g =
                        (at(-2.0 * h)? - 8.0 * at(-h)? + 8.0 * at(h)? - at(2.0 * h)?) / (12.0 * h);
                    if !g.is_finite() {
                        return Err(Error::NonFinite("intrinsic derivative".into()));
                    }
                    Ok(g)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Covector::new(m.clone(), values)
}

/// `int P d(nu - mu)` for the flat derivative `P` of `u` at `mu`.
pub fn flat_pairing(u: &Functional, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Option<f64> {
    let a = neumaier_sum(
        nu.iter()
            .map(|(y, w)| w * u.flat_derivative(mu, y).unwrap_or(f64::NAN)),
    );
    let b = neumaier_sum(
        mu.iter()
            .map(|(x, w)| w * u.flat_derivative(mu, x).unwrap_or(f64::NAN)),
    );
    let v = a - b;
    v.is_finite().then_some(v)
}

/// Per-kind summary in an [`EquivalenceReport`].
#[derive(Debug, Clone, Serialize)]
pub struct KindSummary {
    pub kind: FamilyKind,
    pub q: f64,
    pub max_final_residual: f64,
    pub all_derivative: bool,
    /// Samples where the family failed the admissibility check.
    pub not_admissible: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub functional: String,
    pub samples: usize,
    pub seed: u64,
    pub kinds: Vec<KindSummary>,
    /// `max |D_m U - p_m|` over atoms and samples.
    pub intrinsic_max_error: f64,
    /// `max |directional map derivative - int <p, psi> dmu|`.
    pub map_max_error: f64,
    /// `max |directional flat derivative - iint <p(x), y - x> dpi|`.
    pub flat_pairing_max_error: f64,
    /// `max |directional flat derivative - int P d(nu - mu)|`.
    pub flat_potential_max_error: f64,
}

/// Default derivative grid: `t_k = 2^{-k}`, `k = 1..=20`.
pub fn default_residual_grid() -> Vec<f64> {
    geometric_grid(1.0, 20)
}

/// Exponent used for each family kind in the harness; flat families are only
/// admissible for `q = 1`.
pub fn harness_q(kind: FamilyKind) -> f64 {
    if kind == FamilyKind::Flat {
        1.0
    } else {
        2.0
    }
}

struct SampleOutcome {
    residuals: Vec<(f64, bool, bool)>,
    intrinsic: f64,
    map: f64,
    flat_pairing: f64,
    flat_potential: f64,
}

pub fn equivalence_harness(
    u: &Functional,
    samples: &[DiscreteMeasure],
    seed: u64,
) -> Result<EquivalenceReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no sample measures".into()));
    }
    if !u.has_closed_gradient() {
        return Err(Error::InvalidArgument(format!(
            "{} has no closed-form gradient",
            u.name()
        )));
    }
    let grid = default_residual_grid();
    let map_grid = step_grid(0.125, RICHARDSON_LEVELS);
    let flat_grid = step_grid(1.0, RICHARDSON_LEVELS);
    let outcomes = samples
        .par_iter()
        .enumerate()
        .map(|(idx, m)| -> Result<SampleOutcome> {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(idx as u64 + 1)),
            );
            let p = u.closed_gradient(m).expect("checked above");
            let mut residuals = Vec::new();
            for kind in FamilyKind::ELEMENTARY {
                let fam = random_family(kind, m, &mut rng)?;
                match derivative_residual(u, &fam, &p, harness_q(kind), &grid) {
                    Ok(rep) => residuals.push((rep.final_residual, rep.is_derivative, true)),
                    Err(Error::NotAdmissible(_)) => residuals.push((f64::NAN, false, false)),
                    Err(e) => return Err(e),
                }
            }
            let intrinsic = intrinsic_derivative(u, m, 1e-4)?.max_abs_diff(&p);
            let psi = Covector::new(
                m.clone(),
                (0..m.len())
                    .map(|_| (0..m.dim()).map(|_| rng.gen::<f64>() - 0.5).collect())
                    .collect(),
            )?;
            let map = (directional_derivative_map(u, m, &psi, &map_grid)? - p.inner(&psi)?).abs();
            let nu = DiscreteMeasure::random(&mut rng, m.len().clamp(1, 8), m.dim(), false)?;
            let pi = optimal_plan(m, &nu, 2.0)?;
            let flat = directional_derivative_flat(u, &pi, &flat_grid)?;
            let flat_pairing = (flat - plan_pairing(&p, &pi)?).abs();
            let flat_potential = flat_pairing_error(u, m, &nu, flat);
            Ok(SampleOutcome {
                residuals,
                intrinsic,
                map,
                flat_pairing,
                flat_potential,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let kinds = FamilyKind::ELEMENTARY
        .iter()
        .enumerate()
        .map(|(k, &kind)| {
            let rows: Vec<&(f64, bool, bool)> = outcomes.iter().map(|o| &o.residuals[k]).collect();
            KindSummary {
                kind,
                q: harness_q(kind),
                max_final_residual: rows.iter().map(|r| r.0).fold(0.0, |a, b| {
                    if b.is_nan() {
                        f64::NAN
                    } else {
                        a.max(b)
                    }
                }),
                all_derivative: rows.iter().all(|r| r.1),
                not_admissible: rows.iter().filter(|r| !r.2).count(),
            }
        })
        .collect();
    let fold = |f: fn(&SampleOutcome) -> f64| outcomes.iter().map(f).fold(0.0, f64::max);
    Ok(EquivalenceReport {
        functional: u.name().to_string(),
        samples: samples.len(),
        seed,
        kinds,
        intrinsic_max_error: fold(|o| o.intrinsic),
        map_max_error: fold(|o| o.map),
        flat_pairing_max_error: fold(|o| o.flat_pairing),
        flat_potential_max_error: fold(|o| o.flat_potential),
    })
}

fn flat_pairing_error(
    u: &Functional,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    value: f64,
) -> f64 {
    match flat_pairing(u, mu, nu) {
        Some(v) => (value - v).abs(),
        None => f64::NAN,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IntegralFormReport {
    pub functional: String,
    pub times: Vec<f64>,
    /// `U(mu_t) - U(mu_0) - int_0^t int <p, v> dmu_s ds` at each node.
    pub defects: Vec<f64>,
    /// Max over node pairs `(s, t)` of the defect of the increment.
    pub max_defect: f64,
}

/// Compare `U(mu_t) - U(mu_s)` with the trapezoidal quadrature of
/// `int <p_{mu_tau}, v_tau> dmu_tau` along the nodes of `curve`.
pub fn integral_form_check(
    u: &Functional,
    curve: &TrajectoryEnsemble,
) -> Result<IntegralFormReport> {
    let vel = curve
        .velocities()
        .ok_or_else(|| Error::InvalidArgument("the curve carries no velocity samples".into()))?;
    if !u.has_closed_gradient() {
        return Err(Error::InvalidArgument(format!(
            "{} has no closed-form gradient",
            u.name()
        )));
    }
    let times = curve.times().to_vec();
    let nodes = (0..times.len())
        .into_par_iter()
        .map(|i| {
            let m = curve.node_marginal(i)?;
            let p = u.closed_gradient(&m).expect("checked above");
            let v = Covector::new(m.clone(), vel.iter().map(|path| path[i].clone()).collect())?;
            Ok((u.evaluate(&m), p.inner(&v)?))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let mut defects = Vec::with_capacity(times.len());
    let mut integral = 0.0;
    for i in 0..times.len() {
        if i > 0 {
            integral += 0.5 * (times[i] - times[i - 1]) * (nodes[i].1 + nodes[i - 1].1);
        }
        defects.push(nodes[i].0 - nodes[0].0 - integral);
    }
    let hi = defects.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = defects.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(IntegralFormReport {
        functional: u.name().to_string(),
        times,
        defects,
        max_defect: hi - lo,
    })
}

/// Derivative report for `U` along its own flat family towards `nu`, with the
/// closed-form covector as candidate.
pub fn flat_family_report(
    u: &Functional,
    pi: &TransportPlan,
    t_grid: &[f64],
) -> Result<DerivativeReport> {
    check_grid(t_grid, 1.0)?;
    let fam = make_flat_variation(pi, 1.0)?;
    let p = u.closed_gradient(pi.source()).ok_or_else(|| {
        Error::InvalidArgument(format!("{} has no closed-form gradient", u.name()))
    })?;
    derivative_residual(u, &fam, &p, 1.0, t_grid)
}
