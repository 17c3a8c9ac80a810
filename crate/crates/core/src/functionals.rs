//! Functionals on discrete measures with closed-form derivatives.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::measure::{wrap_delta, DiscreteMeasure, TorusPoint};
use crate::transport::Covector;

const TAU: f64 = 2.0 * PI;

/// Compensated (Neumaier) sum.
pub fn neumaier_sum<I: IntoIterator<Item = f64>>(terms: I) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for x in terms {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

/// Smooth periodic potentials for linear functionals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Potential {
    /// `sin(2 pi x_1)`
    Sin,
    /// `cos(2 pi x_1)`
    Cos,
    /// `sin(2 pi x_1) + cos(2 pi x_d)`
    SinCos,
}

impl Potential {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Potential::Sin => (TAU * x[0]).sin(),
            Potential::Cos => (TAU * x[0]).cos(),
            Potential::SinCos => (TAU * x[0]).sin() + (TAU * x[x.len() - 1]).cos(),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut g = vec![0.0; d];
        match self {
            Potential::Sin => g[0] = TAU * (TAU * x[0]).cos(),
            Potential::Cos => g[0] = -TAU * (TAU * x[0]).sin(),
            Potential::SinCos => {
                g[0] += TAU * (TAU * x[0]).cos();
                g[d - 1] -= TAU * (TAU * x[d - 1]).sin();
            }
        }
        g
    }
}

/// Interaction kernels `W(z) = (1/d) sum_i cos(2 pi k z_i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub freq: f64,
}

impl Kernel {
    pub fn eval(&self, z: &[f64]) -> f64 {
        z.iter().map(|c| (TAU * self.freq * c).cos()).sum::<f64>() / z.len() as f64
    }

    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let d = z.len() as f64;
        z.iter()
            .map(|c| -TAU * self.freq * (TAU * self.freq * c).sin() / d)
            .collect()
    }
}

type EvalFn = Arc<dyn Fn(&DiscreteMeasure) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&DiscreteMeasure) -> Covector + Send + Sync>;
type FlatFn = Arc<dyn Fn(&DiscreteMeasure, &TorusPoint) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Body {
    Linear(Potential),
    Potential2,
    Interaction(Kernel),
    Variance,
    Constant(f64),
    Custom {
        eval: EvalFn,
        grad: Option<GradFn>,
        flat: Option<FlatFn>,
    },
}

/// A functional `U : P(T^d) -> R`.
#[derive(Clone)]
pub struct Functional {
    name: String,
    body: Body,
}

impl fmt::Debug for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Functional")
            .field("name", &self.name)
            .finish()
    }
}

impl Functional {
    /// Registry lookup. Known names: `linear:sin`, `linear:cos`,
    /// `linear:sincos`, `potential2`, `interaction:cos`, `interaction:cos2`,
    /// `variance`, `constant` and `constant:<c>`.
    pub fn builtin(name: &str) -> Result<Self> {
        let body = match name {
            "linear:sin" => Body::Linear(Potential::Sin),
            "linear:cos" => Body::Linear(Potential::Cos),
            "linear:sincos" => Body::Linear(Potential::SinCos),
            "potential2" => Body::Potential2,
            "interaction:cos" => Body::Interaction(Kernel { freq: 1.0 }),
            "interaction:cos2" => Body::Interaction(Kernel { freq: 2.0 }),
            "variance" => Body::Variance,
            "constant" => Body::Constant(0.0),
            other => match other.strip_prefix("constant:").map(str::parse::<f64>) {
                Some(Ok(c)) if c.is_finite() => Body::Constant(c),
                _ => return Err(Error::UnknownBuiltin(other.to_string())),
            },
        };
        Ok(Self {
            name: name.to_string(),
            body,
        })
    }

    /// A user-supplied functional with optional derivatives.
    pub fn custom<E>(name: &str, eval: E, grad: Option<GradFn>, flat: Option<FlatFn>) -> Self
    where
        E: Fn(&DiscreteMeasure) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.to_string(),
            body: Body::Custom {
                eval: Arc::new(eval),
                grad,
                flat,
            },
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn evaluate(&self, m: &DiscreteMeasure) -> f64 {
        match &self.body {
            Body::Linear(phi) => neumaier_sum(m.iter().map(|(p, w)| w * phi.eval(p.coords()))),
            Body::Potential2 => neumaier_sum(
                m.iter()
                    .map(|(p, w)| w * (TAU * p.coords()[0]).sin().powi(2)),
            ),
            Body::Interaction(k) => neumaier_sum(m.iter().flat_map(|(x, a)| {
                m.iter()
                    .map(move |(y, b)| a * b * k.eval(&wrap_delta(y.coords(), x.coords())))
            })),
            Body::Variance => {
                let mean = m.chart_mean();
                neumaier_sum(m.iter().map(|(p, w)| {
                    w * p
                        .coords()
                        .iter()
                        .zip(&mean)
                        .map(|(c, mu)| (c - mu) * (c - mu))
                        .sum::<f64>()
                }))
            }
            Body::Constant(c) => *c,
            Body::Custom { eval, .. } => eval(m),
        }
    }

    /// Affine in the measure, so flat quotients do not depend on the step.
    pub fn is_affine(&self) -> bool {
        matches!(
            self.body,
            Body::Linear(_) | Body::Potential2 | Body::Constant(_)
        )
    }

    pub fn has_closed_gradient(&self) -> bool {
        !matches!(&self.body, Body::Custom { grad: None, .. })
    }

    /// The candidate derivative covector `p_m`.
    pub fn closed_gradient(&self, m: &DiscreteMeasure) -> Option<Covector> {
        let d = m.dim();
        let values: Vec<Vec<f64>> = match &self.body {
            Body::Linear(phi) => m
                .points()
                .iter()
                .map(|p| phi.gradient(p.coords()))
                .collect(),
            Body::Potential2 => m
                .points()
                .iter()
                .map(|p| {
                    let mut g = vec![0.0; d];
                    g[0] = PI * 2.0 * (2.0 * TAU * p.coords()[0]).sin();
                    g
                })
                .collect(),
            Body::Interaction(k) => m
                .points()
                .iter()
                .map(|x| {
                    let mut g = vec![0.0; d];
                    for (y, b) in m.iter() {
                        let gw = k.gradient(&wrap_delta(y.coords(), x.coords()));
                        for c in 0..d {
                            g[c] += 2.0 * b * gw[c];
                        }
                    }
                    g
                })
                .collect(),
            Body::Variance => {
                let mean = m.chart_mean();
                m.points()
                    .iter()
                    .map(|p| {
                        p.coords()
                            .iter()
                            .zip(&mean)
                            .map(|(c, mu)| 2.0 * (c - mu))
                            .collect()
                    })
                    .collect()
            }
            Body::Constant(_) => vec![vec![0.0; d]; m.len()],
            Body::Custom { grad, .. } => return grad.as_ref().map(|g| g(m)),
        };
        Some(Covector::new(m.clone(), values).expect("finite gradient"))
    }

    /// Flat derivative `delta U / delta m (m, y)` before normalization.
    pub fn flat_derivative(&self, m: &DiscreteMeasure, y: &TorusPoint) -> Option<f64> {
        let yc = y.coords();
        match &self.body {
            Body::Linear(phi) => Some(phi.eval(yc)),
            Body::Potential2 => Some((TAU * yc[0]).sin().powi(2)),
            Body::Interaction(k) => Some(
                2.0 * neumaier_sum(
                    m.iter()
                        .map(|(x, b)| b * k.eval(&wrap_delta(x.coords(), yc))),
                ),
            ),
            Body::Variance => {
                let mean = m.chart_mean();
                Some(
                    yc.iter()
                        .zip(&mean)
                        .map(|(c, mu)| c * c - 2.0 * c * mu)
                        .sum(),
                )
            }
            Body::Constant(_) => Some(0.0),
            Body::Custom { flat, .. } => flat.as_ref().map(|f| f(m, y)),
        }
    }

    /// Flat derivative shifted to have zero `m`-average.
    pub fn normalized_flat_derivative(&self, m: &DiscreteMeasure, y: &TorusPoint) -> Option<f64> {
        let raw = self.flat_derivative(m, y)?;
        let avg = neumaier_sum(
            m.iter()
                .map(|(x, w)| w * self.flat_derivative(m, x).unwrap_or(0.0)),
        );
        Some(raw - avg)
    }
}

/// `(U((1 - s) m + s delta_y) - U(m)) / s` without recentering.
pub fn flat_quotient(u: &Functional, m: &DiscreteMeasure, y: &TorusPoint, s: f64) -> Result<f64> {
    if !(s > 0.0 && s <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "mixing weight must lie in (0, 1e-2], got {s}"
        )));
    }
    let dy = DiscreteMeasure::dirac(y.clone());
    if u.is_affine() {
        return Ok(u.evaluate(&dy) - u.evaluate(m));
    }
    let mixed = DiscreteMeasure::mixture(&[(1.0 - s, m), (s, &dy)])?;
    let q = (u.evaluate(&mixed) - u.evaluate(m)) / s;
    if !q.is_finite() {
        return Err(Error::NonFinite(format!(
            "flat quotient of {} at s = {s}",
            u.name()
        )));
    }
    Ok(q)
}

/// Flat difference quotient with `m' = delta_y`, recentred to zero `m`-average.
pub fn numeric_flat_derivative(
    u: &Functional,
    m: &DiscreteMeasure,
    y: &TorusPoint,
    s: f64,
) -> Result<f64> {
    let q = flat_quotient(u, m, y, s)?;
    let avg = neumaier_sum(
        m.iter()
            .map(|(x, w)| flat_quotient(u, m, x, s).map(|v| w * v))
            .collect::<Result<Vec<_>>>()?,
    );
    Ok(q - avg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(c: &[f64]) -> TorusPoint {
        TorusPoint::new(c.to_vec()).unwrap()
    }

    #[test]
    fn builtin_examples() {
        let u = Functional::builtin("linear:cos").unwrap();
        let m = DiscreteMeasure::dirac(pt(&[0.0, 0.0]));
        assert_eq!(u.evaluate(&m), 1.0);
        let g = u.closed_gradient(&m).unwrap();
        assert!(g.values()[0].iter().all(|c| c.abs() < 1e-15));
        let u = Functional::builtin("linear:sin").unwrap();
        assert_abs_diff_eq!(
            u.evaluate(&DiscreteMeasure::dirac(pt(&[0.25]))),
            1.0,
            epsilon = 1e-15
        );
        let u = Functional::builtin("interaction:cos").unwrap();
        for a in [0.0, 0.37, 0.9] {
            assert_abs_diff_eq!(
                u.evaluate(&DiscreteMeasure::dirac(pt(&[a, 0.2]))),
                1.0,
                epsilon = 1e-15
            );
        }
        assert!(matches!(
            Functional::builtin("entropy"),
            Err(Error::UnknownBuiltin(_))
        ));
        assert_eq!(
            Functional::builtin("constant:2.5").unwrap().evaluate(&m),
            2.5
        );
    }

    #[test]
    fn variance_matches_second_moment_form() {
        let m = DiscreteMeasure::from_coords(&[vec![0.4], vec![0.6]], &[0.5, 0.5]).unwrap();
        let u = Functional::builtin("variance").unwrap();
        let mean = m.chart_mean()[0];
        assert_abs_diff_eq!(
            u.evaluate(&m),
            m.second_moment() - mean * mean,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(u.evaluate(&m), 0.01, epsilon = 1e-15);
    }

    #[test]
    fn flat_quotient_examples() {
        let u = Functional::builtin("linear:sin").unwrap();
        let m = DiscreteMeasure::from_coords(&[vec![0.1], vec![0.45], vec![0.8]], &[0.2, 0.3, 0.5])
            .unwrap();
        let y = pt(&[0.33]);
        let oracle = (TAU * 0.33).sin() - u.evaluate(&m);
        let vals: Vec<f64> = [1e-2, 5e-3, 2e-3, 1e-3]
            .iter()
            .map(|&s| numeric_flat_derivative(&u, &m, &y, s).unwrap())
            .collect();
        for v in &vals {
            assert_abs_diff_eq!(*v, oracle, epsilon = 1e-12);
        }
        let var = Functional::builtin("variance").unwrap();
        let q =
            numeric_flat_derivative(&var, &DiscreteMeasure::dirac(pt(&[0.0])), &pt(&[0.0]), 1e-3)
                .unwrap();
        assert_eq!(q, 0.0);
        let int = Functional::builtin("interaction:cos").unwrap();
        let d0 = DiscreteMeasure::dirac(pt(&[0.0]));
        let q = numeric_flat_derivative(&int, &d0, &pt(&[0.5]), 1e-6).unwrap();
        assert_abs_diff_eq!(q, 2.0 * ((PI).cos() - 1.0), epsilon = 1e-5);
        assert_abs_diff_eq!(
            int.normalized_flat_derivative(&d0, &pt(&[0.5])).unwrap(),
            -4.0,
            epsilon = 1e-14
        );
        assert!(numeric_flat_derivative(&int, &d0, &pt(&[0.5]), 0.1).is_err());
    }

    #[test]
    fn closed_gradient_is_the_gradient_of_the_flat_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-4;
        for name in [
            "linear:sin",
            "linear:cos",
            "linear:sincos",
            "potential2",
            "interaction:cos",
            "interaction:cos2",
            "variance",
            "constant",
        ] {
            let u = Functional::builtin(name).unwrap();
            let pts: Vec<Vec<f64>> = (0..6)
                .map(|_| vec![0.2 + 0.6 * rng.gen::<f64>(), 0.2 + 0.6 * rng.gen::<f64>()])
                .collect();
            let m = DiscreteMeasure::from_coords(&pts, &[1.0 / 6.0; 6]).unwrap();
            let g = u.closed_gradient(&m).unwrap();
            for (k, x) in m.points().iter().enumerate() {
                for c in 0..2 {
                    let at = |off: f64| {
                        let mut a = x.coords().to_vec();
                        a[c] += off;
                        u.flat_derivative(&m, &pt(&a)).unwrap()
                    };
                    let fd = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
                    assert!(
                        (fd - g.values()[k][c]).abs() < 1e-6,
                        "{name}: {fd} vs {}",
                        g.values()[k][c]
                    );
                }
            }
        }
    }

    #[test]
    fn neumaier_is_more_accurate_than_naive() {
        let terms = [1.0, 1e100, 1.0, -1e100];
        assert_eq!(neumaier_sum(terms), 2.0);
    }
}
