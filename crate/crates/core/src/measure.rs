//! Points, finitely supported probability measures and smooth test functions
//! on the flat unit torus.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a measure.
pub const MASS_TOL: f64 = 1e-12;

/// A point of the torus, every coordinate reduced to `[0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TorusPoint {
    coords: Vec<f64>,
}

/// Reduce a real number to the unit interval `[0, 1)`.
#[inline]
pub fn reduce(c: f64) -> f64 {
    let r = c.rem_euclid(1.0);
    // rem_euclid may round tiny negatives up to exactly 1.0
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Signed difference `b - a` moved into the window `[-1/2, 1/2]`.
#[inline]
pub fn wrap_scalar(delta: f64) -> f64 {
    delta - delta.round()
}

impl TorusPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidArgument(
                "point needs at least one coordinate".into(),
            ));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("point coordinates {coords:?}")));
        }
        Ok(Self {
            coords: coords.into_iter().map(reduce).collect(),
        })
    }

    /// Reduce a lifted (unwrapped) position.
    pub fn from_lift(lift: &[f64]) -> Result<Self> {
        Self::new(lift.to_vec())
    }

    pub fn origin(d: usize) -> Self {
        Self {
            coords: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Nearest-representative displacement from `self` to `other`.
    pub fn delta_to(&self, other: &TorusPoint) -> Result<Vec<f64>> {
        check_dim(self.dim(), other.dim())?;
        Ok(wrap_delta(&self.coords, &other.coords))
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Coordinatewise wrapped difference `b - a`.
pub fn wrap_delta(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| wrap_scalar(y - x)).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Geodesic distance on the flat torus.
pub fn torus_distance(a: &TorusPoint, b: &TorusPoint) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    Ok(norm(&wrap_delta(&a.coords, &b.coords)))
}

/// Probability measure with finitely many weighted atoms.
///
/// Atoms with zero weight are dropped at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    points: Vec<TorusPoint>,
    weights: Vec<f64>,
    dim: usize,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<TorusPoint>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if points.is_empty() {
            return Err(Error::InvalidMeasure("no atoms".into()));
        }
        let dim = points[0].dim();
        for p in &points {
            check_dim(dim, p.dim())?;
        }
        for &w in &weights {
            if !w.is_finite() {
                return Err(Error::NonFinite(format!("weight {w}")));
            }
            if w < 0.0 {
                return Err(Error::InvalidMeasure(format!("negative weight {w}")));
            }
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidMeasure(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        let (points, weights): (Vec<_>, Vec<_>) = points
            .into_iter()
            .zip(weights)
            .filter(|(_, w)| *w > 0.0)
            .unzip();
        Ok(Self {
            points,
            weights,
            dim,
        })
    }

    /// Equal weights on the given points.
    pub fn uniform(points: Vec<TorusPoint>) -> Result<Self> {
        let n = points.len().max(1);
        let weights = vec![1.0 / n as f64; points.len()];
        Self::new(points, weights)
    }

    pub fn dirac(point: TorusPoint) -> Self {
        let dim = point.dim();
        Self {
            points: vec![point],
            weights: vec![1.0],
            dim,
        }
    }

    /// Build from raw coordinate rows.
    pub fn from_coords(coords: &[Vec<f64>], weights: &[f64]) -> Result<Self> {
        let points = coords
            .iter()
            .map(|c| TorusPoint::new(c.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(points, weights.to_vec())
    }

    /// Convex combination `sum_i c_i m_i`; atom lists are concatenated, not merged.
    pub fn mixture(parts: &[(f64, &DiscreteMeasure)]) -> Result<Self> {
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (c, m) in parts {
            if *c < 0.0 || !c.is_finite() {
                return Err(Error::InvalidArgument(format!("mixture coefficient {c}")));
            }
            for (p, w) in m.iter() {
                points.push(p.clone());
                weights.push(c * w);
            }
        }
        Self::new(points, weights)
    }

    /// Random cloud of `n` atoms in dimension `d`; equal weights or Dirichlet-like random ones.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n: usize,
        d: usize,
        equal_weights: bool,
    ) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidArgument("need n >= 1 and d >= 1".into()));
        }
        let points = (0..n)
            .map(|_| TorusPoint::new((0..d).map(|_| rng.gen::<f64>()).collect()))
            .collect::<Result<Vec<_>>>()?;
        if equal_weights {
            return Self::uniform(points);
        }
        let raw: Vec<f64> = (0..n).map(|_| 0.05 + rng.gen::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        // push rounding residue into the largest atom
        let residue = 1.0 - weights.iter().sum::<f64>();
        let imax = (0..n).fold(0, |b, i| if weights[i] > weights[b] { i } else { b });
        weights[imax] += residue;
        Self::new(points, weights)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[TorusPoint] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TorusPoint, f64)> {
        self.points.iter().zip(self.weights.iter().copied())
    }

    /// `sum_k w_k f(x_k)` in atom order.
    pub fn integrate<F: Fn(&TorusPoint) -> f64>(&self, f: F) -> f64 {
        self.iter().map(|(p, w)| w * f(p)).sum()
    }

    /// `m_2 = sum_k w_k |x_k|^2` with coordinates in `[0, 1)`.
    pub fn second_moment(&self) -> f64 {
        self.integrate(|p| dot(p.coords(), p.coords()))
    }

    /// Mean in the `[0, 1)^d` chart.
    pub fn chart_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (p, w) in self.iter() {
            for (mi, c) in m.iter_mut().zip(p.coords()) {
                *mi += w * c;
            }
        }
        m
    }

    /// Same atoms and weights, each within `tol`.
    pub fn approx_eq(&self, other: &DiscreteMeasure, tol: f64) -> bool {
        self.len() == other.len()
            && self.dim == other.dim
            && self.iter().zip(other.iter()).all(|((p, w), (q, v))| {
                (w - v).abs() <= tol
                    && wrap_delta(p.coords(), q.coords())
                        .iter()
                        .all(|c| c.abs() <= tol)
            })
    }

    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let ncol = headers.len();
        if ncol < 2 || &headers[ncol - 1] != "weight" {
            return Err(Error::InvalidMeasure(
                "csv header must be x_1,...,x_d,weight".into(),
            ));
        }
        for (i, h) in headers.iter().take(ncol - 1).enumerate() {
            if h != format!("x_{}", i + 1) {
                return Err(Error::InvalidMeasure(format!(
                    "unexpected csv column `{h}`"
                )));
            }
        }
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let vals = record
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::InvalidMeasure(format!("bad number `{s}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != ncol {
                return Err(Error::InvalidMeasure("ragged csv row".into()));
            }
            points.push(TorusPoint::new(vals[..ncol - 1].to_vec())?);
            weights.push(vals[ncol - 1]);
        }
        Self::new(points, weights)
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.to_csv_writer(file)
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.dim).map(|i| format!("x_{i}")).collect();
        header.push("weight".into());
        wtr.write_record(&header)?;
        for (p, w) in self.iter() {
            let mut row: Vec<String> = p.coords().iter().map(|c| format!("{c:e}")).collect();
            row.push(format!("{w:e}"));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Product of one-dimensional trigonometric factors,
/// `scale * prod_i trig_i(2 pi k_i x_i)`, with `trig_i` sine or cosine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub freq: Vec<u32>,
    pub sine: Vec<bool>,
    pub scale: f64,
}

impl TestFunction {
    pub fn new(freq: Vec<u32>, sine: Vec<bool>, scale: f64) -> Result<Self> {
        if freq.len() != sine.len() || freq.is_empty() {
            return Err(Error::InvalidArgument(
                "frequency and phase lists must match".into(),
            ));
        }
        if !scale.is_finite() {
            return Err(Error::NonFinite("test function scale".into()));
        }
        Ok(Self { freq, sine, scale })
    }

    /// Same function with `scale = 1 / (2 pi |k|)`, making it 1-Lipschitz.
    pub fn normalized(freq: Vec<u32>, sine: Vec<bool>) -> Result<Self> {
        let k = (freq.iter().map(|&k| (k * k) as f64).sum::<f64>()).sqrt();
        let scale = if k > 0.0 { 1.0 / (2.0 * PI * k) } else { 1.0 };
        Self::new(freq, sine, scale)
    }

    pub fn dim(&self) -> usize {
        self.freq.len()
    }

    /// Upper bound on the Lipschitz constant.
    pub fn lipschitz_bound(&self) -> f64 {
        let k = (self.freq.iter().map(|&k| (k * k) as f64).sum::<f64>()).sqrt();
        self.scale.abs() * 2.0 * PI * k
    }

    fn factor(&self, i: usize, x: f64) -> (f64, f64) {
        let w = 2.0 * PI * self.freq[i] as f64;
        if self.sine[i] {
            ((w * x).sin(), w * (w * x).cos())
        } else {
            ((w * x).cos(), -w * (w * x).sin())
        }
    }

    /// Evaluate on any lift; the function is periodic.
    pub fn eval(&self, x: &[f64]) -> f64 {
        (0..self.dim())
            .map(|i| self.factor(i, x[i]).0)
            .product::<f64>()
            * self.scale
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let fs: Vec<(f64, f64)> = (0..d).map(|i| self.factor(i, x[i])).collect();
        (0..d)
            .map(|i| {
                let mut g = self.scale * fs[i].1;
                for (j, f) in fs.iter().enumerate() {
                    if j != i {
                        g *= f.0;
                    }
                }
                g
            })
            .collect()
    }

    /// The fixed dictionary: every product with per-axis frequency in {0,1,2},
    /// not all zero, each nonzero axis taking sine or cosine.
    pub fn dictionary(d: usize) -> Vec<TestFunction> {
        // per-axis options: (k, sine)
        let opts = [(0u32, false), (1, true), (1, false), (2, true), (2, false)];
        let mut out = Vec::new();
        let total = opts.len().pow(d as u32);
        for code in 0..total {
            let mut c = code;
            let mut freq = Vec::with_capacity(d);
            let mut sine = Vec::with_capacity(d);
            for _ in 0..d {
                let (k, s) = opts[c % opts.len()];
                c /= opts.len();
                freq.push(k);
                sine.push(s);
            }
            if freq.iter().all(|&k| k == 0) {
                continue;
            }
            out.push(TestFunction::normalized(freq, sine).expect("dictionary entry"));
        }
        out
    }
}

/// `max_phi |int phi d mu - int phi d nu|` over the test set.
pub fn bounded_lipschitz_gap(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    testset: &[TestFunction],
) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    check_dim(mu.dim(), nu.dim())?;
    let mut gap: f64 = 0.0;
    for f in testset {
        check_dim(mu.dim(), f.dim())?;
        if f.lipschitz_bound() > 1.0 + 1e-12 || f.scale.abs() > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(
                "test functions must be bounded by 1 and 1-Lipschitz".into(),
            ));
        }
        let a = mu.integrate(|p| f.eval(p.coords()));
        let b = nu.integrate(|p| f.eval(p.coords()));
        gap = gap.max((a - b).abs());
    }
    Ok(gap)
}
