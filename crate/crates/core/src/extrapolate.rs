//! Richardson extrapolation of sequences sampled on a geometric step grid.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Extrapolation {
    pub value: f64,
    pub error_estimate: f64,
    /// Row (step level) and column (elimination order) of the selected entry.
    pub level: usize,
    pub order: usize,
}

/// Extrapolate `values[k] = A(h0 / ratio^k)` to `h -> 0`, assuming an error
/// expansion in integer powers of `h`.
///
/// Up to `order` elimination columns are built. The returned entry is the one
/// with the smallest error estimate, the estimate being the difference to the
/// previous level in the same column.
pub fn richardson(values: &[f64], ratio: f64, order: usize) -> Result<Extrapolation> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("nothing to extrapolate".into()));
    }
    if !(ratio > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "step ratio must exceed 1, got {ratio}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("extrapolation input".into()));
    }
    let n = values.len();
    if n == 1 {
        return Ok(Extrapolation {
            value: values[0],
            error_estimate: f64::INFINITY,
            level: 0,
            order: 0,
        });
    }
    let mut prev: Vec<f64> = values.to_vec();
    let mut best = Extrapolation {
        value: values[n - 1],
        error_estimate: (values[n - 1] - values[n - 2]).abs(),
        level: n - 1,
        order: 0,
    };
    for j in 1..=order.min(n - 1) {
        let f = ratio.powi(j as i32);
        let mut cur = vec![f64::NAN; n];
        for k in j..n {
            cur[k] = (f * prev[k] - prev[k - 1]) / (f - 1.0);
            if k == j {
                continue;
            }
            let err = (cur[k] - cur[k - 1]).abs();
            if err <= best.error_estimate {
                best = Extrapolation {
                    value: cur[k],
                    error_estimate: err,
                    level: k,
                    order: j,
                };
            }
        }
        prev = cur;
    }
    Ok(best)
}
