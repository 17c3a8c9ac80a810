//! Transportation simplex on a dense cost matrix.
//!
//! Basic feasible solutions are spanning trees over the bipartite row/column
//! graph, started from the northwest corner rule and improved with u-v
//! potentials. Dantzig pricing switches to Bland's rule after a run of
//! degenerate pivots.

use std::collections::VecDeque;

use crate::error::{Error, Result};

const DEGENERATE_SWITCH: usize = 50;

/// Solution of a transportation problem.
#[derive(Debug, Clone)]
pub struct TransportSolution {
    /// Row-major `n x m` flows.
    pub flow: Vec<f64>,
    pub cost: f64,
    pub pivots: usize,
}

struct Tree {
    n: usize,
    m: usize,
    // (row, col) of basic cells
    basis: Vec<(usize, usize)>,
}

impl Tree {
    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        // node ids: rows 0..n, columns n..n+m; edge payload is basis slot
        let mut adj = vec![Vec::new(); self.n + self.m];
        for (slot, &(i, j)) in self.basis.iter().enumerate() {
            adj[i].push((self.n + j, slot));
            adj[self.n + j].push((i, slot));
        }
        adj
    }

    fn potentials(
        &self,
        adj: &[Vec<(usize, usize)>],
        cost: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, m) = (self.n, self.m);
        let mut pot = vec![f64::NAN; n + m];
        let mut seen = vec![false; n + m];
        pot[0] = 0.0;
        seen[0] = true;
        let mut queue = VecDeque::from([0usize]);
        while let Some(a) = queue.pop_front() {
            for &(b, slot) in &adj[a] {
                if seen[b] {
                    continue;
                }
                let (i, j) = self.basis[slot];
                let c = cost[i * m + j];
                // c_ij = u_i + v_j
                pot[b] = c - pot[a];
                seen[b] = true;
                queue.push_back(b);
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::SolverFailed {
                pivots: 0,
                reason: "basis is not a spanning tree".into(),
            });
        }
        Ok((pot[..n].to_vec(), pot[n..].to_vec()))
    }

    /// Basis slots on the tree path from row `i` to column `j`, in order.
    fn path(&self, adj: &[Vec<(usize, usize)>], i: usize, j: usize) -> Vec<usize> {
        let total = self.n + self.m;
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; total];
        let mut seen = vec![false; total];
        seen[i] = true;
        let target = self.n + j;
        let mut queue = VecDeque::from([i]);
        while let Some(a) = queue.pop_front() {
            if a == target {
                break;
            }
            for &(b, slot) in &adj[a] {
                if !seen[b] {
                    seen[b] = true;
                    parent[b] = Some((a, slot));
                    queue.push_back(b);
                }
            }
        }
        let mut slots = Vec::new();
        let mut node = target;
        while node != i {
            let (prev, slot) = parent[node].expect("tree is connected");
            slots.push(slot);
            node = prev;
        }
        slots.reverse();
        slots
    }
}

/// Minimize `sum c_ij x_ij` subject to row sums `a` and column sums `b`.
///
/// `a` and `b` must be nonnegative with equal totals (up to rounding).
pub fn solve(a: &[f64], b: &[f64], cost: &[f64]) -> Result<TransportSolution> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 || cost.len() != n * m {
        return Err(Error::InvalidArgument(
            "cost matrix shape does not match marginals".into(),
        ));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("transport cost matrix".into()));
    }
    let mut flow = vec![0.0; n * m];
    let mut basis = Vec::with_capacity(n + m - 1);

    // northwest corner
    let (mut i, mut j) = (0, 0);
    let mut ra = a[0];
    let mut rb = b[0];
    loop {
        let x = ra.min(rb);
        flow[i * m + j] = x;
        basis.push((i, j));
        ra -= x;
        rb -= x;
        if i == n - 1 && j == m - 1 {
            break;
        }
        if j == m - 1 || (i < n - 1 && ra <= rb) {
            i += 1;
            ra = a[i];
        } else {
            j += 1;
            rb = b[j];
        }
    }
    let mut tree = Tree { n, m, basis };
    let scale = cost.iter().fold(0.0f64, |s, c| s.max(c.abs())).max(1.0);
    let tol = 1e-13 * scale;
    let max_pivots = 50 * n * m + 1000;
    let mut in_basis = vec![false; n * m];
    for &(i, j) in &tree.basis {
        in_basis[i * m + j] = true;
    }

    let mut degenerate_run = 0usize;
    let mut pivots = 0usize;
    loop {
        let adj = tree.adjacency();
        let (u, v) = tree.potentials(&adj, cost)?;
        let bland = degenerate_run >= DEGENERATE_SWITCH;
        let mut entering: Option<(usize, usize)> = None;
        let mut best = -tol;
        'scan: for i in 0..n {
            for j in 0..m {
                if in_basis[i * m + j] {
                    continue;
                }
                let r = cost[i * m + j] - u[i] - v[j];
                if r < best {
                    entering = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                    best = r;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            break;
        };
        if pivots >= max_pivots {
            return Err(Error::SolverFailed {
                pivots,
                reason: format!(
                    "pivot limit reached (n = {n}, m = {m}, most negative reduced cost {best:e})"
                ),
            });
        }
        // cycle: entering cell (+), then path cells alternate -, +, -, ...
        let path = tree.path(&adj, ei, ej);
        let mut theta = f64::INFINITY;
        let mut leave: Option<usize> = None;
        for (k, &slot) in path.iter().enumerate() {
            if k % 2 == 0 {
                let (i, j) = tree.basis[slot];
                let x = flow[i * m + j];
                let better = match leave {
                    None => true,
                    Some(l) => {
                        let (li, lj) = tree.basis[l];
                        x < theta || (x == theta && i * m + j < li * m + lj)
                    }
                };
                if better {
                    theta = x;
                    leave = Some(slot);
                }
            }
        }
        let leave = leave.expect("cycle has a decreasing cell");
        for (k, &slot) in path.iter().enumerate() {
            let (i, j) = tree.basis[slot];
            if k % 2 == 0 {
                flow[i * m + j] -= theta;
            } else {
                flow[i * m + j] += theta;
            }
        }
        let (li, lj) = tree.basis[leave];
        flow[li * m + lj] = 0.0;
        flow[ei * m + ej] = theta;
        in_basis[li * m + lj] = false;
        in_basis[ei * m + ej] = true;
        tree.basis[leave] = (ei, ej);
        pivots += 1;
        if theta == 0.0 {
            degenerate_run += 1;
        } else {
            degenerate_run = 0;
        }
    }
    let cost_value = flow.iter().zip(cost).map(|(x, c)| x * c).sum();
    Ok(TransportSolution {
        flow,
        cost: cost_value,
        pivots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_prefers_cheap_diagonal() {
        let sol = solve(&[0.5, 0.5], &[0.5, 0.5], &[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(sol.flow, vec![0.5, 0.0, 0.0, 0.5]);
        let sol = solve(&[0.5, 0.5], &[0.5, 0.5], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(sol.flow, vec![0.0, 0.5, 0.5, 0.0]);
        assert_eq!(sol.cost, 0.0);
    }

    #[test]
    fn rectangular_marginals_are_met() {
        let a = [0.2, 0.3, 0.5];
        let b = [0.6, 0.4];
        let cost = [3.0, 1.0, 2.0, 2.0, 1.0, 4.0];
        let sol = solve(&a, &b, &cost).unwrap();
        for i in 0..3 {
            assert!((sol.flow[2 * i] + sol.flow[2 * i + 1] - a[i]).abs() < 1e-15);
        }
        // row 2 fills column 0, row 0 fills column 1, row 1 splits the rest
        let best = 0.5 * 1.0 + 0.2 * 1.0 + 0.1 * 2.0 + 0.2 * 2.0;
        assert!((sol.cost - best).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        assert!(solve(&[1.0], &[1.0], &[0.0, 1.0]).is_err());
        assert!(solve(&[1.0], &[1.0], &[f64::NAN]).is_err());
    }
}
