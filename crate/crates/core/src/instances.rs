//! Named control problems used by the command line tool and the bindings.

use crate::dynamics::{ControlAssignment, ControlledDynamics};
use crate::error::{Error, Result};
use crate::hjb::{control_grid, ControlPair, CostSpec, ProbeState};
use crate::measure::{DiscreteMeasure, TorusPoint};

#[derive(Debug, Clone)]
pub struct ControlInstance {
    pub id: String,
    pub dynamics: ControlledDynamics,
    pub cost: CostSpec,
    pub leader: TorusPoint,
    pub mu: DiscreteMeasure,
    pub t0: f64,
    pub horizon: f64,
    pub steps: usize,
    /// Follower assignments combined with every leader control.
    pub follower_controls: Vec<ControlAssignment>,
}

pub const INSTANCE_IDS: [&str; 4] = ["reach", "zero", "chase", "meanfield"];

impl ControlInstance {
    /// - `reach`: leader with unit speed, static crowd, terminal cost
    ///   `d(xi, 1/2)^2`, horizon `0.3` on the circle.
    /// - `zero`: nothing moves, same cost.
    /// - `chase`: followers chase the leader, cost `attract`.
    /// - `meanfield`: the `meanfield` dynamics in the plane with cost `attract`.
    pub fn builtin(id: &str) -> Result<Self> {
        let pair = DiscreteMeasure::from_coords(&[vec![0.2], vec![0.4]], &[0.5, 0.5])?;
        let zero1 = ControlAssignment::Constant(vec![0.0]);
        let inst = match id {
            "reach" | "zero" => Self {
                id: id.to_string(),
                dynamics: ControlledDynamics::builtin(id, 1)?,
                cost: CostSpec::builtin("reach", 1)?,
                leader: TorusPoint::new(vec![0.1])?,
                mu: pair,
                t0: 0.0,
                horizon: 0.3,
                steps: 12,
                follower_controls: vec![zero1],
            },
            "chase" => Self {
                id: id.to_string(),
                dynamics: ControlledDynamics::builtin("chase", 1)?,
                cost: CostSpec::builtin("attract", 1)?,
                leader: TorusPoint::new(vec![0.7])?,
                mu: DiscreteMeasure::from_coords(
                    &[vec![0.1], vec![0.35], vec![0.8]],
                    &[0.2, 0.3, 0.5],
                )?,
                t0: 0.0,
                horizon: 0.5,
                steps: 20,
                follower_controls: vec![zero1],
            },
            "meanfield" => Self {
                id: id.to_string(),
                dynamics: ControlledDynamics::builtin("meanfield", 2)?,
                cost: CostSpec::builtin("attract", 2)?,
                leader: TorusPoint::new(vec![0.5, 0.5])?,
                mu: DiscreteMeasure::from_coords(
                    &[vec![0.1, 0.2], vec![0.6, 0.9], vec![0.4, 0.4]],
                    &[0.3, 0.3, 0.4],
                )?,
                t0: 0.0,
                horizon: 0.5,
                steps: 20,
                follower_controls: vec![
                    ControlAssignment::Constant(vec![0.0, 0.0]),
                    ControlAssignment::parse("center", 2)?,
                ],
            },
            other => return Err(Error::UnknownBuiltin(other.to_string())),
        };
        Ok(inst)
    }

    pub fn dim(&self) -> usize {
        self.leader.dim()
    }

    pub fn grid(&self, levels: usize) -> Result<Vec<ControlPair>> {
        control_grid(self.dim(), levels, &self.follower_controls)
    }

    /// Leader positions `1/4, ..., 3/4` (per axis along the diagonal) with the
    /// instance crowd. For `reach` the value function is `1/2`-Lipschitz on
    /// these states.
    pub fn probe_states(&self, count: usize) -> Result<Vec<ProbeState>> {
        if count == 0 {
            return Err(Error::InvalidArgument(
                "need at least one probe state".into(),
            ));
        }
        (0..count)
            .map(|j| {
                let c = if count == 1 {
                    0.5
                } else {
                    0.25 + 0.5 * j as f64 / (count - 1) as f64
                };
                Ok(ProbeState {
                    x: TorusPoint::new(vec![c; self.dim()])?,
                    mu: self.mu.clone(),
                })
            })
            .collect()
    }

    /// `count` equally spaced times from `t0` to the horizon, inclusive.
    pub fn probe_times(&self, count: usize) -> Vec<f64> {
        if count < 2 {
            return vec![self.t0];
        }
        (0..count)
            .map(|i| {
                if i + 1 == count {
                    self.horizon
                } else {
                    self.t0 + (self.horizon - self.t0) * i as f64 / (count - 1) as f64
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_instances_build() {
        for id in INSTANCE_IDS {
            let inst = ControlInstance::builtin(id).unwrap();
            assert!(!inst.grid(3).unwrap().is_empty());
            assert_eq!(inst.probe_times(5).last(), Some(&inst.horizon));
        }
        assert!(ControlInstance::builtin("nope").is_err());
    }
}
