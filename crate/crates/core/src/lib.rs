//! Variations of measures on the flat torus and a leader-follower mean-field
//! control toolkit built on top of them.
//!
//! The crate is organised bottom-up:
//!
//! - [`measure`]: torus points, discrete probability measures, test functions.
//! - [`transport`]: transport plans, exact optimal transport, plan algebra.
//! - [`variations`]: families `t -> pi_t` and their admissibility check.
//! - [`functionals`]: test functionals with closed-form derivatives.
//! - [`derivative`]: derivatives along variations, flat and intrinsic derivatives.
//! - [`dynamics`]: the coupled leader-follower system and its fixed-point solver.
//! - [`hjb`]: value function, Hamiltonian, jets and the comparison experiments.
//!
//! ```
//! use wvar_core::measure::{DiscreteMeasure, TorusPoint};
//! use wvar_core::transport::wasserstein;
//!
//! let mu = DiscreteMeasure::dirac(TorusPoint::new(vec![0.9]).unwrap());
//! let nu = DiscreteMeasure::dirac(TorusPoint::new(vec![0.1]).unwrap());
//! let w = wasserstein(&mu, &nu, 1.0).unwrap();
//! assert!((w - 0.2).abs() < 1e-15);
//! ```

pub mod derivative;
pub mod dynamics;
pub mod error;
pub mod extrapolate;
pub mod functionals;
pub mod hjb;
pub mod instances;
pub mod measure;
pub mod simplex;
pub mod transport;
pub mod variations;

pub use error::{Error, Result};
pub use measure::{torus_distance, DiscreteMeasure, TestFunction, TorusPoint};
pub use transport::{Covector, TransportPlan};
pub use variations::{FamilyKind, TrajectoryEnsemble, VariationFamily};
