//! Monte Carlo toolkit for reflected and penalized diffusions in convex
//! domains and the generalized BSDEs that represent semilinear parabolic
//! PDEs with nonlinear Neumann boundary conditions.

pub mod bsde;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod forward;
pub mod geometry;
pub mod oracle;
pub mod output;
pub mod problem;
pub mod regression;
pub mod rng;

pub use bsde::{solve_bsde, BsdeOptions, BsdeSolution, FieldEstimate, FieldScheme, FieldSolver, Stepping};
pub use diffusion::{Diffusion, DiffusionSpec};
pub use error::{Error, Result};
pub use experiments::StudyReport;
pub use forward::{EnsembleSetup, ForwardPath, PathEnsemble, PenaltyStepping, Scheme, TimeGrid};
pub use geometry::{ConvexDomain, ConvexSet, GeometryEval};
pub use problem::{NeumannProblem, Problem};
