//! Simulation and verification toolkit for singular stochastic Φ-Laplace
//! equations `dX = div φ(∇X) dt + B dW` with zero Dirichlet data.

pub mod ergodics;
pub mod error;
pub mod grid;
pub mod inequalities;
pub mod nonlinearity;
pub mod potential;
pub mod quadrature;
pub mod sampling;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
pub use grid::{Field, Grid, SpectralBasis, VectorField};
pub use nonlinearity::{AssumptionReport, Condition, ExponentSet, NonlinearitySpec, Status};
pub use potential::{ProxSolveSettings, ProxSolver, ProxStats};
pub use sde::{NoiseOperator, NoiseRule, Observable, SdeConfig, Trajectory};
