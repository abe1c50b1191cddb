//! Simulation toolkit for planar incompressible flow of a heat-conducting
//! fluid whose rheology and wall friction are *activated*: both the bulk
//! stress and the wall traction switch on only past temperature-dependent
//! thresholds, so the same material can behave like a Bingham fluid, a
//! Newtonian fluid, or a perfect (Euler) fluid depending on the local
//! internal energy.
//!
//! Module map:
//!
//! * [`coefficients`] — temperature-dependent material functions
//!   (viscosity, friction, conductivity, activation thresholds) and their
//!   admissibility checks.
//! * [`graphs`] — the maximal monotone constitutive graphs coupling stress
//!   with shear rate (bulk) and traction with slip velocity (wall), their
//!   Lipschitz regularizations, and the projection back onto the exact
//!   graph.
//! * [`grid`] — staggered finite-difference fields and discrete operators
//!   on a rectangle with periodic or impermeable-wall sides.
//! * [`pressure`] — the quasicompressible pressure relaxation solve.
//! * [`solver`] — the semi-implicit time stepper for velocity, pressure,
//!   and internal energy.
//! * [`bench`] — closed-form oracles and canned validation scenarios.
//! * [`diagnostics`] — per-step budget records, trajectory audits, and
//!   parameter sweeps.
//! * [`config`] / [`cli`] — run configuration and the command-line driver.

pub mod bench;
pub mod cli;
pub mod coefficients;
pub mod config;
pub mod diagnostics;
pub mod graphs;
pub mod grid;
pub mod pressure;
pub mod solver;
