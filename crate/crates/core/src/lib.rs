//! Parametric balanced truncation for linear descriptor systems.
//!
//! The crate reduces parameter-dependent systems `E(mu) x' = A(mu) x + B(mu) u`,
//! `y = C(mu) x` by square-root balanced truncation, where the parametric
//! controllability/observability Gramians are obtained by interpolating
//! low-rank Gramian factors computed on a training grid. Two interpolation
//! routes are provided:
//!
//! * an algebraic route ([`interp_alg`]) that forms non-negatively weighted
//!   combinations of the data Gramians and admits a full offline-online
//!   decomposition (the online stage never touches full-order objects), and
//! * a geometric route ([`interp_geo`]) that interpolates on the manifold of
//!   fixed-rank positive semidefinite matrices ([`manifold`]), preserving the
//!   rank of the data.
//!
//! Supporting pieces: parametric system assembly and the heat-conduction
//! benchmark ([`system`]), Lyapunov solvers ([`lyap`]), the balanced
//! truncation core ([`bt`]), and frequency-domain error measurement
//! ([`metrics`]).

pub mod bt;
pub mod error;
pub mod instrument;
pub mod interp_alg;
pub mod interp_geo;
pub mod io;
pub mod lyap;
pub mod manifold;
pub mod matrix;
pub mod metrics;
pub mod system;

pub use error::{Error, Result};
pub use matrix::SysMatrix;
