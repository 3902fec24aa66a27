//! Magnetic Schrödinger operators on metric graphs.
//!
//! A metric graph glues intervals `[0, ℓ_e]` and half-lines at vertices. On
//! such a graph this crate discretizes the quadratic form of the magnetic
//! Schrödinger operator `(D_A)² + V` with Kirchhoff (natural) vertex
//! conditions, where `D_A = (1/i) d/dx − A(x)`, computes its low-lying
//! spectrum, finds mass-normalized critical points of the focusing NLS
//! energy through a penalized continuation scheme, and audits the standard
//! inequalities (diamagnetic, Gagliardo–Nirenberg, multiplier and energy-level
//! bounds, nonexistence thresholds) on the computed objects.
//!
//! Module map:
//! - [`graph`]: metric-graph model, validation, text format.
//! - [`field`]: per-edge grids with shared vertex DOFs, complex fields,
//!   potentials, quadrature, covariant derivative.
//! - [`linalg`]: sparse Hermitian storage and the structured direct solver
//!   used by the eigensolver and the Newton iterations.
//! - [`operator`]: assembly of the Hermitian pencil, eigenpairs, projectors,
//!   strong-form and vertex-condition residuals.
//! - [`energy`]: NLS energy, penalized functionals, gradients, empirical
//!   Gagliardo–Nirenberg constants, closed-form thresholds.
//! - [`solver`]: projected gradient, penalized Newton with r-continuation,
//!   multi-branch search with deflation.
//! - [`verify`]: audit suite over solution bundles.
//! - [`io`]: manifests, CSV emission, field snapshots, solution bundles.
//! - [`cli`]: command-line entry points.

pub mod cli;
pub mod energy;
pub mod expr;
pub mod field;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod operator;
pub mod solver;
pub mod verify;

/// Crate version recorded in run manifests.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
