//! Learning-based tube MPC for linear plants with bounded unmatched uncertainty.
//!
//! The crate is organised bottom-up:
//!
//! * [`polytope`]: half-space sets, support functions, tube tightening and robust
//!   invariant terminal sets.
//! * [`plant`]: the Moore-Greitzer compressor truth model, its linearisation and the
//!   generic uncertain linear model `x⁺ = A x + B u + h(x, u)`.
//! * [`oracle`]: the network estimator of `h` with projected output-layer adaptation,
//!   the hidden-layer trainer and replay buffer, and the kernel-regression baseline.
//! * [`qp`]: dense operator-splitting QP solver with active-set polish.
//! * [`mpc`]: feedback/terminal synthesis and the nominal and learning-based programs.
//! * [`runtime`]: the dual-timescale closed loop, traces and metrics.

pub mod linalg;
pub mod mpc;
pub mod polytope;
pub mod oracle;
pub mod plant;
pub mod qp;
pub mod runtime;
