//! Synthetic-control experimental design.
//!
//! Chooses which units of a panel to treat, and with what weights, so that
//! weighted treated and control pre-treatment outcomes balance. The search
//! over sign vectors uses generalized power iterations ([`design`]); exact
//! weights for a fixed split come from a simplex-constrained QP
//! ([`balance_qp`]); small instances can be solved exhaustively
//! ([`oracle`]). [`simulate`], [`baselines`] and [`harness`] reproduce
//! comparative RMSE experiments, and [`cli`] wraps everything in a binary.

pub mod balance_qp;
pub mod baselines;
pub mod cli;
pub mod design;
pub mod harness;
pub mod numerics;
pub mod oracle;
pub mod panel;
pub mod simulate;

pub use design::{run_design, DesignAssignment, DesignConfig, DesignSolution, Hyper, Variant, WeightVector};
pub use numerics::{Matrix, SymMatrix};
pub use panel::PanelData;
