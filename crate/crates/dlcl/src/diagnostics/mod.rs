//! Gradient-flow diagnostics: per-layer gradient norms and numeric checks of
//! the backward-pass factorizations of both norm placements.

mod factorization;
mod report;

pub use factorization::{
    check_postnorm_factorization, check_prenorm_factorization, prenorm_forward_identity_gap,
    FactorizationCheck, SublayerStack, TinyStackConfig,
};
pub use report::{export_report_csv, probe_gradient_norms, read_report_csv, GradientReport};
