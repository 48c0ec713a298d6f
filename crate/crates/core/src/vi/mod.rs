//! Collapsed variational inference for the heteroscedastic RVM.

mod bound;
pub(crate) mod fit;

pub use bound::{
    bound_gradients, collapsed_bound, compute_r, expected_loglik, lambda_to_moments, qw_posterior,
    BoundGradient, BoundParams, BoundTerms, RMatrix, VariationalState, WeightPosterior,
};
#[allow(unused_imports)]
pub(crate) use bound::{evaluate, expected_sq_residual, r_from_diag};
pub use fit::{fit_vi, optimize_q_g, prune, update_alpha, PruneOutcome, ViConfig};
