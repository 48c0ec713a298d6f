//! Shared numerical kernels.

pub mod gradcheck;
pub mod kl;
pub mod linalg;
pub mod optimize;
pub mod quadrature;

pub use gradcheck::grad_check;
pub use kl::gauss_kl;
pub use linalg::{psd_solve_logdet, Cholesky};
pub use quadrature::{gauss_hermite, lognormal_mean, Quadrature};
