//! Joint latent-increment / log reaction-time model.
//!
//! A subject's latent multivariate Brownian motion is observed through its
//! increments on an equally spaced grid; a decision is made whenever an
//! increment leaves the band `[a1, a2]`, and the log reaction time of each
//! cell is modelled jointly with the increment through correlated subject
//! random effects. The crate provides:
//!
//! - [`simulator`]: seeded synthetic data,
//! - [`probability`]: normal kernels and the Joe conditional-CDF approximation,
//! - [`likelihood`]: the marginal log-likelihood by Gauss-Hermite quadrature,
//! - [`estimation`]: maximum likelihood by Nelder-Mead,
//! - [`oracle`]: slow, independent validators for all of the above.

pub mod error;
pub mod estimation;
pub mod likelihood;
pub mod model;
pub mod nelder_mead;
pub mod oracle;
pub mod probability;
pub mod simulator;
pub mod streams;

pub use error::{Error, Result};
pub use estimation::{fit, initial_guess, numerical_hessian_se, FitConfig, FitResult};
pub use likelihood::{gh_rule, log_likelihood, Integration, IntegrationPoints, QuadratureRule};
pub use model::{
    build_sigma_b, pack, unpack, CovariateDesign, ModelSpec, Parameters, RandomEffectsCov, SubjectCovariates,
    UnconstrainedParams,
};
pub use nelder_mead::{nelder_mead, NelderMeadConfig};
pub use simulator::{simulate_dataset, Dataset, SubjectData};
