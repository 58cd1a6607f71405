//! Gaussian process regression with adaptive Krylov-subspace estimation of the
//! log marginal likelihood (LML).
//!
//! The training objective is a stochastic lower bound on the LML built from two
//! Krylov methods run side by side on the kernel matrix `K = K_f + σ²I`:
//!
//! * conjugate gradients solve `K v = y`, and the residual gives a two-sided
//!   bracket on the quadratic form `yᵀK⁻¹y`;
//! * Lanczos recurrences on Rademacher probes give Gauss and Gauss–Radau
//!   quadrature estimates of `zᵀ log(K) z`, which bracket the log-determinant
//!   term of the LML.
//!
//! Both methods are advanced in lockstep until the combined bracket certifies
//! that the estimate is within a user-chosen bias `ε` of its fully converged
//! value. Hyperparameters are learned by block updates: Adam ascends the
//! estimate while the Krylov auxiliaries (CG solution, Lanczos bases) are held
//! fixed during differentiation and refreshed on the next step.
//!
//! Modules mirror the layering: [`linalg`] holds the dense symmetric
//! primitives, [`kernel`] the Matérn-3/2 ARD covariance and the exact-LML
//! oracle, [`krylov`] the CG/Lanczos iterations, [`quadrature`] the
//! Gauss/Gauss–Radau log-determinant brackets, [`estimator`] the adaptive
//! estimate with its certified bias bound, [`training`] the Adam loop and
//! posterior-mean prediction, [`data`] dataset ingestion and synthesis, and
//! [`cli`] the batch front end.

pub mod cli;
pub mod data;
pub mod estimator;
pub mod kernel;
pub mod krylov;
pub mod linalg;
pub mod quadrature;
pub mod training;
pub mod validate;

