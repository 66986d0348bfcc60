//! Modulated Fourier expansions for u_t = L u + f(t) u with
//! f(t) = Σ_n α_n e^{inωt}.
//!
//! The expansion coefficients are assembled from exact rational weights
//! ([`combinatorics`]) and finite-dimensional operators ([`operator_core`]);
//! [`reference_oracle`] holds brute-force checks and the worked examples.

pub mod bench_cli;
pub mod combinatorics;
pub mod error;
pub mod mfe_engine;
pub mod operator_core;
pub mod quadrature;
pub mod reference_oracle;
pub mod resonance_engine;

pub use error::{MfeError, Result};
