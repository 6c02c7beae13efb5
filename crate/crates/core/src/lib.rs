//! Multi-group quadratic discriminant analysis via sparse projection.
//!
//! A p × G(G−1) coefficient matrix Ω̂ is estimated by minimizing, over the
//! blocks `ω_jg ∈ ℝ^{G−1}`,
//!
//! ```text
//! ½ Σ_g { Tr(Ω_gᵀ Σ̂_g Ω_g) + ‖Γ̂ᵀ Ω_g − I‖²_F }
//!   + αλ Σ_j ‖ω_j‖ + (1−α)λ/√G Σ_{j,g} ‖ω_jg‖
//! ```
//!
//! where `Γ̂Γ̂ᵀ` is the between-group covariance. Classification projects onto
//! the selected variables and applies a quadratic rule in the projected space.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common `f64` instantiations.
//!
//! ```
//! use mgqda::{build_model, compute_group_stats, fit, lambda_max, CovMode, Dataset, PenaltySpec};
//! use ndarray::array;
//!
//! let x = array![[0.0, 1.0], [0.2, 0.9], [0.1, 1.2], [3.0, 1.0], [3.2, 1.1], [2.9, 0.8]];
//! let data = Dataset::from_raw_labels(x, &["a", "a", "a", "b", "b", "b"], None)?;
//! let stats = compute_group_stats(&data, CovMode::Ml)?;
//! let pen = PenaltySpec::new(0.1 * lambda_max(&stats), 0.5);
//! let (omega, report) = fit(&stats, &pen, None)?;
//! assert!(report.converged);
//! let model = build_model(&omega, &stats, &pen)?.with_labels(data.labels().to_vec())?;
//! assert_eq!(model.predict_labels(array![[3.1, 1.0]].view())?, vec!["b"]);
//! # Ok::<(), mgqda::MgqdaError>(())
//! ```

pub mod baseline;
pub mod classifier;
pub mod cv;
pub mod data_io;
pub mod error;
pub mod linalg;
pub mod persist;
pub mod scalar;
pub mod simgen;
pub mod solver;
pub mod stats;

pub use baseline::DiagonalLda;
pub use classifier::{basis_invariance_check, build_model, FittedModel, ModelParts};
pub use cv::{cross_validate, CvConfig, CvResult};
pub use error::{MgqdaError, Result};
pub use linalg::SymMatrix;
pub use scalar::Scalar;
pub use solver::{block_update, extract_support, fit, lambda_max, lambda_path, Coefficients, PenaltySpec, SolveReport, Solver};
pub use stats::{compute_group_stats, CovMode, Dataset, GroupStats};

pub type Dataset64 = Dataset<f64>;
pub type GroupStats64 = GroupStats<f64>;
pub type PenaltySpec64 = PenaltySpec<f64>;
pub type Coefficients64 = Coefficients<f64>;
pub type FittedModel64 = FittedModel<f64>;
pub type CvConfig64 = CvConfig<f64>;
pub type SymMatrix64 = SymMatrix<f64>;

pub type Dataset32 = Dataset<f32>;
pub type GroupStats32 = GroupStats<f32>;
pub type FittedModel32 = FittedModel<f32>;
