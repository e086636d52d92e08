//! Scalar-on-function regression for variable-domain functional data.
//!
//! Each functional predictor `X_i(t)` lives on its own interval `[0, T_i]`.
//! The model couples a per-curve B-spline representation of the predictors
//! with a tensor-product B-spline coefficient surface `beta(t, T)`, fitted
//! through an anisotropic difference penalty and a mixed-model
//! reparametrization. The crate also ships the registered-domain
//! scalar-on-function baseline, a simulation harness with cross-validated
//! error metrics, and a CLI front end.

pub mod basis;
pub mod baselines;
pub mod cli;
pub mod io;
pub mod linalg;
pub mod model;
pub mod persist;
pub mod presmooth;
pub mod quadrature;
pub mod simstudy;

pub use basis::{BSplineBasis, DifferenceMatrix, TensorBasis};

pub use baselines::{fit_sof, register_linear, RegisteredDataset, SofFit, SofOptions};

pub use model::{Family, MixedModelTransform, NodeRule, TensorPenalty, VdfrFit, VdfrOptions};

pub use presmooth::{SmoothedCurveSet, VariableDomainDataset};
