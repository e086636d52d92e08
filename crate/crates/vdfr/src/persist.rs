//! Fit persistence: a self-describing, versioned JSON archive for a
//! fitted model.
//!
//! # Format
//!
//! The archive is a single JSON object. Every field is named (field-tagged),
//! so readers in other languages need no positional knowledge. Two header
//! fields identify the format:
//!
//! | field            | meaning                                             |
//! |------------------|-----------------------------------------------------|
//! | `format`         | always `"vdfr-fit"`                                 |
//! | `format_version` | integer, currently `1`                              |
//! | `family`         | `"gaussian"` or `"poisson"`                         |
//! | `basis_t`        | spec of the marginal basis over `t` (see below)     |
//! | `basis_domain`   | spec of the marginal basis over the domain length   |
//! | `node_rule`      | quadrature node rule used for the inner products    |
//! | `alpha`          | intercept                                           |
//! | `gamma`          | scalar-covariate coefficients                       |
//! | `surface`        | surface coefficients `b` (`q*r`, `t`-index fastest) |
//! | `nu`             | unpenalized mixed-model coefficients                |
//! | `delta`          | penalized mixed-model coefficients                  |
//! | `tau2`           | variance components `[tau_t^2, tau_T^2]`            |
//! | `phi`            | dispersion                                          |
//! | `ed`             | effective dimension of the fit                      |
//! | `deviance`       | deviance at convergence                             |
//! | `aic`            | deviance + 2 * ed                                   |
//! | `convergence`    | iterations, final relative change, dropped columns  |
//!
//! A basis spec stores `style` (`"clamped"` or `"uniform"`), `degree`,
//! `lo`, `hi`, and `dim`; the knot vector is reconstructed from those, so
//! archives stay small and remain valid across releases that do not change
//! the knot layouts.
//!
//! Loading verifies the `format` tag and `format_version` before touching
//! any other field, so a corrupt or foreign file fails with a clear error
//! instead of a garbled model.

use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BSplineBasis, BasisError, KnotStyle, TensorBasis};
use crate::model::{Family, NodeRule, VdfrFit};

/// Format tag stored in every archive.
pub const ARCHIVE_FORMAT: &str = "vdfr-fit";

/// Current archive version.
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum PersistError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("not a model archive (bad or missing JSON): {0}")]
    Malformed(#[from] serde_json::Error),

    #[error("not a model archive: format tag is {found:?}, expected {ARCHIVE_FORMAT:?}")]
    WrongFormat { found: String },

    #[error("archive version {found} is not supported (this build reads version {ARCHIVE_VERSION})")]
    UnsupportedVersion { found: u32 },

    #[error("archive is inconsistent: {0}")]
    Inconsistent(String),

    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// Serializable spec of one univariate B-spline basis.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BasisSpec {
    pub style: String,
    pub degree: usize,
    pub lo: f64,
    pub hi: f64,
    pub dim: usize,
}

impl BasisSpec {
    pub fn of(basis: &BSplineBasis) -> Self {
        let (lo, hi) = basis.domain();
        Self {
            style: match basis.style() {
                KnotStyle::Clamped => "clamped".to_string(),
                KnotStyle::Uniform => "uniform".to_string(),
            },
            degree: basis.degree(),
            lo,
            hi,
            dim: basis.dim(),
        }
    }

    pub fn build(&self) -> Result<BSplineBasis, PersistError> {
        match self.style.as_str() {
            "clamped" => {
                if self.dim < self.degree + 1 {
                    return Err(PersistError::Inconsistent(format!(
                        "clamped basis of degree {} needs dim >= {}, got {}",
                        self.degree,
                        self.degree + 1,
                        self.dim
                    )));
                }
                Ok(BSplineBasis::new(
                    self.lo,
                    self.hi,
                    self.dim - self.degree - 1,
                    self.degree,
                )?)
            }
            "uniform" => {
                if self.dim <= self.degree {
                    return Err(PersistError::Inconsistent(format!(
                        "uniform basis of degree {} needs dim > {}, got {}",
                        self.degree, self.degree, self.dim
                    )));
                }
                Ok(BSplineBasis::uniform(
                    self.lo,
                    self.hi,
                    self.dim - self.degree,
                    self.degree,
                )?)
            }
            other => Err(PersistError::Inconsistent(format!(
                "unknown basis style {other:?} (expected \"clamped\" or \"uniform\")"
            ))),
        }
    }
}

/// Convergence record of the penalized quasi-likelihood loop.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvergenceRecord {
    pub iterations: usize,
    pub final_change: f64,
    pub dropped_null_columns: Vec<usize>,
}

/// The archive body, exactly as written to disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitArchive {
    pub format: String,
    pub format_version: u32,
    pub family: Family,
    pub basis_t: BasisSpec,
    pub basis_domain: BasisSpec,
    pub node_rule: NodeRule,
    pub alpha: f64,
    pub gamma: Vec<f64>,
    pub surface: Vec<f64>,
    pub nu: Vec<f64>,
    pub delta: Vec<f64>,
    pub tau2: Vec<f64>,
    pub phi: f64,
    pub ed: f64,
    pub deviance: f64,
    pub aic: f64,
    pub convergence: ConvergenceRecord,
}

impl FitArchive {
    pub fn from_fit(fit: &VdfrFit) -> Self {
        Self {
            format: ARCHIVE_FORMAT.to_string(),
            format_version: ARCHIVE_VERSION,
            family: fit.family,
            basis_t: BasisSpec::of(fit.tensor.marginal_t()),
            basis_domain: BasisSpec::of(fit.tensor.marginal_domain()),
            node_rule: fit.node_rule,
            alpha: fit.alpha,
            gamma: fit.gamma.clone(),
            surface: fit.surface.clone(),
            nu: fit.nu.clone(),
            delta: fit.delta.clone(),
            tau2: fit.tau2.clone(),
            phi: fit.phi,
            ed: fit.ed,
            deviance: fit.deviance,
            aic: fit.aic,
            convergence: ConvergenceRecord {
                iterations: fit.iterations,
                final_change: fit.final_change,
                dropped_null_columns: fit.dropped_null_columns.clone(),
            },
        }
    }

    /// Rebuild a usable fit. The in-sample `eta`/`fitted` vectors are not
    /// archived (they belong to the training data, not the model) and come
    /// back empty.
    pub fn into_fit(self) -> Result<VdfrFit, PersistError> {
        if self.format != ARCHIVE_FORMAT {
            return Err(PersistError::WrongFormat { found: self.format });
        }
        if self.format_version != ARCHIVE_VERSION {
            return Err(PersistError::UnsupportedVersion {
                found: self.format_version,
            });
        }
        let tensor = TensorBasis::new(self.basis_t.build()?, self.basis_domain.build()?);
        let expect = tensor.dim();
        if self.surface.len() != expect {
            return Err(PersistError::Inconsistent(format!(
                "surface has {} coefficients, basis specs imply {}",
                self.surface.len(),
                expect
            )));
        }
        Ok(VdfrFit {
            family: self.family,
            tensor,
            node_rule: self.node_rule,
            alpha: self.alpha,
            gamma: self.gamma,
            surface: self.surface,
            nu: self.nu,
            delta: self.delta,
            tau2: self.tau2,
            phi: self.phi,
            ed: self.ed,
            deviance: self.deviance,
            aic: self.aic,
            iterations: self.convergence.iterations,
            final_change: self.convergence.final_change,
            dropped_null_columns: self.convergence.dropped_null_columns,
            eta: Vec::new(),
            fitted: Vec::new(),
        })
    }
}

/// Serialize a fit to pretty-printed archive JSON.
pub fn to_json(fit: &VdfrFit) -> String {
    serde_json::to_string_pretty(&FitArchive::from_fit(fit))
        .expect("fit archive serialization cannot fail")
}

/// Parse archive JSON back into a fit, verifying the format tag and
/// version first.
pub fn from_json(text: &str) -> Result<VdfrFit, PersistError> {
    // Peek at the header before deserializing the full body so that a
    // wrong-format file reports the tag mismatch, not a field error.
    #[derive(Deserialize)]
    struct Header {
        format: Option<String>,
        format_version: Option<u32>,
    }
    let header: Header = serde_json::from_str(text)?;
    match header.format {
        None => {
            return Err(PersistError::WrongFormat {
                found: "<missing>".to_string(),
            })
        }
        Some(tag) if tag != ARCHIVE_FORMAT => {
            return Err(PersistError::WrongFormat { found: tag })
        }
        Some(_) => {}
    }
    match header.format_version {
        None => return Err(PersistError::UnsupportedVersion { found: 0 }),
        Some(v) if v != ARCHIVE_VERSION => {
            return Err(PersistError::UnsupportedVersion { found: v })
        }
        Some(_) => {}
    }
    let archive: FitArchive = serde_json::from_str(text)?;
    archive.into_fit()
}

/// Write a fit archive to a file.
pub fn save(fit: &VdfrFit, path: &Path) -> Result<(), PersistError> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(to_json(fit).as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

/// Load a fit archive from a file.
pub fn load(path: &Path) -> Result<VdfrFit, PersistError> {
    let mut text = String::new();
    std::fs::File::open(path)?.read_to_string(&mut text)?;
    from_json(&text)
}
