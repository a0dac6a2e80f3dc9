//! Scheme-informed basis functions for the parametric flow-map families.
//!
//! Each family spans the approximate flow map with at most three vectors in
//! R^d, evaluated at a state `x` and a noise increment `xi ~ N(0, delta I_m)`:
//!
//! - `phi_0 = x` (optional linear term, controlled by `include_c0`)
//! - `phi_1 =` drift-derived term of the family:
//!   `f(x)` (IS-EM), the RK4 stage average with the noise as constant forcing
//!   (IS-RK4), or the linearized implicit substep
//!   `(I - delta grad f(x))^{-1} f(x)` (IS-SSBE)
//! - `phi_2 = sigma xi / delta`
//!
//! Basis vectors are evaluated for the full state; per-coordinate extraction
//! happens in the inference module, because the drift terms couple
//! coordinates in general.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrators::{hrk4_phi1, lu_condition_estimate, SINGULAR_COND_LIMIT};
use crate::sde::SdeSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    IsEm,
    IsRk4,
    IsSsbe,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 3] = [FamilyKind::IsEm, FamilyKind::IsRk4, FamilyKind::IsSsbe];

    pub fn label(&self) -> &'static str {
        match self {
            FamilyKind::IsEm => "is-em",
            FamilyKind::IsRk4 => "is-rk4",
            FamilyKind::IsSsbe => "is-ssbe",
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for FamilyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "is-em" => Ok(FamilyKind::IsEm),
            "is-rk4" => Ok(FamilyKind::IsRk4),
            "is-ssbe" => Ok(FamilyKind::IsSsbe),
            other => Err(format!(
                "unknown family `{other}` (expected is-em, is-rk4 or is-ssbe)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum BasisError {
    #[error("linearization matrix (I - delta grad f) is numerically singular (cond est {cond:.3e})")]
    SingularLinearization { cond: f64 },
    #[error("basis step delta must be positive, got {0}")]
    InvalidDelta(f64),
}

/// A parametric family bound to a system and a coarse step `delta`.
#[derive(Clone)]
pub struct BasisFamily {
    family: FamilyKind,
    include_c0: bool,
    delta: f64,
    system: SdeSystem,
}

impl fmt::Debug for BasisFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BasisFamily")
            .field("family", &self.family.label())
            .field("include_c0", &self.include_c0)
            .field("delta", &self.delta)
            .field("system", &self.system.name())
            .finish()
    }
}

impl BasisFamily {
    pub fn new(
        family: FamilyKind,
        include_c0: bool,
        delta: f64,
        system: SdeSystem,
    ) -> Result<Self, BasisError> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(BasisError::InvalidDelta(delta));
        }
        Ok(Self {
            family,
            include_c0,
            delta,
            system,
        })
    }

    pub fn family(&self) -> FamilyKind {
        self.family
    }

    pub fn include_c0(&self) -> bool {
        self.include_c0
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn system(&self) -> &SdeSystem {
        &self.system
    }

    /// Number of basis vectors, p + 1 (3 with the linear term, else 2).
    pub fn basis_count(&self) -> usize {
        if self.include_c0 {
            3
        } else {
            2
        }
    }

    /// Short label, e.g. `is-rk4` or `is-rk4-c0`.
    pub fn label(&self) -> String {
        if self.include_c0 {
            format!("{}-c0", self.family.label())
        } else {
            self.family.label().to_string()
        }
    }

    /// Evaluates the basis vectors at `(x, xi)` in the fixed order
    /// `(x if included, drift term, sigma xi / delta)`.
    pub fn eval(&self, x: &DVector<f64>, xi: &DVector<f64>) -> Result<Vec<DVector<f64>>, BasisError> {
        let forcing = self.system.diffusion() * xi;
        let noise = &forcing / self.delta;
        let drift_term = match self.family {
            FamilyKind::IsEm => self.system.drift(x),
            FamilyKind::IsRk4 => hrk4_phi1(&self.system, x, &forcing, self.delta),
            FamilyKind::IsSsbe => phi1_ssbe(&self.system, x, self.delta)?,
        };
        let mut out = Vec::with_capacity(self.basis_count());
        if self.include_c0 {
            out.push(x.clone());
        }
        out.push(drift_term);
        out.push(noise);
        Ok(out)
    }

    /// Evaluates the drift-derived and noise basis terms, reusing a
    /// precomputed `sigma xi` forcing vector. Used by the simulator so the
    /// noise term can be applied without the `/ delta * delta` round trip.
    pub(crate) fn drift_term(
        &self,
        x: &DVector<f64>,
        forcing: &DVector<f64>,
    ) -> Result<DVector<f64>, BasisError> {
        Ok(match self.family {
            FamilyKind::IsEm => self.system.drift(x),
            FamilyKind::IsRk4 => hrk4_phi1(&self.system, x, forcing, self.delta),
            FamilyKind::IsSsbe => phi1_ssbe(&self.system, x, self.delta)?,
        })
    }
}

/// Linearized SSBE drift term: solves `(I - delta grad f(x)) y = f(x)` by a
/// dense LU with partial pivoting.
pub fn phi1_ssbe(system: &SdeSystem, x: &DVector<f64>, delta: f64) -> Result<DVector<f64>, BasisError> {
    if !(delta > 0.0) {
        return Err(BasisError::InvalidDelta(delta));
    }
    let d = system.dim();
    let matrix = DMatrix::<f64>::identity(d, d) - system.drift_jacobian(x) * delta;
    let lu = matrix.lu();
    let cond = lu_condition_estimate(&lu);
    if cond > SINGULAR_COND_LIMIT {
        return Err(BasisError::SingularLinearization { cond });
    }
    lu.solve(&system.drift(x))
        .ok_or(BasisError::SingularLinearization { cond: f64::INFINITY })
}
