//! Isotropic micro-scale material description.

use crate::error::{Error, Result};
use crate::tensors::Tensor4;

/// Phase tag of a mesh element.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Matrix,
    Inclusion,
}

/// Isotropic parameters of the two phases, in MPa and dimensionless ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MicroMaterial {
    pub e_matrix: f64,
    pub nu_matrix: f64,
    pub e_inclusion: f64,
    pub nu_inclusion: f64,
}

impl MicroMaterial {
    pub fn new(e_matrix: f64, nu_matrix: f64, e_inclusion: f64, nu_inclusion: f64) -> Result<Self> {
        let m = Self {
            e_matrix,
            nu_matrix,
            e_inclusion,
            nu_inclusion,
        };
        m.validate()?;
        Ok(m)
    }

    /// A single-phase material (both phases identical).
    pub fn homogeneous(e: f64, nu: f64) -> Result<Self> {
        Self::new(e, nu, e, nu)
    }

    pub fn validate(&self) -> Result<()> {
        for (label, e, nu) in [
            ("matrix", self.e_matrix, self.nu_matrix),
            ("inclusion", self.e_inclusion, self.nu_inclusion),
        ] {
            if !(e > 0.0) {
                return Err(Error::InvalidMaterial(format!(
                    "{label} Young's modulus must be positive, got {e}"
                )));
            }
            if !(nu > -1.0 && nu < 0.5) {
                return Err(Error::InvalidMaterial(format!(
                    "{label} Poisson's ratio must lie in (-1, 0.5), got {nu}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_homogeneous(&self) -> bool {
        self.e_matrix == self.e_inclusion && self.nu_matrix == self.nu_inclusion
    }

    /// Rank-4 stiffness of the given phase (plane strain).
    pub fn stiffness(&self, phase: Phase) -> Result<Tensor4> {
        match phase {
            Phase::Matrix => isotropic_stiffness(self.e_matrix, self.nu_matrix),
            Phase::Inclusion => isotropic_stiffness(self.e_inclusion, self.nu_inclusion),
        }
    }
}

/// Plane-strain isotropic stiffness:
/// C_ijkl = lambda d_ij d_kl + mu (d_ik d_jl + d_il d_jk) with
/// lambda = E nu / ((1+nu)(1-2nu)) and mu = E / (2(1+nu)).
pub fn isotropic_stiffness(e: f64, nu: f64) -> Result<Tensor4> {
    let denom_l = (1.0 + nu) * (1.0 - 2.0 * nu);
    let denom_m = 2.0 * (1.0 + nu);
    if denom_l == 0.0 || denom_m == 0.0 {
        return Err(Error::InvalidMaterial(format!(
            "division by zero in Lame parameters for nu = {nu}"
        )));
    }
    let lambda = e * nu / denom_l;
    let mu = e / denom_m;
    let delta = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    let mut c = Tensor4::zero();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    c.0[i][j][k][l] = lambda * delta(i, j) * delta(k, l)
                        + mu * (delta(i, k) * delta(j, l) + delta(i, l) * delta(j, k));
                }
            }
        }
    }
    Ok(c)
}
