//! Operator-norm distances between a fine solution factor and a lifted
//! coarse (or corrected) one, evaluated in low-rank form.
//!
//! With `Δ = X_h − P X_c Pᵀ`, `M = L_M L_Mᵀ` and `S = L_A L_Aᵀ`:
//! - L² norm: `‖L_Mᵀ Δ L_M‖₂`
//! - energy (V) norm: `‖L_Aᵀ Δ M L_A⁻ᵀ‖₂`

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::lowrank::LowRankFactor;
use crate::sparse::{self, SparseCholesky, SparseMatrix};

/// Fine-space data shared by all comparisons against one reference.
pub struct NormContext {
    mass: SparseMatrix,
    mass_factor: SparseCholesky,
    stiffness_factor: SparseCholesky,
}

/// A fine factor, a coarse factor and the map lifting coarse coefficients
/// to fine ones (prolongation or corrected basis).
pub struct LiftedPair<'a> {
    pub fine: &'a LowRankFactor,
    pub coarse: &'a LowRankFactor,
    pub lift: &'a SparseMatrix,
}

/// `U = [L_h, lift·L_c]` and `D = blockdiag(D_h, −D_c)`.
fn stacked(pair: &LiftedPair) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (fine, coarse, lift) = (pair.fine, pair.coarse, pair.lift);
    if lift.nrows() != fine.n() || lift.ncols() != coarse.n() {
        return Err(Error::DimensionMismatch(format!(
            "lift is {}x{}, factors have {} and {} rows",
            lift.nrows(),
            lift.ncols(),
            fine.n(),
            coarse.n()
        )));
    }
    let (r1, r2) = (fine.rank(), coarse.rank());
    let mut u = DMatrix::zeros(fine.n(), r1 + r2);
    u.columns_mut(0, r1).copy_from(fine.l());
    if r2 > 0 {
        u.columns_mut(r1, r2)
            .copy_from(&sparse::mul_dense(lift, coarse.l()));
    }
    let mut d = DMatrix::zeros(r1 + r2, r1 + r2);
    d.view_mut((0, 0), (r1, r1)).copy_from(fine.d());
    d.view_mut((r1, r1), (r2, r2)).copy_from(&(-coarse.d()));
    Ok((u, d))
}

/// `R` of a thin QR decomposition.
fn qr_r(a: DMatrix<f64>) -> DMatrix<f64> {
    a.qr().r()
}

impl NormContext {
    pub fn new(mass: &SparseMatrix, stiffness: &SparseMatrix) -> Result<Self> {
        Ok(Self {
            mass: mass.clone(),
            mass_factor: SparseCholesky::factor(mass)?,
            stiffness_factor: SparseCholesky::factor(stiffness)?,
        })
    }

    pub fn n(&self) -> usize {
        self.mass.nrows()
    }

    pub fn l2_operator_error(&self, pair: &LiftedPair) -> Result<f64> {
        let (u, d) = stacked(pair)?;
        if u.ncols() == 0 {
            return Ok(0.0);
        }
        let v = self.mass_factor.factor_tr_mul(&u)?;
        let r = qr_r(v);
        let core = &r * d * r.transpose();
        let core = (&core + core.transpose()) * 0.5;
        Ok(SymmetricEigen::new(core).eigenvalues.amax())
    }

    pub fn v_operator_error(&self, pair: &LiftedPair) -> Result<f64> {
        let (u, d) = stacked(pair)?;
        if u.ncols() == 0 {
            return Ok(0.0);
        }
        let g1 = self.stiffness_factor.factor_tr_mul(&u)?;
        let g2 = self
            .stiffness_factor
            .factor_solve(&sparse::mul_dense(&self.mass, &u))?;
        let core = qr_r(g1) * d * qr_r(g2).transpose();
        Ok(core.svd(false, false).singular_values.max())
    }
}

/// Standalone `‖L_Mᵀ(X_h − P X_c Pᵀ)L_M‖₂`.
pub fn l2_operator_error(
    pair: &LiftedPair,
    mass: &SparseMatrix,
    stiffness: &SparseMatrix,
) -> Result<f64> {
    NormContext::new(mass, stiffness)?.l2_operator_error(pair)
}

/// Standalone `‖L_Aᵀ(X_h − P X_c Pᵀ)M L_A⁻ᵀ‖₂`.
pub fn v_operator_error(
    pair: &LiftedPair,
    mass: &SparseMatrix,
    stiffness: &SparseMatrix,
) -> Result<f64> {
    NormContext::new(mass, stiffness)?.v_operator_error(pair)
}
