//! Symmetric low-rank factors `X = L D Lᵀ`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// `X = L·D·Lᵀ` with `L` of size `n × r` and symmetric `D` of size `r × r`.
/// Rank zero represents the zero operator.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankFactor {
    l: DMatrix<f64>,
    d: DMatrix<f64>,
}

const MAGIC: &[u8; 4] = b"LRF1";

fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

impl LowRankFactor {
    pub fn zero(n: usize) -> Self {
        Self {
            l: DMatrix::zeros(n, 0),
            d: DMatrix::zeros(0, 0),
        }
    }

    /// Builds a factor; `d` is symmetrized.
    pub fn new(l: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        if d.nrows() != d.ncols() || d.nrows() != l.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "L is {}x{} but D is {}x{}",
                l.nrows(),
                l.ncols(),
                d.nrows(),
                d.ncols()
            )));
        }
        let d = symmetrize(&d);
        Ok(Self { l, d })
    }

    pub fn n(&self) -> usize {
        self.l.nrows()
    }

    pub fn rank(&self) -> usize {
        self.l.ncols()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        if self.rank() == 0 {
            return DMatrix::zeros(self.n(), self.n());
        }
        &self.l * &self.d * self.l.transpose()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            l: self.l.clone(),
            d: &self.d * c,
        }
    }

    /// Smallest and largest eigenvalue of the D-slot (0 for rank zero).
    pub fn d_eigen_range(&self) -> (f64, f64) {
        if self.rank() == 0 {
            return (0.0, 0.0);
        }
        let ev = SymmetricEigen::new(self.d.clone()).eigenvalues;
        (ev.min(), ev.max())
    }

    /// Concatenated factor for `X₁ + X₂`, uncompressed.
    pub fn add(&self, other: &LowRankFactor) -> Result<LowRankFactor> {
        if self.n() != other.n() {
            return Err(Error::DimensionMismatch(format!(
                "adding factors with {} and {} rows",
                self.n(),
                other.n()
            )));
        }
        let (r1, r2) = (self.rank(), other.rank());
        let mut l = DMatrix::zeros(self.n(), r1 + r2);
        l.columns_mut(0, r1).copy_from(&self.l);
        l.columns_mut(r1, r2).copy_from(&other.l);
        let mut d = DMatrix::zeros(r1 + r2, r1 + r2);
        d.view_mut((0, 0), (r1, r1)).copy_from(&self.d);
        d.view_mut((r1, r1), (r2, r2)).copy_from(&other.d);
        Ok(Self { l, d })
    }

    /// Column compression: `L = QR`, `R D Rᵀ = W Λ Wᵀ`, eigenvalues with
    /// `|λ| < tol·max|λ|` dropped. The result has orthonormal `L` and
    /// diagonal `D` ordered by decreasing `|λ|`.
    pub fn compress(&self, tol: f64) -> LowRankFactor {
        let n = self.n();
        if self.rank() == 0 {
            return Self::zero(n);
        }
        let qr = self.l.clone().qr();
        let q = qr.q();
        let r = qr.r();
        let core = symmetrize(&(&r * &self.d * r.transpose()));
        let eig = SymmetricEigen::new(core);
        let max = eig.eigenvalues.amax();
        if max == 0.0 || !max.is_finite() {
            return Self::zero(n);
        }
        let mut keep: Vec<usize> = (0..eig.eigenvalues.len())
            .filter(|&i| eig.eigenvalues[i].abs() >= tol * max && eig.eigenvalues[i] != 0.0)
            .collect();
        keep.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .abs()
                .total_cmp(&eig.eigenvalues[a].abs())
                .then(a.cmp(&b))
        });
        let w = eig.eigenvectors.select_columns(&keep);
        let lambda: Vec<f64> = keep.iter().map(|&i| eig.eigenvalues[i]).collect();
        Self {
            l: q * w,
            d: DMatrix::from_diagonal(&nalgebra::DVector::from_vec(lambda)),
        }
    }

    /// Flow of `Ẋ = -X K X` with `K = B R⁻¹ Bᵀ`: `(I + tXK)⁻¹X`, evaluated
    /// as `L (I + t D LᵀKL)⁻¹ D Lᵀ`.
    pub fn apply_exp_g(
        &self,
        t: f64,
        input: &DMatrix<f64>,
        r_weight: &DMatrix<f64>,
    ) -> Result<LowRankFactor> {
        if t < 0.0 {
            return Err(Error::InvalidArgument(format!("negative flow time {t}")));
        }
        if input.nrows() != self.n() || r_weight.shape() != (input.ncols(), input.ncols()) {
            return Err(Error::DimensionMismatch(format!(
                "B is {}x{}, R is {}x{}, factor has {} rows",
                input.nrows(),
                input.ncols(),
                r_weight.nrows(),
                r_weight.ncols(),
                self.n()
            )));
        }
        if t == 0.0 || self.rank() == 0 || input.ncols() == 0 {
            return Ok(self.clone());
        }
        let rchol = r_weight
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("input weight is not positive definite".into()))?;
        // G = (LᵀB) R⁻¹ (LᵀB)ᵀ
        let lb = self.l.tr_mul(input);
        let y = rchol.solve(&lb.transpose());
        let g = symmetrize(&(&lb * y));
        let r = self.rank();
        let eig = SymmetricEigen::new(self.d.clone());
        let scale = eig.eigenvalues.amax();
        let psd = eig.eigenvalues.min() >= -1e-14 * scale;
        let core = if psd {
            let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
            let half = &eig.eigenvectors
                * DMatrix::from_diagonal(&sqrt)
                * eig.eigenvectors.transpose();
            let half = symmetrize(&half);
            let inner = DMatrix::identity(r, r) + symmetrize(&(&half * &g * &half)) * t;
            let chol = inner
                .cholesky()
                .ok_or_else(|| Error::Singular("I + t D^½ G D^½ is not positive definite".into()))?;
            symmetrize(&(&half * chol.solve(&half)))
        } else {
            let inner = DMatrix::identity(r, r) + &self.d * &g * t;
            let sol = inner
                .lu()
                .solve(&self.d)
                .ok_or_else(|| Error::Singular("I + t D G is singular".into()))?;
            symmetrize(&sol)
        };
        Ok(Self {
            l: self.l.clone(),
            d: core,
        })
    }

    /// Binary dump: magic `LRF1`, `n` and `r` as little-endian u64, then `L`
    /// and `D` column-major as little-endian f64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.n() as u64).to_le_bytes())?;
        w.write_all(&(self.rank() as u64).to_le_bytes())?;
        for v in self.l.iter().chain(self.d.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<LowRankFactor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse("not a low-rank factor dump".into()));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let n = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let rank = u64::from_le_bytes(word) as usize;
        let mut read_vals = |count: usize| -> Result<Vec<f64>> {
            (0..count)
                .map(|_| {
                    r.read_exact(&mut word)?;
                    Ok(f64::from_le_bytes(word))
                })
                .collect()
        };
        let l = DMatrix::from_vec(n, rank, read_vals(n * rank)?);
        let d = DMatrix::from_vec(rank, rank, read_vals(rank * rank)?);
        Ok(Self { l, d })
    }
}
