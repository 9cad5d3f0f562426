//! Dense reference computations shared by the integration tests.
#![allow(dead_code)]

use lodric::assembly::LqrSystem;
use lodric::sparse;
use nalgebra::DMatrix;
use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Right-hand side of `Ẋ = -X S M⁻¹ - M⁻¹ S X + W Q Wᵀ - X K X` with
/// `W = M⁻¹Cᵀ` and `K = B R⁻¹ Bᵀ`, all dense.
pub struct DenseRiccati {
    a: DMatrix<f64>,
    source: DMatrix<f64>,
    k: DMatrix<f64>,
}

impl DenseRiccati {
    pub fn new(sys: &LqrSystem) -> Self {
        let m_inv = sparse::to_dense(&sys.mass).try_inverse().unwrap();
        let a = &m_inv * sparse::to_dense(&sys.stiffness);
        let w = &m_inv * sys.output.transpose();
        let r_inv = sys.r_weight.clone().try_inverse().unwrap();
        Self {
            source: &w * &sys.q_weight * w.transpose(),
            k: &sys.input * r_inv * sys.input.transpose(),
            a,
        }
    }

    pub fn rhs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        -(x * self.a.transpose()) - &self.a * x + &self.source - x * &self.k * x
    }

    /// Classical fourth-order Runge-Kutta from `x0` over `[0, t]`.
    pub fn rk4(&self, x0: &DMatrix<f64>, t: f64, steps: usize) -> DMatrix<f64> {
        let h = t / steps as f64;
        let mut x = x0.clone();
        for _ in 0..steps {
            let k1 = self.rhs(&x);
            let k2 = self.rhs(&(&x + &k1 * (0.5 * h)));
            let k3 = self.rhs(&(&x + &k2 * (0.5 * h)));
            let k4 = self.rhs(&(&x + &k3 * h));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        x
    }
}

pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    a.clone().svd(false, false).singular_values.max()
}

pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

pub fn random_matrix(seed: u64, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| uniform(&mut rng) - 0.5)
}
