//! Low-rank Strang splitting for the matrix differential Riccati equation
//!
//! ```text
//! M Ẋ M = -M X S - S X M + Cᵀ Q C - M X B R⁻¹ Bᵀ X M
//! ```
//!
//! split into the affine Lyapunov part `F` and the quadratic part `G`, and
//! simulation of the resulting LQR feedback loop.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::assembly::LqrSystem;
use crate::error::{Error, Result};
use crate::lowrank::LowRankFactor;
use crate::sparse::{self, SparseCholesky, SparseMatrix};

/// Diagonal coefficient of the two-stage L-stable SDIRK method.
const GAMMA: f64 = 1.0 - std::f64::consts::FRAC_1_SQRT_2;

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub final_time: f64,
    pub n_steps: usize,
    /// SDIRK steps per application of the exponential action.
    pub substeps: usize,
    /// Gauss-Legendre nodes per quadrature interval of the integral term.
    pub quad_nodes: usize,
    /// Number of geometrically graded quadrature intervals (halving towards
    /// zero) for the integral term; 1 gives plain Gauss-Legendre.
    pub quad_intervals: usize,
    pub compress_tol: f64,
    /// Keep `X(t_j)` for every step (needed by the closed-loop simulation).
    pub store_checkpoints: bool,
    /// Per-step log on stderr.
    pub verbose: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            final_time: 1.0,
            n_steps: 256,
            substeps: 2,
            quad_nodes: 3,
            quad_intervals: 1,
            compress_tol: 1e-10,
            store_checkpoints: false,
            verbose: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.final_time > 0.0 && self.final_time.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "final time must be positive, got {}",
                self.final_time
            )));
        }
        for (name, v) in [
            ("n_steps", self.n_steps),
            ("substeps", self.substeps),
            ("quad_nodes", self.quad_nodes),
            ("quad_intervals", self.quad_intervals),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !(self.compress_tol >= 0.0) {
            return Err(Error::InvalidArgument(
                "compression tolerance must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn time_step(&self) -> f64 {
        self.final_time / self.n_steps as f64
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` (Golub-Welsch).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = DMatrix::zeros(n, n);
    for k in 1..n {
        let kf = k as f64;
        let b = kf / (4.0 * kf * kf - 1.0).sqrt();
        jac[(k, k - 1)] = b;
        jac[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // enforce the exact symmetry of the rule
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (pairs[j].0 - pairs[i].0);
        let w = 0.5 * (pairs[i].1 + pairs[j].1);
        pairs[i] = (-x, w);
        pairs[j] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    pairs.into_iter().unzip()
}

/// Quadrature rule on `[0, t]`: `intervals` geometrically graded pieces
/// `[0, t/2^{m-1}], [t/2^{m-1}, t/2^{m-2}], …, [t/2, t]`, each with an
/// `nodes`-point Gauss-Legendre rule. Nodes are returned sorted.
pub fn graded_rule(t: f64, nodes: usize, intervals: usize) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(nodes);
    let mut edges = vec![0.0];
    for k in (0..intervals).rev() {
        edges.push(t / 2f64.powi(k as i32));
    }
    let mut rule = Vec::with_capacity(nodes * intervals);
    for win in edges.windows(2) {
        let (a, b) = (win[0], win[1]);
        for (xi, wi) in x.iter().zip(&w) {
            rule.push((a + 0.5 * (b - a) * (xi + 1.0), 0.5 * (b - a) * wi));
        }
    }
    rule
}

/// One SDIRK step of size `h` for `M ẏ = -S y (+ f)`, with a single
/// factorization of `M + γ h S`.
pub struct SdirkStep {
    h: f64,
    factor: SparseCholesky,
}

impl SdirkStep {
    pub fn new(mass: &SparseMatrix, stiffness: &SparseMatrix, h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::InvalidArgument(format!("step size {h} must be positive")));
        }
        let shifted = mass + &(stiffness * (GAMMA * h));
        Ok(Self {
            h,
            factor: SparseCholesky::factor(&shifted)?,
        })
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    /// Advance `y` by one step with constant forcing `f` (columns of `y`
    /// share the forcing column when `f` is given).
    pub fn advance(
        &self,
        mass: &SparseMatrix,
        stiffness: &SparseMatrix,
        y: &DMatrix<f64>,
        forcing: Option<&DMatrix<f64>>,
    ) -> Result<DMatrix<f64>> {
        let my = sparse::mul_dense(mass, y);
        let mut rhs1 = my.clone();
        if let Some(f) = forcing {
            rhs1 += f * (GAMMA * self.h);
        }
        let y1 = self.factor.solve(&rhs1)?;
        let mut rhs2 = my - sparse::mul_dense(stiffness, &y1) * ((1.0 - GAMMA) * self.h);
        if let Some(f) = forcing {
            rhs2 += f * self.h;
        }
        self.factor.solve(&rhs2)
    }
}

/// `e^{-t M⁻¹ S} V` approximated by `substeps` SDIRK steps; step objects are
/// cached by step size.
struct ExpAction<'a> {
    system: &'a LqrSystem,
    steps: HashMap<u64, SdirkStep>,
}

impl<'a> ExpAction<'a> {
    fn new(system: &'a LqrSystem) -> Self {
        Self {
            system,
            steps: HashMap::new(),
        }
    }

    fn prepare(&mut self, h: f64) -> Result<&SdirkStep> {
        let key = h.to_bits();
        if !self.steps.contains_key(&key) {
            let step = SdirkStep::new(&self.system.mass, &self.system.stiffness, h)?;
            self.steps.insert(key, step);
        }
        Ok(&self.steps[&key])
    }

    fn apply(&mut self, t: f64, substeps: usize, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if t == 0.0 || v.ncols() == 0 {
            return Ok(v.clone());
        }
        let system = self.system;
        let step = self.prepare(t / substeps as f64)?;
        let mut out = v.clone();
        for _ in 0..substeps {
            out = step.advance(&system.mass, &system.stiffness, &out, None)?;
        }
        Ok(out)
    }
}

/// Low-rank factor of `∫_0^t e^{-sM⁻¹S} W Q Wᵀ e^{-sSM⁻¹} ds` with
/// `W = M⁻¹Cᵀ`, by graded Gauss-Legendre quadrature.
fn integral_term(
    action: &mut ExpAction,
    w: &DMatrix<f64>,
    t: f64,
    cfg: &SolverConfig,
) -> Result<LowRankFactor> {
    let system = action.system;
    let n = system.n();
    let p = w.ncols();
    if t == 0.0 || p == 0 || system.q_weight.amax() == 0.0 {
        return Ok(LowRankFactor::zero(n));
    }
    let rule = graded_rule(t, cfg.quad_nodes, cfg.quad_intervals);
    let mut l = DMatrix::zeros(n, p * rule.len());
    let mut d = DMatrix::zeros(p * rule.len(), p * rule.len());
    let mut v = w.clone();
    let mut s_prev = 0.0;
    for (k, &(s, weight)) in rule.iter().enumerate() {
        v = action.apply(s - s_prev, cfg.substeps, &v)?;
        s_prev = s;
        l.columns_mut(k * p, p).copy_from(&v);
        d.view_mut((k * p, k * p), (p, p))
            .copy_from(&(&system.q_weight * weight));
    }
    Ok(LowRankFactor::new(l, d)?.compress(cfg.compress_tol))
}

/// Reusable pieces of the splitting for one system and time step: the
/// cached SDIRK factorizations and the integral term for `τ/2`.
pub struct Splitting<'a> {
    system: &'a LqrSystem,
    cfg: SolverConfig,
    action: ExpAction<'a>,
    half_step_integral: LowRankFactor,
    observation: DMatrix<f64>,
}

impl<'a> Splitting<'a> {
    pub fn new(system: &'a LqrSystem, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        system.check()?;
        let mass = SparseCholesky::factor(&system.mass)?;
        let observation = mass.solve(&system.output.transpose())?;
        let mut action = ExpAction::new(system);
        let half = 0.5 * cfg.time_step();
        let half_step_integral = integral_term(&mut action, &observation, half, cfg)?;
        Ok(Self {
            system,
            cfg: cfg.clone(),
            action,
            half_step_integral,
            observation,
        })
    }

    /// `e^{tF}X`; the integral term for `t = τ/2` is precomputed, other
    /// times compute it on the fly.
    pub fn apply_exp_f(&mut self, t: f64, x: &LowRankFactor) -> Result<LowRankFactor> {
        if t < 0.0 {
            return Err(Error::InvalidArgument(format!("negative flow time {t}")));
        }
        if x.n() != self.system.n() {
            return Err(Error::DimensionMismatch(format!(
                "factor has {} rows, system has {} unknowns",
                x.n(),
                self.system.n()
            )));
        }
        if t == 0.0 {
            return Ok(x.clone());
        }
        let propagated = LowRankFactor::new(
            self.action.apply(t, self.cfg.substeps, x.l())?,
            x.d().clone(),
        )?;
        let integral = if t == 0.5 * self.cfg.time_step() {
            self.half_step_integral.clone()
        } else {
            integral_term(&mut self.action, &self.observation, t, &self.cfg)?
        };
        Ok(propagated.add(&integral)?.compress(self.cfg.compress_tol))
    }

    pub fn apply_exp_g(&self, t: f64, x: &LowRankFactor) -> Result<LowRankFactor> {
        Ok(x
            .apply_exp_g(t, &self.system.input, &self.system.r_weight)?
            .compress(self.cfg.compress_tol))
    }

    /// `e^{τ/2 F} e^{τ G} e^{τ/2 F} X`.
    pub fn strang_step(&mut self, x: &LowRankFactor) -> Result<LowRankFactor> {
        let tau = self.cfg.time_step();
        let y = self.apply_exp_f(0.5 * tau, x)?;
        let y = self.apply_exp_g(tau, &y)?;
        self.apply_exp_f(0.5 * tau, &y)
    }
}

/// Standalone `e^{tF}X`.
pub fn apply_exp_f(
    t: f64,
    x: &LowRankFactor,
    system: &LqrSystem,
    cfg: &SolverConfig,
) -> Result<LowRankFactor> {
    Splitting::new(system, cfg)?.apply_exp_f(t, x)
}

/// Standalone Strang step with `τ = T/N_t` from `cfg`.
pub fn strang_step(
    x: &LowRankFactor,
    system: &LqrSystem,
    cfg: &SolverConfig,
) -> Result<LowRankFactor> {
    Splitting::new(system, cfg)?.strang_step(x)
}

#[derive(Clone, Debug)]
pub struct DreSolution {
    pub final_factor: LowRankFactor,
    /// `X(t_j)` for `j = 0..=N_t` when requested.
    pub checkpoints: Vec<LowRankFactor>,
    /// Rank after each step (index 0 is the initial value).
    pub ranks: Vec<usize>,
    /// `max_j max(0, -λ_min(D_j)) / max|λ(D_j)|` over all steps.
    pub psd_defect: f64,
    pub time_step: f64,
    pub setup_seconds: f64,
    pub solve_seconds: f64,
}

fn psd_defect(x: &LowRankFactor) -> f64 {
    let (lo, hi) = x.d_eigen_range();
    let scale = lo.abs().max(hi.abs());
    if scale == 0.0 {
        0.0
    } else {
        (-lo).max(0.0) / scale
    }
}

pub fn solve_dre(
    system: &LqrSystem,
    x0: &LowRankFactor,
    cfg: &SolverConfig,
) -> Result<DreSolution> {
    let start = Instant::now();
    let mut split = Splitting::new(system, cfg)?;
    if x0.n() != system.n() {
        return Err(Error::DimensionMismatch(format!(
            "initial factor has {} rows, system has {} unknowns",
            x0.n(),
            system.n()
        )));
    }
    let setup_seconds = start.elapsed().as_secs_f64();
    let tau = cfg.time_step();
    let mut x = x0.compress(cfg.compress_tol);
    let mut ranks = vec![x.rank()];
    let mut defect = psd_defect(&x);
    let mut checkpoints = Vec::new();
    if cfg.store_checkpoints {
        checkpoints.push(x.clone());
    }
    if cfg.verbose {
        eprintln!("step\ttime\trank\twall");
    }
    for j in 1..=cfg.n_steps {
        x = split.strang_step(&x)?;
        ranks.push(x.rank());
        defect = defect.max(psd_defect(&x));
        if cfg.store_checkpoints {
            checkpoints.push(x.clone());
        }
        if cfg.verbose {
            eprintln!(
                "{j}\t{:.6}\t{}\t{:.3}",
                j as f64 * tau,
                x.rank(),
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(DreSolution {
        final_factor: x,
        checkpoints,
        ranks,
        psd_defect: defect,
        time_step: tau,
        setup_seconds,
        solve_seconds: start.elapsed().as_secs_f64() - setup_seconds,
    })
}

#[derive(Clone, Debug)]
pub struct ClosedLoop {
    /// `x(t_j)`, `j = 0..=N_t`.
    pub states: Vec<DVector<f64>>,
    /// `u` on `[t_j, t_{j+1})`, `j = 0..N_t`.
    pub inputs: Vec<DVector<f64>>,
    /// `∫ yᵀQy + uᵀRu`: trapezoidal in the output, exact for the
    /// piecewise-constant input.
    pub cost: f64,
}

/// Simulates `M ẋ = -S x + B u` on `[0, T]`. With `solution` the input is the
/// feedback `u = -R⁻¹ Bᵀ X(T - t_j) M x(t_j)` held on each step, otherwise
/// `u = 0`.
pub fn simulate(
    system: &LqrSystem,
    solution: Option<&DreSolution>,
    x0: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<ClosedLoop> {
    cfg.validate()?;
    let n_t = cfg.n_steps;
    if x0.len() != system.n() {
        return Err(Error::DimensionMismatch(format!(
            "initial state has {} entries, system has {} unknowns",
            x0.len(),
            system.n()
        )));
    }
    if let Some(sol) = solution {
        if sol.checkpoints.len() != n_t + 1 {
            return Err(Error::MissingCheckpoints(format!(
                "{} stored factors, {} required",
                sol.checkpoints.len(),
                n_t + 1
            )));
        }
    }
    let tau = cfg.time_step();
    let r_chol = system
        .r_weight
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("input weight is not positive definite".into()))?;
    let step = SdirkStep::new(&system.mass, &system.stiffness, tau / cfg.substeps as f64)?;
    let m = system.n_inputs();
    let output_cost = |x: &DVector<f64>| {
        let y = &system.output * x;
        y.dot(&(&system.q_weight * &y))
    };
    let mut x = DMatrix::from_column_slice(x0.len(), 1, x0.as_slice());
    let mut states = vec![x0.clone()];
    let mut inputs = Vec::with_capacity(n_t);
    let mut cost = 0.5 * tau * output_cost(x0);
    for j in 0..n_t {
        let u = match solution {
            Some(sol) => {
                let xf = &sol.checkpoints[n_t - j];
                if xf.rank() == 0 {
                    DVector::zeros(m)
                } else {
                    let mx = sparse::mul_dense(&system.mass, &x);
                    let gain = xf.l() * (xf.d() * xf.l().tr_mul(&mx));
                    let u = -r_chol.solve(&system.input.tr_mul(&gain));
                    DVector::from_column_slice(u.as_slice())
                }
            }
            None => DVector::zeros(m),
        };
        cost += tau * u.dot(&(&system.r_weight * &u));
        let forcing = &system.input * &u;
        let forcing = DMatrix::from_column_slice(forcing.len(), 1, forcing.as_slice());
        for _ in 0..cfg.substeps {
            x = step.advance(&system.mass, &system.stiffness, &x, Some(&forcing))?;
        }
        let xv = DVector::from_column_slice(x.as_slice());
        let w = if j + 1 == n_t { 0.5 } else { 1.0 };
        cost += w * tau * output_cost(&xv);
        states.push(xv);
        inputs.push(u);
    }
    Ok(ClosedLoop {
        states,
        inputs,
        cost,
    })
}

/// Feedback simulation using stored checkpoints of `solution`.
pub fn simulate_closed_loop(
    system: &LqrSystem,
    solution: &DreSolution,
    x0: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<ClosedLoop> {
    simulate(system, Some(solution), x0, cfg)
}
