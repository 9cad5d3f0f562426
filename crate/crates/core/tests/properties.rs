mod common;

use lodric::assembly::{assemble_stiffness, kappa_random_grid, CoefficientField};
use lodric::dre::{solve_dre, SolverConfig};
use lodric::experiment::{build_system, run_experiment, ExperimentConfig};
use lodric::lod::build_lod_basis;
use lodric::lowrank::LowRankFactor;
use lodric::mesh::{build_hierarchy, prolongation, Domain};
use lodric::sparse;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

use common::{random_matrix, spectral_norm, DenseRiccati};

fn small_study() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset("grid").unwrap();
    cfg.reference_level = 3;
    cfg.coarse_max = 1;
    cfg.solver.n_steps = 16;
    cfg
}

/// Drops the timing columns, which are the only run-dependent fields.
fn strip_timings(csv: &str) -> String {
    csv.lines()
        .map(|line| {
            if line.starts_with('#') {
                return line.to_string();
            }
            line.split(',')
                .enumerate()
                .filter(|(i, _)| !(7..=9).contains(i))
                .map(|(_, f)| f)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn splitting_matches_dense_oracle_at_production_step() {
    let cfg = ExperimentConfig::preset("grid").unwrap();
    let meshes = build_hierarchy(&Domain::UnitSquare, 1).unwrap();
    let kappa = cfg.kappa.build().unwrap();
    let sys = build_system(&meshes[1], &kappa, &cfg.inputs, &cfg.output).unwrap();
    assert_eq!(sys.n(), 9);
    let oracle = DenseRiccati::new(&sys).rk4(&DMatrix::zeros(9, 9), 1.0, 4096);
    let solver = SolverConfig {
        compress_tol: 1e-14,
        ..Default::default()
    };
    assert_eq!(solver.n_steps, 256);
    let sol = solve_dre(&sys, &LowRankFactor::zero(9), &solver).unwrap();
    let err = spectral_norm(&(sol.final_factor.to_dense() - &oracle)) / spectral_norm(&oracle);
    assert!(err <= 1e-4, "relative error {err:e}");
}

#[test]
fn csv_is_reproducible_up_to_timings() {
    let cfg = small_study();
    let mut a = Vec::new();
    let mut b = Vec::new();
    let ra = run_experiment(&cfg, Some(&mut a)).unwrap();
    let rb = run_experiment(&cfg, Some(&mut b)).unwrap();
    let (a, b) = (String::from_utf8(a).unwrap(), String::from_utf8(b).unwrap());
    assert_eq!(strip_timings(&a), strip_timings(&b));
    for (x, y) in ra.levels.iter().zip(&rb.levels) {
        assert_eq!(x.err_l2_lod.to_bits(), y.err_l2_lod.to_bits());
        assert_eq!(x.err_v_fem.to_bits(), y.err_v_fem.to_bits());
        assert_eq!(x.rank_final, y.rank_final);
    }
    assert!(a.lines().any(|l| l.starts_with("level,H,n_coarse")));
    assert_eq!(a.lines().filter(|l| !l.starts_with('#')).count(), 1 + ra.levels.len());
}

#[test]
fn lod_errors_do_not_exceed_fem_on_small_study() {
    let rec = run_experiment(&small_study(), None).unwrap();
    for l in &rec.levels {
        assert!(l.err_l2_lod <= l.err_l2_fem, "level {}", l.level);
        assert!(l.psd_defect <= 1e-10);
    }
}

#[test]
fn corrected_basis_reproduces_coarse_span_with_full_patches() {
    // with global correctors the LOD space does not depend on the patch radius
    let meshes = build_hierarchy(&Domain::UnitSquare, 3).unwrap();
    let kappa = kappa_random_grid(0.125, 1e-2, 1.0, 4).unwrap();
    let cfg = ExperimentConfig::preset("grid").unwrap();
    let sys = build_system(&meshes[3], &kappa, &cfg.inputs, &cfg.output).unwrap();
    let a = build_lod_basis(&meshes[3], &meshes[1], &kappa, 10, &sys).unwrap();
    let b = build_lod_basis(&meshes[3], &meshes[1], &kappa, 20, &sys).unwrap();
    let diff = sparse::to_dense(&a.rh) - sparse::to_dense(&b.rh);
    assert!(diff.amax() <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn stiffness_rayleigh_quotient_within_coefficient_bounds(seed in any::<u64>(), lo in 1e-3f64..0.5) {
        let meshes = build_hierarchy(&Domain::UnitSquare, 3).unwrap();
        let mesh = &meshes[3];
        let kappa = kappa_random_grid(1.0 / 16.0, lo, 1.0, seed).unwrap();
        let s = sparse::to_dense(&assemble_stiffness(mesh, &kappa));
        let s1 = sparse::to_dense(&assemble_stiffness(mesh, &CoefficientField::constant(1.0).unwrap()));
        let x: DVector<f64> = random_matrix(seed, mesh.n_free(), 1).column(0).into_owned();
        let q = x.dot(&(&s * &x)) / x.dot(&(&s1 * &x));
        prop_assert!(q >= kappa.alpha() * (1.0 - 1e-12));
        prop_assert!(q <= kappa.beta() * (1.0 + 1e-12));
    }

    #[test]
    fn prolongation_composes_across_levels(a in 0usize..2, gap in 1usize..3) {
        let meshes = build_hierarchy(&Domain::l_shape(), 4).unwrap();
        let (b, c) = (a + gap, a + gap + 1);
        let ab = sparse::to_dense(&prolongation(&meshes[a], &meshes[b]).unwrap().matrix);
        let bc = sparse::to_dense(&prolongation(&meshes[b], &meshes[c]).unwrap().matrix);
        let ac = sparse::to_dense(&prolongation(&meshes[a], &meshes[c]).unwrap().matrix);
        prop_assert!((bc * ab - ac).amax() <= 1e-14);
    }

    #[test]
    fn solution_stays_symmetric_psd(seed in any::<u64>(), n_steps in 4usize..24) {
        let cfg = ExperimentConfig::preset("grid").unwrap();
        let meshes = build_hierarchy(&Domain::UnitSquare, 2).unwrap();
        let kappa = kappa_random_grid(0.25, 1e-3, 1.0, seed).unwrap();
        let sys = build_system(&meshes[2], &kappa, &cfg.inputs, &cfg.output).unwrap();
        let l0 = random_matrix(seed, sys.n(), 2);
        let x0 = LowRankFactor::new(l0, DMatrix::identity(2, 2)).unwrap();
        let solver = SolverConfig { n_steps, store_checkpoints: true, ..Default::default() };
        let sol = solve_dre(&sys, &x0, &solver).unwrap();
        prop_assert!(sol.psd_defect <= 1e-10);
        for x in &sol.checkpoints {
            let d = x.to_dense();
            prop_assert!((&d - d.transpose()).amax() <= 1e-12 * d.amax().max(1e-300));
            let eig = SymmetricEigen::new(d.clone()).eigenvalues;
            prop_assert!(eig.min() >= -1e-10 * eig.amax().max(1e-300));
        }
    }
}
