//! Convergence studies: a fine reference DRE solution compared against plain
//! coarse FEM and LOD solutions on a range of coarse levels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Deserialize;

use crate::assembly::{
    assemble_input_squares, assemble_mass, assemble_output_mean, assemble_output_region_mean,
    assemble_stiffness, kappa_random_grid, kappa_stripes, CoefficientField, LqrSystem, Rect,
};
use crate::dre::{solve_dre, DreSolution, SolverConfig};
use crate::error::{Error, Result};
use crate::lod::{build_lod_basis, default_patch_radius};
use crate::lowrank::LowRankFactor;
use crate::mesh::{build_hierarchy, prolongation, Domain, TriMesh};
use crate::norms::{LiftedPair, NormContext};

#[derive(Clone, Debug, PartialEq)]
pub enum KappaSpec {
    RandomGrid {
        epsilon: f64,
        lo: f64,
        hi: f64,
        seed: u64,
    },
    Stripes {
        n_stripes: usize,
        width: f64,
        background: f64,
        stripe_value: f64,
    },
    /// Grid file written by [`CoefficientField::write_grid`].
    File(PathBuf),
}

impl KappaSpec {
    pub fn build(&self) -> Result<CoefficientField> {
        match self {
            KappaSpec::RandomGrid {
                epsilon,
                lo,
                hi,
                seed,
            } => kappa_random_grid(*epsilon, *lo, *hi, *seed),
            KappaSpec::Stripes {
                n_stripes,
                width,
                background,
                stripe_value,
            } => kappa_stripes(*n_stripes, *width, *background, *stripe_value),
            KappaSpec::File(path) => {
                CoefficientField::read_grid(BufReader::new(File::open(path)?))
            }
        }
    }

    fn describe(&self) -> String {
        match self {
            KappaSpec::RandomGrid {
                epsilon,
                lo,
                hi,
                seed,
            } => format!("random_grid epsilon={epsilon} range=[{lo}, {hi}] seed={seed}"),
            KappaSpec::Stripes {
                n_stripes,
                width,
                background,
                stripe_value,
            } => format!(
                "stripes n={n_stripes} width={width} background={background} value={stripe_value}"
            ),
            KappaSpec::File(p) => format!("file {}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OutputSpec {
    /// `∫_Ω x`.
    DomainIntegral,
    /// Mean of `x` over a rectangle.
    RegionMean(Rect),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub preset: String,
    pub domain: Domain,
    pub kappa: KappaSpec,
    pub inputs: Vec<Rect>,
    pub output: OutputSpec,
    pub coarse_min: usize,
    pub coarse_max: usize,
    pub reference_level: usize,
    /// Patch radius; `None` uses `⌈log₂(1/H)⌉` per level.
    pub patch_radius: Option<usize>,
    pub solver: SolverConfig,
    pub csv: Option<PathBuf>,
}

/// Built-in presets: name and one-line description.
pub const PRESETS: &[(&str, &str)] = &[
    ("grid", "unit square, random 2^-5 grid coefficient in [1e-3, 1], reference level 5, coarse 0..3"),
    ("grid-full", "unit square, random 2^-7 grid coefficient in [1e-3, 1], reference level 7, coarse 0..6"),
    ("lshape", "L-shape, random 2^-5 grid coefficient, reference level 4, coarse 0..2"),
    ("lshape-full", "L-shape, random 2^-7 grid coefficient, reference level 6, coarse 0..5"),
    ("stripes", "unit square, 7 stripes of 1e-2 and width 2^-5 on background 1, reference level 5, coarse 0..3"),
    ("stripes-full", "unit square, 7 stripes of 1e-2 and width 2^-7 on background 1, reference level 7, coarse 0..6"),
];

fn unit_square_inputs() -> Vec<Rect> {
    (1..=3)
        .map(|j| {
            let a = j as f64 / 4.0;
            Rect::new([a, a], [a + 0.125, a + 0.125])
        })
        .collect()
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<ExperimentConfig> {
        let random = |epsilon: f64| KappaSpec::RandomGrid {
            epsilon,
            lo: 1e-3,
            hi: 1.0,
            seed: 1,
        };
        let stripes = |width: f64| KappaSpec::Stripes {
            n_stripes: 7,
            width,
            background: 1.0,
            stripe_value: 1e-2,
        };
        let square = |kappa, max, reference| ExperimentConfig {
            preset: name.to_string(),
            domain: Domain::UnitSquare,
            kappa,
            inputs: unit_square_inputs(),
            output: OutputSpec::DomainIntegral,
            coarse_min: 0,
            coarse_max: max,
            reference_level: reference,
            patch_radius: None,
            solver: SolverConfig::default(),
            csv: None,
        };
        let lshape = |kappa, max, reference| ExperimentConfig {
            preset: name.to_string(),
            domain: Domain::l_shape(),
            kappa,
            inputs: vec![Rect::new([0.65, 0.65], [0.85, 0.85])],
            output: OutputSpec::RegionMean(Rect::new([0.15, 0.15], [0.35, 0.35])),
            coarse_min: 0,
            coarse_max: max,
            reference_level: reference,
            patch_radius: None,
            solver: SolverConfig::default(),
            csv: None,
        };
        let e5 = 1.0 / 32.0;
        let e7 = 1.0 / 128.0;
        Ok(match name {
            "grid" => square(random(e5), 3, 5),
            "grid-full" => square(random(e7), 6, 7),
            "lshape" => lshape(random(e5), 2, 4),
            "lshape-full" => lshape(random(e7), 5, 6),
            "stripes" => square(stripes(e5), 3, 5),
            "stripes-full" => square(stripes(e7), 6, 7),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.iter().map(|p| p.0).collect::<Vec<_>>().join(", ")
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.solver.validate()?;
        if self.coarse_min > self.coarse_max {
            return Err(Error::InvalidArgument(format!(
                "coarse level range {}..{} is empty",
                self.coarse_min, self.coarse_max
            )));
        }
        if self.reference_level <= self.coarse_max {
            return Err(Error::InvalidArgument(format!(
                "reference level {} must exceed the finest coarse level {}",
                self.reference_level, self.coarse_max
            )));
        }
        if self.patch_radius == Some(0) {
            return Err(Error::InvalidArgument("patch radius must be at least 1".into()));
        }
        if self.inputs.is_empty() {
            return Err(Error::InvalidArgument("at least one input square is needed".into()));
        }
        Ok(())
    }

    /// Parses a TOML configuration. Every section is optional and overrides
    /// the values of the named preset (default `grid`).
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
        let file: ConfigFile =
            toml::from_str(text).map_err(|e| Error::Parse(e.message().to_string()))?;
        let mut cfg = ExperimentConfig::preset(file.preset.as_deref().unwrap_or("grid"))?;
        if let Some(p) = file.problem {
            if let Some(d) = p.domain {
                cfg.domain = match d.as_str() {
                    "unit_square" => Domain::UnitSquare,
                    "l_shape" => Domain::l_shape(),
                    "u_shape" => Domain::u_shape(),
                    other => return Err(Error::Parse(format!("unknown domain `{other}`"))),
                };
            }
            if let Some(inputs) = p.inputs {
                cfg.inputs = inputs
                    .iter()
                    .map(|r| Rect::new([r[0], r[1]], [r[2], r[3]]))
                    .collect();
            }
            if let Some(out) = p.output {
                cfg.output = match out {
                    OutputField::Name(s) if s == "mean" => OutputSpec::DomainIntegral,
                    OutputField::Name(s) => {
                        return Err(Error::Parse(format!("unknown output `{s}`")))
                    }
                    OutputField::Region(r) => {
                        OutputSpec::RegionMean(Rect::new([r[0], r[1]], [r[2], r[3]]))
                    }
                };
            }
        }
        if let Some(k) = file.kappa {
            cfg.kappa = k.resolve(&cfg.kappa, base_dir)?;
        }
        if let Some(l) = file.levels {
            cfg.coarse_min = l.coarse_min.unwrap_or(cfg.coarse_min);
            cfg.coarse_max = l.coarse_max.unwrap_or(cfg.coarse_max);
            cfg.reference_level = l.reference.unwrap_or(cfg.reference_level);
            cfg.patch_radius = l.patch_radius.or(cfg.patch_radius);
        }
        if let Some(s) = file.solver {
            let d = &mut cfg.solver;
            d.final_time = s.final_time.unwrap_or(d.final_time);
            d.n_steps = s.n_steps.unwrap_or(d.n_steps);
            d.substeps = s.substeps.unwrap_or(d.substeps);
            d.quad_nodes = s.quad_nodes.unwrap_or(d.quad_nodes);
            d.quad_intervals = s.quad_intervals.unwrap_or(d.quad_intervals);
            d.compress_tol = s.compress_tol.unwrap_or(d.compress_tol);
            d.verbose = s.verbose.unwrap_or(d.verbose);
        }
        if let Some(o) = file.output {
            cfg.csv = o.csv.map(|p| base_dir.join(p));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn patch_radius_for(&self, coarse: &TriMesh) -> usize {
        self.patch_radius.unwrap_or_else(|| default_patch_radius(coarse))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    preset: Option<String>,
    problem: Option<ProblemSection>,
    kappa: Option<KappaSection>,
    levels: Option<LevelsSection>,
    solver: Option<SolverSection>,
    output: Option<OutputSection>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemSection {
    domain: Option<String>,
    inputs: Option<Vec<[f64; 4]>>,
    output: Option<OutputField>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OutputField {
    Name(String),
    Region([f64; 4]),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KappaSection {
    kind: Option<String>,
    epsilon: Option<f64>,
    lo: Option<f64>,
    hi: Option<f64>,
    seed: Option<u64>,
    n_stripes: Option<usize>,
    width: Option<f64>,
    background: Option<f64>,
    stripe_value: Option<f64>,
    path: Option<PathBuf>,
}

impl KappaSection {
    fn resolve(self, base: &KappaSpec, dir: &Path) -> Result<KappaSpec> {
        let kind = match (&self.kind, base) {
            (Some(k), _) => k.clone(),
            (None, KappaSpec::RandomGrid { .. }) => "random_grid".into(),
            (None, KappaSpec::Stripes { .. }) => "stripes".into(),
            (None, KappaSpec::File(_)) => "file".into(),
        };
        Ok(match kind.as_str() {
            "random_grid" => {
                let (e, l, h, s) = match base {
                    KappaSpec::RandomGrid {
                        epsilon,
                        lo,
                        hi,
                        seed,
                    } => (*epsilon, *lo, *hi, *seed),
                    _ => (1.0 / 32.0, 1e-3, 1.0, 1),
                };
                KappaSpec::RandomGrid {
                    epsilon: self.epsilon.unwrap_or(e),
                    lo: self.lo.unwrap_or(l),
                    hi: self.hi.unwrap_or(h),
                    seed: self.seed.unwrap_or(s),
                }
            }
            "stripes" => {
                let (n, w, b, v) = match base {
                    KappaSpec::Stripes {
                        n_stripes,
                        width,
                        background,
                        stripe_value,
                    } => (*n_stripes, *width, *background, *stripe_value),
                    _ => (7, 1.0 / 32.0, 1.0, 1e-2),
                };
                KappaSpec::Stripes {
                    n_stripes: self.n_stripes.unwrap_or(n),
                    width: self.width.unwrap_or(w),
                    background: self.background.unwrap_or(b),
                    stripe_value: self.stripe_value.unwrap_or(v),
                }
            }
            "file" => {
                let path = self
                    .path
                    .ok_or_else(|| Error::Parse("kappa kind `file` needs `path`".into()))?;
                KappaSpec::File(dir.join(path))
            }
            other => return Err(Error::Parse(format!("unknown kappa kind `{other}`"))),
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelsSection {
    coarse_min: Option<usize>,
    coarse_max: Option<usize>,
    reference: Option<usize>,
    patch_radius: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverSection {
    final_time: Option<f64>,
    n_steps: Option<usize>,
    substeps: Option<usize>,
    quad_nodes: Option<usize>,
    quad_intervals: Option<usize>,
    compress_tol: Option<f64>,
    verbose: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    csv: Option<PathBuf>,
}

/// Assembles the LQR system of an experiment on one mesh.
pub fn build_system(
    mesh: &TriMesh,
    kappa: &CoefficientField,
    inputs: &[Rect],
    output: &OutputSpec,
) -> Result<LqrSystem> {
    let c = match output {
        OutputSpec::DomainIntegral => assemble_output_mean(mesh),
        OutputSpec::RegionMean(r) => assemble_output_region_mean(mesh, r),
    };
    LqrSystem::new(
        assemble_mass(mesh),
        assemble_stiffness(mesh, kappa),
        assemble_input_squares(mesh, inputs),
        c,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelRecord {
    pub level: usize,
    pub h: f64,
    pub n_coarse: usize,
    pub patch_radius: usize,
    pub err_l2_fem: f64,
    pub err_l2_lod: f64,
    pub err_v_fem: f64,
    pub err_v_lod: f64,
    pub time_lod_setup: f64,
    pub time_solve_fem: f64,
    pub time_solve_lod: f64,
    pub rank_final: usize,
    pub rank_fem: usize,
    /// Largest relative negative D-slot eigenvalue over all steps of both
    /// coarse solves.
    pub psd_defect: f64,
}

#[derive(Clone, Debug)]
pub struct ConvergenceRecord {
    pub levels: Vec<LevelRecord>,
    pub n_reference: usize,
    pub rank_reference: usize,
    pub psd_defect_reference: f64,
    pub time_solve_reference: f64,
}

/// `log₂(e_j / e_{j+1})` generalised to arbitrary ratios `H_j / H_{j+1}`.
pub fn observed_order(errors: &[f64], widths: &[f64]) -> Result<Vec<f64>> {
    if errors.len() != widths.len() || errors.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two errors with matching mesh widths".into(),
        ));
    }
    if errors.iter().chain(widths).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("errors and widths must be positive".into()));
    }
    Ok(errors
        .windows(2)
        .zip(widths.windows(2))
        .map(|(e, h)| (e[0] / e[1]).ln() / (h[0] / h[1]).ln())
        .collect())
}

impl ConvergenceRecord {
    fn column(&self, f: impl Fn(&LevelRecord) -> f64) -> Vec<f64> {
        self.levels.iter().map(f).collect()
    }

    /// Observed orders between consecutive levels for one error column.
    pub fn orders(&self, f: impl Fn(&LevelRecord) -> f64) -> Vec<f64> {
        let widths = self.column(|r| r.h);
        observed_order(&self.column(f), &widths).unwrap_or_default()
    }
}

pub const CSV_HEADER: &str = "level,H,n_coarse,err_L2_fem,err_L2_lod,err_V_fem,err_V_lod,\
time_lod_setup,time_solve_fem,time_solve_lod,rank_final,\
order_L2_fem,order_L2_lod,order_V_fem,order_V_lod";

fn csv_row(rec: &LevelRecord, prev: Option<&LevelRecord>) -> String {
    let order = |f: fn(&LevelRecord) -> f64| match prev {
        Some(p) => {
            let (a, b) = (f(p), f(rec));
            if a > 0.0 && b > 0.0 {
                format!("{:.4}", (a / b).ln() / (p.h / rec.h).ln())
            } else {
                String::new()
            }
        }
        None => String::new(),
    };
    format!(
        "{},{:?},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.3},{:.3},{:.3},{},{},{},{},{}",
        rec.level,
        rec.h,
        rec.n_coarse,
        rec.err_l2_fem,
        rec.err_l2_lod,
        rec.err_v_fem,
        rec.err_v_lod,
        rec.time_lod_setup,
        rec.time_solve_fem,
        rec.time_solve_lod,
        rec.rank_final,
        order(|r| r.err_l2_fem),
        order(|r| r.err_l2_lod),
        order(|r| r.err_v_fem),
        order(|r| r.err_v_lod),
    )
}

/// Runs the study. Each level's row is written to `csv` (if any) as soon as
/// it is available.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    mut csv: Option<&mut dyn Write>,
) -> Result<ConvergenceRecord> {
    cfg.validate()?;
    let meshes: Vec<Arc<TriMesh>> = build_hierarchy(&cfg.domain, cfg.reference_level)?;
    let kappa = cfg.kappa.build()?;
    let fine = &meshes[cfg.reference_level];
    let fine_sys = build_system(fine, &kappa, &cfg.inputs, &cfg.output)?;
    let radii: Vec<usize> = (cfg.coarse_min..=cfg.coarse_max)
        .map(|j| cfg.patch_radius_for(&meshes[j]))
        .collect();

    if let Some(w) = csv.as_deref_mut() {
        let s = &cfg.solver;
        let meta = [
            ("preset", cfg.preset.clone()),
            ("domain", cfg.domain.name().to_string()),
            ("kappa", cfg.kappa.describe()),
            ("kappa_sha256", kappa.fingerprint()),
            ("reference_level", cfg.reference_level.to_string()),
            ("n_reference", fine.n_free().to_string()),
            ("T", format!("{:?}", s.final_time)),
            ("N_t", s.n_steps.to_string()),
            ("substeps", s.substeps.to_string()),
            ("quad_nodes", s.quad_nodes.to_string()),
            ("quad_intervals", s.quad_intervals.to_string()),
            ("compress_tol", format!("{:e}", s.compress_tol)),
            (
                "patch_radius",
                radii.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" "),
            ),
        ];
        for (k, v) in meta {
            writeln!(w, "# {k} = {v}")?;
        }
        writeln!(w, "{CSV_HEADER}")?;
        w.flush()?;
    }

    let zero = |n| LowRankFactor::zero(n);
    let start = Instant::now();
    let reference: DreSolution = solve_dre(&fine_sys, &zero(fine_sys.n()), &cfg.solver)?;
    let time_solve_reference = start.elapsed().as_secs_f64();
    let norms = NormContext::new(&fine_sys.mass, &fine_sys.stiffness)?;

    let mut levels: Vec<LevelRecord> = Vec::new();
    for (idx, j) in (cfg.coarse_min..=cfg.coarse_max).enumerate() {
        let coarse = &meshes[j];
        let p = prolongation(coarse, fine)?.matrix;

        let start = Instant::now();
        let fem_sys = fine_sys.galerkin(&p)?;
        let fem = solve_dre(&fem_sys, &zero(fem_sys.n()), &cfg.solver)?;
        let time_solve_fem = start.elapsed().as_secs_f64();

        let start = Instant::now();
        let basis = build_lod_basis(fine, coarse, &kappa, radii[idx], &fine_sys)?;
        let time_lod_setup = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let lod = solve_dre(&basis.system, &zero(basis.system.n()), &cfg.solver)?;
        let time_solve_lod = start.elapsed().as_secs_f64();

        let fem_pair = LiftedPair {
            fine: &reference.final_factor,
            coarse: &fem.final_factor,
            lift: &p,
        };
        let lod_pair = LiftedPair {
            fine: &reference.final_factor,
            coarse: &lod.final_factor,
            lift: &basis.rh,
        };
        let rec = LevelRecord {
            level: j,
            h: coarse.mesh_width(),
            n_coarse: coarse.n_free(),
            patch_radius: radii[idx],
            err_l2_fem: norms.l2_operator_error(&fem_pair)?,
            err_l2_lod: norms.l2_operator_error(&lod_pair)?,
            err_v_fem: norms.v_operator_error(&fem_pair)?,
            err_v_lod: norms.v_operator_error(&lod_pair)?,
            time_lod_setup,
            time_solve_fem,
            time_solve_lod,
            rank_final: lod.final_factor.rank(),
            rank_fem: fem.final_factor.rank(),
            psd_defect: fem.psd_defect.max(lod.psd_defect),
        };
        if let Some(w) = csv.as_deref_mut() {
            writeln!(w, "{}", csv_row(&rec, levels.last()))?;
            w.flush()?;
        }
        levels.push(rec);
    }
    Ok(ConvergenceRecord {
        levels,
        n_reference: fine.n_free(),
        rank_reference: reference.final_factor.rank(),
        psd_defect_reference: reference.psd_defect,
        time_solve_reference,
    })
}

/// Runs the study and writes the CSV to `cfg.csv` when set.
pub fn run_experiment_to_file(cfg: &ExperimentConfig) -> Result<ConvergenceRecord> {
    match &cfg.csv {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            let rec = run_experiment(cfg, Some(&mut w))?;
            w.flush()?;
            Ok(rec)
        }
        None => run_experiment(cfg, None),
    }
}

/// The coefficient of an experiment as a grid, rasterized at the reference
/// mesh width when it is not already a grid.
pub fn kappa_grid(cfg: &ExperimentConfig) -> Result<CoefficientField> {
    let kappa = cfg.kappa.build()?;
    match kappa.n_cells() {
        Some(_) => Ok(kappa),
        None => {
            let h = cfg.domain.base_pitch() / 2f64.powi(cfg.reference_level as i32);
            kappa.rasterize(h)
        }
    }
}
