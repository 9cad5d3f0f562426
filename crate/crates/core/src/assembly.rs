//! Multiscale diffusion coefficients and P1 finite element assembly of the
//! LQR system matrices.
//!
//! All matrices are indexed by the free (non-Dirichlet) vertices of the mesh.
//! The stiffness matrix `S` is stored symmetric positive definite; the state
//! operator of the control problem is `A = -S`.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::sparse::{self, SparseMatrix};

#[derive(Clone, Debug, PartialEq)]
enum Kind {
    /// Piecewise constant on half-open cells `[iε,(i+1)ε) × [jε,(j+1)ε)` of
    /// the unit square; `values[j * nx + i]`.
    Grid {
        epsilon: f64,
        nx: usize,
        ny: usize,
        values: Vec<f64>,
    },
    /// Constant background with horizontal bands of `width` centred at the
    /// heights `j / (n_stripes + 1)`.
    Stripes {
        n_stripes: usize,
        width: f64,
        background: f64,
        stripe_value: f64,
    },
}

/// Scalar diffusion coefficient `κ` with its essential bounds `α ≤ κ ≤ β`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientField {
    kind: Kind,
    alpha: f64,
    beta: f64,
}

/// Uniform sample on `[0, 1)` from the top 53 bits of a ChaCha8 word.
fn unit_uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn grid_cells(epsilon: f64) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "cell size {epsilon} must lie in (0, 1]"
        )));
    }
    let n = (1.0 / epsilon).round();
    if (n * epsilon - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "cell size {epsilon} does not divide the unit square"
        )));
    }
    Ok(n as usize)
}

/// i.i.d. values uniform on `[lo, hi]` on an `ε`-grid over the unit square,
/// drawn from a ChaCha8 stream seeded with `seed`.
pub fn kappa_random_grid(epsilon: f64, lo: f64, hi: f64, seed: u64) -> Result<CoefficientField> {
    if !(lo > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lower coefficient bound must be positive, got {lo}"
        )));
    }
    if hi < lo {
        return Err(Error::InvalidArgument(format!(
            "coefficient range [{lo}, {hi}] is empty"
        )));
    }
    let n = grid_cells(epsilon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n * n)
        .map(|_| (lo + (hi - lo) * unit_uniform(&mut rng)).clamp(lo, hi))
        .collect();
    CoefficientField::from_grid(epsilon, n, n, values)
}

/// Horizontal stripes of `stripe_value` on a `background`.
pub fn kappa_stripes(
    n_stripes: usize,
    width: f64,
    background: f64,
    stripe_value: f64,
) -> Result<CoefficientField> {
    if !(background > 0.0) || (n_stripes > 0 && !(stripe_value > 0.0)) {
        return Err(Error::InvalidArgument(
            "coefficient values must be positive".into(),
        ));
    }
    let gap = 1.0 / (n_stripes as f64 + 1.0);
    if n_stripes > 0 && !(width > 0.0 && width < gap) {
        return Err(Error::InvalidArgument(format!(
            "{n_stripes} stripes of width {width} do not fit in the unit square"
        )));
    }
    let (alpha, beta) = if n_stripes == 0 {
        (background, background)
    } else {
        (background.min(stripe_value), background.max(stripe_value))
    };
    Ok(CoefficientField {
        kind: Kind::Stripes {
            n_stripes,
            width,
            background,
            stripe_value,
        },
        alpha,
        beta,
    })
}

impl CoefficientField {
    pub fn constant(value: f64) -> Result<Self> {
        kappa_stripes(0, 0.0, value, value)
    }

    fn from_grid(epsilon: f64, nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nx * ny || values.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficient values for a {nx}x{ny} grid",
                values.len()
            )));
        }
        let alpha = values.iter().copied().fold(f64::INFINITY, f64::min);
        let beta = values.iter().copied().fold(0.0, f64::max);
        if !(alpha > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidArgument(
                "coefficient values must be positive and finite".into(),
            ));
        }
        Ok(Self {
            kind: Kind::Grid {
                epsilon,
                nx,
                ny,
                values,
            },
            alpha,
            beta,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Number of grid cells, `None` for analytic fields.
    pub fn n_cells(&self) -> Option<usize> {
        match &self.kind {
            Kind::Grid { values, .. } => Some(values.len()),
            Kind::Stripes { .. } => None,
        }
    }

    pub fn value(&self, p: [f64; 2]) -> f64 {
        match &self.kind {
            Kind::Grid {
                epsilon,
                nx,
                ny,
                values,
            } => {
                let i = ((p[0] / epsilon).floor().max(0.0) as usize).min(nx - 1);
                let j = ((p[1] / epsilon).floor().max(0.0) as usize).min(ny - 1);
                values[j * nx + i]
            }
            Kind::Stripes {
                n_stripes,
                width,
                background,
                stripe_value,
            } => {
                let gap = 1.0 / (*n_stripes as f64 + 1.0);
                let y = p[1];
                let hit = (1..=*n_stripes).any(|j| {
                    let c = j as f64 * gap;
                    y >= c - 0.5 * width && y < c + 0.5 * width
                });
                if hit {
                    *stripe_value
                } else {
                    *background
                }
            }
        }
    }

    /// Sample at cell centres of an `ε`-grid (grid fields are returned as is
    /// when the cell size already matches).
    pub fn rasterize(&self, epsilon: f64) -> Result<CoefficientField> {
        if let Kind::Grid { epsilon: e, .. } = &self.kind {
            if (e - epsilon).abs() < 1e-15 {
                return Ok(self.clone());
            }
        }
        let n = grid_cells(epsilon)?;
        let values = (0..n * n)
            .map(|k| {
                let (i, j) = (k % n, k / n);
                self.value([(i as f64 + 0.5) * epsilon, (j as f64 + 0.5) * epsilon])
            })
            .collect();
        Self::from_grid(epsilon, n, n, values)
    }

    /// Plain-text grid file: `epsilon <ε>` followed by one line of cell
    /// values per grid row, bottom row first.
    pub fn write_grid<W: Write>(&self, mut w: W) -> Result<()> {
        let Kind::Grid {
            epsilon, nx, values, ..
        } = &self.kind
        else {
            return Err(Error::InvalidArgument(
                "only grid coefficients can be written; rasterize first".into(),
            ));
        };
        writeln!(w, "epsilon {epsilon:?}")?;
        for row in values.chunks(*nx) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_grid<R: BufRead>(r: R) -> Result<CoefficientField> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty coefficient file".into()))??;
        let mut it = header.split_whitespace();
        if it.next() != Some("epsilon") {
            return Err(Error::Parse("expected `epsilon <value>` header".into()));
        }
        let epsilon: f64 = it
            .next()
            .ok_or_else(|| Error::Parse("missing epsilon value".into()))?
            .parse()
            .map_err(|e| Error::Parse(format!("bad epsilon: {e}")))?;
        let mut values = Vec::new();
        let mut nx = None;
        let mut ny = 0;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("bad coefficient value: {e}")))?;
            match nx {
                None => nx = Some(row.len()),
                Some(n) if n != row.len() => {
                    return Err(Error::Parse("ragged coefficient rows".into()))
                }
                _ => {}
            }
            ny += 1;
            values.extend(row);
        }
        let nx = nx.ok_or_else(|| Error::Parse("no coefficient rows".into()))?;
        let cells = grid_cells(epsilon)?;
        if nx != cells || ny != cells {
            return Err(Error::Parse(format!(
                "{nx}x{ny} values do not match cell size {epsilon}"
            )));
        }
        Self::from_grid(epsilon, nx, ny, values)
    }

    /// Content hash used to tie cached LOD bases to their coefficient.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        match &self.kind {
            Kind::Grid {
                epsilon,
                nx,
                ny,
                values,
            } => {
                h.update(b"grid");
                h.update(epsilon.to_le_bytes());
                h.update((*nx as u64).to_le_bytes());
                h.update((*ny as u64).to_le_bytes());
                for v in values {
                    h.update(v.to_le_bytes());
                }
            }
            Kind::Stripes {
                n_stripes,
                width,
                background,
                stripe_value,
            } => {
                h.update(b"stripes");
                h.update((*n_stripes as u64).to_le_bytes());
                for v in [width, background, stripe_value] {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Axis-aligned rectangle `[lo.x, hi.x] × [lo.y, hi.y]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Rect {
    pub fn new(lo: [f64; 2], hi: [f64; 2]) -> Self {
        Self { lo, hi }
    }

    pub fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }
}

/// The LQR data in finite element coordinates.
#[derive(Clone, Debug)]
pub struct LqrSystem {
    /// Mass matrix `M`, SPD.
    pub mass: SparseMatrix,
    /// Stiffness matrix `S = -A`, SPD under Dirichlet conditions.
    pub stiffness: SparseMatrix,
    /// Input matrix `B`, `n × m`.
    pub input: DMatrix<f64>,
    /// Output matrix `C`, `p × n`.
    pub output: DMatrix<f64>,
    /// Output weight `Q`, `p × p`.
    pub q_weight: DMatrix<f64>,
    /// Input weight `R`, `m × m`.
    pub r_weight: DMatrix<f64>,
}

impl LqrSystem {
    /// System with identity weights.
    pub fn new(
        mass: SparseMatrix,
        stiffness: SparseMatrix,
        input: DMatrix<f64>,
        output: DMatrix<f64>,
    ) -> Result<Self> {
        let n = mass.nrows();
        let (m, p) = (input.ncols(), output.nrows());
        let sys = Self {
            mass,
            stiffness,
            input,
            output,
            q_weight: DMatrix::identity(p, p),
            r_weight: DMatrix::identity(m, m),
        };
        sys.check()?;
        debug_assert_eq!(sys.n(), n);
        Ok(sys)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.mass.nrows();
        let ok = self.mass.ncols() == n
            && self.stiffness.nrows() == n
            && self.stiffness.ncols() == n
            && self.input.nrows() == n
            && self.output.ncols() == n
            && self.q_weight.shape() == (self.output.nrows(), self.output.nrows())
            && self.r_weight.shape() == (self.input.ncols(), self.input.ncols());
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "inconsistent LQR system: M {}x{}, S {}x{}, B {}x{}, C {}x{}, Q {}x{}, R {}x{}",
                self.mass.nrows(),
                self.mass.ncols(),
                self.stiffness.nrows(),
                self.stiffness.ncols(),
                self.input.nrows(),
                self.input.ncols(),
                self.output.nrows(),
                self.output.ncols(),
                self.q_weight.nrows(),
                self.q_weight.ncols(),
                self.r_weight.nrows(),
                self.r_weight.ncols()
            )))
        }
    }

    pub fn n(&self) -> usize {
        self.mass.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.input.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.output.nrows()
    }

    /// Galerkin restriction onto the columns of `lift` (`N_h × N_c`):
    /// `liftᵀ M lift`, `liftᵀ S lift`, `liftᵀ B`, `C lift`.
    pub fn galerkin(&self, lift: &SparseMatrix) -> Result<LqrSystem> {
        if lift.nrows() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "lift has {} rows, system has {} unknowns",
                lift.nrows(),
                self.n()
            )));
        }
        let output = sparse::tr_mul_dense(lift, &self.output.transpose()).transpose();
        Ok(LqrSystem {
            mass: sparse::galerkin(&self.mass, lift),
            stiffness: sparse::galerkin(&self.stiffness, lift),
            input: sparse::tr_mul_dense(lift, &self.input),
            output,
            q_weight: self.q_weight.clone(),
            r_weight: self.r_weight.clone(),
        })
    }
}

/// Local P1 stiffness matrix `κ ∫_K ∇λ_i·∇λ_j`.
pub fn element_stiffness(p: [[f64; 2]; 3], kappa: f64) -> [[f64; 3]; 3] {
    let area = 0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]));
    let b = [p[1][1] - p[2][1], p[2][1] - p[0][1], p[0][1] - p[1][1]];
    let c = [p[2][0] - p[1][0], p[0][0] - p[2][0], p[1][0] - p[0][0]];
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k[i][j] = kappa * (b[i] * b[j] + c[i] * c[j]) / (4.0 * area);
        }
    }
    k
}

/// Local P1 mass matrix `|K|/12 · (1 + δ_ij)`.
pub fn element_mass(p: [[f64; 2]; 3]) -> [[f64; 3]; 3] {
    let area = 0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]));
    let mut m = [[area / 12.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = area / 6.0;
    }
    m
}

fn assemble_with(
    mesh: &TriMesh,
    mut local: impl FnMut(usize, [[f64; 2]; 3]) -> [[f64; 3]; 3],
) -> SparseMatrix {
    let mut trip = Vec::with_capacity(9 * mesh.n_triangles());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let k = local(t, mesh.triangle_points(t));
        for a in 0..3 {
            let Some(i) = mesh.dof(tri[a]) else { continue };
            for b in 0..3 {
                if let Some(j) = mesh.dof(tri[b]) {
                    trip.push((i, j, k[a][b]));
                }
            }
        }
    }
    sparse::from_triplets(mesh.n_free(), mesh.n_free(), trip)
}

pub fn assemble_mass(mesh: &TriMesh) -> SparseMatrix {
    assemble_with(mesh, |_, p| element_mass(p))
}

/// Stiffness matrix with `κ` sampled at each triangle centroid.
pub fn assemble_stiffness(mesh: &TriMesh, kappa: &CoefficientField) -> SparseMatrix {
    assemble_with(mesh, |t, p| element_stiffness(p, kappa.value(mesh.centroid(t))))
}

/// Clip a convex polygon against an axis-aligned rectangle.
fn clip_to_rect(poly: &[[f64; 2]], r: &Rect) -> Vec<[f64; 2]> {
    let mut out = poly.to_vec();
    // (axis, bound, keep-greater)
    for (axis, bound, greater) in [
        (0, r.lo[0], true),
        (0, r.hi[0], false),
        (1, r.lo[1], true),
        (1, r.hi[1], false),
    ] {
        if out.is_empty() {
            break;
        }
        let inside = |p: &[f64; 2]| if greater { p[axis] >= bound } else { p[axis] <= bound };
        let input = std::mem::take(&mut out);
        for k in 0..input.len() {
            let cur = input[k];
            let prev = input[(k + input.len() - 1) % input.len()];
            let (ci, pi) = (inside(&cur), inside(&prev));
            if ci != pi {
                let s = (bound - prev[axis]) / (cur[axis] - prev[axis]);
                out.push([
                    prev[0] + s * (cur[0] - prev[0]),
                    prev[1] + s * (cur[1] - prev[1]),
                ]);
            }
            if ci {
                out.push(cur);
            }
        }
    }
    out
}

/// Area and centroid of a simple polygon.
fn polygon_moments(poly: &[[f64; 2]]) -> (f64, [f64; 2]) {
    if poly.len() < 3 {
        return (0.0, [0.0, 0.0]);
    }
    let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for k in 0..poly.len() {
        let p = poly[k];
        let q = poly[(k + 1) % poly.len()];
        let cross = p[0] * q[1] - q[0] * p[1];
        a += cross;
        cx += (p[0] + q[0]) * cross;
        cy += (p[1] + q[1]) * cross;
    }
    a *= 0.5;
    if a.abs() < 1e-300 {
        return (0.0, [0.0, 0.0]);
    }
    (a, [cx / (6.0 * a), cy / (6.0 * a)])
}

fn barycentric(p: [[f64; 2]; 3], x: [f64; 2]) -> [f64; 3] {
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let l1 = ((x[0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (x[1] - p[0][1])) / det;
    let l2 = ((p[1][0] - p[0][0]) * (x[1] - p[0][1]) - (x[0] - p[0][0]) * (p[1][1] - p[0][1])) / det;
    [1.0 - l1 - l2, l1, l2]
}

/// `∫_{rect} φ_i` for every free node; exact since a linear function
/// integrates to area times its value at the polygon centroid.
fn hat_integrals_over(mesh: &TriMesh, rect: &Rect) -> Vec<f64> {
    let mut col = vec![0.0; mesh.n_free()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let pts = mesh.triangle_points(t);
        let clipped = clip_to_rect(&pts, rect);
        let (area, centroid) = polygon_moments(&clipped);
        if area <= 0.0 {
            continue;
        }
        let lam = barycentric(pts, centroid);
        for a in 0..3 {
            if let Some(i) = mesh.dof(tri[a]) {
                col[i] += area * lam[a];
            }
        }
    }
    col
}

/// Input matrix whose column `j` is `∫_{square_j} φ_i`.
pub fn assemble_input_squares(mesh: &TriMesh, squares: &[Rect]) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(mesh.n_free(), squares.len());
    for (j, sq) in squares.iter().enumerate() {
        let col = hat_integrals_over(mesh, sq);
        b.column_mut(j).copy_from_slice(&col);
    }
    b
}

/// `1 × n` output row `∫_Ω φ_i`.
pub fn assemble_output_mean(mesh: &TriMesh) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(1, mesh.n_free());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let third = mesh.signed_area(t) / 3.0;
        for &v in tri {
            if let Some(i) = mesh.dof(v) {
                c[(0, i)] += third;
            }
        }
    }
    c
}

/// `1 × n` output row for the mean over `rect`: `∫_{rect} φ_i / |rect|`.
pub fn assemble_output_region_mean(mesh: &TriMesh, rect: &Rect) -> DMatrix<f64> {
    let col = hat_integrals_over(mesh, rect);
    let area = rect.area();
    DMatrix::from_iterator(1, col.len(), col.into_iter().map(|v| v / area))
}
