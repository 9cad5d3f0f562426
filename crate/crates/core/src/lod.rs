//! Localized orthogonal decomposition: Clément-type quasi-interpolation,
//! patch-local corrector problems in its kernel, and the corrected coarse
//! basis `R_h = P - Σ_K Q^K`.

use std::io::{BufRead, Write};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::assembly::{self, element_stiffness, CoefficientField, LqrSystem};
use crate::error::{Error, Result};
use crate::mesh::{self, TriMesh};
use crate::sparse::{self, SparseCholesky, SparseMatrix};

/// Weighted Clément quasi-interpolation `I_H`: `N_H × N_h` over free nodes,
/// `(I_H v)(z) = ⟨v, φ_z^H⟩ / ⟨1, φ_z^H⟩`.
#[derive(Clone, Debug)]
pub struct ClementInterpolant {
    pub matrix: SparseMatrix,
}

pub fn clement_interpolation(fine: &TriMesh, coarse: &TriMesh) -> Result<ClementInterpolant> {
    let p_all = mesh::prolongation_all_nodes(coarse, fine)?;
    let m_all = assembly::assemble_mass(&fine.without_dirichlet());
    // ⟨φ_i^h, φ_z^H⟩ for all i, z
    let moments = (&p_all.transpose() * &m_all).filter(|_, _, v| *v != 0.0);
    let mut hat_mass = vec![0.0; coarse.n_vertices()];
    for (t, tri) in coarse.triangles().iter().enumerate() {
        let third = coarse.signed_area(t) / 3.0;
        for &v in tri {
            hat_mass[v] += third;
        }
    }
    let mut trip = Vec::with_capacity(moments.nnz());
    for (z, i, v) in moments.triplet_iter() {
        if let (Some(zc), Some(ic)) = (coarse.dof(z), fine.dof(i)) {
            trip.push((zc, ic, v / hat_mass[z]));
        }
    }
    Ok(ClementInterpolant {
        matrix: sparse::from_triplets(coarse.n_free(), fine.n_free(), trip),
    })
}

/// `ω_0 = {K}`, `ω_k` = elements sharing a vertex with `ω_{k-1}`; sorted.
pub fn patch_elements(coarse: &TriMesh, element: usize, k: usize) -> Vec<usize> {
    let mut inside = vec![false; coarse.n_triangles()];
    inside[element] = true;
    let mut frontier = vec![element];
    for _ in 0..k {
        let mut next = Vec::new();
        for &t in &frontier {
            for &v in &coarse.triangles()[t] {
                for &nb in coarse.node_triangles(v) {
                    if !inside[nb] {
                        inside[nb] = true;
                        next.push(nb);
                    }
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    (0..inside.len()).filter(|&t| inside[t]).collect()
}

/// `max(1, ⌈log₂(1/H)⌉)`.
pub fn default_patch_radius(coarse: &TriMesh) -> usize {
    let k = (1.0 / coarse.mesh_width()).log2().ceil();
    (k.max(1.0)) as usize
}

/// Correctors `Q^K φ_z` for the free coarse vertices `z` of one element,
/// stored densely over the patch-interior fine unknowns.
#[derive(Clone, Debug)]
pub struct ElementCorrector {
    pub element: usize,
    /// Free fine unknowns of the patch interior.
    pub patch_dofs: Vec<usize>,
    /// Free coarse unknowns of the element's vertices.
    pub coarse_dofs: Vec<usize>,
    /// `patch_dofs.len() × coarse_dofs.len()`.
    pub values: DMatrix<f64>,
    pub n_constraints: usize,
}

impl ElementCorrector {
    fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.values.len());
        for (c, &z) in self.coarse_dofs.iter().enumerate() {
            for (r, &i) in self.patch_dofs.iter().enumerate() {
                let v = self.values[(r, c)];
                if v != 0.0 {
                    out.push((i, z, v));
                }
            }
        }
        out
    }

    /// As an `N_h × N_H` sparse matrix.
    pub fn to_sparse(&self, n_fine: usize, n_coarse: usize) -> SparseMatrix {
        sparse::from_triplets(n_fine, n_coarse, self.triplets())
    }

    /// Dense `N_h` column of the corrector for coarse unknown `z` (zero if
    /// `z` is not a vertex of the element).
    pub fn column(&self, z: usize, n_fine: usize) -> nalgebra::DVector<f64> {
        let mut col = nalgebra::DVector::zeros(n_fine);
        if let Some(c) = self.coarse_dofs.iter().position(|&d| d == z) {
            for (r, &i) in self.patch_dofs.iter().enumerate() {
                col[i] = self.values[(r, c)];
            }
        }
        col
    }
}

/// Everything needed to solve corrector problems on a nested mesh pair.
pub struct CorrectorProblem<'a> {
    fine: &'a TriMesh,
    coarse: &'a TriMesh,
    interp: &'a ClementInterpolant,
    kappa: &'a CoefficientField,
    stiffness: &'a SparseMatrix,
    depth: usize,
}

/// Saddle-point solve `S q + Cᵀλ = f, C q = 0` by a Schur complement.
fn constrained_solve(
    s: &SparseMatrix,
    c: &SparseMatrix,
    f: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let chol = SparseCholesky::factor(s)?;
    let z = chol.solve(f)?;
    if c.nrows() == 0 {
        return Ok(z);
    }
    let y = chol.solve(&sparse::to_dense(&c.transpose()))?;
    let schur = sparse::mul_dense(c, &y);
    let schur = (&schur + schur.transpose()) * 0.5;
    let schur = schur.cholesky().ok_or_else(|| {
        Error::Singular("constraint Schur complement is not positive definite".into())
    })?;
    let lambda = schur.solve(&sparse::mul_dense(c, &z));
    Ok(z - y * lambda)
}

impl<'a> CorrectorProblem<'a> {
    /// `stiffness` must be the fine stiffness matrix assembled with `kappa`.
    pub fn new(
        fine: &'a TriMesh,
        coarse: &'a TriMesh,
        interp: &'a ClementInterpolant,
        kappa: &'a CoefficientField,
        stiffness: &'a SparseMatrix,
    ) -> Result<Self> {
        if !fine.is_descendant_of(coarse) {
            return Err(Error::NotDescendant {
                coarse: coarse.level(),
                fine: fine.level(),
            });
        }
        if stiffness.nrows() != fine.n_free()
            || (interp.matrix.nrows(), interp.matrix.ncols()) != (coarse.n_free(), fine.n_free())
        {
            return Err(Error::DimensionMismatch(
                "stiffness or interpolant does not match the meshes".into(),
            ));
        }
        Ok(Self {
            fine,
            coarse,
            interp,
            kappa,
            stiffness,
            depth: fine.level() - coarse.level(),
        })
    }

    fn fine_children(&self, t: usize) -> std::ops::Range<usize> {
        let f = 1usize << (2 * self.depth);
        t * f..(t + 1) * f
    }

    /// Corrector with patch `ω_k(K)`; `k = None` uses the whole domain.
    pub fn element_corrector(&self, element: usize, k: Option<usize>) -> Result<ElementCorrector> {
        let (fine, coarse) = (self.fine, self.coarse);
        let patch = match k {
            Some(k) => patch_elements(coarse, element, k),
            None => (0..coarse.n_triangles()).collect(),
        };
        let mut in_patch = vec![false; coarse.n_triangles()];
        for &t in &patch {
            in_patch[t] = true;
        }
        let shift = 2 * self.depth;
        // free fine nodes whose support lies inside the patch
        let mut seen = vec![false; fine.n_vertices()];
        let mut patch_dofs = Vec::new();
        for &t in &patch {
            for ft in self.fine_children(t) {
                for &v in &fine.triangles()[ft] {
                    if seen[v] {
                        continue;
                    }
                    seen[v] = true;
                    if let Some(d) = fine.dof(v) {
                        if fine.node_triangles(v).iter().all(|&s| in_patch[s >> shift]) {
                            patch_dofs.push(d);
                        }
                    }
                }
            }
        }
        patch_dofs.sort_unstable();
        let coarse_dofs: Vec<usize> = coarse.triangles()[element]
            .iter()
            .filter_map(|&v| coarse.dof(v))
            .collect();
        let mut local_of = vec![usize::MAX; fine.n_free()];
        for (l, &d) in patch_dofs.iter().enumerate() {
            local_of[d] = l;
        }
        let n_loc = patch_dofs.len();
        let mut rhs = DMatrix::zeros(n_loc, coarse_dofs.len());
        if n_loc == 0 || coarse_dofs.is_empty() {
            return Ok(ElementCorrector {
                element,
                patch_dofs,
                coarse_dofs,
                values: rhs,
                n_constraints: 0,
            });
        }
        // ∫_K κ ∇φ_z · ∇φ_i over the fine triangles of K
        let ctri = coarse.triangles()[element];
        let cpts = coarse.triangle_points(element);
        let hats: Vec<usize> = (0..3).filter(|&a| coarse.dof(ctri[a]).is_some()).collect();
        for ft in self.fine_children(element) {
            let pts = fine.triangle_points(ft);
            let ke = element_stiffness(pts, self.kappa.value(fine.centroid(ft)));
            let lam: Vec<[f64; 3]> = pts.iter().map(|&p| barycentric(cpts, p)).collect();
            for (a, &va) in fine.triangles()[ft].iter().enumerate() {
                let Some(d) = fine.dof(va) else { continue };
                let l = local_of[d];
                if l == usize::MAX {
                    continue;
                }
                for (c, &h) in hats.iter().enumerate() {
                    let mut s = 0.0;
                    for b in 0..3 {
                        s += ke[a][b] * lam[b][h];
                    }
                    rhs[(l, c)] += s;
                }
            }
        }
        // constraints: coarse free vertices of the patch with a nonzero row
        let mut cand = Vec::new();
        let mut cseen = vec![false; coarse.n_vertices()];
        for &t in &patch {
            for &v in &coarse.triangles()[t] {
                if !cseen[v] {
                    cseen[v] = true;
                    if let Some(d) = coarse.dof(v) {
                        cand.push(d);
                    }
                }
            }
        }
        cand.sort_unstable();
        let c_all = sparse::submatrix(&self.interp.matrix, &cand, &patch_dofs);
        let rows: Vec<usize> = (0..c_all.nrows())
            .filter(|&r| c_all.row(r).values().iter().any(|v| *v != 0.0))
            .collect();
        let cols: Vec<usize> = (0..n_loc).collect();
        let constraints = sparse::submatrix(&c_all, &rows, &cols);
        let s_loc = sparse::submatrix(self.stiffness, &patch_dofs, &patch_dofs);
        let values = constrained_solve(&s_loc, &constraints, &rhs)?;
        Ok(ElementCorrector {
            element,
            patch_dofs,
            coarse_dofs,
            values,
            n_constraints: rows.len(),
        })
    }

    /// Global correctors `Q̂ φ_z` for all free coarse unknowns, from one
    /// saddle-point solve on the whole fine space: `N_h × N_H`, dense.
    pub fn global_correctors(&self) -> Result<DMatrix<f64>> {
        let p = mesh::prolongation(self.coarse, self.fine)?.matrix;
        let rhs = sparse::to_dense(&(self.stiffness * &p));
        constrained_solve(self.stiffness, &self.interp.matrix, &rhs)
    }
}

fn barycentric(p: [[f64; 2]; 3], x: [f64; 2]) -> [f64; 3] {
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let l1 = ((x[0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (x[1] - p[0][1])) / det;
    let l2 = ((p[1][0] - p[0][0]) * (x[1] - p[0][1]) - (x[0] - p[0][0]) * (p[1][1] - p[0][1])) / det;
    [1.0 - l1 - l2, l1, l2]
}

#[derive(Clone, Debug, Default)]
pub struct CorrectorStats {
    /// Patch-interior fine unknowns per coarse element.
    pub patch_sizes: Vec<usize>,
    pub constraint_counts: Vec<usize>,
    pub seconds: f64,
}

/// Corrected basis and the LQR system in corrected coordinates.
#[derive(Clone, Debug)]
pub struct LodBasis {
    pub k: usize,
    /// `N_h × N_H`.
    pub rh: SparseMatrix,
    /// `M_ms = RhᵀMRh`, `S_ms = RhᵀSRh`, `B_ms = RhᵀB`, `C_ms = C Rh`.
    pub system: LqrSystem,
    pub stats: CorrectorStats,
}

pub fn build_lod_basis(
    fine: &TriMesh,
    coarse: &TriMesh,
    kappa: &CoefficientField,
    k: usize,
    system: &LqrSystem,
) -> Result<LodBasis> {
    if k == 0 {
        return Err(Error::InvalidArgument("patch radius must be at least 1".into()));
    }
    let start = Instant::now();
    let interp = clement_interpolation(fine, coarse)?;
    let problem = CorrectorProblem::new(fine, coarse, &interp, kappa, &system.stiffness)?;
    let correctors: Vec<ElementCorrector> = (0..coarse.n_triangles())
        .into_par_iter()
        .map(|t| problem.element_corrector(t, Some(k)))
        .collect::<Result<_>>()?;
    let p = mesh::prolongation(coarse, fine)?.matrix;
    let mut trip: Vec<(usize, usize, f64)> = p.triplet_iter().map(|(i, j, v)| (i, j, *v)).collect();
    for c in &correctors {
        trip.extend(c.triplets().into_iter().map(|(i, j, v)| (i, j, -v)));
    }
    let rh = sparse::from_triplets(fine.n_free(), coarse.n_free(), trip);
    let stats = CorrectorStats {
        patch_sizes: correctors.iter().map(|c| c.patch_dofs.len()).collect(),
        constraint_counts: correctors.iter().map(|c| c.n_constraints).collect(),
        seconds: 0.0,
    };
    let corrected = system.galerkin(&rh)?;
    let mut basis = LodBasis {
        k,
        rh,
        system: corrected,
        stats,
    };
    basis.stats.seconds = start.elapsed().as_secs_f64();
    Ok(basis)
}

/// `e_k = (Σ_z ‖Q̂^K φ_z − Q^{K,(k)} φ_z‖_a²)^{1/2}` for `k = 1..=k_max`,
/// with `Q̂^K` the element corrector on the whole domain.
pub fn corrector_decay_profile(
    problem: &CorrectorProblem,
    element: usize,
    k_max: usize,
) -> Result<Vec<f64>> {
    let n = problem.fine.n_free();
    let full = problem.element_corrector(element, None)?;
    let local: Vec<ElementCorrector> = (1..=k_max)
        .into_par_iter()
        .map(|k| problem.element_corrector(element, Some(k)))
        .collect::<Result<_>>()?;
    Ok(local
        .iter()
        .map(|loc| {
            let mut e2 = 0.0;
            for &z in &full.coarse_dofs {
                let d = full.column(z, n) - loc.column(z, n);
                let sd = sparse::mul_vec(problem.stiffness, &d);
                e2 += d.dot(&sd);
            }
            e2.max(0.0).sqrt()
        })
        .collect())
}

/// SHA-256 of a mesh's vertex/triangle dump and level.
pub fn mesh_fingerprint(mesh: &TriMesh) -> String {
    let mut buf = Vec::new();
    mesh.write_dump(&mut buf).expect("writing to memory");
    let mut h = Sha256::new();
    h.update((mesh.level() as u64).to_le_bytes());
    h.update(&buf);
    assembly::hex(&h.finalize())
}

const HEADER: &str = "lod-basis v1";

impl LodBasis {
    /// Text format: header, `k`, input checksums, then `rh rows cols nnz`
    /// followed by one `i j value` line per stored entry.
    pub fn write<W: Write>(
        &self,
        mut w: W,
        fine: &TriMesh,
        coarse: &TriMesh,
        kappa: &CoefficientField,
    ) -> Result<()> {
        writeln!(w, "{HEADER}")?;
        writeln!(w, "k {}", self.k)?;
        writeln!(w, "fine {}", mesh_fingerprint(fine))?;
        writeln!(w, "coarse {}", mesh_fingerprint(coarse))?;
        writeln!(w, "kappa {}", kappa.fingerprint())?;
        writeln!(
            w,
            "rh {} {} {}",
            self.rh.nrows(),
            self.rh.ncols(),
            self.rh.nnz()
        )?;
        for (i, j, v) in self.rh.triplet_iter() {
            writeln!(w, "{i} {j} {v:?}")?;
        }
        Ok(())
    }

    /// Reads a stored basis, checks it was built from the given inputs and
    /// recomputes the corrected matrices from `system`.
    pub fn read<R: BufRead>(
        r: R,
        fine: &TriMesh,
        coarse: &TriMesh,
        kappa: &CoefficientField,
        system: &LqrSystem,
    ) -> Result<LodBasis> {
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse(format!("missing {what}")))?
                .map_err(Error::from)
        };
        if next("header")?.trim() != HEADER {
            return Err(Error::Parse("not a stored LOD basis".into()));
        }
        let field = |line: String, key: &str| -> Result<String> {
            let mut it = line.splitn(2, ' ');
            if it.next() != Some(key) {
                return Err(Error::Parse(format!("expected `{key}` line")));
            }
            Ok(it.next().unwrap_or("").trim().to_string())
        };
        let k: usize = field(next("k")?, "k")?
            .parse()
            .map_err(|e| Error::Parse(format!("bad k: {e}")))?;
        for (key, want) in [
            ("fine", mesh_fingerprint(fine)),
            ("coarse", mesh_fingerprint(coarse)),
            ("kappa", kappa.fingerprint()),
        ] {
            if field(next(key)?, key)? != want {
                return Err(Error::Checksum(format!("{key} input")));
            }
        }
        let dims: Vec<usize> = field(next("rh")?, "rh")?
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("bad rh header: {e}")))?;
        let [rows, cols, nnz] = dims[..] else {
            return Err(Error::Parse("rh header needs rows, cols, nnz".into()));
        };
        if rows != fine.n_free() || cols != coarse.n_free() {
            return Err(Error::DimensionMismatch("stored basis shape".into()));
        }
        let mut trip = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let line = next("rh entry")?;
            let mut it = line.split_whitespace();
            let parse_err = |e: String| Error::Parse(format!("bad rh entry `{line}`: {e}"));
            let i: usize = it.next().unwrap_or("").parse().map_err(|e| parse_err(format!("{e}")))?;
            let j: usize = it.next().unwrap_or("").parse().map_err(|e| parse_err(format!("{e}")))?;
            let v: f64 = it.next().unwrap_or("").parse().map_err(|e| parse_err(format!("{e}")))?;
            trip.push((i, j, v));
        }
        let rh = sparse::from_triplets(rows, cols, trip);
        Ok(LodBasis {
            k,
            system: system.galerkin(&rh)?,
            rh,
            stats: CorrectorStats::default(),
        })
    }
}
