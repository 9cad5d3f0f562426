//! Nested triangulations of the polygonal benchmark domains, uniform red
//! refinement with genealogy, and nodal prolongation between levels.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sparse::{self, SparseMatrix};

const GEOM_TOL: f64 = 1e-12;

/// Polygonal domains used by the experiments.
#[derive(Clone, Debug, PartialEq)]
pub enum Domain {
    /// `[0,1]²`, Dirichlet everywhere.
    UnitSquare,
    /// Unit square with the axis-aligned rectangle `removed = [lo, hi]` cut out.
    LShape { removed: [[f64; 2]; 2] },
    /// A U lying on its side, open to the right. The left column and the two
    /// horizontal handles have width `thickness`. Dirichlet only on the lower
    /// left edge `{x = 0, 0 ≤ y ≤ thickness}`, Neumann elsewhere.
    UShape {
        thickness: f64,
        width: f64,
        height: f64,
    },
}

/// Boundary classification of a mesh vertex.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeFlag {
    Interior,
    Dirichlet,
    Neumann,
}

impl Domain {
    pub fn l_shape() -> Self {
        Domain::LShape {
            removed: [[0.5, 0.5], [1.0, 1.0]],
        }
    }

    pub fn u_shape() -> Self {
        Domain::UShape {
            thickness: 1.0 / 6.0,
            width: 1.0,
            height: 4.0 / 6.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Domain::UnitSquare => "unit-square",
            Domain::LShape { .. } => "l-shape",
            Domain::UShape { .. } => "u-shape",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Domain::UnitSquare => Ok(()),
            Domain::LShape { removed: [lo, hi] } => {
                let pitch = self.base_pitch();
                for c in [lo[0], lo[1], hi[0], hi[1]] {
                    if !(0.0..=1.0).contains(&c) || ((c / pitch).round() * pitch - c).abs() > GEOM_TOL
                    {
                        return Err(Error::InvalidArgument(format!(
                            "L-shape corner {c} must lie on the {pitch} grid inside [0,1]"
                        )));
                    }
                }
                if hi[0] - lo[0] <= GEOM_TOL || hi[1] - lo[1] <= GEOM_TOL {
                    return Err(Error::InvalidArgument(
                        "L-shape removed rectangle is degenerate".into(),
                    ));
                }
                if self.area() <= GEOM_TOL {
                    return Err(Error::InvalidArgument("L-shape has no area left".into()));
                }
                Ok(())
            }
            Domain::UShape {
                thickness,
                width,
                height,
            } => {
                if !(thickness > 0.0 && width > thickness && height > 2.0 * thickness) {
                    return Err(Error::InvalidArgument(format!(
                        "U-shape needs 0 < thickness < width and 2*thickness < height \
                         (got {thickness}, {width}, {height})"
                    )));
                }
                for (what, v) in [("width", width), ("height", height)] {
                    let r = v / thickness;
                    if (r - r.round()).abs() > 1e-9 {
                        return Err(Error::InvalidArgument(format!(
                            "U-shape {what} must be a multiple of the thickness"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Domain::UnitSquare => 1.0,
            Domain::LShape { removed: [lo, hi] } => 1.0 - (hi[0] - lo[0]) * (hi[1] - lo[1]),
            Domain::UShape {
                thickness,
                width,
                height,
            } => width * height - (width - thickness) * (height - 2.0 * thickness),
        }
    }

    /// Cell size of the level-0 structured grid.
    pub fn base_pitch(&self) -> f64 {
        match *self {
            Domain::UnitSquare => 0.5,
            Domain::LShape { .. } => 0.25,
            Domain::UShape { thickness, .. } => thickness,
        }
    }

    fn base_grid(&self) -> (usize, usize) {
        let pitch = self.base_pitch();
        match *self {
            Domain::UnitSquare | Domain::LShape { .. } => {
                let n = (1.0 / pitch).round() as usize;
                (n, n)
            }
            Domain::UShape { width, height, .. } => (
                (width / pitch).round() as usize,
                (height / pitch).round() as usize,
            ),
        }
    }

    /// Whether the open point `p` lies in the domain interior (used for cell
    /// centres of the base grid).
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let [x, y] = p;
        match *self {
            Domain::UnitSquare => (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y),
            Domain::LShape { removed: [lo, hi] } => {
                Domain::UnitSquare.contains(p) && !(x > lo[0] && x < hi[0] && y > lo[1] && y < hi[1])
            }
            Domain::UShape {
                thickness,
                width,
                height,
            } => {
                let inside_box = (0.0..=width).contains(&x) && (0.0..=height).contains(&y);
                let in_gap = x > thickness && y > thickness && y < height - thickness;
                inside_box && !in_gap
            }
        }
    }

    /// Boundary condition type at a boundary point.
    pub fn is_dirichlet(&self, p: [f64; 2]) -> bool {
        match *self {
            Domain::UnitSquare | Domain::LShape { .. } => true,
            Domain::UShape { thickness, .. } => {
                p[0].abs() < GEOM_TOL && p[1] <= thickness + GEOM_TOL && p[1] >= -GEOM_TOL
            }
        }
    }
}

/// Conforming triangulation with refinement genealogy.
///
/// Children of triangle `t` in the refined mesh are `4t..4t+4`, so the ancestor
/// of a fine triangle `d` levels up is `t >> 2d`.
#[derive(Clone, Debug)]
pub struct TriMesh {
    domain: Domain,
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    node_flags: Vec<NodeFlag>,
    level: usize,
    width: f64,
    parent: Option<Arc<TriMesh>>,
    /// For vertices appended by the last refinement (indices `parent.n_vertices()..`),
    /// the endpoints of the parent edge they bisect.
    midpoint_parents: Vec<[usize; 2]>,
    dof_of_node: Vec<Option<usize>>,
    free_nodes: Vec<usize>,
    node_tri_offsets: Vec<usize>,
    node_tri: Vec<usize>,
}

impl TriMesh {
    fn from_parts(
        domain: Domain,
        vertices: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        node_flags: Vec<NodeFlag>,
        level: usize,
        width: f64,
        parent: Option<Arc<TriMesh>>,
        midpoint_parents: Vec<[usize; 2]>,
    ) -> Self {
        let nv = vertices.len();
        let mut dof_of_node = vec![None; nv];
        let mut free_nodes = Vec::new();
        for (v, f) in node_flags.iter().enumerate() {
            if *f != NodeFlag::Dirichlet {
                dof_of_node[v] = Some(free_nodes.len());
                free_nodes.push(v);
            }
        }
        let mut counts = vec![0usize; nv + 1];
        for t in &triangles {
            for &v in t {
                counts[v + 1] += 1;
            }
        }
        for i in 0..nv {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut node_tri = vec![0; counts[nv]];
        for (ti, t) in triangles.iter().enumerate() {
            for &v in t {
                node_tri[fill[v]] = ti;
                fill[v] += 1;
            }
        }
        Self {
            domain,
            vertices,
            triangles,
            node_flags,
            level,
            width,
            parent,
            midpoint_parents,
            dof_of_node,
            free_nodes,
            node_tri_offsets: counts,
            node_tri,
        }
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn node_flags(&self) -> &[NodeFlag] {
        &self.node_flags
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn parent(&self) -> Option<&Arc<TriMesh>> {
        self.parent.as_ref()
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Leg length of the structured right triangles (the mesh size `h`).
    pub fn mesh_width(&self) -> f64 {
        self.width
    }

    /// Number of unknowns: vertices not on the Dirichlet boundary.
    pub fn n_free(&self) -> usize {
        self.free_nodes.len()
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free_nodes
    }

    pub fn dof(&self, node: usize) -> Option<usize> {
        self.dof_of_node[node]
    }

    pub fn node_triangles(&self, node: usize) -> &[usize] {
        &self.node_tri[self.node_tri_offsets[node]..self.node_tri_offsets[node + 1]]
    }

    pub fn triangle_points(&self, t: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Signed area (positive for counter-clockwise triangles).
    pub fn signed_area(&self, t: usize) -> f64 {
        signed_area(self.triangle_points(t))
    }

    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangle_points(t);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    fn same_structure(&self, other: &TriMesh) -> bool {
        self.level == other.level
            && self.vertices == other.vertices
            && self.triangles == other.triangles
    }

    /// Chain `[self, parent, ..., coarse]` if `coarse` is an ancestor (or equal).
    fn ancestry_to<'a>(&'a self, coarse: &TriMesh) -> Option<Vec<&'a TriMesh>> {
        let mut chain = vec![self];
        let mut cur = self;
        loop {
            if cur.level < coarse.level {
                return None;
            }
            if cur.same_structure(coarse) {
                return Some(chain);
            }
            match cur.parent.as_deref() {
                Some(p) => {
                    chain.push(p);
                    cur = p;
                }
                None => return None,
            }
        }
    }

    pub fn is_descendant_of(&self, coarse: &TriMesh) -> bool {
        self.ancestry_to(coarse).is_some()
    }

    /// Copy of this mesh (and its ancestors) with every Dirichlet vertex
    /// turned into a Neumann vertex, so all vertices carry an unknown.
    pub fn without_dirichlet(&self) -> TriMesh {
        let parent = self
            .parent
            .as_ref()
            .map(|p| Arc::new(p.without_dirichlet()));
        let flags = self
            .node_flags
            .iter()
            .map(|f| match f {
                NodeFlag::Dirichlet => NodeFlag::Neumann,
                other => *other,
            })
            .collect();
        TriMesh::from_parts(
            self.domain.clone(),
            self.vertices.clone(),
            self.triangles.clone(),
            flags,
            self.level,
            self.width,
            parent,
            self.midpoint_parents.clone(),
        )
    }

    /// Write the plain-text dump: `vertex x y flag` and `triangle i j k` lines.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        for (p, f) in self.vertices.iter().zip(&self.node_flags) {
            let flag = match f {
                NodeFlag::Interior => "interior",
                NodeFlag::Dirichlet => "dirichlet",
                NodeFlag::Neumann => "neumann",
            };
            writeln!(w, "vertex {:?} {:?} {flag}", p[0], p[1])?;
        }
        for t in &self.triangles {
            writeln!(w, "triangle {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }
}

fn signed_area(p: [[f64; 2]; 3]) -> f64 {
    0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]))
}

fn classify_boundary(domain: &Domain, p: [f64; 2]) -> NodeFlag {
    if domain.is_dirichlet(p) {
        NodeFlag::Dirichlet
    } else {
        NodeFlag::Neumann
    }
}

/// Edges as sorted `(min, max)` keys with the number of adjacent triangles.
fn edge_counts(triangles: &[[usize; 3]]) -> BTreeMap<(usize, usize), usize> {
    let mut edges = BTreeMap::new();
    for t in triangles {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    edges
}

/// Level-0 mesh: structured grid of squares at the domain's base pitch, each
/// square split along its lower-left to upper-right diagonal. Vertices are
/// numbered lexicographically by `(y, x)`.
pub fn build_base_mesh(domain: &Domain) -> Result<TriMesh> {
    domain.validate()?;
    let pitch = domain.base_pitch();
    let (nx, ny) = domain.base_grid();
    let keep = |i: usize, j: usize| {
        domain.contains([(i as f64 + 0.5) * pitch, (j as f64 + 0.5) * pitch])
    };
    let mut used = vec![false; (nx + 1) * (ny + 1)];
    let lattice = |i: usize, j: usize| j * (nx + 1) + i;
    for j in 0..ny {
        for i in 0..nx {
            if keep(i, j) {
                for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    used[lattice(i + di, j + dj)] = true;
                }
            }
        }
    }
    let mut index = vec![usize::MAX; used.len()];
    let mut vertices = Vec::new();
    for j in 0..=ny {
        for i in 0..=nx {
            if used[lattice(i, j)] {
                index[lattice(i, j)] = vertices.len();
                vertices.push([i as f64 * pitch, j as f64 * pitch]);
            }
        }
    }
    let mut triangles = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            if keep(i, j) {
                let v00 = index[lattice(i, j)];
                let v10 = index[lattice(i + 1, j)];
                let v01 = index[lattice(i, j + 1)];
                let v11 = index[lattice(i + 1, j + 1)];
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }
    }
    let mut flags = vec![NodeFlag::Interior; vertices.len()];
    for ((a, b), count) in edge_counts(&triangles) {
        if count == 1 {
            flags[a] = classify_boundary(domain, vertices[a]);
            flags[b] = classify_boundary(domain, vertices[b]);
        }
    }
    Ok(TriMesh::from_parts(
        domain.clone(),
        vertices,
        triangles,
        flags,
        0,
        pitch,
        None,
        Vec::new(),
    ))
}

/// Red refinement: every triangle is split into four similar children through
/// its edge midpoints. Old vertices keep their indices; midpoints are appended
/// in `(min endpoint, max endpoint)` order.
pub fn refine_uniform(mesh: &Arc<TriMesh>) -> TriMesh {
    let nv = mesh.n_vertices();
    let edges = edge_counts(&mesh.triangles);
    let mut vertices = mesh.vertices.clone();
    let mut flags = mesh.node_flags.clone();
    let mut midpoint_parents = Vec::with_capacity(edges.len());
    let mut mid_of = BTreeMap::new();
    for (&(a, b), &count) in &edges {
        let pa = mesh.vertices[a];
        let pb = mesh.vertices[b];
        let m = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
        mid_of.insert((a, b), vertices.len());
        vertices.push(m);
        midpoint_parents.push([a, b]);
        flags.push(if count == 1 {
            classify_boundary(&mesh.domain, m)
        } else {
            NodeFlag::Interior
        });
    }
    debug_assert_eq!(vertices.len(), nv + edges.len());
    let mid = |a: usize, b: usize| mid_of[&(a.min(b), a.max(b))];
    let mut triangles = Vec::with_capacity(4 * mesh.n_triangles());
    for &[a, b, c] in &mesh.triangles {
        let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
        triangles.push([a, ab, ca]);
        triangles.push([ab, b, bc]);
        triangles.push([ca, bc, c]);
        triangles.push([ab, bc, ca]);
    }
    TriMesh::from_parts(
        mesh.domain.clone(),
        vertices,
        triangles,
        flags,
        mesh.level + 1,
        0.5 * mesh.width,
        Some(Arc::clone(mesh)),
        midpoint_parents,
    )
}

/// Base mesh plus `levels` successive refinements, coarsest first.
pub fn build_hierarchy(domain: &Domain, levels: usize) -> Result<Vec<Arc<TriMesh>>> {
    let mut out = vec![Arc::new(build_base_mesh(domain)?)];
    for _ in 0..levels {
        let next = refine_uniform(out.last().unwrap());
        out.push(Arc::new(next));
    }
    Ok(out)
}

/// Shape regularity `max_K diam(B_K) / diam(K)` with `B_K` the inscribed ball.
pub fn shape_regularity(mesh: &TriMesh) -> f64 {
    (0..mesh.n_triangles())
        .map(|t| {
            let [a, b, c] = mesh.triangle_points(t);
            let len = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            let (e0, e1, e2) = (len(a, b), len(b, c), len(c, a));
            let inradius = 2.0 * signed_area([a, b, c]).abs() / (e0 + e1 + e2);
            2.0 * inradius / e0.max(e1).max(e2)
        })
        .fold(0.0, f64::max)
}

/// Nodal prolongation between nested P1 spaces.
#[derive(Clone, Debug)]
pub struct Prolongation {
    /// `N_h × N_H`, entry `(i, j) = φ_j^H(z_i)` over free nodes.
    pub matrix: SparseMatrix,
    pub coarse_level: usize,
    pub fine_level: usize,
}

/// Prolongation over all vertices (boundary included) of both meshes.
pub fn prolongation_all_nodes(coarse: &TriMesh, fine: &TriMesh) -> Result<SparseMatrix> {
    let chain = fine.ancestry_to(coarse).ok_or(Error::NotDescendant {
        coarse: coarse.level,
        fine: fine.level,
    })?;
    let mut total = sparse::from_triplets(
        coarse.n_vertices(),
        coarse.n_vertices(),
        (0..coarse.n_vertices()).map(|i| (i, i, 1.0)),
    );
    // chain is fine-to-coarse; walk it coarse-to-fine
    for m in chain.iter().rev().skip(1) {
        let n_old = m.n_vertices() - m.midpoint_parents.len();
        let mut trip = Vec::with_capacity(n_old + 2 * m.midpoint_parents.len());
        for i in 0..n_old {
            trip.push((i, i, 1.0));
        }
        for (k, &[a, b]) in m.midpoint_parents.iter().enumerate() {
            trip.push((n_old + k, a, 0.5));
            trip.push((n_old + k, b, 0.5));
        }
        let step = sparse::from_triplets(m.n_vertices(), n_old, trip);
        total = &step * &total;
    }
    Ok(total)
}

pub fn prolongation(coarse: &TriMesh, fine: &TriMesh) -> Result<Prolongation> {
    let full = prolongation_all_nodes(coarse, fine)?;
    let matrix = sparse::submatrix(&full, fine.free_nodes(), coarse.free_nodes());
    // drop explicit zeros that may come out of the composition
    let matrix = matrix.filter(|_, _, v| *v != 0.0);
    Ok(Prolongation {
        matrix,
        coarse_level: coarse.level,
        fine_level: fine.level,
    })
}
