//! Discrete geometries.
//!
//! Two meshes live here:
//!
//! * [`FvMesh`], an admissible orthogonal cell mesh of the spatial domain used by
//!   the finite-volume scheme (two-point fluxes with transmissivity `m_σ / d_σ`);
//! * [`SpaceTimeMesh`], a simplicial mesh of `(0,1) × Ω` used by the elliptic step
//!   of the augmented-Lagrangian solver. It is the Kuhn (Freudenthal) split of a
//!   tensor-product box grid, so every element is a path simplex and gradients of
//!   P1 fields are plain forward differences along the path.
//!
//! The spatial node grid underlying the space-time mesh is [`SpatialGrid`]. Both
//! [`FvMesh`] cells and [`SpatialGrid`] nodes can be viewed as a [`Quadrature`]
//! (points with weights), which is what energies, masses and audits consume.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use thiserror::Error;

/// A point of the spatial domain. One-dimensional meshes leave `y = 0`.
pub type Point = [f64; 2];

const ORTHOGONALITY_TOL: f64 = 1e-12;
const PARTITION_TOL: f64 = 1e-12;
const TRANSMISSIVITY_TOL: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("mesh file, line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Points with nonnegative weights; the discrete stand-in for `∫_Ω · dx`.
pub trait Quadrature {
    fn len(&self) -> usize;
    fn point(&self, k: usize) -> Point;
    fn weight(&self, k: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn total_weight(&self) -> f64 {
        (0..self.len()).map(|k| self.weight(k)).sum()
    }
}

/// Axis-aligned box `[lo, hi]` in dimension 1 or 2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxDomain {
    pub dim: usize,
    pub lo: Point,
    pub hi: Point,
}

impl BoxDomain {
    pub fn interval(lo: f64, hi: f64) -> Self {
        Self { dim: 1, lo: [lo, 0.0], hi: [hi, 0.0] }
    }

    pub fn rectangle(lo: Point, hi: Point) -> Self {
        Self { dim: 2, lo, hi }
    }

    pub fn unit_square() -> Self {
        Self::rectangle([0.0, 0.0], [1.0, 1.0])
    }

    pub fn side(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn measure(&self) -> f64 {
        (0..self.dim).map(|a| self.side(a)).product()
    }

    fn check(&self) -> Result<(), MeshError> {
        if self.dim != 1 && self.dim != 2 {
            return Err(MeshError::InvalidArgument(format!("dimension {} not supported", self.dim)));
        }
        for axis in 0..self.dim {
            let side = self.side(axis);
            if !(side > 0.0) || !side.is_finite() {
                return Err(MeshError::InvalidArgument(format!(
                    "degenerate box: side {axis} has length {side}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub center: Point,
    pub measure: f64,
}

/// Interior edge `σ = K|L`, stored once with `K < L` for generated meshes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerEdge {
    pub cells: (usize, usize),
    pub measure: f64,
    pub distance: f64,
    pub transmissivity: f64,
    /// Unit normal to σ, outward with respect to the first cell.
    pub normal: Point,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryEdge {
    pub cell: usize,
    pub face_point: Point,
    pub measure: f64,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FvMesh {
    pub dim: usize,
    pub cells: Vec<Cell>,
    pub inner_edges: Vec<InnerEdge>,
    pub boundary_edges: Vec<BoundaryEdge>,
    pub domain_measure: f64,
}

impl FvMesh {
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// Inner edge indices touching each cell.
    pub fn cell_edges(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.cells.len()];
        for (e, edge) in self.inner_edges.iter().enumerate() {
            out[edge.cells.0].push(e);
            out[edge.cells.1].push(e);
        }
        out
    }
}

impl Quadrature for FvMesh {
    fn len(&self) -> usize {
        self.cells.len()
    }
    fn point(&self, k: usize) -> Point {
        self.cells[k].center
    }
    fn weight(&self, k: usize) -> f64 {
        self.cells[k].measure
    }
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Uniform Cartesian mesh with `nx × ny` cells, numbered `j * nx + i`.
///
/// For a one-dimensional domain `ny` must be 1.
pub fn build_cartesian_fv_mesh(nx: usize, ny: usize, domain: &BoxDomain) -> Result<FvMesh, MeshError> {
    domain.check()?;
    if nx == 0 || ny == 0 {
        return Err(MeshError::InvalidArgument(format!("cell counts must be positive, got {nx}×{ny}")));
    }
    if domain.dim == 1 && ny != 1 {
        return Err(MeshError::InvalidArgument("a 1D mesh has ny = 1".into()));
    }
    let hx = domain.side(0) / nx as f64;
    let hy = if domain.dim == 2 { domain.side(1) / ny as f64 } else { 1.0 };
    let face_x = if domain.dim == 2 { hy } else { 1.0 };
    let center = |i: usize, j: usize| -> Point {
        let x = domain.lo[0] + (i as f64 + 0.5) * hx;
        let y = if domain.dim == 2 { domain.lo[1] + (j as f64 + 0.5) * hy } else { 0.0 };
        [x, y]
    };
    let id = |i: usize, j: usize| j * nx + i;

    let mut cells = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            cells.push(Cell { center: center(i, j), measure: hx * hy });
        }
    }

    let mut inner_edges = Vec::new();
    let mut boundary_edges = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let k = id(i, j);
            let c = cells[k].center;
            if i + 1 < nx {
                inner_edges.push(InnerEdge {
                    cells: (k, id(i + 1, j)),
                    measure: face_x,
                    distance: hx,
                    transmissivity: face_x / hx,
                    normal: [1.0, 0.0],
                });
            }
            if domain.dim == 2 && j + 1 < ny {
                inner_edges.push(InnerEdge {
                    cells: (k, id(i, j + 1)),
                    measure: hx,
                    distance: hy,
                    transmissivity: hx / hy,
                    normal: [0.0, 1.0],
                });
            }
            if i == 0 {
                boundary_edges.push(BoundaryEdge {
                    cell: k,
                    face_point: [domain.lo[0], c[1]],
                    measure: face_x,
                    distance: 0.5 * hx,
                });
            }
            if i + 1 == nx {
                boundary_edges.push(BoundaryEdge {
                    cell: k,
                    face_point: [domain.hi[0], c[1]],
                    measure: face_x,
                    distance: 0.5 * hx,
                });
            }
            if domain.dim == 2 {
                if j == 0 {
                    boundary_edges.push(BoundaryEdge {
                        cell: k,
                        face_point: [c[0], domain.lo[1]],
                        measure: hx,
                        distance: 0.5 * hy,
                    });
                }
                if j + 1 == ny {
                    boundary_edges.push(BoundaryEdge {
                        cell: k,
                        face_point: [c[0], domain.hi[1]],
                        measure: hx,
                        distance: 0.5 * hy,
                    });
                }
            }
        }
    }

    Ok(FvMesh { dim: domain.dim, cells, inner_edges, boundary_edges, domain_measure: domain.measure() })
}

/// Uniform mesh of `[lo, hi]` with `n` cells.
pub fn build_interval_fv_mesh(n: usize, lo: f64, hi: f64) -> Result<FvMesh, MeshError> {
    build_cartesian_fv_mesh(n, 1, &BoxDomain::interval(lo, hi))
}

#[derive(Clone, Debug, PartialEq)]
pub enum MeshViolation {
    NonPositiveCellMeasure { cell: usize, measure: f64 },
    CellIndexOutOfRange { edge: usize, cell: usize },
    SelfEdge { edge: usize },
    DuplicateEdge { first: usize, second: usize },
    NonPositiveEdge { edge: usize },
    Orthogonality { edge: usize, deviation: f64 },
    Transmissivity { edge: usize, stored: f64, expected: f64 },
    Partition { sum: f64, domain: f64 },
}

/// Returns every violated [`FvMesh`] invariant; empty means the mesh is admissible.
pub fn validate_mesh(mesh: &FvMesh) -> Vec<MeshViolation> {
    let mut report = Vec::new();
    let n = mesh.cells.len();
    for (k, cell) in mesh.cells.iter().enumerate() {
        if !(cell.measure > 0.0) {
            report.push(MeshViolation::NonPositiveCellMeasure { cell: k, measure: cell.measure });
        }
    }

    let mut seen = std::collections::HashMap::new();
    for (e, edge) in mesh.inner_edges.iter().enumerate() {
        let (k, l) = edge.cells;
        if k >= n || l >= n {
            report.push(MeshViolation::CellIndexOutOfRange { edge: e, cell: k.max(l) });
            continue;
        }
        if k == l {
            report.push(MeshViolation::SelfEdge { edge: e });
            continue;
        }
        if let Some(&first) = seen.get(&(k.min(l), k.max(l))) {
            report.push(MeshViolation::DuplicateEdge { first, second: e });
        } else {
            seen.insert((k.min(l), k.max(l)), e);
        }
        if !(edge.measure > 0.0) || !(edge.distance > 0.0) {
            report.push(MeshViolation::NonPositiveEdge { edge: e });
            continue;
        }
        let xk = mesh.cells[k].center;
        let xl = mesh.cells[l].center;
        let dev = ((xl[0] - xk[0]) / edge.distance - edge.normal[0]).hypot((xl[1] - xk[1]) / edge.distance - edge.normal[1]);
        if !(dev <= ORTHOGONALITY_TOL) {
            report.push(MeshViolation::Orthogonality { edge: e, deviation: dev });
        }
        let expected = edge.measure / edge.distance;
        if !((edge.transmissivity - expected).abs() <= TRANSMISSIVITY_TOL * expected) {
            report.push(MeshViolation::Transmissivity { edge: e, stored: edge.transmissivity, expected });
        }
    }
    for edge in &mesh.boundary_edges {
        if edge.cell >= n {
            report.push(MeshViolation::CellIndexOutOfRange { edge: usize::MAX, cell: edge.cell });
        }
    }

    let sum: f64 = mesh.cells.iter().map(|c| c.measure).sum();
    if !((sum - mesh.domain_measure).abs() <= PARTITION_TOL * mesh.domain_measure.abs().max(f64::MIN_POSITIVE)) {
        report.push(MeshViolation::Partition { sum, domain: mesh.domain_measure });
    }
    report
}

/// Writes the plain-text mesh format (`CELLS`, `INNER_EDGES`, `BOUNDARY_EDGES` sections).
pub fn write_fv_mesh<W: Write>(mesh: &FvMesh, mut out: W) -> Result<(), MeshError> {
    let mut s = String::new();
    let pt = |p: Point, dim: usize| {
        if dim == 1 {
            format!("{:.16e}", p[0])
        } else {
            format!("{:.16e} {:.16e}", p[0], p[1])
        }
    };
    writeln!(s, "DIMENSION {}", mesh.dim).unwrap();
    writeln!(s, "DOMAIN_MEASURE {:.16e}", mesh.domain_measure).unwrap();
    writeln!(s, "CELLS {}", mesh.cells.len()).unwrap();
    for (k, c) in mesh.cells.iter().enumerate() {
        writeln!(s, "{k} {} {:.16e}", pt(c.center, mesh.dim), c.measure).unwrap();
    }
    writeln!(s, "INNER_EDGES {}", mesh.inner_edges.len()).unwrap();
    for e in &mesh.inner_edges {
        writeln!(s, "{} {} {:.16e} {:.16e}", e.cells.0, e.cells.1, e.measure, e.distance).unwrap();
    }
    writeln!(s, "BOUNDARY_EDGES {}", mesh.boundary_edges.len()).unwrap();
    for e in &mesh.boundary_edges {
        writeln!(s, "{} {} {:.16e} {:.16e}", e.cell, pt(e.face_point, mesh.dim), e.measure, e.distance).unwrap();
    }
    out.write_all(s.as_bytes())?;
    Ok(())
}

/// Reads the plain-text mesh format. Normals are derived from cell centers and
/// transmissivities from `m_σ / d_σ`; run [`validate_mesh`] on the result.
pub fn read_fv_mesh<R: BufRead>(input: R) -> Result<FvMesh, MeshError> {
    let mut lines = input
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| l.as_ref().map(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#')).unwrap_or(true));

    let mut dim = 2;
    let mut domain_measure = None;
    let mut cells = Vec::new();
    let mut inner_edges = Vec::new();
    let mut boundary_edges = Vec::new();

    fn num<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T, MeshError> {
        tok.ok_or_else(|| MeshError::Parse { line, msg: format!("missing {what}") })?
            .parse()
            .map_err(|_| MeshError::Parse { line, msg: format!("bad {what}") })
    }

    while let Some((ln, line)) = lines.next() {
        let line = line?;
        let mut tok = line.split_whitespace();
        let head = tok.next().unwrap_or_default();
        match head {
            "DIMENSION" => {
                dim = num(tok.next(), ln, "dimension")?;
                if dim != 1 && dim != 2 {
                    return Err(MeshError::Parse { line: ln, msg: format!("dimension {dim} not supported") });
                }
            }
            "DOMAIN_MEASURE" => domain_measure = Some(num::<f64>(tok.next(), ln, "domain measure")?),
            "CELLS" | "INNER_EDGES" | "BOUNDARY_EDGES" => {
                let count: usize = num(tok.next(), ln, "count")?;
                for _ in 0..count {
                    let (ln, row) = lines
                        .next()
                        .ok_or(MeshError::Parse { line: ln, msg: format!("{head}: unexpected end of file") })?;
                    let row = row?;
                    let mut t = row.split_whitespace();
                    let point = |t: &mut std::str::SplitWhitespace| -> Result<Point, MeshError> {
                        let x = num(t.next(), ln, "coordinate")?;
                        let y = if dim == 2 { num(t.next(), ln, "coordinate")? } else { 0.0 };
                        Ok([x, y])
                    };
                    match head {
                        "CELLS" => {
                            let id: usize = num(t.next(), ln, "cell id")?;
                            if id != cells.len() {
                                return Err(MeshError::Parse { line: ln, msg: format!("cell id {id} out of sequence") });
                            }
                            let center = point(&mut t)?;
                            let measure = num(t.next(), ln, "cell measure")?;
                            cells.push(Cell { center, measure });
                        }
                        "INNER_EDGES" => {
                            let k: usize = num(t.next(), ln, "cell K")?;
                            let l: usize = num(t.next(), ln, "cell L")?;
                            let measure: f64 = num(t.next(), ln, "edge measure")?;
                            let distance: f64 = num(t.next(), ln, "edge distance")?;
                            inner_edges.push(InnerEdge {
                                cells: (k, l),
                                measure,
                                distance,
                                transmissivity: measure / distance,
                                normal: [0.0, 0.0],
                            });
                        }
                        _ => {
                            let cell: usize = num(t.next(), ln, "cell")?;
                            let face_point = point(&mut t)?;
                            let measure = num(t.next(), ln, "edge measure")?;
                            let distance = num(t.next(), ln, "edge distance")?;
                            boundary_edges.push(BoundaryEdge { cell, face_point, measure, distance });
                        }
                    }
                }
            }
            other => return Err(MeshError::Parse { line: ln, msg: format!("unknown section `{other}`") }),
        }
    }

    for edge in &mut inner_edges {
        let (k, l) = edge.cells;
        if k < cells.len() && l < cells.len() {
            let (xk, xl) = (cells[k].center, cells[l].center);
            let d = dist(xk, xl);
            if d > 0.0 {
                edge.normal = [(xl[0] - xk[0]) / d, (xl[1] - xk[1]) / d];
            }
        }
    }
    let domain_measure = domain_measure.unwrap_or_else(|| cells.iter().map(|c| c.measure).sum());
    Ok(FvMesh { dim, cells, inner_edges, boundary_edges, domain_measure })
}

/// Structured node grid of a box, split into Kuhn simplices when needed.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGrid {
    pub domain: BoxDomain,
    /// Interval counts per axis; the second entry is 1 in 1D.
    pub cells: [usize; 2],
}

impl SpatialGrid {
    pub fn new(domain: BoxDomain, nx: usize, ny: usize) -> Result<Self, MeshError> {
        domain.check()?;
        if nx == 0 || ny == 0 || (domain.dim == 1 && ny != 1) {
            return Err(MeshError::InvalidArgument(format!("bad grid size {nx}×{ny}")));
        }
        Ok(Self { domain, cells: [nx, ny] })
    }

    pub fn dim(&self) -> usize {
        self.domain.dim
    }

    pub fn node_counts(&self) -> [usize; 2] {
        if self.dim() == 1 {
            [self.cells[0] + 1, 1]
        } else {
            [self.cells[0] + 1, self.cells[1] + 1]
        }
    }

    pub fn n_nodes(&self) -> usize {
        let [a, b] = self.node_counts();
        a * b
    }

    pub fn n_cells(&self) -> usize {
        self.cells[0] * self.cells[1]
    }

    pub fn spacing(&self) -> [f64; 2] {
        let hy = if self.dim() == 2 { self.domain.side(1) / self.cells[1] as f64 } else { 1.0 };
        [self.domain.side(0) / self.cells[0] as f64, hy]
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * self.node_counts()[0] + i
    }

    pub fn node_point(&self, k: usize) -> Point {
        let nxn = self.node_counts()[0];
        let (i, j) = (k % nxn, k / nxn);
        let h = self.spacing();
        let y = if self.dim() == 2 { self.domain.lo[1] + j as f64 * h[1] } else { 0.0 };
        [self.domain.lo[0] + i as f64 * h[0], y]
    }

    /// Kuhn simplices of each grid cell (cell-major, same numbering as the FV mesh).
    pub fn cell_simplices(&self) -> Vec<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(self.n_cells());
        for j in 0..self.cells[1] {
            for i in 0..self.cells[0] {
                if self.dim() == 1 {
                    out.push(vec![vec![self.node_index(i, 0), self.node_index(i + 1, 0)]]);
                } else {
                    let v00 = self.node_index(i, j);
                    let v10 = self.node_index(i + 1, j);
                    let v01 = self.node_index(i, j + 1);
                    let v11 = self.node_index(i + 1, j + 1);
                    out.push(vec![vec![v00, v10, v11], vec![v00, v01, v11]]);
                }
            }
        }
        out
    }

    /// `∫ ψ_j dx` for each P1 hat function; the lumped mass of the grid.
    pub fn lumped_weights(&self) -> Vec<f64> {
        let h = self.spacing();
        let cell_measure = h[0] * h[1];
        let mut w = vec![0.0; self.n_nodes()];
        for simplices in self.cell_simplices() {
            let vol = cell_measure / simplices.len() as f64;
            for s in simplices {
                let share = vol / s.len() as f64;
                for v in s {
                    w[v] += share;
                }
            }
        }
        w
    }

    /// Grid nodes with their lumped weights.
    pub fn nodal_quadrature(&self) -> NodalQuadrature {
        NodalQuadrature {
            points: (0..self.n_nodes()).map(|k| self.node_point(k)).collect(),
            weights: self.lumped_weights(),
        }
    }

    /// Cell averages of the P1 interpolant of a nodal field.
    pub fn cell_averages(&self, nodal: &[f64]) -> Vec<f64> {
        self.cell_simplices()
            .iter()
            .map(|simplices| {
                let share = 1.0 / simplices.len() as f64;
                simplices
                    .iter()
                    .map(|s| share * s.iter().map(|&v| nodal[v]).sum::<f64>() / s.len() as f64)
                    .sum()
            })
            .collect()
    }

    /// The FV mesh whose cells are the grid cells.
    pub fn fv_mesh(&self) -> Result<FvMesh, MeshError> {
        build_cartesian_fv_mesh(self.cells[0], self.cells[1], &self.domain)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodalQuadrature {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

impl Quadrature for NodalQuadrature {
    fn len(&self) -> usize {
        self.points.len()
    }
    fn point(&self, k: usize) -> Point {
        self.points[k]
    }
    fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }
}

/// Space-time simplex: vertices along a Kuhn path and the axis stepped at each edge
/// of the path (`0` = time, `1` = x, `2` = y).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpaceTimeElement {
    pub nodes: [usize; 4],
    pub axes: [usize; 3],
    pub measure: f64,
}

#[derive(Clone, Debug)]
pub struct SpaceTimeMesh {
    pub grid: SpatialGrid,
    pub n_inner: usize,
    /// Node coordinates `(t, x, y)`; node `level * n_spatial + j`.
    pub nodes: Vec<[f64; 3]>,
    pub elements: Vec<SpaceTimeElement>,
    /// Step length along each space-time axis.
    pub spacing: [f64; 3],
    pub faces_t0: Vec<Vec<usize>>,
    pub faces_t1: Vec<Vec<usize>>,
    /// Space-time node index of spatial node `j` at `t = 0`.
    pub trace_t0: Vec<usize>,
    /// Space-time node index of spatial node `j` at `t = 1`.
    pub trace_t1: Vec<usize>,
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for a in 0..n {
            if !prefix.contains(&a) {
                prefix.push(a);
                rec(prefix, n, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), n, &mut out);
    out
}

/// Tensor-product space-time mesh over `n_inner` uniform time intervals, split
/// into simplices (triangles for 1D space, tetrahedra for 2D space).
pub fn build_space_time_mesh(grid: &SpatialGrid, n_inner: usize) -> Result<SpaceTimeMesh, MeshError> {
    if n_inner == 0 {
        return Err(MeshError::InvalidArgument("n_inner must be at least 1".into()));
    }
    let d = grid.dim();
    let n_st = d + 1;
    let ns = grid.n_nodes();
    let [nxn, _] = grid.node_counts();
    let h = grid.spacing();
    let ht = 1.0 / n_inner as f64;
    let spacing = [ht, h[0], if d == 2 { h[1] } else { 0.0 }];

    let mut nodes = Vec::with_capacity((n_inner + 1) * ns);
    for level in 0..=n_inner {
        let t = if level == n_inner { 1.0 } else { level as f64 * ht };
        for j in 0..ns {
            let p = grid.node_point(j);
            nodes.push([t, p[0], p[1]]);
        }
    }

    let index = |lvl: usize, i: usize, j: usize| lvl * ns + j * nxn + i;
    let perms = permutations(n_st);
    let factorial: f64 = (1..=n_st).map(|k| k as f64).product();
    let box_volume = ht * h[0] * if d == 2 { h[1] } else { 1.0 };
    let measure = box_volume / factorial;

    let mut elements = Vec::with_capacity(n_inner * grid.n_cells() * perms.len());
    for lvl in 0..n_inner {
        for j in 0..grid.cells[1] {
            for i in 0..grid.cells[0] {
                for perm in &perms {
                    let mut cur = [lvl, i, if d == 2 { j } else { 0 }];
                    let mut el = SpaceTimeElement { nodes: [0; 4], axes: [0; 3], measure };
                    el.nodes[0] = index(cur[0], cur[1], cur[2]);
                    for (step, &axis) in perm.iter().enumerate() {
                        cur[axis] += 1;
                        el.axes[step] = axis;
                        el.nodes[step + 1] = index(cur[0], cur[1], cur[2]);
                    }
                    elements.push(el);
                }
            }
        }
    }

    let spatial_faces: Vec<Vec<usize>> = grid.cell_simplices().into_iter().flatten().collect();
    let lift = |lvl: usize| -> Vec<Vec<usize>> {
        spatial_faces.iter().map(|f| f.iter().map(|&v| lvl * ns + v).collect()).collect()
    };

    Ok(SpaceTimeMesh {
        grid: grid.clone(),
        n_inner,
        nodes,
        elements,
        spacing,
        faces_t0: lift(0),
        faces_t1: lift(n_inner),
        trace_t0: (0..ns).collect(),
        trace_t1: (0..ns).map(|j| n_inner * ns + j).collect(),
    })
}

impl SpaceTimeMesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    /// Space-time dimension `d + 1`.
    pub fn dim(&self) -> usize {
        self.grid.dim() + 1
    }

    /// Spatial dimension `d`.
    pub fn space_dim(&self) -> usize {
        self.grid.dim()
    }

    /// Gradient `(∂_t, ∂_x, ∂_y)` of a P1 nodal field on one element.
    #[inline]
    pub fn gradient(&self, e: usize, field: &[f64]) -> [f64; 3] {
        let el = &self.elements[e];
        let mut g = [0.0; 3];
        for k in 0..self.dim() {
            let axis = el.axes[k];
            g[axis] = (field[el.nodes[k + 1]] - field[el.nodes[k]]) / self.spacing[axis];
        }
        g
    }

    /// Adds `Σ_e w_e · flux_e · ∇ψ_j` into `out[j]` for every node, i.e. the
    /// transpose of [`SpaceTimeMesh::gradient`] weighted by element measure.
    pub fn add_divergence_load(&self, flux: impl Fn(usize) -> [f64; 3], out: &mut [f64]) {
        let dim = self.dim();
        for (e, el) in self.elements.iter().enumerate() {
            let f = flux(e);
            for k in 0..dim {
                let axis = el.axes[k];
                let c = el.measure * f[axis] / self.spacing[axis];
                out[el.nodes[k + 1]] += c;
                out[el.nodes[k]] -= c;
            }
        }
    }

    pub fn total_measure(&self) -> f64 {
        self.elements.iter().map(|e| e.measure).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifty_grid_cell_measure() {
        let m = build_cartesian_fv_mesh(50, 50, &BoxDomain::unit_square()).unwrap();
        assert_eq!(m.n_cells(), 2500);
        for c in &m.cells {
            assert!((c.measure - 4e-4).abs() < 1e-18);
        }
        assert!(validate_mesh(&m).is_empty());
    }

    #[test]
    fn single_cell() {
        let m = build_cartesian_fv_mesh(1, 1, &BoxDomain::unit_square()).unwrap();
        assert_eq!(m.n_cells(), 1);
        assert_eq!(m.inner_edges.len(), 0);
        assert_eq!(m.boundary_edges.len(), 4);
    }

    #[test]
    fn unit_spacing_edge() {
        let m = build_cartesian_fv_mesh(2, 1, &BoxDomain::rectangle([0.0, 0.0], [2.0, 1.0])).unwrap();
        assert_eq!(m.inner_edges.len(), 1);
        let e = m.inner_edges[0];
        assert_eq!((e.measure, e.distance, e.transmissivity), (1.0, 1.0, 1.0));
    }

    #[test]
    fn bad_arguments() {
        assert!(build_cartesian_fv_mesh(0, 3, &BoxDomain::unit_square()).is_err());
        assert!(build_cartesian_fv_mesh(3, 3, &BoxDomain::rectangle([0.0, 0.0], [1.0, 0.0])).is_err());
        assert!(build_cartesian_fv_mesh(3, 2, &BoxDomain::interval(0.0, 1.0)).is_err());
    }

    #[test]
    fn flipped_normal_and_bad_transmissivity_are_reported() {
        let mut m = build_cartesian_fv_mesh(3, 3, &BoxDomain::unit_square()).unwrap();
        m.inner_edges[2].normal = [-m.inner_edges[2].normal[0], -m.inner_edges[2].normal[1]];
        m.inner_edges[4].transmissivity *= 1.01;
        let report = validate_mesh(&m);
        assert_eq!(report.len(), 2);
        assert!(matches!(report[0], MeshViolation::Orthogonality { edge: 2, .. }));
        assert!(matches!(report[1], MeshViolation::Transmissivity { edge: 4, .. }));
    }

    #[test]
    fn duplicate_edge_and_partition_are_reported() {
        let mut m = build_cartesian_fv_mesh(2, 2, &BoxDomain::unit_square()).unwrap();
        let mut dup = m.inner_edges[0];
        dup.cells = (dup.cells.1, dup.cells.0);
        dup.normal = [-dup.normal[0], -dup.normal[1]];
        m.inner_edges.push(dup);
        m.cells[0].measure *= 2.0;
        let report = validate_mesh(&m);
        assert!(report.iter().any(|v| matches!(v, MeshViolation::DuplicateEdge { first: 0, .. })));
        assert!(report.iter().any(|v| matches!(v, MeshViolation::Partition { .. })));
    }

    #[test]
    fn mesh_file_round_trip() {
        let m = build_cartesian_fv_mesh(4, 3, &BoxDomain::rectangle([-1.0, 0.0], [1.0, 0.7])).unwrap();
        let mut buf = Vec::new();
        write_fv_mesh(&m, &mut buf).unwrap();
        let back = read_fv_mesh(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert!(validate_mesh(&back).is_empty());
    }

    #[test]
    fn mesh_file_errors_carry_line() {
        let text = "DIMENSION 2\nCELLS 1\n0 0.5 0.5 oops\n";
        match read_fv_mesh(text.as_bytes()) {
            Err(MeshError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn space_time_fifty_grid() {
        let grid = SpatialGrid::new(BoxDomain::unit_square(), 50, 50).unwrap();
        assert_eq!(grid.n_nodes(), 2601);
        assert_eq!(grid.cell_simplices().iter().map(|c| c.len()).sum::<usize>(), 5000);
        let st = build_space_time_mesh(&grid, 1).unwrap();
        assert_eq!(st.n_nodes(), 2 * 2601);
        assert!((st.total_measure() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn space_time_smallest_1d() {
        let grid = SpatialGrid::new(BoxDomain::interval(0.0, 1.0), 2, 1).unwrap();
        let st = build_space_time_mesh(&grid, 1).unwrap();
        assert_eq!(st.n_nodes(), 6);
        assert_eq!(st.faces_t0.len(), 2);
        assert_eq!(st.faces_t1.len(), 2);
        assert_eq!(st.n_elements(), 4);
        assert!((st.total_measure() - 1.0).abs() < 1e-15);
        assert!(build_space_time_mesh(&grid, 0).is_err());
    }

    #[test]
    fn space_time_faces_cover_levels() {
        let grid = SpatialGrid::new(BoxDomain::rectangle([0.0, 0.0], [2.0, 1.0]), 3, 2).unwrap();
        let st = build_space_time_mesh(&grid, 3).unwrap();
        assert!((st.total_measure() - 2.0).abs() < 1e-12);
        let on_t0: std::collections::HashSet<usize> = st.faces_t0.iter().flatten().copied().collect();
        let on_t1: std::collections::HashSet<usize> = st.faces_t1.iter().flatten().copied().collect();
        for (k, n) in st.nodes.iter().enumerate() {
            assert!((0.0..=1.0).contains(&n[0]));
            assert_eq!(n[0] == 0.0, on_t0.contains(&k));
            assert_eq!(n[0] == 1.0, on_t1.contains(&k));
        }
        for e in &st.elements {
            assert!(e.measure > 0.0);
        }
    }

    #[test]
    fn gradient_of_affine_field_is_exact() {
        let grid = SpatialGrid::new(BoxDomain::rectangle([0.0, 0.0], [1.0, 2.0]), 3, 4).unwrap();
        let st = build_space_time_mesh(&grid, 2).unwrap();
        let f: Vec<f64> = st.nodes.iter().map(|n| 2.0 * n[0] - 3.0 * n[1] + 0.5 * n[2] + 1.0).collect();
        for e in 0..st.n_elements() {
            let g = st.gradient(e, &f);
            assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] + 3.0).abs() < 1e-12 && (g[2] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn lumped_weights_and_averages() {
        let grid = SpatialGrid::new(BoxDomain::unit_square(), 4, 5).unwrap();
        let w = grid.lumped_weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let nodal: Vec<f64> = (0..grid.n_nodes()).map(|k| grid.node_point(k)[0] + 2.0 * grid.node_point(k)[1]).collect();
        let avg = grid.cell_averages(&nodal);
        let fv = grid.fv_mesh().unwrap();
        for (k, c) in fv.cells.iter().enumerate() {
            assert!((avg[k] - (c.center[0] + 2.0 * c.center[1])).abs() < 1e-14);
        }
        // the P1 integral is preserved by averaging
        let integral: f64 = nodal.iter().zip(&w).map(|(v, w)| v * w).sum();
        let via_cells: f64 = avg.iter().zip(&fv.cells).map(|(a, c)| a * c.measure).sum();
        assert!((integral - via_cells).abs() < 1e-14);
    }
}
