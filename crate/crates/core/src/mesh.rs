//! Conforming triangular meshes: generation, red-green refinement, and I/O.
//!
//! Triangles are stored counterclockwise. Boundary edges carry an integer tag
//! used to select Dirichlet or natural boundary conditions. Slit domains are
//! represented by duplicating the vertices along the slit, so each face of the
//! slit is an ordinary boundary edge.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoundaryEdge {
    pub a: usize,
    pub b: usize,
    pub tag: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
}

#[derive(Serialize, Deserialize)]
struct MeshJson {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<(usize, usize, i32)>,
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min: Point,
    pub max: Point,
}

impl BBox {
    pub fn new(min: Point, max: Point) -> Result<Self> {
        let ok = min.iter().chain(max.iter()).all(|v| v.is_finite())
            && max[0] > min[0]
            && max[1] > min[1];
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "degenerate bounding box {min:?} .. {max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn unit() -> Self {
        Self {
            min: [0.0, 0.0],
            max: [1.0, 1.0],
        }
    }

    pub fn area(&self) -> f64 {
        (self.max[0] - self.min[0]) * (self.max[1] - self.min[1])
    }
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn signed_area(p: Point, q: Point, r: Point) -> f64 {
    0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
}

impl Mesh {
    /// Builds and validates a mesh. Clockwise triangles are rejected.
    pub fn new(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        boundary_edges: Vec<BoundaryEdge>,
    ) -> Result<Self> {
        let mesh = Self {
            vertices,
            triangles,
            boundary_edges,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Like [`Mesh::new`] but flips clockwise triangles first.
    pub fn new_reoriented(
        vertices: Vec<Point>,
        mut triangles: Vec<[usize; 3]>,
        boundary_edges: Vec<BoundaryEdge>,
    ) -> Result<Self> {
        for (t, tri) in triangles.iter_mut().enumerate() {
            if tri.iter().any(|&v| v >= vertices.len()) {
                return Err(Error::MeshInvariant {
                    invariant: "index-range",
                    entity: "triangle",
                    index: t,
                    detail: format!("{tri:?} with {} vertices", vertices.len()),
                });
            }
            if signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]) < 0.0 {
                tri.swap(1, 2);
            }
        }
        Self::new(vertices, triangles, boundary_edges)
    }

    /// Builds a mesh whose boundary edges are derived from the triangles
    /// (edges used by exactly one triangle), all with the given tag.
    pub fn with_derived_boundary(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        tag: i32,
    ) -> Result<Self> {
        let boundary_edges = derive_boundary_edges(&triangles, |_, _| tag);
        Self::new(vertices, triangles, boundary_edges)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn bbox(&self) -> BBox {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for d in 0..2 {
                min[d] = min[d].min(v[d]);
                max[d] = max[d].max(v[d]);
            }
        }
        BBox { min, max }
    }

    pub fn triangle_points(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [p, q, r] = self.triangle_points(t);
        signed_area(p, q, r)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Longest edge of triangle `t`.
    pub fn triangle_diameter(&self, t: usize) -> f64 {
        let p = self.triangle_points(t);
        (0..3)
            .map(|k| dist(p[k], p[(k + 1) % 3]))
            .fold(0.0, f64::max)
    }

    pub fn max_edge_length(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| self.triangle_diameter(t))
            .fold(0.0, f64::max)
    }

    /// Unique undirected edges in order of first appearance.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let key = edge_key(tri[k], tri[(k + 1) % 3]);
                if seen.insert(key, ()).is_none() {
                    out.push(key);
                }
            }
        }
        out
    }

    /// Checks every mesh invariant, reporting the first violation.
    pub fn validate(&self) -> Result<()> {
        let nv = self.vertices.len();
        for (i, v) in self.vertices.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(Error::MeshInvariant {
                    invariant: "finite-coordinates",
                    entity: "vertex",
                    index: i,
                    detail: format!("{v:?}"),
                });
            }
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= nv) {
                return Err(Error::MeshInvariant {
                    invariant: "index-range",
                    entity: "triangle",
                    index: t,
                    detail: format!("{tri:?} with {nv} vertices"),
                });
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::MeshInvariant {
                    invariant: "positive-area",
                    entity: "triangle",
                    index: t,
                    detail: format!("repeated vertex in {tri:?}"),
                });
            }
            let area = self.triangle_area(t);
            if !(area > 0.0) {
                return Err(Error::MeshInvariant {
                    invariant: "positive-area",
                    entity: "triangle",
                    index: t,
                    detail: format!("signed area {area:e}"),
                });
            }
        }
        for (e, be) in self.boundary_edges.iter().enumerate() {
            if be.a >= nv || be.b >= nv || be.a == be.b {
                return Err(Error::MeshInvariant {
                    invariant: "index-range",
                    entity: "boundary edge",
                    index: e,
                    detail: format!("({}, {}) with {nv} vertices", be.a, be.b),
                });
            }
        }

        let mut incidence: HashMap<(usize, usize), u32> = HashMap::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            for k in 0..3 {
                let key = edge_key(tri[k], tri[(k + 1) % 3]);
                let count = incidence.entry(key).or_insert(0);
                *count += 1;
                if *count > 2 {
                    return Err(Error::MeshInvariant {
                        invariant: "edge-manifold",
                        entity: "triangle",
                        index: t,
                        detail: format!("edge {key:?} shared by more than two triangles"),
                    });
                }
            }
        }
        let mut on_boundary: HashMap<(usize, usize), usize> = HashMap::new();
        for (e, be) in self.boundary_edges.iter().enumerate() {
            let key = edge_key(be.a, be.b);
            if on_boundary.insert(key, e).is_some() {
                return Err(Error::MeshInvariant {
                    invariant: "boundary-edge-unique",
                    entity: "boundary edge",
                    index: e,
                    detail: format!("edge {key:?} listed twice"),
                });
            }
            if incidence.get(&key) != Some(&1) {
                return Err(Error::MeshInvariant {
                    invariant: "boundary-edge-incidence",
                    entity: "boundary edge",
                    index: e,
                    detail: format!(
                        "edge {key:?} belongs to {} triangles",
                        incidence.get(&key).copied().unwrap_or(0)
                    ),
                });
            }
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            for k in 0..3 {
                let key = edge_key(tri[k], tri[(k + 1) % 3]);
                if incidence[&key] == 1 && !on_boundary.contains_key(&key) {
                    return Err(Error::MeshInvariant {
                        invariant: "boundary-coverage",
                        entity: "triangle",
                        index: t,
                        detail: format!("free edge {key:?} has no boundary tag"),
                    });
                }
            }
        }
        let mut degree = vec![0u32; nv];
        for be in &self.boundary_edges {
            degree[be.a] += 1;
            degree[be.b] += 1;
        }
        if let Some(v) = degree.iter().position(|d| d % 2 == 1) {
            return Err(Error::MeshInvariant {
                invariant: "closed-boundary-loops",
                entity: "vertex",
                index: v,
                detail: "odd number of incident boundary edges".into(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = MeshJson {
            vertices: self.vertices.clone(),
            triangles: self.triangles.clone(),
            boundary_edges: self
                .boundary_edges
                .iter()
                .map(|e| (e.a, e.b, e.tag))
                .collect(),
        };
        serde_json::to_string(&doc).expect("mesh serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MeshJson = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        let boundary = doc
            .boundary_edges
            .into_iter()
            .map(|(a, b, tag)| BoundaryEdge { a, b, tag })
            .collect();
        Self::new_reoriented(doc.vertices, doc.triangles, boundary)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Loads a JSON mesh, or a Gmsh 2.2 ASCII file when the content starts
    /// with `$MeshFormat`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.trim_start().starts_with("$MeshFormat") {
            Self::from_msh(&text)
        } else {
            Self::from_json(&text)
        }
    }

    /// Parses the Gmsh MSH 2.2 ASCII subset: 2-node lines (boundary edges,
    /// tagged by their physical group) and 3-node triangles. Point elements
    /// are skipped; anything else is rejected.
    pub fn from_msh(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let parse_err = |line: usize, message: String| Error::Parse {
            line: line + 1,
            message,
        };
        let mut node_index: HashMap<u64, usize> = HashMap::new();
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        let mut boundary = Vec::new();
        let mut i = 0;
        while i < lines.len() {
            match lines[i].trim() {
                "$MeshFormat" => {
                    let header = lines
                        .get(i + 1)
                        .ok_or_else(|| parse_err(i + 1, "missing format line".into()))?;
                    let mut it = header.split_whitespace();
                    let version = it.next().unwrap_or("");
                    let file_type = it.next().unwrap_or("");
                    if !version.starts_with('2') || file_type != "0" {
                        return Err(parse_err(
                            i + 1,
                            format!("only MSH 2.x ASCII is supported, got `{header}`"),
                        ));
                    }
                    i += 2;
                }
                "$Nodes" => {
                    i += 1;
                    let count: usize = lines
                        .get(i)
                        .and_then(|l| l.trim().parse().ok())
                        .ok_or_else(|| parse_err(i, "bad node count".into()))?;
                    for _ in 0..count {
                        i += 1;
                        let line = lines
                            .get(i)
                            .ok_or_else(|| parse_err(i, "truncated node block".into()))?;
                        let f: Vec<&str> = line.split_whitespace().collect();
                        if f.len() < 3 {
                            return Err(parse_err(i, format!("bad node line `{line}`")));
                        }
                        let id: u64 = f[0]
                            .parse()
                            .map_err(|_| parse_err(i, format!("bad node id `{}`", f[0])))?;
                        let x: f64 = f[1]
                            .parse()
                            .map_err(|_| parse_err(i, format!("bad coordinate `{}`", f[1])))?;
                        let y: f64 = f[2]
                            .parse()
                            .map_err(|_| parse_err(i, format!("bad coordinate `{}`", f[2])))?;
                        node_index.insert(id, vertices.len());
                        vertices.push([x, y]);
                    }
                    i += 1;
                }
                "$Elements" => {
                    i += 1;
                    let count: usize = lines
                        .get(i)
                        .and_then(|l| l.trim().parse().ok())
                        .ok_or_else(|| parse_err(i, "bad element count".into()))?;
                    for _ in 0..count {
                        i += 1;
                        let line = lines
                            .get(i)
                            .ok_or_else(|| parse_err(i, "truncated element block".into()))?;
                        let f: Vec<u64> = line
                            .split_whitespace()
                            .map(|s| s.parse::<u64>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| parse_err(i, format!("bad element line `{line}`")))?;
                        if f.len() < 3 {
                            return Err(parse_err(i, format!("bad element line `{line}`")));
                        }
                        let etype = f[1] as u32;
                        let ntags = f[2] as usize;
                        let nodes = &f[(3 + ntags).min(f.len())..];
                        let tag = if ntags > 0 { f[3] as i32 } else { 1 };
                        let lookup = |id: u64| {
                            node_index
                                .get(&id)
                                .copied()
                                .ok_or_else(|| parse_err(i, format!("unknown node {id}")))
                        };
                        match (etype, nodes.len()) {
                            (15, 1) => {}
                            (1, 2) => boundary.push(BoundaryEdge {
                                a: lookup(nodes[0])?,
                                b: lookup(nodes[1])?,
                                tag,
                            }),
                            (2, 3) => triangles.push([
                                lookup(nodes[0])?,
                                lookup(nodes[1])?,
                                lookup(nodes[2])?,
                            ]),
                            (1 | 2 | 15, n) => {
                                return Err(parse_err(i, format!("element type {etype} with {n} nodes")))
                            }
                            _ => {
                                return Err(Error::UnsupportedElement {
                                    element_type: etype,
                                    line: i + 1,
                                })
                            }
                        }
                    }
                    i += 1;
                }
                _ => i += 1,
            }
        }
        if triangles.is_empty() {
            return Err(Error::InvalidMesh("MSH file contains no triangles".into()));
        }
        Self::new_reoriented(vertices, triangles, boundary)
    }
}

fn dist(p: Point, q: Point) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

/// Edges used by exactly one triangle, oriented as in that triangle.
fn derive_boundary_edges(
    triangles: &[[usize; 3]],
    tag_of: impl Fn(usize, usize) -> i32,
) -> Vec<BoundaryEdge> {
    let mut count: HashMap<(usize, usize), u32> = HashMap::new();
    for tri in triangles {
        for k in 0..3 {
            *count.entry(edge_key(tri[k], tri[(k + 1) % 3])).or_insert(0) += 1;
        }
    }
    let mut out = Vec::new();
    for tri in triangles {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            if count[&edge_key(a, b)] == 1 {
                out.push(BoundaryEdge {
                    a,
                    b,
                    tag: tag_of(a, b),
                });
            }
        }
    }
    out
}

fn grid_vertices(nx: usize, ny: usize, bbox: &BBox) -> Vec<Point> {
    let mut v = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let x = bbox.min[0] + (bbox.max[0] - bbox.min[0]) * i as f64 / nx as f64;
            let y = bbox.min[1] + (bbox.max[1] - bbox.min[1]) * j as f64 / ny as f64;
            v.push([x, y]);
        }
    }
    v
}

/// Splits cell `(i, j)` in two along an alternating diagonal.
fn split_cell(i: usize, j: usize, nx: usize) -> [[usize; 3]; 2] {
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let (p00, p10, p01, p11) = (id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1));
    if (i + j).is_multiple_of(2) {
        [[p00, p10, p11], [p00, p11, p01]]
    } else {
        [[p00, p10, p01], [p10, p11, p01]]
    }
}

/// Structured mesh of `nx x ny` cells with alternating diagonals; all
/// boundary edges get tag 1.
pub fn generate_rectangle(nx: usize, ny: usize, bbox: BBox) -> Result<Mesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument(format!(
            "cell counts must be positive, got {nx}x{ny}"
        )));
    }
    let bbox = BBox::new(bbox.min, bbox.max)?;
    let vertices = grid_vertices(nx, ny, &bbox);
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            triangles.extend(split_cell(i, j, nx));
        }
    }
    Mesh::with_derived_boundary(vertices, triangles, 1)
}

/// Structured mesh where cells at least `inset` cells away from the border
/// get a center vertex and four triangles; border cells are split in two.
pub fn generate_grid_with_centers(nx: usize, ny: usize, bbox: BBox, inset: usize) -> Result<Mesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument(format!(
            "cell counts must be positive, got {nx}x{ny}"
        )));
    }
    let bbox = BBox::new(bbox.min, bbox.max)?;
    let mut vertices = grid_vertices(nx, ny, &bbox);
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let inner = i >= inset && j >= inset && i + inset < nx && j + inset < ny;
            if inner {
                let (p00, p10, p01, p11) = (id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1));
                let c = vertices.len();
                let (a, b) = (vertices[p00], vertices[p11]);
                vertices.push([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
                triangles.extend([[p00, p10, c], [p10, p11, c], [p11, p01, c], [p01, p00, c]]);
            } else {
                triangles.extend(split_cell(i, j, nx));
            }
        }
    }
    Mesh::with_derived_boundary(vertices, triangles, 1)
}

/// Square `[-h, h]^2` (with `h = half_width`) cut by the slit `[0, h) x {0}`,
/// using `n` cells per side (`n` even). Vertices strictly inside the slit are
/// duplicated: triangles below the slit use the copies. The slit tip at the
/// origin stays a single vertex. All boundary edges get tag 1.
pub fn generate_slit_square(n: usize, half_width: f64) -> Result<Mesh> {
    if n < 2 || n % 2 == 1 {
        return Err(Error::InvalidArgument(format!(
            "slit square needs an even cell count >= 2, got {n}"
        )));
    }
    let bbox = BBox::new([-half_width, -half_width], [half_width, half_width])?;
    let mut vertices = grid_vertices(n, n, &bbox);
    let jmid = n / 2;
    let mut copies = HashMap::new();
    for i in (n / 2 + 1)..n {
        let v = jmid * (n + 1) + i;
        copies.insert(v, vertices.len());
        vertices.push(vertices[v]);
    }
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            for mut tri in split_cell(i, j, n) {
                if j < jmid {
                    for v in tri.iter_mut() {
                        if let Some(&c) = copies.get(v) {
                            *v = c;
                        }
                    }
                }
                triangles.push(tri);
            }
        }
    }
    Mesh::with_derived_boundary(vertices, triangles, 1)
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, [a[0] + t * d[0], a[1] + t * d[1]])
}

fn triangle_touches_disk(tri: [Point; 3], center: Point, radius: f64) -> bool {
    let s0 = signed_area(tri[0], tri[1], center);
    let s1 = signed_area(tri[1], tri[2], center);
    let s2 = signed_area(tri[2], tri[0], center);
    if s0 >= 0.0 && s1 >= 0.0 && s2 >= 0.0 {
        return true;
    }
    (0..3).any(|k| point_segment_distance(center, tri[k], tri[(k + 1) % 3]) <= radius)
}

/// Red-green refinement of the marked triangles.
///
/// Marked triangles are split into four. Any triangle left with two or three
/// split edges is promoted to a red split; triangles with exactly one split
/// edge are bisected (green closure).
pub fn refine_marked(mesh: &Mesh, marked: &[bool]) -> Result<Mesh> {
    let tris = mesh.triangles();
    let mut split: HashMap<(usize, usize), usize> = HashMap::new();
    for (t, tri) in tris.iter().enumerate() {
        if marked[t] {
            for k in 0..3 {
                split.insert(edge_key(tri[k], tri[(k + 1) % 3]), usize::MAX);
            }
        }
    }
    loop {
        let mut changed = false;
        for tri in tris {
            let keys = [
                edge_key(tri[0], tri[1]),
                edge_key(tri[1], tri[2]),
                edge_key(tri[2], tri[0]),
            ];
            let n = keys.iter().filter(|k| split.contains_key(k)).count();
            if n == 2 {
                for k in keys {
                    split.insert(k, usize::MAX);
                }
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut vertices = mesh.vertices().to_vec();
    // midpoints numbered in triangle traversal order for determinism
    for tri in tris {
        for k in 0..3 {
            let key = edge_key(tri[k], tri[(k + 1) % 3]);
            if let Some(slot) = split.get_mut(&key) {
                if *slot == usize::MAX {
                    *slot = vertices.len();
                    let (a, b) = (vertices[key.0], vertices[key.1]);
                    vertices.push([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
                }
            }
        }
    }

    let mut triangles = Vec::with_capacity(tris.len() * 2);
    for tri in tris {
        let mid: [Option<usize>; 3] =
            std::array::from_fn(|k| split.get(&edge_key(tri[k], tri[(k + 1) % 3])).copied());
        match mid {
            [Some(m01), Some(m12), Some(m20)] => {
                let [v0, v1, v2] = *tri;
                triangles.extend([[v0, m01, m20], [m01, v1, m12], [m20, m12, v2], [m01, m12, m20]]);
            }
            [None, None, None] => triangles.push(*tri),
            _ => {
                let k = mid.iter().position(|m| m.is_some()).unwrap();
                let m = mid[k].unwrap();
                let (a, b, c) = (tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]);
                triangles.extend([[a, m, c], [m, b, c]]);
            }
        }
    }

    let mut boundary = Vec::with_capacity(mesh.boundary_edges().len());
    for be in mesh.boundary_edges() {
        match split.get(&edge_key(be.a, be.b)) {
            Some(&m) => {
                boundary.push(BoundaryEdge { a: be.a, b: m, tag: be.tag });
                boundary.push(BoundaryEdge { a: m, b: be.b, tag: be.tag });
            }
            None => boundary.push(*be),
        }
    }
    Mesh::new(vertices, triangles, boundary)
}

/// Applies `levels` rounds of red-green refinement to every triangle that
/// intersects the disk of `radius` around `center`.
pub fn refine_toward(mesh: &Mesh, center: Point, radius: f64, levels: usize) -> Result<Mesh> {
    if !(radius > 0.0) || !center.iter().all(|c| c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "refinement disk needs radius > 0 and a finite center, got {center:?}, {radius}"
        )));
    }
    let mut current = mesh.clone();
    for _ in 0..levels {
        let marked: Vec<bool> = (0..current.num_triangles())
            .map(|t| triangle_touches_disk(current.triangle_points(t), center, radius))
            .collect();
        current = refine_marked(&current, &marked)?;
    }
    Ok(current)
}

/// Splits every triangle into four.
pub fn refine_uniform(mesh: &Mesh) -> Result<Mesh> {
    refine_marked(mesh, &vec![true; mesh.num_triangles()])
}

/// Summary statistics for display.
pub fn describe(mesh: &Mesh) -> BTreeMap<&'static str, f64> {
    let bbox = mesh.bbox();
    let mut out = BTreeMap::new();
    out.insert("vertices", mesh.num_vertices() as f64);
    out.insert("triangles", mesh.num_triangles() as f64);
    out.insert("boundary_edges", mesh.boundary_edges().len() as f64);
    out.insert("area", mesh.total_area());
    out.insert("max_edge", mesh.max_edge_length());
    out.insert("xmin", bbox.min[0]);
    out.insert("ymin", bbox.min[1]);
    out.insert("xmax", bbox.max[0]);
    out.insert("ymax", bbox.max[1]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count_edge_use(mesh: &Mesh) -> HashMap<(usize, usize), u32> {
        let mut m = HashMap::new();
        for tri in mesh.triangles() {
            for k in 0..3 {
                *m.entry(edge_key(tri[k], tri[(k + 1) % 3])).or_insert(0) += 1;
            }
        }
        m
    }

    #[test]
    fn single_cell_square() {
        let m = generate_rectangle(1, 1, BBox::unit()).unwrap();
        assert_eq!(m.num_vertices(), 4);
        assert_eq!(m.num_triangles(), 2);
        assert_eq!(m.boundary_edges().len(), 4);
    }

    #[test]
    fn two_by_two_counts_and_area() {
        let m = generate_rectangle(2, 2, BBox::unit()).unwrap();
        assert_eq!(m.num_vertices(), 9);
        assert_eq!(m.num_triangles(), 8);
        assert!((m.total_area() - 1.0).abs() < 1e-12);
        let b = BBox::new([-1.0, 2.0], [3.0, 2.5]).unwrap();
        let m = generate_rectangle(7, 3, b).unwrap();
        assert!((m.total_area() - b.area()).abs() < 1e-12 * b.area());
    }

    #[test]
    fn degenerate_bbox_rejected() {
        let bad = BBox {
            min: [0.0, 0.0],
            max: [0.0, 1.0],
        };
        assert!(matches!(
            generate_rectangle(2, 2, bad),
            Err(Error::InvalidArgument(_))
        ));
        assert!(generate_rectangle(0, 2, BBox::unit()).is_err());
    }

    #[test]
    fn zero_levels_is_identity() {
        let m = generate_rectangle(3, 2, BBox::unit()).unwrap();
        let r = refine_toward(&m, [0.0, 0.0], 0.5, 0).unwrap();
        assert_eq!(m, r);
    }

    #[test]
    fn one_level_halves_diameter_near_center() {
        let m = generate_rectangle(2, 2, BBox::unit()).unwrap();
        let r = refine_toward(&m, [0.0, 0.0], 0.6, 1).unwrap();
        assert!(r.num_triangles() > m.num_triangles());
        let inside_min = |mesh: &Mesh| {
            (0..mesh.num_triangles())
                .filter(|&t| triangle_touches_disk(mesh.triangle_points(t), [0.0, 0.0], 0.6))
                .map(|t| mesh.triangle_diameter(t))
                .fold(f64::INFINITY, f64::min)
        };
        assert!((inside_min(&r) - 0.5 * inside_min(&m)).abs() < 1e-12);
        assert!((r.total_area() - 1.0).abs() < 1e-12);
        assert!(count_edge_use(&r).values().all(|&c| c <= 2));
    }

    #[test]
    fn slit_square_duplicates_slit_vertices() {
        let m = generate_slit_square(8, 1.0).unwrap();
        assert!((m.total_area() - 4.0).abs() < 1e-12);
        let v = m.vertices();
        let slit: Vec<usize> = (0..v.len())
            .filter(|&i| v[i][1] == 0.0 && v[i][0] > 0.0 && v[i][0] < 1.0)
            .collect();
        assert_eq!(slit.len(), 6);
        for &a in &slit {
            for &b in &slit {
                if a < b && v[a] == v[b] {
                    assert!(!m.triangles().iter().any(|t| t.contains(&a) && t.contains(&b)));
                }
            }
        }
        // 32 outer edges plus 4 per slit face
        assert_eq!(m.boundary_edges().len(), 40);
    }

    #[test]
    fn refined_slit_keeps_sides_apart() {
        let m = generate_slit_square(8, 1.0).unwrap();
        let r = refine_toward(&m, [0.0, 0.0], 0.3, 3).unwrap();
        assert!((r.total_area() - 4.0).abs() < 1e-12 * 4.0);
        let v = r.vertices();
        let mut by_coord: HashMap<(u64, u64), Vec<usize>> = HashMap::new();
        for (i, p) in v.iter().enumerate() {
            by_coord.entry((p[0].to_bits(), p[1].to_bits())).or_default().push(i);
        }
        for (_, ids) in by_coord.iter().filter(|(_, ids)| ids.len() > 1) {
            assert_eq!(ids.len(), 2);
            let p = v[ids[0]];
            assert!(p[1] == 0.0 && p[0] > 0.0 && p[0] < 1.0);
            assert!(!r
                .triangles()
                .iter()
                .any(|t| t.contains(&ids[0]) && t.contains(&ids[1])));
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = Mesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.1 + 0.2, 1.0]],
            vec![[0, 1, 2], [0, 2, 3]],
            vec![
                BoundaryEdge { a: 0, b: 1, tag: 1 },
                BoundaryEdge { a: 1, b: 2, tag: 2 },
                BoundaryEdge { a: 2, b: 3, tag: 1 },
                BoundaryEdge { a: 3, b: 0, tag: 3 },
            ],
        )
        .unwrap();
        let back = Mesh::from_json(&m.to_json()).unwrap();
        assert_eq!(m, back);
        assert_eq!(back.vertices()[3][0].to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn clockwise_triangles_are_reoriented_on_load() {
        let text = r#"{"vertices":[[0,0],[1,0],[0,1]],"triangles":[[0,2,1]],
                       "boundary_edges":[[0,1,1],[1,2,1],[2,0,1]]}"#;
        let m = Mesh::from_json(text).unwrap();
        assert!(m.triangle_area(0) > 0.0);
    }

    #[test]
    fn json_errors_carry_line_numbers() {
        let text = "{\n\"vertices\": [[0,0],\n[1,0,\n}";
        match Mesh::from_json(text) {
            Err(Error::Parse { line, .. }) => assert!(line >= 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invariant_violation_names_the_entity() {
        let text = r#"{"vertices":[[0,0],[1,0],[0,1]],"triangles":[[0,1,5]],"boundary_edges":[]}"#;
        match Mesh::from_json(text) {
            Err(Error::MeshInvariant { invariant, entity, index, .. }) => {
                assert_eq!(invariant, "index-range");
                assert_eq!(entity, "triangle");
                assert_eq!(index, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
        let missing = r#"{"vertices":[[0,0],[1,0],[0,1]],"triangles":[[0,1,2]],"boundary_edges":[[0,1,1]]}"#;
        assert!(matches!(
            Mesh::from_json(missing),
            Err(Error::MeshInvariant { invariant: "boundary-coverage", .. })
        ));
    }

    const MSH_SQUARE: &str = "$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
4
1 0 0 0
2 1 0 0
3 1 1 0
4 0 1 0
$EndNodes
$Elements
7
1 15 2 0 1 1
2 1 2 5 1 1 2
3 1 2 5 2 2 3
4 1 2 6 3 3 4
5 1 2 5 4 4 1
6 2 2 9 1 1 2 3
7 2 2 9 1 1 4 3
$EndElements
";

    #[test]
    fn msh_subset_parses() {
        let m = Mesh::from_msh(MSH_SQUARE).unwrap();
        assert_eq!(m.num_vertices(), 4);
        assert_eq!(m.num_triangles(), 2);
        assert!(m.triangle_area(1) > 0.0);
        let tags: Vec<i32> = m.boundary_edges().iter().map(|e| e.tag).collect();
        assert_eq!(tags, vec![5, 5, 6, 5]);
    }

    #[test]
    fn msh_quadrilateral_rejected() {
        let text = MSH_SQUARE.replace("7 2 2 9 1 1 4 3", "7 3 2 9 1 1 2 3 4");
        match Mesh::from_msh(&text) {
            Err(Error::UnsupportedElement { element_type, line }) => {
                assert_eq!(element_type, 3);
                assert_eq!(line, 19);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
