use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use super::basis::{p2_basis_eval, ElementGeometry, MIDSIDE_EDGES};
use crate::error::{Error, Result};
use crate::mesh::{BoundaryEdge, Mesh, Point};

/// Scalar field over the domain.
#[derive(Clone)]
pub enum Field {
    Constant(f64),
    Analytic(Arc<dyn Fn(Point) -> f64 + Send + Sync>),
}

impl Field {
    pub fn analytic(f: impl Fn(Point) -> f64 + Send + Sync + 'static) -> Self {
        Field::Analytic(Arc::new(f))
    }

    #[inline]
    pub fn eval(&self, p: Point) -> f64 {
        match self {
            Field::Constant(c) => *c,
            Field::Analytic(f) => f(p),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Field::Constant(c) => Some(*c),
            Field::Analytic(_) => None,
        }
    }
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Field::Constant(c) => write!(f, "Constant({c})"),
            Field::Analytic(_) => write!(f, "Analytic(..)"),
        }
    }
}

impl From<f64> for Field {
    fn from(c: f64) -> Self {
        Field::Constant(c)
    }
}

/// Second-order Lagrange space on a triangulation.
///
/// Nodes are the mesh vertices followed by one midpoint per unique edge.
/// Nodes on boundary edges whose tag is Dirichlet are essential; all other
/// nodes are unknowns and are numbered `0..num_interior()` in node order.
#[derive(Debug, Clone)]
pub struct P2Space {
    mesh: Arc<Mesh>,
    nodes: Vec<Point>,
    elem_nodes: Vec<[usize; 6]>,
    edge_midpoint: HashMap<(usize, usize), usize>,
    dirichlet_tags: BTreeSet<i32>,
    dirichlet_mask: Vec<bool>,
    interior_index: Vec<Option<usize>>,
    interior_nodes: Vec<usize>,
    dirichlet_nodes: Vec<usize>,
    dirichlet_values: Vec<f64>,
    boundary_value: Field,
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl P2Space {
    pub fn new(mesh: Arc<Mesh>, dirichlet_tags: &[i32], g: Field) -> Self {
        let nv = mesh.num_vertices();
        let mut nodes: Vec<Point> = mesh.vertices().to_vec();
        let mut edge_midpoint = HashMap::new();
        let mut elem_nodes = Vec::with_capacity(mesh.num_triangles());
        for tri in mesh.triangles() {
            let mut en = [tri[0], tri[1], tri[2], 0, 0, 0];
            for (k, &(a, b)) in MIDSIDE_EDGES.iter().enumerate() {
                let key = edge_key(tri[a], tri[b]);
                let id = *edge_midpoint.entry(key).or_insert_with(|| {
                    let (p, q) = (nodes[key.0], nodes[key.1]);
                    nodes.push([0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]);
                    nodes.len() - 1
                });
                en[3 + k] = id;
            }
            elem_nodes.push(en);
        }
        debug_assert_eq!(nodes.len(), nv + edge_midpoint.len());

        let dirichlet_tags: BTreeSet<i32> = dirichlet_tags.iter().copied().collect();
        let mut dirichlet_mask = vec![false; nodes.len()];
        for be in mesh.boundary_edges() {
            if dirichlet_tags.contains(&be.tag) {
                dirichlet_mask[be.a] = true;
                dirichlet_mask[be.b] = true;
                dirichlet_mask[edge_midpoint[&edge_key(be.a, be.b)]] = true;
            }
        }
        let mut interior_index = vec![None; nodes.len()];
        let mut interior_nodes = Vec::new();
        let mut dirichlet_nodes = Vec::new();
        for (n, &fixed) in dirichlet_mask.iter().enumerate() {
            if fixed {
                dirichlet_nodes.push(n);
            } else {
                interior_index[n] = Some(interior_nodes.len());
                interior_nodes.push(n);
            }
        }
        let dirichlet_values = dirichlet_nodes.iter().map(|&n| g.eval(nodes[n])).collect();
        Self {
            mesh,
            nodes,
            elem_nodes,
            edge_midpoint,
            dirichlet_tags,
            dirichlet_mask,
            interior_index,
            interior_nodes,
            dirichlet_nodes,
            dirichlet_values,
            boundary_value: g,
        }
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn elem_nodes(&self) -> &[[usize; 6]] {
        &self.elem_nodes
    }

    pub fn dirichlet_mask(&self) -> &[bool] {
        &self.dirichlet_mask
    }

    pub fn interior_index(&self) -> &[Option<usize>] {
        &self.interior_index
    }

    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior_nodes
    }

    pub fn num_interior(&self) -> usize {
        self.interior_nodes.len()
    }

    pub fn dirichlet_nodes(&self) -> &[usize] {
        &self.dirichlet_nodes
    }

    /// The boundary value field sampled at each Dirichlet node.
    pub fn dirichlet_values(&self) -> &[f64] {
        &self.dirichlet_values
    }

    pub fn boundary_value(&self) -> &Field {
        &self.boundary_value
    }

    pub fn is_dirichlet_tag(&self, tag: i32) -> bool {
        self.dirichlet_tags.contains(&tag)
    }

    /// Midpoint node of a mesh edge.
    pub fn midpoint_node(&self, a: usize, b: usize) -> Option<usize> {
        self.edge_midpoint.get(&edge_key(a, b)).copied()
    }

    /// Boundary edges with natural (non-Dirichlet) tags, as node triples
    /// `(start, mid, end)`.
    pub fn natural_edges(&self) -> Vec<(BoundaryEdge, [usize; 3])> {
        self.mesh
            .boundary_edges()
            .iter()
            .filter(|be| !self.is_dirichlet_tag(be.tag))
            .map(|be| (*be, [be.a, self.edge_midpoint[&edge_key(be.a, be.b)], be.b]))
            .collect()
    }

    pub fn geometry(&self, elem: usize) -> ElementGeometry {
        ElementGeometry::new(self.mesh.triangle_points(elem))
    }

    /// Interpolates `values` at each node of `self`.
    pub fn interpolate_field(&self, field: &Field) -> Vec<f64> {
        self.nodes.iter().map(|&p| field.eval(p)).collect()
    }

    /// Evaluates the P2 function with nodal coefficients `values` at
    /// arbitrary points inside the mesh.
    pub fn evaluate_at(&self, values: &[f64], points: &[Point]) -> Result<Vec<f64>> {
        if values.len() != self.num_nodes() {
            return Err(Error::DimensionMismatch {
                context: "nodal values",
                expected: self.num_nodes(),
                actual: values.len(),
            });
        }
        let locator = PointLocator::new(&self.mesh);
        points
            .iter()
            .map(|&p| {
                let (elem, bary) = locator.locate(&self.mesh, p).ok_or_else(|| {
                    Error::InvalidArgument(format!("point {p:?} lies outside the mesh"))
                })?;
                let phi = p2_basis_eval(bary).values;
                Ok(self.elem_nodes[elem]
                    .iter()
                    .zip(phi.iter())
                    .map(|(&n, &w)| w * values[n])
                    .sum())
            })
            .collect()
    }
}

/// Bucket grid over triangle bounding boxes for point location.
struct PointLocator {
    origin: Point,
    cell: [f64; 2],
    dims: [usize; 2],
    buckets: Vec<Vec<usize>>,
}

impl PointLocator {
    fn new(mesh: &Mesh) -> Self {
        let bbox = mesh.bbox();
        let side = ((mesh.num_triangles() as f64).sqrt().ceil() as usize).max(1);
        let dims = [side, side];
        let cell = [
            ((bbox.max[0] - bbox.min[0]) / side as f64).max(f64::MIN_POSITIVE),
            ((bbox.max[1] - bbox.min[1]) / side as f64).max(f64::MIN_POSITIVE),
        ];
        let mut buckets = vec![Vec::new(); side * side];
        for t in 0..mesh.num_triangles() {
            let pts = mesh.triangle_points(t);
            let lo = [
                pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min),
                pts.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min),
            ];
            let hi = [
                pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max),
                pts.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max),
            ];
            let (i0, j0) = Self::cell_of(bbox.min, cell, dims, lo);
            let (i1, j1) = Self::cell_of(bbox.min, cell, dims, hi);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * dims[0] + i].push(t);
                }
            }
        }
        Self {
            origin: bbox.min,
            cell,
            dims,
            buckets,
        }
    }

    fn cell_of(origin: Point, cell: [f64; 2], dims: [usize; 2], p: Point) -> (usize, usize) {
        let i = (((p[0] - origin[0]) / cell[0]).floor().max(0.0) as usize).min(dims[0] - 1);
        let j = (((p[1] - origin[1]) / cell[1]).floor().max(0.0) as usize).min(dims[1] - 1);
        (i, j)
    }

    fn locate(&self, mesh: &Mesh, p: Point) -> Option<(usize, [f64; 3])> {
        let (i, j) = Self::cell_of(self.origin, self.cell, self.dims, p);
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for &t in &self.buckets[j * self.dims[0] + i] {
            let bary = ElementGeometry::new(mesh.triangle_points(t)).barycentric(p);
            let worst = bary.iter().copied().fold(f64::INFINITY, f64::min);
            if worst >= -1e-10 && best.is_none_or(|b| worst > b.2) {
                best = Some((t, bary, worst));
            }
        }
        best.map(|(t, b, _)| (t, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_rectangle, generate_slit_square, BBox};

    #[test]
    fn two_triangle_square_has_nine_nodes() {
        let mesh = Arc::new(generate_rectangle(1, 1, BBox::unit()).unwrap());
        let space = P2Space::new(mesh, &[1], Field::Constant(0.0));
        assert_eq!(space.num_nodes(), 9);
        assert_eq!(space.num_interior(), 1);
        assert_eq!(space.dirichlet_nodes().len(), 8);
    }

    #[test]
    fn midside_nodes_are_exact_midpoints() {
        let mesh = Arc::new(generate_rectangle(3, 2, BBox::new([0.1, -0.3], [1.7, 2.9]).unwrap()).unwrap());
        let space = P2Space::new(mesh.clone(), &[1], Field::Constant(0.0));
        assert_eq!(space.num_nodes(), mesh.num_vertices() + mesh.edges().len());
        for (a, b) in mesh.edges() {
            let m = space.nodes()[space.midpoint_node(a, b).unwrap()];
            let (p, q) = (mesh.vertices()[a], mesh.vertices()[b]);
            assert!((m[0] - 0.5 * (p[0] + q[0])).abs() < 1e-14);
            assert!((m[1] - 0.5 * (p[1] + q[1])).abs() < 1e-14);
        }
    }

    #[test]
    fn dirichlet_mask_covers_boundary_edges() {
        let mesh = Arc::new(generate_rectangle(4, 4, BBox::unit()).unwrap());
        let space = P2Space::new(mesh.clone(), &[1], Field::Constant(0.0));
        for be in mesh.boundary_edges() {
            assert!(space.dirichlet_mask()[be.a]);
            assert!(space.dirichlet_mask()[be.b]);
            assert!(space.dirichlet_mask()[space.midpoint_node(be.a, be.b).unwrap()]);
        }
        assert_eq!(space.dirichlet_nodes().len(), 2 * mesh.boundary_edges().len());
        // bijection onto 0..N_int
        let mut seen = vec![false; space.num_interior()];
        for idx in space.interior_index().iter().flatten() {
            assert!(!seen[*idx]);
            seen[*idx] = true;
        }
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn no_dirichlet_tags_means_all_interior() {
        let mesh = Arc::new(generate_rectangle(2, 2, BBox::unit()).unwrap());
        let space = P2Space::new(mesh, &[7], Field::Constant(0.0));
        assert_eq!(space.num_interior(), space.num_nodes());
        assert_eq!(space.natural_edges().len(), 8);
    }

    #[test]
    fn slit_sides_get_distinct_midpoints() {
        let mesh = Arc::new(generate_slit_square(4, 1.0).unwrap());
        let space = P2Space::new(mesh, &[1], Field::Constant(0.0));
        let on_slit: Vec<usize> = (0..space.num_nodes())
            .filter(|&n| {
                let p = space.nodes()[n];
                p[1] == 0.0 && p[0] > 0.0 && p[0] < 1.0
            })
            .collect();
        // x = 0.25, 0.5 (vertex), 0.75 : each present on both faces
        assert_eq!(on_slit.len(), 6);
        assert!(on_slit.iter().all(|&n| space.dirichlet_mask()[n]));
    }

    #[test]
    fn evaluate_reproduces_quadratics() {
        let mesh = Arc::new(generate_rectangle(3, 3, BBox::unit()).unwrap());
        let space = P2Space::new(mesh, &[1], Field::Constant(0.0));
        let f = |p: Point| 1.0 + 2.0 * p[0] - p[1] + p[0] * p[1] + 3.0 * p[1] * p[1];
        let vals: Vec<f64> = space.nodes().iter().map(|&p| f(p)).collect();
        let pts = [[0.13, 0.77], [0.5, 0.5], [0.999, 0.001], [0.0, 1.0]];
        let got = space.evaluate_at(&vals, &pts).unwrap();
        for (p, g) in pts.iter().zip(&got) {
            assert!((g - f(*p)).abs() < 1e-13);
        }
        assert!(space.evaluate_at(&vals, &[[2.0, 0.5]]).is_err());
    }
}
