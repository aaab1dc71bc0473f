//! Graph view of a P2 space: adjacency over all FE nodes, standardized node
//! coordinates, edge features, and the mean-aggregation operator built from
//! them.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{P2Space, MIDSIDE_EDGES};
use crate::mesh::Point;

/// Which node pairs count as neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adjacency {
    /// Nodes sharing an element's 6-node tuple.
    #[default]
    Element,
    /// Edges of the P2 node lattice: each triangle split into four.
    Edge,
}

/// CSR adjacency over the FE nodes, with physical coordinates and their
/// standardization to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphTopology {
    num_nodes: usize,
    neighbor_offsets: Vec<usize>,
    neighbor_indices: Vec<usize>,
    node_coords: Vec<Point>,
    node_coords_std: Vec<Point>,
}

impl GraphTopology {
    /// Builds a topology from undirected pairs. Each neighbor list is sorted
    /// by coordinates (then index), a numbering-independent order.
    pub fn from_pairs(coords: &[Point], pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let n = coords.len();
        let mut sets = vec![BTreeSet::new(); n];
        for (a, b) in pairs {
            if a >= n || b >= n {
                return Err(Error::InvalidArgument(format!("edge ({a}, {b}) out of range for {n} nodes")));
            }
            if a != b {
                sets[a].insert(b);
                sets[b].insert(a);
            }
        }
        if let Some(i) = sets.iter().position(|s| s.is_empty()) {
            return Err(Error::InvalidMesh(format!("node {i} has no neighbors")));
        }
        let node_coords_std = standardize(coords)?;
        let mut neighbor_offsets = Vec::with_capacity(n + 1);
        neighbor_offsets.push(0);
        let mut neighbor_indices = Vec::new();
        for s in &sets {
            let start = neighbor_indices.len();
            neighbor_indices.extend(s.iter().copied());
            // order by position so aggregation sums do not depend on numbering
            neighbor_indices[start..].sort_by(|&a, &b| {
                let (pa, pb) = (node_coords_std[a], node_coords_std[b]);
                pa[0].total_cmp(&pb[0]).then(pa[1].total_cmp(&pb[1])).then(a.cmp(&b))
            });
            neighbor_offsets.push(neighbor_indices.len());
        }
        Ok(Self {
            num_nodes: n,
            neighbor_offsets,
            neighbor_indices,
            node_coords: coords.to_vec(),
            node_coords_std,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_directed_edges(&self) -> usize {
        self.neighbor_indices.len()
    }

    pub fn neighbor_offsets(&self) -> &[usize] {
        &self.neighbor_offsets
    }

    pub fn neighbor_indices(&self) -> &[usize] {
        &self.neighbor_indices
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbor_indices[self.neighbor_offsets[i]..self.neighbor_offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbor_offsets[i + 1] - self.neighbor_offsets[i]
    }

    pub fn coords(&self) -> &[Point] {
        &self.node_coords
    }

    pub fn coords_std(&self) -> &[Point] {
        &self.node_coords_std
    }

    /// Largest physical distance between adjacent nodes.
    pub fn max_edge_length(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.num_nodes {
            for &j in self.neighbors(i) {
                m = m.max(distance(self.node_coords[i], self.node_coords[j]));
            }
        }
        m
    }
}

fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Per-dimension affine map of the bounding box onto `[-1, 1]`.
fn standardize(coords: &[Point]) -> Result<Vec<Point>> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in coords {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    if !(0..2).all(|d| hi[d] > lo[d]) {
        return Err(Error::InvalidMesh("node coordinates span a degenerate box".into()));
    }
    Ok(coords
        .iter()
        .map(|p| std::array::from_fn(|d| 2.0 * (p[d] - lo[d]) / (hi[d] - lo[d]) - 1.0))
        .collect())
}

/// Graph over all P2 nodes of `space`.
pub fn graph_from_space(space: &P2Space, adjacency: Adjacency) -> Result<GraphTopology> {
    let mut pairs = Vec::new();
    for e in space.elem_nodes() {
        match adjacency {
            Adjacency::Element => {
                for a in 0..6 {
                    for b in (a + 1)..6 {
                        pairs.push((e[a], e[b]));
                    }
                }
            }
            Adjacency::Edge => {
                for (k, &(a, b)) in MIDSIDE_EDGES.iter().enumerate() {
                    pairs.push((e[a], e[3 + k]));
                    pairs.push((e[3 + k], e[b]));
                    pairs.push((e[3 + k], e[3 + (k + 1) % 3]));
                }
            }
        }
    }
    GraphTopology::from_pairs(space.nodes(), pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum EdgeFeatureKind {
    #[default]
    Uniform,
    Distance { eps: f64, l_max: f64 },
}


impl EdgeFeatureKind {
    pub const DEFAULT_EPS: f64 = 1.05;
    pub const DEFAULT_L_MAX: f64 = 1.0;

    pub fn distance_default() -> Self {
        EdgeFeatureKind::Distance {
            eps: Self::DEFAULT_EPS,
            l_max: Self::DEFAULT_L_MAX,
        }
    }
}

/// One weight per stored directed edge, aligned with `neighbor_indices`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFeatures {
    pub values: Vec<f64>,
    pub kind: EdgeFeatureKind,
}

pub fn edge_features_uniform(topo: &GraphTopology) -> EdgeFeatures {
    EdgeFeatures {
        values: vec![1.0; topo.num_directed_edges()],
        kind: EdgeFeatureKind::Uniform,
    }
}

/// `log_eps(l_max / len)`.
pub fn distance_feature(len: f64, eps: f64, l_max: f64) -> f64 {
    (l_max / len).ln() / eps.ln()
}

/// Distance features with `L` the physical node distance.
pub fn edge_features_distance(topo: &GraphTopology, eps: f64, l_max: f64) -> Result<EdgeFeatures> {
    if !(eps > 1.0) || !eps.is_finite() {
        return Err(Error::Precondition(format!("edge feature base must satisfy eps > 1, got {eps}")));
    }
    if !(l_max > 0.0) || !l_max.is_finite() {
        return Err(Error::Precondition(format!("l_max must be positive, got {l_max}")));
    }
    let coords = topo.coords();
    let mut values = Vec::with_capacity(topo.num_directed_edges());
    for i in 0..topo.num_nodes() {
        for &j in topo.neighbors(i) {
            let len = distance(coords[i], coords[j]);
            if len >= l_max {
                return Err(Error::Precondition(format!(
                    "edge ({j}, {i}) has length {len} >= l_max = {l_max}"
                )));
            }
            values.push(distance_feature(len, eps, l_max));
        }
    }
    Ok(EdgeFeatures {
        values,
        kind: EdgeFeatureKind::Distance { eps, l_max },
    })
}

pub fn edge_features(topo: &GraphTopology, kind: EdgeFeatureKind) -> Result<EdgeFeatures> {
    match kind {
        EdgeFeatureKind::Uniform => Ok(edge_features_uniform(topo)),
        EdgeFeatureKind::Distance { eps, l_max } => edge_features_distance(topo, eps, l_max),
    }
}

/// Row-normalized weighted adjacency: row `i` holds `E_ji / |N(i)|` for each
/// neighbor `j`. Applied blockwise to batches of graphs sharing the topology.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanAggregator {
    num_nodes: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl MeanAggregator {
    pub fn new(topo: &GraphTopology, feats: &EdgeFeatures) -> Result<Self> {
        if feats.values.len() != topo.num_directed_edges() {
            return Err(Error::DimensionMismatch {
                context: "edge features",
                expected: topo.num_directed_edges(),
                actual: feats.values.len(),
            });
        }
        let mut weights = Vec::with_capacity(feats.values.len());
        for i in 0..topo.num_nodes() {
            let deg = topo.degree(i) as f64;
            let range = topo.neighbor_offsets()[i]..topo.neighbor_offsets()[i + 1];
            weights.extend(feats.values[range].iter().map(|e| e / deg));
        }
        Ok(Self {
            num_nodes: topo.num_nodes(),
            offsets: topo.neighbor_offsets().to_vec(),
            indices: topo.neighbor_indices().to_vec(),
            weights,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// `(neighbor, weight)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.indices[r.clone()].iter().copied().zip(self.weights[r].iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::fem::Field;
    use crate::mesh::{generate_rectangle, BBox, Mesh};

    fn single_triangle() -> P2Space {
        let mesh = Mesh::with_derived_boundary(vec![[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]], 1).unwrap();
        P2Space::new(Arc::new(mesh), &[1], Field::Constant(0.0))
    }

    #[test]
    fn single_element_is_complete_graph() {
        let topo = graph_from_space(&single_triangle(), Adjacency::Element).unwrap();
        assert_eq!(topo.num_nodes(), 6);
        for i in 0..6 {
            assert_eq!(topo.degree(i), 5);
            assert!(!topo.neighbors(i).contains(&i));
        }
    }

    #[test]
    fn shared_edge_neighbors_are_deduplicated() {
        let mesh = generate_rectangle(1, 1, BBox::unit()).unwrap();
        let space = P2Space::new(Arc::new(mesh), &[1], Field::Constant(0.0));
        let topo = graph_from_space(&space, Adjacency::Element).unwrap();
        // the diagonal's endpoints and midpoint see all 9 nodes but themselves
        let shared = space.elem_nodes()[0]
            .iter()
            .copied()
            .filter(|n| space.elem_nodes()[1].contains(n))
            .collect::<Vec<_>>();
        assert_eq!(shared.len(), 3);
        for n in shared {
            assert_eq!(topo.degree(n), 8);
        }
    }

    #[test]
    fn standardized_bbox_corners() {
        let mesh = generate_rectangle(3, 2, BBox::new([2.0, -1.0], [5.0, 0.5]).unwrap()).unwrap();
        let space = P2Space::new(Arc::new(mesh), &[1], Field::Constant(0.0));
        let topo = graph_from_space(&space, Adjacency::Element).unwrap();
        let lo = space.nodes().iter().position(|p| *p == [2.0, -1.0]).unwrap();
        let hi = space.nodes().iter().position(|p| *p == [5.0, 0.5]).unwrap();
        assert_eq!(topo.coords_std()[lo], [-1.0, -1.0]);
        assert_eq!(topo.coords_std()[hi], [1.0, 1.0]);
    }

    #[test]
    fn edge_lattice_degrees() {
        let topo = graph_from_space(&single_triangle(), Adjacency::Edge).unwrap();
        for v in 0..3 {
            assert_eq!(topo.degree(v), 2);
        }
        for m in 3..6 {
            assert_eq!(topo.degree(m), 4);
        }
    }

    #[test]
    fn isolated_node_rejected() {
        let err = GraphTopology::from_pairs(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [(0, 1)]).unwrap_err();
        assert!(matches!(err, Error::InvalidMesh(_)));
    }

    #[test]
    fn distance_feature_values() {
        let topo = GraphTopology::from_pairs(&[[-1.0, -1.0], [-0.5, -1.0], [1.0, 1.0]], [(0, 1), (1, 2)]);
        let topo = topo.unwrap();
        // the (0,1) edge has standardized length 0.5
        let f = edge_features_distance(&topo, 1.05, 4.0).unwrap();
        let expected = (4.0f64 / 0.5).ln() / 1.05f64.ln();
        assert!((f.values[0] - expected).abs() < 1e-12);

        assert_eq!(distance_feature(0.7, 1.05, 0.7), 0.0);
        assert!((distance_feature(0.5, 1.05, 1.0) - 14.206_699_082_890_463).abs() < 1e-12);
    }

    #[test]
    fn distance_feature_rejects_long_edges() {
        let topo = GraphTopology::from_pairs(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [(0, 1), (1, 2)]).unwrap();
        let err = edge_features_distance(&topo, 1.05, 1.0).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        assert!(matches!(edge_features_distance(&topo, 1.0, 5.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn uniform_features_give_plain_mean() {
        let topo = graph_from_space(&single_triangle(), Adjacency::Element).unwrap();
        let agg = MeanAggregator::new(&topo, &edge_features_uniform(&topo)).unwrap();
        for i in 0..6 {
            let total: f64 = agg.row(i).map(|(_, w)| w).sum();
            assert!((total - 1.0).abs() < 1e-15);
        }
    }
}
