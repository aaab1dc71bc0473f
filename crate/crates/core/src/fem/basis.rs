//! Quadratic Lagrange shape functions on a triangle in barycentric form.
//!
//! Local node order: the three vertices, then the midpoints of edges
//! (0,1), (1,2), (2,0).

use crate::mesh::Point;

/// Local vertex pairs spanned by the three midside nodes.
pub const MIDSIDE_EDGES: [(usize, usize); 3] = [(0, 1), (1, 2), (2, 0)];

/// Shape values and their derivatives with respect to each barycentric
/// coordinate, `grads[n][a] = dN_n / d lambda_a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisEval {
    pub values: [f64; 6],
    pub grads: [[f64; 3]; 6],
}

pub fn p2_basis_eval(bary: [f64; 3]) -> BasisEval {
    let l = bary;
    let mut values = [0.0; 6];
    let mut grads = [[0.0; 3]; 6];
    for a in 0..3 {
        values[a] = l[a] * (2.0 * l[a] - 1.0);
        grads[a][a] = 4.0 * l[a] - 1.0;
    }
    for (k, &(a, b)) in MIDSIDE_EDGES.iter().enumerate() {
        values[3 + k] = 4.0 * l[a] * l[b];
        grads[3 + k][a] = 4.0 * l[b];
        grads[3 + k][b] = 4.0 * l[a];
    }
    BasisEval { values, grads }
}

/// Affine geometry of one triangle.
#[derive(Debug, Clone, Copy)]
pub struct ElementGeometry {
    /// Twice the (positive) area; the reference-to-physical Jacobian.
    pub jacobian: f64,
    /// Physical gradients of the barycentric coordinates (constant per element).
    pub grad_lambda: [[f64; 2]; 3],
    pub corners: [Point; 3],
}

impl ElementGeometry {
    pub fn new(corners: [Point; 3]) -> Self {
        let [p0, p1, p2] = corners;
        let jacobian = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
        let inv = 1.0 / jacobian;
        let grad_lambda = [
            [(p1[1] - p2[1]) * inv, (p2[0] - p1[0]) * inv],
            [(p2[1] - p0[1]) * inv, (p0[0] - p2[0]) * inv],
            [(p0[1] - p1[1]) * inv, (p1[0] - p0[0]) * inv],
        ];
        Self {
            jacobian,
            grad_lambda,
            corners,
        }
    }

    pub fn point_at(&self, bary: [f64; 3]) -> Point {
        let c = &self.corners;
        [
            bary[0] * c[0][0] + bary[1] * c[1][0] + bary[2] * c[2][0],
            bary[0] * c[0][1] + bary[1] * c[1][1] + bary[2] * c[2][1],
        ]
    }

    /// Barycentric coordinates of a physical point.
    pub fn barycentric(&self, p: Point) -> [f64; 3] {
        let c0 = self.corners[0];
        let dx = p[0] - c0[0];
        let dy = p[1] - c0[1];
        let l1 = self.grad_lambda[1][0] * dx + self.grad_lambda[1][1] * dy;
        let l2 = self.grad_lambda[2][0] * dx + self.grad_lambda[2][1] * dy;
        [1.0 - l1 - l2, l1, l2]
    }

    /// Physical gradients of the six shape functions.
    pub fn physical_grads(&self, eval: &BasisEval) -> [[f64; 2]; 6] {
        let mut out = [[0.0; 2]; 6];
        for (n, g) in eval.grads.iter().enumerate() {
            for a in 0..3 {
                out[n][0] += g[a] * self.grad_lambda[a][0];
                out[n][1] += g[a] * self.grad_lambda[a][1];
            }
        }
        out
    }
}

/// Quadratic shape functions on an edge `(start, mid, end)` at parameter `t`.
pub fn p2_edge_eval(t: f64) -> [f64; 3] {
    [(1.0 - t) * (1.0 - 2.0 * t), 4.0 * t * (1.0 - t), t * (2.0 * t - 1.0)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodal_property() {
        let nodes = [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.5, 0.5, 0.0],
            [0.0, 0.5, 0.5],
            [0.5, 0.0, 0.5],
        ];
        for (i, b) in nodes.iter().enumerate() {
            let v = p2_basis_eval(*b).values;
            for (j, &vj) in v.iter().enumerate() {
                assert_eq!(vj, if i == j { 1.0 } else { 0.0 }, "node {i} fn {j}");
            }
        }
    }

    #[test]
    fn centroid_values() {
        let third = 1.0 / 3.0;
        let v = p2_basis_eval([third, third, third]).values;
        for a in 0..3 {
            assert!((v[a] + 1.0 / 9.0).abs() < 1e-15);
            assert!((v[3 + a] - 4.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn partition_of_unity_and_zero_gradient_sum() {
        for &b in &[[0.2, 0.3, 0.5], [0.7, 0.1, 0.2], [0.05, 0.9, 0.05]] {
            let e = p2_basis_eval(b);
            assert!((e.values.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            let geo = ElementGeometry::new([[0.1, 0.2], [1.3, 0.4], [0.5, 1.7]]);
            let g = geo.physical_grads(&e);
            let sx: f64 = g.iter().map(|v| v[0]).sum();
            let sy: f64 = g.iter().map(|v| v[1]).sum();
            assert!(sx.abs() < 1e-13 && sy.abs() < 1e-13);
        }
    }

    #[test]
    fn barycentric_round_trip() {
        let geo = ElementGeometry::new([[0.1, 0.2], [1.3, 0.4], [0.5, 1.7]]);
        let b = [0.2, 0.3, 0.5];
        let back = geo.barycentric(geo.point_at(b));
        for k in 0..3 {
            assert!((back[k] - b[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn physical_gradient_matches_finite_difference() {
        let geo = ElementGeometry::new([[0.1, 0.2], [1.3, 0.4], [0.5, 1.7]]);
        let p = geo.point_at([0.25, 0.35, 0.4]);
        let g = geo.physical_grads(&p2_basis_eval(geo.barycentric(p)));
        let h = 1e-6;
        for n in 0..6 {
            for d in 0..2 {
                let mut pp = p;
                let mut pm = p;
                pp[d] += h;
                pm[d] -= h;
                let fd = (p2_basis_eval(geo.barycentric(pp)).values[n]
                    - p2_basis_eval(geo.barycentric(pm)).values[n])
                    / (2.0 * h);
                assert!((fd - g[n][d]).abs() < 1e-7, "fn {n} dir {d}: {fd} vs {}", g[n][d]);
            }
        }
    }
}
