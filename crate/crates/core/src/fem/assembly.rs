//! Weak-form operator and load assembly for `div(kappa grad u) + beta u + s = 0`.
//!
//! The operator is `A_ij = -int kappa grad(phi_i).grad(phi_j) + int beta phi_i phi_j`
//! and the load is `b_i = -int phi_i s - int_{natural} phi_i q`, so the
//! Galerkin residual of a nodal vector `m` is `A m - b`.

use super::basis::{p2_basis_eval, p2_edge_eval, BasisEval};
use super::quadrature::{edge_quadrature, QuadratureRule};
use super::space::{Field, P2Space};
use crate::error::{Error, Result};
use crate::linalg::CsrMatrix;
use crate::mesh::Point;

/// Volume source: an analytic field, or nodal values interpolated with the
/// P2 basis.
#[derive(Debug, Clone)]
pub enum Source {
    Field(Field),
    Nodal(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct PdeCoefficients {
    pub kappa: Field,
    pub beta: Field,
    pub source: Source,
    /// Flux `kappa du/dn` on natural-boundary edges.
    pub neumann_flux: Option<Field>,
}

impl PdeCoefficients {
    pub fn new(kappa: impl Into<Field>, beta: impl Into<Field>, source: Source) -> Self {
        Self {
            kappa: kappa.into(),
            beta: beta.into(),
            source,
            neumann_flux: None,
        }
    }

    pub fn with_neumann(mut self, q: Field) -> Self {
        self.neumann_flux = Some(q);
        self
    }

    pub fn with_source(&self, source: Source) -> Self {
        Self {
            source,
            ..self.clone()
        }
    }
}

/// Shape data at one quadrature point of one element.
pub(crate) struct QuadPoint {
    pub x: Point,
    pub weight: f64,
    pub phi: [f64; 6],
    pub grad: [[f64; 2]; 6],
}

pub(crate) fn element_quad_points(space: &P2Space, elem: usize, quad: &QuadratureRule) -> Vec<QuadPoint> {
    let geo = space.geometry(elem);
    let basis: Vec<BasisEval> = quad.points.iter().map(|&b| p2_basis_eval(b)).collect();
    quad.points
        .iter()
        .zip(&quad.weights)
        .zip(basis)
        .map(|((&bary, &w), eval)| QuadPoint {
            x: geo.point_at(bary),
            weight: w * geo.jacobian,
            phi: eval.values,
            grad: geo.physical_grads(&eval),
        })
        .collect()
}

pub(crate) fn source_at(space: &P2Space, source: &Source, elem: usize, qp: &QuadPoint) -> f64 {
    match source {
        Source::Field(f) => f.eval(qp.x),
        Source::Nodal(mu) => space.elem_nodes()[elem]
            .iter()
            .zip(qp.phi.iter())
            .map(|(&n, &p)| p * mu[n])
            .sum(),
    }
}

fn check_nodal_source(space: &P2Space, source: &Source) -> Result<()> {
    if let Source::Nodal(mu) = source {
        if mu.len() != space.num_nodes() {
            return Err(Error::DimensionMismatch {
                context: "nodal source",
                expected: space.num_nodes(),
                actual: mu.len(),
            });
        }
    }
    Ok(())
}

/// Full `N_h x N_h` weak-form operator.
pub fn assemble_operator(space: &P2Space, coeffs: &PdeCoefficients, quad: &QuadratureRule) -> Result<CsrMatrix> {
    if quad.degree < 2 {
        return Err(Error::InvalidArgument(format!(
            "operator assembly needs quadrature degree >= 2, got {}",
            quad.degree
        )));
    }
    let n = space.num_nodes();
    let mut triplets = Vec::with_capacity(36 * space.elem_nodes().len());
    for (elem, nodes) in space.elem_nodes().iter().enumerate() {
        let mut local = [[0.0; 6]; 6];
        for qp in element_quad_points(space, elem, quad) {
            let kappa = coeffs.kappa.eval(qp.x);
            let beta = coeffs.beta.eval(qp.x);
            for i in 0..6 {
                for j in 0..6 {
                    let stiff = qp.grad[i][0] * qp.grad[j][0] + qp.grad[i][1] * qp.grad[j][1];
                    local[i][j] += qp.weight * (-kappa * stiff + beta * qp.phi[i] * qp.phi[j]);
                }
            }
        }
        for i in 0..6 {
            for j in 0..6 {
                triplets.push((nodes[i], nodes[j], local[i][j]));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, &triplets)
}

/// Load vector of length `N_h`.
pub fn assemble_load(space: &P2Space, coeffs: &PdeCoefficients, quad: &QuadratureRule) -> Result<Vec<f64>> {
    check_nodal_source(space, &coeffs.source)?;
    let mut b = vec![0.0; space.num_nodes()];
    for (elem, nodes) in space.elem_nodes().iter().enumerate() {
        for qp in element_quad_points(space, elem, quad) {
            let s = source_at(space, &coeffs.source, elem, &qp);
            for i in 0..6 {
                b[nodes[i]] -= qp.weight * qp.phi[i] * s;
            }
        }
    }
    if let Some(q) = &coeffs.neumann_flux {
        for (edge, nodes) in space.natural_edges() {
            let (pa, pb) = (space.nodes()[edge.a], space.nodes()[edge.b]);
            let len = ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt();
            for (t, w) in edge_quadrature() {
                let x = [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])];
                let phi = p2_edge_eval(t);
                let qv = q.eval(x);
                for k in 0..3 {
                    b[nodes[k]] -= w * len * phi[k] * qv;
                }
            }
        }
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::fem::quadrature::triangle_quadrature;
    use crate::mesh::{generate_rectangle, BBox};

    fn space(n: usize) -> P2Space {
        let mesh = Arc::new(generate_rectangle(n, n, BBox::new([-1.0, 0.0], [1.0, 1.5]).unwrap()).unwrap());
        P2Space::new(mesh, &[1], Field::Constant(0.0))
    }

    fn coeffs(k: f64, b: f64) -> PdeCoefficients {
        PdeCoefficients::new(k, b, Source::Field(Field::Constant(0.0)))
    }

    #[test]
    fn stiffness_annihilates_constants() {
        let sp = space(4);
        let q = triangle_quadrature(5).unwrap();
        let a = assemble_operator(&sp, &coeffs(1.0, 0.0), &q).unwrap();
        let y = a.spmv(&vec![3.0; sp.num_nodes()]).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn mass_matrix_sums_to_area() {
        let sp = space(3);
        let q = triangle_quadrature(5).unwrap();
        let m = assemble_operator(&sp, &coeffs(0.0, 1.0), &q).unwrap();
        let total: f64 = m.values().iter().sum();
        assert!((total - 3.0).abs() < 1e-12);
    }

    #[test]
    fn operator_is_linear_in_coefficients_and_symmetric() {
        let sp = space(3);
        let q = triangle_quadrature(5).unwrap();
        let k = assemble_operator(&sp, &coeffs(1.0, 0.0), &q).unwrap();
        let m = assemble_operator(&sp, &coeffs(0.0, 1.0), &q).unwrap();
        let both = assemble_operator(&sp, &coeffs(1.0, 1.0), &q).unwrap();
        for r in 0..sp.num_nodes() {
            for (c, v) in both.row(r) {
                assert!((v - k.get(r, c) - m.get(r, c)).abs() < 1e-13);
                assert!((v - both.get(c, r)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_source_gives_zero_load() {
        let sp = space(2);
        let q = triangle_quadrature(5).unwrap();
        assert!(assemble_load(&sp, &coeffs(1.0, 0.0), &q).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_source_load_sums_to_minus_area() {
        let sp = space(3);
        let q = triangle_quadrature(5).unwrap();
        let c = PdeCoefficients::new(1.0, 0.0, Source::Field(Field::Constant(1.0)));
        let b = assemble_load(&sp, &c, &q).unwrap();
        assert!((b.iter().sum::<f64>() + 3.0).abs() < 1e-12);
    }

    #[test]
    fn nodal_source_length_checked() {
        let sp = space(2);
        let q = triangle_quadrature(5).unwrap();
        let c = PdeCoefficients::new(1.0, 0.0, Source::Nodal(vec![0.0; 3]));
        assert!(matches!(assemble_load(&sp, &c, &q), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn neumann_flux_integrates_over_natural_edges() {
        let mesh = Arc::new(generate_rectangle(3, 2, BBox::unit()).unwrap());
        let sp = P2Space::new(mesh, &[], Field::Constant(0.0));
        let q = triangle_quadrature(5).unwrap();
        let c = PdeCoefficients::new(1.0, 0.0, Source::Field(Field::Constant(0.0)))
            .with_neumann(Field::Constant(2.0));
        let b = assemble_load(&sp, &c, &q).unwrap();
        // perimeter 4, flux 2
        assert!((b.iter().sum::<f64>() + 8.0).abs() < 1e-12);
    }
}
