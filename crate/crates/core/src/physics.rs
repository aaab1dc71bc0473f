//! Precomputed Galerkin residual system, the physics loss built on it, hard
//! Dirichlet stacking, error metrics, and solution export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fem::{
    assemble_load, assemble_operator, default_quadrature, edge_quadrature, element_quad_points, p2_edge_eval,
    source_at, P2Space, PdeCoefficients,
};
use crate::linalg::CsrMatrix;

/// Residual norms below this get a zero gradient.
pub const NORM_GUARD: f64 = 1e-30;

/// `R = A_ii (delta f) + A_ib m_e - b_i` with every matrix precomputed.
///
/// The matrices sit behind `Arc` so parametric systems that differ only in
/// the load share them.
#[derive(Debug, Clone)]
pub struct ResidualSystem {
    a_ii: Arc<CsrMatrix>,
    a_ii_t: Arc<CsrMatrix>,
    a_ib: Arc<CsrMatrix>,
    b_i: Vec<f64>,
    m_e: Arc<Vec<f64>>,
    /// `A_ib m_e - b_i`, the constant part of the residual.
    offset: Vec<f64>,
    delta: f64,
    interior_nodes: Arc<Vec<usize>>,
    boundary_nodes: Arc<Vec<usize>>,
    num_nodes: usize,
}

impl ResidualSystem {
    /// Assembles the full operator and load, keeps the interior test rows,
    /// and splits the columns into interior and Dirichlet blocks.
    pub fn build(space: &P2Space, coeffs: &PdeCoefficients, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
        }
        if space.num_interior() == 0 {
            return Err(Error::InvalidMesh("no interior nodes to train on".into()));
        }
        let quad = default_quadrature();
        let a = assemble_operator(space, coeffs, &quad)?;
        let b = assemble_load(space, coeffs, &quad)?;
        let interior = space.interior_nodes();
        let fixed = space.dirichlet_nodes();
        let a_ii = a.submatrix(interior, interior);
        let a_ii_t = a_ii.transpose();
        let a_ib = a.submatrix(interior, fixed);
        let b_i = interior.iter().map(|&n| b[n]).collect();
        Self::from_parts(
            Arc::new(a_ii),
            Arc::new(a_ii_t),
            Arc::new(a_ib),
            b_i,
            Arc::new(space.dirichlet_values().to_vec()),
            delta,
            Arc::new(interior.to_vec()),
            Arc::new(fixed.to_vec()),
            space.num_nodes(),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        a_ii: Arc<CsrMatrix>,
        a_ii_t: Arc<CsrMatrix>,
        a_ib: Arc<CsrMatrix>,
        b_i: Vec<f64>,
        m_e: Arc<Vec<f64>>,
        delta: f64,
        interior_nodes: Arc<Vec<usize>>,
        boundary_nodes: Arc<Vec<usize>>,
        num_nodes: usize,
    ) -> Result<Self> {
        let mut offset = a_ib.spmv(&m_e)?;
        for (o, b) in offset.iter_mut().zip(&b_i) {
            *o -= b;
        }
        Ok(Self {
            a_ii,
            a_ii_t,
            a_ib,
            b_i,
            m_e,
            offset,
            delta,
            interior_nodes,
            boundary_nodes,
            num_nodes,
        })
    }

    /// Same operator and boundary data with the load recomputed for
    /// `coeffs` (typically a new nodal source).
    pub fn with_load(&self, space: &P2Space, coeffs: &PdeCoefficients) -> Result<Self> {
        if space.num_nodes() != self.num_nodes || space.interior_nodes() != &self.interior_nodes[..] {
            return Err(Error::InvalidArgument("space does not match the residual system".into()));
        }
        let b = assemble_load(space, coeffs, &default_quadrature())?;
        let b_i = self.interior_nodes.iter().map(|&n| b[n]).collect();
        Self::from_parts(
            self.a_ii.clone(),
            self.a_ii_t.clone(),
            self.a_ib.clone(),
            b_i,
            self.m_e.clone(),
            self.delta,
            self.interior_nodes.clone(),
            self.boundary_nodes.clone(),
            self.num_nodes,
        )
    }

    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
        }
        Ok(Self { delta, ..self.clone() })
    }

    pub fn a_ii(&self) -> &CsrMatrix {
        &self.a_ii
    }

    pub fn a_ib(&self) -> &CsrMatrix {
        &self.a_ib
    }

    pub fn b_i(&self) -> &[f64] {
        &self.b_i
    }

    pub fn m_e(&self) -> &[f64] {
        &self.m_e
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior_nodes
    }

    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary_nodes
    }

    pub fn num_interior(&self) -> usize {
        self.interior_nodes.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    fn check_len(&self, f_out: &[f64]) -> Result<()> {
        if f_out.len() != self.num_interior() {
            return Err(Error::DimensionMismatch {
                context: "interior outputs",
                expected: self.num_interior(),
                actual: f_out.len(),
            });
        }
        Ok(())
    }

    /// Residual for interior outputs `f_out`.
    pub fn residual_vector(&self, f_out: &[f64]) -> Result<Vec<f64>> {
        self.check_len(f_out)?;
        let m: Vec<f64> = f_out.iter().map(|f| self.delta * f).collect();
        self.residual_of_interior(&m)
    }

    /// Residual for interior coefficients `m_i = delta f_out` given directly.
    pub fn residual_of_interior(&self, m_i: &[f64]) -> Result<Vec<f64>> {
        self.check_len(m_i)?;
        let mut r = self.a_ii.spmv(m_i)?;
        for (v, o) in r.iter_mut().zip(&self.offset) {
            *v += o;
        }
        Ok(r)
    }

    /// `[delta f_out; m_e]` scattered to node order. Dirichlet entries are
    /// copied from `m_e` unchanged.
    pub fn assemble_full_solution(&self, f_out: &[f64]) -> Result<Vec<f64>> {
        self.check_len(f_out)?;
        let mut u = vec![0.0; self.num_nodes];
        for (&n, f) in self.interior_nodes.iter().zip(f_out) {
            u[n] = self.delta * f;
        }
        for (&n, &g) in self.boundary_nodes.iter().zip(self.m_e.iter()) {
            u[n] = g;
        }
        Ok(u)
    }

    /// Pulls the interior rows out of a per-node network output.
    pub fn interior_outputs(&self, node_values: &[f64]) -> Result<Vec<f64>> {
        if node_values.len() != self.num_nodes {
            return Err(Error::DimensionMismatch {
                context: "node outputs",
                expected: self.num_nodes,
                actual: node_values.len(),
            });
        }
        Ok(self.interior_nodes.iter().map(|&n| node_values[n]).collect())
    }
}

/// Residual at interior test functions evaluated directly by quadrature:
/// `u_h` and its gradient are rebuilt from `m` at every point, with no
/// assembled matrix involved.
pub fn quadrature_residual(space: &P2Space, coeffs: &PdeCoefficients, m: &[f64]) -> Result<Vec<f64>> {
    if m.len() != space.num_nodes() {
        return Err(Error::DimensionMismatch {
            context: "nodal vector",
            expected: space.num_nodes(),
            actual: m.len(),
        });
    }
    let quad = default_quadrature();
    let index = space.interior_index();
    let mut r = vec![0.0; space.num_interior()];
    for (elem, nodes) in space.elem_nodes().iter().enumerate() {
        for qp in element_quad_points(space, elem, &quad) {
            let mut u = 0.0;
            let mut grad = [0.0; 2];
            for k in 0..6 {
                let c = m[nodes[k]];
                u += c * qp.phi[k];
                grad[0] += c * qp.grad[k][0];
                grad[1] += c * qp.grad[k][1];
            }
            let kappa = coeffs.kappa.eval(qp.x);
            let beta = coeffs.beta.eval(qp.x);
            let s = source_at(space, &coeffs.source, elem, &qp);
            for k in 0..6 {
                if let Some(i) = index[nodes[k]] {
                    let flux = grad[0] * qp.grad[k][0] + grad[1] * qp.grad[k][1];
                    r[i] += qp.weight * (-kappa * flux + (beta * u + s) * qp.phi[k]);
                }
            }
        }
    }
    if let Some(q) = &coeffs.neumann_flux {
        for (edge, enodes) in space.natural_edges() {
            let (pa, pb) = (space.nodes()[edge.a], space.nodes()[edge.b]);
            let len = (pb[0] - pa[0]).hypot(pb[1] - pa[1]);
            for (t, w) in edge_quadrature() {
                let x = [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])];
                let phi = p2_edge_eval(t);
                let qv = q.eval(x);
                for k in 0..3 {
                    if let Some(i) = index[enodes[k]] {
                        r[i] += w * len * phi[k] * qv;
                    }
                }
            }
        }
    }
    Ok(r)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Loss on stacked per-node outputs: `output` has `systems.len()` blocks of
/// `num_nodes` rows, block `b` is scored against `systems[b]`. The loss is
/// `sum_b ||R_b||` (or `sum_b ||R_b||^2` when `squared`).
pub fn physics_loss(tape: &mut Tape, systems: &[Arc<ResidualSystem>], output: Var, squared: bool) -> Result<Var> {
    let Some(first) = systems.first() else {
        return Err(Error::Empty("physics loss needs at least one residual system"));
    };
    let n = first.num_nodes();
    let values = tape.value(output);
    if values.cols() != 1 || values.rows() != n * systems.len() {
        return Err(Error::DimensionMismatch {
            context: "physics loss output rows",
            expected: n * systems.len(),
            actual: values.rows(),
        });
    }
    let mut total = 0.0;
    let mut scaled = Vec::with_capacity(systems.len());
    for (b, sys) in systems.iter().enumerate() {
        if sys.num_nodes() != n {
            return Err(Error::DimensionMismatch {
                context: "residual systems in one batch",
                expected: n,
                actual: sys.num_nodes(),
            });
        }
        let f = sys.interior_outputs(&values.data()[b * n..(b + 1) * n])?;
        let r = sys.residual_vector(&f)?;
        let nr = norm(&r);
        let coef = if squared {
            total += nr * nr;
            2.0
        } else {
            total += nr;
            if nr < NORM_GUARD {
                0.0
            } else {
                1.0 / nr
            }
        };
        scaled.push((r, coef));
    }
    let systems = systems.to_vec();
    let rows = n * systems.len();
    tape.custom("physics_loss", &[output], Tensor::scalar(total), move |g| {
        let g = g.item();
        let mut grad = vec![0.0; rows];
        for (b, (sys, (r, coef))) in systems.iter().zip(&scaled).enumerate() {
            if *coef == 0.0 {
                continue;
            }
            let back = sys.a_ii_t.spmv(r).expect("residual length matches operator");
            let s = g * coef * sys.delta;
            for (&node, v) in sys.interior_nodes.iter().zip(back) {
                grad[b * n + node] = s * v;
            }
        }
        vec![Tensor::column(grad)]
    })
}

/// Mean squared error of the hard-constrained solutions against nodal
/// labels, averaged over all nodes of all blocks.
pub fn supervised_loss(tape: &mut Tape, systems: &[Arc<ResidualSystem>], output: Var, labels: &[&[f64]]) -> Result<Var> {
    let Some(first) = systems.first() else {
        return Err(Error::Empty("supervised loss needs at least one sample"));
    };
    if labels.len() != systems.len() {
        return Err(Error::DimensionMismatch {
            context: "label count",
            expected: systems.len(),
            actual: labels.len(),
        });
    }
    let n = first.num_nodes();
    let values = tape.value(output);
    if values.cols() != 1 || values.rows() != n * systems.len() {
        return Err(Error::DimensionMismatch {
            context: "supervised loss output rows",
            expected: n * systems.len(),
            actual: values.rows(),
        });
    }
    let count = (n * systems.len()) as f64;
    let mut total = 0.0;
    let mut diffs = Vec::with_capacity(systems.len());
    for (b, (sys, label)) in systems.iter().zip(labels).enumerate() {
        if label.len() != n {
            return Err(Error::DimensionMismatch {
                context: "label length",
                expected: n,
                actual: label.len(),
            });
        }
        let f = sys.interior_outputs(&values.data()[b * n..(b + 1) * n])?;
        let u = sys.assemble_full_solution(&f)?;
        let d: Vec<f64> = u.iter().zip(label.iter()).map(|(a, l)| a - l).collect();
        total += d.iter().map(|x| x * x).sum::<f64>();
        diffs.push(d);
    }
    let systems = systems.to_vec();
    tape.custom("supervised_loss", &[output], Tensor::scalar(total / count), move |g| {
        let g = g.item();
        let mut grad = vec![0.0; n * systems.len()];
        for (b, (sys, d)) in systems.iter().zip(&diffs).enumerate() {
            let s = 2.0 * g * sys.delta / count;
            for &node in sys.interior_nodes.iter() {
                grad[b * n + node] = s * d[node];
            }
        }
        vec![Tensor::column(grad)]
    })
}

/// `||u - u_ref|| / ||u_ref||`.
pub fn relative_l2(u: &[f64], reference: &[f64]) -> Result<f64> {
    if u.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            context: "relative L2 operands",
            expected: reference.len(),
            actual: u.len(),
        });
    }
    let denom = norm(reference);
    if denom == 0.0 {
        return Err(Error::InvalidArgument("reference solution has zero norm".into()));
    }
    let diff: f64 = u.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(diff / denom)
}

/// `node_id,x,y,u` rows.
pub fn solution_csv(space: &P2Space, u: &[f64]) -> Result<String> {
    check_nodal(space, u)?;
    let mut out = String::from("node_id,x,y,u\n");
    for (i, (p, v)) in space.nodes().iter().zip(u).enumerate() {
        writeln!(out, "{i},{},{},{}", p[0], p[1], v).expect("write to string");
    }
    Ok(out)
}

/// Legacy ASCII VTK polydata; each P2 triangle is drawn as its four linear
/// sub-triangles.
pub fn solution_vtk(space: &P2Space, u: &[f64], name: &str) -> Result<String> {
    check_nodal(space, u)?;
    let mut out = String::new();
    let n = space.num_nodes();
    let tris = space.elem_nodes();
    writeln!(out, "# vtk DataFile Version 3.0\n{name}\nASCII\nDATASET POLYDATA").unwrap();
    writeln!(out, "POINTS {n} double").unwrap();
    for p in space.nodes() {
        writeln!(out, "{} {} 0", p[0], p[1]).unwrap();
    }
    writeln!(out, "POLYGONS {} {}", 4 * tris.len(), 16 * tris.len()).unwrap();
    for t in tris {
        let [v0, v1, v2, m01, m12, m20] = *t;
        for [a, b, c] in [[v0, m01, m20], [m01, v1, m12], [m20, m12, v2], [m01, m12, m20]] {
            writeln!(out, "3 {a} {b} {c}").unwrap();
        }
    }
    writeln!(out, "POINT_DATA {n}\nSCALARS {name} double 1\nLOOKUP_TABLE default").unwrap();
    for v in u {
        writeln!(out, "{v}").unwrap();
    }
    Ok(out)
}

pub fn write_solution_csv(path: impl AsRef<Path>, space: &P2Space, u: &[f64]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, solution_csv(space, u)?).map_err(|e| Error::io(path, e))
}

pub fn write_solution_vtk(path: impl AsRef<Path>, space: &P2Space, u: &[f64]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, solution_vtk(space, u, "u")?).map_err(|e| Error::io(path, e))
}

fn check_nodal(space: &P2Space, u: &[f64]) -> Result<()> {
    if u.len() != space.num_nodes() {
        return Err(Error::DimensionMismatch {
            context: "nodal solution",
            expected: space.num_nodes(),
            actual: u.len(),
        });
    }
    Ok(())
}
