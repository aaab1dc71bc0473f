//! P2 finite elements: space, quadrature, assembly, and the classic FEM
//! solve used as the reference oracle.

mod assembly;
mod basis;
mod quadrature;
mod space;

pub use assembly::{assemble_load, assemble_operator, PdeCoefficients, Source};
pub(crate) use assembly::{element_quad_points, source_at};
pub use basis::{p2_basis_eval, p2_edge_eval, BasisEval, ElementGeometry, MIDSIDE_EDGES};
pub use quadrature::{edge_quadrature, triangle_quadrature, QuadratureRule};
pub use space::{Field, P2Space};

use crate::error::{Error, Result};
use crate::linalg::{solve, CsrMatrix, SolverMethod};

pub const DEFAULT_SOLVER_TOL: f64 = 1e-10;

/// Default volume rule (7-point, degree 5).
pub fn default_quadrature() -> QuadratureRule {
    triangle_quadrature(5).expect("degree 5 rule exists")
}

/// Picks CG when `-A` is SPD (`kappa > 0`, `beta <= 0` at every node),
/// BiCGStab otherwise.
pub fn choose_method(space: &P2Space, coeffs: &PdeCoefficients) -> SolverMethod {
    let holds = |f: &Field, pred: fn(f64) -> bool| match f.as_constant() {
        Some(c) => pred(c),
        None => space.nodes().iter().all(|&p| pred(f.eval(p))),
    };
    if holds(&coeffs.kappa, |k| k > 0.0) && holds(&coeffs.beta, |b| b <= 0.0) {
        SolverMethod::Cg
    } else {
        SolverMethod::BiCgStab
    }
}

/// Splits an assembled system into the interior block solve
/// `A_ii m_i = b_i - A_ib m_e` and returns the full nodal vector.
pub fn solve_reduced(
    space: &P2Space,
    a: &CsrMatrix,
    b: &[f64],
    method: SolverMethod,
    tol: f64,
) -> Result<Vec<f64>> {
    if space.num_interior() == 0 {
        return Err(Error::InvalidMesh("no interior nodes to solve for".into()));
    }
    let interior = space.interior_nodes();
    let fixed = space.dirichlet_nodes();
    let a_ii = a.submatrix(interior, interior);
    let a_ib = a.submatrix(interior, fixed);
    let lift = a_ib.spmv(space.dirichlet_values())?;
    let mut rhs: Vec<f64> = interior.iter().zip(&lift).map(|(&n, l)| b[n] - l).collect();
    let (matrix, sign) = match method {
        // CG runs on -A_ii, which is SPD for the Poisson-type family
        SolverMethod::Cg => (a_ii.scaled(-1.0), -1.0),
        SolverMethod::BiCgStab => (a_ii, 1.0),
    };
    rhs.iter_mut().for_each(|v| *v *= sign);
    let max_iter = 50 * interior.len() + 1000;
    let sol = solve(&matrix, &rhs, method, tol, max_iter)?;
    let mut full = vec![0.0; space.num_nodes()];
    for (&n, v) in interior.iter().zip(&sol.x) {
        full[n] = *v;
    }
    for (&n, v) in fixed.iter().zip(space.dirichlet_values()) {
        full[n] = *v;
    }
    Ok(full)
}

/// Classic FEM solve with essential values taken from the space.
pub fn fem_solve_dirichlet(space: &P2Space, coeffs: &PdeCoefficients) -> Result<Vec<f64>> {
    fem_solve_with_tol(space, coeffs, DEFAULT_SOLVER_TOL)
}

pub fn fem_solve_with_tol(space: &P2Space, coeffs: &PdeCoefficients, tol: f64) -> Result<Vec<f64>> {
    let quad = default_quadrature();
    let a = assemble_operator(space, coeffs, &quad)?;
    let b = assemble_load(space, coeffs, &quad)?;
    solve_reduced(space, &a, &b, choose_method(space, coeffs), tol)
}

/// Discrete L2 norm of `u_h - exact` over the domain, by quadrature.
pub fn l2_error(space: &P2Space, values: &[f64], exact: &Field) -> f64 {
    let quad = default_quadrature();
    let mut acc = 0.0;
    for (elem, nodes) in space.elem_nodes().iter().enumerate() {
        for qp in element_quad_points(space, elem, &quad) {
            let uh: f64 = nodes.iter().zip(qp.phi.iter()).map(|(&n, &p)| p * values[n]).sum();
            acc += qp.weight * (uh - exact.eval(qp.x)).powi(2);
        }
    }
    acc.sqrt()
}
