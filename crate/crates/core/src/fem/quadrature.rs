//! Symmetric Gaussian rules on the reference triangle and on edges.

use crate::error::{Error, Result};

/// Rule on the reference triangle; weights sum to its area, 1/2.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

/// Returns the 3-point (degree 2) or 7-point (degree 5) rule.
pub fn triangle_quadrature(degree: usize) -> Result<QuadratureRule> {
    match degree {
        2 => Ok(QuadratureRule {
            points: vec![[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]],
            weights: vec![1.0 / 6.0; 3],
            degree: 2,
        }),
        5 => {
            let s15 = 15f64.sqrt();
            let a1 = (6.0 - s15) / 21.0;
            let a2 = (6.0 + s15) / 21.0;
            let w1 = (155.0 - s15) / 2400.0;
            let w2 = (155.0 + s15) / 2400.0;
            let b1 = 1.0 - 2.0 * a1;
            let b2 = 1.0 - 2.0 * a2;
            let third = 1.0 / 3.0;
            Ok(QuadratureRule {
                points: vec![
                    [third, third, third],
                    [a1, a1, b1],
                    [a1, b1, a1],
                    [b1, a1, a1],
                    [a2, a2, b2],
                    [a2, b2, a2],
                    [b2, a2, a2],
                ],
                weights: vec![9.0 / 80.0, w1, w1, w1, w2, w2, w2],
                degree: 5,
            })
        }
        other => Err(Error::InvalidArgument(format!(
            "no triangle quadrature of degree {other}; supported: 2, 5"
        ))),
    }
}

/// Three-point Gauss-Legendre rule on `[0, 1]`: `(t, weight)` pairs.
pub fn edge_quadrature() -> [(f64, f64); 3] {
    let h = 0.5 * (3.0f64 / 5.0).sqrt();
    [(0.5 - h, 5.0 / 18.0), (0.5, 8.0 / 18.0), (0.5 + h, 5.0 / 18.0)]
}
