//! Numerical integration weights for the domain and boundary integrals of the
//! discretized energy.
//!
//! Composite Simpson weights follow the tensor-product pattern
//! `(1/(3(n-1)))·[1, 4, 2, 4, …, 2, 4, 1]` per axis and require an odd point
//! count. Trapezoid weights are provided as a fallback for even grids.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::grid::ScalarField2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadratureKind {
    Simpson,
    Trapezoid,
}

/// Integration weights over the unit square (2D) and one unit edge (1D).
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub kind: QuadratureKind,
    pub weights_2d: Array2<f64>,
    pub weights_1d: Array1<f64>,
}

impl QuadratureRule {
    pub fn new(kind: QuadratureKind, dof: usize) -> Result<Self> {
        let (weights_1d, weights_2d) = match kind {
            QuadratureKind::Simpson => (simpson_weights_1d(dof)?, simpson_weights_2d(dof)?),
            QuadratureKind::Trapezoid => (trapezoid_weights_1d(dof)?, trapezoid_weights_2d(dof)?),
        };
        Ok(Self { kind, weights_2d, weights_1d })
    }

    pub fn dof(&self) -> usize {
        self.weights_1d.len()
    }
}

/// Composite Simpson weights on `n` points over `[0,1]`: `(1/(3(n-1)))·[1,4,2,…,4,1]`.
pub fn simpson_weights_1d(n: usize) -> Result<Array1<f64>> {
    if n < 3 {
        return Err(Error::InvalidParameter(format!(
            "Simpson needs at least 3 points, got {n}"
        )));
    }
    if n % 2 == 0 {
        return Err(Error::SimpsonEvenPoints(n));
    }
    let scale = 1.0 / (3.0 * (n as f64 - 1.0));
    let mut w = Array1::zeros(n);
    for k in 0..n {
        w[k] = scale
            * if k == 0 || k == n - 1 {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
    }
    Ok(w)
}

/// Double Simpson weights: outer product of the 1D pattern with prefactor
/// `1/(9(DOF-1)²)`.
pub fn simpson_weights_2d(dof: usize) -> Result<Array2<f64>> {
    let w1 = simpson_weights_1d(dof)?;
    Ok(outer(&w1, &w1))
}

/// Composite trapezoid weights on `n` points over `[0,1]`.
pub fn trapezoid_weights_1d(n: usize) -> Result<Array1<f64>> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "trapezoid needs at least 2 points, got {n}"
        )));
    }
    let scale = 1.0 / (n as f64 - 1.0);
    let mut w = Array1::from_elem(n, scale);
    w[0] = 0.5 * scale;
    w[n - 1] = 0.5 * scale;
    Ok(w)
}

/// Tensor-product trapezoid weights for even or odd grids.
pub fn trapezoid_weights_2d(dof: usize) -> Result<Array2<f64>> {
    let w1 = trapezoid_weights_1d(dof)?;
    Ok(outer(&w1, &w1))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[[i, j]] = a[i] * b[j];
        }
    }
    out
}

/// Quadrature weights for face-staggered gradients. An x-face sits between
/// horizontally adjacent nodes: its weight is the cell width `h` times the
/// rule's 1D weight across y (and symmetrically for y-faces). The last
/// column (row) is zero: that stencil output reads the ghost ring and
/// carries no face. Each set sums to the domain area.
pub fn face_weights(rule: &QuadratureRule) -> (Array2<f64>, Array2<f64>) {
    let n = rule.dof();
    let h = 1.0 / (n as f64 - 1.0);
    let mut wx = Array2::<f64>::zeros((n, n));
    let mut wy = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if j + 1 < n {
                wx[[i, j]] = rule.weights_1d[i] * h;
            }
            if i + 1 < n {
                wy[[i, j]] = rule.weights_1d[j] * h;
            }
        }
    }
    (wx, wy)
}

/// Weighted sum `Σ W_{j,k} I_{j,k}` over the domain.
pub fn integrate_2d(rule: &QuadratureRule, field: &ScalarField2D) -> Result<f64> {
    let v = field.values();
    if v.dim() != rule.weights_2d.dim() {
        return Err(Error::ShapeMismatch(format!(
            "field {:?} vs weights {:?}",
            v.dim(),
            rule.weights_2d.dim()
        )));
    }
    Ok(rule
        .weights_2d
        .iter()
        .zip(v.iter())
        .map(|(w, f)| w * f)
        .sum())
}

/// Weighted sum `Σ w_j e_j` along one edge.
pub fn integrate_boundary(rule: &QuadratureRule, edge_values: &Array1<f64>) -> Result<f64> {
    if edge_values.len() != rule.weights_1d.len() {
        return Err(Error::ShapeMismatch(format!(
            "edge has {} values, weights have {}",
            edge_values.len(),
            rule.weights_1d.len()
        )));
    }
    Ok(rule
        .weights_1d
        .iter()
        .zip(edge_values.iter())
        .map(|(w, e)| w * e)
        .sum())
}
