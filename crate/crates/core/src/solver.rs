//! Ground-truth finite-difference solver and discrete-energy-minimizer
//! oracle.
//!
//! `fd_solve` solves the 5-point discretization of `Δu = f` with Dirichlet
//! values eliminated, via a banded Cholesky factorization of the
//! sign-normalized SPD system `h²(-Δ_h) u = -h² f + boundary terms`.
//!
//! `discrete_energy_minimizer` minimizes the Simpson-discretized energy
//! `Ê(U) = Σ W ∘ (½‖∇U‖² + U·F)` over the interior nodes with the boundary
//! held at `g`; it is a distinct oracle from `fd_solve` because the
//! quadrature-weighted energy and the 5-point strong form are different
//! discretizations of the same problem.

use ndarray::{s, Array2, ArrayView2};

use crate::boundary::{build_mask_channel, ghost_pad_replicate, overwrite_border, BoundarySpec};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField2D};
use crate::quadrature::{face_weights, QuadratureRule};
use crate::stencil::{apply_stencil, grad_x_forward_kernel, grad_y_forward_kernel, stencil_adjoint};

/// Lower-band Cholesky factor of a symmetric positive definite band matrix.
#[derive(Debug, Clone)]
struct BandCholesky {
    n: usize,
    width: usize,
    /// `band[[i, d]] = L[i, i-d]` for `0 <= d <= width`.
    band: Array2<f64>,
}

impl BandCholesky {
    /// Factor a band matrix given by `a(i, j)` for `|i - j| <= width`.
    fn factor(n: usize, width: usize, a: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut band = Array2::<f64>::zeros((n, width + 1));
        for i in 0..n {
            for d in (0..=width.min(i)).rev() {
                let j = i - d;
                let mut sum = a(i, j);
                let kmin = i.saturating_sub(width).max(j.saturating_sub(width));
                for k in kmin..j {
                    sum -= band[[i, i - k]] * band[[j, j - k]];
                }
                if d == 0 {
                    if sum <= 0.0 {
                        return Err(Error::InvalidParameter(
                            "matrix is not positive definite".into(),
                        ));
                    }
                    band[[i, 0]] = sum.sqrt();
                } else {
                    band[[i, d]] = sum / band[[j, 0]];
                }
            }
        }
        Ok(Self { n, width, band })
    }

    /// Solve `L Lᵀ x = b` in place.
    fn solve(&self, b: &mut [f64]) {
        let (n, w) = (self.n, self.width);
        for i in 0..n {
            let mut sum = b[i];
            for k in i.saturating_sub(w)..i {
                sum -= self.band[[i, i - k]] * b[k];
            }
            b[i] = sum / self.band[[i, 0]];
        }
        for i in (0..n).rev() {
            let mut sum = b[i];
            let kmax = (i + w).min(n - 1);
            for k in i + 1..=kmax {
                sum -= self.band[[k, k - i]] * b[k];
            }
            b[i] = sum / self.band[[i, 0]];
        }
    }
}

/// Factored interior system for all-Dirichlet problems on one grid; the
/// factorization is reused across right-hand sides (all samples of a case).
#[derive(Debug, Clone)]
pub struct DirichletSolver {
    grid: GridSpec,
    chol: BandCholesky,
}

impl DirichletSolver {
    pub fn new(grid: GridSpec) -> Result<Self> {
        let m = grid.dof() - 2;
        let n = m * m;
        // h²(-Δ_h): 4 on the diagonal, -1 for interior neighbors.
        let a = |i: usize, j: usize| -> f64 {
            if i == j {
                4.0
            } else {
                let (ri, ci) = (i / m, i % m);
                let (rj, cj) = (j / m, j % m);
                let horizontal = ri == rj && ci.abs_diff(cj) == 1;
                let vertical = ci == cj && ri.abs_diff(rj) == 1;
                if horizontal || vertical {
                    -1.0
                } else {
                    0.0
                }
            }
        };
        let chol = BandCholesky::factor(n, m, a)?;
        Ok(Self { grid, chol })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    /// Solve `Δ_h U = f` with boundary values taken from the mask's border.
    pub fn solve_masked(
        &self,
        f: ArrayView2<'_, f64>,
        mask: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let dof = self.grid.dof();
        if f.dim() != (dof, dof) || mask.dim() != (dof, dof) {
            return Err(Error::ShapeMismatch(format!(
                "solver grid is {dof}, fields are {:?}/{:?}",
                f.dim(),
                mask.dim()
            )));
        }
        if !f.iter().all(|v| v.is_finite()) || !mask.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("fd_solve input"));
        }
        let h = self.grid.spacing();
        let m = dof - 2;
        let mut rhs = vec![0.0; m * m];
        for i in 1..dof - 1 {
            for j in 1..dof - 1 {
                let mut b = -h * h * f[[i, j]];
                if i == 1 {
                    b += mask[[0, j]];
                }
                if i == dof - 2 {
                    b += mask[[dof - 1, j]];
                }
                if j == 1 {
                    b += mask[[i, 0]];
                }
                if j == dof - 2 {
                    b += mask[[i, dof - 1]];
                }
                rhs[(i - 1) * m + (j - 1)] = b;
            }
        }
        self.chol.solve(&mut rhs);

        let mut u = Array2::<f64>::zeros((dof, dof));
        for i in 1..dof - 1 {
            for j in 1..dof - 1 {
                u[[i, j]] = rhs[(i - 1) * m + (j - 1)];
            }
        }
        overwrite_border(&mut u.view_mut(), &mask);
        Ok(u)
    }
}

/// Solve `Δ_h U = f` on `grid` with Dirichlet boundary values from `spec`.
/// The returned field carries `g` on the boundary exactly and satisfies the
/// interior equations to direct-solve accuracy.
pub fn fd_solve(f: &ScalarField2D, spec: &BoundarySpec, grid: GridSpec) -> Result<ScalarField2D> {
    if !spec.all_dirichlet() {
        return Err(Error::UnsupportedBoundary(
            "fd_solve requires Dirichlet conditions on all edges".into(),
        ));
    }
    let mask = build_mask_channel(spec, grid);
    let solver = DirichletSolver::new(grid)?;
    let u = solver.solve_masked(f.values().view(), mask.values.values().view())?;
    ScalarField2D::new(grid, u)
}

/// The discretized energy `Ê(U) = Σ ω ∘ ½‖∇U‖² + Σ W ∘ (U·F)` of a
/// boundary-enforced field. The gradient is evaluated on cell faces by
/// forward differences of the ghost-padded enforced field (the stencil's
/// last column/row reads the ghost ring and carries zero face weight), the
/// source term by the rule's full 2D node weights. Face gradients couple
/// adjacent nodes, so the quadratic form has no weakly penalized
/// checkerboard mode and its minimizer tracks the strong-form solution.
pub fn discrete_energy(
    u: ArrayView2<'_, f64>,
    f: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, f64>,
    grid: GridSpec,
    rule: &QuadratureRule,
) -> Result<f64> {
    let dof = grid.dof();
    if u.dim() != (dof, dof) || f.dim() != (dof, dof) || rule.weights_2d.dim() != (dof, dof) {
        return Err(Error::ShapeMismatch("energy fields must match the grid".into()));
    }
    let mut w = u.to_owned();
    overwrite_border(&mut w.view_mut(), &mask);
    let padded = ghost_pad_replicate(&w.view());
    let dx = apply_stencil(&grad_x_forward_kernel(grid), padded.view())?;
    let dy = apply_stencil(&grad_y_forward_kernel(grid), padded.view())?;
    let (wx, wy) = face_weights(rule);
    let mut acc = 0.0;
    for (((wx, dx), (wy, dy)), (wq, (uv, fv))) in wx
        .iter()
        .zip(dx.iter())
        .zip(wy.iter().zip(dy.iter()))
        .zip(rule.weights_2d.iter().zip(w.iter().zip(f.iter())))
    {
        acc += 0.5 * (wx * dx * dx + wy * dy * dy) + wq * uv * fv;
    }
    Ok(acc)
}

/// Gradient of [`discrete_energy`] with respect to the interior node values;
/// boundary entries are zero because enforcement replaces them.
pub fn discrete_energy_gradient(
    u: ArrayView2<'_, f64>,
    f: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, f64>,
    grid: GridSpec,
    rule: &QuadratureRule,
) -> Result<Array2<f64>> {
    let dof = grid.dof();
    let mut w = u.to_owned();
    overwrite_border(&mut w.view_mut(), &mask);
    let padded = ghost_pad_replicate(&w.view());
    let fxk = grad_x_forward_kernel(grid);
    let fyk = grad_y_forward_kernel(grid);
    let dx = apply_stencil(&fxk, padded.view())?;
    let dy = apply_stencil(&fyk, padded.view())?;
    let (wx, wy) = face_weights(rule);
    // dÊ/d(padded) through the face energies: adjoint of each difference
    // applied to ω∘d.
    let wdx = &wx * &dx;
    let wdy = &wy * &dy;
    let adj = stencil_adjoint(&fxk, wdx.view())? + stencil_adjoint(&fyk, wdy.view())?;
    // Ghost cells replicate enforced constants, so only the interior block
    // flows back; the border is enforced and receives no gradient.
    let mut grad = adj.slice(s![1..dof + 1, 1..dof + 1]).to_owned();
    grad += &(&rule.weights_2d * &f);
    for j in 0..dof {
        grad[[0, j]] = 0.0;
        grad[[dof - 1, j]] = 0.0;
    }
    for i in 0..dof {
        grad[[i, 0]] = 0.0;
        grad[[i, dof - 1]] = 0.0;
    }
    Ok(grad)
}

/// Exact minimizer of the discretized energy over the interior nodes with the
/// boundary fixed to `g`, by conjugate gradients on the (SPD) Hessian.
pub fn discrete_energy_minimizer(
    f: &ScalarField2D,
    spec: &BoundarySpec,
    grid: GridSpec,
    rule: &QuadratureRule,
) -> Result<ScalarField2D> {
    if !spec.all_dirichlet() {
        return Err(Error::UnsupportedBoundary(
            "energy minimizer requires Dirichlet conditions on all edges".into(),
        ));
    }
    let mask = build_mask_channel(spec, grid);
    let mask_v = mask.values.values().view();
    let dof = grid.dof();

    let grad_at = |interior: &Array2<f64>| -> Result<Array2<f64>> {
        discrete_energy_gradient(interior.view(), f.values().view(), mask_v, grid, rule)
    };

    // ∇Ê(U) = H·u + c on the interior; CG on H x = -c.
    let zero = Array2::<f64>::zeros((dof, dof));
    let c = grad_at(&zero)?;
    let hessian_apply = |v: &Array2<f64>| -> Result<Array2<f64>> { Ok(grad_at(v)? - &c) };

    let dot = |a: &Array2<f64>, b: &Array2<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    };

    let mut x = Array2::<f64>::zeros((dof, dof));
    let mut r = -&c;
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let rs0 = rs.max(f64::MIN_POSITIVE);
    let max_iters = 20 * dof * dof;
    for _ in 0..max_iters {
        if rs <= 1e-30 * rs0 {
            break;
        }
        let hp = hessian_apply(&p)?;
        let alpha = rs / dot(&p, &hp);
        if !alpha.is_finite() {
            return Err(Error::NonFinite("CG step in energy minimizer"));
        }
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &hp);
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs;
        p = &r + &(beta * &p);
        rs = rs_new;
    }

    let mut u = x;
    overwrite_border(&mut u.view_mut(), &mask_v);
    ScalarField2D::new(grid, u)
}
