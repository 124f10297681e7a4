//! Fixed, non-trainable 3×3 convolution kernels that discretize differential
//! operators, plus their exact adjoints.
//!
//! Convolution uses the correlation convention (no kernel flip):
//! `out[i,j] = scale · Σ_{a,b} weights[a,b] · padded[i+a, j+b]`. All kernels
//! here are symmetric or antisymmetric, so the convention only fixes the sign
//! bookkeeping of the gradient kernels; the postcondition tests pin it
//! (`grad_x` of `u = x` is `+1`). Row index is y, column index is x.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// Integer-pattern 3×3 stencil with a separate scale factor so exactness
/// tests stay independent of the grid spacing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilKernel {
    pub weights: [[f64; 3]; 3],
    pub scale: f64,
}

/// The 5-point Laplacian: `(1/h²)·[[0,1,0],[1,-4,1],[0,1,0]]`.
pub fn laplacian_kernel(grid: GridSpec) -> StencilKernel {
    let h = grid.spacing();
    StencilKernel {
        weights: [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]],
        scale: 1.0 / (h * h),
    }
}

/// Central difference in x: `(1/2h)·[[0,0,0],[-1,0,1],[0,0,0]]`.
pub fn grad_x_kernel(grid: GridSpec) -> StencilKernel {
    let h = grid.spacing();
    StencilKernel {
        weights: [[0.0, 0.0, 0.0], [-1.0, 0.0, 1.0], [0.0, 0.0, 0.0]],
        scale: 1.0 / (2.0 * h),
    }
}

/// Central difference in y: `(1/2h)·[[0,-1,0],[0,0,0],[0,1,0]]`.
pub fn grad_y_kernel(grid: GridSpec) -> StencilKernel {
    let h = grid.spacing();
    StencilKernel {
        weights: [[0.0, -1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        scale: 1.0 / (2.0 * h),
    }
}

/// Forward difference in x, `(u[i][j+1] - u[i][j])/h`: the x-face gradient
/// of the cell to the right of node `(i, j)`. Output `(i, DOF-1)` reads the
/// ghost column and is meaningful only under a zero quadrature weight.
pub fn grad_x_forward_kernel(grid: GridSpec) -> StencilKernel {
    let h = grid.spacing();
    StencilKernel {
        weights: [[0.0, 0.0, 0.0], [0.0, -1.0, 1.0], [0.0, 0.0, 0.0]],
        scale: 1.0 / h,
    }
}

/// Forward difference in y, `(u[i+1][j] - u[i][j])/h`: the y-face gradient
/// of the cell above node `(i, j)`.
pub fn grad_y_forward_kernel(grid: GridSpec) -> StencilKernel {
    let h = grid.spacing();
    StencilKernel {
        weights: [[0.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 1.0, 0.0]],
        scale: 1.0 / h,
    }
}

/// Valid correlation of a ghost-padded `(H+2)×(W+2)` field down to `H×W`.
pub fn apply_stencil(kernel: &StencilKernel, padded: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (ph, pw) = padded.dim();
    if ph < 3 || pw < 3 {
        return Err(Error::ShapeMismatch(format!(
            "padded field must be at least 3x3, got {ph}x{pw}"
        )));
    }
    let (h, w) = (ph - 2, pw - 2);
    let mut out = Array2::<f64>::zeros((h, w));
    for a in 0..3 {
        for b in 0..3 {
            let c = kernel.scale * kernel.weights[a][b];
            if c == 0.0 {
                continue;
            }
            for i in 0..h {
                let src = padded.row(i + a);
                let src = &src.as_slice().expect("padded row is contiguous")[b..b + w];
                let mut dst = out.row_mut(i);
                let dst = dst.as_slice_mut().expect("output row is contiguous");
                for j in 0..w {
                    dst[j] += c * src[j];
                }
            }
        }
    }
    Ok(out)
}

/// Transpose of [`apply_stencil`] as a linear map: scatters an `H×W`
/// cotangent back onto the `(H+2)×(W+2)` padded layout, so that
/// `⟨apply(k,u), w⟩ = ⟨u, adjoint(k,w)⟩` exactly.
pub fn stencil_adjoint(
    kernel: &StencilKernel,
    cotangent: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let (h, w) = cotangent.dim();
    if h == 0 || w == 0 {
        return Err(Error::ShapeMismatch("empty cotangent".into()));
    }
    let mut out = Array2::<f64>::zeros((h + 2, w + 2));
    for a in 0..3 {
        for b in 0..3 {
            let c = kernel.scale * kernel.weights[a][b];
            if c == 0.0 {
                continue;
            }
            for i in 0..h {
                let src = cotangent.row(i);
                let src = src.as_slice().expect("cotangent row is contiguous");
                let mut dst = out.row_mut(i + a);
                let dst = dst.as_slice_mut().expect("output row is contiguous");
                for j in 0..w {
                    dst[j + b] += c * src[j];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Sample f over the padded node layout: node (i, j) of the padded field
    /// sits at (x, y) = ((j-1)·h, (i-1)·h), the ghost ring one step outside.
    fn padded_from_fn(dof: usize, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
        let h = 1.0 / (dof as f64 - 1.0);
        Array2::from_shape_fn((dof + 2, dof + 2), |(i, j)| {
            f((j as f64 - 1.0) * h, (i as f64 - 1.0) * h)
        })
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Dense matrix representation of `apply_stencil`, assembled
    /// independently entry by entry.
    fn dense_stencil_matrix(kernel: &StencilKernel, dof: usize) -> Array2<f64> {
        let p = dof + 2;
        let mut m = Array2::<f64>::zeros((dof * dof, p * p));
        for i in 0..dof {
            for j in 0..dof {
                for a in 0..3 {
                    for b in 0..3 {
                        m[[i * dof + j, (i + a) * p + (j + b)]] +=
                            kernel.scale * kernel.weights[a][b];
                    }
                }
            }
        }
        m
    }

    #[test]
    fn laplacian_of_constant_is_zero() {
        let grid = GridSpec::new(5).unwrap();
        let k = laplacian_kernel(grid);
        let padded = Array2::from_elem((7, 7), 4.2);
        let out = apply_stencil(&k, padded.view()).unwrap();
        for v in out.iter() {
            assert!(v.abs() <= 1e-9, "{v}");
        }
    }

    #[test]
    fn laplacian_exact_on_quadratic() {
        let grid = GridSpec::new(9).unwrap();
        let k = laplacian_kernel(grid);
        let padded = padded_from_fn(9, |x, y| x * x + y * y);
        let out = apply_stencil(&k, padded.view()).unwrap();
        for v in out.iter() {
            assert!((v - 4.0).abs() <= 1e-9, "{v}");
        }
    }

    #[test]
    fn stencils_match_dense_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dof in [5usize, 9, 17] {
            let grid = GridSpec::new(dof).unwrap();
            for k in [laplacian_kernel(grid), grad_x_kernel(grid), grad_y_kernel(grid)] {
                let padded = random_matrix(&mut rng, dof + 2, dof + 2);
                let out = apply_stencil(&k, padded.view()).unwrap();
                let m = dense_stencil_matrix(&k, dof);
                let flat = Array2::from_shape_vec(
                    (padded.len(), 1),
                    padded.iter().copied().collect(),
                )
                .unwrap();
                let oracle = m.dot(&flat);
                let scale = out.iter().map(|v| v.abs()).fold(1.0_f64, f64::max);
                for (i, v) in out.iter().enumerate() {
                    let rel = (v - oracle[[i, 0]]).abs() / scale;
                    assert!(rel <= 1e-12, "dof {dof}: rel error {rel}");
                }
            }
        }
    }

    #[test]
    fn identity_kernel_recovers_interior() {
        let k = StencilKernel {
            weights: [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]],
            scale: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let padded = random_matrix(&mut rng, 7, 7);
        let out = apply_stencil(&k, padded.view()).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(out[[i, j]], padded[[i + 1, j + 1]]);
            }
        }
    }

    #[test]
    fn worked_three_by_three_correlation() {
        // 5x5 input and integer filter; expected values recomputed with the
        // correlation postcondition (independent loop below).
        let input = array![
            [6.0, 0.0, 3.0, 2.0, 5.0],
            [5.0, 3.0, 1.0, 0.0, 6.0],
            [2.0, 0.0, 1.0, 1.0, 1.0],
            [4.0, 1.0, 2.0, 1.0, 4.0],
            [1.0, 2.0, 1.0, 1.0, 9.0]
        ];
        let k = StencilKernel {
            weights: [[1.0, 4.0, 0.0], [0.0, 1.0, 2.0], [1.0, 0.0, 1.0]],
            scale: 1.0,
        };
        let out = apply_stencil(&k, input.view()).unwrap();
        let mut oracle = Array2::<f64>::zeros((3, 3));
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        acc += k.weights[a][b] * input[[i + a, j + b]];
                    }
                }
                oracle[[i, j]] = acc;
            }
        }
        assert_eq!(out, oracle);
        assert_eq!(out[[2, 2]], 24.0);
        assert_eq!(out[[0, 0]], 14.0);
    }

    #[test]
    fn apply_is_linear() {
        let grid = GridSpec::new(7).unwrap();
        let k = laplacian_kernel(grid);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_matrix(&mut rng, 9, 9);
        let v = random_matrix(&mut rng, 9, 9);
        let (a, b) = (1.7, -0.3);
        let combo = apply_stencil(&k, (a * &u + b * &v).view()).unwrap();
        let split =
            a * &apply_stencil(&k, u.view()).unwrap() + b * &apply_stencil(&k, v.view()).unwrap();
        for (x, y) in combo.iter().zip(split.iter()) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn grad_kernels_exact_on_polynomials() {
        let grid = GridSpec::new(9).unwrap();
        let gx = grad_x_kernel(grid);
        let gy = grad_y_kernel(grid);

        let constant = Array2::from_elem((11, 11), 2.5);
        for v in apply_stencil(&gx, constant.view()).unwrap().iter() {
            assert!(v.abs() <= 1e-12);
        }

        let ux = padded_from_fn(9, |x, _| x);
        for v in apply_stencil(&gx, ux.view()).unwrap().iter() {
            assert!((v - 1.0).abs() <= 1e-12, "{v}");
        }
        let uy = padded_from_fn(9, |_, y| y);
        for v in apply_stencil(&gy, uy.view()).unwrap().iter() {
            assert!((v - 1.0).abs() <= 1e-12, "{v}");
        }

        // Central difference of x² at x = 0.5 is exactly 1.
        let uxx = padded_from_fn(9, |x, y| x * x + 0.0 * y);
        let out = apply_stencil(&gx, uxx.view()).unwrap();
        assert!((out[[3, 4]] - 1.0).abs() <= 1e-12); // node x = 0.5 on a 9-point grid
    }

    #[test]
    fn adjoint_identity_holds() {
        let grid = GridSpec::new(7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in [laplacian_kernel(grid), grad_x_kernel(grid), grad_y_kernel(grid)] {
            let u = random_matrix(&mut rng, 9, 9);
            let w = random_matrix(&mut rng, 7, 7);
            let lhs: f64 = apply_stencil(&k, u.view())
                .unwrap()
                .iter()
                .zip(w.iter())
                .map(|(a, b)| a * b)
                .sum();
            let rhs: f64 = u
                .iter()
                .zip(stencil_adjoint(&k, w.view()).unwrap().iter())
                .map(|(a, b)| a * b)
                .sum();
            assert!(
                (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0),
                "{lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn adjoint_scatters_identity_kernel_to_interior() {
        let k = StencilKernel {
            weights: [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]],
            scale: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = random_matrix(&mut rng, 5, 5);
        let adj = stencil_adjoint(&k, w.view()).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let on_ring = i == 0 || j == 0 || i == 6 || j == 6;
                if on_ring {
                    assert_eq!(adj[[i, j]], 0.0);
                } else {
                    assert_eq!(adj[[i, j]], w[[i - 1, j - 1]]);
                }
            }
        }
    }

    #[test]
    fn laplacian_adjoint_is_self_adjoint() {
        // For the symmetric 5-point kernel, the adjoint equals the kernel
        // applied to the zero-extended cotangent.
        let grid = GridSpec::new(7).unwrap();
        let k = laplacian_kernel(grid);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = random_matrix(&mut rng, 7, 7);
        let adj = stencil_adjoint(&k, w.view()).unwrap();

        let mut extended = Array2::<f64>::zeros((11, 11));
        extended.slice_mut(ndarray::s![2..9, 2..9]).assign(&w);
        let via_apply = apply_stencil(&k, extended.view()).unwrap();
        for (a, b) in adj.iter().zip(via_apply.iter()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}
