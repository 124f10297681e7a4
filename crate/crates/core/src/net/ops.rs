//! Forward and backward kernels for the differentiable operation set.
//!
//! All tensors are `[N, C, H, W]` in f64. Convolution is 3×3 correlation
//! with stride 1 and implicit zero padding 1, so spatial size is preserved.
//! Every backward here is the exact adjoint of its forward; the graph module
//! wires them together.

use ndarray::{s, Array1, Array4, ArrayView4};

use crate::error::{Error, Result};

/// One kernel row applied along a pair of rows:
/// `dst[j] += c[0]·src[j-1] + c[1]·src[j] + c[2]·src[j+1]` with implicit
/// zeros beyond the ends.
#[inline]
fn row_conv3(dst: &mut [f64], src: &[f64], c: [f64; 3]) {
    let w = dst.len();
    debug_assert_eq!(w, src.len());
    if w == 1 {
        dst[0] += c[1] * src[0];
        return;
    }
    dst[0] += c[1] * src[0] + c[2] * src[1];
    dst[w - 1] += c[0] * src[w - 2] + c[1] * src[w - 1];
    let (c0, c1, c2) = (c[0], c[1], c[2]);
    // Windows of three source cells feed the interior in one pass.
    for (d, s) in dst[1..w - 1].iter_mut().zip(src.windows(3)) {
        *d += c0 * s[0] + c1 * s[1] + c2 * s[2];
    }
}

/// `Σ_j a[j] · b[j + dj]` over the valid overlap of two equal-length rows.
#[inline]
fn row_dot(a: &[f64], b: &[f64], dj: isize) -> f64 {
    let w = a.len();
    let j_lo = (-dj).max(0) as usize;
    let j_hi = (w as isize - dj.max(0)) as usize;
    if j_lo >= j_hi {
        return 0.0;
    }
    let bs = &b[(j_lo as isize + dj) as usize..(j_hi as isize + dj) as usize];
    a[j_lo..j_hi]
        .iter()
        .zip(bs.iter())
        .map(|(x, y)| x * y)
        .sum()
}

/// Channel-summed 3×3 correlation plus bias. `w` is `[C_out, C_in, 3, 3]`.
pub fn conv2d_forward(
    x: &ArrayView4<'_, f64>,
    w: &ArrayView4<'_, f64>,
    b: &Array1<f64>,
) -> Result<Array4<f64>> {
    let (n, c_in, h, wd) = x.dim();
    let (c_out, wc_in, kh, kw) = w.dim();
    if wc_in != c_in || kh != 3 || kw != 3 || b.len() != c_out {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: input {:?} filters {:?} bias {}",
            x.dim(),
            w.dim(),
            b.len()
        )));
    }
    let mut out = Array4::<f64>::from_elem((n, c_out, h, wd), 0.0);
    let xs = x.as_standard_layout();
    let xf = xs.as_slice().expect("standard layout");
    let of = out.as_slice_mut().expect("standard layout");
    let plane = h * wd;
    for in_ in 0..n {
        for co in 0..c_out {
            let o_base = (in_ * c_out + co) * plane;
            of[o_base..o_base + plane].fill(b[co]);
            for ci in 0..c_in {
                let x_base = (in_ * c_in + ci) * plane;
                for a in 0..3usize {
                    let di = a as isize - 1;
                    let row_c = [w[[co, ci, a, 0]], w[[co, ci, a, 1]], w[[co, ci, a, 2]]];
                    if row_c == [0.0; 3] {
                        continue;
                    }
                    let i_lo = (-di).max(0) as usize;
                    let i_hi = (h as isize - di.max(0)) as usize;
                    for i in i_lo..i_hi {
                        let xi = (i as isize + di) as usize;
                        let (dst, src) = (o_base + i * wd, x_base + xi * wd);
                        row_conv3(&mut of[dst..dst + wd], &xf[src..src + wd], row_c);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of the conv output w.r.t. its input: the exact scatter of the
/// forward taps (full correlation with the 180°-rotated kernel).
pub fn conv2d_backward_input(w: &ArrayView4<'_, f64>, cot: &ArrayView4<'_, f64>) -> Array4<f64> {
    let (c_out, c_in, _, _) = w.dim();
    let (n, _, h, wd) = cot.dim();
    let mut dx = Array4::<f64>::zeros((n, c_in, h, wd));
    let gs = cot.as_standard_layout();
    let gf = gs.as_slice().expect("standard layout");
    let df = dx.as_slice_mut().expect("standard layout");
    let plane = h * wd;
    for in_ in 0..n {
        for ci in 0..c_in {
            let d_base = (in_ * c_in + ci) * plane;
            for co in 0..c_out {
                let g_base = (in_ * c_out + co) * plane;
                for a in 0..3usize {
                    let di = a as isize - 1;
                    // dx[p][q] += w[a][b]·g[p-di][q-dj]: reversed row taps.
                    let row_c = [w[[co, ci, a, 2]], w[[co, ci, a, 1]], w[[co, ci, a, 0]]];
                    if row_c == [0.0; 3] {
                        continue;
                    }
                    let p_lo = di.max(0) as usize;
                    let p_hi = (h as isize + di.min(0)) as usize;
                    for p in p_lo..p_hi {
                        let gi = (p as isize - di) as usize;
                        let (dst, src) = (d_base + p * wd, g_base + gi * wd);
                        row_conv3(&mut df[dst..dst + wd], &gf[src..src + wd], row_c);
                    }
                }
            }
        }
    }
    dx
}

pub fn conv2d_backward_weight(x: &ArrayView4<'_, f64>, cot: &ArrayView4<'_, f64>) -> Array4<f64> {
    let (n, c_in, h, wd) = x.dim();
    let (_, c_out, _, _) = cot.dim();
    let mut dw = Array4::<f64>::zeros((c_out, c_in, 3, 3));
    let xs = x.as_standard_layout();
    let xf = xs.as_slice().expect("standard layout");
    let gs = cot.as_standard_layout();
    let gf = gs.as_slice().expect("standard layout");
    let plane = h * wd;
    for in_ in 0..n {
        for co in 0..c_out {
            let g_base = (in_ * c_out + co) * plane;
            for ci in 0..c_in {
                let x_base = (in_ * c_in + ci) * plane;
                for a in 0..3usize {
                    let di = a as isize - 1;
                    let i_lo = (-di).max(0) as usize;
                    let i_hi = (h as isize - di.max(0)) as usize;
                    let mut acc = [0.0; 3];
                    for i in i_lo..i_hi {
                        let xi = (i as isize + di) as usize;
                        let g_row = &gf[g_base + i * wd..g_base + i * wd + wd];
                        let x_row = &xf[x_base + xi * wd..x_base + xi * wd + wd];
                        acc[0] += row_dot(g_row, x_row, -1);
                        acc[1] += row_dot(g_row, x_row, 0);
                        acc[2] += row_dot(g_row, x_row, 1);
                    }
                    for bb in 0..3 {
                        dw[[co, ci, a, bb]] += acc[bb];
                    }
                }
            }
        }
    }
    dw
}

pub fn conv2d_backward_bias(cot: &ArrayView4<'_, f64>) -> Array1<f64> {
    let (n, c_out, _, _) = cot.dim();
    let mut db = Array1::<f64>::zeros(c_out);
    for in_ in 0..n {
        for co in 0..c_out {
            db[co] += cot.slice(s![in_, co, .., ..]).sum();
        }
    }
    db
}

/// `max(x, 0) + slope·min(x, 0)`; the subgradient at 0 is the positive-side
/// slope. `slope = 0` is plain ReLU.
pub fn leaky_relu_forward(x: &ArrayView4<'_, f64>, slope: f64) -> Array4<f64> {
    x.mapv(|v| if v >= 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(
    x: &ArrayView4<'_, f64>,
    cot: &ArrayView4<'_, f64>,
    slope: f64,
) -> Array4<f64> {
    let mut dx = cot.to_owned();
    dx.zip_mut_with(x, |d, v| {
        if *v < 0.0 {
            *d *= slope;
        }
    });
    dx
}

/// 2×2 max pooling with stride 2; ties resolve to the first maximum in scan
/// order, and the stored argmax routes the gradient to exactly one cell.
pub fn maxpool2_forward(x: &ArrayView4<'_, f64>) -> Result<(Array4<f64>, Vec<u8>)> {
    let (n, c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "maxpool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array4::<f64>::zeros((n, c, ho, wo));
    let mut argmax = vec![0u8; n * c * ho * wo];
    let mut k = 0;
    for in_ in 0..n {
        for ci in 0..c {
            let xv = x.slice(s![in_, ci, .., ..]);
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = xv[[2 * i, 2 * j]];
                    let mut arg = 0u8;
                    for (t, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let v = xv[[2 * i + di, 2 * j + dj]];
                        if v > best {
                            best = v;
                            arg = t as u8;
                        }
                    }
                    out[[in_, ci, i, j]] = best;
                    argmax[k] = arg;
                    k += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward(
    cot: &ArrayView4<'_, f64>,
    argmax: &[u8],
    input_dim: (usize, usize, usize, usize),
) -> Array4<f64> {
    let (n, c, ho, wo) = cot.dim();
    let mut dx = Array4::<f64>::zeros(input_dim);
    let mut k = 0;
    for in_ in 0..n {
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let arg = argmax[k] as usize;
                    k += 1;
                    let (di, dj) = (arg / 2, arg % 2);
                    dx[[in_, ci, 2 * i + di, 2 * j + dj]] += cot[[in_, ci, i, j]];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2_forward(x: &ArrayView4<'_, f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
    for in_ in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[in_, ci, i, j]];
                    out[[in_, ci, 2 * i, 2 * j]] = v;
                    out[[in_, ci, 2 * i, 2 * j + 1]] = v;
                    out[[in_, ci, 2 * i + 1, 2 * j]] = v;
                    out[[in_, ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(cot: &ArrayView4<'_, f64>) -> Array4<f64> {
    let (n, c, h2, w2) = cot.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    for in_ in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    dx[[in_, ci, i, j]] = cot[[in_, ci, 2 * i, 2 * j]]
                        + cot[[in_, ci, 2 * i, 2 * j + 1]]
                        + cot[[in_, ci, 2 * i + 1, 2 * j]]
                        + cot[[in_, ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics over (N, H, W); the variance is biased, as
/// used for normalization.
pub fn batch_moments(x: &ArrayView4<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let (n, c, h, w) = x.dim();
    let m = (n * h * w) as f64;
    let mut mean = Array1::<f64>::zeros(c);
    let mut var = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let lane = x.slice(s![.., ci, .., ..]);
        let mu = lane.sum() / m;
        mean[ci] = mu;
        var[ci] = lane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
    }
    (mean, var)
}

/// Normalize with the given per-channel moments and apply the affine pair:
/// `y = γ·(x - mean)/√(var + ε) + β`. Returns `(y, xhat, inv_std)`.
pub fn batchnorm_apply(
    x: &ArrayView4<'_, f64>,
    mean: &Array1<f64>,
    var: &Array1<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (n, c, h, w) = x.dim();
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let mut xhat = Array4::<f64>::zeros((n, c, h, w));
    let mut y = Array4::<f64>::zeros((n, c, h, w));
    for ci in 0..c {
        let (mu, is, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
        let lane = x.slice(s![.., ci, .., ..]);
        let mut xh = xhat.slice_mut(s![.., ci, .., ..]);
        let mut yl = y.slice_mut(s![.., ci, .., ..]);
        ndarray::Zip::from(&mut xh)
            .and(&mut yl)
            .and(&lane)
            .for_each(|xh, yl, v| {
                let t = (v - mu) * is;
                *xh = t;
                *yl = g * t + b;
            });
    }
    (y, xhat, inv_std)
}

/// Backward through train-mode batch normalization (the batch statistics are
/// themselves functions of the input). Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward_train(
    cot: &ArrayView4<'_, f64>,
    xhat: &Array4<f64>,
    inv_std: &Array1<f64>,
    gamma: &Array1<f64>,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let (n, c, h, w) = cot.dim();
    let m = (n * h * w) as f64;
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    let mut dgamma = Array1::<f64>::zeros(c);
    let mut dbeta = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let g = cot.slice(s![.., ci, .., ..]);
        let xh = xhat.slice(s![.., ci, .., ..]);
        let sum_g: f64 = g.sum();
        let sum_gx: f64 = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
        dgamma[ci] = sum_gx;
        dbeta[ci] = sum_g;
        let k = gamma[ci] * inv_std[ci] / m;
        let mut d = dx.slice_mut(s![.., ci, .., ..]);
        ndarray::Zip::from(&mut d).and(&g).and(&xh).for_each(|d, gv, xv| {
            *d = k * (m * gv - sum_g - xv * sum_gx);
        });
    }
    (dx, dgamma, dbeta)
}

/// Backward through eval-mode batch normalization (fixed running moments, a
/// per-channel affine map).
pub fn batchnorm_backward_eval(
    cot: &ArrayView4<'_, f64>,
    xhat: &Array4<f64>,
    inv_std: &Array1<f64>,
    gamma: &Array1<f64>,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let (n, c, h, w) = cot.dim();
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    let mut dgamma = Array1::<f64>::zeros(c);
    let mut dbeta = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let g = cot.slice(s![.., ci, .., ..]);
        let xh = xhat.slice(s![.., ci, .., ..]);
        dgamma[ci] = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
        dbeta[ci] = g.sum();
        let k = gamma[ci] * inv_std[ci];
        let mut d = dx.slice_mut(s![.., ci, .., ..]);
        ndarray::Zip::from(&mut d).and(&g).for_each(|d, gv| *d = k * gv);
    }
    (dx, dgamma, dbeta)
}

/// Concatenate along the channel axis.
pub fn concat_channels(a: &ArrayView4<'_, f64>, b: &ArrayView4<'_, f64>) -> Result<Array4<f64>> {
    let (na, ca, ha, wa) = a.dim();
    let (nb, cb, hb, wb) = b.dim();
    if na != nb || ha != hb || wa != wb {
        return Err(Error::ShapeMismatch(format!(
            "concat: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mut out = Array4::<f64>::zeros((na, ca + cb, ha, wa));
    out.slice_mut(s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(s![.., ca.., .., ..]).assign(b);
    Ok(out)
}

/// Zero-pad bottom/right up to `size`×`size`.
pub fn zero_pad_to(x: &ArrayView4<'_, f64>, size: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f64>::zeros((n, c, size, size));
    out.slice_mut(s![.., .., ..h, ..w]).assign(x);
    out
}

/// Top-left crop down to `size`×`size`.
pub fn crop_to(x: &ArrayView4<'_, f64>, size: usize) -> Array4<f64> {
    x.slice(s![.., .., ..size, ..size]).to_owned()
}
