//! Eager tape for reverse-mode differentiation over `[N, C, H, W]` tensors.
//!
//! Every builder computes its value immediately and records how to push a
//! cotangent back to its parents; `backward` replays the tape in reverse.
//! Values are plain f64 arrays, so fixed seeds give bit-identical forward
//! and backward passes.

use ndarray::{s, Array1, Array2, Array4};

use crate::boundary::{pad_mixed, pad_mixed_adjoint, BoundarySpec};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField2D};
use crate::stencil::{apply_stencil, stencil_adjoint, StencilKernel};

use super::ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf,
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId },
    LeakyRelu { input: NodeId, slope: f64 },
    MaxPool2 { input: NodeId, argmax: Vec<u8> },
    Upsample2 { input: NodeId },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array4<f64>,
        inv_std: Array1<f64>,
        train_stats: bool,
    },
    Dropout { input: NodeId, mask: Array4<f64> },
    Concat { a: NodeId, b: NodeId },
    ZeroPadTo { input: NodeId },
    CropTo { input: NodeId },
    /// Overwrite each sample's border pixels with its mask border; the border
    /// receives zero gradient.
    EnforceBc { input: NodeId },
    /// Replicate the outermost ring outward, `[N,1,H,W] -> [N,1,H+2,W+2]`.
    GhostPad { input: NodeId },
    /// Fixed-kernel valid correlation per sample, `[N,1,H+2,W+2] -> [N,1,H,W]`.
    Stencil { input: NodeId, kernel: StencilKernel },
    /// Mixed-type boundary padding per sample, one spec for the batch.
    PadMixed { input: NodeId, spec: BoundarySpec, grid: GridSpec },
    /// Drop the outermost ring: `[N,C,H,W] -> [N,C,H-2,W-2]`.
    CropInterior { input: NodeId },
    /// Zero the outermost pixel ring.
    ZeroBorder { input: NodeId },
    Square { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { input: NodeId, c: f64 },
    /// Elementwise product with a constant tensor.
    MulConst { input: NodeId, factor: Array4<f64> },
    /// Subtract a constant tensor.
    SubConst { input: NodeId },
    /// Per-sample weighted sum over (C, H, W) with a fixed `[H, W]` weight
    /// matrix; result is `[N, 1, 1, 1]`.
    WeightedSumPerSample { input: NodeId, weights: Array2<f64> },
    /// Per-sample `Σ x² / denom`; result is `[N, 1, 1, 1]`.
    PerSampleMeanSquare { input: NodeId, denom: f64 },
    /// Mean over the batch axis; result is `[1, 1, 1, 1]`.
    MeanOverBatch { input: NodeId },
}

struct Node {
    value: Array4<f64>,
    op: Op,
    needs_grad: bool,
}

/// The recorded forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Array4<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0, 0, 0]]
    }

    pub fn dim(&self, id: NodeId) -> (usize, usize, usize, usize) {
        self.nodes[id.0].value.dim()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Array4<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameter).
    pub fn leaf(&mut self, value: Array4<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input (no gradient tracked).
    pub fn constant(&mut self, value: Array4<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// 1D parameter carried as `[1, C, 1, 1]`.
    pub fn leaf_1d(&mut self, value: &Array1<f64>) -> NodeId {
        let c = value.len();
        let v = Array4::from_shape_vec((1, c, 1, 1), value.to_vec()).expect("shape");
        self.leaf(v)
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let b = as_1d(self.value(bias));
        let value = ops::conv2d_forward(&self.value(input).view(), &self.value(weight).view(), &b)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(value, Op::Conv2d { input, weight, bias }, needs))
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> NodeId {
        let value = ops::leaky_relu_forward(&self.value(input).view(), slope);
        let needs = self.needs(input);
        self.push(value, Op::LeakyRelu { input, slope }, needs)
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.leaky_relu(input, 0.0)
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (value, argmax) = ops::maxpool2_forward(&self.value(input).view())?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, needs))
    }

    pub fn upsample2(&mut self, input: NodeId) -> NodeId {
        let value = ops::upsample2_forward(&self.value(input).view());
        let needs = self.needs(input);
        self.push(value, Op::Upsample2 { input }, needs)
    }

    /// Batch normalization with the given moments (batch moments in train
    /// mode, running moments in eval mode). `train_stats` selects the
    /// backward formula.
    pub fn batchnorm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &Array1<f64>,
        var: &Array1<f64>,
        train_stats: bool,
    ) -> NodeId {
        let g = as_1d(self.value(gamma));
        let b = as_1d(self.value(beta));
        let (value, xhat, inv_std) = ops::batchnorm_apply(&self.value(input).view(), mean, var, &g, &b);
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train_stats },
            needs,
        )
    }

    /// Dropout with a caller-sampled mask whose kept entries carry `1/(1-p)`.
    pub fn dropout(&mut self, input: NodeId, mask: Array4<f64>) -> NodeId {
        let value = self.value(input) * &mask;
        let needs = self.needs(input);
        self.push(value, Op::Dropout { input, mask }, needs)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::concat_channels(&self.value(a).view(), &self.value(b).view())?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Concat { a, b }, needs))
    }

    pub fn zero_pad_to(&mut self, input: NodeId, size: usize) -> NodeId {
        let value = ops::zero_pad_to(&self.value(input).view(), size);
        let needs = self.needs(input);
        self.push(value, Op::ZeroPadTo { input }, needs)
    }

    pub fn crop_to(&mut self, input: NodeId, size: usize) -> NodeId {
        let value = ops::crop_to(&self.value(input).view(), size);
        let needs = self.needs(input);
        self.push(value, Op::CropTo { input }, needs)
    }

    /// Hard boundary enforcement: each sample's border pixels are replaced by
    /// the mask's border values. `masks` is `[N, 1, H, W]`.
    pub fn enforce_bc(&mut self, input: NodeId, masks: &Array4<f64>) -> Result<NodeId> {
        let x = self.value(input);
        if x.dim() != masks.dim() {
            return Err(Error::ShapeMismatch(format!(
                "enforce_bc: field {:?} vs masks {:?}",
                x.dim(),
                masks.dim()
            )));
        }
        let (n, c, h, w) = x.dim();
        let mut value = x.clone();
        for in_ in 0..n {
            for ci in 0..c {
                let m = masks.slice(s![in_, ci, .., ..]);
                let mut f = value.slice_mut(s![in_, ci, .., ..]);
                crate::boundary::overwrite_border(&mut f, &m);
            }
        }
        let _ = (h, w);
        let needs = self.needs(input);
        Ok(self.push(value, Op::EnforceBc { input }, needs))
    }

    pub fn ghost_pad(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let (n, c, h, w) = x.dim();
        let mut value = Array4::<f64>::zeros((n, c, h + 2, w + 2));
        for in_ in 0..n {
            for ci in 0..c {
                let f = x.slice(s![in_, ci, .., ..]);
                value
                    .slice_mut(s![in_, ci, .., ..])
                    .assign(&crate::boundary::ghost_pad_replicate(&f));
            }
        }
        let needs = self.needs(input);
        self.push(value, Op::GhostPad { input }, needs)
    }

    pub fn stencil(&mut self, input: NodeId, kernel: StencilKernel) -> Result<NodeId> {
        let x = self.value(input);
        let (n, c, h, w) = x.dim();
        if h < 3 || w < 3 {
            return Err(Error::ShapeMismatch("stencil input too small".into()));
        }
        let mut value = Array4::<f64>::zeros((n, c, h - 2, w - 2));
        for in_ in 0..n {
            for ci in 0..c {
                let f = x.slice(s![in_, ci, .., ..]);
                value
                    .slice_mut(s![in_, ci, .., ..])
                    .assign(&apply_stencil(&kernel, f)?);
            }
        }
        let needs = self.needs(input);
        Ok(self.push(value, Op::Stencil { input, kernel }, needs))
    }

    /// Per-sample boundary padding per the spec's edge kinds (Dirichlet
    /// enforcement included), `[N,1,H,W] -> [N,1,H+2,W+2]`.
    pub fn pad_mixed(&mut self, input: NodeId, spec: &BoundarySpec, grid: GridSpec) -> Result<NodeId> {
        let x = self.value(input);
        let (n, c, h, w) = x.dim();
        if c != 1 || h != grid.dof() || w != grid.dof() {
            return Err(Error::ShapeMismatch(format!(
                "pad_mixed wants [N,1,{d},{d}], got {:?}",
                x.dim(),
                d = grid.dof()
            )));
        }
        let mut value = Array4::<f64>::zeros((n, 1, h + 2, w + 2));
        for in_ in 0..n {
            let f = ScalarField2D::new(grid, x.slice(s![in_, 0, .., ..]).to_owned())?;
            value
                .slice_mut(s![in_, 0, .., ..])
                .assign(&pad_mixed(&f, spec, grid)?);
        }
        let needs = self.needs(input);
        Ok(self.push(
            value,
            Op::PadMixed { input, spec: spec.clone(), grid },
            needs,
        ))
    }

    pub fn crop_interior(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (_, _, h, w) = x.dim();
        if h < 3 || w < 3 {
            return Err(Error::ShapeMismatch("crop_interior input too small".into()));
        }
        let value = x.slice(s![.., .., 1..h - 1, 1..w - 1]).to_owned();
        let needs = self.needs(input);
        Ok(self.push(value, Op::CropInterior { input }, needs))
    }

    pub fn zero_border(&mut self, input: NodeId) -> NodeId {
        let mut value = self.value(input).clone();
        let (n, c, h, w) = value.dim();
        for in_ in 0..n {
            for ci in 0..c {
                let mut f = value.slice_mut(s![in_, ci, .., ..]);
                for j in 0..w {
                    f[[0, j]] = 0.0;
                    f[[h - 1, j]] = 0.0;
                }
                for i in 0..h {
                    f[[i, 0]] = 0.0;
                    f[[i, w - 1]] = 0.0;
                }
            }
        }
        let needs = self.needs(input);
        self.push(value, Op::ZeroBorder { input }, needs)
    }

    pub fn square(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).mapv(|v| v * v);
        let needs = self.needs(input);
        self.push(value, Op::Square { input }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.dim(a) != self.dim(b) {
            return Err(Error::ShapeMismatch("add: operand shapes differ".into()));
        }
        let value = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, input: NodeId, c: f64) -> NodeId {
        let value = self.value(input) * c;
        let needs = self.needs(input);
        self.push(value, Op::Scale { input, c }, needs)
    }

    pub fn mul_const(&mut self, input: NodeId, factor: Array4<f64>) -> Result<NodeId> {
        if self.dim(input) != factor.dim() {
            return Err(Error::ShapeMismatch("mul_const: shapes differ".into()));
        }
        let value = self.value(input) * &factor;
        let needs = self.needs(input);
        Ok(self.push(value, Op::MulConst { input, factor }, needs))
    }

    pub fn sub_const(&mut self, input: NodeId, term: &Array4<f64>) -> Result<NodeId> {
        if self.dim(input) != term.dim() {
            return Err(Error::ShapeMismatch("sub_const: shapes differ".into()));
        }
        let value = self.value(input) - term;
        let needs = self.needs(input);
        Ok(self.push(value, Op::SubConst { input }, needs))
    }

    pub fn weighted_sum_per_sample(
        &mut self,
        input: NodeId,
        weights: &Array2<f64>,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let (n, c, h, w) = x.dim();
        if weights.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "weights {:?} vs field {h}x{w}",
                weights.dim()
            )));
        }
        let mut value = Array4::<f64>::zeros((n, 1, 1, 1));
        for in_ in 0..n {
            let mut acc = 0.0;
            for ci in 0..c {
                let f = x.slice(s![in_, ci, .., ..]);
                acc += f.iter().zip(weights.iter()).map(|(a, b)| a * b).sum::<f64>();
            }
            value[[in_, 0, 0, 0]] = acc;
        }
        let needs = self.needs(input);
        Ok(self.push(
            value,
            Op::WeightedSumPerSample { input, weights: weights.clone() },
            needs,
        ))
    }

    pub fn per_sample_mean_square(&mut self, input: NodeId, denom: f64) -> NodeId {
        let x = self.value(input);
        let n = x.dim().0;
        let mut value = Array4::<f64>::zeros((n, 1, 1, 1));
        for in_ in 0..n {
            let s: f64 = x.slice(s![in_, .., .., ..]).iter().map(|v| v * v).sum();
            value[[in_, 0, 0, 0]] = s / denom;
        }
        let needs = self.needs(input);
        self.push(value, Op::PerSampleMeanSquare { input, denom }, needs)
    }

    pub fn mean_over_batch(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let n = x.dim().0 as f64;
        let mean = x.sum() / n;
        let value = Array4::from_elem((1, 1, 1, 1), mean);
        let needs = self.needs(input);
        self.push(value, Op::MeanOverBatch { input }, needs)
    }

    /// Reverse pass from a scalar node; returns one gradient slot per node.
    pub fn backward(&mut self, loss: NodeId) -> Result<Vec<Option<Array4<f64>>>> {
        if self.dim(loss) != (1, 1, 1, 1) {
            return Err(Error::ShapeMismatch("backward needs a scalar loss node".into()));
        }
        let mut grads: Vec<Option<Array4<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array4::from_elem((1, 1, 1, 1), 1.0));

        for idx in (0..self.nodes.len()).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let cot = grads[idx].take().unwrap();
            // Reborrow for the match; accumulation happens through `acc`.
            let (parents, contribs) = self.backward_one(idx, &cot)?;
            grads[idx] = Some(cot);
            for (p, g) in parents.into_iter().zip(contribs) {
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(grads)
    }

    fn backward_one(
        &self,
        idx: usize,
        cot: &Array4<f64>,
    ) -> Result<(Vec<NodeId>, Vec<Array4<f64>>)> {
        let node = &self.nodes[idx];
        let out = match &node.op {
            Op::Leaf => (vec![], vec![]),
            Op::Conv2d { input, weight, bias } => {
                let w = self.value(*weight);
                let x = self.value(*input);
                let dx = ops::conv2d_backward_input(&w.view(), &cot.view());
                let dw = ops::conv2d_backward_weight(&x.view(), &cot.view());
                let db = ops::conv2d_backward_bias(&cot.view());
                let db4 = Array4::from_shape_vec((1, db.len(), 1, 1), db.to_vec()).unwrap();
                (vec![*input, *weight, *bias], vec![dx, dw, db4])
            }
            Op::LeakyRelu { input, slope } => {
                let dx = ops::leaky_relu_backward(&self.value(*input).view(), &cot.view(), *slope);
                (vec![*input], vec![dx])
            }
            Op::MaxPool2 { input, argmax } => {
                let dx = ops::maxpool2_backward(&cot.view(), argmax, self.dim(*input));
                (vec![*input], vec![dx])
            }
            Op::Upsample2 { input } => {
                (vec![*input], vec![ops::upsample2_backward(&cot.view())])
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train_stats } => {
                let g = as_1d(self.value(*gamma));
                let (dx, dg, db) = if *train_stats {
                    ops::batchnorm_backward_train(&cot.view(), xhat, inv_std, &g)
                } else {
                    ops::batchnorm_backward_eval(&cot.view(), xhat, inv_std, &g)
                };
                let dg4 = Array4::from_shape_vec((1, dg.len(), 1, 1), dg.to_vec()).unwrap();
                let db4 = Array4::from_shape_vec((1, db.len(), 1, 1), db.to_vec()).unwrap();
                (vec![*input, *gamma, *beta], vec![dx, dg4, db4])
            }
            Op::Dropout { input, mask } => (vec![*input], vec![cot * mask]),
            Op::Concat { a, b } => {
                let ca = self.dim(*a).1;
                let da = cot.slice(s![.., ..ca, .., ..]).to_owned();
                let db = cot.slice(s![.., ca.., .., ..]).to_owned();
                (vec![*a, *b], vec![da, db])
            }
            Op::ZeroPadTo { input } => {
                let (_, _, h, w) = self.dim(*input);
                let dx = cot.slice(s![.., .., ..h, ..w]).to_owned();
                (vec![*input], vec![dx])
            }
            Op::CropTo { input } => {
                let (n, c, h, w) = self.dim(*input);
                let (_, _, ho, wo) = cot.dim();
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                dx.slice_mut(s![.., .., ..ho, ..wo]).assign(cot);
                (vec![*input], vec![dx])
            }
            Op::EnforceBc { input } => {
                let mut dx = cot.clone();
                let (n, c, h, w) = dx.dim();
                for in_ in 0..n {
                    for ci in 0..c {
                        let mut f = dx.slice_mut(s![in_, ci, .., ..]);
                        for j in 0..w {
                            f[[0, j]] = 0.0;
                            f[[h - 1, j]] = 0.0;
                        }
                        for i in 0..h {
                            f[[i, 0]] = 0.0;
                            f[[i, w - 1]] = 0.0;
                        }
                    }
                }
                (vec![*input], vec![dx])
            }
            Op::GhostPad { input } => {
                let (n, c, h, w) = self.dim(*input);
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for in_ in 0..n {
                    for ci in 0..c {
                        let g = cot.slice(s![in_, ci, .., ..]);
                        let mut d = dx.slice_mut(s![in_, ci, .., ..]);
                        // Interior pass-through plus ghost replication.
                        d.assign(&g.slice(s![1..h + 1, 1..w + 1]));
                        for j in 0..w {
                            d[[0, j]] += g[[0, j + 1]];
                            d[[h - 1, j]] += g[[h + 1, j + 1]];
                        }
                        for i in 0..h {
                            d[[i, 0]] += g[[i + 1, 0]];
                            d[[i, w - 1]] += g[[i + 1, w + 1]];
                        }
                        d[[0, 0]] += g[[0, 0]];
                        d[[0, w - 1]] += g[[0, w + 1]];
                        d[[h - 1, 0]] += g[[h + 1, 0]];
                        d[[h - 1, w - 1]] += g[[h + 1, w + 1]];
                    }
                }
                (vec![*input], vec![dx])
            }
            Op::Stencil { input, kernel } => {
                let (n, c, _, _) = self.dim(*input);
                let (_, _, ho, wo) = cot.dim();
                let mut dx = Array4::<f64>::zeros(self.dim(*input));
                for in_ in 0..n {
                    for ci in 0..c {
                        let g = cot.slice(s![in_, ci, ..ho, ..wo]);
                        dx.slice_mut(s![in_, ci, .., ..])
                            .assign(&stencil_adjoint(kernel, g)?);
                    }
                }
                (vec![*input], vec![dx])
            }
            Op::PadMixed { input, spec, grid } => {
                let (n, c, h, w) = self.dim(*input);
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for in_ in 0..n {
                    let g = cot.slice(s![in_, 0, .., ..]);
                    dx.slice_mut(s![in_, 0, .., ..])
                        .assign(&pad_mixed_adjoint(spec, *grid, g)?);
                }
                (vec![*input], vec![dx])
            }
            Op::CropInterior { input } => {
                let (n, c, h, w) = self.dim(*input);
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                dx.slice_mut(s![.., .., 1..h - 1, 1..w - 1]).assign(cot);
                (vec![*input], vec![dx])
            }
            Op::ZeroBorder { input } => {
                let mut dx = cot.clone();
                let (n, c, h, w) = dx.dim();
                for in_ in 0..n {
                    for ci in 0..c {
                        let mut f = dx.slice_mut(s![in_, ci, .., ..]);
                        for j in 0..w {
                            f[[0, j]] = 0.0;
                            f[[h - 1, j]] = 0.0;
                        }
                        for i in 0..h {
                            f[[i, 0]] = 0.0;
                            f[[i, w - 1]] = 0.0;
                        }
                    }
                }
                (vec![*input], vec![dx])
            }
            Op::Square { input } => {
                let dx = 2.0 * &(cot * self.value(*input));
                (vec![*input], vec![dx])
            }
            Op::Add { a, b } => (vec![*a, *b], vec![cot.clone(), cot.clone()]),
            Op::Scale { input, c } => (vec![*input], vec![cot * *c]),
            Op::MulConst { input, factor } => (vec![*input], vec![cot * factor]),
            Op::SubConst { input } => (vec![*input], vec![cot.clone()]),
            Op::WeightedSumPerSample { input, weights } => {
                let (n, c, h, w) = self.dim(*input);
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for in_ in 0..n {
                    let gn = cot[[in_, 0, 0, 0]];
                    for ci in 0..c {
                        let mut d = dx.slice_mut(s![in_, ci, .., ..]);
                        ndarray::Zip::from(&mut d).and(weights).for_each(|d, wv| {
                            *d = gn * wv;
                        });
                    }
                }
                (vec![*input], vec![dx])
            }
            Op::PerSampleMeanSquare { input, denom } => {
                let x = self.value(*input);
                let mut dx = Array4::<f64>::zeros(x.dim());
                let n = x.dim().0;
                for in_ in 0..n {
                    let gn = cot[[in_, 0, 0, 0]] * 2.0 / denom;
                    let xs = x.slice(s![in_, .., .., ..]);
                    let mut d = dx.slice_mut(s![in_, .., .., ..]);
                    ndarray::Zip::from(&mut d).and(&xs).for_each(|d, xv| *d = gn * xv);
                }
                (vec![*input], vec![dx])
            }
            Op::MeanOverBatch { input } => {
                let (n, c, h, w) = self.dim(*input);
                let g = cot[[0, 0, 0, 0]] / n as f64;
                (vec![*input], vec![Array4::from_elem((n, c, h, w), g)])
            }
        };
        Ok(out)
    }
}

fn as_1d(v: &Array4<f64>) -> Array1<f64> {
    Array1::from_vec(v.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::stencil::laplacian_kernel;
    use ndarray::Array4;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite difference of a scalar graph function at one input
    /// coordinate.
    fn fd_grad(
        f: &dyn Fn(&Array4<f64>) -> f64,
        x: &Array4<f64>,
        probe: (usize, usize, usize, usize),
        eps: f64,
    ) -> f64 {
        let mut xp = x.clone();
        xp[probe] += eps;
        let mut xm = x.clone();
        xm[probe] -= eps;
        (f(&xp) - f(&xm)) / (2.0 * eps)
    }

    #[test]
    fn composed_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand4(&mut rng, (2, 1, 6, 6));
        let w0 = rand4(&mut rng, (2, 1, 3, 3));
        let masks = {
            let mut m = Array4::<f64>::zeros((2, 1, 6, 6));
            m.mapv_inplace(|_| 0.0);
            m
        };

        let run = |x: &Array4<f64>| -> f64 {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let wn = g.constant(w0.clone());
            let bn = g.constant(Array4::zeros((1, 2, 1, 1)));
            let c = g.conv2d(xn, wn, bn).unwrap();
            let a = g.leaky_relu(c, 0.2);
            let p = g.maxpool2(a).unwrap();
            let u = g.upsample2(p);
            let s = g.square(u);
            let ms = g.per_sample_mean_square(s, 36.0);
            let loss = g.mean_over_batch(ms);
            let _ = &masks;
            g.scalar(loss)
        };

        let mut g = Graph::new();
        let xn = g.leaf(x0.clone());
        let wn = g.constant(w0.clone());
        let bn = g.constant(Array4::zeros((1, 2, 1, 1)));
        let c = g.conv2d(xn, wn, bn).unwrap();
        let a = g.leaky_relu(c, 0.2);
        let p = g.maxpool2(a).unwrap();
        let u = g.upsample2(p);
        let s = g.square(u);
        let ms = g.per_sample_mean_square(s, 36.0);
        let loss = g.mean_over_batch(ms);
        let grads = g.backward(loss).unwrap();
        let dx = grads[xn.0].as_ref().unwrap();

        for probe in [(0, 0, 0, 0), (1, 0, 3, 4), (0, 0, 5, 5), (1, 0, 2, 2)] {
            let fd = fd_grad(&run, &x0, probe, 1e-6);
            let got = dx[probe];
            assert!(
                (fd - got).abs() <= 1e-5 * fd.abs().max(1.0),
                "probe {probe:?}: fd {fd} vs {got}"
            );
        }
    }

    #[test]
    fn enforce_and_ghost_pad_route_gradients_to_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = rand4(&mut rng, (1, 1, 5, 5));
        let masks = rand4(&mut rng, (1, 1, 5, 5));
        let grid = GridSpec::new(5).unwrap();
        let k = laplacian_kernel(grid);

        let run = |x: &Array4<f64>| -> f64 {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let e = g.enforce_bc(xn, &masks).unwrap();
            let p = g.ghost_pad(e);
            let lap = g.stencil(p, k).unwrap();
            let zb = g.zero_border(lap);
            let ms = g.per_sample_mean_square(zb, 25.0);
            let loss = g.mean_over_batch(ms);
            g.scalar(loss)
        };

        let mut g = Graph::new();
        let xn = g.leaf(x0.clone());
        let e = g.enforce_bc(xn, &masks).unwrap();
        let p = g.ghost_pad(e);
        let lap = g.stencil(p, k).unwrap();
        let zb = g.zero_border(lap);
        let ms = g.per_sample_mean_square(zb, 25.0);
        let loss = g.mean_over_batch(ms);
        let grads = g.backward(loss).unwrap();
        let dx = grads[xn.0].as_ref().unwrap();

        // Border pixels are replaced, so their gradient vanishes.
        for j in 0..5 {
            assert_eq!(dx[[0, 0, 0, j]], 0.0);
            assert_eq!(dx[[0, 0, 4, j]], 0.0);
        }
        for probe in [(0, 0, 2, 2), (0, 0, 1, 3), (0, 0, 3, 1)] {
            let fd = fd_grad(&run, &x0, probe, 1e-6);
            let got = dx[probe];
            assert!(
                (fd - got).abs() <= 1e-5 * fd.abs().max(1.0),
                "probe {probe:?}: fd {fd} vs {got}"
            );
        }
    }

    #[test]
    fn backward_is_linear_in_the_cotangent() {
        // Two scalar losses combined: grad(a·L1 + b·L2) = a·grad(L1) + b·grad(L2).
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = rand4(&mut rng, (2, 1, 4, 4));
        let w = rand4(&mut rng, (1, 1, 3, 3));

        let grad_of = |alpha: f64, beta: f64| -> Array4<f64> {
            let mut g = Graph::new();
            let xn = g.leaf(x0.clone());
            let wn = g.constant(w.clone());
            let bn = g.constant(Array4::zeros((1, 1, 1, 1)));
            let c = g.conv2d(xn, wn, bn).unwrap();
            let l1 = g.per_sample_mean_square(c, 16.0);
            let l1 = g.mean_over_batch(l1);
            let s = g.square(c);
            let l2 = g.per_sample_mean_square(s, 16.0);
            let l2 = g.mean_over_batch(l2);
            let a = g.scale(l1, alpha);
            let b = g.scale(l2, beta);
            let loss = g.add(a, b).unwrap();
            let grads = g.backward(loss).unwrap();
            grads[xn.0].clone().unwrap()
        };

        let g1 = grad_of(1.0, 0.0);
        let g2 = grad_of(0.0, 1.0);
        let combo = grad_of(1.7, -0.4);
        for ((c, a), b) in combo.iter().zip(g1.iter()).zip(g2.iter()) {
            let expect = 1.7 * a - 0.4 * b;
            assert!((c - expect).abs() <= 1e-11 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn zero_cotangent_paths_give_zero_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(Array4::from_elem((1, 1, 4, 4), 2.0));
        let s = g.scale(x, 0.0);
        let ms = g.per_sample_mean_square(s, 16.0);
        let loss = g.mean_over_batch(ms);
        let grads = g.backward(loss).unwrap();
        let dx = grads[x.0].as_ref().unwrap();
        assert!(dx.iter().all(|v| *v == 0.0));
    }
}
