//! The three training objectives and the evaluation metric, all consuming
//! hard-BC-enforced network outputs.
//!
//! Sign conventions follow `Δu = f`: the CPINN residual is `ℛ = Δ_h Û - F`
//! (restricted to interior nodes; boundary pixels are exact by enforcement
//! and carry zero residual), and the energy integrand is `½‖∇Û‖² + Û·F`
//! minus the Neumann work term `Σ w_j (Û·g_N)_j` (zero for the all-Dirichlet
//! cases). Each loss is built on the reverse-mode graph, so gradients with
//! respect to the prediction and the network parameters come from the same
//! code path that computes the value.

use ndarray::{Array2, Array4};

use crate::boundary::{build_mask_channel, BcKind, BoundarySpec, Edge};
use crate::error::{Error, Result};
use crate::grid::{FieldBatch, GridSpec};
use crate::net::graph::{Graph, NodeId};
use crate::quadrature::{face_weights, QuadratureRule};
use crate::stencil::{grad_x_forward_kernel, grad_y_forward_kernel, laplacian_kernel};

/// A scalar loss plus its per-sample breakdown; the scalar is the mean of
/// the breakdown for all three objectives.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub scalar: f64,
    pub per_sample: Vec<f64>,
}

impl LossValue {
    fn from_nodes(g: &Graph, loss: NodeId, per_sample: NodeId) -> Self {
        Self {
            scalar: g.scalar(loss),
            per_sample: g.value(per_sample).iter().copied().collect(),
        }
    }
}

fn check_pred(pred_dim: (usize, usize, usize, usize), other: &FieldBatch) -> Result<()> {
    if pred_dim != other.values().dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs companion batch {:?}",
            pred_dim,
            other.values().dim()
        )));
    }
    Ok(())
}

/// Mean-squared error `(1/(DOF²·N))·Σ (Û - U)²`. The prediction is expected
/// to be BC-enforced already, so the boundary contribution is identically
/// zero when the truth satisfies the same boundary values.
pub fn supervised_loss_node(
    g: &mut Graph,
    pred: NodeId,
    truth: &Array4<f64>,
) -> Result<(NodeId, NodeId)> {
    let (_, _, h, w) = g.dim(pred);
    let diff = g.sub_const(pred, truth)?;
    let per_sample = g.per_sample_mean_square(diff, (h * w) as f64);
    let loss = g.mean_over_batch(per_sample);
    Ok((loss, per_sample))
}

pub fn supervised_loss(pred: &FieldBatch, truth: &FieldBatch) -> Result<LossValue> {
    check_pred(pred.values().dim(), truth)?;
    let mut g = Graph::new();
    let p = g.leaf(pred.values().clone());
    let (loss, per_sample) = supervised_loss_node(&mut g, p, truth.values())?;
    Ok(LossValue::from_nodes(&g, loss, per_sample))
}

/// Residual field `ℛ = Δ_h Û - F` through the fixed 5-point convolution on
/// the enforced, ghost-padded prediction; boundary pixels are zeroed (they
/// are exact by hard enforcement). `masks` carries each sample's boundary
/// values on its border pixels.
pub fn cpinn_residual_node(
    g: &mut Graph,
    pred: NodeId,
    source: &Array4<f64>,
    masks: &Array4<f64>,
    grid: GridSpec,
) -> Result<NodeId> {
    let enforced = g.enforce_bc(pred, masks)?;
    let padded = g.ghost_pad(enforced);
    let lap = g.stencil(padded, laplacian_kernel(grid))?;
    let r = g.sub_const(lap, source)?;
    Ok(g.zero_border(r))
}

pub fn cpinn_residual(
    pred: &FieldBatch,
    source: &FieldBatch,
    masks: &FieldBatch,
    grid: GridSpec,
) -> Result<FieldBatch> {
    check_pred(pred.values().dim(), source)?;
    check_pred(pred.values().dim(), masks)?;
    let mut g = Graph::new();
    let p = g.constant(pred.values().clone());
    let r = cpinn_residual_node(&mut g, p, source.values(), masks.values(), grid)?;
    FieldBatch::new(g.value(r).clone())
}

/// Mean squared residual `(1/(DOF²·N))·Σ ℛ²`; the boundary penalty term is
/// identically zero by hard enforcement.
pub fn cpinn_loss_node(
    g: &mut Graph,
    pred: NodeId,
    source: &Array4<f64>,
    masks: &Array4<f64>,
    grid: GridSpec,
) -> Result<(NodeId, NodeId)> {
    let (_, _, h, w) = g.dim(pred);
    let r = cpinn_residual_node(g, pred, source, masks, grid)?;
    let per_sample = g.per_sample_mean_square(r, (h * w) as f64);
    let loss = g.mean_over_batch(per_sample);
    Ok((loss, per_sample))
}

pub fn cpinn_loss(
    pred: &FieldBatch,
    source: &FieldBatch,
    masks: &FieldBatch,
    grid: GridSpec,
) -> Result<LossValue> {
    check_pred(pred.values().dim(), source)?;
    check_pred(pred.values().dim(), masks)?;
    let mut g = Graph::new();
    let p = g.leaf(pred.values().clone());
    let (loss, per_sample) = cpinn_loss_node(&mut g, p, source.values(), masks.values(), grid)?;
    Ok(LossValue::from_nodes(&g, loss, per_sample))
}

/// Discretized energy per sample,
/// `Ê = Σ ω ∘ ½‖∇Û‖² + Σ W ∘ (Û·F) - Σ w ∘ (Û·g_N)`,
/// with the gradient evaluated on cell faces by fixed forward-difference
/// convolutions of the enforced, ghost-padded prediction and the source term
/// under the rule's 2D node weights. All-Dirichlet masks path: the Neumann
/// term is zero. The batch loss is the mean over samples; it may be
/// negative.
pub fn dcrm_energy_node(
    g: &mut Graph,
    pred: NodeId,
    source: &Array4<f64>,
    masks: &Array4<f64>,
    grid: GridSpec,
    rule: &QuadratureRule,
) -> Result<(NodeId, NodeId)> {
    let (_, _, h, _) = g.dim(pred);
    if rule.dof() != h || grid.dof() != h {
        return Err(Error::ShapeMismatch(format!(
            "quadrature is {} points per side, field is {h}",
            rule.dof()
        )));
    }
    let enforced = g.enforce_bc(pred, masks)?;
    let padded = g.ghost_pad(enforced);
    energy_from_padded(g, enforced, padded, source, grid, rule, None)
}

fn energy_from_padded(
    g: &mut Graph,
    enforced: NodeId,
    padded: NodeId,
    source: &Array4<f64>,
    grid: GridSpec,
    rule: &QuadratureRule,
    neumann_coeffs: Option<Array2<f64>>,
) -> Result<(NodeId, NodeId)> {
    let (wx, wy) = face_weights(rule);
    let dx = g.stencil(padded, grad_x_forward_kernel(grid))?;
    let dy = g.stencil(padded, grad_y_forward_kernel(grid))?;
    let dx2 = g.square(dx);
    let dy2 = g.square(dy);
    let ex = g.weighted_sum_per_sample(dx2, &(0.5 * &wx))?;
    let ey = g.weighted_sum_per_sample(dy2, &(0.5 * &wy))?;
    let uf = g.mul_const(enforced, source.clone())?;
    let eu = g.weighted_sum_per_sample(uf, &rule.weights_2d)?;
    let grad_term = g.add(ex, ey)?;
    let mut per_sample = g.add(grad_term, eu)?;
    if let Some(coeffs) = neumann_coeffs {
        let work = g.weighted_sum_per_sample(enforced, &coeffs)?;
        let neg = g.scale(work, -1.0);
        per_sample = g.add(per_sample, neg)?;
    }
    let loss = g.mean_over_batch(per_sample);
    Ok((loss, per_sample))
}

pub fn dcrm_energy(
    pred: &FieldBatch,
    source: &FieldBatch,
    masks: &FieldBatch,
    grid: GridSpec,
    rule: &QuadratureRule,
) -> Result<LossValue> {
    check_pred(pred.values().dim(), source)?;
    check_pred(pred.values().dim(), masks)?;
    let mut g = Graph::new();
    let p = g.leaf(pred.values().clone());
    let (loss, per_sample) =
        dcrm_energy_node(&mut g, p, source.values(), masks.values(), grid, rule)?;
    Ok(LossValue::from_nodes(&g, loss, per_sample))
}

/// `w_j · g_N(t_j)` painted onto the border pixels of Neumann edges; corner
/// nodes shared by two Neumann edges accumulate both rules.
fn neumann_work_coeffs(spec: &BoundarySpec, grid: GridSpec, rule: &QuadratureRule) -> Array2<f64> {
    let n = grid.dof();
    let w = &rule.weights_1d;
    let mut coeffs = Array2::<f64>::zeros((n, n));
    let eval = |e: Edge, t: f64| -> f64 {
        match &spec.edge(e).value {
            Some(f) => f(t),
            None => 0.0,
        }
    };
    for k in 0..n {
        let t = grid.coord(k);
        if spec.edge(Edge::Bottom).kind == BcKind::Neumann {
            coeffs[[0, k]] += w[k] * eval(Edge::Bottom, t);
        }
        if spec.edge(Edge::Top).kind == BcKind::Neumann {
            coeffs[[n - 1, k]] += w[k] * eval(Edge::Top, t);
        }
        if spec.edge(Edge::Left).kind == BcKind::Neumann {
            coeffs[[k, 0]] += w[k] * eval(Edge::Left, t);
        }
        if spec.edge(Edge::Right).kind == BcKind::Neumann {
            coeffs[[k, n - 1]] += w[k] * eval(Edge::Right, t);
        }
    }
    coeffs
}

/// Spec-based energy: all samples share one boundary spec. Dirichlet edges
/// are enforced and ghost-padded; Neumann edges carry flux ghosts and their
/// work term enters with a minus sign. Periodic edges are not meaningful in
/// the energy and are rejected.
pub fn dcrm_energy_with_spec(
    pred: &FieldBatch,
    source: &FieldBatch,
    spec: &BoundarySpec,
    grid: GridSpec,
    rule: &QuadratureRule,
) -> Result<LossValue> {
    check_pred(pred.values().dim(), source)?;
    let mut g = Graph::new();
    let p = g.leaf(pred.values().clone());
    let (loss, per_sample) =
        dcrm_energy_with_spec_node(&mut g, p, source.values(), spec, grid, rule)?;
    Ok(LossValue::from_nodes(&g, loss, per_sample))
}

pub fn dcrm_energy_with_spec_node(
    g: &mut Graph,
    pred: NodeId,
    source: &Array4<f64>,
    spec: &BoundarySpec,
    grid: GridSpec,
    rule: &QuadratureRule,
) -> Result<(NodeId, NodeId)> {
    if Edge::ALL.iter().any(|e| spec.edge(*e).kind == BcKind::Periodic) {
        return Err(Error::UnsupportedBoundary(
            "periodic edges are not supported in the energy".into(),
        ));
    }
    if spec.all_dirichlet() {
        let (n, _, h, w) = g.dim(pred);
        let mask = build_mask_channel(spec, grid);
        let mut masks = Array4::<f64>::zeros((n, 1, h, w));
        for in_ in 0..n {
            masks
                .index_axis_mut(ndarray::Axis(0), in_)
                .index_axis_mut(ndarray::Axis(0), 0)
                .assign(mask.values.values());
        }
        return dcrm_energy_node(g, pred, source, &masks, grid, rule);
    }
    let padded = g.pad_mixed(pred, spec, grid)?;
    let enforced = g.crop_interior(padded)?;
    let coeffs = neumann_work_coeffs(spec, grid, rule);
    energy_from_padded(g, enforced, padded, source, grid, rule, Some(coeffs))
}

/// Total absolute output error `Σ (Û - U)²` over all samples and pixels.
pub fn e_abs(pred: &FieldBatch, truth: &FieldBatch) -> Result<f64> {
    check_pred(pred.values().dim(), truth)?;
    Ok(pred
        .values()
        .iter()
        .zip(truth.values().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Per-sample `Σ (Û - U)²`.
pub fn e_abs_per_sample(pred: &FieldBatch, truth: &FieldBatch) -> Result<Vec<f64>> {
    check_pred(pred.values().dim(), truth)?;
    Ok((0..pred.n())
        .map(|k| {
            pred.field(k, 0)
                .iter()
                .zip(truth.field(k, 0).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect())
}

/// Per-sample `Σ (Û - U)² / Σ U²`; errors when a reference field is zero.
pub fn e_abs_normalized_per_sample(pred: &FieldBatch, truth: &FieldBatch) -> Result<Vec<f64>> {
    let num = e_abs_per_sample(pred, truth)?;
    (0..pred.n())
        .map(|k| {
            let den: f64 = truth.field(k, 0).iter().map(|v| v * v).sum();
            if den <= 0.0 {
                return Err(Error::ZeroTruthNorm);
            }
            Ok(num[k] / den)
        })
        .collect()
}

/// Batch-normalized variant: `Σ (Û - U)² / Σ U²` over the whole batch.
pub fn e_abs_normalized(pred: &FieldBatch, truth: &FieldBatch) -> Result<f64> {
    let num = e_abs(pred, truth)?;
    let den: f64 = truth.values().iter().map(|v| v * v).sum();
    if den <= 0.0 {
        return Err(Error::ZeroTruthNorm);
    }
    Ok(num / den)
}
