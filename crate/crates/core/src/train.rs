//! Optimization loop (Adam), run logging, checkpointing metadata and
//! evaluation for the three methods.
//!
//! All methods share the same seeded parameter initialization and the same
//! UNet; they differ only in the loss attached to the network output:
//! supervised MSE on normalized labels, mean-squared 5-point residual, or
//! the discretized energy. Dirichlet boundary values are hard-enforced on
//! every prediction before any loss or metric sees it. Metrics are computed
//! in eval mode (dropout off, running batch-norm statistics) against the
//! finite-difference ground truth; training seeds fix minibatch shuffling,
//! dropout and initialization, so a rerun reproduces the numeric log
//! bit-for-bit (wall time excluded).

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array4};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{compute_stats, normalize, CaseId, ChannelStats, Dataset, FieldBatch, GridSpec};
use crate::losses::{
    cpinn_loss_node, dcrm_energy_node, e_abs_normalized_per_sample, supervised_loss_node,
};
use crate::net::graph::Graph;
use crate::net::unet::{
    flat_param_grads, unet_forward, unet_forward_lite, Mode, NetworkConfig, NetworkParams,
};
use crate::quadrature::{QuadratureKind, QuadratureRule};
use crate::solver::DirichletSolver;

/// Which objective trains the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Cnn,
    Cpinn,
    Dcrm,
}

impl Method {
    pub fn code(self) -> u8 {
        match self {
            Method::Cnn => 0,
            Method::Cpinn => 1,
            Method::Dcrm => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Method::Cnn),
            1 => Ok(Method::Cpinn),
            2 => Ok(Method::Dcrm),
            other => Err(Error::CheckpointMismatch(format!("unknown method code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Cnn => "cnn",
            Method::Cpinn => "cpinn",
            Method::Dcrm => "dcrm",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Method::Cnn),
            "cpinn" => Ok(Method::Cpinn),
            "dcrm" => Ok(Method::Dcrm),
            other => Err(Error::InvalidParameter(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: Method,
    pub case_id: CaseId,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub network: NetworkConfig,
    pub quadrature: QuadratureKind,
}

impl TrainConfig {
    pub fn new(method: Method, case_id: CaseId, network: NetworkConfig, epochs: usize) -> Self {
        let batch_size = match case_id {
            CaseId::Case1 => 1,
            _ => 2,
        };
        Self {
            method,
            case_id,
            epochs,
            batch_size,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 50,
            network,
            quadrature: QuadratureKind::Simpson,
        }
    }
}

/// One logged evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub points: Vec<EvalPoint>,
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_err,test_err,wall_seconds\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.epoch, p.train_loss, p.train_err, p.test_err, p.wall_seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// First-order moment state of the Adam optimizer.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// Bias-corrected Adam update in place. Non-finite gradients abort with a
/// divergence error before touching the parameters.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch("adam: length mismatch".into()));
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(Error::Divergence("gradient"));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Per-sample normalized errors plus their mean.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

/// Raw staging of a dataset: normalized inputs for the network, raw source
/// and mask channels for the physics losses, ground truth for metrics.
struct Staged {
    grid: GridSpec,
    inputs_norm: Array4<f64>,
    sources: Array4<f64>,
    masks: Array4<f64>,
    truth: FieldBatch,
}

fn channel(batch: &FieldBatch, c: usize) -> Array4<f64> {
    let n = batch.n();
    let d = batch.dof();
    let mut out = Array4::<f64>::zeros((n, 1, d, d));
    out.slice_mut(s![.., 0, .., ..])
        .assign(&batch.values().slice(s![.., c, .., ..]));
    out
}

/// Ground truth fields: stored labels if present, otherwise one
/// finite-difference solve per sample against the mask channel.
pub fn ground_truth(dataset: &Dataset) -> Result<FieldBatch> {
    if let Some(out) = &dataset.outputs {
        return Ok(out.clone());
    }
    let grid = dataset.grid()?;
    let solver = DirichletSolver::new(grid)?;
    let n = dataset.inputs.n();
    let mut out = FieldBatch::zeros(n, 1, grid.dof());
    for k in 0..n {
        let u = solver.solve_masked(dataset.inputs.field(k, 0), dataset.inputs.field(k, 1))?;
        out.field_mut(k, 0).assign(&u);
    }
    Ok(out)
}

fn stage(dataset: &Dataset) -> Result<Staged> {
    dataset.validate()?;
    let grid = dataset.grid()?;
    let inputs_norm = normalize(&dataset.inputs, &dataset.norm_stats)?;
    Ok(Staged {
        grid,
        inputs_norm: inputs_norm.into_values(),
        sources: channel(&dataset.inputs, 0),
        masks: channel(&dataset.inputs, 1),
        truth: ground_truth(dataset)?,
    })
}

fn gather(src: &Array4<f64>, idx: &[usize]) -> Array4<f64> {
    let (_, c, h, w) = src.dim();
    let mut out = Array4::<f64>::zeros((idx.len(), c, h, w));
    for (row, k) in idx.iter().enumerate() {
        out.slice_mut(s![row, .., .., ..])
            .assign(&src.slice(s![*k, .., .., ..]));
    }
    out
}

/// Eval-mode predictions for a staged dataset, denormalized (supervised
/// method) and hard-BC-enforced against the raw masks.
fn predict_enforced(
    params: &NetworkParams,
    staged: &Staged,
    output_stats: Option<ChannelStats>,
) -> Result<FieldBatch> {
    let n = staged.inputs_norm.dim().0;
    let d = staged.grid.dof();
    let mut preds = Array4::<f64>::zeros((n, 1, d, d));
    let chunk = 16;
    let mut at = 0;
    while at < n {
        let hi = (at + chunk).min(n);
        let x = staged.inputs_norm.slice(s![at..hi, .., .., ..]).to_owned();
        let (y, _) = unet_forward_lite(params, &x)?;
        preds.slice_mut(s![at..hi, .., .., ..]).assign(&y);
        at = hi;
    }
    if let Some(stats) = output_stats {
        preds.mapv_inplace(|v| v * stats.std + stats.mean);
    }
    for k in 0..n {
        let mask = staged.masks.slice(s![k, 0, .., ..]);
        let mut f = preds.slice_mut(s![k, 0, .., ..]);
        crate::boundary::overwrite_border(&mut f, &mask);
    }
    FieldBatch::new(preds)
}

fn eval_error(
    params: &NetworkParams,
    staged: &Staged,
    output_stats: Option<ChannelStats>,
) -> Result<EvalReport> {
    let preds = predict_enforced(params, staged, output_stats)?;
    let per_sample = e_abs_normalized_per_sample(&preds, &staged.truth)?;
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(EvalReport { per_sample, mean })
}

/// Eval-mode loss over a full staged dataset (the logged `train_loss`).
fn eval_loss(
    params: &mut NetworkParams,
    staged: &Staged,
    config: &TrainConfig,
    rule: Option<&QuadratureRule>,
    cnn_aux: Option<&CnnAux>,
) -> Result<f64> {
    let n = staged.inputs_norm.dim().0;
    let mut total = 0.0;
    let chunk = 16;
    let mut at = 0;
    while at < n {
        let hi = (at + chunk).min(n);
        let idx: Vec<usize> = (at..hi).collect();
        let (loss, _) = batch_loss(params, staged, config, rule, cnn_aux, &idx, Mode::Eval, None)?;
        total += loss * idx.len() as f64;
        at = hi;
    }
    Ok(total / n as f64)
}

/// Supervised-method extras: output normalization statistics, normalized
/// labels and normalized-space enforcement masks.
struct CnnAux {
    stats: ChannelStats,
    truth_norm: Array4<f64>,
    masks_norm: Array4<f64>,
}

/// One loss evaluation over the given sample indices; in train mode the
/// tape is kept and the flat parameter gradient is returned.
#[allow(clippy::too_many_arguments)]
fn batch_loss(
    params: &mut NetworkParams,
    staged: &Staged,
    config: &TrainConfig,
    rule: Option<&QuadratureRule>,
    cnn_aux: Option<&CnnAux>,
    idx: &[usize],
    mode: Mode,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Option<Vec<f64>>)> {
    let mut g = Graph::new();
    let x = g.constant(gather(&staged.inputs_norm, idx));
    let fwd = unet_forward(&mut g, params, x, mode, dropout_rng)?;
    let loss_node = match config.method {
        Method::Cnn => {
            let aux = cnn_aux.expect("supervised training stages label statistics");
            let masks = gather(&aux.masks_norm, idx);
            let enforced = g.enforce_bc(fwd.output, &masks)?;
            let truth = gather(&aux.truth_norm, idx);
            supervised_loss_node(&mut g, enforced, &truth)?.0
        }
        Method::Cpinn => {
            let sources = gather(&staged.sources, idx);
            let masks = gather(&staged.masks, idx);
            cpinn_loss_node(&mut g, fwd.output, &sources, &masks, staged.grid)?.0
        }
        Method::Dcrm => {
            let sources = gather(&staged.sources, idx);
            let masks = gather(&staged.masks, idx);
            let rule = rule.expect("energy training builds a quadrature rule");
            dcrm_energy_node(&mut g, fwd.output, &sources, &masks, staged.grid, rule)?.0
        }
    };
    let loss = g.scalar(loss_node);
    if !loss.is_finite() {
        return Err(Error::Divergence("loss"));
    }
    if mode == Mode::Train {
        let grads = g.backward(loss_node)?;
        let flat = flat_param_grads(&g, &fwd, &grads);
        Ok((loss, Some(flat)))
    } else {
        Ok((loss, None))
    }
}

/// A finished (or divergence-aborted) run.
pub struct TrainOutput {
    pub metrics: RunMetrics,
    pub params: NetworkParams,
    pub output_stats: Option<ChannelStats>,
    pub diverged_at: Option<usize>,
}

/// Run the full training protocol: seeded shuffled minibatches, one forward/
/// backward/Adam step per batch, metric logging at the evaluation cadence
/// (always including epoch 0 and the final epoch). Divergence aborts with
/// the metrics collected so far.
pub fn train(config: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutput> {
    let staged = stage(train_set)?;
    let staged_test = stage(test_set)?;
    let dof = staged.grid.dof();
    if config.network.input_resolution != dof {
        return Err(Error::ShapeMismatch(format!(
            "network resolution {} vs dataset DOF {dof}",
            config.network.input_resolution
        )));
    }
    let n = train_set.inputs.n();
    if config.batch_size == 0 || config.batch_size > n {
        return Err(Error::InvalidParameter(format!(
            "batch size {} with {} samples",
            config.batch_size, n
        )));
    }
    if config.eval_every == 0 {
        return Err(Error::InvalidParameter("eval_every must be positive".into()));
    }

    let rule = match config.method {
        Method::Dcrm => Some(QuadratureRule::new(config.quadrature, dof)?),
        _ => None,
    };

    let cnn_aux = match config.method {
        Method::Cnn => {
            let outputs = train_set
                .outputs
                .as_ref()
                .ok_or(Error::LabelsRequired("the supervised method trains on labeled data"))?;
            let stats = compute_stats(outputs)[0];
            let truth_norm = normalize(outputs, &[stats])?.into_values();
            let mut masks_norm = staged.masks.clone();
            masks_norm.mapv_inplace(|v| (v - stats.mean) / stats.std);
            Some(CnnAux { stats, truth_norm, masks_norm })
        }
        _ => None,
    };
    let output_stats = cnn_aux.as_ref().map(|a| a.stats);

    // Identical initialization across methods for one seed.
    let mut params = NetworkParams::init(config.network, config.seed)?;
    let mut flat = params.flatten();
    let mut adam = AdamState::new(flat.len());

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(2);

    let started = Instant::now();
    let mut metrics = RunMetrics::default();
    let log_point = |params: &mut NetworkParams,
                         epoch: usize,
                         metrics: &mut RunMetrics|
     -> Result<()> {
        let train_loss = eval_loss(params, &staged, config, rule.as_ref(), cnn_aux.as_ref())?;
        let train_err = eval_error(params, &staged, output_stats)?.mean;
        let test_err = eval_error(params, &staged_test, output_stats)?.mean;
        metrics.points.push(EvalPoint {
            epoch,
            train_loss,
            train_err,
            test_err,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        Ok(())
    };

    log_point(&mut params, 0, &mut metrics)?;

    let mut indices: Vec<usize> = (0..n).collect();
    let mut diverged_at = None;
    'epochs: for epoch in 1..=config.epochs {
        indices.shuffle(&mut shuffle_rng);
        for batch in indices.chunks(config.batch_size) {
            let step = batch_loss(
                &mut params,
                &staged,
                config,
                rule.as_ref(),
                cnn_aux.as_ref(),
                batch,
                Mode::Train,
                Some(&mut dropout_rng),
            );
            let grads = match step {
                Ok((_, Some(grads))) => grads,
                Ok((_, None)) => unreachable!("train mode returns gradients"),
                Err(Error::Divergence(_)) => {
                    diverged_at = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            match adam_step(
                &mut flat,
                &grads,
                &mut adam,
                config.learning_rate,
                config.beta1,
                config.beta2,
                config.eps,
            ) {
                Ok(()) => {}
                Err(Error::Divergence(_)) => {
                    diverged_at = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            params.assign_flat(&flat)?;
        }
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            log_point(&mut params, epoch, &mut metrics)?;
        }
    }

    Ok(TrainOutput { metrics, params, output_stats, diverged_at })
}

/// Side-effect-free evaluation: eval-mode forward, denormalization for the
/// supervised method, hard BC enforcement, per-sample normalized error.
pub fn evaluate(
    params: &NetworkParams,
    method: Method,
    output_stats: Option<ChannelStats>,
    dataset: &Dataset,
) -> Result<EvalReport> {
    if method == Method::Cnn && output_stats.is_none() {
        return Err(Error::CheckpointMismatch(
            "supervised checkpoint is missing output statistics".into(),
        ));
    }
    let staged = stage(dataset)?;
    if params.config.input_resolution != staged.grid.dof() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint resolution {} vs dataset DOF {}",
            params.config.input_resolution,
            staged.grid.dof()
        )));
    }
    eval_error(params, &staged, if method == Method::Cnn { output_stats } else { None })
}

/// Enforced eval-mode predictions for a dataset (exposed for inspection and
/// tests).
pub fn predictions(
    params: &NetworkParams,
    method: Method,
    output_stats: Option<ChannelStats>,
    dataset: &Dataset,
) -> Result<FieldBatch> {
    let staged = stage(dataset)?;
    predict_enforced(
        params,
        &staged,
        if method == Method::Cnn { output_stats } else { None },
    )
}
