//! The UNet heteroencoder: configuration, parameters, seeded initialization,
//! forward passes (taped and tape-free) and the checkpoint format.
//!
//! The encoder-decoder doubles channels and halves resolution per contracting
//! block and mirrors that back up, concatenating each contracting block's
//! pre-pool features onto the matching expanding block's upsampled features.
//! Input and output convolutions are linear. Contracting activations are
//! Leaky ReLU, expanding activations ReLU; batch norm sits after each block
//! convolution and dropout closes the first three contracting blocks.
//!
//! Resolutions that are not divisible by `2^depth` run on a zero-padded
//! canvas (the next multiple) and the output is cropped back, so odd desk
//! grids work with the same architecture.

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::ChannelStats;

use super::graph::{Graph, NodeId};
use super::ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    pub input_resolution: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
    pub dropout_p: f64,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub upsample: UpsampleMode,
}

impl NetworkConfig {
    /// The full-scale configuration: 128×128, six blocks down and up from 32
    /// base channels, Leaky ReLU slope 0.2.
    pub fn paper() -> Self {
        Self {
            input_resolution: 128,
            in_channels: 2,
            out_channels: 1,
            depth: 6,
            base_channels: 32,
            leaky_slope: 0.2,
            dropout_p: 0.5,
            kernel_size: 3,
            stride: 1,
            padding: 1,
            upsample: UpsampleMode::Nearest,
        }
    }

    /// Reduced configuration for desk-scale runs and tests.
    pub fn desk(input_resolution: usize, depth: usize, base_channels: usize) -> Self {
        Self {
            input_resolution,
            depth,
            base_channels,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size != 3 || self.stride != 1 || self.padding != 1 {
            return Err(Error::InvalidParameter(
                "only kernel 3, stride 1, padding 1 are supported".into(),
            ));
        }
        if self.depth == 0 || self.base_channels == 0 || self.input_resolution < 3 {
            return Err(Error::InvalidParameter("degenerate network config".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidParameter("need input and output channels".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidParameter(format!(
                "dropout probability {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Internal resolution: `input_resolution` rounded up to the next
    /// multiple of `2^depth`.
    pub fn canvas(&self) -> usize {
        let unit = 1usize << self.depth;
        self.input_resolution.div_ceil(unit) * unit
    }

    /// Contracting blocks that carry dropout (the first three).
    pub fn dropout_blocks(&self) -> usize {
        self.depth.min(3)
    }

    fn down_channels(&self, block: usize) -> (usize, usize) {
        let cin = self.base_channels << block;
        (cin, cin * 2)
    }

    fn up_channels(&self, block: usize) -> (usize, usize) {
        // Upsampled input and the matching skip have the same channel count;
        // the first convolution absorbs the concatenation.
        let cin = self.base_channels << (self.depth - block);
        (2 * cin, cin / 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BnParams {
    fn identity(channels: usize) -> Self {
        Self {
            gamma: Array1::from_elem(channels, 1.0),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub conv1: ConvParams,
    pub bn1: BnParams,
    pub conv2: ConvParams,
    pub bn2: BnParams,
}

/// All trainable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub in_conv: ConvParams,
    pub down: Vec<BlockParams>,
    pub up: Vec<BlockParams>,
    pub out_conv: ConvParams,
}

const BN_MOMENTUM: f64 = 0.1;

fn init_conv(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize) -> ConvParams {
    // Uniform fan-in scaling: U(-1/√(C_in·k²), 1/√(C_in·k²)) for weights and
    // biases alike.
    let bound = 1.0 / ((c_in * 9) as f64).sqrt();
    let weight = Array4::from_shape_fn((c_out, c_in, 3, 3), |_| rng.gen_range(-bound..bound));
    let bias = Array1::from_shape_fn(c_out, |_| rng.gen_range(-bound..bound));
    ConvParams { weight, bias }
}

impl NetworkParams {
    /// Seeded initialization; identical `(config, seed)` pairs produce
    /// bit-identical parameters.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_conv = init_conv(&mut rng, config.base_channels, config.in_channels);
        let mut down = Vec::with_capacity(config.depth);
        for k in 0..config.depth {
            let (cin, cout) = config.down_channels(k);
            down.push(BlockParams {
                conv1: init_conv(&mut rng, cout, cin),
                bn1: BnParams::identity(cout),
                conv2: init_conv(&mut rng, cout, cout),
                bn2: BnParams::identity(cout),
            });
        }
        let mut up = Vec::with_capacity(config.depth);
        for k in 0..config.depth {
            let (cin, cout) = config.up_channels(k);
            up.push(BlockParams {
                conv1: init_conv(&mut rng, cout, cin),
                bn1: BnParams::identity(cout),
                conv2: init_conv(&mut rng, cout, cout),
                bn2: BnParams::identity(cout),
            });
        }
        let out_conv = init_conv(&mut rng, config.out_channels, config.base_channels);
        Ok(Self { config, in_conv, down, up, out_conv })
    }

    fn visit_trainable(&self, mut f: impl FnMut(&[f64])) {
        let conv = |c: &ConvParams, f: &mut dyn FnMut(&[f64])| {
            f(c.weight.as_slice().expect("standard layout"));
            f(c.bias.as_slice().expect("standard layout"));
        };
        conv(&self.in_conv, &mut f);
        for b in self.down.iter().chain(self.up.iter()) {
            conv(&b.conv1, &mut f);
            f(b.bn1.gamma.as_slice().unwrap());
            f(b.bn1.beta.as_slice().unwrap());
            conv(&b.conv2, &mut f);
            f(b.bn2.gamma.as_slice().unwrap());
            f(b.bn2.beta.as_slice().unwrap());
        }
        conv(&self.out_conv, &mut f);
    }

    fn visit_trainable_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        let conv = |c: &mut ConvParams, f: &mut dyn FnMut(&mut [f64])| {
            f(c.weight.as_slice_mut().expect("standard layout"));
            f(c.bias.as_slice_mut().expect("standard layout"));
        };
        conv(&mut self.in_conv, &mut f);
        for b in self.down.iter_mut().chain(self.up.iter_mut()) {
            conv(&mut b.conv1, &mut f);
            f(b.bn1.gamma.as_slice_mut().unwrap());
            f(b.bn1.beta.as_slice_mut().unwrap());
            conv(&mut b.conv2, &mut f);
            f(b.bn2.gamma.as_slice_mut().unwrap());
            f(b.bn2.beta.as_slice_mut().unwrap());
        }
        conv(&mut self.out_conv, &mut f);
    }

    /// All trainable values in declaration order as one flat vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        self.visit_trainable(|s| flat.extend_from_slice(s));
        flat
    }

    pub fn n_trainable(&self) -> usize {
        let mut n = 0;
        self.visit_trainable(|s| n += s.len());
        n
    }

    /// Write a flat vector (from [`Self::flatten`]) back into the tensors.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_trainable() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} entries, params have {}",
                flat.len(),
                self.n_trainable()
            )));
        }
        let mut pos = 0;
        self.visit_trainable_mut(|s| {
            s.copy_from_slice(&flat[pos..pos + s.len()]);
            pos += s.len();
        });
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One block boundary of the forward pass, for shape conformance checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockShape {
    pub name: String,
    pub input: [usize; 4],
    pub output: [usize; 4],
}

fn dims(d: (usize, usize, usize, usize)) -> [usize; 4] {
    [d.0, d.1, d.2, d.3]
}

/// Result of a taped forward pass: the output node plus the parameter leaves
/// in declaration order (matching [`NetworkParams::flatten`]).
pub struct UnetForward {
    pub output: NodeId,
    pub param_leaves: Vec<NodeId>,
    pub block_shapes: Vec<BlockShape>,
}

struct LeafSet {
    ids: Vec<NodeId>,
}

impl LeafSet {
    fn conv(&mut self, g: &mut Graph, c: &ConvParams) -> (NodeId, NodeId) {
        let w = g.leaf(c.weight.clone());
        let b = g.leaf_1d(&c.bias);
        self.ids.push(w);
        self.ids.push(b);
        (w, b)
    }

    fn bn(&mut self, g: &mut Graph, b: &BnParams) -> (NodeId, NodeId) {
        let gamma = g.leaf_1d(&b.gamma);
        let beta = g.leaf_1d(&b.beta);
        self.ids.push(gamma);
        self.ids.push(beta);
        (gamma, beta)
    }
}

fn update_running(bn: &mut BnParams, mean: &Array1<f64>, var: &Array1<f64>, m: usize) {
    let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
    for c in 0..bn.running_mean.len() {
        bn.running_mean[c] = (1.0 - BN_MOMENTUM) * bn.running_mean[c] + BN_MOMENTUM * mean[c];
        bn.running_var[c] = (1.0 - BN_MOMENTUM) * bn.running_var[c] + BN_MOMENTUM * var[c] * unbias;
    }
}

fn bn_node(
    g: &mut Graph,
    leaves: &mut LeafSet,
    bn: &mut BnParams,
    x: NodeId,
    mode: Mode,
) -> NodeId {
    let (gamma, beta) = leaves.bn(g, bn);
    match mode {
        Mode::Train => {
            let (mean, var) = ops::batch_moments(&g.value(x).view());
            let (n, _, h, w) = g.dim(x);
            update_running(bn, &mean, &var, n * h * w);
            g.batchnorm(x, gamma, beta, &mean, &var, true)
        }
        Mode::Eval => {
            let mean = bn.running_mean.clone();
            let var = bn.running_var.clone();
            g.batchnorm(x, gamma, beta, &mean, &var, false)
        }
    }
}

/// Taped forward pass. In train mode the batch-norm running statistics are
/// updated in `params` and dropout masks are drawn from `rng`; eval mode
/// leaves `params` untouched and disables dropout.
pub fn unet_forward(
    g: &mut Graph,
    params: &mut NetworkParams,
    input: NodeId,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<UnetForward> {
    let config = params.config;
    config.validate()?;
    let (n, c_in, h, w) = g.dim(input);
    if c_in != config.in_channels || h != config.input_resolution || w != config.input_resolution {
        return Err(Error::ShapeMismatch(format!(
            "expected [N, {}, {res}, {res}], got {:?}",
            config.in_channels,
            g.dim(input),
            res = config.input_resolution
        )));
    }
    if mode == Mode::Train && config.dropout_p > 0.0 && rng.is_none() {
        return Err(Error::InvalidParameter(
            "train-mode forward with dropout needs an RNG".into(),
        ));
    }
    let mut rng = rng;
    let mut leaves = LeafSet { ids: Vec::new() };
    let mut shapes = Vec::new();
    let canvas = config.canvas();

    let mut x = input;
    if canvas != config.input_resolution {
        x = g.zero_pad_to(x, canvas);
    }

    let pre = g.dim(x);
    let (wc, bc) = leaves.conv(g, &params.in_conv);
    x = g.conv2d(x, wc, bc)?;
    shapes.push(BlockShape {
        name: "input convolutional layer".into(),
        input: dims(pre),
        output: dims(g.dim(x)),
    });

    let mut skips = Vec::with_capacity(config.depth);
    for k in 0..config.depth {
        let pre = g.dim(x);
        let (w1, b1) = leaves.conv(g, &params.down[k].conv1);
        x = g.conv2d(x, w1, b1)?;
        x = bn_node(g, &mut leaves, &mut params.down[k].bn1, x, mode);
        x = g.leaky_relu(x, config.leaky_slope);
        let (w2, b2) = leaves.conv(g, &params.down[k].conv2);
        x = g.conv2d(x, w2, b2)?;
        x = bn_node(g, &mut leaves, &mut params.down[k].bn2, x, mode);
        x = g.leaky_relu(x, config.leaky_slope);
        if mode == Mode::Train && k < config.dropout_blocks() && config.dropout_p > 0.0 {
            let p = config.dropout_p;
            let keep = 1.0 - p;
            let r = rng.as_deref_mut().expect("checked above");
            let mask =
                Array4::from_shape_fn(g.dim(x), |_| {
                    if r.gen_range(0.0..1.0) < p { 0.0 } else { 1.0 / keep }
                });
            x = g.dropout(x, mask);
        }
        skips.push(x);
        x = g.maxpool2(x)?;
        shapes.push(BlockShape {
            name: format!("contracting block {}", k + 1),
            input: dims(pre),
            output: dims(g.dim(x)),
        });
    }

    for k in 0..config.depth {
        let pre = g.dim(x);
        x = g.upsample2(x);
        x = g.concat(x, skips[config.depth - 1 - k])?;
        let (w1, b1) = leaves.conv(g, &params.up[k].conv1);
        x = g.conv2d(x, w1, b1)?;
        x = bn_node(g, &mut leaves, &mut params.up[k].bn1, x, mode);
        x = g.relu(x);
        let (w2, b2) = leaves.conv(g, &params.up[k].conv2);
        x = g.conv2d(x, w2, b2)?;
        x = bn_node(g, &mut leaves, &mut params.up[k].bn2, x, mode);
        x = g.relu(x);
        shapes.push(BlockShape {
            name: format!("expanding block {}", k + 1),
            input: dims(pre),
            output: dims(g.dim(x)),
        });
    }

    let pre = g.dim(x);
    let (wo, bo) = leaves.conv(g, &params.out_conv);
    x = g.conv2d(x, wo, bo)?;
    shapes.push(BlockShape {
        name: "output convolutional layer".into(),
        input: dims(pre),
        output: dims(g.dim(x)),
    });

    if canvas != config.input_resolution {
        x = g.crop_to(x, config.input_resolution);
    }
    let _ = n;
    Ok(UnetForward { output: x, param_leaves: leaves.ids, block_shapes: shapes })
}

/// Extract the parameter gradients of a taped forward into the flat layout
/// of [`NetworkParams::flatten`]; untouched leaves contribute zeros.
pub fn flat_param_grads(
    g: &Graph,
    forward: &UnetForward,
    grads: &[Option<Array4<f64>>],
) -> Vec<f64> {
    let mut flat = Vec::new();
    for leaf in &forward.param_leaves {
        match &grads[leaf.0] {
            Some(t) => flat.extend(t.iter().copied()),
            None => flat.extend(std::iter::repeat_n(0.0, g.value(*leaf).len())),
        }
    }
    flat
}

/// Tape-free eval-mode forward pass: same arithmetic as the taped path with
/// running batch-norm statistics, without recording intermediates. Returns
/// the output and the per-block shape trace.
pub fn unet_forward_lite(
    params: &NetworkParams,
    input: &Array4<f64>,
) -> Result<(Array4<f64>, Vec<BlockShape>)> {
    let config = params.config;
    config.validate()?;
    let (_, c_in, h, w) = input.dim();
    if c_in != config.in_channels || h != config.input_resolution || w != config.input_resolution {
        return Err(Error::ShapeMismatch(format!(
            "expected [N, {}, {res}, {res}], got {:?}",
            config.in_channels,
            input.dim(),
            res = config.input_resolution
        )));
    }
    let canvas = config.canvas();
    let mut shapes = Vec::new();

    let mut x = if canvas != config.input_resolution {
        ops::zero_pad_to(&input.view(), canvas)
    } else {
        input.clone()
    };

    let eval_bn = |x: &Array4<f64>, bn: &BnParams| -> Array4<f64> {
        let (y, _, _) =
            ops::batchnorm_apply(&x.view(), &bn.running_mean, &bn.running_var, &bn.gamma, &bn.beta);
        y
    };

    let pre = dims(x.dim());
    x = ops::conv2d_forward(&x.view(), &params.in_conv.weight.view(), &params.in_conv.bias)?;
    shapes.push(BlockShape {
        name: "input convolutional layer".into(),
        input: pre,
        output: dims(x.dim()),
    });

    let mut skips = Vec::with_capacity(config.depth);
    for k in 0..config.depth {
        let pre = dims(x.dim());
        let b = &params.down[k];
        x = ops::conv2d_forward(&x.view(), &b.conv1.weight.view(), &b.conv1.bias)?;
        x = eval_bn(&x, &b.bn1);
        x = ops::leaky_relu_forward(&x.view(), config.leaky_slope);
        x = ops::conv2d_forward(&x.view(), &b.conv2.weight.view(), &b.conv2.bias)?;
        x = eval_bn(&x, &b.bn2);
        x = ops::leaky_relu_forward(&x.view(), config.leaky_slope);
        skips.push(x.clone());
        let (pooled, _) = ops::maxpool2_forward(&x.view())?;
        x = pooled;
        shapes.push(BlockShape {
            name: format!("contracting block {}", k + 1),
            input: pre,
            output: dims(x.dim()),
        });
    }

    for k in 0..config.depth {
        let pre = dims(x.dim());
        let b = &params.up[k];
        x = ops::upsample2_forward(&x.view());
        x = ops::concat_channels(&x.view(), &skips[config.depth - 1 - k].view())?;
        x = ops::conv2d_forward(&x.view(), &b.conv1.weight.view(), &b.conv1.bias)?;
        x = eval_bn(&x, &b.bn1);
        x = ops::leaky_relu_forward(&x.view(), 0.0);
        x = ops::conv2d_forward(&x.view(), &b.conv2.weight.view(), &b.conv2.bias)?;
        x = eval_bn(&x, &b.bn2);
        x = ops::leaky_relu_forward(&x.view(), 0.0);
        shapes.push(BlockShape {
            name: format!("expanding block {}", k + 1),
            input: pre,
            output: dims(x.dim()),
        });
    }

    let pre = dims(x.dim());
    x = ops::conv2d_forward(&x.view(), &params.out_conv.weight.view(), &params.out_conv.bias)?;
    shapes.push(BlockShape {
        name: "output convolutional layer".into(),
        input: pre,
        output: dims(x.dim()),
    });

    if canvas != config.input_resolution {
        x = ops::crop_to(&x.view(), config.input_resolution);
    }
    Ok((x, shapes))
}

// --- Checkpoint format -------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"DCRMCKPT";

/// Trailer carried next to the parameters: which objective trained the net
/// and, for label-normalized training, the output channel statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub method_code: u8,
    pub output_stats: Option<ChannelStats>,
}

fn visit_all_tensors(params: &NetworkParams, mut f: impl FnMut(&[f64])) {
    let conv = |c: &ConvParams, f: &mut dyn FnMut(&[f64])| {
        f(c.weight.as_slice().expect("standard layout"));
        f(c.bias.as_slice().expect("standard layout"));
    };
    let bn = |b: &BnParams, f: &mut dyn FnMut(&[f64])| {
        f(b.gamma.as_slice().unwrap());
        f(b.beta.as_slice().unwrap());
        f(b.running_mean.as_slice().unwrap());
        f(b.running_var.as_slice().unwrap());
    };
    conv(&params.in_conv, &mut f);
    for b in params.down.iter().chain(params.up.iter()) {
        conv(&b.conv1, &mut f);
        bn(&b.bn1, &mut f);
        conv(&b.conv2, &mut f);
        bn(&b.bn2, &mut f);
    }
    conv(&params.out_conv, &mut f);
}

fn visit_all_tensors_mut(params: &mut NetworkParams, mut f: impl FnMut(&mut [f64])) {
    let conv = |c: &mut ConvParams, f: &mut dyn FnMut(&mut [f64])| {
        f(c.weight.as_slice_mut().expect("standard layout"));
        f(c.bias.as_slice_mut().expect("standard layout"));
    };
    let bn = |b: &mut BnParams, f: &mut dyn FnMut(&mut [f64])| {
        f(b.gamma.as_slice_mut().unwrap());
        f(b.beta.as_slice_mut().unwrap());
        f(b.running_mean.as_slice_mut().unwrap());
        f(b.running_var.as_slice_mut().unwrap());
    };
    conv(&mut params.in_conv, &mut f);
    for b in params.down.iter_mut().chain(params.up.iter_mut()) {
        conv(&mut b.conv1, &mut f);
        bn(&mut b.bn1, &mut f);
        conv(&mut b.conv2, &mut f);
        bn(&mut b.bn2, &mut f);
    }
    conv(&mut params.out_conv, &mut f);
}

/// Binary checkpoint: magic `DCRMCKPT`, the config echo, the meta trailer,
/// then every parameter tensor in declaration order, f64 little-endian.
pub fn write_checkpoint(
    params: &NetworkParams,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let c = &params.config;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    for v in [
        c.input_resolution,
        c.in_channels,
        c.out_channels,
        c.depth,
        c.base_channels,
        c.kernel_size,
        c.stride,
        c.padding,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&c.leaky_slope.to_le_bytes())?;
    w.write_all(&c.dropout_p.to_le_bytes())?;
    w.write_all(&[0u8])?; // upsample mode: nearest
    w.write_all(&[meta.method_code])?;
    let (has, mean, std) = match meta.output_stats {
        Some(s) => (1u8, s.mean, s.std),
        None => (0u8, 0.0, 1.0),
    };
    w.write_all(&[has])?;
    w.write_all(&mean.to_le_bytes())?;
    w.write_all(&std.to_le_bytes())?;

    let mut count: u64 = 0;
    visit_all_tensors(params, |s| count += s.len() as u64);
    w.write_all(&count.to_le_bytes())?;
    let mut io_err = None;
    visit_all_tensors(params, |s| {
        if io_err.is_none() {
            for v in s {
                if let Err(e) = w.write_all(&v.to_le_bytes()) {
                    io_err = Some(e);
                    break;
                }
            }
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(NetworkParams, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    let need = |at: usize, len: usize| -> Result<&[u8]> {
        bytes.get(at..at + len).ok_or(Error::TruncatedPayload {
            expected: (at + len) as u64,
            found: bytes.len() as u64,
        })
    };
    if need(0, 8)? != CKPT_MAGIC {
        return Err(Error::BadMagic { expected: "DCRMCKPT" });
    }
    let mut at = 8;
    let u32_at = |at: &mut usize| -> Result<u32> {
        let v = u32::from_le_bytes(need(*at, 4)?.try_into().unwrap());
        *at += 4;
        Ok(v)
    };
    let fields: Vec<u32> = (0..8).map(|_| u32_at(&mut at)).collect::<Result<_>>()?;
    let f64_at = |at: &mut usize| -> Result<f64> {
        let v = f64::from_le_bytes(need(*at, 8)?.try_into().unwrap());
        *at += 8;
        Ok(v)
    };
    let leaky_slope = f64_at(&mut at)?;
    let dropout_p = f64_at(&mut at)?;
    let upsample = need(at, 1)?[0];
    at += 1;
    if upsample != 0 {
        return Err(Error::CheckpointMismatch(format!(
            "unknown upsample mode {upsample}"
        )));
    }
    let method_code = need(at, 1)?[0];
    at += 1;
    let has_stats = need(at, 1)?[0];
    at += 1;
    let mean = f64_at(&mut at)?;
    let std = f64_at(&mut at)?;
    let output_stats = if has_stats == 1 {
        Some(ChannelStats { mean, std })
    } else {
        None
    };

    let config = NetworkConfig {
        input_resolution: fields[0] as usize,
        in_channels: fields[1] as usize,
        out_channels: fields[2] as usize,
        depth: fields[3] as usize,
        base_channels: fields[4] as usize,
        kernel_size: fields[5] as usize,
        stride: fields[6] as usize,
        padding: fields[7] as usize,
        leaky_slope,
        dropout_p,
        upsample: UpsampleMode::Nearest,
    };
    config
        .validate()
        .map_err(|e| Error::CheckpointMismatch(format!("bad config echo: {e}")))?;

    let mut params = NetworkParams::init(config, 0)?;
    let mut expected: u64 = 0;
    visit_all_tensors(&params, |s| expected += s.len() as u64);
    let count = u64::from_le_bytes(need(at, 8)?.try_into().unwrap());
    at += 8;
    if count != expected {
        return Err(Error::CheckpointMismatch(format!(
            "config implies {expected} parameter values, file declares {count}"
        )));
    }
    let payload = need(at, (count as usize) * 8)?;
    if bytes.len() > at + (count as usize) * 8 {
        return Err(Error::TrailingBytes(
            (bytes.len() - at - (count as usize) * 8) as u64,
        ));
    }
    let mut vals = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    visit_all_tensors_mut(&mut params, |s| {
        for v in s {
            *v = vals.next().expect("count checked");
        }
    });
    Ok((params, CheckpointMeta { method_code, output_stats }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::graph::Graph;

    fn rand_input(seed: u64, n: usize, c: usize, res: usize) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, c, res, res), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn desk_shape_contract() {
        let config = NetworkConfig::desk(32, 4, 8);
        let mut params = NetworkParams::init(config, 1).unwrap();
        let input = rand_input(2, 2, 2, 32);
        let mut g = Graph::new();
        let x = g.constant(input);
        let fwd = unet_forward(&mut g, &mut params, x, Mode::Eval, None).unwrap();
        assert_eq!(g.dim(fwd.output), (2, 1, 32, 32));
        // Bottleneck of the depth-4, base-8 net at 32² is [N, 128, 2, 2].
        let bottleneck = &fwd.block_shapes[4];
        assert_eq!(bottleneck.output, [2, 128, 2, 2]);
    }

    #[test]
    fn odd_resolution_runs_on_padded_canvas() {
        let config = NetworkConfig::desk(33, 4, 4);
        assert_eq!(config.canvas(), 48);
        let mut params = NetworkParams::init(config, 3).unwrap();
        let input = rand_input(4, 1, 2, 33);
        let mut g = Graph::new();
        let x = g.constant(input);
        let fwd = unet_forward(&mut g, &mut params, x, Mode::Eval, None).unwrap();
        assert_eq!(g.dim(fwd.output), (1, 1, 33, 33));
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let config = NetworkConfig::desk(16, 2, 4);
        let a = NetworkParams::init(config, 7).unwrap();
        let b = NetworkParams::init(config, 7).unwrap();
        assert_eq!(a, b);
        let c = NetworkParams::init(config, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lite_forward_matches_taped_eval_forward() {
        let config = NetworkConfig::desk(17, 3, 4);
        let mut params = NetworkParams::init(config, 5).unwrap();
        let input = rand_input(6, 2, 2, 17);
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let fwd = unet_forward(&mut g, &mut params, x, Mode::Eval, None).unwrap();
        let (lite, shapes) = unet_forward_lite(&params, &input).unwrap();
        assert_eq!(g.value(fwd.output), &lite);
        assert_eq!(fwd.block_shapes, shapes);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let config = NetworkConfig::desk(16, 2, 4);
        let mut params = NetworkParams::init(config, 11).unwrap();
        let input = rand_input(7, 2, 2, 16);
        let run = |params: &mut NetworkParams| -> Array4<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let fwd = unet_forward(&mut g, params, x, Mode::Train, Some(&mut rng)).unwrap();
            g.value(fwd.output).clone()
        };
        let mut p1 = params.clone();
        let y1 = run(&mut p1);
        let y2 = run(&mut params);
        assert_eq!(y1, y2);
    }

    #[test]
    fn train_mode_updates_running_stats_eval_does_not() {
        let config = NetworkConfig::desk(16, 2, 4);
        let mut params = NetworkParams::init(config, 13).unwrap();
        let before = params.down[0].bn1.running_mean.clone();
        let input = rand_input(8, 2, 2, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        unet_forward(&mut g, &mut params, x, Mode::Train, Some(&mut rng)).unwrap();
        assert_ne!(params.down[0].bn1.running_mean, before);

        let snapshot = params.clone();
        let mut g = Graph::new();
        let x = g.constant(input);
        unet_forward(&mut g, &mut params, x, Mode::Eval, None).unwrap();
        assert_eq!(params, snapshot);
    }

    #[test]
    fn dropout_is_active_and_seeded_in_train_mode() {
        let mut config = NetworkConfig::desk(16, 2, 4);
        config.dropout_p = 0.5;
        let mut params = NetworkParams::init(config, 17).unwrap();
        let input = rand_input(9, 2, 2, 16);
        let run = |params: &mut NetworkParams, seed: u64| -> Array4<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let fwd = unet_forward(&mut g, params, x, Mode::Train, Some(&mut rng)).unwrap();
            g.value(fwd.output).clone()
        };
        let mut p1 = params.clone();
        let mut p2 = params.clone();
        let a = run(&mut p1, 5);
        let b = run(&mut p2, 5);
        assert_eq!(a, b);
        let c = run(&mut params, 6);
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut config = NetworkConfig::desk(8, 2, 2);
        config.dropout_p = 0.0;
        let params = NetworkParams::init(config, 19).unwrap();
        let input = rand_input(10, 2, 2, 8);

        let loss_of = |flat: &[f64]| -> f64 {
            let mut p = params.clone();
            p.assign_flat(flat).unwrap();
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let fwd = unet_forward(&mut g, &mut p, x, Mode::Eval, None).unwrap();
            let sq = g.square(fwd.output);
            let ms = g.per_sample_mean_square(sq, 64.0);
            let l = g.mean_over_batch(ms);
            g.scalar(l)
        };

        let flat = params.flatten();
        let mut p = params.clone();
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let fwd = unet_forward(&mut g, &mut p, x, Mode::Eval, None).unwrap();
        let sq = g.square(fwd.output);
        let ms = g.per_sample_mean_square(sq, 64.0);
        let l = g.mean_over_batch(ms);
        let grads = g.backward(l).unwrap();
        let flat_grads = flat_param_grads(&g, &fwd, &grads);
        assert_eq!(flat_grads.len(), flat.len());

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut checked = 0;
        while checked < 8 {
            let idx = rng.gen_range(0..flat.len());
            if flat_grads[idx].abs() < 1e-7 {
                continue;
            }
            let eps = 1e-6 * flat[idx].abs().max(1.0);
            let mut fp = flat.clone();
            fp[idx] += eps;
            let mut fm = flat.clone();
            fm[idx] -= eps;
            let fd = (loss_of(&fp) - loss_of(&fm)) / (2.0 * eps);
            let got = flat_grads[idx];
            assert!(
                (fd - got).abs() <= 1e-4 * fd.abs().max(1e-6),
                "param {idx}: fd {fd} vs {got}"
            );
            checked += 1;
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let config = NetworkConfig::desk(16, 2, 4);
        let params = NetworkParams::init(config, 29).unwrap();
        let meta = CheckpointMeta {
            method_code: 2,
            output_stats: Some(ChannelStats { mean: 0.25, std: 1.5 }),
        };
        write_checkpoint(&params, &meta, &path).unwrap();
        let (back, meta2) = read_checkpoint(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(meta2, meta);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let config = NetworkConfig::desk(16, 2, 4);
        let params = NetworkParams::init(config, 31).unwrap();
        let meta = CheckpointMeta { method_code: 0, output_stats: None };
        write_checkpoint(&params, &meta, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(Error::BadMagic { .. })
        ));
        let bytes = std::fs::read(&path).unwrap();
        let mut fixed = bytes.clone();
        fixed[0] = b'D';
        fixed.truncate(fixed.len() - 16);
        std::fs::write(&path, &fixed).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(Error::TruncatedPayload { .. })
        ));
    }
}
