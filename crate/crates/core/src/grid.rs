//! Grid geometry, scalar fields, batched field containers and the binary
//! dataset container.
//!
//! All fields live on the unit square `[0,1]²` discretized by `DOF` nodes per
//! side including both endpoints, so the node spacing is `h = 1/(DOF-1)`.
//! Row index `i` walks the y-direction (row 0 is the bottom edge `y = 0`),
//! column index `j` walks the x-direction.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayView2, ArrayViewMut2, Axis};

use crate::error::{Error, Result};

/// Uniform endpoint-inclusive grid on `[0,1]²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    dof: usize,
    spacing: f64,
}

impl GridSpec {
    /// Grid with `dof` nodes per side, `dof >= 3`.
    pub fn new(dof: usize) -> Result<Self> {
        if dof < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 nodes per side, got {dof}"
            )));
        }
        let spacing = 1.0 / (dof as f64 - 1.0);
        debug_assert!((spacing * (dof as f64 - 1.0) - 1.0).abs() <= 1e-12);
        Ok(Self { dof, spacing })
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Coordinate of node `k` along either axis.
    pub fn coord(&self, k: usize) -> f64 {
        k as f64 * self.spacing
    }
}

/// One `DOF × DOF` grid of real values: a discretized `u`, `f` or mask image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField2D {
    grid: GridSpec,
    values: Array2<f64>,
}

impl ScalarField2D {
    pub fn new(grid: GridSpec, values: Array2<f64>) -> Result<Self> {
        if values.nrows() != grid.dof() || values.ncols() != grid.dof() {
            return Err(Error::ShapeMismatch(format!(
                "field is {}x{}, grid wants {0}x{0}",
                values.nrows(),
                values.ncols(),
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("scalar field"));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            values: Array2::zeros((grid.dof(), grid.dof())),
        }
    }

    /// Sample `f(x, y)` at every node.
    pub fn from_fn(grid: GridSpec, f: impl Fn(f64, f64) -> f64) -> Self {
        let n = grid.dof();
        let values = Array2::from_shape_fn((n, n), |(i, j)| f(grid.coord(j), grid.coord(i)));
        Self { grid, values }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

/// Rank-4 value block `[N, C, DOF, DOF]` housing input channels (F, G) or the
/// output channel (U).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldBatch {
    values: Array4<f64>,
}

impl FieldBatch {
    pub fn new(values: Array4<f64>) -> Result<Self> {
        let (_, c, h, w) = values.dim();
        if c != 1 && c != 2 {
            return Err(Error::ShapeMismatch(format!(
                "field batch supports 1 or 2 channels, got {c}"
            )));
        }
        if h != w {
            return Err(Error::ShapeMismatch(format!(
                "field batch must be square, got {h}x{w}"
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("field batch"));
        }
        Ok(Self { values })
    }

    pub fn zeros(n: usize, channels: usize, dof: usize) -> Self {
        Self {
            values: Array4::zeros((n, channels, dof, dof)),
        }
    }

    pub fn n(&self) -> usize {
        self.values.dim().0
    }

    pub fn channels(&self) -> usize {
        self.values.dim().1
    }

    pub fn dof(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array4<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array4<f64> {
        self.values
    }

    /// View of one sample's channel as a 2D field.
    pub fn field(&self, sample: usize, channel: usize) -> ArrayView2<'_, f64> {
        self.values
            .view()
            .index_axis_move(Axis(0), sample)
            .index_axis_move(Axis(0), channel)
    }

    pub fn field_mut(&mut self, sample: usize, channel: usize) -> ArrayViewMut2<'_, f64> {
        self.values
            .view_mut()
            .index_axis_move(Axis(0), sample)
            .index_axis_move(Axis(0), channel)
    }
}

/// Per-channel normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Empirical per-channel mean and standard deviation over all samples and
/// pixels. A channel with zero spread gets `std = 1` so normalization is the
/// identity shift.
pub fn compute_stats(batch: &FieldBatch) -> Vec<ChannelStats> {
    let c = batch.channels();
    let count = (batch.n() * batch.dof() * batch.dof()) as f64;
    (0..c)
        .map(|ch| {
            let lane = batch.values().index_axis(Axis(1), ch);
            let mean = lane.sum() / count;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let std = var.sqrt();
            ChannelStats {
                mean,
                std: if std > 0.0 { std } else { 1.0 },
            }
        })
        .collect()
}

/// Standardize each channel: `(v - mean) / std`.
pub fn normalize(batch: &FieldBatch, stats: &[ChannelStats]) -> Result<FieldBatch> {
    transform(batch, stats, |v, s| (v - s.mean) / s.std)
}

/// Inverse of [`normalize`]: `v * std + mean`.
pub fn denormalize(batch: &FieldBatch, stats: &[ChannelStats]) -> Result<FieldBatch> {
    transform(batch, stats, |v, s| v * s.std + s.mean)
}

fn transform(
    batch: &FieldBatch,
    stats: &[ChannelStats],
    op: impl Fn(f64, &ChannelStats) -> f64,
) -> Result<FieldBatch> {
    if stats.len() != batch.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{} channels but {} stats",
            batch.channels(),
            stats.len()
        )));
    }
    for (ch, s) in stats.iter().enumerate() {
        if !(s.std > 0.0) {
            return Err(Error::DegenerateChannel(ch));
        }
    }
    let mut values = batch.values().clone();
    for (ch, s) in stats.iter().enumerate() {
        values
            .index_axis_mut(Axis(1), ch)
            .mapv_inplace(|v| op(v, s));
    }
    FieldBatch::new(values)
}

/// The three studied problem families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseId {
    /// Single fixed forward problem.
    Case1,
    /// Parametrized source term.
    Case2,
    /// Parametrized source term and boundary values.
    Case3,
}

impl CaseId {
    pub fn code(self) -> u32 {
        match self {
            CaseId::Case1 => 1,
            CaseId::Case2 => 2,
            CaseId::Case3 => 3,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(CaseId::Case1),
            2 => Ok(CaseId::Case2),
            3 => Ok(CaseId::Case3),
            other => Err(Error::HeaderMismatch(format!("unknown case id {other}"))),
        }
    }
}

/// A labeled or unlabeled sample set with its normalization statistics.
///
/// `inputs` carries the raw (unnormalized) source channel F and boundary mask
/// channel G; `outputs`, when present, carries the raw reference solution U.
/// `norm_stats` holds the input-channel statistics of the training split; test
/// datasets carry a copy of the training statistics.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub case_id: CaseId,
    pub seed: u64,
    pub inputs: FieldBatch,
    pub outputs: Option<FieldBatch>,
    pub norm_stats: Vec<ChannelStats>,
}

impl Dataset {
    /// Validates the cross-field invariants.
    pub fn validate(&self) -> Result<()> {
        if let Some(out) = &self.outputs {
            if out.n() != self.inputs.n() {
                return Err(Error::ShapeMismatch(format!(
                    "{} inputs but {} outputs",
                    self.inputs.n(),
                    out.n()
                )));
            }
            if out.dof() != self.inputs.dof() || out.channels() != 1 {
                return Err(Error::ShapeMismatch(
                    "outputs must be [N, 1, DOF, DOF] matching inputs".into(),
                ));
            }
        }
        if self.norm_stats.len() != self.inputs.channels() {
            return Err(Error::ShapeMismatch(format!(
                "{} channels but {} stats",
                self.inputs.channels(),
                self.norm_stats.len()
            )));
        }
        if self.norm_stats.iter().any(|s| !(s.std > 0.0)) {
            return Err(Error::HeaderMismatch("non-positive channel std".into()));
        }
        Ok(())
    }

    /// Copy the normalization statistics of another (training) dataset.
    pub fn with_stats_from(mut self, train: &Dataset) -> Self {
        self.norm_stats = train.norm_stats.clone();
        self
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.inputs.dof())
    }
}

const MAGIC: &[u8; 8] = b"DCRM0001";

/// Write the dataset container: magic `DCRM0001`, u32 case id, u64 seed,
/// u32 N, u32 C_in, u32 DOF, u8 has_outputs, `C_in` pairs of f64 mean/std,
/// then the row-major f64 input payload and, if present, the output payload.
/// All integers and floats little-endian.
pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.validate()?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&dataset.case_id.code().to_le_bytes())?;
    w.write_all(&dataset.seed.to_le_bytes())?;
    w.write_all(&(dataset.inputs.n() as u32).to_le_bytes())?;
    w.write_all(&(dataset.inputs.channels() as u32).to_le_bytes())?;
    w.write_all(&(dataset.inputs.dof() as u32).to_le_bytes())?;
    w.write_all(&[dataset.outputs.is_some() as u8])?;
    for s in &dataset.norm_stats {
        w.write_all(&s.mean.to_le_bytes())?;
        w.write_all(&s.std.to_le_bytes())?;
    }
    write_payload(&mut w, dataset.inputs.values())?;
    if let Some(out) = &dataset.outputs {
        write_payload(&mut w, out.values())?;
    }
    w.flush()?;
    Ok(())
}

fn write_payload(w: &mut impl Write, values: &Array4<f64>) -> Result<()> {
    // Standard layout means plain iteration is row-major.
    let owned;
    let values = if values.is_standard_layout() {
        values.view()
    } else {
        owned = values.as_standard_layout().into_owned();
        owned.view()
    };
    for v in values.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read a dataset container written by [`write_dataset`].
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: "DCRM0001" });
    }
    let case_id = CaseId::from_code(cur.u32()?)?;
    let seed = cur.u64()?;
    let n = cur.u32()? as usize;
    let c_in = cur.u32()? as usize;
    let dof = cur.u32()? as usize;
    let has_outputs = match cur.u8()? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::HeaderMismatch(format!(
                "has_outputs flag must be 0 or 1, got {other}"
            )))
        }
    };
    if n == 0 {
        return Err(Error::HeaderMismatch("empty dataset (N = 0)".into()));
    }
    if c_in != 1 && c_in != 2 {
        return Err(Error::HeaderMismatch(format!("C_in must be 1 or 2, got {c_in}")));
    }
    if dof < 3 {
        return Err(Error::HeaderMismatch(format!("DOF must be at least 3, got {dof}")));
    }
    let mut norm_stats = Vec::with_capacity(c_in);
    for ch in 0..c_in {
        let mean = cur.f64()?;
        let std = cur.f64()?;
        if !(std > 0.0) || !mean.is_finite() || !std.is_finite() {
            return Err(Error::HeaderMismatch(format!(
                "invalid stats for channel {ch}: mean {mean}, std {std}"
            )));
        }
        norm_stats.push(ChannelStats { mean, std });
    }

    let in_len = n * c_in * dof * dof;
    let out_len = if has_outputs { n * dof * dof } else { 0 };
    let expected = (in_len + out_len) as u64 * 8;
    let remaining = (bytes.len() - cur.pos) as u64;
    if remaining < expected {
        return Err(Error::TruncatedPayload { expected, found: remaining });
    }
    if remaining > expected {
        return Err(Error::TrailingBytes(remaining - expected));
    }

    let inputs = FieldBatch::new(Array4::from_shape_vec(
        (n, c_in, dof, dof),
        cur.f64_block(in_len)?,
    )
    .expect("length checked"))?;
    let outputs = if has_outputs {
        Some(FieldBatch::new(
            Array4::from_shape_vec((n, 1, dof, dof), cur.f64_block(out_len)?)
                .expect("length checked"),
        )?)
    } else {
        None
    };

    let dataset = Dataset { case_id, seed, inputs, outputs, norm_stats };
    dataset.validate()?;
    Ok(dataset)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::TruncatedPayload {
                expected: len as u64,
                found: (self.bytes.len() - self.pos) as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_block(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
