//! Parametric problem families (Cases 1–3), Latin Hypercube sampling of
//! their parameter boxes, and dataset assembly.
//!
//! Sign convention: the cases define `Δu = f` (the solver, residual and
//! energy all follow it), so the energy integrand carries `+ u·f`.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boundary::{build_mask_channel, BoundarySpec};
use crate::error::{Error, Result};
use crate::grid::{compute_stats, CaseId, Dataset, FieldBatch, GridSpec};
use crate::solver::DirichletSolver;

use std::f64::consts::PI;

/// Source-term parameters of the Case 2/3 family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceParams {
    /// Amplitude, in `[1, 10]`.
    pub alpha: f64,
    /// Phase shifts, each in `[0, π/2]`.
    pub beta: f64,
    pub gamma: f64,
}

impl SourceParams {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let ok = (1.0..=10.0).contains(&alpha)
            && (0.0..=PI / 2.0).contains(&beta)
            && (0.0..=PI / 2.0).contains(&gamma);
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "source params out of box: alpha {alpha}, beta {beta}, gamma {gamma}"
            )));
        }
        Ok(Self { alpha, beta, gamma })
    }
}

/// Boundary amplitude of the Case 3 family, `|η| ≤ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryParams {
    pub eta: f64,
}

impl BoundaryParams {
    pub fn new(eta: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&eta) {
            return Err(Error::InvalidParameter(format!("eta {eta} out of [-1, 1]")));
        }
        Ok(Self { eta })
    }
}

/// Fixed Case 1 source: `f = 20π²(x²+y²)·sin(π(x+π/4)(y+π/4))`.
pub fn source_case1(x: f64, y: f64) -> f64 {
    20.0 * PI * PI * (x * x + y * y) * (PI * (x + PI / 4.0) * (y + PI / 4.0)).sin()
}

/// Case 2/3 source family: `f = απ²(x²+y²)·sin(π(x+β)(y+γ))`; linear in α.
pub fn source_case23(p: SourceParams, x: f64, y: f64) -> f64 {
    p.alpha * PI * PI * (x * x + y * y) * (PI * (x + p.beta) * (y + p.gamma)).sin()
}

/// Boundary values of Cases 1 and 2: `g = cos(2πy)` on the right edge
/// `(1, y)`, `g = 1` on the remaining edges.
pub fn boundary_case12() -> BoundarySpec {
    BoundarySpec::dirichlet(
        |_| 1.0,
        |y| (2.0 * PI * y).cos(),
        |_| 1.0,
        |_| 1.0,
    )
}

/// Case 3 boundary: the 1D trace `g(z) = η·cos(z)`, `z ∈ [0, 2π]`, projected
/// onto the boundary loop. Arclength runs counterclockwise from the corner
/// `(0,0)` over the perimeter `P = 4`, so `z = 2π·s/4`; the trace is
/// continuous around the loop.
pub fn boundary_case3(p: BoundaryParams) -> BoundarySpec {
    let eta = p.eta;
    BoundarySpec::dirichlet(
        move |x| eta * (PI / 2.0 * x).cos(),
        move |y| eta * (PI / 2.0 * (1.0 + y)).cos(),
        move |x| eta * (PI / 2.0 * (3.0 - x)).cos(),
        move |y| eta * (PI / 2.0 * (4.0 - y)).cos(),
    )
}

/// One case's sampling protocol.
#[derive(Debug, Clone, Copy)]
pub struct CaseDefinition {
    pub case_id: CaseId,
    pub train_count: usize,
    pub test_count: usize,
    pub batch_size: usize,
}

impl CaseDefinition {
    /// The counts used in the studies: Case 1 is a single forward solve,
    /// Case 2 trains on 100 and tests on 1000 samples, Case 3 on 250/1000;
    /// Cases 2–3 use batch size 2.
    pub fn paper(case_id: CaseId) -> Self {
        match case_id {
            CaseId::Case1 => Self { case_id, train_count: 1, test_count: 1, batch_size: 1 },
            CaseId::Case2 => Self { case_id, train_count: 100, test_count: 1000, batch_size: 2 },
            CaseId::Case3 => Self { case_id, train_count: 250, test_count: 1000, batch_size: 2 },
        }
    }

    /// Same protocol with reduced sample counts for desk-scale runs.
    pub fn desk(case_id: CaseId) -> Self {
        match case_id {
            CaseId::Case1 => Self { case_id, train_count: 1, test_count: 1, batch_size: 1 },
            CaseId::Case2 => Self { case_id, train_count: 20, test_count: 100, batch_size: 2 },
            CaseId::Case3 => Self { case_id, train_count: 40, test_count: 100, batch_size: 2 },
        }
    }

    /// Dimension of the LHS box: (α, β, γ) plus η for Case 3.
    pub fn param_dims(&self) -> usize {
        match self.case_id {
            CaseId::Case1 => 0,
            CaseId::Case2 => 3,
            CaseId::Case3 => 4,
        }
    }

    pub fn param_box(&self) -> Vec<(f64, f64)> {
        match self.case_id {
            CaseId::Case1 => vec![],
            CaseId::Case2 => vec![(1.0, 10.0), (0.0, PI / 2.0), (0.0, PI / 2.0)],
            CaseId::Case3 => vec![(1.0, 10.0), (0.0, PI / 2.0), (0.0, PI / 2.0), (-1.0, 1.0)],
        }
    }
}

/// Latin Hypercube sample of `n` points in a `k`-dimensional box: each
/// dimension is split into `n` equal strata holding exactly one point.
/// Deterministic in the seed.
pub fn lhs_sample(bounds: &[(f64, f64)], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one sample".into()));
    }
    for (lo, hi) in bounds {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidParameter(format!("empty box [{lo}, {hi}]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = vec![vec![0.0; bounds.len()]; n];
    for (dim, (lo, hi)) in bounds.iter().enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (i, stratum) in strata.iter().enumerate() {
            let jitter: f64 = rng.gen_range(0.0..1.0);
            let unit = (*stratum as f64 + jitter) / n as f64;
            samples[i][dim] = lo + unit * (hi - lo);
        }
    }
    Ok(samples)
}

/// Per-sample parameters drawn for one case.
#[derive(Debug, Clone, Copy)]
pub enum SampleParams {
    /// Case 1 has no parameters.
    Fixed,
    Parametric { source: SourceParams, eta: Option<f64> },
}

/// Draw the case's parameter set. Case 1 ignores the seed (single fixed
/// problem); Cases 2–3 sample their boxes by LHS.
pub fn sample_case_params(case: &CaseDefinition, n: usize, seed: u64) -> Result<Vec<SampleParams>> {
    match case.case_id {
        CaseId::Case1 => Ok(vec![SampleParams::Fixed; n]),
        CaseId::Case2 | CaseId::Case3 => {
            let points = lhs_sample(&case.param_box(), n, seed)?;
            points
                .into_iter()
                .map(|p| {
                    let source = SourceParams::new(p[0], p[1], p[2])?;
                    let eta = if case.case_id == CaseId::Case3 { Some(p[3]) } else { None };
                    Ok(SampleParams::Parametric { source, eta })
                })
                .collect()
        }
    }
}

/// Boundary spec for one sample of a case.
pub fn sample_boundary_spec(case_id: CaseId, params: &SampleParams) -> Result<BoundarySpec> {
    match (case_id, params) {
        (CaseId::Case1 | CaseId::Case2, _) => Ok(boundary_case12()),
        (CaseId::Case3, SampleParams::Parametric { eta: Some(eta), .. }) => {
            Ok(boundary_case3(BoundaryParams::new(*eta)?))
        }
        (CaseId::Case3, _) => Err(Error::InvalidParameter(
            "Case 3 sample is missing its boundary amplitude".into(),
        )),
    }
}

/// Assemble `n` samples of a case on `grid`: channel 0 is the source field,
/// channel 1 the boundary mask; labels come from the finite-difference
/// solver when requested. Input statistics are computed from this batch
/// (training split); use [`Dataset::with_stats_from`] for test splits.
pub fn assemble_dataset(
    case: &CaseDefinition,
    grid: GridSpec,
    n: usize,
    seed: u64,
    with_labels: bool,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidParameter("dataset needs at least one sample".into()));
    }
    let dof = grid.dof();
    let params = sample_case_params(case, n, seed)?;
    let mut inputs = FieldBatch::zeros(n, 2, dof);
    for (k, p) in params.iter().enumerate() {
        let source: Box<dyn Fn(f64, f64) -> f64> = match p {
            SampleParams::Fixed => Box::new(source_case1),
            SampleParams::Parametric { source, .. } => {
                let s = *source;
                Box::new(move |x, y| source_case23(s, x, y))
            }
        };
        let spec = sample_boundary_spec(case.case_id, p)?;
        let mask = build_mask_channel(&spec, grid);
        {
            let mut f_chan = inputs.field_mut(k, 0);
            for i in 0..dof {
                for j in 0..dof {
                    f_chan[[i, j]] = source(grid.coord(j), grid.coord(i));
                }
            }
        }
        inputs.field_mut(k, 1).assign(mask.values.values());
    }

    let outputs = if with_labels {
        let solver = DirichletSolver::new(grid)?;
        let mut out = FieldBatch::zeros(n, 1, dof);
        for k in 0..n {
            let u: Array2<f64> = solver.solve_masked(inputs.field(k, 0), inputs.field(k, 1))?;
            out.field_mut(k, 0).assign(&u);
        }
        Some(out)
    } else {
        None
    };

    let norm_stats = compute_stats(&inputs);
    let dataset = Dataset { case_id: case.case_id, seed, inputs, outputs, norm_stats };
    dataset.validate()?;
    Ok(dataset)
}
