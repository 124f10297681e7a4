//! Boundary specification, masking-channel construction and hard boundary
//! enforcement by ghost-cell padding.
//!
//! Dirichlet conditions are enforced hard: the outermost pixel layer of the
//! field is overwritten with exact boundary values *and* a ghost ring carrying
//! the same values is added around it, so a 3×3 stencil stays valid at every
//! node and the boundary residual of every loss is identically zero. Neumann
//! edges get flux ghosts `ghost = inner + 2h·g_N` (outward normal), with
//! undefined padded corners filled by the average of their two edge-ghost
//! neighbours. Periodic edges wrap: the ghost line is the opposite outermost
//! line, corners wrap diagonally.
//!
//! Edge value functions are parameterized by the natural axis coordinate:
//! x for bottom/top, y for left/right. Ghost cells that extrapolate past the
//! edge (the ring's end cells) clamp the parameter to `[0,1]`.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, ArrayViewMut2, s};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField2D};

/// Boundary condition kind of one edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BcKind {
    Dirichlet,
    Neumann,
    Periodic,
}

/// The four edges of the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    Bottom,
    Right,
    Top,
    Left,
}

impl Edge {
    pub const ALL: [Edge; 4] = [Edge::Bottom, Edge::Right, Edge::Top, Edge::Left];
}

/// Boundary value as a function of the edge parameter in `[0,1]`.
pub type EdgeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// One edge's condition; `value` is `g_D` or `g_N`, absent for periodic edges.
#[derive(Clone)]
pub struct EdgeCondition {
    pub kind: BcKind,
    pub value: Option<EdgeFn>,
}

impl EdgeCondition {
    pub fn dirichlet(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { kind: BcKind::Dirichlet, value: Some(Arc::new(f)) }
    }

    pub fn neumann(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { kind: BcKind::Neumann, value: Some(Arc::new(f)) }
    }

    pub fn periodic() -> Self {
        Self { kind: BcKind::Periodic, value: None }
    }

    fn eval(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        match &self.value {
            Some(f) => f(t),
            None => 0.0,
        }
    }
}

impl std::fmt::Debug for EdgeCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "EdgeCondition({:?})", self.kind)
    }
}

/// Per-edge boundary conditions.
#[derive(Debug, Clone)]
pub struct BoundarySpec {
    pub bottom: EdgeCondition,
    pub right: EdgeCondition,
    pub top: EdgeCondition,
    pub left: EdgeCondition,
}

impl BoundarySpec {
    pub fn dirichlet(
        bottom: impl Fn(f64) -> f64 + Send + Sync + 'static,
        right: impl Fn(f64) -> f64 + Send + Sync + 'static,
        top: impl Fn(f64) -> f64 + Send + Sync + 'static,
        left: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            bottom: EdgeCondition::dirichlet(bottom),
            right: EdgeCondition::dirichlet(right),
            top: EdgeCondition::dirichlet(top),
            left: EdgeCondition::dirichlet(left),
        }
    }

    pub fn constant_dirichlet(c: f64) -> Self {
        Self::dirichlet(move |_| c, move |_| c, move |_| c, move |_| c)
    }

    pub fn all_periodic() -> Self {
        Self {
            bottom: EdgeCondition::periodic(),
            right: EdgeCondition::periodic(),
            top: EdgeCondition::periodic(),
            left: EdgeCondition::periodic(),
        }
    }

    pub fn edge(&self, e: Edge) -> &EdgeCondition {
        match e {
            Edge::Bottom => &self.bottom,
            Edge::Right => &self.right,
            Edge::Top => &self.top,
            Edge::Left => &self.left,
        }
    }

    pub fn all_dirichlet(&self) -> bool {
        Edge::ALL.iter().all(|e| self.edge(*e).kind == BcKind::Dirichlet)
    }

    /// Periodic edges must come in opposing pairs.
    pub fn validate(&self) -> Result<()> {
        let periodic = |e: Edge| self.edge(e).kind == BcKind::Periodic;
        if periodic(Edge::Bottom) != periodic(Edge::Top)
            || periodic(Edge::Left) != periodic(Edge::Right)
        {
            return Err(Error::UnsupportedBoundary(
                "periodic edges must come in opposing pairs".into(),
            ));
        }
        Ok(())
    }
}

/// Masking-function image: `g` on border pixels, zero inside, plus the
/// optional type image (1.0 on Dirichlet, 2.0 on Neumann border pixels).
#[derive(Debug, Clone)]
pub struct BoundaryMaskImage {
    pub grid: GridSpec,
    pub values: ScalarField2D,
    pub type_image: Option<ScalarField2D>,
}

/// Paint `g(x)` onto the border pixels of an otherwise zero image. Edges are
/// painted bottom, top, left, right, so the side columns take the corners;
/// continuous traces make the order invisible.
pub fn build_mask_channel(spec: &BoundarySpec, grid: GridSpec) -> BoundaryMaskImage {
    let n = grid.dof();
    let mut values = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let t = grid.coord(j);
        values[[0, j]] = spec.bottom.eval(t);
        values[[n - 1, j]] = spec.top.eval(t);
    }
    for i in 0..n {
        let t = grid.coord(i);
        values[[i, 0]] = spec.left.eval(t);
        values[[i, n - 1]] = spec.right.eval(t);
    }
    let values = ScalarField2D::new(grid, values).expect("mask shape matches grid");
    let type_image = build_type_image(spec, grid).ok();
    BoundaryMaskImage { grid, values, type_image }
}

/// Border pixels tagged 1.0 (Dirichlet) or 2.0 (Neumann); periodic edges have
/// no tag and make this an error.
pub fn build_type_image(spec: &BoundarySpec, grid: GridSpec) -> Result<ScalarField2D> {
    let tag = |e: Edge| -> Result<f64> {
        match spec.edge(e).kind {
            BcKind::Dirichlet => Ok(1.0),
            BcKind::Neumann => Ok(2.0),
            BcKind::Periodic => Err(Error::UnsupportedBoundary(
                "periodic edges have no type tag".into(),
            )),
        }
    };
    let n = grid.dof();
    let mut values = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        values[[0, j]] = tag(Edge::Bottom)?;
        values[[n - 1, j]] = tag(Edge::Top)?;
    }
    for i in 0..n {
        values[[i, 0]] = tag(Edge::Left)?;
        values[[i, n - 1]] = tag(Edge::Right)?;
    }
    ScalarField2D::new(grid, values)
}

/// Overwrite the outermost pixel layer of `field` with the mask's border
/// values (hard Dirichlet enforcement).
pub fn overwrite_border(field: &mut ArrayViewMut2<'_, f64>, mask: &ArrayView2<'_, f64>) {
    let (n, m) = field.dim();
    assert_eq!((n, m), mask.dim(), "field/mask shape mismatch");
    for j in 0..m {
        field[[0, j]] = mask[[0, j]];
        field[[n - 1, j]] = mask[[n - 1, j]];
    }
    for i in 0..n {
        field[[i, 0]] = mask[[i, 0]];
        field[[i, m - 1]] = mask[[i, m - 1]];
    }
}

/// Ghost-pad a border-enforced field by replicating its outermost ring
/// outward; corners replicate the field corners. For an enforced Dirichlet
/// field the ring carries exactly `g` at the clamped ghost positions.
pub fn ghost_pad_replicate(field: &ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, m) = field.dim();
    let mut out = Array2::<f64>::zeros((n + 2, m + 2));
    out.slice_mut(s![1..n + 1, 1..m + 1]).assign(field);
    for j in 0..m {
        out[[0, j + 1]] = field[[0, j]];
        out[[n + 1, j + 1]] = field[[n - 1, j]];
    }
    for i in 0..n {
        out[[i + 1, 0]] = field[[i, 0]];
        out[[i + 1, m + 1]] = field[[i, m - 1]];
    }
    out[[0, 0]] = field[[0, 0]];
    out[[0, m + 1]] = field[[0, m - 1]];
    out[[n + 1, 0]] = field[[n - 1, 0]];
    out[[n + 1, m + 1]] = field[[n - 1, m - 1]];
    out
}

/// Hard Dirichlet enforcement plus ghost padding: the outermost layer of `u`
/// is overwritten with exact boundary values, then a ghost ring carrying `g`
/// is added, growing `DOF²` to `(DOF+2)²`.
pub fn pad_dirichlet(u: &ScalarField2D, spec: &BoundarySpec) -> Result<Array2<f64>> {
    if !spec.all_dirichlet() {
        return Err(Error::UnsupportedBoundary(
            "pad_dirichlet requires Dirichlet conditions on all edges".into(),
        ));
    }
    let mask = build_mask_channel(spec, u.grid());
    let mut field = u.values().clone();
    overwrite_border(&mut field.view_mut(), &mask.values.values().view());
    Ok(ghost_pad_replicate(&field.view()))
}

/// Flux ghosts for Neumann conditions: `ghost = inner + 2h·g_N` with the
/// outward normal of each edge; padded corners average their two edge-ghost
/// neighbours.
pub fn pad_neumann(u: &ScalarField2D, spec: &BoundarySpec, grid: GridSpec) -> Result<Array2<f64>> {
    for e in Edge::ALL {
        if spec.edge(e).kind != BcKind::Neumann {
            return Err(Error::UnsupportedBoundary(
                "pad_neumann requires Neumann conditions on all edges (use pad_mixed otherwise)"
                    .into(),
            ));
        }
    }
    pad_mixed(u, spec, grid)
}

/// Periodic wrap: ghost lines copy the opposite outermost line, corners wrap
/// diagonally.
pub fn pad_periodic(u: &ScalarField2D) -> Array2<f64> {
    let field = u.values();
    let (n, m) = field.dim();
    let mut out = Array2::<f64>::zeros((n + 2, m + 2));
    out.slice_mut(s![1..n + 1, 1..m + 1]).assign(field);
    for j in 0..m {
        out[[0, j + 1]] = field[[n - 1, j]];
        out[[n + 1, j + 1]] = field[[0, j]];
    }
    for i in 0..n {
        out[[i + 1, 0]] = field[[i, m - 1]];
        out[[i + 1, m + 1]] = field[[i, 0]];
    }
    out[[0, 0]] = field[[n - 1, m - 1]];
    out[[0, m + 1]] = field[[n - 1, 0]];
    out[[n + 1, 0]] = field[[0, m - 1]];
    out[[n + 1, m + 1]] = field[[0, 0]];
    out
}

/// Mixed-type padding, edge by edge. Dirichlet edges enforce the border and
/// carry `g` ghosts; Neumann edges carry flux ghosts; periodic pairs wrap.
/// At a corner where Dirichlet meets another kind, Dirichlet wins.
pub fn pad_mixed(u: &ScalarField2D, spec: &BoundarySpec, grid: GridSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    if grid.dof() != u.grid().dof() {
        return Err(Error::ShapeMismatch("field grid does not match".into()));
    }
    let n = grid.dof();
    let h = grid.spacing();
    let kind = |e: Edge| spec.edge(e).kind;

    // Stage 1: enforce Dirichlet borders on a working copy.
    let mut w = u.values().clone();
    for j in 0..n {
        let t = grid.coord(j);
        if kind(Edge::Bottom) == BcKind::Dirichlet {
            w[[0, j]] = spec.bottom.eval(t);
        }
        if kind(Edge::Top) == BcKind::Dirichlet {
            w[[n - 1, j]] = spec.top.eval(t);
        }
    }
    for i in 0..n {
        let t = grid.coord(i);
        if kind(Edge::Left) == BcKind::Dirichlet {
            w[[i, 0]] = spec.left.eval(t);
        }
        if kind(Edge::Right) == BcKind::Dirichlet {
            w[[i, n - 1]] = spec.right.eval(t);
        }
    }

    // Stage 2: edge ghosts.
    let mut out = Array2::<f64>::zeros((n + 2, n + 2));
    out.slice_mut(s![1..n + 1, 1..n + 1]).assign(&w);
    for j in 0..n {
        let t = grid.coord(j);
        out[[0, j + 1]] = match kind(Edge::Bottom) {
            BcKind::Dirichlet => spec.bottom.eval(t),
            BcKind::Neumann => w[[1, j]] + 2.0 * h * spec.bottom.eval(t),
            BcKind::Periodic => w[[n - 1, j]],
        };
        out[[n + 1, j + 1]] = match kind(Edge::Top) {
            BcKind::Dirichlet => spec.top.eval(t),
            BcKind::Neumann => w[[n - 2, j]] + 2.0 * h * spec.top.eval(t),
            BcKind::Periodic => w[[0, j]],
        };
    }
    for i in 0..n {
        let t = grid.coord(i);
        out[[i + 1, 0]] = match kind(Edge::Left) {
            BcKind::Dirichlet => spec.left.eval(t),
            BcKind::Neumann => w[[i, 1]] + 2.0 * h * spec.left.eval(t),
            BcKind::Periodic => w[[i, n - 1]],
        };
        out[[i + 1, n + 1]] = match kind(Edge::Right) {
            BcKind::Dirichlet => spec.right.eval(t),
            BcKind::Neumann => w[[i, n - 2]] + 2.0 * h * spec.right.eval(t),
            BcKind::Periodic => w[[i, 0]],
        };
    }

    // Stage 3: padded corners. Corner (row ghost r, col ghost c) adjoins one
    // horizontal edge (bottom/top) and one vertical edge (left/right).
    let corners = [
        (0usize, 0usize, Edge::Bottom, Edge::Left, 0.0, 0.0),
        (0, n + 1, Edge::Bottom, Edge::Right, 1.0, 0.0),
        (n + 1, 0, Edge::Top, Edge::Left, 0.0, 1.0),
        (n + 1, n + 1, Edge::Top, Edge::Right, 1.0, 1.0),
    ];
    for (r, c, he, ve, x, y) in corners {
        let hk = kind(he);
        let vk = kind(ve);
        out[[r, c]] = if hk == BcKind::Dirichlet {
            spec.edge(he).eval(x)
        } else if vk == BcKind::Dirichlet {
            spec.edge(ve).eval(y)
        } else if hk == BcKind::Periodic && vk == BcKind::Periodic {
            // Diagonal wrap.
            let i = if r == 0 { n - 1 } else { 0 };
            let j = if c == 0 { n - 1 } else { 0 };
            w[[i, j]]
        } else {
            // Average of the two adjacent edge-ghost cells.
            let horiz_neighbor = out[[r, if c == 0 { 1 } else { n }]];
            let vert_neighbor = out[[if r == 0 { 1 } else { n }, c]];
            0.5 * (horiz_neighbor + vert_neighbor)
        };
    }
    Ok(out)
}

/// Adjoint of the linear part of [`pad_mixed`] (the constant offsets drop
/// out): maps an `(DOF+2)²` cotangent back to `DOF²`.
pub fn pad_mixed_adjoint(
    spec: &BoundarySpec,
    grid: GridSpec,
    cotangent: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    spec.validate()?;
    let n = grid.dof();
    if cotangent.dim() != (n + 2, n + 2) {
        return Err(Error::ShapeMismatch(format!(
            "cotangent is {:?}, expected {}x{}",
            cotangent.dim(),
            n + 2,
            n + 2
        )));
    }
    let kind = |e: Edge| spec.edge(e).kind;

    // Undo stage 3: push corner cotangents onto their sources, accumulating
    // into an extended copy so stages can chain.
    let mut cot = cotangent.to_owned();
    let corners = [
        (0usize, 0usize, Edge::Bottom, Edge::Left),
        (0, n + 1, Edge::Bottom, Edge::Right),
        (n + 1, 0, Edge::Top, Edge::Left),
        (n + 1, n + 1, Edge::Top, Edge::Right),
    ];
    let mut d_w = Array2::<f64>::zeros((n, n));
    for (r, c, he, ve) in corners {
        let hk = kind(he);
        let vk = kind(ve);
        let g = cot[[r, c]];
        if g == 0.0 {
            continue;
        }
        if hk == BcKind::Dirichlet || vk == BcKind::Dirichlet {
            // Constant: no adjoint contribution.
        } else if hk == BcKind::Periodic && vk == BcKind::Periodic {
            let i = if r == 0 { n - 1 } else { 0 };
            let j = if c == 0 { n - 1 } else { 0 };
            d_w[[i, j]] += g;
        } else {
            cot[[r, if c == 0 { 1 } else { n }]] += 0.5 * g;
            cot[[if r == 0 { 1 } else { n }, c]] += 0.5 * g;
        }
    }

    // Undo stage 2: edge ghosts.
    for j in 0..n {
        match kind(Edge::Bottom) {
            BcKind::Dirichlet => {}
            BcKind::Neumann => d_w[[1, j]] += cot[[0, j + 1]],
            BcKind::Periodic => d_w[[n - 1, j]] += cot[[0, j + 1]],
        }
        match kind(Edge::Top) {
            BcKind::Dirichlet => {}
            BcKind::Neumann => d_w[[n - 2, j]] += cot[[n + 1, j + 1]],
            BcKind::Periodic => d_w[[0, j]] += cot[[n + 1, j + 1]],
        }
    }
    for i in 0..n {
        match kind(Edge::Left) {
            BcKind::Dirichlet => {}
            BcKind::Neumann => d_w[[i, 1]] += cot[[i + 1, 0]],
            BcKind::Periodic => d_w[[i, n - 1]] += cot[[i + 1, 0]],
        }
        match kind(Edge::Right) {
            BcKind::Dirichlet => {}
            BcKind::Neumann => d_w[[i, n - 2]] += cot[[i + 1, n + 1]],
            BcKind::Periodic => d_w[[i, 0]] += cot[[i + 1, n + 1]],
        }
    }

    // Interior pass-through.
    d_w += &cot.slice(s![1..n + 1, 1..n + 1]);

    // Undo stage 1: enforced cells never see the input field.
    for j in 0..n {
        if kind(Edge::Bottom) == BcKind::Dirichlet {
            d_w[[0, j]] = 0.0;
        }
        if kind(Edge::Top) == BcKind::Dirichlet {
            d_w[[n - 1, j]] = 0.0;
        }
    }
    for i in 0..n {
        if kind(Edge::Left) == BcKind::Dirichlet {
            d_w[[i, 0]] = 0.0;
        }
        if kind(Edge::Right) == BcKind::Dirichlet {
            d_w[[i, n - 1]] = 0.0;
        }
    }
    Ok(d_w)
}
