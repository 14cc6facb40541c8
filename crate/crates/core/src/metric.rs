//! Structured inverse preconditioners `U` and the periodic LLQR learner.
//!
//! A [`MetricState`] stores `U` through a small parameter vector whose layout
//! depends on the [`Structure`]. The realized blocks are cached on
//! construction; the state is never mutated in place, so every read between
//! two refreshes sees bit-identical values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::landscapes::{LandscapeError, LayeredNet, Linearization};
use crate::numkit::{self, NumError, ParamVector, SymMatrix};

pub const DEFAULT_DAMPING: f64 = 1e-3;
pub const DEFAULT_U_MIN: f64 = 1e-6;
pub const DEFAULT_U_MAX: f64 = 1e6;
pub const DEFAULT_CADENCE: u64 = 500;
const MAX_HALVINGS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("segmentation mismatch: metric acts on dimension {expected}, vector has {got}")]
    SegmentationMismatch { expected: usize, got: usize },
    #[error("structure mismatch between metric states")]
    StructureMismatch,
    #[error("parameter count mismatch: expected {expected}, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("negative quadratic form gᵀUg = {0:e}; metric state is not SPD")]
    NegativeQuadForm(f64),
    #[error("metric is not positive definite (min eigenvalue {0:e})")]
    NotSpd(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("structure {0:?} has no learnable parameters")]
    NotLearnable(Structure),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Landscape(#[from] LandscapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure {
    Identity,
    Diagonal,
    Dense,
    /// One dense block per layer over `[vec(W_i), b_i]`.
    LayerDense,
    /// `A_i ⊗ B_i` on each row-major `W_i`, diagonal on `b_i`.
    LayerKronecker,
}

/// Parameter shape of one layer: `rows × cols` weight matrix plus bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    pub bias: usize,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols + self.bias
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn layer_shapes(net: &LayeredNet) -> Vec<LayerShape> {
    net.layers()
        .iter()
        .map(|l| LayerShape { rows: l.outputs, cols: l.inputs, bias: if l.bias { l.outputs } else { 0 } })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Diag { param: usize, vec: usize, n: usize },
    Sym { param: usize, vec: usize, n: usize },
    Kron { a: usize, b: usize, vec: usize, rows: usize, cols: usize },
}

#[derive(Debug, Clone, PartialEq)]
enum Cached {
    Diag(DVector<f64>),
    Sym(DMatrix<f64>),
    Kron(DMatrix<f64>, DMatrix<f64>),
}

/// Refresh schedule and spectral guard rails.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSchedule {
    pub ema_beta: f64,
    pub cadence: u64,
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for MetricSchedule {
    fn default() -> Self {
        Self { ema_beta: Divergence::Ngd.default_ema_beta(), cadence: DEFAULT_CADENCE, u_min: DEFAULT_U_MIN, u_max: DEFAULT_U_MAX }
    }
}

impl MetricSchedule {
    pub fn validate(&self) -> Result<(), MetricError> {
        if !(0.0..1.0).contains(&self.ema_beta) {
            return Err(MetricError::InvalidConfig(format!("ema_beta {} outside [0, 1)", self.ema_beta)));
        }
        if self.cadence == 0 {
            return Err(MetricError::InvalidConfig("cadence must be positive".into()));
        }
        if !(self.u_min > 0.0 && self.u_min < self.u_max && self.u_max.is_finite()) {
            return Err(MetricError::InvalidConfig(format!("bad spectral bounds [{}, {}]", self.u_min, self.u_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricState {
    structure: Structure,
    dim: usize,
    layers: Vec<LayerShape>,
    pieces: Vec<Piece>,
    values: Vec<f64>,
    cache: Vec<Cached>,
    pub schedule: MetricSchedule,
    pub step_counter: u64,
}

fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

fn unpack_sym(p: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = p[k];
            m[(j, i)] = p[k];
            k += 1;
        }
    }
    m
}

fn pack_sym(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut p = Vec::with_capacity(packed_len(n));
    for i in 0..n {
        for j in i..n {
            p.push(m[(i, j)]);
        }
    }
    p
}

// Gradient of ⟨X, S⟩ over packed symmetric coordinates of S.
fn pack_sym_grad(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    let mut p = Vec::with_capacity(packed_len(n));
    for i in 0..n {
        for j in i..n {
            p.push(if i == j { x[(i, i)] } else { x[(i, j)] + x[(j, i)] });
        }
    }
    p
}

fn identity_packed(n: usize) -> Vec<f64> {
    pack_sym(&DMatrix::identity(n, n))
}

impl MetricState {
    fn build(structure: Structure, dim: usize, layers: Vec<LayerShape>, values: Vec<f64>, schedule: MetricSchedule) -> Result<Self, MetricError> {
        let mut pieces = Vec::new();
        let mut param = 0;
        match structure {
            Structure::Identity => {}
            Structure::Diagonal => {
                pieces.push(Piece::Diag { param: 0, vec: 0, n: dim });
                param = dim;
            }
            Structure::Dense => {
                pieces.push(Piece::Sym { param: 0, vec: 0, n: dim });
                param = packed_len(dim);
            }
            Structure::LayerDense | Structure::LayerKronecker => {
                let total: usize = layers.iter().map(LayerShape::len).sum();
                if total != dim || layers.is_empty() {
                    return Err(MetricError::SegmentationMismatch { expected: total, got: dim });
                }
                let mut vec = 0;
                for l in &layers {
                    if structure == Structure::LayerDense {
                        pieces.push(Piece::Sym { param, vec, n: l.len() });
                        param += packed_len(l.len());
                    } else {
                        let a = param;
                        let b = a + packed_len(l.rows);
                        pieces.push(Piece::Kron { a, b, vec, rows: l.rows, cols: l.cols });
                        param = b + packed_len(l.cols);
                        if l.bias > 0 {
                            pieces.push(Piece::Diag { param, vec: vec + l.rows * l.cols, n: l.bias });
                            param += l.bias;
                        }
                    }
                    vec += l.len();
                }
            }
        }
        if values.len() != param {
            return Err(MetricError::ParamCount { expected: param, got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MetricError::InvalidConfig("non-finite metric parameter".into()));
        }
        let mut s = Self { structure, dim, layers, pieces, values, cache: Vec::new(), schedule, step_counter: 0 };
        s.cache = s.pieces.iter().map(|p| s.realize_piece(p)).collect();
        Ok(s)
    }

    fn realize_piece(&self, p: &Piece) -> Cached {
        match *p {
            Piece::Diag { param, n, .. } => Cached::Diag(DVector::from_column_slice(&self.values[param..param + n])),
            Piece::Sym { param, n, .. } => Cached::Sym(unpack_sym(&self.values[param..param + packed_len(n)], n)),
            Piece::Kron { a, b, rows, cols, .. } => Cached::Kron(
                unpack_sym(&self.values[a..a + packed_len(rows)], rows),
                unpack_sym(&self.values[b..b + packed_len(cols)], cols),
            ),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::build(Structure::Identity, dim, Vec::new(), Vec::new(), MetricSchedule::default()).expect("identity is valid")
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self, MetricError> {
        Self::build(Structure::Diagonal, diag.len(), Vec::new(), diag.to_vec(), MetricSchedule::default())
    }

    pub fn scaled_identity(dim: usize, c: f64) -> Result<Self, MetricError> {
        Self::diagonal(&vec![c; dim])
    }

    pub fn dense(u: &SymMatrix) -> Result<Self, MetricError> {
        Self::build(Structure::Dense, u.dim(), Vec::new(), pack_sym(u.as_matrix()), MetricSchedule::default())
    }

    /// Identity-initialized state of the given structure over a layered parameter vector.
    pub fn identity_for(structure: Structure, layers: &[LayerShape]) -> Result<Self, MetricError> {
        let dim: usize = layers.iter().map(LayerShape::len).sum();
        let values = match structure {
            Structure::Identity => Vec::new(),
            Structure::Diagonal => vec![1.0; dim],
            Structure::Dense => identity_packed(dim),
            Structure::LayerDense => layers.iter().flat_map(|l| identity_packed(l.len())).collect(),
            Structure::LayerKronecker => layers
                .iter()
                .flat_map(|l| {
                    let mut v = identity_packed(l.rows);
                    v.extend(identity_packed(l.cols));
                    v.extend(std::iter::repeat_n(1.0, l.bias));
                    v
                })
                .collect(),
        };
        Self::build(structure, dim, layers.to_vec(), values, MetricSchedule::default())
    }

    pub fn with_schedule(mut self, schedule: MetricSchedule) -> Result<Self, MetricError> {
        schedule.validate()?;
        self.schedule = schedule;
        Ok(self)
    }

    /// Same structure and schedule, new parameter values. No SPD check.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, MetricError> {
        let mut s = Self::build(self.structure, self.dim, self.layers.clone(), values, self.schedule)?;
        s.step_counter = self.step_counter;
        Ok(s)
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.structure == other.structure && self.dim == other.dim && self.layers == other.layers
    }

    fn check(&self, v: &ParamVector) -> Result<(), MetricError> {
        if v.len() != self.dim {
            return Err(MetricError::SegmentationMismatch { expected: self.dim, got: v.len() });
        }
        Ok(())
    }

    /// `U g`.
    pub fn apply(&self, g: &ParamVector) -> Result<ParamVector, MetricError> {
        self.check(g)?;
        if self.structure == Structure::Identity {
            return Ok(g.clone());
        }
        let mut out = ParamVector::zeros(self.dim);
        for (p, c) in self.pieces.iter().zip(&self.cache) {
            match (p, c) {
                (Piece::Diag { vec, n, .. }, Cached::Diag(d)) => {
                    for k in 0..*n {
                        out[vec + k] = d[k] * g[vec + k];
                    }
                }
                (Piece::Sym { vec, n, .. }, Cached::Sym(m)) => {
                    let r = m * g.rows(*vec, *n);
                    out.rows_mut(*vec, *n).copy_from(&r);
                }
                (Piece::Kron { vec, rows, cols, .. }, Cached::Kron(a, b)) => {
                    let w = DMatrix::from_row_slice(*rows, *cols, &g.as_slice()[*vec..vec + rows * cols]);
                    let r = a * w * b;
                    for i in 0..*rows {
                        for j in 0..*cols {
                            out[vec + i * cols + j] = r[(i, j)];
                        }
                    }
                }
                _ => unreachable!("cache matches pieces"),
            }
        }
        Ok(out)
    }

    /// `U⁻¹ v`; requires an SPD state.
    pub fn apply_inverse(&self, v: &ParamVector) -> Result<ParamVector, MetricError> {
        self.check(v)?;
        if self.structure == Structure::Identity {
            return Ok(v.clone());
        }
        let mut out = ParamVector::zeros(self.dim);
        for (p, c) in self.pieces.iter().zip(&self.cache) {
            match (p, c) {
                (Piece::Diag { vec, n, .. }, Cached::Diag(d)) => {
                    for k in 0..*n {
                        if d[k] <= 0.0 {
                            return Err(MetricError::NotSpd(d[k]));
                        }
                        out[vec + k] = v[vec + k] / d[k];
                    }
                }
                (Piece::Sym { vec, n, .. }, Cached::Sym(m)) => {
                    let inv = numkit::spd_inverse(&SymMatrix::new(m.clone())?)?;
                    let r = inv.as_matrix() * v.rows(*vec, *n);
                    out.rows_mut(*vec, *n).copy_from(&r);
                }
                (Piece::Kron { vec, rows, cols, .. }, Cached::Kron(a, b)) => {
                    let ai = numkit::spd_inverse(&SymMatrix::new(a.clone())?)?;
                    let bi = numkit::spd_inverse(&SymMatrix::new(b.clone())?)?;
                    let w = DMatrix::from_row_slice(*rows, *cols, &v.as_slice()[*vec..vec + rows * cols]);
                    let r = ai.as_matrix() * w * bi.as_matrix();
                    for i in 0..*rows {
                        for j in 0..*cols {
                            out[vec + i * cols + j] = r[(i, j)];
                        }
                    }
                }
                _ => unreachable!("cache matches pieces"),
            }
        }
        Ok(out)
    }

    /// `‖g‖_U = √(gᵀUg)`.
    pub fn dual_norm(&self, g: &ParamVector) -> Result<f64, MetricError> {
        let q = g.dot(&self.apply(g)?);
        if q < 0.0 {
            return Err(MetricError::NegativeQuadForm(q));
        }
        Ok(q.sqrt())
    }

    /// Dense `U`.
    pub fn realized(&self) -> Result<SymMatrix, MetricError> {
        let mut m = DMatrix::identity(self.dim, self.dim);
        if self.structure != Structure::Identity {
            m.fill(0.0);
            for (p, c) in self.pieces.iter().zip(&self.cache) {
                match (p, c) {
                    (Piece::Diag { vec, n, .. }, Cached::Diag(d)) => {
                        for k in 0..*n {
                            m[(vec + k, vec + k)] = d[k];
                        }
                    }
                    (Piece::Sym { vec, n, .. }, Cached::Sym(s)) => {
                        m.view_mut((*vec, *vec), (*n, *n)).copy_from(s);
                    }
                    (Piece::Kron { vec, rows, cols, .. }, Cached::Kron(a, b)) => {
                        let k = a.kronecker(b);
                        m.view_mut((*vec, *vec), (rows * cols, rows * cols)).copy_from(&k);
                    }
                    _ => unreachable!("cache matches pieces"),
                }
            }
        }
        Ok(SymMatrix::new(m)?)
    }

    /// Smallest and largest eigenvalue of the realized `U`.
    pub fn extreme_eigenvalues(&self) -> Result<(f64, f64), MetricError> {
        if self.structure == Structure::Identity {
            return Ok((1.0, 1.0));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &self.cache {
            let vals: Vec<f64> = match c {
                Cached::Diag(d) => d.iter().copied().collect(),
                Cached::Sym(s) => numkit::sym_eig(&SymMatrix::new(s.clone())?)?.values.iter().copied().collect(),
                Cached::Kron(a, b) => {
                    let ea = numkit::sym_eig(&SymMatrix::new(a.clone())?)?.values;
                    let eb = numkit::sym_eig(&SymMatrix::new(b.clone())?)?.values;
                    ea.iter().flat_map(|x| eb.iter().map(move |y| x * y)).collect()
                }
            };
            for v in vals {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        Ok((lo, hi))
    }

    pub fn within_bounds(&self) -> Result<bool, MetricError> {
        let (lo, hi) = self.extreme_eigenvalues()?;
        Ok(lo >= self.schedule.u_min && hi <= self.schedule.u_max)
    }

    /// Gradient of `sᵀ U g` with respect to the parameter vector.
    pub fn bilinear_param_grad(&self, s: &ParamVector, g: &ParamVector) -> Result<Vec<f64>, MetricError> {
        self.check(s)?;
        self.check(g)?;
        let mut out = vec![0.0; self.values.len()];
        for (p, c) in self.pieces.iter().zip(&self.cache) {
            match (p, c) {
                (Piece::Diag { param, vec, n }, _) => {
                    for k in 0..*n {
                        out[param + k] = s[vec + k] * g[vec + k];
                    }
                }
                (Piece::Sym { param, vec, n }, _) => {
                    let outer = s.rows(*vec, *n) * g.rows(*vec, *n).transpose();
                    let packed = pack_sym_grad(&outer);
                    out[*param..param + packed.len()].copy_from_slice(&packed);
                }
                (Piece::Kron { a: pa, b: pb, vec, rows, cols }, Cached::Kron(a, b)) => {
                    // f = tr(Sᵀ A G B): ∂f/∂A = S Bᵀ Gᵀ, ∂f/∂B = Gᵀ Aᵀ S.
                    let sm = DMatrix::from_row_slice(*rows, *cols, &s.as_slice()[*vec..vec + rows * cols]);
                    let gm = DMatrix::from_row_slice(*rows, *cols, &g.as_slice()[*vec..vec + rows * cols]);
                    let da = &sm * b.transpose() * gm.transpose();
                    let db = gm.transpose() * a.transpose() * &sm;
                    let pa_grad = pack_sym_grad(&da);
                    let pb_grad = pack_sym_grad(&db);
                    out[*pa..pa + pa_grad.len()].copy_from_slice(&pa_grad);
                    out[*pb..pb + pb_grad.len()].copy_from_slice(&pb_grad);
                }
                _ => unreachable!("cache matches pieces"),
            }
        }
        Ok(out)
    }

    /// Clamps every block's spectrum into `[u_min, u_max]`. Returns the new
    /// state and whether anything changed.
    pub fn clamp_spectrum(&self) -> Result<(Self, bool), MetricError> {
        let (lo_b, hi_b) = (self.schedule.u_min, self.schedule.u_max);
        let mut values = self.values.clone();
        let mut changed = false;
        let clamp_sym = |m: &DMatrix<f64>, lo: f64, hi: f64| -> Result<(DMatrix<f64>, bool), MetricError> {
            let eig = numkit::sym_eig(&SymMatrix::new(m.clone())?)?;
            if eig.min_value() >= lo && eig.max_value() <= hi {
                return Ok((m.clone(), false));
            }
            Ok((eig.map_spectrum(|x| x.clamp(lo, hi)).into_inner(), true))
        };
        for (p, c) in self.pieces.iter().zip(&self.cache) {
            match (p, c) {
                (Piece::Diag { param, n, .. }, _) => {
                    for v in &mut values[*param..param + n] {
                        let cl = v.clamp(lo_b, hi_b);
                        changed |= cl != *v;
                        *v = cl;
                    }
                }
                (Piece::Sym { param, .. }, Cached::Sym(m)) => {
                    let (cm, ch) = clamp_sym(m, lo_b, hi_b)?;
                    if ch {
                        let packed = pack_sym(&cm);
                        values[*param..param + packed.len()].copy_from_slice(&packed);
                        changed = true;
                    }
                }
                (Piece::Kron { a: pa, b: pb, .. }, Cached::Kron(a, b)) => {
                    let ea = numkit::sym_eig(&SymMatrix::new(a.clone())?)?.values;
                    let eb = numkit::sym_eig(&SymMatrix::new(b.clone())?)?.values;
                    let prods = ea.iter().flat_map(|x| eb.iter().map(move |y| x * y));
                    if prods.clone().all(|x| x >= lo_b && x <= hi_b) {
                        continue;
                    }
                    // Products of factor spectra cannot be clamped independently:
                    // fix the sign, balance the factor scales, then clamp each
                    // factor into [√u_min, √u_max].
                    let (mut a, mut b) = (a.clone(), b.clone());
                    if ea.max() <= 0.0 && eb.max() <= 0.0 {
                        a.neg_mut();
                        b.neg_mut();
                    }
                    let (ma, mb) = (a.symmetric_eigenvalues().max(), b.symmetric_eigenvalues().max());
                    if ma > 0.0 && mb > 0.0 {
                        let c = (mb / ma).sqrt();
                        a *= c;
                        b /= c;
                    }
                    let (ca, _) = clamp_sym(&a, lo_b.sqrt(), hi_b.sqrt())?;
                    let (cb, _) = clamp_sym(&b, lo_b.sqrt(), hi_b.sqrt())?;
                    let pa_v = pack_sym(&ca);
                    let pb_v = pack_sym(&cb);
                    values[*pa..pa + pa_v.len()].copy_from_slice(&pa_v);
                    values[*pb..pb + pb_v.len()].copy_from_slice(&pb_v);
                    changed = true;
                }
                _ => unreachable!("cache matches pieces"),
            }
        }
        Ok((self.with_values(values)?, changed))
    }

    /// `true` when a refresh is due at the current step counter.
    pub fn refresh_due(&self) -> bool {
        self.step_counter % self.schedule.cadence == 0
    }

    pub fn tick(&mut self) {
        self.step_counter += 1;
    }
}

/// `β·old + (1−β)·fresh` on the parameter vectors, followed by a spectral
/// clamp into `[u_min, u_max]` when the result leaves the bounds.
pub fn ema_update(old: &MetricState, fresh: &MetricState, beta: f64) -> Result<(MetricState, bool), MetricError> {
    if !old.same_shape(fresh) {
        return Err(MetricError::StructureMismatch);
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(MetricError::InvalidConfig(format!("EMA factor {beta} outside [0, 1]")));
    }
    let values = old.values.iter().zip(&fresh.values).map(|(o, f)| beta * o + (1.0 - beta) * f).collect();
    let mixed = old.with_values(values)?;
    let (clamped, changed) = mixed.clamp_spectrum()?;
    if changed {
        let (lo, hi) = mixed.extreme_eigenvalues()?;
        log::warn!(
            "metric spectrum [{lo:e}, {hi:e}] left [{:e}, {:e}]; clamped",
            old.schedule.u_min,
            old.schedule.u_max
        );
    }
    Ok((clamped, changed))
}

// ---------------------------------------------------------------------------
// LQR blocks and the relaxed objective

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    Ngd,
    Newton,
}

impl Divergence {
    pub fn default_ema_beta(self) -> f64 {
        match self {
            Divergence::Ngd => 0.95,
            Divergence::Newton => 0.9,
        }
    }
}

/// Quadratic-plus-linear cost of the linearized layer dynamics:
/// `J = ∇ℓᵀδx_N + ½δx_NᵀQ_Nδx_N + Σ_i [½δx_iᵀQ_iδx_i + ½δθ_iᵀR_iδθ_i + δθ_iᵀM_iδx_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrBlocks {
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    /// `M_i` maps states to parameters (`dim θ_i × dim x_i`).
    pub m: Vec<DMatrix<f64>>,
    pub q_terminal: DMatrix<f64>,
    pub terminal_grad: DVector<f64>,
    pub divergence: Divergence,
}

/// NGD: Gauss–Newton blocks (terminal output curvature, `R_i = damping·I`).
/// Newton: additionally the activation-curvature terms
/// `Σ_k p_{i+1,k} σ''(z_{i,k}) ∇z_{i,k} ∇z_{i,k}ᵀ` split over `Q_i`, `R_i`, `M_i`.
pub fn form_lqr_blocks(lin: &Linearization, net: &LayeredNet, divergence: Divergence, damping: f64) -> Result<LqrBlocks, MetricError> {
    if damping < 0.0 || !damping.is_finite() {
        return Err(MetricError::InvalidConfig(format!("damping {damping} must be finite and nonnegative")));
    }
    let n = net.depth();
    if lin.depth() != n {
        return Err(MetricError::SegmentationMismatch { expected: n, got: lin.depth() });
    }
    let ev = &lin.eval;
    let q_terminal = net.loss_kind().hessian(&ev.states[n], net.target());
    let terminal_grad = ev.costates[n].clone();
    let mut q = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    for (i, spec) in net.layers().iter().enumerate() {
        let p = spec.param_len();
        let mut qi = DMatrix::zeros(spec.inputs, spec.inputs);
        let mut ri = DMatrix::identity(p, p) * damping;
        let mut mi = DMatrix::zeros(p, spec.inputs);
        if divergence == Divergence::Newton {
            for k in 0..spec.outputs {
                let w = ev.costates[i + 1][k] * spec.activation.second(ev.preacts[i][k]);
                if w == 0.0 {
                    continue;
                }
                let row = net.weight_row(&lin.theta, i, k);
                let c = net.preact_param_grad(i, &ev.states[i], k);
                qi += &row * row.transpose() * w;
                ri += &c * c.transpose() * w;
                mi += &c * row.transpose() * w;
            }
        }
        q.push(qi);
        r.push(ri);
        m.push(mi);
    }
    Ok(LqrBlocks { q, r, m, q_terminal, terminal_grad, divergence })
}

struct Rollout {
    j: f64,
    dtheta: ParamVector,
    dx: Vec<DVector<f64>>,
}

fn rollout(metric: &MetricState, blocks: &LqrBlocks, lin: &Linearization, net: &LayeredNet, grad: &ParamVector) -> Result<Rollout, MetricError> {
    if grad.len() != net.param_len() {
        return Err(MetricError::SegmentationMismatch { expected: net.param_len(), got: grad.len() });
    }
    let dtheta = -metric.apply(grad)?;
    let dx = lin.rollout(net, &dtheta)?;
    let n = net.depth();
    let xn = &dx[n];
    let mut j = blocks.terminal_grad.dot(xn) + 0.5 * xn.dot(&(&blocks.q_terminal * xn));
    for i in 0..n {
        let th = dtheta.rows_range(net.segment(i));
        let x = &dx[i];
        j += 0.5 * x.dot(&(&blocks.q[i] * x)) + 0.5 * th.dot(&(&blocks.r[i] * th)) + th.dot(&(&blocks.m[i] * x));
    }
    Ok(Rollout { j, dtheta, dx })
}

/// `J(U)` with `δθ = −U∇L` rolled through the linearized layers from `δx_0 = 0`.
pub fn relaxed_objective(metric: &MetricState, blocks: &LqrBlocks, lin: &Linearization, net: &LayeredNet, grad: &ParamVector) -> Result<f64, MetricError> {
    Ok(rollout(metric, blocks, lin, net, grad)?.j)
}

/// `∂J/∂(U parameters)` by one forward rollout and one backward adjoint pass.
pub fn relaxed_objective_grad(
    metric: &MetricState,
    blocks: &LqrBlocks,
    lin: &Linearization,
    net: &LayeredNet,
    grad: &ParamVector,
) -> Result<(f64, Vec<f64>), MetricError> {
    let ro = rollout(metric, blocks, lin, net, grad)?;
    let n = net.depth();
    let mut s = ParamVector::zeros(net.param_len());
    let mut p = &blocks.terminal_grad + &blocks.q_terminal * &ro.dx[n];
    for i in (0..n).rev() {
        let seg = net.segment(i);
        let th = ro.dtheta.rows_range(seg.clone()).clone_owned();
        let x = &ro.dx[i];
        let si = &blocks.r[i] * &th + &blocks.m[i] * x + lin.b[i].transpose() * &p;
        s.rows_range_mut(seg).copy_from(&si);
        p = &blocks.q[i] * x + blocks.m[i].transpose() * &th + lin.a[i].transpose() * &p;
    }
    let g = metric.bilinear_param_grad(&s, grad)?;
    Ok((ro.j, g.into_iter().map(|v| -v).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerSolverConfig {
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub momentum: f64,
    pub damping: f64,
}

impl Default for InnerSolverConfig {
    fn default() -> Self {
        Self { inner_steps: 50, inner_lr: 1e-3, momentum: 0.9, damping: DEFAULT_DAMPING }
    }
}

impl InnerSolverConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.inner_steps == 0 {
            return Err(MetricError::InvalidConfig("inner_steps must be at least 1".into()));
        }
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return Err(MetricError::InvalidConfig(format!("inner_lr {} must be positive", self.inner_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MetricError::InvalidConfig(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(MetricError::InvalidConfig(format!("damping {} must be nonnegative", self.damping)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnOutcome {
    pub state: MetricState,
    pub j_initial: f64,
    pub j_final: f64,
    pub halvings: usize,
    pub clamped: bool,
    /// The inner solve never decreased `J`; `state` is the old metric.
    pub fell_back: bool,
}

/// One refresh: `T` heavy-ball steps on `J` from the current `U`, then EMA
/// and spectral clamp. If `J(U_T) > J(U_0)` the whole inner solve is
/// retried with half the step size, up to ten times.
pub fn learn_preconditioner(
    state: &MetricState,
    net: &LayeredNet,
    theta: &ParamVector,
    divergence: Divergence,
    cfg: &InnerSolverConfig,
) -> Result<LearnOutcome, MetricError> {
    cfg.validate()?;
    if state.param_count() == 0 {
        return Err(MetricError::NotLearnable(state.structure()));
    }
    let lin = net.linearize(theta)?;
    let blocks = form_lqr_blocks(&lin, net, divergence, cfg.damping)?;
    let grad = lin.eval.grad.clone();
    let j0 = relaxed_objective(state, &blocks, &lin, net, &grad)?;

    let mut lr = cfg.inner_lr;
    for halvings in 0..=MAX_HALVINGS {
        let mut v = state.values().to_vec();
        let mut vel = vec![0.0; v.len()];
        for _ in 0..cfg.inner_steps {
            let cur = state.with_values(v.clone())?;
            let (_, g) = relaxed_objective_grad(&cur, &blocks, &lin, net, &grad)?;
            for k in 0..v.len() {
                vel[k] = cfg.momentum * vel[k] - lr * g[k];
                v[k] += vel[k];
            }
        }
        let fresh = state.with_values(v)?;
        let jt = relaxed_objective(&fresh, &blocks, &lin, net, &grad)?;
        if jt.is_finite() && jt <= j0 {
            let (next, clamped) = ema_update(state, &fresh, state.schedule.ema_beta)?;
            let j_final = relaxed_objective(&next, &blocks, &lin, net, &grad)?;
            return Ok(LearnOutcome { state: next, j_initial: j0, j_final, halvings, clamped, fell_back: false });
        }
        lr *= 0.5;
    }
    log::warn!("preconditioner refresh failed to decrease J after {MAX_HALVINGS} halvings; keeping previous metric");
    Ok(LearnOutcome { state: state.clone(), j_initial: j0, j_final: j0, halvings: MAX_HALVINGS, clamped: false, fell_back: true })
}
