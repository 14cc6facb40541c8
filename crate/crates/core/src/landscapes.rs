//! Loss oracles: the two-scale quadratic, the 2-D sharp-well toy and a small
//! layered network with per-layer linearization.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{self, NumError, ParamVector, SymMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LandscapeError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("invalid landscape: {0}")]
    Invalid(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// A differentiable loss over a flat parameter vector.
pub trait Landscape: Send + Sync {
    fn dim(&self) -> usize;
    fn loss_grad(&self, theta: &ParamVector) -> Result<(f64, ParamVector), LandscapeError>;
}

/// Coarse location tag used by the toy experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Sharp,
    Flat,
    Neither,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Sharp => "sharp",
            Region::Flat => "flat",
            Region::Neither => "neither",
        }
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), LandscapeError> {
    if expected != got {
        return Err(LandscapeError::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn check_finite(v: &ParamVector) -> Result<(), LandscapeError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LandscapeError::NonFinite)
    }
}

// ---------------------------------------------------------------------------
// Two-scale quadratic

/// `L(θ) = ½ θᵀHθ` with `H = H̄ + H_ε`.
#[derive(Debug, Clone)]
pub struct TwoScaleQuadratic {
    hbar: SymMatrix,
    heps: SymMatrix,
    h: SymMatrix,
    commuting: bool,
}

const COMMUTE_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-12;

impl TwoScaleQuadratic {
    pub fn new(hbar: SymMatrix, heps: SymMatrix) -> Result<Self, LandscapeError> {
        check_len(hbar.dim(), heps.dim())?;
        let hbar_eig = numkit::sym_eig(&hbar)?;
        numkit::require_spd(&hbar_eig)?;
        let heps_eig = numkit::sym_eig(&heps)?;
        let tol = PSD_TOL * heps.frobenius_norm().max(1.0);
        if heps_eig.min_value() < -tol {
            return Err(LandscapeError::Invalid(format!(
                "H_eps has negative eigenvalue {:e}",
                heps_eig.min_value()
            )));
        }
        let h = hbar.add(&heps)?;
        numkit::require_spd(&numkit::sym_eig(&h)?)?;
        let comm = hbar.as_matrix() * heps.as_matrix() - heps.as_matrix() * hbar.as_matrix();
        let commuting = comm.norm() <= COMMUTE_TOL;
        Ok(Self { hbar, heps, h, commuting })
    }

    pub fn diagonal(hbar: &[f64], heps: &[f64]) -> Result<Self, LandscapeError> {
        check_len(hbar.len(), heps.len())?;
        if hbar.is_empty() {
            return Err(LandscapeError::Invalid("empty quadratic".into()));
        }
        Self::new(SymMatrix::from_diagonal(hbar), SymMatrix::from_diagonal(heps))
    }

    /// Diagonal `H̄` with `H_ε`'s eigenbasis rotated by `angle` radians through
    /// consecutive Givens planes (0,1), (1,2), ...
    pub fn rotated(hbar: &[f64], heps: &[f64], angle: f64) -> Result<Self, LandscapeError> {
        check_len(hbar.len(), heps.len())?;
        if hbar.is_empty() {
            return Err(LandscapeError::Invalid("empty quadratic".into()));
        }
        let r = givens_chain(hbar.len(), angle);
        let heps = SymMatrix::from_spectrum(heps, &r)?;
        Self::new(SymMatrix::from_diagonal(hbar), heps)
    }

    /// Random non-commuting instance: `H̄` eigenvalues log-uniform in
    /// [0.05, 2], `H_ε` eigenvalues uniform in [0, 4], rotation angle in
    /// [0.2, 1.2] rad. In one dimension the instance is trivially commuting.
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self, LandscapeError> {
        let hbar: Vec<f64> = (0..dim).map(|_| (rng.random_range(0.05f64.ln()..2.0f64.ln())).exp()).collect();
        let heps: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..4.0)).collect();
        let angle = rng.random_range(0.2..1.2);
        Self::rotated(&hbar, &heps, angle)
    }

    pub fn dim(&self) -> usize {
        self.h.dim()
    }

    pub fn hbar(&self) -> &SymMatrix {
        &self.hbar
    }

    pub fn heps(&self) -> &SymMatrix {
        &self.heps
    }

    pub fn hessian(&self) -> &SymMatrix {
        &self.h
    }

    pub fn is_commuting(&self) -> bool {
        self.commuting
    }

    pub fn eval(&self, theta: &ParamVector) -> Result<(f64, ParamVector), LandscapeError> {
        check_len(self.dim(), theta.len())?;
        let grad = self.h.mul_vec(theta)?;
        Ok((0.5 * theta.dot(&grad), grad))
    }

    /// `H̄⁻¹`, the analytic average-geometry metric.
    pub fn average_metric(&self) -> Result<SymMatrix, LandscapeError> {
        Ok(numkit::spd_inverse(&self.hbar)?)
    }

    /// `A = H̄^{-1/2} H H̄^{-1/2}`.
    pub fn normalized_curvature(&self) -> Result<SymMatrix, LandscapeError> {
        let s = numkit::spd_inv_sqrt(&self.hbar)?;
        Ok(self.h.congruence(s.as_matrix())?)
    }

    /// Eigenvalues `μ_i` of `H̄⁻¹H`, ascending.
    pub fn perceived_sharpness(&self) -> Result<Vec<f64>, LandscapeError> {
        let eig = numkit::sym_eig(&self.normalized_curvature()?)?;
        Ok(eig.values.iter().copied().collect())
    }
}

impl Landscape for TwoScaleQuadratic {
    fn dim(&self) -> usize {
        self.h.dim()
    }

    fn loss_grad(&self, theta: &ParamVector) -> Result<(f64, ParamVector), LandscapeError> {
        self.eval(theta)
    }
}

/// Product of Givens rotations by `angle` in planes (0,1), (1,2), ..., (n-2,n-1).
pub fn givens_chain(dim: usize, angle: f64) -> DMatrix<f64> {
    let mut r = DMatrix::<f64>::identity(dim, dim);
    let (s, c) = angle.sin_cos();
    for p in 0..dim.saturating_sub(1) {
        let mut g = DMatrix::<f64>::identity(dim, dim);
        g[(p, p)] = c;
        g[(p, p + 1)] = -s;
        g[(p + 1, p)] = s;
        g[(p + 1, p + 1)] = c;
        r = g * r;
    }
    r
}

// ---------------------------------------------------------------------------
// Sharp-well toy

/// Radially symmetric toy: `L(r) = ½λ r² − A exp(−(r−r₀)²/(2σ²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SharpWellParams {
    pub lambda_flat: f64,
    pub ring_radius: f64,
    pub ring_depth: f64,
    pub ring_width: f64,
}

impl Default for SharpWellParams {
    fn default() -> Self {
        Self { lambda_flat: 0.01, ring_radius: 5.0, ring_depth: 2.0, ring_width: 0.15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharpWell2D {
    params: SharpWellParams,
    ring_min: f64,
    inner_max: Option<f64>,
    outer_max: Option<f64>,
}

const RADIAL_EPS: f64 = 1e-12;
const SCAN_POINTS: usize = 20_000;

impl SharpWell2D {
    pub fn new(params: SharpWellParams) -> Result<Self, LandscapeError> {
        let SharpWellParams { lambda_flat, ring_radius, ring_depth, ring_width } = params;
        let ok = [lambda_flat, ring_radius, ring_depth, ring_width].iter().all(|x| x.is_finite())
            && lambda_flat > 0.0
            && ring_depth > 0.0
            && ring_width > 0.0
            && ring_radius > 0.0;
        if !ok {
            return Err(LandscapeError::Invalid(format!("bad sharp-well parameters {params:?}")));
        }
        let probe = Self { params, ring_min: f64::NAN, inner_max: None, outer_max: None };
        let r_hi = ring_radius + 12.0 * ring_width;
        let h = r_hi / SCAN_POINTS as f64;

        // Sign changes of dL/dr on a uniform grid, refined by bisection.
        let mut minima = Vec::new();
        let mut maxima = Vec::new();
        let mut prev = probe.radial_slope(h);
        for k in 2..=SCAN_POINTS {
            let r = k as f64 * h;
            let cur = probe.radial_slope(r);
            if prev < 0.0 && cur >= 0.0 {
                minima.push(probe.bisect_slope(r - h, r));
            } else if prev > 0.0 && cur <= 0.0 {
                maxima.push(probe.bisect_slope(r - h, r));
            }
            prev = cur;
        }
        let ring_min = minima
            .iter()
            .copied()
            .min_by(|a, b| (a - ring_radius).abs().total_cmp(&(b - ring_radius).abs()))
            .ok_or_else(|| LandscapeError::Invalid("radial profile has no ring minimum".into()))?;
        if probe.radial_curvature(ring_min) <= 0.0 {
            return Err(LandscapeError::Invalid("ring stationary point is not a strict minimum".into()));
        }
        let inner_max = maxima.iter().copied().filter(|&r| r < ring_min).reduce(f64::max);
        let outer_max = maxima.iter().copied().filter(|&r| r > ring_min).reduce(f64::min);
        if inner_max.is_none() && outer_max.is_none() {
            return Err(LandscapeError::Invalid("ring minimum has no bounding ridge".into()));
        }
        Ok(Self { params, ring_min, inner_max, outer_max })
    }

    pub fn params(&self) -> SharpWellParams {
        self.params
    }

    fn bisect_slope(&self, mut lo: f64, mut hi: f64) -> f64 {
        let s_lo = self.radial_slope(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if (self.radial_slope(mid) < 0.0) == (s_lo < 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn bump(&self, r: f64) -> f64 {
        let d = r - self.params.ring_radius;
        self.params.ring_depth * (-d * d / (2.0 * self.params.ring_width * self.params.ring_width)).exp()
    }

    pub fn radial_loss(&self, r: f64) -> f64 {
        0.5 * self.params.lambda_flat * r * r - self.bump(r)
    }

    pub fn radial_slope(&self, r: f64) -> f64 {
        let s2 = self.params.ring_width * self.params.ring_width;
        self.params.lambda_flat * r + self.bump(r) * (r - self.params.ring_radius) / s2
    }

    pub fn radial_curvature(&self, r: f64) -> f64 {
        let s2 = self.params.ring_width * self.params.ring_width;
        let d = r - self.params.ring_radius;
        self.params.lambda_flat + self.bump(r) * (1.0 / s2 - d * d / (s2 * s2))
    }

    /// Radius `r_m` of the annular local minimum.
    pub fn ring_minimum(&self) -> f64 {
        self.ring_min
    }

    /// Local maximum of the radial profile between the origin and the ring.
    pub fn inner_ridge(&self) -> Option<f64> {
        self.inner_max
    }

    pub fn outer_ridge(&self) -> Option<f64> {
        self.outer_max
    }

    /// Distance from the ring minimum to the nearer radial local maximum.
    pub fn basin_radius(&self) -> f64 {
        let d_in = self.inner_max.map(|r| self.ring_min - r);
        let d_out = self.outer_max.map(|r| r - self.ring_min);
        match (d_in, d_out) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => unreachable!("checked at construction"),
        }
    }

    /// Flat inside the inner ridge, sharp from the ridge out to the far edge
    /// of the basin (outer ridge, or `r_m + r_ε` when the profile has none).
    pub fn region_of_radius(&self, r: f64) -> Region {
        let inner = self.inner_max.unwrap_or(0.0);
        let outer = self.outer_max.unwrap_or(self.ring_min + self.basin_radius());
        if r < inner {
            Region::Flat
        } else if r <= outer {
            Region::Sharp
        } else {
            Region::Neither
        }
    }

    pub fn region(&self, theta: &ParamVector) -> Region {
        self.region_of_radius(theta.norm())
    }

    pub fn eval(&self, theta: &ParamVector) -> Result<(f64, ParamVector), LandscapeError> {
        check_len(2, theta.len())?;
        check_finite(theta)?;
        let r = theta.norm();
        let loss = self.radial_loss(r);
        let grad = if r < RADIAL_EPS {
            ParamVector::zeros(2)
        } else {
            theta * (self.radial_slope(r) / r)
        };
        Ok((loss, grad))
    }
}

impl Landscape for SharpWell2D {
    fn dim(&self) -> usize {
        2
    }

    fn loss_grad(&self, theta: &ParamVector) -> Result<(f64, ParamVector), LandscapeError> {
        self.eval(theta)
    }
}

/// Zero-gradient landscape; used as the flat well of the regenerative model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    pub dim: usize,
}

impl Landscape for Plateau {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss_grad(&self, theta: &ParamVector) -> Result<(f64, ParamVector), LandscapeError> {
        check_len(self.dim, theta.len())?;
        Ok((0.0, ParamVector::zeros(self.dim)))
    }
}

// ---------------------------------------------------------------------------
// Layered network

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
        }
    }

    pub fn first(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn second(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 0.0,
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `½‖x_N − y‖²`
    Squared,
    /// `−Σ_k y_k log softmax(x_N)_k`
    SoftmaxCrossEntropy,
}

impl LossKind {
    pub fn value_grad(self, x: &DVector<f64>, y: &DVector<f64>) -> (f64, DVector<f64>) {
        match self {
            LossKind::Squared => {
                let r = x - y;
                (0.5 * r.norm_squared(), r)
            }
            LossKind::SoftmaxCrossEntropy => {
                let (logp, p) = log_softmax(x);
                let mass: f64 = y.sum();
                (-y.dot(&logp), p * mass - y)
            }
        }
    }

    /// Output-space Hessian `∇²ℓ(x_N)`.
    pub fn hessian(self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        match self {
            LossKind::Squared => DMatrix::identity(x.len(), x.len()),
            LossKind::SoftmaxCrossEntropy => {
                let (_, p) = log_softmax(x);
                let mass: f64 = y.sum();
                (DMatrix::from_diagonal(&p) - &p * p.transpose()) * mass
            }
        }
    }
}

fn log_softmax(x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let m = x.max();
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let logp = x.map(|v| v - lse);
    let p = logp.map(f64::exp);
    (logp, p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub bias: bool,
}

impl LayerSpec {
    pub fn weight_len(&self) -> usize {
        self.inputs * self.outputs
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + if self.bias { self.outputs } else { 0 }
    }
}

/// Layer `i` computes `x_{i+1} = σ(W_i x_i + b_i)`. Parameters are stored
/// per layer as `W_i` row-major followed by `b_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredNet {
    layers: Vec<LayerSpec>,
    input: DVector<f64>,
    target: DVector<f64>,
    loss: LossKind,
    offsets: Vec<usize>,
}

/// Forward states, pre-activations and backpropagated costates.
#[derive(Debug, Clone, PartialEq)]
pub struct NetEval {
    pub loss: f64,
    pub grad: ParamVector,
    /// `x_0 .. x_N`
    pub states: Vec<DVector<f64>>,
    /// `z_0 .. z_{N-1}`
    pub preacts: Vec<DVector<f64>>,
    /// `∂L/∂x_i` for `i = 0 .. N`
    pub costates: Vec<DVector<f64>>,
}

/// Per-layer Jacobians of the forward map at an evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub theta: ParamVector,
    pub eval: NetEval,
}

impl Linearization {
    pub fn depth(&self) -> usize {
        self.a.len()
    }

    /// `δx_{i+1} = A_i δx_i + B_i δθ_i` from `δx_0 = 0`; returns `δx_0 .. δx_N`.
    pub fn rollout(&self, net: &LayeredNet, dtheta: &ParamVector) -> Result<Vec<DVector<f64>>, LandscapeError> {
        check_len(net.param_len(), dtheta.len())?;
        let mut xs = Vec::with_capacity(self.depth() + 1);
        xs.push(DVector::zeros(self.a.first().map_or(0, |a| a.ncols())));
        for i in 0..self.depth() {
            let seg = dtheta.rows_range(net.segment(i));
            let next = &self.a[i] * &xs[i] + &self.b[i] * seg;
            xs.push(next);
        }
        Ok(xs)
    }
}

impl LayeredNet {
    pub fn new(
        layers: Vec<LayerSpec>,
        input: DVector<f64>,
        target: DVector<f64>,
        loss: LossKind,
    ) -> Result<Self, LandscapeError> {
        if layers.is_empty() {
            return Err(LandscapeError::Invalid("network needs at least one layer".into()));
        }
        check_len(layers[0].inputs, input.len())?;
        for w in layers.windows(2) {
            check_len(w[0].outputs, w[1].inputs)?;
        }
        check_len(layers[layers.len() - 1].outputs, target.len())?;
        if layers.iter().any(|l| l.inputs == 0 || l.outputs == 0) {
            return Err(LandscapeError::Invalid("layer widths must be positive".into()));
        }
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for l in &layers {
            acc += l.param_len();
            offsets.push(acc);
        }
        Ok(Self { layers, input, target, loss, offsets })
    }

    /// Convenience constructor: widths `[d_0, d_1, ..., d_N]` with one activation
    /// for all hidden layers and identity output.
    pub fn mlp(
        widths: &[usize],
        hidden: Activation,
        bias: bool,
        input: DVector<f64>,
        target: DVector<f64>,
        loss: LossKind,
    ) -> Result<Self, LandscapeError> {
        if widths.len() < 2 {
            return Err(LandscapeError::Invalid("need at least input and output widths".into()));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| LayerSpec {
                inputs: widths[i],
                outputs: widths[i + 1],
                activation: if i + 1 == n { Activation::Identity } else { hidden },
                bias,
            })
            .collect();
        Self::new(layers, input, target, loss)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn param_len(&self) -> usize {
        self.offsets[self.layers.len()]
    }

    pub fn segment(&self, layer: usize) -> Range<usize> {
        self.offsets[layer]..self.offsets[layer + 1]
    }

    pub fn segments(&self) -> Vec<Range<usize>> {
        (0..self.depth()).map(|i| self.segment(i)).collect()
    }

    pub fn input(&self) -> &DVector<f64> {
        &self.input
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    fn weights(&self, theta: &ParamVector, i: usize) -> (DMatrix<f64>, Option<DVector<f64>>) {
        let l = self.layers[i];
        let off = self.offsets[i];
        let w = DMatrix::from_row_slice(l.outputs, l.inputs, &theta.as_slice()[off..off + l.weight_len()]);
        let b = l
            .bias
            .then(|| DVector::from_column_slice(&theta.as_slice()[off + l.weight_len()..self.offsets[i + 1]]));
        (w, b)
    }

    /// Output `x_N` only.
    pub fn forward(&self, theta: &ParamVector) -> Result<DVector<f64>, LandscapeError> {
        check_len(self.param_len(), theta.len())?;
        let mut x = self.input.clone();
        for i in 0..self.depth() {
            let (w, b) = self.weights(theta, i);
            let mut z = w * x;
            if let Some(b) = b {
                z += b;
            }
            let act = self.layers[i].activation;
            x = z.map(|v| act.value(v));
        }
        Ok(x)
    }

    pub fn forward_backward(&self, theta: &ParamVector) -> Result<NetEval, LandscapeError> {
        check_len(self.param_len(), theta.len())?;
        check_finite(theta)?;
        let n = self.depth();
        let mut states = Vec::with_capacity(n + 1);
        let mut preacts = Vec::with_capacity(n);
        let mut mats = Vec::with_capacity(n);
        states.push(self.input.clone());
        for i in 0..n {
            let (w, b) = self.weights(theta, i);
            let mut z = &w * &states[i];
            if let Some(b) = b {
                z += b;
            }
            let act = self.layers[i].activation;
            states.push(z.map(|v| act.value(v)));
            preacts.push(z);
            mats.push(w);
        }
        let (loss, dl) = self.loss.value_grad(&states[n], &self.target);

        let mut grad = ParamVector::zeros(self.param_len());
        let mut costates = vec![DVector::zeros(0); n + 1];
        costates[n] = dl;
        for i in (0..n).rev() {
            let l = self.layers[i];
            let act = l.activation;
            let delta = costates[i + 1].zip_map(&preacts[i], |p, z| p * act.first(z));
            let off = self.offsets[i];
            for r in 0..l.outputs {
                for c in 0..l.inputs {
                    grad[off + r * l.inputs + c] = delta[r] * states[i][c];
                }
            }
            if l.bias {
                let boff = off + l.weight_len();
                for r in 0..l.outputs {
                    grad[boff + r] = delta[r];
                }
            }
            costates[i] = mats[i].transpose() * delta;
        }
        Ok(NetEval { loss, grad, states, preacts, costates })
    }

    /// `A_i = diag(σ'(z_i)) W_i`, `B_i = diag(σ'(z_i)) ∂z_i/∂θ_i`.
    pub fn linearize(&self, theta: &ParamVector) -> Result<Linearization, LandscapeError> {
        let eval = self.forward_backward(theta)?;
        let mut a = Vec::with_capacity(self.depth());
        let mut b = Vec::with_capacity(self.depth());
        for i in 0..self.depth() {
            let l = self.layers[i];
            let (w, _) = self.weights(theta, i);
            let d: Vec<f64> = eval.preacts[i].iter().map(|&z| l.activation.first(z)).collect();
            let mut ai = w;
            for r in 0..l.outputs {
                ai.row_mut(r).scale_mut(d[r]);
            }
            let mut bi = DMatrix::zeros(l.outputs, l.param_len());
            for r in 0..l.outputs {
                for c in 0..l.inputs {
                    bi[(r, r * l.inputs + c)] = d[r] * eval.states[i][c];
                }
                if l.bias {
                    bi[(r, l.weight_len() + r)] = d[r];
                }
            }
            a.push(ai);
            b.push(bi);
        }
        Ok(Linearization { a, b, theta: theta.clone(), eval })
    }

    /// Gradient of `z_{i,k}` with respect to `θ_i` (local parameter coordinates).
    pub fn preact_param_grad(&self, layer: usize, state: &DVector<f64>, k: usize) -> DVector<f64> {
        let l = self.layers[layer];
        let mut c = DVector::zeros(l.param_len());
        for j in 0..l.inputs {
            c[k * l.inputs + j] = state[j];
        }
        if l.bias {
            c[l.weight_len() + k] = 1.0;
        }
        c
    }

    /// Row `k` of `W_i` as a column vector.
    pub fn weight_row(&self, theta: &ParamVector, layer: usize, k: usize) -> DVector<f64> {
        let l = self.layers[layer];
        let off = self.offsets[layer] + k * l.inputs;
        DVector::from_column_slice(&theta.as_slice()[off..off + l.inputs])
    }
}

impl Landscape for LayeredNet {
    fn dim(&self) -> usize {
        self.param_len()
    }

    fn loss_grad(&self, theta: &ParamVector) -> Result<(f64, ParamVector), LandscapeError> {
        let e = self.forward_backward(theta)?;
        Ok((e.loss, e.grad))
    }
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_difference_grad(f: impl Fn(&ParamVector) -> f64, x: &ParamVector, h: f64) -> ParamVector {
    let mut g = ParamVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Norm-wise relative agreement `‖a − b‖ ≤ rel · max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &ParamVector, b: &ParamVector, floor: f64) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> ParamVector {
        DVector::from_column_slice(x)
    }

    #[test]
    fn quadratic_examples() {
        let q = TwoScaleQuadratic::diagonal(&[1.0, 0.01], &[0.0, 0.99]).unwrap();
        assert_eq!(q.eval(&ParamVector::zeros(2)).unwrap(), (0.0, ParamVector::zeros(2)));
        let (l, g) = q.eval(&v(&[1.0, 1.0])).unwrap();
        assert!((l - 1.0).abs() < 1e-15);
        assert!((g - v(&[1.0, 1.0])).norm() < 1e-15);

        let q1 = TwoScaleQuadratic::diagonal(&[1.0], &[0.0]).unwrap();
        let (l, g) = q1.eval(&v(&[2.0])).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(g, v(&[2.0]));
        assert!(matches!(q1.eval(&v(&[1.0, 2.0])), Err(LandscapeError::DimensionMismatch { .. })));
    }

    #[test]
    fn quadratic_rejects_bad_factors() {
        assert!(TwoScaleQuadratic::diagonal(&[1.0, 0.0], &[0.0, 1.0]).is_err());
        assert!(TwoScaleQuadratic::diagonal(&[1.0, 1.0], &[0.0, -0.5]).is_err());
    }

    #[test]
    fn commuting_flag() {
        assert!(TwoScaleQuadratic::diagonal(&[1.0, 0.01], &[0.0, 0.99]).unwrap().is_commuting());
        let rot = TwoScaleQuadratic::rotated(&[1.0, 0.01], &[0.0, 0.99], 0.5).unwrap();
        assert!(!rot.is_commuting());
    }

    #[test]
    fn flat_geometry_has_unit_perceived_sharpness() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for dim in 1..6 {
            let hbar: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..3.0)).collect();
            let q = TwoScaleQuadratic::rotated(&hbar, &vec![0.0; dim], 0.3).unwrap();
            for mu in q.perceived_sharpness().unwrap() {
                assert!((mu - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perceived_sharpness_of_diagonal_pothole() {
        let q = TwoScaleQuadratic::diagonal(&[1.0, 0.01], &[0.0, 0.99]).unwrap();
        let mu = q.perceived_sharpness().unwrap();
        assert!((mu[0] - 1.0).abs() < 1e-12);
        assert!((mu[1] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn sharpwell_defaults() {
        let w = SharpWell2D::new(SharpWellParams::default()).unwrap();
        let (_, g0) = w.eval(&ParamVector::zeros(2)).unwrap();
        assert_eq!(g0, ParamVector::zeros(2));
        let (l5, _) = w.eval(&v(&[5.0, 0.0])).unwrap();
        assert!((l5 - (0.125 - 2.0)).abs() < 1e-15);
        let (_, gm) = w.eval(&v(&[w.ring_minimum(), 0.0])).unwrap();
        assert!(gm[0].abs() < 1e-8 && gm[1] == 0.0);
        // Independent root of dL/dr = 0 computed with scipy.optimize.brentq.
        assert!((w.ring_minimum() - 4.999437559320763).abs() < 1e-9);
        assert!((w.inner_ridge().unwrap() - 4.4376804044298).abs() < 1e-9);
        assert!(w.outer_ridge().is_none());
        assert!((w.basin_radius() - 0.5617571548909623).abs() < 1e-9);
    }

    #[test]
    fn sharpwell_regions() {
        let w = SharpWell2D::new(SharpWellParams::default()).unwrap();
        assert_eq!(w.region(&v(&[0.0, 0.0])), Region::Flat);
        assert_eq!(w.region(&v(&[0.0, 5.0])), Region::Sharp);
        assert_eq!(w.region(&v(&[9.0, 0.0])), Region::Neither);
    }

    #[test]
    fn sharpwell_rejects_missing_ring() {
        let p = SharpWellParams { lambda_flat: 10.0, ring_depth: 0.01, ..Default::default() };
        assert!(SharpWell2D::new(p).is_err());
    }

    fn scalar_net() -> LayeredNet {
        LayeredNet::mlp(&[1, 1], Activation::Identity, false, v(&[2.0]), v(&[0.0]), LossKind::Squared).unwrap()
    }

    #[test]
    fn scalar_net_example() {
        let net = scalar_net();
        let e = net.forward_backward(&v(&[1.0])).unwrap();
        assert_eq!(e.loss, 2.0);
        assert_eq!(e.grad, v(&[4.0]));
        let lin = net.linearize(&v(&[1.0])).unwrap();
        assert_eq!(lin.a[0][(0, 0)], 1.0);
        assert_eq!(lin.b[0][(0, 0)], 2.0);
    }

    #[test]
    fn zero_linear_net_has_zero_loss() {
        let net = LayeredNet::mlp(&[3, 2, 2], Activation::Identity, true, v(&[1.0, -1.0, 0.5]), v(&[0.0, 0.0]), LossKind::Squared)
            .unwrap();
        let e = net.forward_backward(&ParamVector::zeros(net.param_len())).unwrap();
        assert_eq!(e.loss, 0.0);
        assert_eq!(e.grad, ParamVector::zeros(net.param_len()));
    }

    fn random_net(rng: &mut ChaCha8Rng, act: Activation, loss: LossKind) -> (LayeredNet, ParamVector) {
        let widths = [3, 4, 2];
        let x0 = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let y = match loss {
            LossKind::Squared => DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
            LossKind::SoftmaxCrossEntropy => v(&[0.3, 0.7]),
        };
        let net = LayeredNet::mlp(&widths, act, true, x0, y, loss).unwrap();
        let theta = DVector::from_fn(net.param_len(), |_, _| rng.random_range(-1.0..1.0));
        (net, theta)
    }

    #[test]
    fn linear_rollout_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (net, theta) = random_net(&mut rng, Activation::Identity, LossKind::Squared);
        let lin = net.linearize(&theta).unwrap();
        let lin2 = net.linearize(&(theta.clone() * 0.3)).unwrap();
        // A_i for a linear map is just W_i; with bias it still does not depend on x.
        assert_eq!(lin.b[0], lin2.b[0]);
        // Single-layer perturbation: exact, since f is linear in each θ_i separately.
        let mut dtheta = ParamVector::zeros(net.param_len());
        for k in net.segment(1) {
            dtheta[k] = rng.random_range(-0.1..0.1);
        }
        let dx = lin.rollout(&net, &dtheta).unwrap();
        let exact = net.forward(&(&theta + &dtheta)).unwrap() - net.forward(&theta).unwrap();
        assert!((&dx[2] - exact).norm() < 1e-14);
    }

    #[test]
    fn tanh_linearization_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (net, theta) = random_net(&mut rng, Activation::Tanh, LossKind::Squared);
        let lin = net.linearize(&theta).unwrap();
        let dir = DVector::from_fn(net.param_len(), |_, _| rng.random_range(-1.0..1.0));
        let err = |s: f64| {
            let d = &dir * s;
            let dx = lin.rollout(&net, &d).unwrap();
            let exact = net.forward(&(&theta + &d)).unwrap() - net.forward(&theta).unwrap();
            (&dx[net.depth()] - exact).norm()
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    proptest! {
        #[test]
        fn net_gradient_matches_fd(seed in 0u64..10_000, tanh in any::<bool>(), ce in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let act = if tanh { Activation::Tanh } else { Activation::Identity };
            let loss = if ce { LossKind::SoftmaxCrossEntropy } else { LossKind::Squared };
            let (net, theta) = random_net(&mut rng, act, loss);
            let g = net.forward_backward(&theta).unwrap().grad;
            let fd = finite_difference_grad(|t| net.forward_backward(t).unwrap().loss, &theta, 1e-5);
            prop_assert!(relative_error(&g, &fd, 1e-8) <= 1e-6);
        }

        #[test]
        fn sharpwell_gradient_matches_fd(x in -8.0f64..8.0, y in -8.0f64..8.0) {
            let w = SharpWell2D::new(SharpWellParams::default()).unwrap();
            let t = v(&[x, y]);
            prop_assume!(t.norm() > 1e-3);
            let g = w.eval(&t).unwrap().1;
            let fd = finite_difference_grad(|p| w.eval(p).unwrap().0, &t, 1e-5);
            prop_assert!(relative_error(&g, &fd, 1e-8) <= 1e-6);
        }

        #[test]
        fn sharpwell_rotation_invariant(x in -8.0f64..8.0, y in -8.0f64..8.0, angle in 0.0f64..std::f64::consts::TAU) {
            let w = SharpWell2D::new(SharpWellParams::default()).unwrap();
            let t = v(&[x, y]);
            let rt = givens_chain(2, angle) * &t;
            prop_assert!((w.eval(&t).unwrap().0 - w.eval(&rt).unwrap().0).abs() <= 1e-12);
        }

        #[test]
        fn quadratic_gradient_matches_fd(seed in 0u64..10_000, dim in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = TwoScaleQuadratic::random(dim, &mut rng).unwrap();
            let t = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
            let g = q.eval(&t).unwrap().1;
            let fd = finite_difference_grad(|p| q.eval(p).unwrap().0, &t, 1e-5);
            prop_assert!(relative_error(&g, &fd, 1e-8) <= 1e-6);
        }
    }
}
