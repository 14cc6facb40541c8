//! Step rules: SGD with momentum, Euclidean SAM, preconditioned descent
//! (LLQR), LLQR+SAM, the perturbation-only LLQRΔ+SAM and an F-SAM variant.
//!
//! Every rule is a composition of two operations: a probe perturbation
//! `ε` and a transport of the probe gradient into an update direction.
//! Weight decay is added to the transported gradient, then momentum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::landscapes::{Landscape, LandscapeError};
use crate::metric::{MetricError, MetricState};
use crate::numkit::ParamVector;

pub const DEFAULT_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("step {step}: non-finite {what}")]
    NonFinite { step: u64, what: &'static str },
    #[error("step {step}: {source}")]
    Landscape { step: u64, source: LandscapeError },
    #[error("step {step}: {source}")]
    Metric { step: u64, source: MetricError },
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Sgdm,
    Sam,
    Llqr,
    LlqrSam,
    LlqrDeltaSam,
    FSam,
}

impl Rule {
    pub const ALL: [Rule; 6] = [Rule::Sgdm, Rule::Sam, Rule::Llqr, Rule::LlqrSam, Rule::LlqrDeltaSam, Rule::FSam];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Sgdm => "sgdm",
            Rule::Sam => "sam",
            Rule::Llqr => "llqr",
            Rule::LlqrSam => "llqr-sam",
            Rule::LlqrDeltaSam => "llqr-delta-sam",
            Rule::FSam => "f-sam",
        }
    }

    pub fn uses_sam(self) -> bool {
        !matches!(self, Rule::Sgdm | Rule::Llqr)
    }
}

/// Where injected noise enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseInjection {
    #[default]
    PostTransport,
    PreTransport,
}

/// Order of the F-SAM gradient filter and the metric transport.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FsamOrder {
    #[default]
    FilterThenTransport,
    TransportThenFilter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub rule: Rule,
    pub lr: f64,
    pub rho: f64,
    pub momentum: f64,
    pub fsam_lambda: f64,
    /// F-SAM perturbs and transports through `U` instead of the identity.
    pub fsam_metric: bool,
    pub fsam_order: FsamOrder,
    pub weight_decay: f64,
    pub norm_floor: f64,
    pub noise_injection: NoiseInjection,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            rule: Rule::LlqrSam,
            lr: 0.1,
            rho: 0.1,
            momentum: 0.0,
            fsam_lambda: 0.6,
            fsam_metric: false,
            fsam_order: FsamOrder::FilterThenTransport,
            weight_decay: 0.0,
            norm_floor: DEFAULT_NORM_FLOOR,
            noise_injection: NoiseInjection::PostTransport,
        }
    }
}

impl OptimizerConfig {
    pub fn new(rule: Rule, lr: f64, rho: f64) -> Self {
        Self { rule, lr, rho, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        let bad = |m: String| Err(OptimizerError::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad(format!("SAM radius {} must be nonnegative", self.rho));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(0.0..1.0).contains(&self.fsam_lambda) {
            return bad(format!("F-SAM lambda {} outside [0, 1)", self.fsam_lambda));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} must be nonnegative", self.weight_decay));
        }
        if !(self.norm_floor > 0.0) {
            return bad(format!("norm floor {} must be positive", self.norm_floor));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: ParamVector,
    pub grad_ema: ParamVector,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(dim: usize) -> Self {
        Self { velocity: ParamVector::zeros(dim), grad_ema: ParamVector::zeros(dim), t: 0 }
    }
}

/// Per-step diagnostics; norms refer to the base-point gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub theta: ParamVector,
    pub loss: f64,
    pub grad_norm: f64,
    pub grad_dual_norm: f64,
    pub perturbation_norm: f64,
}

/// `ε = ρ U g / ‖g‖_U`, or zero when `ρ = 0` or `‖g‖_U ≤ floor`.
pub fn sam_perturbation(g: &ParamVector, metric: &MetricState, rho: f64, floor: f64) -> Result<ParamVector, MetricError> {
    if rho == 0.0 {
        return Ok(ParamVector::zeros(g.len()));
    }
    let ug = metric.apply(g)?;
    let q = g.dot(&ug);
    if q < 0.0 {
        return Err(MetricError::NegativeQuadForm(q));
    }
    let n = q.sqrt();
    if n <= floor {
        return Ok(ParamVector::zeros(g.len()));
    }
    Ok(ug * (rho / n))
}

fn euclidean_perturbation(g: &ParamVector, rho: f64, floor: f64) -> ParamVector {
    let n = g.norm();
    if rho == 0.0 || n <= floor {
        return ParamVector::zeros(g.len());
    }
    g * (rho / n)
}

fn finite(v: &ParamVector) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// One optimizer step from `theta`. `noise`, when given, is added to the
/// update direction at the point selected by `cfg.noise_injection`.
pub fn step(
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
    metric: &MetricState,
    landscape: &dyn Landscape,
    theta: &ParamVector,
    noise: Option<&ParamVector>,
) -> Result<StepOutcome, OptimizerError> {
    let t = state.t;
    let lerr = |source| OptimizerError::Landscape { step: t, source };
    let merr = |source| OptimizerError::Metric { step: t, source };

    let (loss, g) = landscape.loss_grad(theta).map_err(lerr)?;
    if !loss.is_finite() || !finite(&g) {
        return Err(OptimizerError::NonFinite { step: t, what: "loss or gradient at base point" });
    }
    let grad_norm = g.norm();
    let grad_dual_norm = metric.dual_norm(&g).map_err(merr)?;

    let use_metric = match cfg.rule {
        Rule::Llqr | Rule::LlqrSam => true,
        Rule::FSam => cfg.fsam_metric,
        Rule::Sgdm | Rule::Sam | Rule::LlqrDeltaSam => false,
    };

    let eps = match cfg.rule {
        Rule::Sgdm | Rule::Llqr => None,
        Rule::Sam => Some(euclidean_perturbation(&g, cfg.rho, cfg.norm_floor)),
        Rule::LlqrSam | Rule::LlqrDeltaSam => Some(sam_perturbation(&g, metric, cfg.rho, cfg.norm_floor).map_err(merr)?),
        Rule::FSam => Some(fsam_perturbation(cfg, state, metric, &g).map_err(merr)?),
    };

    let (probe_grad, perturbation_norm) = match &eps {
        Some(e) if e.iter().any(|&x| x != 0.0) => {
            let probe = theta + e;
            let (pl, pg) = landscape.loss_grad(&probe).map_err(lerr)?;
            if !pl.is_finite() || !finite(&pg) {
                return Err(OptimizerError::NonFinite { step: t, what: "loss or gradient at probe point" });
            }
            (pg, e.norm())
        }
        _ => (g.clone(), 0.0),
    };

    let mut dir = probe_grad;
    if let (Some(xi), NoiseInjection::PreTransport) = (noise, cfg.noise_injection) {
        dir += xi;
    }
    if use_metric {
        dir = metric.apply(&dir).map_err(merr)?;
    }
    if let (Some(xi), NoiseInjection::PostTransport) = (noise, cfg.noise_injection) {
        dir += xi;
    }
    if cfg.weight_decay != 0.0 {
        dir += theta * cfg.weight_decay;
    }
    let update = if cfg.momentum != 0.0 {
        state.velocity = &state.velocity * cfg.momentum + &dir;
        state.velocity.clone()
    } else {
        dir
    };
    let next = theta - update * cfg.lr;
    if !finite(&next) {
        return Err(OptimizerError::NonFinite { step: t, what: "parameters after update" });
    }
    state.t += 1;
    Ok(StepOutcome { theta: next, loss, grad_norm, grad_dual_norm, perturbation_norm })
}

// d = g − λm with m ← λm + (1−λ)g updated after use.
fn fsam_perturbation(cfg: &OptimizerConfig, state: &mut OptimizerState, metric: &MetricState, g: &ParamVector) -> Result<ParamVector, MetricError> {
    let lam = cfg.fsam_lambda;
    if !cfg.fsam_metric {
        let d = g - &state.grad_ema * lam;
        state.grad_ema = &state.grad_ema * lam + g * (1.0 - lam);
        return Ok(euclidean_perturbation(&d, cfg.rho, cfg.norm_floor));
    }
    match cfg.fsam_order {
        FsamOrder::FilterThenTransport => {
            let d = g - &state.grad_ema * lam;
            state.grad_ema = &state.grad_ema * lam + g * (1.0 - lam);
            sam_perturbation(&d, metric, cfg.rho, cfg.norm_floor)
        }
        FsamOrder::TransportThenFilter => {
            let ug = metric.apply(g)?;
            let d = &ug - &state.grad_ema * lam;
            state.grad_ema = &state.grad_ema * lam + &ug * (1.0 - lam);
            // ‖d‖ measured in the primal metric U⁻¹ keeps ε on the same sphere.
            let q = d.dot(&metric.apply_inverse(&d)?);
            if q < 0.0 {
                return Err(MetricError::NegativeQuadForm(q));
            }
            let n = q.sqrt();
            if cfg.rho == 0.0 || n <= cfg.norm_floor {
                return Ok(ParamVector::zeros(g.len()));
            }
            Ok(d * (cfg.rho / n))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscapes::TwoScaleQuadratic;
    use crate::numkit::{self, SymMatrix};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> ParamVector {
        DVector::from_column_slice(x)
    }

    #[test]
    fn perturbation_examples() {
        let i2 = MetricState::identity(2);
        assert_eq!(sam_perturbation(&ParamVector::zeros(2), &i2, 0.1, 1e-12).unwrap(), ParamVector::zeros(2));
        let e = sam_perturbation(&v(&[3.0, 4.0]), &i2, 0.1, 1e-12).unwrap();
        assert!((e - v(&[0.06, 0.08])).norm() < 1e-16);
        let u = MetricState::diagonal(&[4.0, 1.0]).unwrap();
        let e = sam_perturbation(&v(&[1.0, 2.0]), &u, 1.0, 1e-12).unwrap();
        assert!((e[0] - 4.0 / 8f64.sqrt()).abs() < 1e-15 && (e[1] - 2.0 / 8f64.sqrt()).abs() < 1e-15);
        let sphere = e.dot(&u.apply_inverse(&e).unwrap());
        assert!((sphere - 1.0).abs() < 1e-14);
    }

    fn scalar_quad() -> TwoScaleQuadratic {
        TwoScaleQuadratic::diagonal(&[1.0], &[0.0]).unwrap()
    }

    #[test]
    fn step_examples() {
        let q = scalar_quad();
        let u = MetricState::diagonal(&[1.0]).unwrap();
        let run = |rule: Rule, rho: f64| {
            let cfg = OptimizerConfig::new(rule, 0.1, rho);
            let mut st = OptimizerState::new(1);
            step(&cfg, &mut st, &u, &q, &v(&[1.0]), None).unwrap().theta[0]
        };
        assert!((run(Rule::Sgdm, 0.0) - 0.9).abs() < 1e-15);
        assert!((run(Rule::LlqrSam, 0.1) - 0.89).abs() < 1e-15);
        assert_eq!(run(Rule::Sam, 0.1), run(Rule::LlqrSam, 0.1));
    }

    #[test]
    fn zero_radius_reduces_to_base_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = TwoScaleQuadratic::random(4, &mut rng).unwrap();
        let u = MetricState::dense(&q.average_metric().unwrap()).unwrap();
        let theta = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let pairs = [(Rule::Sam, Rule::Sgdm), (Rule::LlqrSam, Rule::Llqr), (Rule::LlqrDeltaSam, Rule::Sgdm), (Rule::FSam, Rule::Sgdm)];
        for (sam, base) in pairs {
            let mut a = OptimizerState::new(4);
            let mut b = OptimizerState::new(4);
            let ca = OptimizerConfig { momentum: 0.5, weight_decay: 1e-3, ..OptimizerConfig::new(sam, 0.05, 0.0) };
            let cb = OptimizerConfig { rule: base, ..ca };
            let (mut ta, mut tb) = (theta.clone(), theta.clone());
            for _ in 0..20 {
                ta = step(&ca, &mut a, &u, &q, &ta, None).unwrap().theta;
                tb = step(&cb, &mut b, &u, &q, &tb, None).unwrap().theta;
            }
            assert_eq!(ta, tb, "{sam:?} vs {base:?}");
        }
    }

    #[test]
    fn newton_step_lands_at_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for dim in 1..6 {
            let hbar: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..3.0)).collect();
            let q = TwoScaleQuadratic::rotated(&hbar, &vec![0.0; dim], 0.4).unwrap();
            let u = MetricState::dense(&q.average_metric().unwrap()).unwrap();
            let theta = DVector::from_fn(dim, |_, _| rng.random_range(-5.0..5.0));
            let out = step(&OptimizerConfig::new(Rule::Llqr, 1.0, 0.0), &mut OptimizerState::new(dim), &u, &q, &theta, None).unwrap();
            assert!(out.theta.amax() <= 1e-10, "{}", out.theta);
        }
    }

    fn check_eigendirections(q: &TwoScaleQuadratic, basis: &DMatrix<f64>, spectra: &[(f64, f64)], tol: f64) {
        let u = MetricState::dense(&q.average_metric().unwrap()).unwrap();
        let (eta, rho) = (0.005, 0.05);
        let cfg = OptimizerConfig::new(Rule::LlqrSam, eta, rho);
        for (i, &(lbar, lam)) in spectra.iter().enumerate() {
            let vi = basis.column(i).clone_owned();
            let mu = lam / lbar;
            let b = eta * rho * mu / lbar.sqrt();
            let mut theta = &vi * 0.3;
            let mut z: f64 = 0.3;
            let mut st = OptimizerState::new(vi.len());
            for _ in 0..300 {
                theta = step(&cfg, &mut st, &u, q, &theta, None).unwrap().theta;
                let sgn = if z > 0.0 { 1.0 } else if z < 0.0 { -1.0 } else { 0.0 };
                z = (1.0 - eta * mu) * z - b * sgn;
                let along = vi.dot(&theta);
                let off = (&theta - &vi * along).norm();
                assert!(off <= tol, "off-direction {off:e}");
                assert!((along - z).abs() <= tol, "direction {i}: {along} vs {z}");
            }
        }
    }

    // Axis-aligned basis: off-direction components stay exactly zero. In a
    // rotated basis rounding leaks into sharp directions, where the SAM term
    // amplifies it, so the eigendirection is an unstable invariant subspace.
    #[test]
    fn eigendirection_reduction() {
        let spectra = [(1.0, 1.0), (0.01, 1.0), (0.5, 1.5)];
        let q = TwoScaleQuadratic::diagonal(&[1.0, 0.01, 0.5], &[0.0, 0.99, 1.0]).unwrap();
        check_eigendirections(&q, &DMatrix::identity(3, 3), &spectra, 1e-12);
    }

    #[test]
    fn rho_continuity_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = TwoScaleQuadratic::random(3, &mut rng).unwrap();
        let u = MetricState::dense(&q.average_metric().unwrap()).unwrap();
        let eta = 0.5 / q.perceived_sharpness().unwrap()[2];
        let theta0 = v(&[1.0, -0.5, 0.25]);
        let traj = |rho: f64| {
            let cfg = OptimizerConfig::new(Rule::LlqrSam, eta, rho);
            let mut st = OptimizerState::new(3);
            let mut t = theta0.clone();
            (0..50)
                .map(|_| {
                    t = step(&cfg, &mut st, &u, &q, &t, None).unwrap().theta;
                    t.clone()
                })
                .collect::<Vec<_>>()
        };
        let base = traj(0.0);
        let dev = |rho: f64| traj(rho).iter().zip(&base).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        let ratio = dev(1e-3) / dev(1e-6);
        assert!((ratio / 1e3 - 1.0).abs() < 1e-2, "ratio {ratio}");
    }

    #[test]
    fn non_finite_gradient_aborts_with_step_index() {
        let q = scalar_quad();
        let u = MetricState::identity(1);
        let mut st = OptimizerState::new(1);
        st.t = 17;
        let err = step(&OptimizerConfig::new(Rule::Sgdm, 0.1, 0.0), &mut st, &u, &q, &v(&[f64::INFINITY]), None).unwrap_err();
        assert!(matches!(err, OptimizerError::NonFinite { step: 17, .. }));
    }

    #[test]
    fn noise_injection_points_differ_only_through_metric() {
        let q = TwoScaleQuadratic::diagonal(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
        let u = MetricState::diagonal(&[2.0, 3.0]).unwrap();
        let xi = v(&[0.1, -0.2]);
        let go = |inj| {
            let cfg = OptimizerConfig { noise_injection: inj, ..OptimizerConfig::new(Rule::Llqr, 1.0, 0.0) };
            step(&cfg, &mut OptimizerState::new(2), &u, &q, &v(&[0.0, 0.0]), Some(&xi)).unwrap().theta
        };
        assert_eq!(go(NoiseInjection::PostTransport), -xi.clone());
        assert!((go(NoiseInjection::PreTransport) - v(&[-0.2, 0.6])).norm() < 1e-15);
    }

    #[test]
    fn fsam_orders_coincide_without_metric() {
        let q = TwoScaleQuadratic::diagonal(&[1.0, 2.0], &[0.5, 0.0]).unwrap();
        let u = MetricState::diagonal(&[2.0, 3.0]).unwrap();
        let run = |order| {
            let cfg = OptimizerConfig { fsam_order: order, ..OptimizerConfig::new(Rule::FSam, 0.1, 0.05) };
            let mut st = OptimizerState::new(2);
            let mut t = v(&[1.0, 1.0]);
            for _ in 0..10 {
                t = step(&cfg, &mut st, &u, &q, &t, None).unwrap().theta;
            }
            t
        };
        assert_eq!(run(FsamOrder::FilterThenTransport), run(FsamOrder::TransportThenFilter));
    }

    fn random_spd(rng: &mut ChaCha8Rng, dim: usize) -> SymMatrix {
        let g = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
        SymMatrix::new(&g * g.transpose() + DMatrix::identity(dim, dim) * 0.2).unwrap()
    }

    proptest! {
        #[test]
        fn perturbation_lies_on_metric_sphere(seed in 0u64..10_000, dim in 1usize..6, rho in 1e-3f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = MetricState::dense(&random_spd(&mut rng, dim)).unwrap();
            let g = DVector::from_fn(dim, |_, _| rng.random_range(-3.0..3.0));
            let e = sam_perturbation(&g, &u, rho, 1e-12).unwrap();
            let uinv = numkit::spd_inverse(&u.realized().unwrap()).unwrap();
            let s = numkit::quad_form(&e, &uinv).unwrap();
            prop_assert!((s / (rho * rho) - 1.0).abs() <= 1e-10);
        }

        #[test]
        fn diagonal_perturbation_sphere(seed in 0u64..10_000, dim in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d: Vec<f64> = (0..dim).map(|_| rng.random_range(0.01..10.0)).collect();
            let u = MetricState::diagonal(&d).unwrap();
            let g = DVector::from_fn(dim, |_, _| rng.random_range(-3.0..3.0));
            let e = sam_perturbation(&g, &u, 0.3, 1e-12).unwrap();
            let s = e.dot(&u.apply_inverse(&e).unwrap());
            prop_assert!((s / 0.09 - 1.0).abs() <= 1e-10);
        }
    }
}
