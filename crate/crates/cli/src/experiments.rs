//! Experiment runners. Each tag has a data producer (used by the checks)
//! and an artifact builder (used by `run`).

use std::collections::BTreeMap;

use llqrsam_core::analysis::{self, AnalysisError, Ar1Params, ScalarModeParams, SignMap, Whitening};
use llqrsam_core::landscapes::{
    finite_difference_grad, relative_error, Activation, Landscape, LayeredNet, LossKind, SharpWell2D, SharpWellParams, TwoScaleQuadratic,
};
use llqrsam_core::metric::{
    self, form_lqr_blocks, layer_shapes, learn_preconditioner, relaxed_objective, relaxed_objective_grad, Divergence, InnerSolverConfig,
    MetricSchedule, MetricState, Structure,
};
use llqrsam_core::numkit::{self, ParamVector};
use llqrsam_core::optimizers::{self, OptimizerConfig, OptimizerState, Rule};
use llqrsam_core::stochsim::{self, NoiseSchedule, RegenerativeConfig, TrajectoryOptions, WellKind, WellSpec};
use llqrsam_core::trajectory::TrajectoryRecord;
use llqrsam_core::Region;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{
    AmplificationSpec, ConfigError, DampingSpec, EnvelopeSpec, ExperimentConfig, ExperimentTag, GradCheckSpec, LandscapeSpec,
    LayeredLearnerSpec, MetricSpec, ScalarLearnerSpec, SelectionSpec, WhiteningSpec,
};
use crate::output::{ArtifactSet, Cell, CsvTable};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run aborted: {0}")]
    Aborted(String),
    #[error("cannot write artifacts: {0}")]
    Io(#[from] std::io::Error),
}

fn abort(e: impl std::fmt::Display) -> RunError {
    RunError::Aborted(e.to_string())
}

/// Closed-form predictors consumed by the sweeps. Swappable so a corrupted
/// formula can be shown to fail its check.
#[derive(Debug, Clone, Copy)]
pub struct Predictors {
    pub two_cycle: fn(&SignMap) -> Result<f64, AnalysisError>,
    pub hovering: fn(f64, f64) -> Result<f64, AnalysisError>,
    pub vanilla: fn(f64) -> f64,
    pub amplification: fn(f64) -> Result<f64, AnalysisError>,
    pub ar1: fn(&Ar1Params) -> Result<(f64, f64), AnalysisError>,
    pub occupancy: fn(&[f64], &[f64]) -> Result<Vec<f64>, AnalysisError>,
}

impl Default for Predictors {
    fn default() -> Self {
        Self {
            two_cycle: analysis::two_cycle_amplitude,
            hovering: analysis::hovering_envelope,
            vanilla: analysis::vanilla_envelope,
            amplification: analysis::amplification_ratio,
            ar1: analysis::ar1_stationary_stats,
            occupancy: analysis::occupation_mass,
        }
    }
}

// ---------------------------------------------------------------------------
// Trajectory experiments: escape-toy, noise-toy, transfer-diagnostic

enum Terrain {
    Toy(SharpWell2D),
    Quadratic(TwoScaleQuadratic),
}

impl Terrain {
    fn build(spec: &LandscapeSpec) -> Result<Self, RunError> {
        Ok(match spec {
            LandscapeSpec::SharpWell { params } => Terrain::Toy(SharpWell2D::new(*params).map_err(abort)?),
            LandscapeSpec::TwoScale { .. } => Terrain::Quadratic(spec.two_scale()?),
        })
    }

    fn landscape(&self) -> &dyn Landscape {
        match self {
            Terrain::Toy(w) => w,
            Terrain::Quadratic(q) => q,
        }
    }

    fn classify(&self, theta: &ParamVector) -> Region {
        match self {
            Terrain::Toy(w) => w.region(theta),
            Terrain::Quadratic(_) => Region::Neither,
        }
    }
}

fn build_metric(spec: &MetricSpec, terrain: &Terrain, dim: usize) -> Result<MetricState, RunError> {
    let m = match (spec, terrain) {
        (MetricSpec::Identity, _) => Ok(MetricState::identity(dim)),
        (MetricSpec::InverseCurvature { curvature }, _) => MetricState::scaled_identity(dim, 1.0 / curvature),
        (MetricSpec::Diagonal { values }, _) => MetricState::diagonal(values),
        (MetricSpec::Average, Terrain::Quadratic(q)) => MetricState::dense(&q.average_metric().map_err(abort)?),
        (MetricSpec::Average, Terrain::Toy(_)) => return Err(ConfigError::Invalid("average metric needs a two-scale landscape".into()).into()),
    };
    m.map_err(abort)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRun {
    pub rule: Rule,
    pub seed: u64,
    pub record: TrajectoryRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub variant: String,
    pub seed: u64,
    pub sigma2: f64,
    pub exit_step: Option<u64>,
    pub path_length: f64,
    pub final_region: Region,
    pub final_theta: Vec<f64>,
    pub mean_dual_norm_sq: f64,
    pub noise_digest: String,
}

impl From<&TrajectoryRun> for RunSummary {
    fn from(r: &TrajectoryRun) -> Self {
        Self {
            variant: r.rule.name().into(),
            seed: r.seed,
            sigma2: r.record.variance,
            exit_step: r.record.exit_step,
            path_length: r.record.path_length,
            final_region: r.record.final_region,
            final_theta: r.record.final_theta.clone(),
            mean_dual_norm_sq: r.record.mean_dual_norm_sq,
            noise_digest: r.record.noise_digest.clone(),
        }
    }
}

/// Every (variant, seed) run, ordered by variant then seed.
pub fn trajectory_runs(cfg: &ExperimentConfig) -> Result<Vec<TrajectoryRun>, RunError> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let run = cfg.run.as_ref().expect("resolved");
    let terrain = Terrain::build(cfg.landscape.as_ref().expect("resolved"))?;
    let dim = run.start.len();
    let metric = build_metric(cfg.metric.as_ref().expect("resolved"), &terrain, dim)?;
    let theta0 = DVector::from_column_slice(&run.start);
    let jobs: Vec<(OptimizerConfig, u64)> =
        cfg.variants.iter().flat_map(|v| (0..run.replicates).map(move |k| (*v, cfg.seed.wrapping_add(k)))).collect();
    jobs.par_iter()
        .map(|(opt, seed)| {
            let schedule = NoiseSchedule::new(*seed, run.variance, dim).map_err(abort)?;
            let classify = |t: &ParamVector| terrain.classify(t);
            let opts = TrajectoryOptions { variant: opt.rule.name().into(), stride: run.stride, classify: Some(&classify) };
            let record = stochsim::run_noisy_trajectory(terrain.landscape(), opt, &metric, &theta0, &schedule, run.horizon, &opts).map_err(abort)?;
            Ok(TrajectoryRun { rule: opt.rule, seed: *seed, record })
        })
        .collect()
}

fn trajectory_table(record: &TrajectoryRecord) -> CsvTable {
    let dim = record.final_theta.len();
    let mut header = vec!["step".to_string()];
    header.extend((0..dim).map(|k| format!("theta_{k}")));
    header.extend(["loss", "grad_norm", "grad_dual_norm", "perturbation_norm", "path_length", "region"].map(String::from));
    let mut t = CsvTable::new(header);
    for r in &record.rows {
        let mut row: Vec<Cell> = vec![r.step.into()];
        row.extend(r.theta.iter().map(|&x| Cell::F(x)));
        row.extend([r.loss, r.grad_norm, r.grad_dual_norm, r.perturbation_norm, r.path_length].map(Cell::F));
        row.push(r.region.as_str().into());
        t.push(row);
    }
    t
}

fn diagnostic_table(record: &TrajectoryRecord) -> CsvTable {
    let sq: Vec<f64> = record.rows.iter().map(|r| r.grad_dual_norm * r.grad_dual_norm).collect();
    let avg = analysis::running_average(&sq);
    let mut t = CsvTable::new(["step", "dual_norm_sq", "running_average"]);
    for ((r, s), a) in record.rows.iter().zip(&sq).zip(&avg) {
        t.push(vec![r.step.into(), (*s).into(), (*a).into()]);
    }
    t
}

fn trajectory_artifacts(cfg: &ExperimentConfig, runs: &[TrajectoryRun], set: &mut ArtifactSet) {
    for r in runs {
        set.csv(format!("trajectory_{}_seed{}.csv", r.rule.name(), r.seed), &trajectory_table(&r.record));
        if cfg.experiment == ExperimentTag::TransferDiagnostic {
            set.csv(format!("diagnostic_{}_seed{}.csv", r.rule.name(), r.seed), &diagnostic_table(&r.record));
        }
    }
    let runs: Vec<RunSummary> = runs.iter().map(RunSummary::from).collect();
    set.json("summary.json", &serde_json::json!({ "experiment": cfg.experiment, "runs": runs }));
}

// ---------------------------------------------------------------------------
// envelope-sweep

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeRow {
    pub eta: f64,
    pub mu: f64,
    pub rho: f64,
    pub lambda_bar: f64,
    pub a: f64,
    pub b: f64,
    pub measured: f64,
    pub predicted: f64,
    pub abs_error: f64,
}

fn measure_map(map: &SignMap, z0: f64, steps: usize, burn_in: f64) -> f64 {
    let traj = analysis::scalar_map_iterate(map, z0, steps);
    let window = steps - (burn_in * steps as f64) as usize;
    analysis::measured_envelope(&traj, window)
}

pub fn envelope_rows(spec: &EnvelopeSpec, pred: &Predictors) -> Result<Vec<EnvelopeRow>, RunError> {
    let cells: Vec<(f64, f64, f64, f64)> = spec
        .cells
        .iter()
        .flat_map(|&[eta, mu]| spec.rho.iter().flat_map(move |&rho| spec.lambda_bar.iter().map(move |&lb| (eta, mu, rho, lb))))
        .collect();
    cells
        .par_iter()
        .map(|&(eta, mu, rho, lambda_bar)| {
            let p = ScalarModeParams::new(eta, mu, rho, lambda_bar).map_err(abort)?;
            let map = p.sign_map();
            let measured = measure_map(&map, spec.z0, spec.steps, spec.burn_in);
            let predicted = (pred.two_cycle)(&map).unwrap_or(f64::NAN);
            Ok(EnvelopeRow { eta, mu, rho, lambda_bar, a: map.a, b: map.b, measured, predicted, abs_error: (measured - predicted).abs() })
        })
        .collect()
}

fn envelope_artifacts(rows: &[EnvelopeRow], set: &mut ArtifactSet) {
    let mut t = CsvTable::new(["eta", "mu", "rho", "lambda_bar", "a", "b", "measured", "predicted", "abs_error"]);
    for r in rows {
        t.push([r.eta, r.mu, r.rho, r.lambda_bar, r.a, r.b, r.measured, r.predicted, r.abs_error].map(Cell::F).to_vec());
    }
    set.csv("envelope.csv", &t);
    let worst = rows.iter().map(|r| r.abs_error).fold(0.0, nan_max);
    set.json("summary.json", &serde_json::json!({ "experiment": ExperimentTag::EnvelopeSweep, "cells": rows.len(), "max_abs_error": worst }));
}

/// `max` that propagates NaN, so a failed prediction is never hidden.
pub fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

// ---------------------------------------------------------------------------
// amplification-sweep

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CancellationRow {
    pub lambda_eps: f64,
    pub mu: f64,
    pub eta_mu: f64,
    pub measured: f64,
    pub predicted: f64,
    pub abs_error: f64,
    /// `ρ/√λ̄`
    pub leading_scale: f64,
    /// `measured · (2 − ημ)/(ημ)`
    pub rescaled: f64,
    pub rescale_error: f64,
    pub vanilla_lambda: f64,
    pub vanilla_measured: f64,
    pub vanilla_predicted: f64,
    pub vanilla_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioRow {
    pub lambda_bar_eps: f64,
    pub hovering: f64,
    pub vanilla: f64,
    pub ratio: f64,
    pub predicted_ratio: f64,
    pub rel_error: f64,
    /// Independent `λ̄_ε^{-1/2}`.
    pub oracle: f64,
    pub oracle_rel_error: f64,
}

pub fn cancellation_rows(spec: &AmplificationSpec, pred: &Predictors) -> Result<Vec<CancellationRow>, RunError> {
    spec.lambda_eps
        .par_iter()
        .map(|&lambda_eps| {
            let mu = (spec.lambda_bar + lambda_eps) / spec.lambda_bar;
            let p = ScalarModeParams::new(spec.eta, mu, spec.rho, spec.lambda_bar).map_err(abort)?;
            let map = p.sign_map();
            let measured = measure_map(&map, spec.z0, spec.steps, spec.burn_in);
            let predicted = (pred.two_cycle)(&map).unwrap_or(f64::NAN);
            let eta_mu = spec.eta * mu;
            let leading_scale = (pred.hovering)(spec.rho, spec.lambda_bar).map_err(abort)?;
            let rescaled = measured * (2.0 - eta_mu) / eta_mu;
            let vanilla_lambda = spec.lambda_bar + lambda_eps;
            let vmap = SignMap::vanilla(spec.eta, vanilla_lambda, spec.rho);
            let vanilla_measured = measure_map(&vmap, spec.z0, spec.steps, spec.burn_in);
            let vanilla_predicted = (pred.two_cycle)(&vmap).unwrap_or(f64::NAN);
            Ok(CancellationRow {
                lambda_eps,
                mu,
                eta_mu,
                measured,
                predicted,
                abs_error: (measured - predicted).abs(),
                leading_scale,
                rescaled,
                rescale_error: (rescaled - leading_scale).abs(),
                vanilla_lambda,
                vanilla_measured,
                vanilla_predicted,
                vanilla_error: (vanilla_measured - vanilla_predicted).abs(),
            })
        })
        .collect()
}

pub fn ratio_rows(spec: &AmplificationSpec, pred: &Predictors) -> Result<Vec<RatioRow>, RunError> {
    spec.lambda_bar_eps
        .iter()
        .map(|&l| {
            let hovering = (pred.hovering)(spec.rho, l).map_err(abort)?;
            let vanilla = (pred.vanilla)(spec.rho);
            let ratio = hovering / vanilla;
            let predicted_ratio = (pred.amplification)(l).map_err(abort)?;
            let oracle = l.powf(-0.5);
            Ok(RatioRow {
                lambda_bar_eps: l,
                hovering,
                vanilla,
                ratio,
                predicted_ratio,
                rel_error: ((ratio - predicted_ratio) / predicted_ratio).abs(),
                oracle,
                oracle_rel_error: ((ratio - oracle) / oracle).abs(),
            })
        })
        .collect()
}

fn amplification_artifacts(cancel: &[CancellationRow], ratios: &[RatioRow], set: &mut ArtifactSet) {
    let mut t = CsvTable::new([
        "lambda_eps",
        "mu",
        "eta_mu",
        "measured",
        "predicted",
        "abs_error",
        "leading_scale",
        "rescaled",
        "rescale_error",
        "vanilla_lambda",
        "vanilla_measured",
        "vanilla_predicted",
        "vanilla_error",
    ]);
    for r in cancel {
        t.push(
            [
                r.lambda_eps,
                r.mu,
                r.eta_mu,
                r.measured,
                r.predicted,
                r.abs_error,
                r.leading_scale,
                r.rescaled,
                r.rescale_error,
                r.vanilla_lambda,
                r.vanilla_measured,
                r.vanilla_predicted,
                r.vanilla_error,
            ]
            .map(Cell::F)
            .to_vec(),
        );
    }
    set.csv("cancellation.csv", &t);
    let mut t = CsvTable::new(["lambda_bar_eps", "hovering", "vanilla", "ratio", "predicted_ratio", "rel_error", "oracle", "oracle_rel_error"]);
    for r in ratios {
        t.push([r.lambda_bar_eps, r.hovering, r.vanilla, r.ratio, r.predicted_ratio, r.rel_error, r.oracle, r.oracle_rel_error].map(Cell::F).to_vec());
    }
    set.csv("amplification.csv", &t);
    set.json(
        "summary.json",
        &serde_json::json!({ "experiment": ExperimentTag::AmplificationSweep, "cancellation": cancel, "amplification": ratios }),
    );
}

// ---------------------------------------------------------------------------
// whitening-check

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WhiteningRow {
    pub instance: usize,
    pub dim: usize,
    pub commuting: bool,
    pub mu_max: f64,
    /// `max_t ‖H̄^{-1/2} y_t − e_t‖` between the whitened and direct recursions.
    pub whitening_error: f64,
    /// `max_t ‖step(e_t) − recursion(e_t)‖` along the optimizer's own path.
    pub step_error: f64,
}

fn random_instance(seed: u64, instance: usize, spec: &WhiteningSpec) -> Result<(TwoScaleQuadratic, ParamVector), RunError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(instance as u64);
    let dim = rng.random_range(spec.min_dim..=spec.max_dim);
    let q = loop {
        let q = TwoScaleQuadratic::random(dim, &mut rng).map_err(abort)?;
        if !q.is_commuting() {
            break q;
        }
    };
    let e = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
    let e = e.normalize() * spec.start_norm;
    Ok((q, e))
}

pub fn whitening_rows(spec: &WhiteningSpec, seed: u64) -> Result<Vec<WhiteningRow>, RunError> {
    (0..spec.instances)
        .into_par_iter()
        .map(|i| {
            let (q, e0) = random_instance(seed, i, spec)?;
            let u = q.average_metric().map_err(abort)?;
            let w = Whitening::new(&q).map_err(abort)?;
            let floor = optimizers::DEFAULT_NORM_FLOOR;

            let mut e = e0.clone();
            let mut y = w.whiten(&e0).map_err(abort)?;
            let mut whitening_error: f64 = 0.0;
            for _ in 0..spec.steps {
                e = analysis::matrix_recursion_step(&q, &u, spec.eta, spec.rho, &e, floor).map_err(abort)?;
                y = analysis::whitened_step(&w.a, spec.eta, spec.rho, &y, floor).map_err(abort)?;
                whitening_error = nan_max(whitening_error, (w.unwhiten(&y).map_err(abort)? - &e).norm());
            }

            let metric = MetricState::dense(&u).map_err(abort)?;
            let cfg = OptimizerConfig { momentum: 0.0, ..OptimizerConfig::new(Rule::LlqrSam, spec.eta, spec.rho) };
            let mut state = OptimizerState::new(q.dim());
            let mut theta = e0;
            let mut step_error: f64 = 0.0;
            for _ in 0..spec.steps {
                let direct = analysis::matrix_recursion_step(&q, &u, spec.eta, spec.rho, &theta, floor).map_err(abort)?;
                let out = optimizers::step(&cfg, &mut state, &metric, &q, &theta, None).map_err(abort)?;
                step_error = nan_max(step_error, (&out.theta - &direct).norm());
                theta = out.theta;
            }
            let mu_max = q.perceived_sharpness().map_err(abort)?.into_iter().fold(f64::MIN, f64::max);
            Ok(WhiteningRow { instance: i, dim: q.dim(), commuting: q.is_commuting(), mu_max, whitening_error, step_error })
        })
        .collect()
}

fn whitening_artifacts(rows: &[WhiteningRow], set: &mut ArtifactSet) {
    let mut t = CsvTable::new(["instance", "dim", "commuting", "mu_max", "whitening_error", "step_error"]);
    for r in rows {
        t.push(vec![r.instance.into(), r.dim.into(), r.commuting.into(), r.mu_max.into(), r.whitening_error.into(), r.step_error.into()]);
    }
    set.csv("whitening.csv", &t);
    set.json("summary.json", &serde_json::json!({ "experiment": ExperimentTag::WhiteningCheck, "instances": rows }));
}

// ---------------------------------------------------------------------------
// damping-check

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DampingRow {
    pub d: f64,
    pub var_predicted: f64,
    pub var_measured: f64,
    pub var_rel_error: f64,
    pub motion_predicted: f64,
    pub motion_measured: f64,
    pub motion_rel_error: f64,
}

pub fn damping_rows(spec: &DampingSpec, seed: u64, pred: &Predictors) -> Result<Vec<DampingRow>, RunError> {
    spec.d
        .par_iter()
        .enumerate()
        .map(|(i, &d)| {
            let p = Ar1Params { eta: spec.eta, lambda: spec.lambda, d, tau2: spec.tau2 };
            let (vp, mp) = (pred.ar1)(&p).map_err(abort)?;
            let est = stochsim::simulate_ar1(&p, spec.steps, seed.wrapping_add(i as u64)).map_err(abort)?;
            Ok(DampingRow {
                d,
                var_predicted: vp,
                var_measured: est.variance,
                var_rel_error: ((est.variance - vp) / vp).abs(),
                motion_predicted: mp,
                motion_measured: est.motion,
                motion_rel_error: ((est.motion - mp) / mp).abs(),
            })
        })
        .collect()
}

fn damping_artifacts(rows: &[DampingRow], set: &mut ArtifactSet) {
    let mut t = CsvTable::new(["d", "var_predicted", "var_measured", "var_rel_error", "motion_predicted", "motion_measured", "motion_rel_error"]);
    for r in rows {
        t.push([r.d, r.var_predicted, r.var_measured, r.var_rel_error, r.motion_predicted, r.motion_measured, r.motion_rel_error].map(Cell::F).to_vec());
    }
    set.csv("damping.csv", &t);
    set.json("summary.json", &serde_json::json!({ "experiment": ExperimentTag::DampingCheck, "rows": rows }));
}

// ---------------------------------------------------------------------------
// selection-sweep

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionRow {
    pub sigma: f64,
    pub cycles: u64,
    pub censored: u64,
    pub flat_cycles: u64,
    pub sharp_cycles: u64,
    pub flat_mean_exit: f64,
    /// `R²/(2σ²)`: mean exit time of a 2-D Gaussian random walk from a disc.
    pub flat_reference_exit: f64,
    pub sharp_mean_exit: f64,
    pub sharp_occupancy: f64,
    pub sharp_occupancy_se: f64,
    pub sharp_predicted: f64,
    /// `|measured − predicted| / SE`
    pub gap_in_se: f64,
}

fn selection_wells(spec: &SelectionSpec) -> Result<Vec<WellSpec>, RunError> {
    let sharp = TwoScaleQuadratic::diagonal(&[spec.sharp_hbar; 2], &[spec.sharp_heps, 0.0]).map_err(abort)?;
    Ok(vec![
        WellSpec { name: "flat".into(), weight: spec.weights[0], kind: WellKind::Plateau, radius: spec.radius, metric: MetricState::identity(2) },
        WellSpec {
            name: "sharp".into(),
            weight: spec.weights[1],
            kind: WellKind::Quadratic(sharp),
            radius: spec.radius,
            metric: MetricState::scaled_identity(2, 1.0 / spec.sharp_hbar).map_err(abort)?,
        },
    ])
}

pub fn selection_rows(spec: &SelectionSpec, seed: u64, pred: &Predictors) -> Result<Vec<SelectionRow>, RunError> {
    let wells = selection_wells(spec)?;
    let opt = OptimizerConfig { momentum: 0.0, ..OptimizerConfig::new(Rule::LlqrSam, spec.eta, spec.rho) };
    spec.sigmas
        .par_iter()
        .zip(&spec.cycles)
        .enumerate()
        .map(|(i, (&sigma, &cycles))| {
            let cfg = RegenerativeConfig {
                wells: wells.clone(),
                sigma,
                max_cycles: cycles,
                max_steps_per_cycle: spec.max_steps_per_cycle,
                seed: seed.wrapping_add(i as u64),
                batches: spec.batches,
            };
            let stats = stochsim::regenerative_simulate(&cfg, &opt).map_err(abort)?;
            let (flat, sharp) = (&stats.wells[0], &stats.wells[1]);
            let predicted = (pred.occupancy)(&spec.weights, &[flat.mean_exit_time, sharp.mean_exit_time]).map_err(abort)?;
            let gap = (sharp.occupancy - predicted[1]).abs();
            Ok(SelectionRow {
                sigma,
                cycles,
                censored: stats.censored_cycles,
                flat_cycles: flat.cycles,
                sharp_cycles: sharp.cycles,
                flat_mean_exit: flat.mean_exit_time,
                flat_reference_exit: spec.radius * spec.radius / (2.0 * sigma * sigma),
                sharp_mean_exit: sharp.mean_exit_time,
                sharp_occupancy: sharp.occupancy,
                sharp_occupancy_se: sharp.occupancy_se,
                sharp_predicted: predicted[1],
                gap_in_se: gap / sharp.occupancy_se,
            })
        })
        .collect()
}

fn selection_artifacts(rows: &[SelectionRow], set: &mut ArtifactSet) {
    let mut t = CsvTable::new([
        "sigma",
        "cycles",
        "censored",
        "flat_cycles",
        "sharp_cycles",
        "flat_mean_exit",
        "flat_reference_exit",
        "sharp_mean_exit",
        "sharp_occupancy",
        "sharp_occupancy_se",
        "sharp_predicted",
        "gap_in_se",
    ]);
    for r in rows {
        t.push(vec![
            r.sigma.into(),
            r.cycles.into(),
            r.censored.into(),
            r.flat_cycles.into(),
            r.sharp_cycles.into(),
            r.flat_mean_exit.into(),
            r.flat_reference_exit.into(),
            r.sharp_mean_exit.into(),
            r.sharp_occupancy.into(),
            r.sharp_occupancy_se.into(),
            r.sharp_predicted.into(),
            r.gap_in_se.into(),
        ]);
    }
    set.csv("selection.csv", &t);
    set.json("summary.json", &serde_json::json!({ "experiment": ExperimentTag::SelectionSweep, "rows": rows }));
}

// ---------------------------------------------------------------------------
// llqr-mlp-check

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalarLearnerResult {
    pub u_learned: f64,
    /// `1/x²`, the inverse curvature of `½(xθ − y)²`.
    pub u_oracle: f64,
    pub u_error: f64,
    pub theta_next: f64,
    pub theta_star: f64,
    pub step_residual: f64,
    /// `tolerance·|g|`: the residual implied by a `U` error at the tolerance.
    pub residual_bound: f64,
    pub j_initial: f64,
    pub j_final: f64,
}

pub fn scalar_learner(spec: &ScalarLearnerSpec) -> Result<ScalarLearnerResult, RunError> {
    let net = LayeredNet::mlp(
        &[1, 1],
        Activation::Identity,
        false,
        DVector::from_element(1, spec.input),
        DVector::from_element(1, spec.target),
        LossKind::Squared,
    )
    .map_err(abort)?;
    let theta = DVector::from_element(1, spec.theta);
    let schedule = MetricSchedule { ema_beta: 0.0, ..MetricSchedule::default() };
    let u0 = MetricState::diagonal(&[1.0]).and_then(|m| m.with_schedule(schedule)).map_err(abort)?;
    let cfg = InnerSolverConfig { inner_steps: spec.inner_steps, inner_lr: spec.inner_lr, momentum: spec.momentum, damping: 0.0 };
    let out = learn_preconditioner(&u0, &net, &theta, Divergence::Ngd, &cfg).map_err(abort)?;
    let (_, g) = net.loss_grad(&theta).map_err(abort)?;
    let u = out.state.values()[0];
    let u_oracle = 1.0 / (spec.input * spec.input);
    let theta_next = spec.theta - u * g[0];
    let theta_star = spec.target / spec.input;
    Ok(ScalarLearnerResult {
        u_learned: u,
        u_oracle,
        u_error: (u - u_oracle).abs(),
        theta_next,
        theta_star,
        step_residual: (theta_next - theta_star).abs(),
        residual_bound: spec.tolerance * g[0].abs(),
        j_initial: out.j_initial,
        j_final: out.j_final,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayeredLearnerResult {
    pub structure: Structure,
    pub angle: f64,
    pub learned_norm: f64,
    pub oracle_norm: f64,
    pub j_learned: f64,
    pub j_oracle: f64,
    pub halvings: usize,
    pub clamped: bool,
    pub fell_back: bool,
}

/// Damped Gauss–Newton direction `−(JᵀH_ℓJ + δI)⁻¹g` with the output
/// Jacobian `J` from central differences of the forward map.
pub fn damped_newton_direction(net: &LayeredNet, theta: &ParamVector, damping: f64, h: f64) -> Result<(ParamVector, DMatrix<f64>), RunError> {
    let out = net.forward(theta).map_err(abort)?;
    let (_, g) = net.loss_grad(theta).map_err(abort)?;
    let mut jac = DMatrix::zeros(out.len(), theta.len());
    let mut t = theta.clone();
    for k in 0..theta.len() {
        let orig = t[k];
        t[k] = orig + h;
        let fp = net.forward(&t).map_err(abort)?;
        t[k] = orig - h;
        let fm = net.forward(&t).map_err(abort)?;
        t[k] = orig;
        jac.set_column(k, &((fp - fm) / (2.0 * h)));
    }
    let hl = net.loss_kind().hessian(&out, net.target());
    let curv = jac.transpose() * hl * &jac + DMatrix::identity(theta.len(), theta.len()) * damping;
    let dir = -curv.clone().cholesky().ok_or_else(|| abort("damped curvature is not positive definite"))?.solve(&g);
    Ok((dir, curv))
}

pub fn layered_learner(spec: &LayeredLearnerSpec) -> Result<LayeredLearnerResult, RunError> {
    let net = LayeredNet::mlp(
        &spec.widths,
        Activation::Identity,
        false,
        DVector::from_column_slice(&spec.input),
        DVector::from_column_slice(&spec.target),
        LossKind::Squared,
    )
    .map_err(abort)?;
    if spec.theta.len() != net.param_len() {
        return Err(ConfigError::Invalid(format!("layered learner theta needs {} values", net.param_len())).into());
    }
    let theta = DVector::from_column_slice(&spec.theta);
    let schedule = MetricSchedule { ema_beta: 0.0, ..MetricSchedule::default() };
    let u0 = MetricState::identity_for(spec.structure, &layer_shapes(&net)).and_then(|m| m.with_schedule(schedule)).map_err(abort)?;
    let cfg = InnerSolverConfig { inner_steps: spec.inner_steps, inner_lr: spec.inner_lr, momentum: spec.momentum, damping: spec.damping };
    let out = learn_preconditioner(&u0, &net, &theta, Divergence::Ngd, &cfg).map_err(abort)?;
    let (_, g) = net.loss_grad(&theta).map_err(abort)?;
    let learned = -out.state.apply(&g).map_err(abort)?;
    let (oracle, curv) = damped_newton_direction(&net, &theta, spec.damping, 1e-6)?;
    let model = |d: &ParamVector| g.dot(d) + 0.5 * d.dot(&(&curv * d));
    Ok(LayeredLearnerResult {
        structure: spec.structure,
        angle: numkit::angle_between(&learned, &oracle),
        learned_norm: learned.norm(),
        oracle_norm: oracle.norm(),
        j_learned: model(&learned),
        j_oracle: model(&oracle),
        halvings: out.halvings,
        clamped: out.clamped,
        fell_back: out.fell_back,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub family: &'static str,
    pub case: usize,
    pub rel_error: f64,
}

pub const GRAD_FAMILIES: [&str; 5] = ["two-scale", "sharp-well", "mlp-squared", "mlp-softmax", "relaxed-objective"];

fn random_net(rng: &mut ChaCha8Rng, loss: LossKind) -> Result<(LayeredNet, ParamVector), RunError> {
    let x0 = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
    let y = match loss {
        LossKind::Squared => DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
        LossKind::SoftmaxCrossEntropy => {
            let p: f64 = rng.random_range(0.0..1.0);
            DVector::from_vec(vec![p, 1.0 - p])
        }
    };
    let net = LayeredNet::mlp(&[3, 4, 2], Activation::Tanh, true, x0, y, loss).map_err(abort)?;
    let theta = DVector::from_fn(net.param_len(), |_, _| rng.random_range(-1.0..1.0));
    Ok((net, theta))
}

fn grad_case(family: &'static str, case: usize, seed: u64, spec: &GradCheckSpec) -> Result<GradCheckRow, RunError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((GRAD_FAMILIES.iter().position(|f| *f == family).expect("known family") * 1_000_000 + case) as u64);
    let (analytic, fd) = match family {
        "two-scale" => {
            let dim = rng.random_range(2..=6);
            let q = TwoScaleQuadratic::random(dim, &mut rng).map_err(abort)?;
            let t = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
            let (_, g) = q.loss_grad(&t).map_err(abort)?;
            (g, finite_difference_grad(|p| q.eval(p).map(|r| r.0).unwrap_or(f64::NAN), &t, spec.h))
        }
        "sharp-well" => {
            let w = SharpWell2D::new(SharpWellParams::default()).map_err(abort)?;
            let r = rng.random_range(0.5..8.0);
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let t = DVector::from_vec(vec![r * phi.cos(), r * phi.sin()]);
            let (_, g) = w.loss_grad(&t).map_err(abort)?;
            (g, finite_difference_grad(|p| w.eval(p).map(|r| r.0).unwrap_or(f64::NAN), &t, spec.h))
        }
        "mlp-squared" | "mlp-softmax" => {
            let loss = if family == "mlp-squared" { LossKind::Squared } else { LossKind::SoftmaxCrossEntropy };
            let (net, theta) = random_net(&mut rng, loss)?;
            let (_, g) = net.loss_grad(&theta).map_err(abort)?;
            (g, finite_difference_grad(|p| net.forward_backward(p).map(|e| e.loss).unwrap_or(f64::NAN), &theta, spec.h))
        }
        _ => {
            let (net, theta) = random_net(&mut rng, LossKind::Squared)?;
            let lin = net.linearize(&theta).map_err(abort)?;
            let div = if case % 2 == 0 { Divergence::Ngd } else { Divergence::Newton };
            let blocks = form_lqr_blocks(&lin, &net, div, metric::DEFAULT_DAMPING).map_err(abort)?;
            let structure = [Structure::Diagonal, Structure::Dense, Structure::LayerDense, Structure::LayerKronecker][(case / 2) % 4];
            let base = MetricState::identity_for(structure, &layer_shapes(&net)).map_err(abort)?;
            let vals: Vec<f64> = base.values().iter().map(|x| x + rng.random_range(-0.3..0.3)).collect();
            let u = base.with_values(vals.clone()).map_err(abort)?;
            let g = lin.eval.grad.clone();
            let (_, analytic) = relaxed_objective_grad(&u, &blocks, &lin, &net, &g).map_err(abort)?;
            let fd = finite_difference_grad(
                |p| {
                    base.with_values(p.iter().copied().collect())
                        .and_then(|m| relaxed_objective(&m, &blocks, &lin, &net, &g))
                        .unwrap_or(f64::NAN)
                },
                &DVector::from_vec(vals),
                spec.h,
            );
            (DVector::from_vec(analytic), fd)
        }
    };
    Ok(GradCheckRow { family, case, rel_error: relative_error(&analytic, &fd, spec.floor) })
}

pub fn gradcheck_rows(spec: &GradCheckSpec, seed: u64) -> Result<Vec<GradCheckRow>, RunError> {
    let jobs: Vec<(&'static str, usize)> = GRAD_FAMILIES.iter().flat_map(|&f| (0..spec.cases).map(move |c| (f, c))).collect();
    jobs.par_iter().map(|&(f, c)| grad_case(f, c, seed, spec)).collect()
}

fn learner_artifacts(scalar: &ScalarLearnerResult, layered: &LayeredLearnerResult, grads: &[GradCheckRow], set: &mut ArtifactSet) {
    let mut t = CsvTable::new(["family", "case", "rel_error"]);
    for r in grads {
        t.push(vec![r.family.into(), r.case.into(), r.rel_error.into()]);
    }
    set.csv("gradcheck.csv", &t);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for r in grads {
        let e = worst.entry(r.family).or_insert(0.0);
        *e = nan_max(*e, r.rel_error);
    }
    set.json(
        "summary.json",
        &serde_json::json!({
            "experiment": ExperimentTag::LlqrMlpCheck,
            "scalar": scalar,
            "layered": layered,
            "gradcheck_max_rel_error": worst,
        }),
    );
}

// ---------------------------------------------------------------------------
// Dispatch

#[derive(Debug, Clone, PartialEq, Serialize)]
struct Manifest {
    experiment: ExperimentTag,
    seed: u64,
    config_sha256: String,
    criteria: Vec<u8>,
    files: BTreeMap<String, String>,
}

/// Runs one experiment and returns its artifacts, manifest included.
pub fn run_experiment(cfg: &ExperimentConfig, pred: &Predictors) -> Result<ArtifactSet, RunError> {
    cfg.validate()?;
    let resolved = cfg.resolved();
    let mut set = ArtifactSet::default();
    match resolved.experiment {
        ExperimentTag::EscapeToy | ExperimentTag::NoiseToy | ExperimentTag::TransferDiagnostic => {
            let runs = trajectory_runs(&resolved)?;
            trajectory_artifacts(&resolved, &runs, &mut set);
        }
        ExperimentTag::EnvelopeSweep => envelope_artifacts(&envelope_rows(resolved.envelope.as_ref().expect("resolved"), pred)?, &mut set),
        ExperimentTag::AmplificationSweep => {
            let spec = resolved.amplification.as_ref().expect("resolved");
            amplification_artifacts(&cancellation_rows(spec, pred)?, &ratio_rows(spec, pred)?, &mut set);
        }
        ExperimentTag::WhiteningCheck => whitening_artifacts(&whitening_rows(resolved.whitening.as_ref().expect("resolved"), resolved.seed)?, &mut set),
        ExperimentTag::DampingCheck => damping_artifacts(&damping_rows(resolved.damping.as_ref().expect("resolved"), resolved.seed, pred)?, &mut set),
        ExperimentTag::SelectionSweep => {
            selection_artifacts(&selection_rows(resolved.selection.as_ref().expect("resolved"), resolved.seed, pred)?, &mut set)
        }
        ExperimentTag::LlqrMlpCheck => {
            let spec = resolved.learner.as_ref().expect("resolved");
            let scalar = scalar_learner(&spec.scalar)?;
            let layered = layered_learner(&spec.layered)?;
            let grads = gradcheck_rows(&spec.gradcheck, resolved.seed)?;
            learner_artifacts(&scalar, &layered, &grads, &mut set);
        }
    }
    set.insert("config.resolved.toml", resolved.to_toml().into_bytes());
    let files = set.files().iter().map(|a| (a.name.clone(), crate::output::sha256_hex(&a.bytes))).collect();
    let manifest = Manifest {
        experiment: resolved.experiment,
        seed: resolved.seed,
        config_sha256: resolved.hash(),
        criteria: resolved.experiment.criteria().to_vec(),
        files,
    };
    set.json("manifest.json", &manifest);
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nan_max_propagates() {
        assert!(nan_max(1.0, f64::NAN).is_nan());
        assert_eq!(nan_max(1.0, 2.0), 2.0);
    }

    #[test]
    fn damped_newton_on_scalar_net() {
        let net = LayeredNet::mlp(&[1, 1], Activation::Identity, false, DVector::from_element(1, 2.0), DVector::from_element(1, 0.0), LossKind::Squared)
            .unwrap();
        let theta = DVector::from_element(1, 1.0);
        let (d, _) = damped_newton_direction(&net, &theta, 0.0, 1e-6).unwrap();
        assert!((d[0] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn escape_run_is_reproducible() {
        let mut cfg = ExperimentConfig::preset(ExperimentTag::EscapeToy);
        cfg.run.as_mut().unwrap().horizon = 200;
        let a = run_experiment(&cfg, &Predictors::default()).unwrap();
        let b = run_experiment(&cfg, &Predictors::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.get("trajectory_llqr-sam_seed0.csv").is_some());
        assert!(a.get("manifest.json").is_some());
    }
}
