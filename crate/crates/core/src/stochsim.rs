//! Stochastic experiments: a stateless shared Gaussian noise schedule,
//! noisy trajectories with exit and path-length bookkeeping, an AR(1)
//! simulator and the regenerative multi-well selection model.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::analysis::{self, AnalysisError, Ar1Params};
use crate::landscapes::{Landscape, LandscapeError, Plateau, Region, TwoScaleQuadratic};
use crate::metric::MetricState;
use crate::numkit::ParamVector;
use crate::optimizers::{self, OptimizerConfig, OptimizerError, OptimizerState};
use crate::trajectory::{TrajectoryRecord, TrajectoryRow};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Landscape(#[from] LandscapeError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

// ---------------------------------------------------------------------------
// Counter-based noise

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform in the open interval (0, 1) from `(seed, t, k)`.
pub fn counter_uniform(seed: u64, t: u64, k: u64) -> f64 {
    let h = splitmix(splitmix(splitmix(seed) ^ t) ^ k.wrapping_mul(GOLDEN));
    ((h >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Gaussian noise that is a pure function of `(seed, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub seed: u64,
    pub variance: f64,
    pub dim: usize,
}

impl NoiseSchedule {
    pub fn new(seed: u64, variance: f64, dim: usize) -> Result<Self, SimError> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(SimError::InvalidConfig(format!("noise variance {variance} must be nonnegative")));
        }
        Ok(Self { seed, variance, dim })
    }

    pub fn is_silent(&self) -> bool {
        self.variance == 0.0
    }
}

/// `ξ_t ~ N(0, σ² I)`, identical for every caller with the same `(seed, t)`.
pub fn noise_at(s: &NoiseSchedule, t: u64) -> ParamVector {
    if s.variance == 0.0 {
        return ParamVector::zeros(s.dim);
    }
    let std = Normal::standard();
    let sigma = s.variance.sqrt();
    DVector::from_fn(s.dim, |k, _| sigma * std.inverse_cdf(counter_uniform(s.seed, t, k as u64)))
}

// ---------------------------------------------------------------------------
// Noisy trajectories

pub struct TrajectoryOptions<'a> {
    pub variant: String,
    pub stride: u64,
    pub classify: Option<&'a dyn Fn(&ParamVector) -> Region>,
}

impl Default for TrajectoryOptions<'_> {
    fn default() -> Self {
        Self { variant: String::new(), stride: 1, classify: None }
    }
}

/// Runs `horizon` optimizer steps with the schedule's noise injected into
/// every update. Rows are logged every `stride` steps plus the final state.
pub fn run_noisy_trajectory(
    landscape: &dyn Landscape,
    cfg: &OptimizerConfig,
    metric: &MetricState,
    theta0: &ParamVector,
    schedule: &NoiseSchedule,
    horizon: u64,
    opts: &TrajectoryOptions<'_>,
) -> Result<TrajectoryRecord, SimError> {
    if horizon == 0 {
        return Err(SimError::InvalidConfig("horizon must be at least 1".into()));
    }
    if opts.stride == 0 {
        return Err(SimError::InvalidConfig("stride must be at least 1".into()));
    }
    if schedule.dim != theta0.len() {
        return Err(SimError::InvalidConfig(format!("noise dimension {} != parameter dimension {}", schedule.dim, theta0.len())));
    }
    cfg.validate()?;
    let classify = |t: &ParamVector| opts.classify.map_or(Region::Neither, |f| f(t));

    let mut state = OptimizerState::new(theta0.len());
    let mut theta = theta0.clone();
    let start_region = classify(&theta);
    let mut exit_step = None;
    let mut path = 0.0;
    let mut dual_sq_sum = 0.0;
    let mut hasher = Sha256::new();
    let mut rows = Vec::with_capacity((horizon / opts.stride + 2) as usize);

    for t in 0..horizon {
        let xi = (!schedule.is_silent()).then(|| noise_at(schedule, t));
        if let Some(xi) = &xi {
            hasher.update(t.to_le_bytes());
            for x in xi.iter() {
                hasher.update(x.to_le_bytes());
            }
        }
        let region = classify(&theta);
        let out = optimizers::step(cfg, &mut state, metric, landscape, &theta, xi.as_ref())?;
        dual_sq_sum += out.grad_dual_norm * out.grad_dual_norm;
        if t % opts.stride == 0 {
            rows.push(TrajectoryRow {
                step: t,
                theta: theta.iter().copied().collect(),
                loss: out.loss,
                grad_norm: out.grad_norm,
                grad_dual_norm: out.grad_dual_norm,
                perturbation_norm: out.perturbation_norm,
                path_length: path,
                region,
            });
        }
        path += (&out.theta - &theta).norm();
        theta = out.theta;
        if exit_step.is_none() && classify(&theta) != start_region {
            exit_step = Some(t + 1);
        }
    }

    let (loss, g) = landscape.loss_grad(&theta)?;
    let final_region = classify(&theta);
    rows.push(TrajectoryRow {
        step: horizon,
        theta: theta.iter().copied().collect(),
        loss,
        grad_norm: g.norm(),
        grad_dual_norm: metric.dual_norm(&g).map_err(|source| OptimizerError::Metric { step: horizon, source })?,
        perturbation_norm: 0.0,
        path_length: path,
        region: final_region,
    });

    Ok(TrajectoryRecord {
        variant: opts.variant.clone(),
        seed: schedule.seed,
        variance: schedule.variance,
        stride: opts.stride,
        horizon,
        rows,
        exit_step,
        final_region,
        final_theta: theta.iter().copied().collect(),
        path_length: path,
        mean_dual_norm_sq: dual_sq_sum / horizon as f64,
        noise_digest: hex::encode(hasher.finalize()),
    })
}

// ---------------------------------------------------------------------------
// AR(1) damping

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ar1Estimate {
    pub variance: f64,
    pub motion: f64,
    pub steps: u64,
}

/// Simulates the noisy scalar mode from its stationary law and returns the
/// empirical `E[z²]` and `E[(Δz)²]`.
pub fn simulate_ar1(p: &Ar1Params, steps: u64, seed: u64) -> Result<Ar1Estimate, SimError> {
    let (var, _) = analysis::ar1_stationary_stats(p)?;
    if steps == 0 {
        return Err(SimError::InvalidConfig("AR(1) simulation needs at least one step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = p.coefficient();
    let gain = p.noise_gain() * p.tau2.sqrt();
    let draw = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut z = var.sqrt() * draw(&mut rng);
    let mut sum_sq = 0.0;
    let mut sum_dsq = 0.0;
    for _ in 0..steps {
        let next = a * z + gain * draw(&mut rng);
        sum_dsq += (next - z) * (next - z);
        z = next;
        sum_sq += z * z;
    }
    Ok(Ar1Estimate { variance: sum_sq / steps as f64, motion: sum_dsq / steps as f64, steps })
}

// ---------------------------------------------------------------------------
// Regenerative multi-well selection

#[derive(Debug, Clone)]
pub enum WellKind {
    /// Zero-gradient basin: SAM skips and the iterate is a pure random walk.
    Plateau,
    Quadratic(TwoScaleQuadratic),
}

#[derive(Debug, Clone)]
pub struct WellSpec {
    pub name: String,
    /// Entry probability `ν_m`.
    pub weight: f64,
    pub kind: WellKind,
    /// Exit radius `R`.
    pub radius: f64,
    pub metric: MetricState,
}

impl WellSpec {
    fn dim(&self) -> usize {
        self.metric.dim()
    }
}

#[derive(Debug, Clone)]
pub struct RegenerativeConfig {
    pub wells: Vec<WellSpec>,
    /// Noise scale `σ`, applied both to the start offset and per step.
    pub sigma: f64,
    pub max_cycles: u64,
    pub max_steps_per_cycle: u64,
    pub seed: u64,
    /// Number of contiguous cycle batches for the Monte-Carlo standard error.
    pub batches: usize,
}

impl RegenerativeConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.wells.is_empty() {
            return bad("at least one well is required".into());
        }
        let total: f64 = self.wells.iter().map(|w| w.weight).sum();
        if self.wells.iter().any(|w| !(w.weight >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return bad(format!("well weights must form a probability vector (sum {total})"));
        }
        if self.wells.iter().any(|w| !(w.radius > 0.0)) {
            return bad("exit radii must be positive".into());
        }
        let dim = self.wells[0].dim();
        if self.wells.iter().any(|w| w.dim() != dim) {
            return bad("all wells must share one dimension".into());
        }
        if let Some(w) = self.wells.iter().find(|w| matches!(&w.kind, WellKind::Quadratic(q) if q.dim() != dim)) {
            return bad(format!("well {} landscape dimension differs from its metric", w.name));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma {} must be nonnegative", self.sigma));
        }
        if self.max_cycles == 0 || self.max_steps_per_cycle == 0 {
            return bad("cycle limits must be positive".into());
        }
        if self.batches < 2 || self.batches as u64 > self.max_cycles {
            return bad(format!("batches {} must be in [2, max_cycles]", self.batches));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WellStats {
    pub name: String,
    pub weight: f64,
    pub cycles: u64,
    pub censored: u64,
    pub total_steps: u64,
    pub mean_exit_time: f64,
    pub mean_path_length: f64,
    pub occupancy: f64,
    /// Batch-means standard error of `occupancy`.
    pub occupancy_se: f64,
    /// Renewal-reward prediction from the configured `ν` and measured mean exit times.
    pub predicted_occupancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitStats {
    pub sigma: f64,
    pub wells: Vec<WellStats>,
    pub total_steps: u64,
    pub censored_cycles: u64,
}

struct CycleResult {
    well: usize,
    steps: u64,
    path: f64,
    censored: bool,
}

fn pick_well(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

fn run_cycle(cfg: &RegenerativeConfig, opt: &OptimizerConfig, cycle: u64) -> Result<CycleResult, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cycle);
    let weights: Vec<f64> = cfg.wells.iter().map(|w| w.weight).collect();
    let u: f64 = rand::Rng::random(&mut rng);
    let idx = pick_well(&weights, u);
    let well = &cfg.wells[idx];
    let dim = well.dim();
    let plateau = Plateau { dim };
    let landscape: &dyn Landscape = match &well.kind {
        WellKind::Plateau => &plateau,
        WellKind::Quadratic(q) => q,
    };
    let gauss = |rng: &mut ChaCha8Rng| DVector::from_fn(dim, |_, _| cfg.sigma * Distribution::<f64>::sample(&StandardNormal, rng));

    let mut e = gauss(&mut rng);
    let mut state = OptimizerState::new(dim);
    let mut steps = 0;
    let mut path = 0.0;
    while e.norm() < well.radius {
        if steps == cfg.max_steps_per_cycle {
            return Ok(CycleResult { well: idx, steps, path, censored: true });
        }
        let xi = gauss(&mut rng);
        let out = optimizers::step(opt, &mut state, &well.metric, landscape, &e, Some(&xi))?;
        path += (&out.theta - &e).norm();
        e = out.theta;
        steps += 1;
    }
    Ok(CycleResult { well: idx, steps, path, censored: false })
}

/// Regenerative idealization: each cycle samples a well from `ν`, starts at
/// its center plus an `N(0, σ²I)` offset, runs the noisy local dynamics
/// until `‖e‖ ≥ R`, and repeats. Censored cycles are excluded from the
/// occupancy and exit-time statistics and counted separately.
pub fn regenerative_simulate(cfg: &RegenerativeConfig, opt: &OptimizerConfig) -> Result<ExitStats, SimError> {
    cfg.validate()?;
    opt.validate()?;
    let m = cfg.wells.len();
    let results: Vec<CycleResult> = (0..cfg.max_cycles).map(|c| run_cycle(cfg, opt, c)).collect::<Result<_, _>>()?;

    let mut steps = vec![0u64; m];
    let mut cycles = vec![0u64; m];
    let mut censored = vec![0u64; m];
    let mut paths = vec![0.0; m];
    let batch_len = results.len().div_ceil(cfg.batches);
    let mut batch_steps = vec![vec![0u64; m]; cfg.batches];
    for (c, r) in results.iter().enumerate() {
        if r.censored {
            censored[r.well] += 1;
            continue;
        }
        steps[r.well] += r.steps;
        cycles[r.well] += 1;
        paths[r.well] += r.path;
        batch_steps[(c / batch_len).min(cfg.batches - 1)][r.well] += r.steps;
    }
    let total: u64 = steps.iter().sum();
    if total == 0 {
        return Err(SimError::InvalidConfig("no uncensored steps were simulated".into()));
    }
    let means: Vec<f64> = (0..m).map(|i| if cycles[i] > 0 { steps[i] as f64 / cycles[i] as f64 } else { 0.0 }).collect();
    let weights: Vec<f64> = cfg.wells.iter().map(|w| w.weight).collect();
    let predicted = if means.iter().zip(&weights).all(|(t, w)| *t > 0.0 || *w == 0.0) {
        let safe: Vec<f64> = means.iter().map(|t| t.max(f64::MIN_POSITIVE)).collect();
        analysis::occupation_mass(&weights, &safe)?
    } else {
        vec![f64::NAN; m]
    };

    let wells = (0..m)
        .map(|i| {
            let occ = steps[i] as f64 / total as f64;
            let batch_occ: Vec<f64> = batch_steps
                .iter()
                .filter_map(|b| {
                    let t: u64 = b.iter().sum();
                    (t > 0).then(|| b[i] as f64 / t as f64)
                })
                .collect();
            let nb = batch_occ.len() as f64;
            let mean_b = batch_occ.iter().sum::<f64>() / nb;
            let var_b = batch_occ.iter().map(|x| (x - mean_b) * (x - mean_b)).sum::<f64>() / (nb - 1.0).max(1.0);
            WellStats {
                name: cfg.wells[i].name.clone(),
                weight: weights[i],
                cycles: cycles[i],
                censored: censored[i],
                total_steps: steps[i],
                mean_exit_time: means[i],
                mean_path_length: if cycles[i] > 0 { paths[i] / cycles[i] as f64 } else { 0.0 },
                occupancy: occ,
                occupancy_se: (var_b / nb).sqrt(),
                predicted_occupancy: predicted[i],
            }
        })
        .collect();
    Ok(ExitStats { sigma: cfg.sigma, wells, total_steps: total, censored_cycles: censored.iter().sum() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscapes::{SharpWell2D, SharpWellParams};
    use crate::optimizers::Rule;
    use nalgebra::DVector;

    #[test]
    fn silent_schedule_is_zero() {
        let s = NoiseSchedule::new(7, 0.0, 3).unwrap();
        for t in [0, 1, 1000] {
            assert_eq!(noise_at(&s, t), ParamVector::zeros(3));
        }
    }

    #[test]
    fn noise_is_a_pure_function_of_seed_and_step() {
        let s = NoiseSchedule::new(42, 1.0, 4).unwrap();
        assert_eq!(noise_at(&s, 17), noise_at(&s, 17));
        assert_ne!(noise_at(&s, 17), noise_at(&s, 18));
        let other = NoiseSchedule::new(43, 1.0, 4).unwrap();
        assert_ne!(noise_at(&s, 17), noise_at(&other, 17));
    }

    #[test]
    fn noise_moments() {
        let s = NoiseSchedule::new(3, 1.0, 1).unwrap();
        let n = 1_000_000u64;
        let (mut sum, mut sq) = (0.0, 0.0);
        for t in 0..n {
            let x = noise_at(&s, t)[0];
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() <= 4.0 / 1e3, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.01, "var {var}");
    }

    #[test]
    fn uniform_stays_in_open_interval() {
        for t in 0..10_000 {
            let u = counter_uniform(u64::MAX, t, t * 3);
            assert!(u > 0.0 && u < 1.0);
        }
    }

    fn toy() -> SharpWell2D {
        SharpWell2D::new(SharpWellParams::default()).unwrap()
    }

    #[test]
    fn silent_descent_at_ring_minimum_stays_put() {
        let w = toy();
        let classify = |t: &ParamVector| w.region(t);
        let opts = TrajectoryOptions { classify: Some(&classify), stride: 10, ..Default::default() };
        let theta0 = DVector::from_vec(vec![w.ring_minimum(), 0.0]);
        let cfg = OptimizerConfig::new(Rule::Sgdm, 1e-3, 0.0);
        let rec = run_noisy_trajectory(&w, &cfg, &MetricState::identity(2), &theta0, &NoiseSchedule::new(0, 0.0, 2).unwrap(), 1000, &opts)
            .unwrap();
        assert!(rec.path_length < 1e-9, "{}", rec.path_length);
        assert_eq!(rec.final_region, Region::Sharp);
        assert_eq!(rec.exit_step, None);
        assert!(rec.is_consistent());
        assert_eq!(rec.rows.last().unwrap().step, 1000);
    }

    #[test]
    fn deterministic_sam_escapes_when_envelope_exceeds_basin() {
        let w = toy();
        let rho = 0.8;
        assert!(rho > w.basin_radius());
        let classify = |t: &ParamVector| w.region(t);
        let opts = TrajectoryOptions { classify: Some(&classify), stride: 100, ..Default::default() };
        let theta0 = DVector::from_vec(vec![4.8, 0.0]);
        let cfg = OptimizerConfig::new(Rule::Sam, 1e-3, rho);
        let rec = run_noisy_trajectory(&w, &cfg, &MetricState::identity(2), &theta0, &NoiseSchedule::new(0, 0.0, 2).unwrap(), 20_000, &opts)
            .unwrap();
        assert!(rec.exit_step.is_some());
        assert_eq!(rec.final_region, Region::Flat);
    }

    #[test]
    fn shared_schedule_feeds_identical_noise() {
        let w = toy();
        let theta0 = DVector::from_vec(vec![w.ring_minimum(), 0.0]);
        let sched = NoiseSchedule::new(5, 1e-9, 2).unwrap();
        let u = MetricState::scaled_identity(2, 10.0).unwrap();
        let a = run_noisy_trajectory(&w, &OptimizerConfig::new(Rule::Sam, 0.01, 0.5), &u, &theta0, &sched, 500, &TrajectoryOptions::default())
            .unwrap();
        let b = run_noisy_trajectory(&w, &OptimizerConfig::new(Rule::LlqrSam, 0.01, 0.5), &u, &theta0, &sched, 500, &TrajectoryOptions::default())
            .unwrap();
        assert_eq!(a.noise_digest, b.noise_digest);
        assert_ne!(a.final_theta, b.final_theta);
        let a2 = run_noisy_trajectory(&w, &OptimizerConfig::new(Rule::Sam, 0.01, 0.5), &u, &theta0, &sched, 500, &TrajectoryOptions::default())
            .unwrap();
        assert_eq!(a, a2);
    }

    #[test]
    fn ar1_spec_example_matches_closed_form() {
        let p = Ar1Params { eta: 0.1, lambda: 1.0, d: 1.0, tau2: 1.0 };
        let est = simulate_ar1(&p, 1_000_000, 1).unwrap();
        let (var, motion) = analysis::ar1_stationary_stats(&p).unwrap();
        assert!((est.variance / var - 1.0).abs() < 0.02, "{} vs {var}", est.variance);
        assert!((est.motion / motion - 1.0).abs() < 0.02, "{} vs {motion}", est.motion);
    }

    fn flat_well(weight: f64) -> WellSpec {
        WellSpec { name: "flat".into(), weight, kind: WellKind::Plateau, radius: 0.05, metric: MetricState::identity(2) }
    }

    #[test]
    fn single_well_has_full_occupancy() {
        let cfg = RegenerativeConfig { wells: vec![flat_well(1.0)], sigma: 1e-2, max_cycles: 50, max_steps_per_cycle: 100_000, seed: 1, batches: 5 };
        let stats = regenerative_simulate(&cfg, &OptimizerConfig::new(Rule::LlqrSam, 1.0, 0.05)).unwrap();
        assert_eq!(stats.wells[0].occupancy, 1.0);
        assert_eq!(stats.wells[0].predicted_occupancy, 1.0);
    }

    #[test]
    fn censored_cycles_are_reported() {
        let cfg = RegenerativeConfig { wells: vec![flat_well(1.0)], sigma: 1e-4, max_cycles: 4, max_steps_per_cycle: 10, seed: 1, batches: 2 };
        let err = regenerative_simulate(&cfg, &OptimizerConfig::new(Rule::LlqrSam, 1.0, 0.05)).unwrap_err();
        assert!(matches!(err, SimError::InvalidConfig(_)));
        let cfg = RegenerativeConfig { sigma: 2e-2, max_steps_per_cycle: 3, max_cycles: 200, batches: 4, ..cfg };
        let stats = regenerative_simulate(&cfg, &OptimizerConfig::new(Rule::LlqrSam, 1.0, 0.05)).unwrap();
        assert!(stats.censored_cycles > 0);
        assert_eq!(stats.censored_cycles, stats.wells[0].censored);
    }

    #[test]
    fn regenerative_config_validation() {
        let cfg = RegenerativeConfig { wells: vec![flat_well(0.7)], sigma: 1e-2, max_cycles: 10, max_steps_per_cycle: 10, seed: 0, batches: 2 };
        assert!(cfg.validate().is_err());
    }
}
