//! Declarative experiment configuration (TOML).
//!
//! Every section except `variants` falls back to the acceptance preset for
//! its experiment, so a config file only needs to state what it changes.
//! Sections that the selected experiment does not read are rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use llqrsam_core::landscapes::{SharpWellParams, TwoScaleQuadratic};
use llqrsam_core::metric::Structure;
use llqrsam_core::optimizers::{OptimizerConfig, Rule};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentTag {
    EscapeToy,
    NoiseToy,
    EnvelopeSweep,
    AmplificationSweep,
    WhiteningCheck,
    DampingCheck,
    SelectionSweep,
    LlqrMlpCheck,
    TransferDiagnostic,
}

impl ExperimentTag {
    pub const ALL: [ExperimentTag; 9] = [
        ExperimentTag::EscapeToy,
        ExperimentTag::NoiseToy,
        ExperimentTag::EnvelopeSweep,
        ExperimentTag::AmplificationSweep,
        ExperimentTag::WhiteningCheck,
        ExperimentTag::DampingCheck,
        ExperimentTag::SelectionSweep,
        ExperimentTag::LlqrMlpCheck,
        ExperimentTag::TransferDiagnostic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentTag::EscapeToy => "escape-toy",
            ExperimentTag::NoiseToy => "noise-toy",
            ExperimentTag::EnvelopeSweep => "envelope-sweep",
            ExperimentTag::AmplificationSweep => "amplification-sweep",
            ExperimentTag::WhiteningCheck => "whitening-check",
            ExperimentTag::DampingCheck => "damping-check",
            ExperimentTag::SelectionSweep => "selection-sweep",
            ExperimentTag::LlqrMlpCheck => "llqr-mlp-check",
            ExperimentTag::TransferDiagnostic => "transfer-diagnostic",
        }
    }

    /// Acceptance criteria exercised by this experiment. Criterion 12 covers all of them.
    pub fn criteria(self) -> &'static [u8] {
        match self {
            ExperimentTag::EnvelopeSweep => &[1, 12],
            ExperimentTag::AmplificationSweep => &[2, 3, 12],
            ExperimentTag::WhiteningCheck => &[4, 5, 12],
            ExperimentTag::EscapeToy => &[6, 12],
            ExperimentTag::NoiseToy => &[7, 12],
            ExperimentTag::DampingCheck => &[8, 12],
            ExperimentTag::SelectionSweep => &[9, 12],
            ExperimentTag::LlqrMlpCheck => &[10, 11, 12],
            ExperimentTag::TransferDiagnostic => &[5, 12],
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ExperimentTag::EscapeToy => "deterministic escape from the sharp annulus of the 2-D toy",
            ExperimentTag::NoiseToy => "noisy toy runs on a shared Gaussian schedule; path lengths",
            ExperimentTag::EnvelopeSweep => "scalar sign map: measured vs exact two-cycle amplitude",
            ExperimentTag::AmplificationSweep => "localized-sharpness sweep and envelope amplification ratio",
            ExperimentTag::WhiteningCheck => "whitened vs direct recursion and optimizer vs recursion",
            ExperimentTag::DampingCheck => "AR(1) stationary variance and motion vs closed form",
            ExperimentTag::SelectionSweep => "regenerative two-well occupancy across noise scales",
            ExperimentTag::LlqrMlpCheck => "preconditioner learner oracles and gradient checks",
            ExperimentTag::TransferDiagnostic => "running average of g'Ug under a frozen metric",
        }
    }
}

impl std::str::FromStr for ExperimentTag {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| ConfigError::Invalid(format!("unknown experiment tag {s:?}")))
    }
}

impl std::fmt::Display for ExperimentTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LandscapeSpec {
    SharpWell {
        #[serde(default)]
        params: SharpWellParams,
    },
    TwoScale {
        hbar: Vec<f64>,
        heps: Vec<f64>,
        #[serde(default)]
        angle: f64,
    },
}

impl LandscapeSpec {
    pub fn two_scale(&self) -> Result<TwoScaleQuadratic, ConfigError> {
        match self {
            LandscapeSpec::TwoScale { hbar, heps, angle } => {
                let q = if *angle == 0.0 { TwoScaleQuadratic::diagonal(hbar, heps) } else { TwoScaleQuadratic::rotated(hbar, heps, *angle) };
                q.map_err(|e| ConfigError::Invalid(format!("landscape: {e}")))
            }
            LandscapeSpec::SharpWell { .. } => invalid("expected a two-scale landscape"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "structure", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MetricSpec {
    Identity,
    /// `U = I / curvature`: the metric of an average curvature on the toy.
    InverseCurvature { curvature: f64 },
    Diagonal { values: Vec<f64> },
    /// `U = H̄⁻¹` of a two-scale landscape.
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub horizon: u64,
    pub stride: u64,
    pub start: Vec<f64>,
    /// Noise seeds are `seed, seed + 1, ..., seed + replicates − 1`.
    pub replicates: u64,
    pub variance: f64,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self { horizon: 20_000, stride: 100, start: vec![4.8, 0.0], replicates: 1, variance: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvelopeSpec {
    /// `(η, μ)` pairs; crossed with every `rho` and `lambda_bar`.
    pub cells: Vec<[f64; 2]>,
    pub rho: Vec<f64>,
    pub lambda_bar: Vec<f64>,
    pub steps: usize,
    pub z0: f64,
    /// Fraction of `steps` discarded before measuring the envelope.
    pub burn_in: f64,
    pub tolerance: f64,
}

impl Default for EnvelopeSpec {
    fn default() -> Self {
        Self {
            cells: vec![[0.01, 1.0], [0.01, 10.0], [0.01, 100.0], [0.1, 1.0], [0.1, 10.0], [0.5, 1.0]],
            rho: vec![0.01, 0.1],
            lambda_bar: vec![0.01, 1.0, 100.0],
            steps: 100_000,
            z0: 0.7,
            burn_in: 0.9,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmplificationSpec {
    pub eta: f64,
    pub rho: f64,
    pub lambda_bar: f64,
    pub lambda_eps: Vec<f64>,
    pub lambda_bar_eps: Vec<f64>,
    pub steps: usize,
    pub z0: f64,
    pub burn_in: f64,
    pub tolerance: f64,
    /// Relative tolerance of the amplification identity.
    pub ratio_tolerance: f64,
}

impl Default for AmplificationSpec {
    fn default() -> Self {
        Self {
            eta: 0.01,
            rho: 0.1,
            lambda_bar: 1.0,
            lambda_eps: vec![0.0, 1.0, 100.0, 10_000.0],
            lambda_bar_eps: vec![1.0, 0.04, 0.01],
            steps: 100_000,
            z0: 0.7,
            burn_in: 0.9,
            tolerance: 1e-10,
            ratio_tolerance: 1e-14,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WhiteningSpec {
    pub instances: usize,
    pub min_dim: usize,
    pub max_dim: usize,
    pub steps: usize,
    pub eta: f64,
    pub rho: f64,
    pub start_norm: f64,
    pub whitening_tolerance: f64,
    pub step_tolerance: f64,
}

impl Default for WhiteningSpec {
    fn default() -> Self {
        Self {
            instances: 20,
            min_dim: 2,
            max_dim: 8,
            steps: 100,
            eta: 0.002,
            rho: 1e-4,
            start_norm: 1.0,
            whitening_tolerance: 1e-10,
            step_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DampingSpec {
    pub eta: f64,
    pub lambda: f64,
    pub tau2: f64,
    pub d: Vec<f64>,
    pub steps: u64,
    pub tolerance: f64,
}

impl Default for DampingSpec {
    fn default() -> Self {
        Self { eta: 0.5, lambda: 1.0, tau2: 1.0, d: vec![1.0, 2.0, 4.0], steps: 1_000_000, tolerance: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSpec {
    /// Noise scales, largest first.
    pub sigmas: Vec<f64>,
    /// Cycle budget per noise scale.
    pub cycles: Vec<u64>,
    pub max_steps_per_cycle: u64,
    pub batches: usize,
    pub eta: f64,
    pub rho: f64,
    pub radius: f64,
    /// Entry probabilities `(flat, sharp)`.
    pub weights: [f64; 2],
    /// Sharp well: `H̄ = hbar·I`, `H_ε = diag(heps, 0)`, `U = I/hbar`.
    pub sharp_hbar: f64,
    pub sharp_heps: f64,
    /// Allowed gap between measured and predicted occupancy, in standard errors.
    pub se_multiple: f64,
}

impl Default for SelectionSpec {
    fn default() -> Self {
        Self {
            sigmas: vec![1e-2, 1e-3, 1e-4],
            cycles: vec![4000, 4000, 400],
            max_steps_per_cycle: 5_000_000,
            batches: 20,
            eta: 1.0,
            rho: 0.05,
            radius: 0.05,
            weights: [0.5, 0.5],
            sharp_hbar: 0.25,
            sharp_heps: 0.125,
            se_multiple: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalarLearnerSpec {
    pub input: f64,
    pub target: f64,
    pub theta: f64,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub momentum: f64,
    pub tolerance: f64,
}

impl Default for ScalarLearnerSpec {
    fn default() -> Self {
        Self { input: 2.0, target: 0.0, theta: 1.0, inner_steps: 600, inner_lr: 0.01, momentum: 0.9, tolerance: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayeredLearnerSpec {
    pub widths: Vec<usize>,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub theta: Vec<f64>,
    pub structure: Structure,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub momentum: f64,
    pub damping: f64,
    /// Maximum angle in radians.
    pub tolerance: f64,
}

impl Default for LayeredLearnerSpec {
    fn default() -> Self {
        Self {
            widths: vec![3, 3, 2],
            input: vec![0.8, -0.5, 0.3],
            target: vec![3.0, -2.0],
            theta: vec![-0.3, 0.75, 0.15, -0.45, 0.6, 0.0, -0.6, 0.45, -0.15, -0.75, 0.3, -0.3, 0.75, 0.15, -0.45],
            structure: Structure::LayerDense,
            inner_steps: 5000,
            inner_lr: 0.0173,
            momentum: 0.9,
            damping: 1e-3,
            tolerance: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSpec {
    pub cases: usize,
    pub h: f64,
    pub tolerance: f64,
    pub floor: f64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        Self { cases: 50, h: 1e-5, tolerance: 1e-6, floor: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerSpec {
    pub scalar: ScalarLearnerSpec,
    pub layered: LayeredLearnerSpec,
    pub gradcheck: GradCheckSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentTag,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landscape: Option<LandscapeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<OptimizerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<EnvelopeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplification: Option<AmplificationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub whitening: Option<WhiteningSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<DampingSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learner: Option<LearnerSpec>,
}

fn variant(rule: Rule, lr: f64, rho: f64) -> OptimizerConfig {
    OptimizerConfig { momentum: 0.0, ..OptimizerConfig::new(rule, lr, rho) }
}

/// Radius of the sharp ring minimum of the default toy, from an independent root solve.
pub const TOY_RING_MINIMUM: f64 = 4.999437559320763;

impl ExperimentConfig {
    fn bare(experiment: ExperimentTag) -> Self {
        Self {
            experiment,
            seed: 0,
            output: None,
            landscape: None,
            metric: None,
            variants: Vec::new(),
            run: None,
            envelope: None,
            amplification: None,
            whitening: None,
            damping: None,
            selection: None,
            learner: None,
        }
    }

    /// The configuration used by the acceptance suite, with every section spelled out.
    pub fn preset(tag: ExperimentTag) -> Self {
        let mut c = Self::bare(tag);
        match tag {
            ExperimentTag::EscapeToy => {
                c.landscape = Some(LandscapeSpec::SharpWell { params: SharpWellParams::default() });
                c.metric = Some(MetricSpec::InverseCurvature { curvature: 0.1 });
                c.variants = [Rule::Sgdm, Rule::Sam, Rule::Llqr, Rule::LlqrSam].iter().map(|&r| variant(r, 1e-3, 0.8)).collect();
                c.run = Some(RunSpec::default());
            }
            ExperimentTag::NoiseToy => {
                c.landscape = Some(LandscapeSpec::SharpWell { params: SharpWellParams::default() });
                c.metric = Some(MetricSpec::InverseCurvature { curvature: 0.1 });
                c.variants = [Rule::Sam, Rule::LlqrSam].iter().map(|&r| variant(r, 0.025, 0.8)).collect();
                c.run = Some(RunSpec { start: vec![TOY_RING_MINIMUM, 0.0], replicates: 5, variance: 1e-9, ..RunSpec::default() });
            }
            ExperimentTag::EnvelopeSweep => c.envelope = Some(EnvelopeSpec::default()),
            ExperimentTag::AmplificationSweep => c.amplification = Some(AmplificationSpec::default()),
            ExperimentTag::WhiteningCheck => c.whitening = Some(WhiteningSpec::default()),
            ExperimentTag::DampingCheck => c.damping = Some(DampingSpec::default()),
            ExperimentTag::SelectionSweep => c.selection = Some(SelectionSpec::default()),
            ExperimentTag::LlqrMlpCheck => c.learner = Some(LearnerSpec::default()),
            ExperimentTag::TransferDiagnostic => {
                c.landscape = Some(LandscapeSpec::TwoScale { hbar: vec![1.0, 0.5, 0.25], heps: vec![2.0, 0.0, 0.5], angle: 0.7 });
                c.metric = Some(MetricSpec::Average);
                c.variants = [Rule::Sam, Rule::LlqrSam].iter().map(|&r| variant(r, 0.1, 0.05)).collect();
                c.run = Some(RunSpec { horizon: 2000, stride: 10, start: vec![1.0, 1.0, 1.0], ..RunSpec::default() });
            }
        }
        c
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config is always representable in TOML")
    }

    /// SHA-256 of the canonical JSON form, so formatting of the source file does not matter.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("experiment config serializes");
        hex::encode(Sha256::digest(json))
    }

    fn present_sections(&self) -> Vec<&'static str> {
        let mut s = Vec::new();
        let flags = [
            ("landscape", self.landscape.is_some()),
            ("metric", self.metric.is_some()),
            ("variants", !self.variants.is_empty()),
            ("run", self.run.is_some()),
            ("envelope", self.envelope.is_some()),
            ("amplification", self.amplification.is_some()),
            ("whitening", self.whitening.is_some()),
            ("damping", self.damping.is_some()),
            ("selection", self.selection.is_some()),
            ("learner", self.learner.is_some()),
        ];
        for (name, present) in flags {
            if present {
                s.push(name);
            }
        }
        s
    }

    fn allowed_sections(&self) -> &'static [&'static str] {
        match self.experiment {
            ExperimentTag::EscapeToy | ExperimentTag::NoiseToy | ExperimentTag::TransferDiagnostic => &["landscape", "metric", "variants", "run"],
            ExperimentTag::EnvelopeSweep => &["envelope"],
            ExperimentTag::AmplificationSweep => &["amplification"],
            ExperimentTag::WhiteningCheck => &["whitening"],
            ExperimentTag::DampingCheck => &["damping"],
            ExperimentTag::SelectionSweep => &["selection"],
            ExperimentTag::LlqrMlpCheck => &["learner"],
        }
    }

    /// Fills absent sections from the preset. Variants are never defaulted.
    pub fn resolved(&self) -> Self {
        let p = Self::preset(self.experiment);
        let mut c = self.clone();
        let allowed = self.allowed_sections();
        let want = |s: &str| allowed.contains(&s);
        if want("landscape") && c.landscape.is_none() {
            c.landscape = p.landscape;
        }
        if want("metric") && c.metric.is_none() {
            c.metric = p.metric;
        }
        if want("run") && c.run.is_none() {
            c.run = p.run;
        }
        c.envelope = c.envelope.or(p.envelope);
        c.amplification = c.amplification.or(p.amplification);
        c.whitening = c.whitening.or(p.whitening);
        c.damping = c.damping.or(p.damping);
        c.selection = c.selection.or(p.selection);
        c.learner = c.learner.or(p.learner);
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let allowed = self.allowed_sections();
        if let Some(extra) = self.present_sections().into_iter().find(|s| !allowed.contains(s)) {
            return invalid(format!("section `{extra}` is not used by experiment {}", self.experiment));
        }
        let c = self.resolved();
        match c.experiment {
            ExperimentTag::EscapeToy | ExperimentTag::NoiseToy | ExperimentTag::TransferDiagnostic => c.validate_trajectory(),
            ExperimentTag::EnvelopeSweep => {
                let e = c.envelope.as_ref().expect("resolved");
                if e.cells.is_empty() || e.rho.is_empty() || e.lambda_bar.is_empty() {
                    return invalid("envelope grid must be nonempty");
                }
                check_burn_in(e.burn_in, e.steps)
            }
            ExperimentTag::AmplificationSweep => {
                let a = c.amplification.as_ref().expect("resolved");
                if a.lambda_eps.is_empty() || a.lambda_bar_eps.is_empty() {
                    return invalid("amplification sweep lists must be nonempty");
                }
                check_burn_in(a.burn_in, a.steps)
            }
            ExperimentTag::WhiteningCheck => {
                let w = c.whitening.as_ref().expect("resolved");
                if w.instances == 0 || w.steps == 0 || w.min_dim < 2 || w.min_dim > w.max_dim {
                    return invalid("whitening check needs instances, steps and 2 <= min_dim <= max_dim");
                }
                Ok(())
            }
            ExperimentTag::DampingCheck => {
                let d = c.damping.as_ref().expect("resolved");
                if d.d.is_empty() || d.steps == 0 {
                    return invalid("damping check needs a nonempty d grid and steps");
                }
                Ok(())
            }
            ExperimentTag::SelectionSweep => {
                let s = c.selection.as_ref().expect("resolved");
                if s.sigmas.is_empty() || s.sigmas.len() != s.cycles.len() {
                    return invalid("selection sweep needs one cycle budget per sigma");
                }
                if s.sharp_hbar <= 0.0 || s.sharp_heps < 0.0 {
                    return invalid("sharp well curvatures must be positive");
                }
                Ok(())
            }
            ExperimentTag::LlqrMlpCheck => {
                let l = c.learner.as_ref().expect("resolved");
                let n = l.layered.widths.len();
                if n < 2 || l.layered.input.len() != l.layered.widths[0] || l.layered.target.len() != l.layered.widths[n - 1] {
                    return invalid("layered learner input/target must match the first/last widths");
                }
                if l.gradcheck.cases == 0 || l.gradcheck.h <= 0.0 {
                    return invalid("gradient check needs cases and a positive step");
                }
                Ok(())
            }
        }
    }

    fn validate_trajectory(&self) -> Result<(), ConfigError> {
        if self.variants.is_empty() {
            return invalid(format!("experiment {} needs at least one variant", self.experiment));
        }
        let mut seen = BTreeSet::new();
        for v in &self.variants {
            v.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if !seen.insert(v.rule) {
                return invalid(format!("variant {} listed twice", v.rule.name()));
            }
        }
        let run = self.run.as_ref().expect("resolved");
        if run.horizon == 0 || run.stride == 0 || run.replicates == 0 {
            return invalid("run horizon, stride and replicates must be positive");
        }
        if !(run.variance >= 0.0 && run.variance.is_finite()) {
            return invalid(format!("noise variance {} must be nonnegative", run.variance));
        }
        let landscape = self.landscape.as_ref().expect("resolved");
        let dim = match landscape {
            LandscapeSpec::SharpWell { .. } => {
                if self.experiment == ExperimentTag::TransferDiagnostic {
                    return invalid("transfer-diagnostic needs a two-scale landscape");
                }
                2
            }
            LandscapeSpec::TwoScale { .. } => {
                if self.experiment != ExperimentTag::TransferDiagnostic {
                    return invalid(format!("experiment {} runs on the sharp-well toy", self.experiment));
                }
                landscape.two_scale()?.dim()
            }
        };
        if run.start.len() != dim {
            return invalid(format!("start has {} coordinates, landscape has {dim}", run.start.len()));
        }
        match self.metric.as_ref().expect("resolved") {
            MetricSpec::Average if !matches!(landscape, LandscapeSpec::TwoScale { .. }) => invalid("average metric needs a two-scale landscape"),
            MetricSpec::InverseCurvature { curvature } if !(*curvature > 0.0) => invalid("metric curvature must be positive"),
            MetricSpec::Diagonal { values } if values.len() != dim || values.iter().any(|v| !(*v > 0.0)) => {
                invalid(format!("diagonal metric needs {dim} positive values"))
            }
            _ => Ok(()),
        }
    }
}

fn check_burn_in(burn_in: f64, steps: usize) -> Result<(), ConfigError> {
    if !(0.0..1.0).contains(&burn_in) || steps == 0 {
        return invalid("burn_in must be in [0, 1) and steps positive");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for tag in ExperimentTag::ALL {
            let p = ExperimentConfig::preset(tag);
            p.validate().unwrap();
            let back = ExperimentConfig::from_toml(&p.to_toml()).unwrap();
            assert_eq!(back, p, "{tag}");
            assert_eq!(back.hash(), p.hash());
        }
    }

    #[test]
    fn minimal_sweep_config_uses_preset() {
        let c = ExperimentConfig::from_toml("experiment = \"damping-check\"\nseed = 3\n").unwrap();
        assert_eq!(c.resolved().damping, Some(DampingSpec::default()));
    }

    #[test]
    fn empty_variant_list_is_rejected() {
        let err = ExperimentConfig::from_toml("experiment = \"escape-toy\"\nseed = 0\n").unwrap_err();
        assert!(err.to_string().contains("variant"), "{err}");
    }

    #[test]
    fn seed_is_required() {
        assert!(ExperimentConfig::from_toml("experiment = \"damping-check\"\n").is_err());
    }

    #[test]
    fn foreign_sections_and_unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("experiment = \"damping-check\"\nseed = 0\n[envelope]\nsteps = 10\n").is_err());
        assert!(ExperimentConfig::from_toml("experiment = \"damping-check\"\nseed = 0\n[damping]\nstep = 10\n").is_err());
    }

    #[test]
    fn start_dimension_must_match() {
        let text = "experiment = \"escape-toy\"\nseed = 0\n[[variants]]\nrule = \"sam\"\n[run]\nstart = [1.0, 2.0, 3.0]\n";
        assert!(ExperimentConfig::from_toml(text).is_err());
    }

    #[test]
    fn every_tag_maps_to_a_criterion() {
        for tag in ExperimentTag::ALL {
            assert!(tag.criteria().iter().any(|&c| c < 12), "{tag}");
        }
    }
}
