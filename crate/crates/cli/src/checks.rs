//! Verification suite: one check per acceptance criterion, each comparing
//! simulation against a closed form or an independent oracle.

use std::time::Instant;

use llqrsam_core::optimizers::Rule;
use llqrsam_core::Region;
use serde::Serialize;

use crate::config::{ExperimentConfig, ExperimentTag};
use crate::experiments::{self, nan_max, Predictors, RunError};
use crate::output::{json_bytes, ArtifactSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = "<")]
    Below,
    #[serde(rename = ">=")]
    AtLeast,
}

impl Relation {
    fn holds(self, value: f64, bound: f64) -> bool {
        match self {
            Relation::AtMost => value <= bound,
            Relation::Below => value < bound,
            Relation::AtLeast => value >= bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Measurement {
    pub name: String,
    pub value: f64,
    pub relation: Relation,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub id: u8,
    pub name: &'static str,
    pub experiment: Option<ExperimentTag>,
    pub passed: bool,
    pub runtime_limit_s: Option<f64>,
    pub measurements: Vec<Measurement>,
    pub error: Option<String>,
}

pub const CRITERIA: [(u8, &str, Option<f64>); 12] = [
    (1, "two-cycle exactness", Some(10.0)),
    (2, "localized-sharpness cancellation", Some(10.0)),
    (3, "amplification identity", None),
    (4, "whitening equivalence", Some(5.0)),
    (5, "optimizer vs recursion", None),
    (6, "deterministic toy escape", Some(5.0)),
    (7, "noisy toy path length", Some(30.0)),
    (8, "AR(1) damping", Some(10.0)),
    (9, "selection decay", Some(60.0)),
    (10, "learner oracle", Some(10.0)),
    (11, "gradient correctness", None),
    (12, "determinism", None),
];

/// Inputs shared by every check.
#[derive(Debug, Clone, Copy, Default)]
pub struct CheckContext {
    pub predictors: Predictors,
    pub seed: Option<u64>,
}

impl CheckContext {
    fn preset(&self, tag: ExperimentTag) -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(tag);
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c
    }
}

#[derive(Default)]
struct Sheet {
    items: Vec<Measurement>,
}

impl Sheet {
    fn add(&mut self, name: impl Into<String>, value: f64, relation: Relation, bound: f64) {
        let passed = relation.holds(value, bound);
        self.items.push(Measurement { name: name.into(), value, relation, bound, passed });
    }

    fn flag(&mut self, name: impl Into<String>, ok: bool) {
        self.add(name, if ok { 1.0 } else { 0.0 }, Relation::AtLeast, 1.0);
    }
}

fn worst(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, nan_max)
}

fn check_1(ctx: &CheckContext, s: &mut Sheet) -> Result<(), RunError> {
    let c = ctx.preset(ExperimentTag::EnvelopeSweep);
    let spec = c.envelope.as_ref().expect("preset");
    let rows = experiments::envelope_rows(spec, &ctx.predictors)?;
    s.add("cells", rows.len() as f64, Relation::AtLeast, 36.0);
    s.add("max_abs_error", worst(rows.iter().map(|r| r.abs_error)), Relation::AtMost, spec.tolerance);
    Ok(())
}

fn check_2(ctx: &CheckContext, s: &mut Sheet) -> Result<(), RunError> {
    let c = ctx.preset(ExperimentTag::AmplificationSweep);
    let spec = c.amplification.as_ref().expect("preset");
    for r in experiments::cancellation_rows(spec, &ctx.predictors)? {
        let tag = format!("lambda_eps={}", r.lambda_eps);
        s.add(format!("{tag}: llqr_sam_abs_error"), r.abs_error, Relation::AtMost, spec.tolerance);
        s.add(format!("{tag}: leading_scale_abs_error"), r.rescale_error, Relation::AtMost, spec.tolerance);
        s.add(format!("{tag}: vanilla_sam_abs_error"), r.vanilla_error, Relation::AtMost, spec.tolerance);
    }
    Ok(())
}

fn check_3(ctx: &CheckContext, s: &mut Sheet) -> Result<(), RunError> {
    let c = ctx.preset(ExperimentTag::AmplificationSweep);
    let spec = c.amplification.as_ref().expect("preset");
    for r in experiments::ratio_rows(spec, &ctx.predictors)? {
        s.add(format!("lambda_bar_eps={}: rel_error", r.lambda_bar_eps), r.rel_error, Relation::AtMost, spec.ratio_tolerance);
        s.add(format!("lambda_bar_eps={}: oracle_rel_error", r.lambda_bar_eps), r.oracle_rel_error, Relation::AtMost, spec.ratio_tolerance);
    }
    Ok(())
}

fn check_4(ctx: &CheckContext, s: &mut Sheet) -> Result<(), RunError> {
    let c = ctx.preset(ExperimentTag::WhiteningCheck);
    let spec = c.whitening.as_ref().expect("preset");
    let rows = experiments::whitening_rows(spec, c.seed)?;
    s.add("instances", rows.len() as f64, Relation::AtLeast, 20.0);
    s.flag("all_non_commuting", rows.iter().all(|r| !r.commuting));
    s.add("max_dim", rows.iter().map(|r| r.dim).max().unwrap_or(0) as f64, Relation::AtMost, 8.0);
    s.add("max_whitening_error", worst(rows.iter().map(|r| r.whitening_error)), Relation::AtMost, spec.whitening_tolerance);
    Ok(())
}

fn check_5(ctx: &CheckContext, s: &mut Sheet) -> Result<(), RunError> {
    let c = ctx.preset(ExperimentTag::WhiteningCheck);
    let spec = c.whitening.as_ref().expect("preset");
    let rows = experiments::whitening_rows(spec, c.seed)?;
    s.add("instances", rows.len() as f64, Relation::AtLeast, 20.0);
    s.add("max_step_error", worst(rows.iter().map(|r| r.step_error)), Relation::AtMost, spec.step_tolerance);
    Ok(())
}

fn check_6(ctx: &CheckContext, s: &mut Sheet) -> Result<(), RunError> {
    let runs = experiments::trajectory_runs(&ctx.preset(ExperimentTag::EscapeToy))?;
    for r in &runs {
        let want = if r.rule.uses_sam() { Region::Flat } else { Region::Sharp };
        s.flag(format!("{} ends {}", r.rule.name(), want.as_str()), r.record.final_region == want);
    }
    for rule in [Rule::Sgdm, Rule::Sam, Rule::Llqr, Rule::LlqrSam] {
        s.flag(format!("{} present", rule.name()), runs.iter().any(|r| r.rule == rule));
    }
    Ok(())
}

fn check_7(ctx: &CheckContext, s: &mut Sheet) -> Result<(), RunError> {
    let c = ctx.preset(ExperimentTag::NoiseToy);
    let runs = experiments::trajectory_runs(&c)?;
    let seeds: Vec<u64> = runs.iter().filter(|r| r.rule == Rule::Sam).map(|r| r.seed).collect();
    s.add("seeds", seeds.len() as f64, Relation::AtLeast, 5.0);
    for seed in seeds {
        let find = |rule| runs.iter().find(|r| r.rule == rule && r.seed == seed).expect("variant per seed");
        let (sam, llqr) = (find(Rule::Sam), find(Rule::LlqrSam));
        s.flag(format!("seed {seed}: sam ends flat"), sam.record.final_region == Region::Flat);
        s.flag(format!("seed {seed}: llqr-sam ends flat"), llqr.record.final_region == Region::Flat);
        s.flag(format!("seed {seed}: shared noise"), sam.record.noise_digest == llqr.record.noise_digest);
        s.add(format!("seed {seed}: path ratio llqr-sam/sam"), llqr.record.path_length / sam.record.path_length, Relation::Below, 1.0);
    }
    Ok(())
}

fn check_8(ctx: &CheckContext, s: &mut Sheet) -> Result<(), RunError> {
    let c = ctx.preset(ExperimentTag::DampingCheck);
    let spec = c.damping.as_ref().expect("preset");
    let rows = experiments::damping_rows(spec, c.seed, &ctx.predictors)?;
    s.add("grid_points", rows.len() as f64, Relation::AtLeast, 3.0);
    for r in &rows {
        s.add(format!("d={}: variance_rel_error", r.d), r.var_rel_error, Relation::AtMost, spec.tolerance);
        s.add(format!("d={}: motion_rel_error", r.d), r.motion_rel_error, Relation::AtMost, spec.tolerance);
    }
    for w in rows.windows(2) {
        s.add(format!("variance d={} over d={}", w[1].d, w[0].d), w[1].var_measured / w[0].var_measured, Relation::Below, 1.0);
        s.add(format!("motion d={} over d={}", w[1].d, w[0].d), w[1].motion_measured / w[0].motion_measured, Relation::Below, 1.0);
    }
    Ok(())
}

fn check_9(ctx: &CheckContext, s: &mut Sheet) -> Result<(), RunError> {
    let c = ctx.preset(ExperimentTag::SelectionSweep);
    let spec = c.selection.as_ref().expect("preset");
    let rows = experiments::selection_rows(spec, c.seed, &ctx.predictors)?;
    s.add("noise_scales", rows.len() as f64, Relation::AtLeast, 3.0);
    for r in &rows {
        s.add(format!("sigma={}: gap_in_se", r.sigma), r.gap_in_se, Relation::AtMost, spec.se_multiple);
        s.add(format!("sigma={}: censored_cycles", r.sigma), r.censored as f64, Relation::AtMost, f64::INFINITY);
    }
    for w in rows.windows(2) {
        s.add(
            format!("occupancy sigma={} over sigma={}", w[1].sigma, w[0].sigma),
            w[1].sharp_occupancy / w[0].sharp_occupancy,
            Relation::Below,
            1.0,
        );
    }
    Ok(())
}

fn check_10(ctx: &CheckContext, s: &mut Sheet) -> Result<(), RunError> {
    let c = ctx.preset(ExperimentTag::LlqrMlpCheck);
    let spec = c.learner.as_ref().expect("preset");
    let scalar = experiments::scalar_learner(&spec.scalar)?;
    s.add("scalar: |U - 1/H|", scalar.u_error, Relation::AtMost, spec.scalar.tolerance);
    s.add("scalar: |theta_next - theta_star|", scalar.step_residual, Relation::AtMost, scalar.residual_bound);
    let layered = experiments::layered_learner(&spec.layered)?;
    s.add("two-layer: angle to damped Newton (rad)", layered.angle, Relation::AtMost, spec.layered.tolerance);
    s.flag("two-layer: refresh accepted", !layered.fell_back);
    Ok(())
}

fn check_11(ctx: &CheckContext, s: &mut Sheet) -> Result<(), RunError> {
    let c = ctx.preset(ExperimentTag::LlqrMlpCheck);
    let spec = &c.learner.as_ref().expect("preset").gradcheck;
    let rows = experiments::gradcheck_rows(spec, c.seed)?;
    for family in experiments::GRAD_FAMILIES {
        let errs: Vec<f64> = rows.iter().filter(|r| r.family == family).map(|r| r.rel_error).collect();
        s.add(format!("{family}: cases"), errs.len() as f64, Relation::AtLeast, 50.0);
        s.add(format!("{family}: max_rel_error"), worst(errs), Relation::AtMost, spec.tolerance);
    }
    Ok(())
}

/// Experiments replayed by the determinism check. The selection sweep is
/// covered by its own seeded check and omitted for runtime.
pub const REPLAYED: [ExperimentTag; 8] = [
    ExperimentTag::EscapeToy,
    ExperimentTag::NoiseToy,
    ExperimentTag::EnvelopeSweep,
    ExperimentTag::AmplificationSweep,
    ExperimentTag::WhiteningCheck,
    ExperimentTag::DampingCheck,
    ExperimentTag::LlqrMlpCheck,
    ExperimentTag::TransferDiagnostic,
];

fn check_12(ctx: &CheckContext, s: &mut Sheet) -> Result<(), RunError> {
    for tag in REPLAYED {
        let c = ctx.preset(tag);
        let a: ArtifactSet = experiments::run_experiment(&c, &ctx.predictors)?;
        let b = experiments::run_experiment(&c, &ctx.predictors)?;
        let differing = a.files().iter().zip(b.files()).filter(|(x, y)| x != y).count() + a.files().len().abs_diff(b.files().len());
        s.add(format!("{tag}: differing artifacts"), differing as f64, Relation::AtMost, 0.0);
    }
    Ok(())
}

pub fn run_check(id: u8, ctx: &CheckContext) -> CheckResult {
    let &(_, name, runtime_limit_s) = CRITERIA.iter().find(|c| c.0 == id).expect("criterion id in 1..=12");
    let experiment = ExperimentTag::ALL.into_iter().find(|t| t.criteria().contains(&id) && id != 12);
    let mut sheet = Sheet::default();
    let outcome = match id {
        1 => check_1(ctx, &mut sheet),
        2 => check_2(ctx, &mut sheet),
        3 => check_3(ctx, &mut sheet),
        4 => check_4(ctx, &mut sheet),
        5 => check_5(ctx, &mut sheet),
        6 => check_6(ctx, &mut sheet),
        7 => check_7(ctx, &mut sheet),
        8 => check_8(ctx, &mut sheet),
        9 => check_9(ctx, &mut sheet),
        10 => check_10(ctx, &mut sheet),
        11 => check_11(ctx, &mut sheet),
        _ => check_12(ctx, &mut sheet),
    };
    let error = outcome.err().map(|e| e.to_string());
    let passed = error.is_none() && !sheet.items.is_empty() && sheet.items.iter().all(|m| m.passed);
    CheckResult { id, name, experiment, passed, runtime_limit_s, measurements: sheet.items, error }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub id: u8,
    pub seconds: f64,
    pub limit_s: Option<f64>,
}

/// Runs the selected checks in order. Timings are kept apart from the
/// results so the report itself is byte-reproducible.
pub fn run_checks(ids: &[u8], ctx: &CheckContext) -> (Vec<CheckResult>, Vec<Timing>) {
    let mut results = Vec::with_capacity(ids.len());
    let mut timings = Vec::with_capacity(ids.len());
    for &id in ids {
        let start = Instant::now();
        let r = run_check(id, ctx);
        timings.push(Timing { id, seconds: start.elapsed().as_secs_f64(), limit_s: r.runtime_limit_s });
        log::info!("criterion {id}: {}", if r.passed { "PASS" } else { "FAIL" });
        results.push(r);
    }
    (results, timings)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report<'a> {
    pub passed: bool,
    pub failed: Vec<u8>,
    pub checks: &'a [CheckResult],
}

pub fn report_bytes(results: &[CheckResult]) -> Vec<u8> {
    let failed = results.iter().filter(|r| !r.passed).map(|r| r.id).collect::<Vec<_>>();
    json_bytes(&Report { passed: failed.is_empty(), failed, checks: results })
}

pub fn timings_bytes(timings: &[Timing]) -> Vec<u8> {
    json_bytes(&serde_json::json!({ "checks": timings }))
}
