use llqrsam_core::analysis::{
    matrix_recursion_step, measured_envelope, occupation_mass, scalar_map_iterate, two_cycle_amplitude, whitened_step, ScalarModeParams,
    Whitening,
};
use llqrsam_core::landscapes::{SharpWell2D, SharpWellParams, TwoScaleQuadratic};
use llqrsam_core::optimizers::{self, OptimizerState};
use llqrsam_core::stochsim::{self, regenerative_simulate, RegenerativeConfig, TrajectoryOptions, WellKind, WellSpec};
use llqrsam_core::{noise_at, MetricState, NoiseSchedule, OptimizerConfig, ParamVector, Region, Rule};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_run(rule: Rule, variance: f64, seed: u64) -> llqrsam_core::TrajectoryRecord {
    let well = SharpWell2D::new(SharpWellParams::default()).unwrap();
    let metric = MetricState::scaled_identity(2, 10.0).unwrap();
    let cfg = OptimizerConfig { momentum: 0.0, ..OptimizerConfig::new(rule, 1e-3, 0.8) };
    let theta0 = DVector::from_vec(vec![4.8, 0.0]);
    let schedule = NoiseSchedule::new(seed, variance, 2).unwrap();
    let classify = |t: &ParamVector| well.region(t);
    let opts = TrajectoryOptions { variant: rule.name().into(), stride: 500, classify: Some(&classify) };
    stochsim::run_noisy_trajectory(&well, &cfg, &metric, &theta0, &schedule, 20_000, &opts).unwrap()
}

#[test]
fn sam_variants_leave_the_sharp_ring() {
    for rule in [Rule::Sam, Rule::LlqrSam] {
        let rec = toy_run(rule, 0.0, 0);
        assert!(rec.is_consistent());
        assert_eq!(rec.final_region, Region::Flat, "{rule:?}");
        assert!(rec.exit_step.is_some());
    }
}

#[test]
fn plain_descent_stays_in_the_sharp_ring() {
    for rule in [Rule::Sgdm, Rule::Llqr] {
        let rec = toy_run(rule, 0.0, 0);
        assert_eq!(rec.final_region, Region::Sharp, "{rule:?}");
        assert_eq!(rec.exit_step, None);
    }
}

#[test]
fn noisy_runs_replay_bit_for_bit() {
    let a = toy_run(Rule::LlqrSam, 1e-9, 3);
    let b = toy_run(Rule::LlqrSam, 1e-9, 3);
    assert_eq!(a, b);
    let c = toy_run(Rule::Sam, 1e-9, 3);
    assert_eq!(a.noise_digest, c.noise_digest);
    let d = toy_run(Rule::LlqrSam, 1e-9, 4);
    assert_ne!(a.noise_digest, d.noise_digest);
}

#[test]
fn noise_is_a_pure_function_of_seed_and_step() {
    let s = NoiseSchedule::new(11, 0.25, 3).unwrap();
    let late = noise_at(&s, 1_000_000);
    for t in 0..10 {
        noise_at(&s, t);
    }
    assert_eq!(noise_at(&s, 1_000_000), late);
}

#[test]
fn optimizer_tracks_the_matrix_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = TwoScaleQuadratic::random(4, &mut rng).unwrap();
    let u = q.average_metric().unwrap();
    let metric = MetricState::dense(&u).unwrap();
    let cfg = OptimizerConfig { momentum: 0.0, ..OptimizerConfig::new(Rule::LlqrSam, 0.002, 1e-4) };
    let mut state = OptimizerState::new(4);
    let mut theta = DVector::from_vec(vec![0.5, -0.5, 0.5, -0.5]);
    for _ in 0..100 {
        let e = matrix_recursion_step(&q, &u, cfg.lr, cfg.rho, &theta, cfg.norm_floor).unwrap();
        theta = optimizers::step(&cfg, &mut state, &metric, &q, &theta, None).unwrap().theta;
        assert!((&theta - &e).amax() <= 1e-12);
    }
}

#[test]
fn occupancy_shares_sum_to_one() {
    let cfg = RegenerativeConfig {
        wells: vec![
            WellSpec { name: "flat".into(), weight: 0.5, kind: WellKind::Plateau, radius: 0.05, metric: MetricState::identity(2) },
            WellSpec {
                name: "sharp".into(),
                weight: 0.5,
                kind: WellKind::Quadratic(TwoScaleQuadratic::diagonal(&[0.25, 0.25], &[0.125, 0.125]).unwrap()),
                radius: 0.05,
                metric: MetricState::scaled_identity(2, 4.0).unwrap(),
            },
        ],
        sigma: 1e-2,
        max_cycles: 400,
        max_steps_per_cycle: 1_000_000,
        seed: 9,
        batches: 10,
    };
    let opt = OptimizerConfig { momentum: 0.0, ..OptimizerConfig::new(Rule::LlqrSam, 1.0, 0.05) };
    let stats = regenerative_simulate(&cfg, &opt).unwrap();
    let total: f64 = stats.wells.iter().map(|w| w.occupancy).sum();
    assert!((total - 1.0).abs() < 1e-12);
    let means: Vec<f64> = stats.wells.iter().map(|w| w.mean_exit_time).collect();
    let pred = occupation_mass(&[0.5, 0.5], &means).unwrap();
    assert!((pred.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(stats.wells[1].occupancy < stats.wells[0].occupancy);
    assert_eq!(regenerative_simulate(&cfg, &opt).unwrap(), stats);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scalar_map_settles_on_the_two_cycle(
        eta_mu in 0.05f64..1.0,
        mu in 1.0f64..20.0,
        rho in 0.01f64..0.5,
        lambda_bar in 0.01f64..100.0,
        z0 in 0.3f64..1.3,
    ) {
        let p = ScalarModeParams::new(eta_mu / mu, mu, rho, lambda_bar).unwrap();
        let map = p.sign_map();
        let zs = scalar_map_iterate(&map, z0, 4000);
        let amp = two_cycle_amplitude(&map).unwrap();
        prop_assert!((measured_envelope(&zs, 400) - amp).abs() <= 1e-10 * (1.0 + amp));
    }

    #[test]
    fn whitening_round_trips(seed in 0u64..1000, dim in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = TwoScaleQuadratic::random(dim, &mut rng).unwrap();
        let w = Whitening::new(&q).unwrap();
        let e = DVector::from_fn(dim, |i, _| (i as f64 + 1.0).sin());
        let back = w.unwhiten(&w.whiten(&e).unwrap()).unwrap();
        prop_assert!((back - &e).amax() <= 1e-12 * (1.0 + e.amax()));
    }

    #[test]
    fn whitened_and_direct_steps_agree(seed in 0u64..1000, dim in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = TwoScaleQuadratic::random(dim, &mut rng).unwrap();
        let w = Whitening::new(&q).unwrap();
        let u = q.average_metric().unwrap();
        let e = DVector::from_fn(dim, |i, _| (i as f64 * 0.7 + 0.2).cos());
        let direct = matrix_recursion_step(&q, &u, 0.01, 0.05, &e, 0.0).unwrap();
        let via = w.unwhiten(&whitened_step(&w.a, 0.01, 0.05, &w.whiten(&e).unwrap(), 0.0).unwrap()).unwrap();
        prop_assert!((direct - via).amax() <= 1e-10);
    }
}
