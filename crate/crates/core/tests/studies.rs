use std::f64::consts::PI;

use sac_core::harness::{
    identity_suite, run_plan, temporal_rate_study, CheckStatus, ExperimentKind, ExperimentPlan,
    RunOptions,
};
use sac_core::stepper::InitialData;
use sac_core::stochastic::sample_path;
use sac_core::{run_trajectory, FemSpace, QuadratureChoice, SchemeConfig, SigmaPreset};

fn identity_plan(d: usize, n: usize) -> ExperimentPlan {
    ExperimentPlan {
        kind: ExperimentKind::IdentitySuite,
        d,
        n,
        scheme: SchemeConfig {
            steps: 40,
            ..SchemeConfig::default()
        },
        ..ExperimentPlan::default()
    }
}

#[test]
fn identity_suite_in_two_dimensions() {
    let suite = identity_suite(&identity_plan(2, 16)).unwrap();
    for c in &suite.report.checks {
        assert_eq!(c.status, CheckStatus::Pass, "{}: {}", c.name, c.worst);
    }
    assert!(suite.report.passed);
}

#[test]
fn lumped_quadrature_reports_expected_failures() {
    let plan = ExperimentPlan {
        quadrature: QuadratureChoice::Lumped,
        ..identity_plan(1, 32)
    };
    let report = identity_suite(&plan).unwrap().report;
    assert_eq!(
        report.check("energy_identity_sigma_zero").unwrap().status,
        CheckStatus::ExpectedFail
    );
    assert!(report.passed);
}

#[test]
fn three_dimensional_smoke_run() {
    let space = FemSpace::periodic(3, 1.0, 4).unwrap();
    let cfg = SchemeConfig {
        horizon: 0.02,
        steps: 2,
        sigma: SigmaPreset::sine(0.5),
        ..SchemeConfig::default()
    };
    let path = sample_path(3, 0, cfg.horizon, cfg.steps).unwrap();
    let x0 = |x: &[f64]| (2.0 * PI * x[0]).cos() * (2.0 * PI * x[2]).sin();
    let traj = run_trajectory(&space, &cfg, InitialData::Function(&x0), &path.increments).unwrap();
    assert_eq!(traj.diagnostics.len(), 2);
    for d in &traj.diagnostics {
        assert!(d.residual_norm <= cfg.newton_tol * d.residual_scale);
        assert!(d.identity_residual <= 1e-10 * d.energy.total.max(1.0));
    }
}

fn small_temporal_plan() -> ExperimentPlan {
    ExperimentPlan {
        kind: ExperimentKind::TemporalRate,
        length: 2.0 * PI,
        scheme: SchemeConfig {
            sigma: SigmaPreset::sine(0.5),
            ..SchemeConfig::default()
        },
        levels: vec![4, 8, 16],
        reference: 128,
        j_fine: 128,
        spectral_modes: 16,
        n_paths: 6,
        ..ExperimentPlan::default()
    }
}

#[test]
fn temporal_reports_do_not_depend_on_threads() {
    let plan = small_temporal_plan();
    let one = run_plan(&plan, &RunOptions { threads: 1, cache_dir: None }).unwrap();
    let four = run_plan(&plan, &RunOptions { threads: 4, cache_dir: None }).unwrap();
    assert_eq!(one, four);
}

#[test]
fn cached_reference_gives_identical_reports() {
    let plan = small_temporal_plan();
    let dir = tempfile::tempdir().unwrap();
    let cached = RunOptions {
        threads: 1,
        cache_dir: Some(dir.path().to_path_buf()),
    };
    let cold = temporal_rate_study(&plan, &cached).unwrap();
    let warm = temporal_rate_study(&plan, &cached).unwrap();
    let plain = temporal_rate_study(&plan, &RunOptions::default()).unwrap();
    assert_eq!(cold.report, warm.report);
    assert_eq!(cold.report, plain.report);
    assert!(std::fs::read_dir(dir.path()).unwrap().count() >= 2);
}

#[test]
fn errors_shrink_with_the_time_step() {
    let study = temporal_rate_study(&small_temporal_plan(), &RunOptions::default()).unwrap();
    let errs: Vec<f64> = study.report.estimates.iter().map(|e| e.max_sq_l2.mean).collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    assert!(study.report.coupling_verified);
}
