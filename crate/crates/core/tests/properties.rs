use num_complex::Complex64;
use proptest::prelude::*;
use sac_core::model::{energy, monotonicity_gap};
use sac_core::report::fit_log_log;
use sac_core::spectral::SpectralSpace;
use sac_core::stochastic::{coarsen, path_total, sample_path};
use sac_core::{step, FemSpace, SchemeConfig, SigmaPreset};

fn field_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coarsening_composes(seed in 0u64..1000, path in 0u64..50, a in 0u32..4, b in 0u32..4) {
        let fine = sample_path(seed, path, 0.5, 256).unwrap().increments;
        let (fa, fb) = (1usize << a, 1usize << b);
        let direct = coarsen(&fine, fa * fb).unwrap();
        let composed = coarsen(&coarsen(&fine, fa).unwrap(), fb).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&direct), bits(&composed));
        prop_assert_eq!(path_total(&direct).to_bits(), path_total(&fine).to_bits());
    }

    #[test]
    fn projection_is_idempotent(values in field_values(16)) {
        let space = FemSpace::periodic(1, 1.0, 16).unwrap();
        let u = space.field(values).unwrap();
        let p = space.l2_project_field(&space, &u).unwrap();
        for (a, b) in p.coeffs.iter().zip(&u.coeffs) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prolongation_preserves_the_function(values in field_values(8)) {
        let coarse = FemSpace::periodic(1, 1.0, 8).unwrap();
        let fine = FemSpace::periodic(1, 1.0, 32).unwrap();
        let u = coarse.field(values).unwrap();
        let v = coarse.prolongate(&u, &fine).unwrap();
        let (nu, nv) = (coarse.norms(&u).unwrap(), fine.norms(&v).unwrap());
        prop_assert!((nu.l2 - nv.l2).abs() <= 1e-12 * (1.0 + nu.l2));
        prop_assert!((nu.h1_semi - nv.h1_semi).abs() <= 1e-12 * (1.0 + nu.h1_semi));
        // Projecting back recovers the coarse field.
        let back = coarse.l2_project_field(&fine, &v).unwrap();
        for (a, b) in back.coeffs.iter().zip(&u.coeffs) {
            prop_assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn weak_monotonicity_holds(a in field_values(32), b in field_values(32)) {
        let space = FemSpace::periodic(1, 2.0, 32).unwrap();
        let (a, b) = (space.field(a).unwrap(), space.field(b).unwrap());
        let e = space.field(a.coeffs.iter().zip(&b.coeffs).map(|(x, y)| x - y).collect()).unwrap();
        let e2 = space.norms(&e).unwrap().l2.powi(2);
        prop_assert!(monotonicity_gap(&space, &a, &b).unwrap() <= 1e-12 * (1.0 + e2));
    }

    #[test]
    fn energy_is_nonnegative(values in field_values(9)) {
        let space = FemSpace::periodic(2, 1.0, 3).unwrap();
        let e = energy(&space, &space.field(values).unwrap()).unwrap();
        prop_assert!(e.grad_part >= 0.0 && e.psi_part >= 0.0);
        prop_assert!((e.total - e.grad_part - e.psi_part).abs() <= 1e-14 * (1.0 + e.total));
    }

    #[test]
    fn steps_are_bit_reproducible(values in field_values(16), dw in -0.1..0.1f64) {
        let space = FemSpace::periodic(1, 1.0, 16).unwrap();
        let cfg = SchemeConfig { sigma: SigmaPreset::sine(0.5), ..SchemeConfig::default() };
        let y = space.field(values).unwrap();
        let (a, _) = step(&space, &cfg, &y, dw).unwrap();
        let (b, _) = step(&space, &cfg, &y, dw).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn spectral_grid_round_trip(re in prop::collection::vec(-1.0..1.0f64, 9), im in prop::collection::vec(-1.0..1.0f64, 8)) {
        let space = SpectralSpace::new(3.0, 8, 2.0).unwrap();
        // Hermitian coefficients of a real field.
        let n = 8usize;
        let mut c = vec![Complex64::new(0.0, 0.0); 2 * n + 1];
        c[n] = Complex64::new(re[0], 0.0);
        for m in 1..=n {
            let z = Complex64::new(re[m], im[m - 1]);
            c[n + m] = z;
            c[n - m] = z.conj();
        }
        let u = space.field(c.clone()).unwrap();
        let back = space.from_grid(&space.to_grid(&u));
        for (a, b) in back.iter().zip(&c) {
            prop_assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn power_laws_are_recovered(slope in -3.0..3.0f64, scale in 0.01..100.0f64) {
        let x = [1.0, 0.5, 0.25, 0.125, 0.0625];
        let y: Vec<f64> = x.iter().map(|v: &f64| scale * v.powf(slope)).collect();
        let fit = fit_log_log(&x, &y).unwrap();
        prop_assert!((fit.slope - slope).abs() < 1e-10);
    }
}
