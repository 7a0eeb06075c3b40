use nalgebra::{DMatrix, DVector};
use sphs::ensemble::{mean_ode_reference, run_ensemble, EnsembleConfig};
use sphs::fields::{MatrixField, ScalarField};
use sphs::integrators::{IntegratorConfig, Scheme};
use sphs::models::{standard_driver, PureNoise, VanDerPol};
use sphs::system::{ControlLaw, SphsDefinition};
use sphs::SphsError;

fn noise_config(n: usize) -> EnsembleConfig {
    EnsembleConfig::new(
        n,
        5,
        IntegratorConfig::new(Scheme::StratonovichHeun, 1e-2, 1.0).with_record_every(10),
    )
}

#[test]
fn standard_error_scales_with_the_square_root_of_paths() {
    let s = PureNoise::default().setup().unwrap();
    let small = run_ensemble(&s.def, &noise_config(100), &s.control, &s.driver, &s.x0).unwrap();
    let large = run_ensemble(&s.def, &noise_config(10_000), &s.control, &s.driver, &s.x0).unwrap();
    let ratio = small.h_stderr.last().unwrap() / large.h_stderr.last().unwrap();
    assert!((8.0..=12.0).contains(&ratio), "ratio {ratio}");
    // E[H_t] = t / 2
    for (t, (m, se)) in large.times.iter().zip(large.mean_h.iter().zip(&large.h_stderr)) {
        assert!((m - 0.5 * t).abs() <= 4.0 * se + 1e-12, "t={t}: {m} +- {se}");
    }
}

#[test]
fn reruns_are_identical_and_seeds_matter() {
    let s = PureNoise::default().setup().unwrap();
    let a = run_ensemble(&s.def, &noise_config(300), &s.control, &s.driver, &s.x0).unwrap();
    let b = run_ensemble(&s.def, &noise_config(300), &s.control, &s.driver, &s.x0).unwrap();
    assert_eq!(a, b);
    let mut other = noise_config(300);
    other.master_seed = 6;
    let c = run_ensemble(&s.def, &other, &s.control, &s.driver, &s.x0).unwrap();
    assert_ne!(a.mean_h, c.mean_h);
}

#[test]
fn exploded_paths_are_counted_and_excluded() {
    // dx = x^3 dt + x o dB blows up for most paths from x0 = 1.5 within T = 1
    let def = SphsDefinition::builder("cubic", 1)
        .storage(
            MatrixField::zeros(1, 1),
            MatrixField::function(1, 1, |x| DMatrix::from_element(1, 1, -x[0] * x[0])),
            0,
        )
        .noise_map(
            MatrixField::function(1, 1, |x| DMatrix::from_element(1, 1, x[0] * 0.1)),
            vec![2],
        )
        .hamiltonian(ScalarField::quadratic(DMatrix::identity(1, 1)))
        .build()
        .unwrap();
    let cfg = EnsembleConfig::new(
        50,
        1,
        IntegratorConfig::new(Scheme::StratonovichHeun, 1e-3, 1.0).with_blowup_threshold(1e3),
    );
    let x0 = DVector::from_element(1, 1.5);
    let sum = run_ensemble(&def, &cfg, &ControlLaw::Zero, &standard_driver(0.0), &x0).unwrap();
    assert_eq!(sum.n_exploded, 50);
    assert!(sum.all_exploded());
    assert_eq!(sum.fraction_exploded(), 1.0);

    let x0 = DVector::from_element(1, 0.2);
    let sum = run_ensemble(&def, &cfg, &ControlLaw::Zero, &standard_driver(0.0), &x0).unwrap();
    assert_eq!(sum.n_exploded, 0);
    assert_eq!(sum.n_samples, 50);
}

#[test]
fn mean_reference_rejects_nonlinear_systems() {
    let s = VanDerPol::default().setup().unwrap();
    let cfg = IntegratorConfig::new(Scheme::StratonovichHeun, 1e-2, 1.0);
    let err = mean_ode_reference(&s.def, &s.driver, &s.control, &s.x0, &cfg).unwrap_err();
    assert!(matches!(err, SphsError::Nonlinear(_)), "{err}");
}

#[test]
fn antithetic_pairs_halve_the_sample_count() {
    let s = PureNoise::default().setup().unwrap();
    let cfg = noise_config(200).with_antithetic(true);
    let sum = run_ensemble(&s.def, &cfg, &s.control, &s.driver, &s.x0).unwrap();
    assert_eq!(sum.n_samples, 100);
    // the state is linear in W, so pair means cancel exactly
    assert!(sum.mean_state.last().unwrap().amax() <= 1e-12);
}
