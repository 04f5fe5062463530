mod common;

use common::{model, rng};
use gridesc::case_model::{build_params, degrade, Dynamics};
use gridesc::energy::{EnergyModel, GridModel, LinearBoundary, QuadraticModel};
use gridesc::equilibrium::{solve_equilibrium, EquilibriumOptions};
use gridesc::exit_rate::{log_error, rate_constants};
use gridesc::failure_point::{solve_unconditional, NlpOptions};
use gridesc::fixtures;
use gridesc::langevin::{
    batch_means_se, equilibration_ensemble, estimate_rate, gibbs_check, quantile_delta, run_unconditional,
    simulate_unconditional, slot_moments, trajectory, Integrator, SimConfig,
};
use gridesc::GridError;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp};

fn cfg(tau: f64, dt: f64) -> SimConfig {
    SimConfig {
        tau,
        dt,
        max_time: 10.0,
        seed: 5,
        record_stride: 1,
    }
}

#[test]
fn zero_temperature_is_explicit_euler() {
    let m = model(fixtures::slack_gen_load());
    let mut x = m.flat_start();
    x[0] = 0.3;
    x[4] = 0.95;
    let c = cfg(0.0, 1e-4);
    let path = trajectory(&m, &x, &c, 50, 0).unwrap();
    let drift = m.structure().drift();
    let mut y = x.clone();
    for state in path.iter().skip(1) {
        y = &y + 1e-4 * (&drift * m.gradient(&y));
        assert!((state - &y).amax() < 1e-15);
    }
}

#[test]
fn noise_vanishes_on_generator_angles() {
    let m = model(fixtures::slack_gen_load());
    let eq = solve_equilibrium(&m, None, &EquilibriumOptions::default()).unwrap();
    let slot = m.layout().theta_slot(1).unwrap();
    let mut it = Integrator::new(&m, &cfg(0.01, 1e-5), 3);
    let mut x = eq.x.clone();
    let before = x[slot];
    it.step(&mut x).unwrap();
    // at x̄ the drift is zero up to the solver tolerance
    assert!((x[slot] - before).abs() < 1e-14);
    assert!((&x - &eq.x).amax() > 1e-6);
}

#[test]
fn ornstein_uhlenbeck_variance() {
    let k = 2.0;
    let tau = 0.3;
    let m = QuadraticModel::ou_1d(k, 100.0);
    let c = cfg(tau, 2e-3);
    let path = trajectory(&m, &DVector::zeros(1), &c, 1_000_000, 0).unwrap();
    let sq: Vec<f64> = path.iter().skip(10_000).map(|x| x[0] * x[0]).collect();
    let var = sq.iter().sum::<f64>() / sq.len() as f64;
    let se = batch_means_se(&sq, 100);
    assert!((var - tau / k).abs() < 3.0 * se, "{var} vs {} (se {se})", tau / k);
}

#[test]
fn exit_at_time_zero_when_already_outside() {
    let m = model(fixtures::slack_load_load());
    let eq = solve_equilibrium(&m, None, &EquilibriumOptions::default()).unwrap();
    let mut p = m.params().clone();
    p.lines[2].theta_max = 0.5 * m.line_value(&eq.x, 2);
    let m2 = GridModel::new(p).unwrap();
    let rec = simulate_unconditional(&m2, &eq.x, 2, &cfg(1e-4, 1e-6), 0).unwrap();
    assert_eq!(rec.exit_time, 0.0);
    assert!(m2.line_value(&rec.exit_state, 2) >= m2.theta_max(2));
}

#[test]
fn timeout_is_reported_as_censoring() {
    let m = QuadraticModel::ou_1d(1.0, 50.0);
    let c = SimConfig {
        max_time: 0.01,
        ..cfg(0.1, 1e-3)
    };
    match simulate_unconditional(&m, &DVector::zeros(1), 0, &c, 0) {
        Err(GridError::Timeout { elapsed }) => assert!((elapsed - 0.01).abs() < 1e-12),
        other => panic!("{other:?}"),
    }
    let b = run_unconditional(&m, &DVector::zeros(1), 0, &c, 4).unwrap();
    assert_eq!(b.censored.len(), 4);
    assert!(b.rate(0.95).censored_only);
}

#[test]
fn replicas_are_reproducible_and_schedule_independent() {
    let m = model(fixtures::slack_load_load());
    let eq = solve_equilibrium(&m, None, &EquilibriumOptions::default()).unwrap();
    let c = cfg(6e-4, 1e-6);
    let a = simulate_unconditional(&m, &eq.x, 2, &c, 7).unwrap();
    let b = simulate_unconditional(&m, &eq.x, 2, &c, 7).unwrap();
    assert_eq!(a, b);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let r1 = one.install(|| run_unconditional(&m, &eq.x, 2, &c, 16).unwrap());
    let r4 = four.install(|| run_unconditional(&m, &eq.x, 2, &c, 16).unwrap());
    assert_eq!(r1, r4);
    assert_eq!(r1.exits[7], a);
}

#[test]
fn rate_estimator_algebra() {
    let r = estimate_rate(&[1.0; 10], &[], 0.95);
    assert_eq!(r.rate, 1.0);
    let r2 = estimate_rate(&[1.0; 10], &[2.5], 0.95);
    assert_eq!(r2.total_time - r.total_time, 2.5);
    assert!(r.ci.0 < 1.0 && r.ci.1 > 1.0);
    let none = estimate_rate(&[], &[3.0], 0.95);
    assert!(none.censored_only);
    assert!((none.ci.1 - (-(0.025f64).ln()) / 3.0).abs() < 1e-9);
}

#[test]
fn rate_interval_coverage() {
    let mut r = rng(9);
    let exp = Exp::new(2.0).unwrap();
    let mut hits = 0;
    for _ in 0..1000 {
        let n = r.random_range(5..40);
        let xs: Vec<f64> = (0..n).map(|_| exp.sample(&mut r)).collect();
        let est = estimate_rate(&xs, &[], 0.95);
        if est.ci.0 <= 2.0 && 2.0 <= est.ci.1 {
            hits += 1;
        }
    }
    // binomial sd at 1000 trials is about 0.007
    assert!((hits as f64 / 1000.0 - 0.95).abs() < 0.025, "{hits}");
}

#[test]
fn quantile_error_shrinks_for_exponential_samples() {
    let mut r = rng(10);
    let exp = Exp::new(3.0).unwrap();
    let small: Vec<f64> = (0..50).map(|_| exp.sample(&mut r)).collect();
    let large: Vec<f64> = (0..50_000).map(|_| exp.sample(&mut r)).collect();
    let (d_small, rows) = quantile_delta(&small, &[]);
    let (d_large, _) = quantile_delta(&large, &[]);
    assert_eq!(rows.len(), 19);
    assert!(d_large < d_small);
    assert!(d_large < 0.02);
}

#[test]
fn deterministic_energy_does_not_increase() {
    let m = model(fixtures::four_line_ring());
    let eq = solve_equilibrium(&m, None, &EquilibriumOptions::default()).unwrap();
    let mut x = eq.x.clone();
    x[0] = 0.5;
    for s in m.layout().theta_range() {
        x[s] += 0.05;
    }
    let mut it = Integrator::new(&m, &cfg(0.0, 1e-5), 0);
    let mut h = m.energy(&x);
    for _ in 0..100_000 {
        it.step(&mut x).unwrap();
        let hn = m.energy(&x);
        assert!(hn <= h + 1e-12);
        h = hn;
    }
    assert!(h - eq.energy < 1e-3);
}

#[test]
fn exits_match_first_order_rate_and_cluster_at_failure_point() {
    let m = model(fixtures::slack_load_load());
    let eq = solve_equilibrium(&m, None, &EquilibriumOptions::default()).unwrap();
    let fp = solve_unconditional(&m, &eq, 2, None, &NlpOptions::default()).unwrap();
    let rc = rate_constants(&m, &eq, &fp).unwrap();
    let tau = fp.delta_h / 3.0;
    let b = run_unconditional(&m, &eq.x, 2, &cfg(tau, 1e-6), 200).unwrap();
    assert!(b.censored.is_empty());
    let mean_time = b.exit_times().iter().sum::<f64>() / 200.0;
    let l1 = rc.log_lambda1(tau).unwrap().exp();
    assert!(log_error(1.0 / mean_time, l1) < 1.0);

    let dims: Vec<usize> = m.layout().theta_range().chain(m.layout().volt_range()).collect();
    let mut mean = DVector::zeros(m.dim());
    for e in &b.exits {
        mean += &e.exit_state / 200.0;
        assert!(m.line_value(&e.exit_state, 2) >= m.theta_max(2));
    }
    let dist = |a: &DVector<f64>, c: &DVector<f64>| dims.iter().map(|&i| (a[i] - c[i]).powi(2)).sum::<f64>().sqrt();
    assert!(dist(&mean, &fp.x_star) < 0.5 * dist(&eq.x, &fp.x_star));
}

/// Momentum, generator-like angle without damping, and damped angle.
fn degenerate_quadratic() -> QuadraticModel {
    let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 0.0, 2.0, -0.8, 0.0, -0.8, 1.5]);
    let j = DMatrix::from_row_slice(3, 3, &[0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let s = DVector::from_row_slice(&[0.8, 0.0, 1.0]);
    QuadraticModel::new(a, j, s, vec![]).unwrap().with_momentum(vec![(0, 0.5)])
}

fn full_quadratic(rot: f64) -> QuadraticModel {
    let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 2.0, -0.5, 0.0, -0.5, 1.5]);
    let j = DMatrix::from_row_slice(3, 3, &[0.0, rot, 0.0, -rot, 0.0, rot, 0.0, -rot, 0.0]);
    let s = DVector::from_row_slice(&[1.0, 0.5, 1.0]);
    QuadraticModel::new(a, j, s, vec![]).unwrap()
}

#[test]
fn gibbs_marginals_of_quadratic_reduction() {
    let m = degenerate_quadratic();
    let c = SimConfig {
        record_stride: 10,
        ..cfg(0.2, 2e-3)
    };
    let rep = gibbs_check(&m, &DVector::zeros(3), &c, &[0, 1, 2], 10_000, 4_000_000).unwrap();
    for r in &rep {
        assert!(r.tv < 0.05, "slot {}: {}", r.slot, r.tv);
    }
}

#[test]
fn irreversible_coupling_preserves_marginals() {
    let c = SimConfig {
        record_stride: 10,
        ..cfg(0.2, 2e-3)
    };
    let on = gibbs_check(&full_quadratic(1.5), &DVector::zeros(3), &c, &[0, 1, 2], 10_000, 3_000_000).unwrap();
    let off = gibbs_check(&full_quadratic(0.0), &DVector::zeros(3), &c, &[0, 1, 2], 10_000, 3_000_000).unwrap();
    for (a, b) in on.iter().zip(&off) {
        assert_eq!(a.analytic, b.analytic);
        assert!(a.tv < 0.05 && b.tv < 0.05);
        let tv: f64 = 0.5 * a.empirical.iter().zip(&b.empirical).map(|(p, q)| (p - q).abs()).sum::<f64>();
        assert!(tv < 0.05);
    }
}

#[test]
fn kinetic_variance_scales_with_temperature() {
    let m = degenerate_quadratic();
    let v = |tau: f64| slot_moments(&m, &DVector::zeros(3), &cfg(tau, 2e-3), 0, 10_000, 2_000_000, 1).unwrap().1;
    let (v1, v2) = (v(0.1), v(0.2));
    assert!((v2 / v1 - 2.0).abs() < 0.2, "{v1} {v2}");
    assert!((v1 - 0.1 / 0.5).abs() < 0.1 * 0.2);
}

#[test]
fn ensemble_needs_ten_replicas() {
    let m = model(fixtures::slack_load_load());
    let err = equilibration_ensemble(&m, &m.flat_start(), &cfg(1e-3, 1e-6), 5).unwrap_err();
    assert!(matches!(err, GridError::Domain(_)));
}

#[test]
fn deterministic_failure_degenerates_exit_distribution() {
    // strong rotation carries the relaxation path across the boundary
    let a = DMatrix::identity(2, 2);
    let j = DMatrix::from_row_slice(2, 2, &[0.0, -10.0, 10.0, 0.0]);
    let b = LinearBoundary {
        normal: DVector::from_row_slice(&[0.0, 1.0]),
        level: 0.5,
    };
    let m = QuadraticModel::new(a, j, DVector::from_element(2, 1.0), vec![b]).unwrap();
    let start = DVector::from_row_slice(&[0.9, 0.0]);
    let rep = equilibration_ensemble(&m, &start, &cfg(1e-5, 1e-5), 100).unwrap();
    assert!(rep.batch.censored.is_empty());
    // a point mass at t0 scores the mean of |ln(-ln(1 - p))| whatever t0 is
    let point_mass = rep.quantiles.iter().map(|r| (-(1.0 - r.p).ln()).ln().abs()).sum::<f64>() / rep.quantiles.len() as f64;
    assert!(rep.delta_bar > 0.5, "{}", rep.delta_bar);
    assert!((rep.delta_bar - point_mass).abs() < 0.1, "{} vs {point_mass}", rep.delta_bar);
}

#[test]
fn degraded_network_exit_times_are_exponential() {
    // doubled limits keep the radial remainder inside its limits
    let p = build_params(&fixtures::slack_load_load(), Dynamics::default(), 2.0).unwrap();
    let m = GridModel::new(degrade(&p, &[2])).unwrap();
    let eq = solve_equilibrium(&m, None, &EquilibriumOptions::default()).unwrap();
    let dh = m
        .lines()
        .into_iter()
        .map(|l| solve_unconditional(&m, &eq, l, None, &NlpOptions::default()).unwrap().delta_h)
        .fold(f64::INFINITY, f64::min);
    let rep = equilibration_ensemble(&m, &eq.x, &cfg(dh / 4.0, 1e-6), 200).unwrap();
    assert!(rep.batch.censored.is_empty());
    assert!(rep.delta_bar < 0.5, "{}", rep.delta_bar);
}
