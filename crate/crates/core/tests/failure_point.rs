mod common;

use common::model;
use gridesc::case_model::{build_params, degrade, Dynamics};
use gridesc::energy::{EnergyModel, GridModel, QuadraticModel};
use gridesc::equilibrium::{solve_equilibrium, EquilibriumOptions, EquilibriumPoint};
use gridesc::failure_point::{
    multistart, solve_conditional, solve_unconditional, tripped_lines, NlpOptions, SolveStatus,
};
use gridesc::fixtures;
use gridesc::GridError;

fn eq_of<M: EnergyModel>(m: &M) -> EquilibriumPoint {
    solve_equilibrium(m, None, &EquilibriumOptions::default()).unwrap()
}

/// Minimum of H on the surface of the load-load line of `slack_load_load`,
/// searched over (theta2, theta3, V2) with V3 taken from the quadratic
/// `Theta = b^2 (V2^2 + V3^2 - 2 V2 V3 cos)`.
fn surface_grid_minimum(m: &GridModel, line: usize) -> f64 {
    let lay = m.layout();
    let lp = &m.params().lines[line];
    let (t2, t3) = (lay.theta_slot(lp.from).unwrap(), lay.theta_slot(lp.to).unwrap());
    let (v2, v3) = (lay.volt_slot(lp.from).unwrap(), lay.volt_slot(lp.to).unwrap());
    let target = lp.theta_max / (lp.b * lp.b);
    let eval = |a: f64, c: f64, v: f64| -> f64 {
        let cos = (a - c).cos();
        let disc = v * v * cos * cos - v * v + target;
        if disc < 0.0 {
            return f64::INFINITY;
        }
        let mut best = f64::INFINITY;
        for root in [v * cos + disc.sqrt(), v * cos - disc.sqrt()] {
            if root > 0.0 {
                let mut x = m.flat_start();
                x[t2] = a;
                x[t3] = c;
                x[v2] = v;
                x[v3] = root;
                best = best.min(m.energy(&x));
            }
        }
        best
    };
    let mut best = (f64::INFINITY, [0.0, 0.0, 1.0]);
    // coarse global pass, then zoom
    let n = 41;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let p = [
                    -1.0 + 2.0 * i as f64 / (n - 1) as f64,
                    -1.0 + 2.0 * j as f64 / (n - 1) as f64,
                    0.5 + 0.8 * k as f64 / (n - 1) as f64,
                ];
                let h = eval(p[0], p[1], p[2]);
                if h < best.0 {
                    best = (h, p);
                }
            }
        }
    }
    let mut half = 0.05;
    while half > 1e-8 {
        let c = best.1;
        for i in 0..11 {
            for j in 0..11 {
                for k in 0..11 {
                    let p = [
                        c[0] - half + 0.2 * half * i as f64,
                        c[1] - half + 0.2 * half * j as f64,
                        c[2] - half + 0.2 * half * k as f64,
                    ];
                    let h = eval(p[0], p[1], p[2]);
                    if h < best.0 {
                        best = (h, p);
                    }
                }
            }
        }
        half /= 3.0;
    }
    best.0
}

#[test]
fn matches_constrained_grid_search() {
    let m = model(fixtures::slack_load_load());
    let eq = eq_of(&m);
    let fp = solve_unconditional(&m, &eq, 2, None, &NlpOptions::default()).unwrap();
    assert_eq!(fp.status, SolveStatus::Converged);
    let oracle = surface_grid_minimum(&m, 2) - eq.energy;
    assert!((fp.delta_h - oracle).abs() < 1e-3, "{} vs {oracle}", fp.delta_h);
    assert!(fp.delta_h <= oracle + 1e-9);
}

#[test]
fn quadratic_surface_minimum_is_exact() {
    let m = QuadraticModel::toy_2d([[2.0, 0.5], [0.5, 1.0]], 0.7, [1.0, 2.0], 1.5);
    let eq = eq_of(&m);
    let fp = solve_unconditional(&m, &eq, 0, None, &NlpOptions::default()).unwrap();
    let n = m.boundaries[0].normal.clone();
    let ainv_n = m.a.clone().try_inverse().unwrap() * &n;
    let q = n.dot(&ainv_n);
    assert!((fp.delta_h - 1.5 * 1.5 / (2.0 * q)).abs() < 1e-12);
    assert!((fp.k - 1.5 / q).abs() < 1e-12);
    assert!((&fp.x_star - ainv_n * (1.5 / q)).amax() < 1e-12);
}

#[test]
fn converged_points_are_stationary_with_positive_multiplier() {
    let opts = NlpOptions::default();
    for case in [
        fixtures::slack_gen_load(),
        fixtures::slack_load_load(),
        fixtures::four_line_ring(),
        fixtures::nested_parallel(),
        fixtures::symmetric_star(),
        fixtures::single_line(),
    ] {
        let m = model(case);
        let eq = eq_of(&m);
        for l in m.lines() {
            let fp = solve_unconditional(&m, &eq, l, None, &opts).unwrap();
            assert!(matches!(fp.status, SolveStatus::Converged | SolveStatus::Restarted));
            let g = m.gradient(&fp.x_star);
            let le = m.line_energy(&fp.x_star, l);
            assert!((&g - fp.k * &le.gradient).amax() < 1e-6 * (1.0 + g.amax()));
            assert!((le.value - m.theta_max(l)).abs() < 1e-8);
            assert!(fp.k > 0.0);
            assert!(fp.delta_h >= -1e-12);
            assert!(fp.tripped.contains(&l));
            for k in m.lines() {
                let over = m.line_value(&fp.x_star, k) >= m.theta_max(k) - 1e-9;
                assert_eq!(over, fp.tripped.contains(&k));
            }
            assert_eq!(fp.tripped, tripped_lines(&m, &fp.x_star, 1e-9));
        }
    }
}

#[test]
fn boundary_through_equilibrium() {
    let mut p = build_params(&fixtures::slack_load_load(), Dynamics::default(), 1.0).unwrap();
    let eq = eq_of(&GridModel::new(p.clone()).unwrap());
    let m0 = GridModel::new(p.clone()).unwrap();
    p.lines[2].theta_max = m0.line_value(&eq.x, 2);
    let m = GridModel::new(p).unwrap();
    let fp = solve_unconditional(&m, &eq, 2, None, &NlpOptions::default()).unwrap();
    assert!(fp.delta_h.abs() < 1e-14);
    assert!((&fp.x_star - &eq.x).amax() < 1e-9);
    assert!(fp.k.is_finite());
}

#[test]
fn symmetric_lines_share_energy() {
    let m = model(fixtures::symmetric_star());
    let eq = eq_of(&m);
    let dh: Vec<f64> = m
        .lines()
        .into_iter()
        .map(|l| solve_unconditional(&m, &eq, l, None, &NlpOptions::default()).unwrap().delta_h)
        .collect();
    assert!(dh.iter().all(|v| (v - dh[0]).abs() < 1e-10));
}

#[test]
fn nested_line_is_conditionally_infeasible() {
    let m = model(fixtures::nested_parallel());
    let eq = eq_of(&m);
    let opts = NlpOptions::default();
    let un = solve_unconditional(&m, &eq, 2, None, &opts).unwrap();
    assert_eq!(un.tripped, vec![2, 3]);
    let cond = solve_conditional(&m, &eq, 2, &opts).unwrap();
    assert_eq!(cond.status, SolveStatus::Infeasible);
    assert!(!cond.is_solved());
}

#[test]
fn conditional_equals_unconditional_when_inactive() {
    let m = model(fixtures::slack_gen_load());
    let eq = eq_of(&m);
    let opts = NlpOptions::default();
    let un = solve_unconditional(&m, &eq, 1, None, &opts).unwrap();
    assert_eq!(un.tripped, vec![1]);
    let cond = solve_conditional(&m, &eq, 1, &opts).unwrap();
    assert_eq!(cond.status, SolveStatus::Converged);
    assert!((cond.delta_h - un.delta_h).abs() < 1e-8);
    assert!((&cond.x_star - &un.x_star).amax() < 1e-6);
}

#[test]
fn conditional_respects_other_limits() {
    let m = model(fixtures::slack_load_load());
    let eq = eq_of(&m);
    let opts = NlpOptions::default();
    let un = solve_unconditional(&m, &eq, 2, None, &opts).unwrap();
    assert!(un.tripped.len() > 1);
    let cond = solve_conditional(&m, &eq, 2, &opts).unwrap();
    assert_eq!(cond.status, SolveStatus::Converged);
    assert_eq!(cond.tripped, vec![2]);
    assert!(cond.delta_h >= un.delta_h - 1e-12);
    for k in [0, 1] {
        assert!(m.line_value(&cond.x_star, k) <= m.theta_max(k) - opts.cond_eps + 1e-8);
    }
}

#[test]
fn multistart_finds_unique_minimizer() {
    let m = model(fixtures::single_line());
    let eq = eq_of(&m);
    let opts = NlpOptions::default();
    let ms = multistart(&m, &eq, 0, 30, 0.1, 7, &opts).unwrap();
    assert_eq!(ms.solutions.len(), 1);
    assert!(!ms.continuum);
    assert_eq!(ms.hits.iter().sum::<usize>() + ms.n_failed, 31);
    let again = multistart(&m, &eq, 0, 30, 0.1, 7, &opts).unwrap();
    assert_eq!(again.solutions[0].x_star, ms.solutions[0].x_star);
}

#[test]
fn equilibrium_start_is_near_lowest() {
    let m = model(fixtures::four_line_ring());
    let eq = eq_of(&m);
    let opts = NlpOptions::default();
    for l in m.lines() {
        let fp = solve_unconditional(&m, &eq, l, None, &opts).unwrap();
        let ms = multistart(&m, &eq, l, 20, 0.1, 3, &opts).unwrap();
        assert!(fp.delta_h >= ms.solutions[0].delta_h - 1e-9);
        let sorted = ms.solutions.windows(2).all(|w| w[0].delta_h <= w[1].delta_h);
        assert!(sorted);
    }
}

#[test]
fn inactive_line_is_rejected() {
    let p = build_params(&fixtures::four_line_ring(), Dynamics::default(), 1.0).unwrap();
    let m = GridModel::new(degrade(&p, &[1])).unwrap();
    let eq = eq_of(&m);
    let err = solve_unconditional(&m, &eq, 1, None, &NlpOptions::default()).unwrap_err();
    assert!(matches!(err, GridError::InactiveLine(_)));
}
