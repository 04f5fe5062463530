mod common;

use common::{model, rng};
use gridesc::case_model::{build_params, degrade, Dynamics};
use gridesc::energy::{EnergyModel, GridModel};
use gridesc::equilibrium::{repair_equilibrium, solve_equilibrium, EquilibriumOptions, RepairKind};
use gridesc::fixtures;
use nalgebra::DVector;
use rand::Rng;

/// Zooming grid search over the non-kinetic slots.
fn grid_minimum(m: &GridModel) -> DVector<f64> {
    let free: Vec<usize> = m.layout().theta_range().chain(m.layout().volt_range()).collect();
    let mut center = m.flat_start();
    let mut half = 0.5;
    let pts = 11usize;
    while half > 1e-7 {
        let mut best = (f64::INFINITY, center.clone());
        let total = pts.pow(free.len() as u32);
        for code in 0..total {
            let mut x = center.clone();
            let mut c = code;
            for &s in &free {
                let i = (c % pts) as f64;
                c /= pts;
                x[s] = center[s] - half + 2.0 * half * i / (pts - 1) as f64;
            }
            if m.in_domain(&x) {
                let h = m.energy(&x);
                if h < best.0 {
                    best = (h, x);
                }
            }
        }
        center = best.1;
        half /= 3.0;
    }
    center
}

#[test]
fn matches_grid_search() {
    for case in [fixtures::slack_gen_load(), fixtures::slack_load_load()] {
        let m = model(case);
        let eq = solve_equilibrium(&m, None, &EquilibriumOptions::default()).unwrap();
        let oracle = grid_minimum(&m);
        assert!((&eq.x - &oracle).amax() < 1e-4, "{} vs {}", eq.x, oracle);
        assert!(eq.energy <= m.energy(&oracle) + 1e-12);
        assert!(eq.psd && eq.residual < 1e-10);
        assert!(eq.repair_log.is_empty());
    }
}

#[test]
fn zero_injection_gives_flat_start() {
    let mut case = fixtures::slack_load_load();
    for b in &mut case.buses {
        b.pd = 0.0;
        b.qd = 0.0;
    }
    case.generators[0].pg = 0.0;
    let m = model(case);
    let eq = solve_equilibrium(&m, None, &EquilibriumOptions::default()).unwrap();
    assert_eq!(eq.x, m.flat_start());
    assert_eq!(eq.iterations, 0);
}

#[test]
fn power_flows_from_leading_to_lagging_angle() {
    let m = model(fixtures::single_line());
    let eq = solve_equilibrium(&m, None, &EquilibriumOptions::default()).unwrap();
    let lay = m.layout();
    let (t1, t2) = (lay.angle(&eq.x, 0), lay.angle(&eq.x, 1));
    let (v1, v2) = (lay.voltage(&eq.x, m.params(), 0), lay.voltage(&eq.x, m.params(), 1));
    assert!(t2 < t1);
    // sending-end flow b V1 V2 sin(t1 - t2) delivers the load exactly
    assert!((10.0 * v1 * v2 * (t1 - t2).sin() - 0.5).abs() < 1e-9);
    // reactive balance at the load: b V2 (V1 cos - V2) = Qd
    assert!((10.0 * v2 * (v1 * (t1 - t2).cos() - v2) - 0.1).abs() < 1e-9);
}

#[test]
fn local_minimum_ball() {
    let m = model(fixtures::four_line_ring());
    let eq = solve_equilibrium(&m, None, &EquilibriumOptions::default()).unwrap();
    let mut r = rng(11);
    for _ in 0..500 {
        let dir = DVector::from_fn(m.dim(), |_, _| r.random_range(-1.0..1.0)).normalize();
        let x = &eq.x + r.random_range(0.0..0.1) * dir;
        assert!(m.energy(&x) >= eq.energy - 1e-14);
    }
}

#[test]
fn solve_is_deterministic() {
    let m = model(fixtures::four_line_ring());
    let a = solve_equilibrium(&m, None, &EquilibriumOptions::default()).unwrap();
    let b = solve_equilibrium(&m, None, &EquilibriumOptions::default()).unwrap();
    assert_eq!(a.x, b.x);
    assert_eq!(a.log_det_hess, b.log_det_hess);
}

#[test]
fn feasible_network_needs_no_repair() {
    let p = build_params(&fixtures::slack_gen_load(), Dynamics::default(), 1.0).unwrap();
    let r = repair_equilibrium(&p, None, &EquilibriumOptions::default()).unwrap();
    assert!(r.eq.repair_log.is_empty());
    assert_eq!(r.params.active, p.active);
}

#[test]
fn overloaded_bus_is_shed() {
    let p = build_params(&fixtures::overloaded_bus(), Dynamics::default(), 1.0).unwrap();
    let m = GridModel::new(p.clone()).unwrap();
    let opts = EquilibriumOptions::default();
    assert!(solve_equilibrium(&m, None, &opts).is_err());
    let r = repair_equilibrium(&p, None, &opts).unwrap();
    let log = &r.eq.repair_log;
    assert!(log.iter().any(|a| a.bus == 3 && a.action == RepairKind::LoadShed && (a.amount - 20.0).abs() < 1e-12));
    assert!(log.iter().all(|a| a.bus == 3), "{log:?}");
    let lay = r.model.layout();
    for &b in &lay.volt_buses {
        assert!(lay.voltage(&r.eq.x, &r.params, b) > 0.1);
    }
    assert!(!r.params.energized[2]);
    assert_eq!(r.params.active.len(), 1);
}

#[test]
fn islanded_bus_is_shed_and_rest_solved() {
    let p = build_params(&fixtures::slack_load_load(), Dynamics::default(), 1.0).unwrap();
    let cut = degrade(&p, &[1, 2]);
    assert_eq!(cut.islanded_buses(), vec![2]);
    let r = repair_equilibrium(&cut, None, &EquilibriumOptions::default()).unwrap();
    assert!(r.eq.repair_log.iter().any(|a| a.bus == 3 && a.action == RepairKind::LoadShed));
    assert_eq!(r.model.dim(), 3);

    // oracle: the surviving two-bus network solved on its own
    let mut two = fixtures::slack_load_load();
    two.buses.truncate(2);
    two.branches.truncate(1);
    two.generators[0].pg = 0.8;
    let m2 = model(two);
    let e2 = solve_equilibrium(&m2, None, &EquilibriumOptions::default()).unwrap();
    assert!((r.eq.energy - e2.energy).abs() < 1e-10);
    assert!((&r.eq.x - &e2.x).amax() < 1e-9);
}
