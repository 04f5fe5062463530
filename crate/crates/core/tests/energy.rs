mod common;

use common::{model, random_state, rng};
use gridesc::case_model::{degrade, BusKind};
use gridesc::energy::{numerical_gradient, EnergyModel, GridModel};
use gridesc::equilibrium::{solve_equilibrium, EquilibriumOptions};
use gridesc::fixtures;
use gridesc::linalg;
use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;

/// Energy written directly from the susceptance matrix over all buses.
fn energy_oracle(m: &GridModel, x: &DVector<f64>) -> f64 {
    let p = m.params();
    let lay = m.layout();
    let n = p.n_bus();
    let theta = |i: usize| lay.angle(x, i);
    let volt = |i: usize| lay.voltage(x, p, i);
    let mut h = 0.0;
    for (k, &b) in lay.omega_buses.iter().enumerate() {
        h += 0.5 * p.mg[b] * x[k].powi(2);
    }
    for i in 0..n {
        for k in 0..n {
            h -= 0.5 * p.b_matrix[(i, k)] * volt(i) * volt(k) * (theta(i) - theta(k)).cos();
        }
    }
    for i in 0..n {
        if i != p.slack {
            h -= p.p0[i] * theta(i);
        }
        if p.kinds[i] == BusKind::Load {
            h += p.q0[i] * volt(i).ln();
        }
    }
    h
}

fn fd_hessian(m: &GridModel, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let d = x.len();
    let mut out = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut xp = x.clone();
        xp[j] += h;
        let gp = m.gradient(&xp);
        xp[j] -= 2.0 * h;
        let gm = m.gradient(&xp);
        out.set_column(j, &((gp - gm) / (2.0 * h)));
    }
    out
}

#[test]
fn energy_matches_matrix_form() {
    for case in [fixtures::slack_gen_load(), fixtures::slack_load_load(), fixtures::four_line_ring()] {
        let m = model(case);
        let mut r = rng(1);
        for _ in 0..20 {
            let x = random_state(&m, &mut r);
            let h = m.eval_h(&x).unwrap();
            assert!((h - energy_oracle(&m, &x)).abs() < 1e-12 * (1.0 + h.abs()));
        }
    }
}

#[test]
fn kinetic_term_vanishes_at_rest() {
    let m = model(fixtures::slack_gen_load());
    let mut x = random_state(&m, &mut rng(2));
    let h = m.energy(&x);
    let kinetic: f64 = m.layout().omega_range().map(|s| 0.5 * 0.0531 * x[s] * x[s]).sum();
    for s in m.layout().omega_range() {
        x[s] = 0.0;
    }
    let h0 = m.energy(&x);
    assert!((h - h0 - kinetic).abs() < 1e-14);
    assert_eq!(m.gradient(&x).rows(0, 2).amax(), 0.0);
}

#[test]
fn gradient_and_hessian_match_differences() {
    let m = model(fixtures::slack_gen_load());
    let mut r = rng(3);
    for _ in 0..50 {
        let x = random_state(&m, &mut r);
        let g = m.grad_h(&x).unwrap();
        let fd = numerical_gradient(&m, &x, 1e-6);
        assert!((&g - &fd).norm() / g.norm().max(1e-12) < 1e-6);
        let hs = m.hess_h(&x).unwrap();
        assert!((&hs - &hs.transpose()).amax() == 0.0);
        assert!((&hs - fd_hessian(&m, &x, 1e-6)).amax() < 1e-5);
    }
}

#[test]
fn frequency_block_is_inertia() {
    let m = model(fixtures::slack_gen_load());
    let mut x = m.flat_start();
    x[1] = 1.0;
    let g = m.gradient(&x);
    assert_eq!(g[1], 0.0531);
    let h = m.hessian(&x);
    for s in m.layout().omega_range() {
        assert_eq!(h[(s, s)], 0.0531);
    }
}

#[test]
fn dimension_is_two_n_minus_one() {
    for case in [
        fixtures::slack_gen_load(),
        fixtures::slack_load_load(),
        fixtures::four_line_ring(),
        fixtures::single_line(),
        fixtures::symmetric_star(),
    ] {
        let n = case.buses.len();
        assert_eq!(model(case).dim(), 2 * n - 1);
    }
}

#[test]
fn line_energy_special_values_and_phasor_oracle() {
    let m = model(fixtures::slack_load_load());
    let mut x = m.flat_start();
    for &l in &m.lines() {
        assert_eq!(m.line_value(&x, l), 0.0);
    }
    // single term: b = 1, V_i = 1, V_j = 0
    let mut case = fixtures::single_line();
    case.branches[0].b = 1.0;
    let one = model(case);
    let mut y = one.flat_start();
    y[one.layout().volt_range().start] = 0.0;
    y[one.layout().theta_range().start] = 0.7;
    assert!((one.line_value(&y, 0) - 1.0).abs() < 1e-15);

    let mut r = rng(4);
    for _ in 0..50 {
        x = random_state(&m, &mut r);
        for &l in &m.lines() {
            let line = &m.params().lines[l];
            let v = |bus: usize| {
                Complex::from_polar(m.layout().voltage(&x, m.params(), bus), m.layout().angle(&x, bus))
            };
            let i = (v(line.from) - v(line.to)) * line.b;
            let le = m.line(&x, l).unwrap();
            assert!(le.value >= 0.0);
            assert!((le.value - i.norm_sqr()).abs() < 1e-12 * (1.0 + le.value));
        }
    }
}

#[test]
fn line_derivatives_match_differences() {
    let m = model(fixtures::slack_gen_load());
    let mut r = rng(5);
    for _ in 0..20 {
        let x = random_state(&m, &mut r);
        for &l in &m.lines() {
            let le = m.line_energy(&x, l);
            let h = 1e-6;
            for j in 0..x.len() {
                let mut xp = x.clone();
                xp[j] += h;
                let ep = m.line_energy(&xp, l);
                xp[j] -= 2.0 * h;
                let em = m.line_energy(&xp, l);
                assert!((le.gradient[j] - (ep.value - em.value) / (2.0 * h)).abs() < 1e-6);
                let col = (&ep.gradient - &em.gradient) / (2.0 * h);
                assert!((le.hessian.column(j) - col).amax() < 1e-5);
            }
        }
    }
}

#[test]
fn inactive_line_is_an_error() {
    let m = GridModel::new(degrade(model(fixtures::slack_load_load()).params(), &[2])).unwrap();
    assert!(m.line(&m.flat_start(), 2).is_err());
    let mut x = m.flat_start();
    x[m.layout().volt_range().start] = -1.0;
    assert!(m.eval_h(&x).is_err());
}

#[test]
fn structure_blocks() {
    let m = model(fixtures::slack_gen_load());
    let st = m.structure();
    assert_eq!((&st.j + st.j.transpose()).amax(), 0.0);
    let lay = m.layout();
    let p = m.params();
    for &b in &lay.theta_buses {
        let s = lay.theta_slot(b).unwrap();
        match p.kinds[b] {
            BusKind::Generator => assert_eq!(st.s_diag[s], 0.0),
            _ => assert_eq!(st.s_diag[s], 1.0 / p.dd[b]),
        }
    }
    for s in lay.volt_range() {
        assert_eq!(st.s_diag[s], 1.0 / p.deps);
    }
    // K = S - J: non-negative symmetric part, positive on generic vectors, invertible
    assert!(linalg::min_sym_eigenvalue(&st.k) >= -1e-12);
    let mut r = rng(6);
    for _ in 0..100 {
        let v = DVector::from_fn(m.dim(), |_, _| r.random_range(-1.0..1.0));
        assert!(v.dot(&(&st.k * &v)) > 0.0);
    }
    assert!(linalg::log_abs_det(&st.k).1 != 0.0);
}

#[test]
fn transverse_identities_and_hamilton_jacobi() {
    for case in [fixtures::slack_gen_load(), fixtures::slack_load_load()] {
        let m = model(case);
        let eq = solve_equilibrium(&m, None, &EquilibriumOptions::default()).unwrap();
        let st = m.structure();
        let mut r = rng(7);
        for _ in 0..100 {
            let x = random_state(&m, &mut r);
            let g = m.gradient(&x);
            assert!(g.dot(&(&st.j * &g)).abs() < 1e-10 * g.norm_squared());
            assert!((&st.j * m.hessian(&x)).trace().abs() < 1e-8);
            // V = H - H(x̄) has the same gradient as H
            let sg = st.s() * &g;
            let hj = g.dot(&sg) + (st.drift() * &g).dot(&g);
            assert!(hj.abs() < 1e-8 * (1.0 + g.norm_squared()));
        }
        assert!(m.energy(&eq.x) - eq.energy == 0.0);
    }
}

#[test]
fn equilibrium_hessian_is_positive_definite() {
    let m = model(fixtures::slack_gen_load());
    let eq = solve_equilibrium(&m, None, &EquilibriumOptions::default()).unwrap();
    assert!(m.gradient(&eq.x).amax() < 1e-10);
    assert!(linalg::sym_eigenvalues(&m.hessian(&eq.x)).iter().all(|&e| e > 0.0));
}
