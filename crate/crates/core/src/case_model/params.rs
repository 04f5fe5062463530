use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{reachable, BusKind, GridCase};
use crate::error::{GridError, Result};

/// Per-unit dynamic constants applied uniformly to every matching bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    /// Generator (and slack) inertia.
    pub mg: f64,
    /// Generator (and slack) damping.
    pub dg: f64,
    /// Load frequency damping.
    pub dd: f64,
    /// Voltage singular-perturbation constant.
    pub deps: f64,
    /// Carried through from case tables; no equation uses it.
    pub gamma: f64,
}

impl Default for Dynamics {
    fn default() -> Self {
        Dynamics {
            mg: 0.0531,
            dg: 0.05,
            dd: 0.005,
            deps: 0.01,
            gamma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineParams {
    /// Branch id from the case.
    pub id: usize,
    /// Bus indices (positions in `NetworkParams::bus_ids`).
    pub from: usize,
    pub to: usize,
    pub b: f64,
    pub theta_max: f64,
}

/// Everything the energy model needs. Buses are addressed by position.
///
/// `b_matrix` uses `B_ik = +b` off the diagonal and `B_ii = -sum_k b_ik`,
/// the imaginary part of the lossless admittance matrix. Power then flows from
/// the leading to the lagging angle.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    pub bus_ids: Vec<usize>,
    pub kinds: Vec<BusKind>,
    pub slack: usize,
    pub b_matrix: DMatrix<f64>,
    /// Net active injection `Pg - Pd` per bus.
    pub p0: Vec<f64>,
    /// Net reactive consumption `Qd - Qg` per bus; zero off load buses.
    pub q0: Vec<f64>,
    /// Fixed magnitudes on slack and generator buses, NaN elsewhere.
    pub vfix: Vec<f64>,
    pub delta_s: f64,
    pub mg: Vec<f64>,
    pub dg: Vec<f64>,
    pub dd: Vec<f64>,
    pub deps: f64,
    pub gamma: f64,
    pub lines: Vec<LineParams>,
    /// Indices into `lines` that are in service.
    pub active: BTreeSet<usize>,
    /// Buses that take part in the dynamics. Islands cut off from the slack
    /// are switched off here after load shedding.
    pub energized: Vec<bool>,
    pub dynamics: Dynamics,
}

pub fn build_params(case: &GridCase, dynamics: Dynamics, limit_scale: f64) -> Result<NetworkParams> {
    if !(limit_scale > 0.0 && limit_scale.is_finite()) {
        return Err(GridError::Validation("limit_scale must be positive".into()));
    }
    for (name, v) in [("mg", dynamics.mg), ("dg", dynamics.dg), ("dd", dynamics.dd), ("deps", dynamics.deps)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(GridError::Validation(format!("{name} must be positive")));
        }
    }
    case.validate()?;
    let n = case.buses.len();
    let idx = |id: usize| case.bus_index(id).expect("validated");
    let kinds: Vec<BusKind> = case.buses.iter().map(|b| b.kind).collect();
    let slack = kinds.iter().position(|k| *k == BusKind::Slack).expect("validated");

    let mut pg = vec![0.0; n];
    let mut has_gen = vec![false; n];
    for g in &case.generators {
        let i = idx(g.bus);
        pg[i] += g.pg;
        has_gen[i] = true;
    }
    let mut p0 = vec![0.0; n];
    let mut q0 = vec![0.0; n];
    let mut vfix = vec![f64::NAN; n];
    let (mut mg, mut dg, mut dd) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for (i, bus) in case.buses.iter().enumerate() {
        match bus.kind {
            BusKind::Slack | BusKind::Generator => {
                if !has_gen[i] {
                    return Err(GridError::Validation(format!("generator bus {} has no dispatch", bus.id)));
                }
                vfix[i] = bus.vspec.expect("validated");
                mg[i] = dynamics.mg;
                dg[i] = dynamics.dg;
            }
            BusKind::Load => {
                q0[i] = bus.qd;
                dd[i] = dynamics.dd;
            }
        }
        p0[i] = pg[i] - bus.pd;
    }

    let lines: Vec<LineParams> = case
        .branches
        .iter()
        .map(|br| LineParams {
            id: br.id,
            from: idx(br.from_bus),
            to: idx(br.to_bus),
            b: br.b,
            theta_max: limit_scale * br.rate_a,
        })
        .collect();
    let active: BTreeSet<usize> = (0..lines.len()).collect();
    let b_matrix = susceptance_matrix(n, &lines, &active);

    Ok(NetworkParams {
        bus_ids: case.buses.iter().map(|b| b.id).collect(),
        kinds,
        slack,
        b_matrix,
        p0,
        q0,
        vfix,
        delta_s: case.slack_angle,
        mg,
        dg,
        dd,
        deps: dynamics.deps,
        gamma: dynamics.gamma,
        lines,
        active,
        energized: vec![true; n],
        dynamics,
    })
}

/// Laplacian-style assembly over the active lines.
pub fn susceptance_matrix(n: usize, lines: &[LineParams], active: &BTreeSet<usize>) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(n, n);
    for &l in active {
        let line = &lines[l];
        let (i, j) = (line.from, line.to);
        b[(i, j)] += line.b;
        b[(j, i)] += line.b;
        b[(i, i)] -= line.b;
        b[(j, j)] -= line.b;
    }
    b
}

/// Rebuild `b_matrix` from the current active set.
pub fn params_matrix(p: &NetworkParams) -> DMatrix<f64> {
    susceptance_matrix(p.n_bus(), &p.lines, &p.active)
}

/// Take the given line indices out of service. Already-failed lines are ignored.
pub fn degrade(params: &NetworkParams, failed: &[usize]) -> NetworkParams {
    let mut out = params.clone();
    for l in failed {
        out.active.remove(l);
    }
    out.b_matrix = susceptance_matrix(out.n_bus(), &out.lines, &out.active);
    out
}

impl NetworkParams {
    pub fn n_bus(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn line_index(&self, id: usize) -> Option<usize> {
        self.lines.iter().position(|l| l.id == id)
    }

    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.bus_ids.iter().position(|&b| b == id)
    }

    pub fn active_lines(&self) -> Vec<usize> {
        self.active.iter().copied().collect()
    }

    /// Energized buses with no active path to the slack.
    pub fn islanded_buses(&self) -> Vec<usize> {
        let edges: Vec<(usize, usize)> = self
            .active
            .iter()
            .map(|&l| (self.lines[l].from, self.lines[l].to))
            .collect();
        let reach = reachable(self.n_bus(), &edges, self.slack);
        (0..self.n_bus()).filter(|&i| self.energized[i] && !reach[i]).collect()
    }

    /// Scale every line limit by `factor`.
    pub fn scale_limits(&mut self, factor: f64) {
        for l in &mut self.lines {
            l.theta_max *= factor;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use proptest::prelude::*;

    fn hand_laplacian(edges: &[(usize, usize, f64)], n: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        for &(i, j, b) in edges {
            m[(i, j)] = m[(i, j)] + b;
            m[(j, i)] = m[(j, i)] + b;
        }
        for i in 0..n {
            let s: f64 = (0..n).filter(|&j| j != i).map(|j| m[(i, j)]).sum();
            m[(i, i)] = -s;
        }
        m
    }

    #[test]
    fn triangle_matrix_matches_hand_laplacian() {
        let p = build_params(&fixtures::slack_gen_load(), Dynamics::default(), 1.0).unwrap();
        let expected = hand_laplacian(&[(0, 1, 10.0), (0, 2, 10.0), (1, 2, 10.0)], 3);
        assert_eq!(p.b_matrix, expected);
        for i in 0..3 {
            assert_eq!(p.b_matrix[(i, i)].abs(), 20.0);
        }
    }

    #[test]
    fn default_constants_land_on_matching_buses() {
        let p = build_params(&fixtures::slack_gen_load(), Dynamics::default(), 1.2).unwrap();
        assert_eq!(p.mg[0], 0.0531);
        assert_eq!(p.mg[1], 0.0531);
        assert_eq!(p.dg[1], 0.05);
        assert_eq!(p.dd[2], 0.005);
        assert_eq!(p.deps, 0.01);
        assert_eq!(p.gamma, 1.0);
        let case = fixtures::slack_gen_load();
        assert!((p.lines[0].theta_max - 1.2 * case.branches[0].rate_a).abs() < 1e-15);
        // injection and consumption sign conventions
        assert!((p.p0[1] - (case.generators[1].pg - case.buses[1].pd)).abs() < 1e-15);
        assert_eq!(p.q0[2], case.buses[2].qd);
    }

    #[test]
    fn identity_scale_keeps_rating() {
        let mut case = fixtures::slack_gen_load();
        case.branches[0].rate_a = 2.0;
        let p = build_params(&case, Dynamics::default(), 1.0).unwrap();
        assert_eq!(p.lines[0].theta_max, 2.0);
    }

    #[test]
    fn missing_dispatch_is_rejected() {
        let mut case = fixtures::slack_gen_load();
        case.generators.retain(|g| g.bus != 2);
        assert!(build_params(&case, Dynamics::default(), 1.0).is_err());
    }

    #[test]
    fn degrade_removes_rank_one_term() {
        let p = build_params(&fixtures::slack_gen_load(), Dynamics::default(), 1.0).unwrap();
        assert_eq!(degrade(&p, &[]).b_matrix, p.b_matrix);
        let q = degrade(&p, &[0]);
        assert_eq!(q.b_matrix[(0, 1)], 0.0);
        assert_eq!(q.b_matrix[(1, 0)], 0.0);
        assert_eq!(q.b_matrix[(0, 0)], p.b_matrix[(0, 0)] + 10.0);
        assert_eq!(q.b_matrix[(1, 1)], p.b_matrix[(1, 1)] + 10.0);
        assert_eq!(q.b_matrix[(2, 2)], p.b_matrix[(2, 2)]);
        assert_eq!(q.b_matrix, hand_laplacian(&[(0, 2, 10.0), (1, 2, 10.0)], 3));
        // idempotent
        assert_eq!(degrade(&q, &[0]).b_matrix, q.b_matrix);
    }

    #[test]
    fn cut_line_islands_a_bus() {
        let p = build_params(&fixtures::single_line(), Dynamics::default(), 1.0).unwrap();
        assert!(p.islanded_buses().is_empty());
        assert_eq!(degrade(&p, &[0]).islanded_buses(), vec![1]);
        let t = build_params(&fixtures::slack_load_load(), Dynamics::default(), 1.0).unwrap();
        assert!(degrade(&t, &[0]).islanded_buses().is_empty());
        assert_eq!(degrade(&t, &[0, 2]).islanded_buses(), vec![1]);
    }

    proptest! {
        #[test]
        fn laplacian_rows_sum_to_zero(mask in proptest::collection::vec(any::<bool>(), 4)) {
            let p = build_params(&fixtures::four_line_ring(), Dynamics::default(), 1.0).unwrap();
            let failed: Vec<usize> = (0..4).filter(|&i| mask[i]).collect();
            let q = degrade(&p, &failed);
            for i in 0..q.n_bus() {
                let s: f64 = q.b_matrix.row(i).iter().sum();
                prop_assert!(s.abs() < 1e-12);
                for j in 0..q.n_bus() {
                    prop_assert_eq!(q.b_matrix[(i, j)], q.b_matrix[(j, i)]);
                }
            }
        }

        #[test]
        fn degrade_composes(a in proptest::collection::vec(0usize..4, 0..4), b in proptest::collection::vec(0usize..4, 0..4)) {
            let p = build_params(&fixtures::four_line_ring(), Dynamics::default(), 1.0).unwrap();
            let both: Vec<usize> = a.iter().chain(&b).copied().collect();
            let once = degrade(&p, &both);
            let twice = degrade(&degrade(&p, &a), &b);
            prop_assert_eq!(once.active, twice.active);
            prop_assert_eq!(once.b_matrix, twice.b_matrix);
        }
    }
}
