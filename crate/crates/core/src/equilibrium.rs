//! Operating point `x̄`: the stable critical point of `H` on the principal
//! angle branch, plus the line-removal and load-shedding repair used when a
//! degraded network has no acceptable solution.

use std::collections::BTreeSet;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::case_model::{BusKind, NetworkParams};
use crate::energy::{EnergyModel, GridModel, StateLayout};
use crate::error::{GridError, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy)]
pub struct EquilibriumOptions {
    /// Stop when `|grad H|_inf` drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Hessian eigenvalues above `-psd_tol` count as non-negative.
    pub psd_tol: f64,
    /// Load voltages must exceed this after repair.
    pub min_voltage: f64,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        EquilibriumOptions {
            tol: 1e-10,
            max_iter: 200,
            psd_tol: 1e-8,
            min_voltage: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairKind {
    LinesRemoved,
    LoadShed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairAction {
    /// Case bus id.
    pub bus: usize,
    pub action: RepairKind,
    /// Number of lines removed, or active demand shed in p.u.
    pub amount: f64,
}

#[derive(Debug, Clone)]
pub struct EquilibriumPoint {
    pub x: DVector<f64>,
    pub energy: f64,
    pub log_det_hess: f64,
    pub det_sign: f64,
    pub min_eigenvalue: f64,
    pub psd: bool,
    pub iterations: usize,
    pub residual: f64,
    pub repair_log: Vec<RepairAction>,
}

/// Damped Newton on `grad H = 0` from `init` (default: flat start).
pub fn solve_equilibrium<M: EnergyModel + ?Sized>(
    model: &M,
    init: Option<&DVector<f64>>,
    opts: &EquilibriumOptions,
) -> Result<EquilibriumPoint> {
    let mut x = init.cloned().unwrap_or_else(|| model.flat_start());
    if !model.in_domain(&x) {
        return Err(GridError::Domain("initial state outside the domain".into()));
    }
    let mut g = model.gradient(&x);
    let mut best = (g.norm_squared(), x.clone());
    let mut iterations = 0;
    while g.amax() >= opts.tol {
        if iterations == opts.max_iter {
            return Err(diverged(iterations, best));
        }
        iterations += 1;
        let h = model.hessian(&x);
        let Some(dx) = newton_direction(&h, &g) else {
            return Err(diverged(iterations, best));
        };
        let f0 = g.norm_squared();
        let mut alpha = model.max_step(&x, &dx).min(1.0);
        let mut accepted = None;
        for _ in 0..60 {
            let xt = &x + alpha * &dx;
            if model.in_domain(&xt) {
                let gt = model.gradient(&xt);
                if gt.norm_squared() <= (1.0 - 1e-4 * alpha) * f0 {
                    accepted = Some((xt, gt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((xt, gt)) = accepted else {
            return Err(diverged(iterations, best));
        };
        x = xt;
        g = gt;
        if g.norm_squared() < best.0 {
            best = (g.norm_squared(), x.clone());
        }
    }
    model.wrap_angles(&mut x);
    finish(model, x, iterations, opts)
}

fn diverged(iterations: usize, best: (f64, DVector<f64>)) -> GridError {
    GridError::Diverged {
        iterations,
        residual: best.0.sqrt(),
        best: Box::new(best.1),
    }
}

fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let rhs = -g;
    if let Some(dx) = linalg::solve(h, &rhs) {
        return Some(dx);
    }
    let scale = 1.0 + h.amax();
    let mut lambda = 1e-10 * scale;
    let eye = DMatrix::identity(h.nrows(), h.ncols());
    for _ in 0..20 {
        if let Some(dx) = linalg::solve(&(h + lambda * &eye), &rhs) {
            return Some(dx);
        }
        lambda *= 10.0;
    }
    None
}

fn finish<M: EnergyModel + ?Sized>(
    model: &M,
    x: DVector<f64>,
    iterations: usize,
    opts: &EquilibriumOptions,
) -> Result<EquilibriumPoint> {
    let h = model.hessian(&x);
    let min_eigenvalue = linalg::min_sym_eigenvalue(&h);
    if min_eigenvalue < -opts.psd_tol {
        return Err(GridError::Saddle {
            min_eigenvalue,
            x: Box::new(x),
        });
    }
    let (log_det_hess, det_sign) = linalg::log_abs_det(&h);
    Ok(EquilibriumPoint {
        energy: model.energy(&x),
        residual: model.gradient(&x).amax(),
        x,
        log_det_hess,
        det_sign,
        min_eigenvalue,
        psd: true,
        iterations,
        repair_log: Vec::new(),
    })
}

/// A repaired network together with its model and operating point.
#[derive(Debug, Clone)]
pub struct Repaired {
    pub params: NetworkParams,
    pub model: GridModel,
    pub eq: EquilibriumPoint,
}

/// De-energize every bus cut off from the slack, shedding its demand and
/// taking its lines out of service.
pub fn shed_islands(params: &NetworkParams) -> (NetworkParams, Vec<RepairAction>) {
    let island = params.islanded_buses();
    let mut p = params.clone();
    let mut log = Vec::new();
    for &b in &island {
        isolate_bus(&mut p, b, &mut log);
    }
    (p, log)
}

fn isolate_bus(p: &mut NetworkParams, b: usize, log: &mut Vec<RepairAction>) {
    let touching: Vec<usize> = p
        .active
        .iter()
        .copied()
        .filter(|&l| p.lines[l].from == b || p.lines[l].to == b)
        .collect();
    if !touching.is_empty() {
        for l in &touching {
            p.active.remove(l);
        }
        log.push(RepairAction {
            bus: p.bus_ids[b],
            action: RepairKind::LinesRemoved,
            amount: touching.len() as f64,
        });
    }
    if p.kinds[b] == BusKind::Load {
        log.push(RepairAction {
            bus: p.bus_ids[b],
            action: RepairKind::LoadShed,
            amount: -p.p0[b],
        });
    }
    p.p0[b] = 0.0;
    p.q0[b] = 0.0;
    p.energized[b] = false;
    p.b_matrix = crate::case_model::params_matrix(p);
}

/// Solve the operating point, repairing the network if needed.
///
/// A warm start `init` (given with the layout it was computed on) is tried
/// first, then the flat start. If a load voltage sits at or below
/// `min_voltage`, the weakest load bus loses all its lines and its demand;
/// if no solve converges, the load bus with the largest power mismatch at the
/// best iterate does. The solve is then repeated. Islands are shed up front.
pub fn repair_equilibrium(
    params: &NetworkParams,
    init: Option<(&StateLayout, &DVector<f64>)>,
    opts: &EquilibriumOptions,
) -> Result<Repaired> {
    let (mut p, mut log) = shed_islands(params);
    let mut visited = BTreeSet::new();
    loop {
        let model = GridModel::new(p.clone())?;
        let mut candidates = Vec::new();
        if let Some((lay, x)) = init {
            candidates.push(Some(model.layout().transfer(lay, x)));
        }
        candidates.push(None);

        // offending bus: weakest voltage of a solved point, else largest mismatch
        let mut offender: Option<(usize, f64)> = None;
        for start in &candidates {
            let start = start.as_ref().filter(|s| model.in_domain(s));
            match solve_equilibrium(&model, start, opts) {
                Ok(mut eq) => {
                    let low = weakest_load(&model, &eq.x);
                    if low.is_none_or(|(_, v)| v > opts.min_voltage) {
                        eq.repair_log = log;
                        return Ok(Repaired { params: p, model, eq });
                    }
                    offender = offender.or(low);
                }
                Err(GridError::Diverged { best: x, .. }) | Err(GridError::Saddle { x, .. }) => {
                    if offender.is_none() {
                        offender = worst_mismatch(&model, &x);
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let Some((bus, v)) = offender else {
            return Err(GridError::Unrecoverable("no load bus left to shed".into()));
        };
        if !visited.insert(bus) {
            return Err(GridError::Unrecoverable(format!("bus {} revisited", p.bus_ids[bus])));
        }
        debug!("shedding bus {} ({v:.3})", p.bus_ids[bus]);
        isolate_bus(&mut p, bus, &mut log);
        let (q, more) = shed_islands(&p);
        p = q;
        log.extend(more);
    }
}

/// Energized load bus with the lowest voltage in `x`.
fn weakest_load(model: &GridModel, x: &DVector<f64>) -> Option<(usize, f64)> {
    let lay = model.layout();
    lay.volt_buses
        .iter()
        .map(|&b| (b, x[lay.volt_slot(b).unwrap()]))
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

/// Energized load bus with the largest power mismatch `|grad H|` over its slots.
fn worst_mismatch(model: &GridModel, x: &DVector<f64>) -> Option<(usize, f64)> {
    let lay = model.layout();
    let g = model.gradient(x);
    lay.volt_buses
        .iter()
        .map(|&b| {
            let m = g[lay.theta_slot(b).unwrap()].abs() + g[lay.volt_slot(b).unwrap()].abs();
            (b, m)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
}
