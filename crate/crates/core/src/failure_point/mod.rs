//! Failure points: the minimum of `H` on a line's failure surface, with and
//! without the requirement that every other line stays inside its limit.

mod sqp;

use std::collections::BTreeMap;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::EnergyModel;
use crate::equilibrium::EquilibriumPoint;
use crate::error::{GridError, Result};
use sqp::{restore, sqp, EnergyObjective, Objective};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlpOptions {
    pub constraint_tol: f64,
    /// Stationarity tolerance, relative to `1 + |grad H|_inf`.
    pub opt_tol: f64,
    pub max_iter: usize,
    /// `Theta_k >= Theta_k^max - trip_tol` counts as tripped.
    pub trip_tol: f64,
    /// Interior margin for the other lines in the conditional problem.
    pub cond_eps: f64,
}

impl Default for NlpOptions {
    fn default() -> Self {
        NlpOptions {
            constraint_tol: 1e-8,
            opt_tol: 1e-6,
            max_iter: 100,
            trip_tol: 1e-9,
            cond_eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    Restarted,
    FallbackFeasibleOnly,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    Unconditional,
    Conditional,
}

#[derive(Debug, Clone)]
pub struct FailurePoint {
    pub line: usize,
    pub x_star: DVector<f64>,
    /// Multiplier in `grad H = k grad Theta_l`.
    pub k: f64,
    pub energy: f64,
    pub delta_h: f64,
    /// Lines at or beyond their limit at `x_star`, target line included.
    pub tripped: Vec<usize>,
    pub status: SolveStatus,
    pub mode: SolveMode,
    pub iterations: usize,
    pub stationarity: f64,
    pub violation: f64,
}

impl FailurePoint {
    /// Converged or restarted, i.e. a genuine KKT point.
    pub fn is_solved(&self) -> bool {
        matches!(self.status, SolveStatus::Converged | SolveStatus::Restarted)
    }
}

pub fn tripped_lines<M: EnergyModel + ?Sized>(model: &M, x: &DVector<f64>, tol: f64) -> Vec<usize> {
    model
        .lines()
        .into_iter()
        .filter(|&k| model.line_value(x, k) >= model.theta_max(k) - tol)
        .collect()
}

fn check_line<M: EnergyModel + ?Sized>(model: &M, line: usize) -> Result<()> {
    if model.lines().contains(&line) {
        Ok(())
    } else {
        Err(GridError::InactiveLine(line))
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble<M: EnergyModel + ?Sized>(
    model: &M,
    eq: &EquilibriumPoint,
    line: usize,
    mut x: DVector<f64>,
    k: f64,
    status: SolveStatus,
    mode: SolveMode,
    iterations: usize,
    opts: &NlpOptions,
) -> FailurePoint {
    // angles shifted by 2 pi are the same physical point on the principal branch
    model.wrap_angles(&mut x);
    let energy = model.energy(&x);
    let mut tripped = tripped_lines(model, &x, opts.trip_tol);
    if !tripped.contains(&line) {
        tripped.push(line);
        tripped.sort_unstable();
    }
    let g = model.gradient(&x);
    let le = model.line_energy(&x, line);
    FailurePoint {
        line,
        k,
        energy,
        delta_h: energy - eq.energy,
        tripped,
        status,
        mode,
        iterations,
        stationarity: (&g - k * &le.gradient).amax(),
        violation: (le.value - model.theta_max(line)).abs(),
        x_star: x,
    }
}

/// Point on the failure surface reached by a straight search from `from`.
///
/// Tries the gradient of `Theta_l` first and then each coordinate axis in
/// both directions, bracketing the crossing and bisecting it.
pub fn surface_point<M: EnergyModel + ?Sized>(model: &M, from: &DVector<f64>, line: usize) -> Option<DVector<f64>> {
    let tmax = model.theta_max(line);
    let side = |y: &DVector<f64>| model.line_value(y, line) >= tmax;
    let start_side = side(from);
    let grad = model.line_energy(from, line).gradient;
    let d = from.len();
    let mut dirs = Vec::new();
    if grad.norm() > 0.0 {
        let g = grad.normalize();
        dirs.push(if start_side { -g } else { g });
    }
    for i in 0..d {
        for sgn in [1.0, -1.0] {
            let mut e = DVector::zeros(d);
            e[i] = sgn;
            dirs.push(e);
        }
    }
    for dir in dirs {
        let mut lo = 0.0;
        let mut t = 1e-3;
        while t < 1e3 {
            let y = from + t * &dir;
            if !model.in_domain(&y) {
                break;
            }
            if side(&y) != start_side {
                let mut hi = t;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if side(&(from + mid * &dir)) == start_side {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let a = from + lo * &dir;
                let b = from + hi * &dir;
                let fa = (model.line_value(&a, line) - tmax).abs();
                let fb = (model.line_value(&b, line) - tmax).abs();
                return Some(if fa <= fb { a } else { b });
            }
            lo = t;
            t *= 2.0;
        }
    }
    None
}

/// Newton projection of `x` onto the surface `Theta_line = Theta_line^max`
/// along the constraint gradient.
pub fn project_to_surface<M: EnergyModel + ?Sized>(model: &M, line: usize, x: DVector<f64>) -> Option<DVector<f64>> {
    let tol = 1e-12 * (1.0 + model.theta_max(line).abs());
    restore(model, line, x, tol)
}

/// Minimize `H` on the failure surface of `line`, starting from `init` or `x̄`.
///
/// On failure the solve is restarted from a point on the surface found by a
/// straight search from `x̄`; if that also fails, that surface point is
/// returned with status `FallbackFeasibleOnly`.
pub fn solve_unconditional<M: EnergyModel + ?Sized>(
    model: &M,
    eq: &EquilibriumPoint,
    line: usize,
    init: Option<&DVector<f64>>,
    opts: &NlpOptions,
) -> Result<FailurePoint> {
    check_line(model, line)?;
    let obj = EnergyObjective(model);
    let x0 = init.cloned().unwrap_or_else(|| eq.x.clone());
    let out = sqp(model, &obj, line, x0, opts);
    if out.converged {
        return Ok(assemble(model, eq, line, out.x, out.k, SolveStatus::Converged, SolveMode::Unconditional, out.iterations, opts));
    }
    debug!("line {line}: direct solve failed (viol {:.2e}, stat {:.2e}); restarting", out.violation, out.stationarity);
    let Some(xf) = surface_point(model, &eq.x, line) else {
        return Err(GridError::Infeasible(model.line_label(line)));
    };
    let retry = sqp(model, &obj, line, xf.clone(), opts);
    let iterations = out.iterations + retry.iterations;
    if retry.converged {
        return Ok(assemble(model, eq, line, retry.x, retry.k, SolveStatus::Restarted, SolveMode::Unconditional, iterations, opts));
    }
    let g = model.gradient(&xf);
    let c = model.line_energy(&xf, line).gradient;
    let k = if c.norm_squared() > 0.0 { g.dot(&c) / c.norm_squared() } else { 0.0 };
    Ok(assemble(model, eq, line, xf, k, SolveStatus::FallbackFeasibleOnly, SolveMode::Unconditional, iterations, opts))
}

/// Powell-Hestenes-Rockafellar augmented objective for `c_k(x) <= 0`.
struct AugmentedObjective<'a, M: ?Sized> {
    model: &'a M,
    others: &'a [usize],
    margin: f64,
    mult: &'a [f64],
    rho: f64,
}

impl<M: EnergyModel + ?Sized> AugmentedObjective<'_, M> {
    fn constraint(&self, x: &DVector<f64>, i: usize) -> f64 {
        let k = self.others[i];
        self.model.line_value(x, k) - (self.model.theta_max(k) - self.margin)
    }
}

impl<M: EnergyModel + ?Sized> Objective for AugmentedObjective<'_, M> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        let mut v = self.model.energy(x);
        for i in 0..self.others.len() {
            let t = (self.mult[i] + self.rho * self.constraint(x, i)).max(0.0);
            v += (t * t - self.mult[i] * self.mult[i]) / (2.0 * self.rho);
        }
        v
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = self.model.gradient(x);
        for i in 0..self.others.len() {
            let t = self.mult[i] + self.rho * self.constraint(x, i);
            if t > 0.0 {
                g += t * self.model.line_energy(x, self.others[i]).gradient;
            }
        }
        g
    }

    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut h = self.model.hessian(x);
        for i in 0..self.others.len() {
            let t = self.mult[i] + self.rho * self.constraint(x, i);
            if t > 0.0 {
                let le = self.model.line_energy(x, self.others[i]);
                h += self.rho * &le.gradient * le.gradient.transpose() + t * &le.hessian;
            }
        }
        h
    }
}

/// Minimize `H` on the failure surface of `line` while every other line stays
/// at least `cond_eps` below its limit. An empty feasible set is reported as
/// status `Infeasible`, which marks the line as conditionally nested.
pub fn solve_conditional<M: EnergyModel + ?Sized>(
    model: &M,
    eq: &EquilibriumPoint,
    line: usize,
    opts: &NlpOptions,
) -> Result<FailurePoint> {
    check_line(model, line)?;
    let others: Vec<usize> = model.lines().into_iter().filter(|&k| k != line).collect();
    let mut x = match solve_unconditional(model, eq, line, None, opts) {
        Ok(fp) if fp.is_solved() => fp.x_star,
        _ => eq.x.clone(),
    };
    let mut mult = vec![0.0; others.len()];
    let mut rho = 10.0;
    let mut prev_viol = f64::INFINITY;
    let mut k = 0.0;
    let mut iterations = 0;
    for _ in 0..60 {
        let obj = AugmentedObjective {
            model,
            others: &others,
            margin: opts.cond_eps,
            mult: &mult,
            rho,
        };
        let mut out = sqp(model, &obj, line, x.clone(), opts);
        if !out.converged {
            if let Some(xf) = surface_point(model, &eq.x, line) {
                out = sqp(model, &obj, line, xf, opts);
            }
        }
        iterations += out.iterations;
        if !out.converged {
            return Err(GridError::Diverged {
                iterations,
                residual: out.stationarity.max(out.violation),
                best: Box::new(out.x),
            });
        }
        x = out.x;
        k = out.k;
        let cons: Vec<f64> = (0..others.len()).map(|i| obj.constraint(&x, i)).collect();
        let viol = cons.iter().fold(0.0f64, |m, &c| m.max(c));
        let compl = cons
            .iter()
            .zip(&mult)
            .fold(0.0f64, |m, (&c, &u)| m.max((-c).min(u).abs()));
        for (u, &c) in mult.iter_mut().zip(&cons) {
            *u = (*u + rho * c).max(0.0);
        }
        if viol <= opts.constraint_tol && compl <= 1e-6 {
            return Ok(assemble(model, eq, line, x, k, SolveStatus::Converged, SolveMode::Conditional, iterations, opts));
        }
        if viol > 0.25 * prev_viol {
            rho *= 10.0;
        }
        prev_viol = viol;
        if rho > 1e12 {
            break;
        }
    }
    Ok(assemble(model, eq, line, x, k, SolveStatus::Infeasible, SolveMode::Conditional, iterations, opts))
}

#[derive(Debug, Clone)]
pub struct MultistartResult {
    /// Distinct solutions sorted by `delta_h`.
    pub solutions: Vec<FailurePoint>,
    /// Number of starts that landed on each solution.
    pub hits: Vec<usize>,
    pub n_failed: usize,
    /// Several distinct solutions share one energy level.
    pub continuum: bool,
}

fn rounded_key(x: &DVector<f64>) -> Vec<i64> {
    x.iter().map(|v| (v * 1e4).round() as i64).collect()
}

/// Solve from `x̄` and from `n_seeds` Gaussian perturbations of it, then
/// deduplicate solutions rounded to four decimals.
///
/// The continuum flag is raised when at least three distinct solutions exist
/// and a quarter or more of them share `delta_h` within `1e-6`.
pub fn multistart<M: EnergyModel + ?Sized>(
    model: &M,
    eq: &EquilibriumPoint,
    line: usize,
    n_seeds: usize,
    perturb_scale: f64,
    seed: u64,
    opts: &NlpOptions,
) -> Result<MultistartResult> {
    check_line(model, line)?;
    let normal = Normal::new(0.0, perturb_scale.max(0.0)).map_err(|e| GridError::Domain(e.to_string()))?;
    let runs: Vec<Option<FailurePoint>> = (0..=n_seeds)
        .into_par_iter()
        .map(|i| {
            let init = if i == 0 {
                eq.x.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let mut y = eq.x.clone();
                for _ in 0..20 {
                    y = eq.x.map(|v| v + normal.sample(&mut rng));
                    if model.in_domain(&y) {
                        break;
                    }
                }
                if !model.in_domain(&y) {
                    return None;
                }
                y
            };
            let obj = EnergyObjective(model);
            let out = sqp(model, &obj, line, init, opts);
            out.converged.then(|| {
                assemble(model, eq, line, out.x, out.k, SolveStatus::Converged, SolveMode::Unconditional, out.iterations, opts)
            })
        })
        .collect();

    let n_failed = runs.iter().filter(|r| r.is_none()).count();
    let mut groups: BTreeMap<Vec<i64>, (FailurePoint, usize)> = BTreeMap::new();
    for fp in runs.into_iter().flatten() {
        groups
            .entry(rounded_key(&fp.x_star))
            .and_modify(|e| e.1 += 1)
            .or_insert((fp, 1));
    }
    let mut items: Vec<(Vec<i64>, FailurePoint, usize)> = groups.into_iter().map(|(k, (f, n))| (k, f, n)).collect();
    items.sort_by(|a, b| a.1.delta_h.total_cmp(&b.1.delta_h).then_with(|| a.0.cmp(&b.0)));
    let solutions: Vec<FailurePoint> = items.iter().map(|t| t.1.clone()).collect();
    let hits = items.iter().map(|t| t.2).collect();
    let continuum = continuum_flag(&solutions.iter().map(|f| f.delta_h).collect::<Vec<_>>());
    Ok(MultistartResult {
        solutions,
        hits,
        n_failed,
        continuum,
    })
}

/// `delta_h` values sorted ascending.
pub fn continuum_flag(delta_h: &[f64]) -> bool {
    let n = delta_h.len();
    if n < 3 {
        return false;
    }
    let need = (n as f64 * 0.25).ceil().max(2.0) as usize;
    (0..n).any(|i| delta_h.iter().filter(|&&v| (v - delta_h[i]).abs() <= 1e-6).count() >= need)
}
