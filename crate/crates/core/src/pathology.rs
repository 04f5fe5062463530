//! Diagnostics for the three ways a single-line failure problem can be
//! ill-posed: nested failure regions, non-isolated failure points, and exit
//! paths that cross other lines before reaching their own surface.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use ode_solvers::{Dopri5, OutputType, System};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::EnergyModel;
use crate::equilibrium::EquilibriumPoint;
use crate::error::{GridError, Result};
use crate::exit_rate::rate_first;
use crate::failure_point::{multistart, solve_conditional, solve_unconditional, FailurePoint, NlpOptions, SolveStatus};

type OdeVec = ode_solvers::DVector<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathOptions {
    /// Initial step; the integrator adapts it.
    pub step: f64,
    pub max_steps: usize,
    /// Absolute and relative per-step error.
    pub tol: f64,
    /// Same meaning as in the failure-point solver.
    pub trip_tol: f64,
}

impl Default for PathOptions {
    fn default() -> Self {
        PathOptions {
            step: 1e-4,
            max_steps: 2_000_000,
            tol: 1e-8,
            trip_tol: 1e-9,
        }
    }
}

/// First contact of the path with a line limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathTrip {
    pub line: usize,
    /// Reversed time `s` of the first touch.
    pub first_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationPath {
    /// `(s, phi(s))` at every accepted step.
    pub trajectory: Vec<(f64, DVector<f64>)>,
    pub energies: Vec<f64>,
    /// Sorted by first touch, then by line.
    pub trips: Vec<PathTrip>,
    pub converged_to_xbar: bool,
    pub distance: f64,
}

impl FluctuationPath {
    pub fn path_trips(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.trips.iter().map(|t| t.line).collect();
        v.sort_unstable();
        v
    }

    pub fn end(&self) -> &DVector<f64> {
        &self.trajectory.last().expect("path has a start point").1
    }
}

struct Reversed<'a, M: ?Sized> {
    model: &'a M,
    flow: DMatrix<f64>,
    xbar: DVector<f64>,
    goal: f64,
    trip_tol: f64,
    lines: Vec<usize>,
    trips: BTreeMap<usize, f64>,
    states: Vec<(f64, DVector<f64>)>,
    energies: Vec<f64>,
    done: bool,
    broken: bool,
}

impl<M: EnergyModel + ?Sized> Reversed<'_, M> {
    /// Returns true when the path should stop.
    fn record(&mut self, s: f64, x: DVector<f64>) -> bool {
        if !x.iter().all(|v| v.is_finite()) || !self.model.in_domain(&x) {
            self.broken = true;
            return true;
        }
        for &k in &self.lines {
            if self.model.line_value(&x, k) >= self.model.theta_max(k) - self.trip_tol {
                self.trips.entry(k).or_insert(s);
            }
        }
        self.energies.push(self.model.energy(&x));
        self.done = (&x - &self.xbar).norm() < self.goal;
        self.states.push((s, x));
        self.done
    }
}

impl<M: EnergyModel + ?Sized> System<f64, OdeVec> for &mut Reversed<'_, M> {
    fn system(&self, _s: f64, y: &OdeVec, dy: &mut OdeVec) {
        let x = DVector::from_column_slice(y.as_slice());
        if !self.model.in_domain(&x) {
            dy.fill(f64::NAN);
            return;
        }
        let f = &self.flow * self.model.gradient(&x);
        dy.copy_from_slice(f.as_slice());
    }

    fn solout(&mut self, s: f64, y: &OdeVec, _dy: &OdeVec) -> bool {
        self.record(s, DVector::from_column_slice(y.as_slice()))
    }
}

/// Integrate `dphi/ds = -(S + J) grad H` from `start` until `phi` is within
/// `1e-6 sqrt(d)` of `x̄`. Returns the path whether or not it got there.
pub fn trace_path<M: EnergyModel + ?Sized>(
    model: &M,
    eq: &EquilibriumPoint,
    start: &DVector<f64>,
    opts: &PathOptions,
) -> Result<FluctuationPath> {
    if start.len() != model.dim() {
        return Err(GridError::Domain("start state has the wrong dimension".into()));
    }
    let st = model.structure();
    let flow = -(st.s() + &st.j);
    let mut sys = Reversed {
        model,
        flow,
        xbar: eq.x.clone(),
        goal: 1e-6 * (model.dim() as f64).sqrt(),
        trip_tol: opts.trip_tol,
        lines: model.lines(),
        trips: BTreeMap::new(),
        states: Vec::new(),
        energies: Vec::new(),
        done: false,
        broken: false,
    };
    if !sys.record(0.0, start.clone()) {
        let y0 = OdeVec::from_column_slice(start.as_slice());
        let mut solver = Dopri5::from_param(
            &mut sys,
            0.0,
            1e12,
            0.0,
            y0,
            opts.tol,
            opts.tol,
            0.9,
            0.04,
            0.2,
            10.0,
            1e3,
            opts.step,
            opts.max_steps.min(u32::MAX as usize) as u32,
            u32::MAX,
            OutputType::Sparse,
        );
        // running out of steps is reported through `converged_to_xbar`
        let _ = solver.integrate();
    }
    let distance = (&sys.states.last().expect("start recorded").1 - &eq.x).norm();
    let mut trips: Vec<PathTrip> = sys.trips.iter().map(|(&line, &first_s)| PathTrip { line, first_s }).collect();
    trips.sort_by(|a, b| a.first_s.total_cmp(&b.first_s).then(a.line.cmp(&b.line)));
    Ok(FluctuationPath {
        trajectory: sys.states,
        energies: sys.energies,
        trips,
        converged_to_xbar: sys.done && !sys.broken,
        distance,
    })
}

/// Most likely exit path of `fp`, traced backwards from `x*` to `x̄`.
pub fn fluctuation_path<M: EnergyModel + ?Sized>(
    model: &M,
    eq: &EquilibriumPoint,
    fp: &FailurePoint,
    opts: &PathOptions,
) -> Result<FluctuationPath> {
    let path = trace_path(model, eq, &fp.x_star, opts)?;
    if !path.converged_to_xbar {
        return Err(GridError::PathDiverged {
            steps: path.trajectory.len() - 1,
            distance: path.distance,
        });
    }
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedEntry {
    pub line: usize,
    pub delta_h: f64,
    pub nested_unconditional: bool,
    pub nested_conditional: bool,
    /// `|lambda(cond) - lambda(uncond)| / lambda(uncond)`; `None` without a
    /// conditional solution.
    pub rate_relative_error: Option<f64>,
    pub error: Option<String>,
}

fn relative_rate_error<M: EnergyModel + ?Sized>(
    model: &M,
    eq: &EquilibriumPoint,
    cond: &FailurePoint,
    uncond: &FailurePoint,
    tau: f64,
) -> Result<f64> {
    let lc = rate_first(model, eq, cond, tau)?.log_lambda1;
    let lu = rate_first(model, eq, uncond, tau)?.log_lambda1;
    Ok((lc - lu).exp_m1().abs())
}

fn nested_one<M: EnergyModel + ?Sized>(
    model: &M,
    eq: &EquilibriumPoint,
    line: usize,
    tau: f64,
    opts: &NlpOptions,
) -> NestedEntry {
    let mut entry = NestedEntry {
        line,
        delta_h: f64::NAN,
        nested_unconditional: false,
        nested_conditional: false,
        rate_relative_error: None,
        error: None,
    };
    let un = match solve_unconditional(model, eq, line, None, opts) {
        Ok(fp) => fp,
        Err(e) => {
            entry.error = Some(e.to_string());
            return entry;
        }
    };
    entry.delta_h = un.delta_h;
    entry.nested_unconditional = un.tripped.len() > 1;
    match solve_conditional(model, eq, line, opts) {
        Ok(c) if c.status == SolveStatus::Infeasible => entry.nested_conditional = true,
        Ok(c) if c.is_solved() => match relative_rate_error(model, eq, &c, &un, tau) {
            Ok(r) => entry.rate_relative_error = Some(r),
            Err(e) => entry.error = Some(e.to_string()),
        },
        Ok(c) => entry.error = Some(format!("conditional solve ended with status {:?}", c.status)),
        Err(e) => entry.error = Some(e.to_string()),
    }
    if entry.nested_conditional && !entry.nested_unconditional {
        log::warn!("line {line} is conditionally but not unconditionally nested");
    }
    entry
}

/// Nestedness flags per line. Rates are compared at temperature `tau`.
pub fn scan_nested<M: EnergyModel + ?Sized>(
    model: &M,
    eq: &EquilibriumPoint,
    lines: &[usize],
    tau: f64,
    opts: &NlpOptions,
) -> Vec<NestedEntry> {
    lines.par_iter().map(|&l| nested_one(model, eq, l, tau, opts)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationEntry {
    pub line: usize,
    pub n_solutions: usize,
    pub n_failed: usize,
    pub continuum: bool,
    /// Rate of the solution reached from `x̄`.
    pub rate_xbar: Option<f64>,
    /// Largest rate over all distinct solutions.
    pub rate_max: Option<f64>,
    pub error: Option<String>,
}

impl IsolationEntry {
    pub fn rate_relative_error(&self) -> Option<f64> {
        Some((self.rate_max? - self.rate_xbar?).abs() / self.rate_xbar?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsolationOptions {
    pub n_seeds: usize,
    pub perturb_scale: f64,
    pub seed: u64,
    pub tau: f64,
}

impl Default for IsolationOptions {
    fn default() -> Self {
        IsolationOptions {
            n_seeds: 20,
            perturb_scale: 0.1,
            seed: 0,
            tau: 1e-3,
        }
    }
}

fn isolated_one<M: EnergyModel + ?Sized>(
    model: &M,
    eq: &EquilibriumPoint,
    line: usize,
    iso: &IsolationOptions,
    opts: &NlpOptions,
) -> IsolationEntry {
    let mut entry = IsolationEntry {
        line,
        n_solutions: 0,
        n_failed: 0,
        continuum: false,
        rate_xbar: None,
        rate_max: None,
        error: None,
    };
    let ms = match multistart(model, eq, line, iso.n_seeds, iso.perturb_scale, iso.seed, opts) {
        Ok(ms) => ms,
        Err(e) => {
            entry.error = Some(e.to_string());
            return entry;
        }
    };
    entry.n_solutions = ms.solutions.len();
    entry.n_failed = ms.n_failed;
    entry.continuum = ms.continuum;
    let rate = |fp: &FailurePoint| rate_first(model, eq, fp, iso.tau).map(|r| r.lambda1);
    let mut best: Option<f64> = None;
    for fp in &ms.solutions {
        match rate(fp) {
            Ok(r) => best = Some(best.map_or(r, |b| b.max(r))),
            Err(e) => entry.error = Some(e.to_string()),
        }
    }
    entry.rate_max = best;
    match solve_unconditional(model, eq, line, None, opts).and_then(|fp| rate(&fp)) {
        Ok(r) => entry.rate_xbar = Some(r),
        Err(e) => entry.error = Some(e.to_string()),
    }
    entry
}

/// Multistart solution counts per line.
pub fn scan_isolated<M: EnergyModel + ?Sized>(
    model: &M,
    eq: &EquilibriumPoint,
    lines: &[usize],
    iso: &IsolationOptions,
    opts: &NlpOptions,
) -> Result<Vec<IsolationEntry>> {
    if iso.n_seeds == 0 {
        return Err(GridError::Domain("isolation scan needs at least one seed".into()));
    }
    Ok(lines.par_iter().map(|&l| isolated_one(model, eq, l, iso, opts)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathologyReport {
    pub line: usize,
    pub delta_h: f64,
    pub nested_conditional: bool,
    pub nested_unconditional: bool,
    pub n_isolated_solutions: usize,
    pub continuum_flag: bool,
    /// Lines touched along the fluctuation path, the target included.
    pub path_trips: Vec<usize>,
    pub path_first_touch: Vec<PathTrip>,
    pub path_converged: bool,
    pub rate_relative_error: Option<f64>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScanOptions {
    pub nlp: NlpOptions,
    pub path: PathOptions,
    pub isolation: IsolationOptions,
}

/// All three diagnostics for each of `lines`.
pub fn scan_lines<M: EnergyModel + ?Sized>(
    model: &M,
    eq: &EquilibriumPoint,
    lines: &[usize],
    opts: &ScanOptions,
) -> Result<Vec<PathologyReport>> {
    if opts.isolation.n_seeds == 0 {
        return Err(GridError::Domain("isolation scan needs at least one seed".into()));
    }
    Ok(lines
        .par_iter()
        .map(|&line| {
            let nested = nested_one(model, eq, line, opts.isolation.tau, &opts.nlp);
            let iso = isolated_one(model, eq, line, &opts.isolation, &opts.nlp);
            let mut errors: Vec<String> = nested.error.iter().chain(&iso.error).cloned().collect();
            let path = solve_unconditional(model, eq, line, None, &opts.nlp)
                .and_then(|fp| trace_path(model, eq, &fp.x_star, &opts.path));
            let (trips, first, converged) = match path {
                Ok(p) => {
                    if !p.converged_to_xbar {
                        errors.push(format!("fluctuation path stopped {:.3e} from equilibrium", p.distance));
                    }
                    (p.path_trips(), p.trips, p.converged_to_xbar)
                }
                Err(e) => {
                    errors.push(e.to_string());
                    (Vec::new(), Vec::new(), false)
                }
            };
            PathologyReport {
                line,
                delta_h: nested.delta_h,
                nested_conditional: nested.nested_conditional,
                nested_unconditional: nested.nested_unconditional,
                n_isolated_solutions: iso.n_solutions,
                continuum_flag: iso.continuum,
                path_trips: trips,
                path_first_touch: first,
                path_converged: converged,
                rate_relative_error: nested.rate_relative_error,
                errors,
            }
        })
        .collect())
}

/// `line,dH,nested_cond,nested_uncond,n_solutions,path_trips,rate_rel_err`
/// with external line ids; trips are `;`-separated.
pub fn write_pathology_csv<M: EnergyModel + ?Sized, W: Write>(
    model: &M,
    reports: &[PathologyReport],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| GridError::Io(std::io::Error::other(e));
    w.write_record(["line", "dH", "nested_cond", "nested_uncond", "n_solutions", "path_trips", "rate_rel_err"])
        .map_err(io)?;
    for r in reports {
        let trips: Vec<String> = r.path_trips.iter().map(|&k| model.line_label(k).to_string()).collect();
        w.write_record([
            model.line_label(r.line).to_string(),
            format!("{:.10e}", r.delta_h),
            r.nested_conditional.to_string(),
            r.nested_unconditional.to_string(),
            r.n_isolated_solutions.to_string(),
            trips.join(";"),
            r.rate_relative_error.map_or(String::new(), |v| format!("{v:.6e}")),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
