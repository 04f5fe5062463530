use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::structure::build_structure;
use super::{EnergyModel, LineEnergy, StateLayout, StructureMatrices};
use crate::case_model::NetworkParams;
use crate::error::{GridError, Result};

/// Slots of the four local coordinates `(theta_i, theta_j, V_i, V_j)` of a line.
#[derive(Debug, Clone, Copy)]
struct LineSlots {
    slots: [Option<usize>; 4],
}

/// Values, gradient and Hessian of `phi = |v_i - v_j|^2 / 2` in local coordinates.
struct LocalPhi {
    value: f64,
    grad: [f64; 4],
    hess: [[f64; 4]; 4],
}

fn local_phi(ti: f64, tj: f64, vi: f64, vj: f64, second: bool) -> LocalPhi {
    let (s, c) = (ti - tj).sin_cos();
    let value = 0.5 * (vi * vi + vj * vj) - vi * vj * c;
    let grad = [vi * vj * s, -vi * vj * s, vi - vj * c, vj - vi * c];
    let mut hess = [[0.0; 4]; 4];
    if second {
        let a = vi * vj * c;
        hess[0][0] = a;
        hess[1][1] = a;
        hess[0][1] = -a;
        hess[0][2] = vj * s;
        hess[0][3] = vi * s;
        hess[1][2] = -vj * s;
        hess[1][3] = -vi * s;
        hess[2][2] = 1.0;
        hess[3][3] = 1.0;
        hess[2][3] = -c;
        for r in 0..4 {
            for q in 0..r {
                hess[r][q] = hess[q][r];
            }
        }
    }
    LocalPhi { value, grad, hess }
}

/// The lossless grid model on energized buses of a [`NetworkParams`].
#[derive(Debug, Clone)]
pub struct GridModel {
    params: NetworkParams,
    layout: StateLayout,
    structure: StructureMatrices,
    line_slots: Vec<LineSlots>,
}

impl GridModel {
    pub fn new(params: NetworkParams) -> Result<Self> {
        for &l in &params.active {
            let line = &params.lines[l];
            if !params.energized[line.from] || !params.energized[line.to] {
                return Err(GridError::Validation(format!(
                    "active line {} touches a de-energized bus",
                    line.id
                )));
            }
        }
        let layout = StateLayout::new(&params);
        let structure = build_structure(&params, &layout);
        let line_slots = params
            .lines
            .iter()
            .map(|line| LineSlots {
                slots: [
                    layout.theta_slot(line.from),
                    layout.theta_slot(line.to),
                    layout.volt_slot(line.from),
                    layout.volt_slot(line.to),
                ],
            })
            .collect();
        Ok(GridModel {
            params,
            layout,
            structure,
            line_slots,
        })
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.layout.dim() {
            return Err(GridError::Domain(format!(
                "state has {} entries, layout needs {}",
                x.len(),
                self.layout.dim()
            )));
        }
        if let Some(s) = self.layout.volt_range().find(|&s| !(x[s] > 0.0)) {
            return Err(GridError::Domain(format!(
                "non-positive voltage at {}",
                self.layout.slot_label(&self.params, s)
            )));
        }
        Ok(())
    }

    pub fn eval_h(&self, x: &DVector<f64>) -> Result<f64> {
        self.check(x)?;
        Ok(self.energy(x))
    }

    pub fn grad_h(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x)?;
        Ok(self.gradient(x))
    }

    pub fn hess_h(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(x)?;
        Ok(self.hessian(x))
    }

    /// Line energy addressed by line index; fails for lines out of service.
    pub fn line(&self, x: &DVector<f64>, line: usize) -> Result<LineEnergy> {
        if !self.params.active.contains(&line) {
            return Err(GridError::InactiveLine(self.params.lines.get(line).map_or(line, |l| l.id)));
        }
        self.check(x)?;
        Ok(self.line_energy(x, line))
    }

    fn local(&self, x: &DVector<f64>, line: usize, second: bool) -> LocalPhi {
        let l = &self.params.lines[line];
        let lay = &self.layout;
        local_phi(
            lay.angle(x, l.from),
            lay.angle(x, l.to),
            lay.voltage(x, &self.params, l.from),
            lay.voltage(x, &self.params, l.to),
            second,
        )
    }

    /// Real power injection `sum_j b V_i V_j sin(theta_i - theta_j)` at every bus.
    pub fn active_injection(&self, x: &DVector<f64>) -> Vec<f64> {
        let mut p = vec![0.0; self.params.n_bus()];
        for &l in &self.params.active {
            let line = &self.params.lines[l];
            let phi = self.local(x, l, false);
            p[line.from] += line.b * phi.grad[0];
            p[line.to] += line.b * phi.grad[1];
        }
        p
    }

    /// Reactive injection `sum_j b (V_i^2 - V_i V_j cos)` at every bus.
    pub fn reactive_injection(&self, x: &DVector<f64>) -> Vec<f64> {
        let mut q = vec![0.0; self.params.n_bus()];
        for &l in &self.params.active {
            let line = &self.params.lines[l];
            let phi = self.local(x, l, false);
            let vi = self.layout.voltage(x, &self.params, line.from);
            let vj = self.layout.voltage(x, &self.params, line.to);
            q[line.from] += line.b * vi * phi.grad[2];
            q[line.to] += line.b * vj * phi.grad[3];
        }
        q
    }

    /// Line loading `Theta_l / Theta_l^max` for every active line, by index.
    pub fn loadings(&self, x: &DVector<f64>) -> Vec<(usize, f64)> {
        self.params
            .active
            .iter()
            .map(|&l| (l, self.line_value(x, l) / self.params.lines[l].theta_max))
            .collect()
    }
}

impl EnergyModel for GridModel {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn in_domain(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim() && self.layout.volt_range().all(|s| x[s] > 0.0) && x.iter().all(|v| v.is_finite())
    }

    fn energy(&self, x: &DVector<f64>) -> f64 {
        let p = &self.params;
        let lay = &self.layout;
        let mut h = 0.0;
        for (k, &b) in lay.omega_buses.iter().enumerate() {
            h += 0.5 * p.mg[b] * x[k] * x[k];
        }
        for &l in &p.active {
            h += p.lines[l].b * self.local(x, l, false).value;
        }
        for &b in &lay.theta_buses {
            h -= p.p0[b] * lay.angle(x, b);
        }
        for &b in &lay.volt_buses {
            h += p.q0[b] * lay.voltage(x, p, b).ln();
        }
        h
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let lay = &self.layout;
        let mut g = DVector::zeros(self.dim());
        for (k, &b) in lay.omega_buses.iter().enumerate() {
            g[k] = p.mg[b] * x[k];
        }
        for &l in &p.active {
            let phi = self.local(x, l, false);
            let b = p.lines[l].b;
            for (a, slot) in self.line_slots[l].slots.iter().enumerate() {
                if let Some(s) = slot {
                    g[*s] += b * phi.grad[a];
                }
            }
        }
        for &b in &lay.theta_buses {
            g[lay.theta_slot(b).unwrap()] -= p.p0[b];
        }
        for &b in &lay.volt_buses {
            let s = lay.volt_slot(b).unwrap();
            g[s] += p.q0[b] / x[s];
        }
        g
    }

    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let p = &self.params;
        let lay = &self.layout;
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        for (k, &b) in lay.omega_buses.iter().enumerate() {
            h[(k, k)] = p.mg[b];
        }
        for &l in &p.active {
            let phi = self.local(x, l, true);
            let b = p.lines[l].b;
            let slots = &self.line_slots[l].slots;
            for a in 0..4 {
                let Some(sa) = slots[a] else { continue };
                for c in 0..4 {
                    if let Some(sc) = slots[c] {
                        h[(sa, sc)] += b * phi.hess[a][c];
                    }
                }
            }
        }
        for &b in &lay.volt_buses {
            let s = lay.volt_slot(b).unwrap();
            h[(s, s)] -= p.q0[b] / (x[s] * x[s]);
        }
        h
    }

    fn structure(&self) -> &StructureMatrices {
        &self.structure
    }

    fn lines(&self) -> Vec<usize> {
        self.params.active_lines()
    }

    fn line_value(&self, x: &DVector<f64>, line: usize) -> f64 {
        let b = self.params.lines[line].b;
        2.0 * b * b * self.local(x, line, false).value
    }

    fn line_energy(&self, x: &DVector<f64>, line: usize) -> LineEnergy {
        let d = self.dim();
        let b = self.params.lines[line].b;
        let scale = 2.0 * b * b;
        let phi = self.local(x, line, true);
        let slots = &self.line_slots[line].slots;
        let mut gradient = DVector::zeros(d);
        let mut hessian = DMatrix::zeros(d, d);
        for a in 0..4 {
            let Some(sa) = slots[a] else { continue };
            gradient[sa] += scale * phi.grad[a];
            for c in 0..4 {
                if let Some(sc) = slots[c] {
                    hessian[(sa, sc)] += scale * phi.hess[a][c];
                }
            }
        }
        LineEnergy {
            line,
            value: scale * phi.value,
            gradient,
            hessian,
        }
    }

    fn theta_max(&self, line: usize) -> f64 {
        self.params.lines[line].theta_max
    }

    fn flat_start(&self) -> DVector<f64> {
        self.layout.flat_start()
    }

    fn max_step(&self, x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
        let mut a: f64 = 1.0;
        for s in self.layout.volt_range() {
            if dx[s] < 0.0 {
                a = a.min(-0.9 * x[s] / dx[s]);
            }
        }
        a
    }

    fn momentum_slots(&self) -> Vec<(usize, f64)> {
        self.layout
            .omega_buses
            .iter()
            .enumerate()
            .map(|(k, &b)| (k, self.params.mg[b]))
            .collect()
    }

    fn wrap_angles(&self, x: &mut DVector<f64>) {
        for s in self.layout.theta_range() {
            let mut t = x[s].rem_euclid(2.0 * PI);
            if t > PI {
                t -= 2.0 * PI;
            }
            x[s] = t;
        }
    }

    fn line_label(&self, line: usize) -> usize {
        self.params.lines[line].id
    }
}
