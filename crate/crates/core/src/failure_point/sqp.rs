//! Newton iteration on the KKT system of `min f(x) s.t. Theta_l(x) = Theta_l^max`.

use nalgebra::{DMatrix, DVector};

use super::NlpOptions;
use crate::energy::EnergyModel;
use crate::linalg;

pub(crate) trait Objective {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

pub(crate) struct EnergyObjective<'a, M: ?Sized>(pub &'a M);

impl<M: EnergyModel + ?Sized> Objective for EnergyObjective<'_, M> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.0.energy(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.0.gradient(x)
    }
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.0.hessian(x)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct SqpOutcome {
    pub x: DVector<f64>,
    pub k: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stationarity: f64,
    pub violation: f64,
}

/// Regularize `w` until it is positive definite on the tangent space of `c`,
/// tested through `w + delta I + rho c c'/|c|^2`.
fn regularize(w: &DMatrix<f64>, c: &DVector<f64>) -> Option<DMatrix<f64>> {
    let d = w.nrows();
    let scale = 1.0 + w.amax();
    let n = c / c.norm();
    let border = (10.0 * scale) * (&n * n.transpose());
    let eye = DMatrix::<f64>::identity(d, d);
    let mut delta = 0.0;
    for _ in 0..40 {
        let wr = w + delta * &eye;
        if linalg::is_positive_definite(&(&wr + &border)) {
            return Some(wr);
        }
        delta = if delta == 0.0 { 1e-8 * scale } else { delta * 4.0 };
    }
    None
}

/// Newton projection onto the surface along the constraint gradient.
pub(crate) fn restore<M: EnergyModel + ?Sized>(
    model: &M,
    line: usize,
    mut x: DVector<f64>,
    tol: f64,
) -> Option<DVector<f64>> {
    let tmax = model.theta_max(line);
    for _ in 0..50 {
        let le = model.line_energy(&x, line);
        let r = le.value - tmax;
        if r.abs() <= tol {
            return Some(x);
        }
        let cn = le.gradient.norm_squared();
        if cn == 0.0 {
            return None;
        }
        let dx = -(r / cn) * &le.gradient;
        let a = model.max_step(&x, &dx).min(1.0);
        x += a * dx;
        if !model.in_domain(&x) {
            return None;
        }
    }
    let r = model.line_value(&x, line) - tmax;
    (r.abs() <= 1e3 * tol).then_some(x)
}

/// Feasible-path Newton method on the KKT system of one equality constraint.
///
/// Each iteration solves the regularized KKT system, steps, and projects the
/// trial point back onto the surface; steps are accepted on an Armijo
/// decrease of the objective. The first iteration may start off the surface.
pub(crate) fn sqp<M: EnergyModel + ?Sized, O: Objective>(
    model: &M,
    obj: &O,
    line: usize,
    x0: DVector<f64>,
    opts: &NlpOptions,
) -> SqpOutcome {
    let tmax = model.theta_max(line);
    let d = model.dim();
    let mut x = x0;
    let c0 = model.line_energy(&x, line).gradient;
    let g0 = obj.gradient(&x);
    let mut k = if c0.norm_squared() > 0.0 {
        g0.dot(&c0) / c0.norm_squared()
    } else {
        0.0
    };
    let mut iterations = 0;
    let tight_c = 1e-13 * (1.0 + tmax.abs());
    let tight_o = 1e-11;
    let mut on_surface = false;

    loop {
        let g = obj.gradient(&x);
        let le = model.line_energy(&x, line);
        let c = &le.gradient;
        let r = le.value - tmax;
        let stat = (&g - k * c).amax();
        let scale = 1.0 + g.amax();
        if (r.abs() <= tight_c && stat <= tight_o * scale) || iterations >= opts.max_iter {
            break;
        }
        if c.norm() < 1e-14 {
            break;
        }
        iterations += 1;

        let w = obj.hessian(&x) - k * &le.hessian;
        let Some(wr) = regularize(&w, c) else { break };
        let mut kkt = DMatrix::zeros(d + 1, d + 1);
        kkt.view_mut((0, 0), (d, d)).copy_from(&wr);
        for i in 0..d {
            kkt[(i, d)] = -c[i];
            kkt[(d, i)] = c[i];
        }
        let mut rhs = DVector::zeros(d + 1);
        rhs.rows_mut(0, d).copy_from(&(-&g));
        rhs[d] = if on_surface { 0.0 } else { -r };
        let Some(sol) = linalg::solve(&kkt, &rhs) else { break };
        let dx = sol.rows(0, d).into_owned();
        let k_new = sol[d];

        let f0 = obj.value(&x);
        let slope = g.dot(&dx).min(0.0);
        let mut alpha = model.max_step(&x, &dx).min(1.0);
        let mut next = None;
        for _ in 0..50 {
            let xt = &x + alpha * &dx;
            if model.in_domain(&xt) {
                if let Some(xr) = restore(model, line, xt, tight_c) {
                    // off the surface the first step is judged by reaching it
                    if !on_surface || obj.value(&xr) <= f0 + 1e-4 * alpha * slope {
                        next = Some((xr, alpha));
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        let Some((xn, a)) = next else { break };
        let step = (&xn - &x).amax();
        x = xn;
        on_surface = true;
        k += a * (k_new - k);
        if step <= 1e-15 * (1.0 + x.amax()) {
            break;
        }
    }

    let g = obj.gradient(&x);
    let le = model.line_energy(&x, line);
    // refresh the multiplier by least squares at the final point
    if le.gradient.norm_squared() > 0.0 {
        let ls = g.dot(&le.gradient) / le.gradient.norm_squared();
        if (&g - ls * &le.gradient).amax() < (&g - k * &le.gradient).amax() {
            k = ls;
        }
    }
    let stationarity = (&g - k * &le.gradient).amax();
    let violation = (le.value - tmax).abs();
    let converged = violation < opts.constraint_tol
        && stationarity < opts.opt_tol * (1.0 + g.amax())
        && x.iter().all(|v| v.is_finite());
    SqpOutcome {
        x,
        k,
        iterations,
        converged,
        stationarity,
        violation,
    }
}
