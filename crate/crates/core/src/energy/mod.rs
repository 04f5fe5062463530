//! Energy function, line energies and the port-Hamiltonian structure.
//!
//! Every downstream algorithm is written against [`EnergyModel`], so the grid
//! model and the small analytic test models share one code path.
//!
//! The grid energy is
//!
//! ```text
//! H = 1/2 w'Mw + sum_l b_l/2 |v_i - v_j|^2 - <P0, theta> + <Q0, ln V>
//! ```
//!
//! with phasors `v_i = V_i e^{j theta_i}`. The network term equals
//! `-1/2 sum_ik B_ik V_i V_k cos(theta_i - theta_k)` summed over all buses,
//! fixed magnitudes and the slack angle substituted. Restricting that sum to
//! load buses gives a different function whose gradient no longer reproduces
//! the power-flow mismatches, so the full-bus form is used.

mod grid;
mod layout;
mod quadratic;
mod structure;

use nalgebra::{DMatrix, DVector};

pub use grid::GridModel;
pub use layout::StateLayout;
pub use quadratic::{LinearBoundary, QuadraticModel};
pub use structure::StructureMatrices;

/// Squared line current with first and second derivatives in state slots.
#[derive(Debug, Clone)]
pub struct LineEnergy {
    pub line: usize,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// A smooth energy on `R^d` with a set of failure surfaces `Theta_l = Theta_l^max`
/// and constant structure matrices.
pub trait EnergyModel: Sync {
    fn dim(&self) -> usize;

    /// Whether `x` lies in the domain of `H` (positive load voltages for grids).
    fn in_domain(&self, x: &DVector<f64>) -> bool;

    fn energy(&self, x: &DVector<f64>) -> f64;

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;

    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    fn structure(&self) -> &StructureMatrices;

    /// Lines in service, as indices understood by the line methods.
    fn lines(&self) -> Vec<usize>;

    fn line_value(&self, x: &DVector<f64>, line: usize) -> f64;

    fn line_energy(&self, x: &DVector<f64>, line: usize) -> LineEnergy;

    fn theta_max(&self, line: usize) -> f64;

    /// Natural starting point for Newton solves.
    fn flat_start(&self) -> DVector<f64>;

    /// Largest `a` in `(0, 1]` keeping `x + a dx` inside the domain with some margin.
    fn max_step(&self, _x: &DVector<f64>, _dx: &DVector<f64>) -> f64 {
        1.0
    }

    /// Momentum slots with their masses; the Gibbs marginal there is `N(0, tau/m)`.
    fn momentum_slots(&self) -> Vec<(usize, f64)> {
        Vec::new()
    }

    /// Map angle slots to the principal branch `(-pi, pi]`.
    fn wrap_angles(&self, _x: &mut DVector<f64>) {}

    /// Human-readable external id of a line.
    fn line_label(&self, line: usize) -> usize {
        line
    }
}

/// Central-difference gradient, used by tests and diagnostics.
pub fn numerical_gradient<M: EnergyModel + ?Sized>(model: &M, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let xi = x[i];
        xp[i] = xi + h;
        let fp = model.energy(&xp);
        xp[i] = xi - h;
        let fm = model.energy(&xp);
        xp[i] = xi;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}
