use nalgebra::{DMatrix, DVector};

use super::{EnergyModel, LineEnergy, StructureMatrices};
use crate::error::{GridError, Result};

/// Half-space failure region `<normal, x> >= level`.
#[derive(Debug, Clone)]
pub struct LinearBoundary {
    pub normal: DVector<f64>,
    pub level: f64,
}

/// `H = 1/2 x'Ax` with linear failure surfaces and arbitrary constant `J`, `S`.
///
/// The Laplace evaluation of the exit rate is exact for this model, and its
/// Gibbs marginals are Gaussian, which makes it a reference for the generic
/// machinery.
#[derive(Debug, Clone)]
pub struct QuadraticModel {
    pub a: DMatrix<f64>,
    pub boundaries: Vec<LinearBoundary>,
    structure: StructureMatrices,
    momentum: Vec<(usize, f64)>,
}

impl QuadraticModel {
    pub fn new(a: DMatrix<f64>, j: DMatrix<f64>, s_diag: DVector<f64>, boundaries: Vec<LinearBoundary>) -> Result<Self> {
        if a.nrows() != a.ncols() || a.nrows() != s_diag.len() {
            return Err(GridError::Domain("dimension mismatch".into()));
        }
        if (&a - a.transpose()).amax() > 1e-14 * a.amax().max(1.0) {
            return Err(GridError::Domain("A must be symmetric".into()));
        }
        let structure = StructureMatrices::new(j, s_diag)?;
        Ok(QuadraticModel {
            a,
            boundaries,
            structure,
            momentum: Vec::new(),
        })
    }

    /// Declare slots whose Gibbs marginal should be treated as kinetic.
    pub fn with_momentum(mut self, slots: Vec<(usize, f64)>) -> Self {
        self.momentum = slots;
        self
    }

    /// Two-dimensional toy: `A`, unit damping, rotation `J` of strength `rot`,
    /// one boundary `<n, x> = level` with `n` normalized.
    pub fn toy_2d(a: [[f64; 2]; 2], rot: f64, normal: [f64; 2], level: f64) -> Self {
        let a = DMatrix::from_row_slice(2, 2, &[a[0][0], a[0][1], a[1][0], a[1][1]]);
        let j = DMatrix::from_row_slice(2, 2, &[0.0, rot, -rot, 0.0]);
        let n = DVector::from_row_slice(&normal).normalize();
        QuadraticModel::new(a, j, DVector::from_element(2, 1.0), vec![LinearBoundary { normal: n, level }])
            .expect("valid toy")
    }

    /// One-dimensional Ornstein-Uhlenbeck potential `k x^2 / 2` with boundary `x = level`.
    pub fn ou_1d(k: f64, level: f64) -> Self {
        QuadraticModel::new(
            DMatrix::from_element(1, 1, k),
            DMatrix::zeros(1, 1),
            DVector::from_element(1, 1.0),
            vec![LinearBoundary {
                normal: DVector::from_element(1, 1.0),
                level,
            }],
        )
        .expect("valid toy")
    }
}

impl EnergyModel for QuadraticModel {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn in_domain(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim() && x.iter().all(|v| v.is_finite())
    }

    fn energy(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.a * x))
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }

    fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }

    fn structure(&self) -> &StructureMatrices {
        &self.structure
    }

    fn lines(&self) -> Vec<usize> {
        (0..self.boundaries.len()).collect()
    }

    fn line_value(&self, x: &DVector<f64>, line: usize) -> f64 {
        self.boundaries[line].normal.dot(x)
    }

    fn line_energy(&self, x: &DVector<f64>, line: usize) -> LineEnergy {
        let d = self.dim();
        LineEnergy {
            line,
            value: self.line_value(x, line),
            gradient: self.boundaries[line].normal.clone(),
            hessian: DMatrix::zeros(d, d),
        }
    }

    fn theta_max(&self, line: usize) -> f64 {
        self.boundaries[line].level
    }

    fn flat_start(&self) -> DVector<f64> {
        DVector::zeros(self.dim())
    }

    fn momentum_slots(&self) -> Vec<(usize, f64)> {
        self.momentum.clone()
    }
}
