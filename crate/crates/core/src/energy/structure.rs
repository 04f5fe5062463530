use nalgebra::{DMatrix, DVector};

use super::StateLayout;
use crate::case_model::NetworkParams;
use crate::error::{GridError, Result};

/// Constant matrices of `dx = (J - S) grad H dt + sqrt(2 tau S) dW`.
#[derive(Debug, Clone)]
pub struct StructureMatrices {
    pub j: DMatrix<f64>,
    /// Diagonal of `S`.
    pub s_diag: DVector<f64>,
    pub k: DMatrix<f64>,
    /// Componentwise square root of `s_diag`.
    pub s_sqrt: DVector<f64>,
}

impl StructureMatrices {
    pub fn new(j: DMatrix<f64>, s_diag: DVector<f64>) -> Result<Self> {
        let d = s_diag.len();
        if j.nrows() != d || j.ncols() != d {
            return Err(GridError::Domain("J and S sizes differ".into()));
        }
        if (&j + j.transpose()).amax() > 0.0 {
            return Err(GridError::Domain("J must be skew-symmetric".into()));
        }
        if s_diag.iter().any(|&s| !(s >= 0.0)) {
            return Err(GridError::Domain("S must be non-negative".into()));
        }
        let k = DMatrix::from_diagonal(&s_diag) - &j;
        let s_sqrt = s_diag.map(f64::sqrt);
        Ok(StructureMatrices { j, s_diag, k, s_sqrt })
    }

    pub fn dim(&self) -> usize {
        self.s_diag.len()
    }

    pub fn s(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.s_diag)
    }

    /// `J - S`, the drift matrix acting on `grad H`.
    pub fn drift(&self) -> DMatrix<f64> {
        &self.j - self.s()
    }
}

/// Assemble `J` and `S` for a grid layout.
///
/// `J` couples frequencies to angles through `T1 M^-1`, where row `theta_g`
/// of `T1` is `e_g - e_slack` and row `theta_load` is `-e_slack`. `S` carries
/// `D/M^2` on frequencies, zero on generator angles, `1/Dd` on load angles and
/// `1/Deps` on load voltages.
pub fn build_structure(params: &NetworkParams, layout: &StateLayout) -> StructureMatrices {
    let d = layout.dim();
    let mut j = DMatrix::zeros(d, d);
    let mut s = DVector::zeros(d);
    let slack_w = layout.omega_slot(params.slack).expect("slack has a frequency slot");
    for (k, &b) in layout.omega_buses.iter().enumerate() {
        s[k] = params.dg[b] / (params.mg[b] * params.mg[b]);
    }
    for &b in &layout.theta_buses {
        let t = layout.theta_slot(b).expect("angle slot");
        let ms = params.mg[params.slack];
        j[(t, slack_w)] -= 1.0 / ms;
        j[(slack_w, t)] += 1.0 / ms;
        if let Some(w) = layout.omega_slot(b) {
            j[(t, w)] += 1.0 / params.mg[b];
            j[(w, t)] -= 1.0 / params.mg[b];
        } else {
            s[t] = 1.0 / params.dd[b];
        }
    }
    for &b in &layout.volt_buses {
        s[layout.volt_slot(b).expect("voltage slot")] = 1.0 / params.deps;
    }
    StructureMatrices::new(j, s).expect("grid structure is well formed")
}
