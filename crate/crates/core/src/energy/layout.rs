use nalgebra::DVector;

use crate::case_model::{BusKind, NetworkParams};

/// Slot assignment for `x = (w[S+G], theta[G+L], V[L])`.
///
/// Frequencies list the slack first and then generators in bus order. Angles
/// are relative to the slack and cover energized non-slack buses in bus order.
/// Voltages cover energized load buses in bus order.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    pub omega_buses: Vec<usize>,
    pub theta_buses: Vec<usize>,
    pub volt_buses: Vec<usize>,
    omega_slot: Vec<Option<usize>>,
    theta_slot: Vec<Option<usize>>,
    volt_slot: Vec<Option<usize>>,
}

impl StateLayout {
    pub fn new(params: &NetworkParams) -> Self {
        let n = params.n_bus();
        let on = |i: usize| params.energized[i];
        let mut omega_buses = vec![params.slack];
        omega_buses.extend((0..n).filter(|&i| on(i) && params.kinds[i] == BusKind::Generator));
        let theta_buses: Vec<usize> = (0..n).filter(|&i| on(i) && i != params.slack).collect();
        let volt_buses: Vec<usize> = (0..n).filter(|&i| on(i) && params.kinds[i] == BusKind::Load).collect();

        let mut omega_slot = vec![None; n];
        let mut theta_slot = vec![None; n];
        let mut volt_slot = vec![None; n];
        let no = omega_buses.len();
        let nt = theta_buses.len();
        for (k, &b) in omega_buses.iter().enumerate() {
            omega_slot[b] = Some(k);
        }
        for (k, &b) in theta_buses.iter().enumerate() {
            theta_slot[b] = Some(no + k);
        }
        for (k, &b) in volt_buses.iter().enumerate() {
            volt_slot[b] = Some(no + nt + k);
        }
        StateLayout {
            omega_buses,
            theta_buses,
            volt_buses,
            omega_slot,
            theta_slot,
            volt_slot,
        }
    }

    pub fn dim(&self) -> usize {
        self.omega_buses.len() + self.theta_buses.len() + self.volt_buses.len()
    }

    pub fn omega_range(&self) -> std::ops::Range<usize> {
        0..self.omega_buses.len()
    }

    pub fn theta_range(&self) -> std::ops::Range<usize> {
        let s = self.omega_buses.len();
        s..s + self.theta_buses.len()
    }

    pub fn volt_range(&self) -> std::ops::Range<usize> {
        let s = self.omega_buses.len() + self.theta_buses.len();
        s..s + self.volt_buses.len()
    }

    pub fn omega_slot(&self, bus: usize) -> Option<usize> {
        self.omega_slot[bus]
    }

    pub fn theta_slot(&self, bus: usize) -> Option<usize> {
        self.theta_slot[bus]
    }

    pub fn volt_slot(&self, bus: usize) -> Option<usize> {
        self.volt_slot[bus]
    }

    /// `w = 0`, `theta = 0`, `V = 1`.
    pub fn flat_start(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.dim());
        for s in self.volt_range() {
            x[s] = 1.0;
        }
        x
    }

    /// Angle of `bus` relative to the slack.
    pub fn angle(&self, x: &DVector<f64>, bus: usize) -> f64 {
        self.theta_slot[bus].map_or(0.0, |s| x[s])
    }

    pub fn voltage(&self, x: &DVector<f64>, params: &NetworkParams, bus: usize) -> f64 {
        self.volt_slot[bus].map_or(params.vfix[bus], |s| x[s])
    }

    /// Short label like `V[3]` using the case bus id.
    pub fn slot_label(&self, params: &NetworkParams, slot: usize) -> String {
        let id = |b: usize| params.bus_ids[b];
        if self.omega_range().contains(&slot) {
            format!("omega[{}]", id(self.omega_buses[slot]))
        } else if self.theta_range().contains(&slot) {
            format!("theta[{}]", id(self.theta_buses[slot - self.omega_buses.len()]))
        } else {
            format!("V[{}]", id(self.volt_buses[slot - self.theta_range().end]))
        }
    }

    /// Carry values bus by bus from another layout; missing slots keep the flat start.
    pub fn transfer(&self, from: &StateLayout, x: &DVector<f64>) -> DVector<f64> {
        let mut out = self.flat_start();
        for b in 0..self.omega_slot.len() {
            if let (Some(t), Some(s)) = (self.omega_slot[b], from.omega_slot[b]) {
                out[t] = x[s];
            }
            if let (Some(t), Some(s)) = (self.theta_slot[b], from.theta_slot[b]) {
                out[t] = x[s];
            }
            if let (Some(t), Some(s)) = (self.volt_slot[b], from.volt_slot[b]) {
                out[t] = x[s];
            }
        }
        out
    }
}
