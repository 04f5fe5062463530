//! Analytic exit rates of a line failure surface.
//!
//! The zeroth-order rate is
//! `lambda0 = C* C0 tau^(-1/2) exp(-dH / tau)` with
//! `C* = grad H' S grad H / sqrt(2 pi |B*|)` at the failure point and
//! `C0 = sqrt|det Hess H(x̄)|`. The first-order rate multiplies it by
//! `1 + tau / dH`. All arithmetic is carried in log space.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::energy::EnergyModel;
use crate::equilibrium::EquilibriumPoint;
use crate::error::{GridError, Result};
use crate::failure_point::{project_to_surface, FailurePoint};
use crate::linalg;

/// Assumptions behind the Laplace evaluation of the boundary flux.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Applicability {
    /// The deterministic flow points into the safe region: `<(J - S) grad H, n> < 0`.
    pub a1: bool,
    /// The surface is noncharacteristic: `<grad H, n> > 0`.
    pub a2: bool,
    /// Diffusion acts across the surface: `<n, S n> > 0`.
    pub a3: bool,
}

impl Applicability {
    pub fn all(&self) -> bool {
        self.a1 && self.a2 && self.a3
    }
}

/// Signed curvature factor with its log magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Curvature {
    pub b_star: f64,
    pub log_abs: f64,
    pub sign: f64,
    /// Computed from the bordered determinant because `L` was singular.
    pub bordered: bool,
}

/// Temperature-independent constants of a line's rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateConstants {
    pub delta_h: f64,
    pub b_star: f64,
    pub log_c_star: f64,
    pub log_c0: f64,
    pub applicability: Applicability,
}

impl RateConstants {
    pub fn c_star(&self) -> f64 {
        self.log_c_star.exp()
    }

    pub fn c0(&self) -> f64 {
        self.log_c0.exp()
    }

    pub fn log_lambda0(&self, tau: f64) -> f64 {
        self.log_c_star + self.log_c0 - 0.5 * tau.ln() - self.delta_h / tau
    }

    /// `None` when `delta_h = 0` leaves `C**` undefined.
    pub fn log_lambda1(&self, tau: f64) -> Option<f64> {
        (self.delta_h > 0.0).then(|| self.log_lambda0(tau) + (tau / self.delta_h).ln_1p())
    }

    pub fn estimate(&self, tau: f64) -> RateEstimate {
        let log0 = self.log_lambda0(tau);
        let log1 = self.log_lambda1(tau);
        RateEstimate {
            lambda0: log0.exp(),
            lambda1: log1.unwrap_or(log0).exp(),
            log_lambda0: log0,
            log_lambda1: log1.unwrap_or(log0),
            first_order: log1.is_some(),
            c_star: self.c_star(),
            c0: self.c0(),
            c1: self.c0(),
            c_star_star: if self.delta_h > 0.0 { self.c_star() / self.delta_h } else { f64::NAN },
            b_star: self.b_star,
            delta_h: self.delta_h,
            tau,
            applicability: self.applicability,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub lambda0: f64,
    pub lambda1: f64,
    pub log_lambda0: f64,
    pub log_lambda1: f64,
    /// False when `delta_h = 0`; `lambda1` then repeats `lambda0`.
    pub first_order: bool,
    pub c_star: f64,
    pub c0: f64,
    pub c1: f64,
    pub c_star_star: f64,
    pub b_star: f64,
    pub delta_h: f64,
    pub tau: f64,
    pub applicability: Applicability,
}

/// `B* = g' L^{-1} g det L`. Falls back to the bordered determinant
/// `-det [[L, g], [g', 0]]`, which equals `g' adj(L) g`, when `L` is singular.
pub fn curvature_from_parts(g: &DVector<f64>, l: &DMatrix<f64>) -> Result<Curvature> {
    let d = g.len();
    if linalg::pivot_ratio(l) > 1e-13 {
        if let Some(y) = linalg::solve(l, g) {
            let q = g.dot(&y);
            let (ld, sd) = linalg::log_abs_det(l);
            if q != 0.0 && sd != 0.0 {
                let sign = q.signum() * sd;
                let log_abs = q.abs().ln() + ld;
                return Ok(Curvature {
                    b_star: sign * log_abs.exp(),
                    log_abs,
                    sign,
                    bordered: false,
                });
            }
        }
    }
    let mut m = DMatrix::zeros(d + 1, d + 1);
    m.view_mut((0, 0), (d, d)).copy_from(l);
    for i in 0..d {
        m[(i, d)] = g[i];
        m[(d, i)] = g[i];
    }
    let (ld, sd) = linalg::log_abs_det(&m);
    if sd == 0.0 || !ld.is_finite() {
        return Err(GridError::SingularCurvature);
    }
    Ok(Curvature {
        b_star: -sd * ld.exp(),
        log_abs: ld,
        sign: -sd,
        bordered: true,
    })
}

/// Curvature factor at a failure point, with `L = Hess H - k Hess Theta_l`.
pub fn curvature_factor<M: EnergyModel + ?Sized>(model: &M, fp: &FailurePoint) -> Result<Curvature> {
    let x = &fp.x_star;
    let l = model.hessian(x) - fp.k * model.line_energy(x, fp.line).hessian;
    curvature_from_parts(&model.gradient(x), &l)
}

fn inner_products<M: EnergyModel + ?Sized>(model: &M, x: &DVector<f64>, line: usize) -> (f64, f64, f64) {
    let st = model.structure();
    let c = model.line_energy(x, line).gradient;
    let norm = c.norm();
    if norm == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let n = c / norm;
    let g = model.gradient(x);
    let drift = st.drift() * &g;
    let sn = n.component_mul(&st.s_diag);
    (drift.dot(&n), g.dot(&n), n.dot(&sn))
}

/// Evaluate the three assumptions at `x*` and at `n_samples` points of the
/// surface obtained by projecting Gaussian perturbations of `x*` of size
/// `radius`. A negative multiplier fails `a1` and `a2` outright.
pub fn check_applicability<M: EnergyModel + ?Sized>(
    model: &M,
    fp: &FailurePoint,
    n_samples: usize,
    radius: f64,
    seed: u64,
) -> Applicability {
    let mut out = Applicability {
        a1: fp.k > 0.0,
        a2: fp.k > 0.0,
        a3: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![fp.x_star.clone()];
    for _ in 0..n_samples {
        let y = fp.x_star.map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + radius * z
        });
        if !model.in_domain(&y) {
            continue;
        }
        if let Some(p) = project_to_surface(model, fp.line, y) {
            points.push(p);
        }
    }
    for x in &points {
        let (a1, a2, a3) = inner_products(model, x, fp.line);
        out.a1 &= a1 < 0.0;
        out.a2 &= a2 > 0.0;
        out.a3 &= a3 > 0.0;
    }
    out
}

/// Rate constants of a solved failure point; applicability is checked at `x*` only.
pub fn rate_constants<M: EnergyModel + ?Sized>(
    model: &M,
    eq: &EquilibriumPoint,
    fp: &FailurePoint,
) -> Result<RateConstants> {
    if fp.delta_h < -1e-12 {
        return Err(GridError::Domain(format!("negative energy difference {}", fp.delta_h)));
    }
    let delta_h = fp.delta_h.max(0.0);
    let curv = curvature_factor(model, fp)?;
    let g = model.gradient(&fp.x_star);
    let flux = g.dot(&g.component_mul(&model.structure().s_diag));
    let log_c_star = flux.ln() - 0.5 * (2.0 * PI).ln() - 0.5 * curv.log_abs;
    Ok(RateConstants {
        delta_h,
        b_star: curv.b_star,
        log_c_star,
        log_c0: 0.5 * eq.log_det_hess,
        applicability: check_applicability(model, fp, 0, 0.0, 0),
    })
}

pub fn rate_zeroth<M: EnergyModel + ?Sized>(
    model: &M,
    eq: &EquilibriumPoint,
    fp: &FailurePoint,
    tau: f64,
) -> Result<RateEstimate> {
    check_tau(tau)?;
    Ok(rate_constants(model, eq, fp)?.estimate(tau))
}

/// First-order rate with `C1 = C0` and `C** = C* / dH`. With `dH = 0` the
/// estimate carries `first_order = false` and repeats the zeroth-order rate.
pub fn rate_first<M: EnergyModel + ?Sized>(
    model: &M,
    eq: &EquilibriumPoint,
    fp: &FailurePoint,
    tau: f64,
) -> Result<RateEstimate> {
    rate_zeroth(model, eq, fp, tau)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(GridError::Domain(format!("temperature must be positive, got {tau}")))
    }
}

/// Regime boundaries of the prefactor fits: low temperature is
/// `low * tau < dH`, high temperature is `tau > high * dH`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regimes {
    pub low: f64,
    pub high: f64,
}

impl Default for Regimes {
    fn default() -> Self {
        Regimes { low: 5.0, high: 5.0 }
    }
}

/// Least-squares prefactor estimates; `None` marks an empty regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefactorFit {
    pub c0_hat: Option<f64>,
    pub c1_hat: Option<f64>,
    pub n_low: usize,
    pub n_high: usize,
}

/// Fit `C0` on low-temperature and then `C1` on high-temperature
/// observations `(tau, rate)`, after removing the energy factor.
pub fn fit_prefactors(observed: &[(f64, f64)], c_star: f64, delta_h: f64, regimes: Regimes) -> PrefactorFit {
    let scaled = |&(tau, rate): &(f64, f64)| (tau, rate * (delta_h / tau).exp());
    let low: Vec<(f64, f64)> = observed.iter().filter(|o| regimes.low * o.0 < delta_h).map(scaled).collect();
    let high: Vec<(f64, f64)> = observed.iter().filter(|o| o.0 > regimes.high * delta_h).map(scaled).collect();

    let c0_hat = (!low.is_empty()).then(|| {
        let (num, den) = low.iter().fold((0.0, 0.0), |(n, d), &(t, y)| {
            let a = c_star / t.sqrt();
            (n + a * y, d + a * a)
        });
        num / den
    });
    let c1_hat = match (c0_hat, high.is_empty() || delta_h <= 0.0) {
        (Some(c0), false) => {
            let (num, den) = high.iter().fold((0.0, 0.0), |(n, d), &(t, y)| {
                let z = y - c_star * c0 / t.sqrt();
                let b = c_star / delta_h * t.sqrt();
                (n + b * z, d + b * b)
            });
            Some(num / den)
        }
        _ => None,
    };
    PrefactorFit {
        c0_hat,
        c1_hat,
        n_low: low.len(),
        n_high: high.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Risk {
    High,
    Medium,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedLine {
    pub line: usize,
    pub delta_h: f64,
    pub risk: Risk,
}

/// Sort `(line, dH)` by `dH` ascending, ties by line id, and assign risk
/// classes: the first `split.0` fraction is high risk, the next `split.1` medium.
pub fn rank_lines(entries: &[(usize, f64)], split: (f64, f64)) -> Vec<RankedLine> {
    let mut v = entries.to_vec();
    v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let n = v.len() as f64;
    v.into_iter()
        .enumerate()
        .map(|(i, (line, delta_h))| {
            let q = i as f64 / n;
            let risk = if q < split.0 {
                Risk::High
            } else if q < split.0 + split.1 {
                Risk::Medium
            } else {
                Risk::Low
            };
            RankedLine { line, delta_h, risk }
        })
        .collect()
}

/// Absolute logarithmic error `|ln(a / b)|`.
pub fn log_error(a: f64, b: f64) -> f64 {
    (a.ln() - b.ln()).abs()
}
