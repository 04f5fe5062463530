//! Direct simulation of `dx = (J - S) grad H dt + sqrt(2 tau) S^(1/2) dW`.
//!
//! The integrator is the Leimkuhler-Matthews scheme: an explicit Euler drift
//! step with the noise increment averaged over consecutive Gaussian draws.
//! Every replica owns a ChaCha8 stream keyed by `(seed, replica)`, so results
//! do not depend on thread scheduling.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::energy::EnergyModel;
use crate::error::{GridError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub tau: f64,
    pub dt: f64,
    /// Horizon per replica in seconds.
    pub max_time: f64,
    pub seed: u64,
    /// Steps between recorded states in [`trajectory`].
    pub record_stride: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            tau: 1e-3,
            dt: 1e-6,
            max_time: 10.0,
            seed: 0,
            record_stride: 1,
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.tau >= 0.0) || !(self.max_time > 0.0) || self.record_stride == 0 {
            return Err(GridError::Domain(format!("invalid simulation config {self:?}")));
        }
        Ok(())
    }
}

/// Replica-local RNG: `seed` selects the key, `replica` the stream.
pub fn replica_rng(seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

pub struct Integrator<'a, M: ?Sized> {
    model: &'a M,
    drift: DMatrix<f64>,
    amp: DVector<f64>,
    dt: f64,
    noisy: bool,
    prev: DVector<f64>,
    rng: ChaCha8Rng,
    steps: u64,
}

impl<'a, M: EnergyModel + ?Sized> Integrator<'a, M> {
    pub fn new(model: &'a M, cfg: &SimConfig, replica: u64) -> Self {
        Self::with_rng(model, cfg, replica_rng(cfg.seed, replica))
    }

    pub fn with_rng(model: &'a M, cfg: &SimConfig, mut rng: ChaCha8Rng) -> Self {
        let st = model.structure();
        let noisy = cfg.tau > 0.0;
        let amp = &st.s_sqrt * (2.0 * cfg.tau * cfg.dt).sqrt();
        let prev = if noisy {
            draw(&mut rng, model.dim())
        } else {
            DVector::zeros(model.dim())
        };
        Integrator {
            model,
            drift: st.drift(),
            amp,
            dt: cfg.dt,
            noisy,
            prev,
            rng,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    /// One step `x += (J - S) grad H dt + sqrt(2 tau dt) S^(1/2) (R_n + R_{n+1}) / 2`.
    pub fn step(&mut self, x: &mut DVector<f64>) -> Result<()> {
        let g = self.model.gradient(x);
        x.gemv(self.dt, &self.drift, &g, 1.0);
        if self.noisy {
            let next = draw(&mut self.rng, x.len());
            for i in 0..x.len() {
                x[i] += self.amp[i] * 0.5 * (self.prev[i] + next[i]);
            }
            self.prev = next;
        }
        self.steps += 1;
        if !x.iter().all(|v| v.is_finite()) || !self.model.in_domain(x) {
            return Err(GridError::Blowup { step: self.steps });
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
}

/// States recorded every `record_stride` steps, starting with `x0`.
pub fn trajectory<M: EnergyModel + ?Sized>(
    model: &M,
    x0: &DVector<f64>,
    cfg: &SimConfig,
    n_steps: usize,
    replica: u64,
) -> Result<Vec<DVector<f64>>> {
    cfg.validate()?;
    let mut it = Integrator::new(model, cfg, replica);
    let mut x = x0.clone();
    let mut out = vec![x.clone()];
    for i in 1..=n_steps {
        it.step(&mut x)?;
        if i % cfg.record_stride == 0 {
            out.push(x.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    /// Line index in the model.
    pub line: usize,
    pub exit_time: f64,
    pub exit_state: DVector<f64>,
    /// Whether every line was monitored, rather than only a target line.
    pub first_overall: bool,
}

fn crossed<M: EnergyModel + ?Sized>(model: &M, x: &DVector<f64>, lines: &[usize]) -> Option<usize> {
    lines.iter().copied().find(|&l| model.line_value(x, l) >= model.theta_max(l))
}

fn run_until_exit<M: EnergyModel + ?Sized>(
    model: &M,
    mut it: Integrator<'_, M>,
    mut x: DVector<f64>,
    lines: &[usize],
    cfg: &SimConfig,
) -> Result<ExitRecord> {
    let first_overall = model.lines().len() == lines.len();
    let max_steps = (cfg.max_time / cfg.dt).ceil() as u64;
    loop {
        if let Some(line) = crossed(model, &x, lines) {
            return Ok(ExitRecord {
                line,
                exit_time: it.time(),
                exit_state: x,
                first_overall,
            });
        }
        if it.steps() >= max_steps {
            return Err(GridError::Timeout { elapsed: it.time() });
        }
        it.step(&mut x)?;
    }
}

/// Integrate from `start` until `Theta_line` reaches its limit, ignoring all
/// other lines. Crossings are detected at step ends.
pub fn simulate_unconditional<M: EnergyModel + ?Sized>(
    model: &M,
    start: &DVector<f64>,
    line: usize,
    cfg: &SimConfig,
    replica: u64,
) -> Result<ExitRecord> {
    cfg.validate()?;
    if !(cfg.tau > 0.0) {
        return Err(GridError::Domain("exit simulation needs tau > 0".into()));
    }
    if !model.lines().contains(&line) {
        return Err(GridError::InactiveLine(model.line_label(line)));
    }
    run_until_exit(model, Integrator::new(model, cfg, replica), start.clone(), &[line], cfg)
}

/// Integrate from `start` until the first line of the network fails.
pub fn simulate_first_failure<M: EnergyModel + ?Sized>(
    model: &M,
    start: &DVector<f64>,
    cfg: &SimConfig,
    replica: u64,
) -> Result<ExitRecord> {
    cfg.validate()?;
    let lines = model.lines();
    run_until_exit(model, Integrator::new(model, cfg, replica), start.clone(), &lines, cfg)
}

/// Exits and right-censored horizons of a batch of replicas.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExitBatch {
    pub exits: Vec<ExitRecord>,
    /// Elapsed time of replicas that hit the horizon.
    pub censored: Vec<f64>,
    /// `(replica, line, exit time or elapsed time, censored)` in replica order.
    pub rows: Vec<(u64, Option<usize>, f64, bool)>,
}

impl ExitBatch {
    pub fn exit_times(&self) -> Vec<f64> {
        self.exits.iter().map(|e| e.exit_time).collect()
    }

    pub fn rate(&self, confidence: f64) -> RateSample {
        estimate_rate(&self.exit_times(), &self.censored, confidence)
    }

    fn collect(results: Vec<(u64, Result<ExitRecord>)>) -> Result<Self> {
        let mut b = ExitBatch::default();
        for (r, res) in results {
            match res {
                Ok(e) => {
                    b.rows.push((r, Some(e.line), e.exit_time, false));
                    b.exits.push(e);
                }
                Err(GridError::Timeout { elapsed }) => {
                    b.rows.push((r, None, elapsed, true));
                    b.censored.push(elapsed);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(b)
    }
}

/// `n` unconditional replicas in parallel; replica `i` uses stream `i`.
pub fn run_unconditional<M: EnergyModel + ?Sized>(
    model: &M,
    start: &DVector<f64>,
    line: usize,
    cfg: &SimConfig,
    n: usize,
) -> Result<ExitBatch> {
    let results: Vec<(u64, Result<ExitRecord>)> = (0..n as u64)
        .into_par_iter()
        .map(|r| (r, simulate_unconditional(model, start, line, cfg, r)))
        .collect();
    ExitBatch::collect(results)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSample {
    pub n_exits: usize,
    pub total_time: f64,
    pub rate: f64,
    pub ci: (f64, f64),
    /// No exits were observed, so only an upper rate bound is meaningful.
    pub censored_only: bool,
}

/// Exponential MLE with right censoring: exits over total observed time,
/// with the chi-square confidence interval.
pub fn estimate_rate(exit_times: &[f64], censored: &[f64], confidence: f64) -> RateSample {
    let n = exit_times.len();
    let total_time: f64 = exit_times.iter().chain(censored).sum();
    let alpha = 1.0 - confidence;
    let chi = |k: f64, p: f64| ChiSquared::new(k).expect("positive dof").inverse_cdf(p);
    let hi = chi(2.0 * n as f64 + 2.0, 1.0 - alpha / 2.0) / (2.0 * total_time);
    if n == 0 {
        return RateSample {
            n_exits: 0,
            total_time,
            rate: 0.0,
            ci: (0.0, hi),
            censored_only: true,
        };
    }
    let lo = chi(2.0 * n as f64, alpha / 2.0) / (2.0 * total_time);
    RateSample {
        n_exits: n,
        total_time,
        rate: n as f64 / total_time,
        ci: (lo, hi),
        censored_only: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub p: f64,
    pub empirical: f64,
    pub model: f64,
}

/// Probability levels 0.05, 0.10, ..., 0.95.
pub fn quantile_levels() -> Vec<f64> {
    (1..20).map(|i| i as f64 / 20.0).collect()
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean absolute log ratio between empirical quantiles and those of the
/// exponential fitted by [`estimate_rate`]. Censored samples count as
/// larger than every exit; levels whose empirical quantile is censored are
/// skipped.
pub fn quantile_delta(exit_times: &[f64], censored: &[f64]) -> (f64, Vec<QuantileRow>) {
    let fit = estimate_rate(exit_times, censored, 0.95);
    if fit.n_exits == 0 {
        return (f64::NAN, Vec::new());
    }
    let mut all: Vec<f64> = exit_times.to_vec();
    all.extend(std::iter::repeat_n(f64::INFINITY, censored.len()));
    all.sort_by(f64::total_cmp);
    let rows: Vec<QuantileRow> = quantile_levels()
        .into_iter()
        .map(|p| QuantileRow {
            p,
            empirical: quantile_sorted(&all, p),
            model: -(1.0 - p).ln() / fit.rate,
        })
        .filter(|r| r.empirical.is_finite())
        .collect();
    let delta = rows.iter().map(|r| (r.empirical / r.model).ln().abs()).sum::<f64>() / rows.len() as f64;
    (delta, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub delta_bar: f64,
    pub quantiles: Vec<QuantileRow>,
    pub rate: RateSample,
    pub batch: ExitBatch,
}

/// Replicas from `start` with momenta redrawn from `N(0, tau / m)`, each run
/// to the first failure of any line.
pub fn equilibration_ensemble<M: EnergyModel + ?Sized>(
    model: &M,
    start: &DVector<f64>,
    cfg: &SimConfig,
    n: usize,
) -> Result<EnsembleReport> {
    cfg.validate()?;
    if n < 10 {
        return Err(GridError::Domain("an ensemble needs at least 10 replicas".into()));
    }
    let lines = model.lines();
    let results: Vec<(u64, Result<ExitRecord>)> = (0..n as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(cfg.seed, r);
            let mut x = start.clone();
            for (slot, mass) in model.momentum_slots() {
                let sd = (cfg.tau / mass).sqrt();
                x[slot] = Normal::new(0.0, sd).expect("finite sd").sample(&mut rng);
            }
            let it = Integrator::with_rng(model, cfg, rng);
            (r, run_until_exit(model, it, x, &lines, cfg))
        })
        .collect();
    let batch = ExitBatch::collect(results)?;
    let (delta_bar, quantiles) = quantile_delta(&batch.exit_times(), &batch.censored);
    Ok(EnsembleReport {
        delta_bar,
        quantiles,
        rate: batch.rate(0.95),
        batch,
    })
}

/// Histogram window of one slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub slot: usize,
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Window {
    fn bin(&self, v: f64) -> Option<usize> {
        if v < self.lo || v >= self.hi {
            return None;
        }
        Some((((v - self.lo) / (self.hi - self.lo)) * self.bins as f64) as usize).map(|b| b.min(self.bins - 1))
    }
}

/// Windows `center +- half_width sigma` with `sigma^2 = tau [Hess H(center)^{-1}]_ii`.
pub fn gibbs_windows<M: EnergyModel + ?Sized>(
    model: &M,
    center: &DVector<f64>,
    tau: f64,
    slots: &[usize],
    half_width: f64,
    bins: usize,
) -> Result<Vec<Window>> {
    let cov = model
        .hessian(center)
        .try_inverse()
        .ok_or_else(|| GridError::Domain("singular Hessian at the center".into()))?;
    Ok(slots
        .iter()
        .map(|&s| {
            let sd = (tau * cov[(s, s)]).sqrt();
            Window {
                slot: s,
                lo: center[s] - half_width * sd,
                hi: center[s] + half_width * sd,
                bins,
            }
        })
        .collect())
}

/// Bin probabilities of the Gibbs marginals `exp(-H / tau) / Z` by tensor
/// midpoint quadrature over `center +- 6 sigma` in the integrated slots.
pub fn gibbs_marginals<M: EnergyModel + ?Sized>(
    model: &M,
    center: &DVector<f64>,
    tau: f64,
    windows: &[Window],
) -> Result<Vec<Vec<f64>>> {
    let d = model.dim();
    if d > 7 {
        return Err(GridError::Domain("tensor quadrature is limited to d <= 7".into()));
    }
    let cov = model
        .hessian(center)
        .try_inverse()
        .ok_or_else(|| GridError::Domain("singular Hessian at the center".into()))?;
    let h0 = model.energy(center);
    let sub = 4usize;
    windows
        .par_iter()
        .map(|w| {
            let axis_pts = w.bins * sub;
            let budget = 4e6 / axis_pts as f64;
            let m = if d > 1 {
                (budget.powf(1.0 / (d - 1) as f64).floor() as usize).clamp(5, 401)
            } else {
                1
            };
            let others: Vec<usize> = (0..d).filter(|&j| j != w.slot).collect();
            let grids: Vec<Vec<f64>> = others
                .iter()
                .map(|&j| {
                    let sd = (tau * cov[(j, j)]).sqrt();
                    let (lo, hi) = (center[j] - 6.0 * sd, center[j] + 6.0 * sd);
                    (0..m).map(|i| lo + (i as f64 + 0.5) * (hi - lo) / m as f64).collect()
                })
                .collect();
            let mut probs = vec![0.0; w.bins];
            let mut x = center.clone();
            let total = m.pow(others.len() as u32);
            for a in 0..axis_pts {
                x[w.slot] = w.lo + (a as f64 + 0.5) * (w.hi - w.lo) / axis_pts as f64;
                let mut acc = 0.0;
                for code in 0..total {
                    let mut c = code;
                    for (k, &j) in others.iter().enumerate() {
                        x[j] = grids[k][c % m];
                        c /= m;
                    }
                    if model.in_domain(&x) {
                        acc += (-(model.energy(&x) - h0) / tau).exp();
                    }
                }
                probs[a / sub] += acc;
            }
            let z: f64 = probs.iter().sum();
            Ok(probs.into_iter().map(|p| p / z).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotDivergence {
    pub slot: usize,
    pub tv: f64,
    pub empirical: Vec<f64>,
    pub analytic: Vec<f64>,
    pub samples: usize,
}

/// Long-run histogram of `windows` slots from one trajectory.
pub fn trajectory_histograms<M: EnergyModel + ?Sized>(
    model: &M,
    start: &DVector<f64>,
    cfg: &SimConfig,
    windows: &[Window],
    burn_in: usize,
    n_steps: usize,
    replica: u64,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mut it = Integrator::new(model, cfg, replica);
    let mut x = start.clone();
    for _ in 0..burn_in {
        it.step(&mut x)?;
    }
    let mut counts: Vec<Vec<f64>> = windows.iter().map(|w| vec![0.0; w.bins]).collect();
    for i in 0..n_steps {
        it.step(&mut x)?;
        if i % cfg.record_stride == 0 {
            for (c, w) in counts.iter_mut().zip(windows) {
                if let Some(b) = w.bin(x[w.slot]) {
                    c[b] += 1.0;
                }
            }
        }
    }
    for c in &mut counts {
        let n: f64 = c.iter().sum();
        if n > 0.0 {
            c.iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(counts)
}

/// Total-variation distance between discrete distributions on the same bins.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Compare long-run histograms of `slots` with quadrature Gibbs marginals.
pub fn gibbs_check<M: EnergyModel + ?Sized>(
    model: &M,
    center: &DVector<f64>,
    cfg: &SimConfig,
    slots: &[usize],
    burn_in: usize,
    n_steps: usize,
) -> Result<Vec<SlotDivergence>> {
    let windows = gibbs_windows(model, center, cfg.tau, slots, 5.0, 30)?;
    let analytic = gibbs_marginals(model, center, cfg.tau, &windows)?;
    let empirical = trajectory_histograms(model, center, cfg, &windows, burn_in, n_steps, 0)?;
    let samples = n_steps / cfg.record_stride;
    Ok(windows
        .iter()
        .zip(analytic)
        .zip(empirical)
        .map(|((w, a), e)| SlotDivergence {
            slot: w.slot,
            tv: total_variation(&e, &a),
            empirical: e,
            analytic: a,
            samples,
        })
        .collect())
}

/// Sample mean and variance of one slot along a trajectory after `burn_in`.
pub fn slot_moments<M: EnergyModel + ?Sized>(
    model: &M,
    start: &DVector<f64>,
    cfg: &SimConfig,
    slot: usize,
    burn_in: usize,
    n_steps: usize,
    replica: u64,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    let mut it = Integrator::new(model, cfg, replica);
    let mut x = start.clone();
    for _ in 0..burn_in {
        it.step(&mut x)?;
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..n_steps {
        it.step(&mut x)?;
        s1 += x[slot];
        s2 += x[slot] * x[slot];
    }
    let n = n_steps as f64;
    let mean = s1 / n;
    Ok((mean, s2 / n - mean * mean))
}

/// Standard error of the mean of correlated values from `n_batches` batch means.
pub fn batch_means_se(values: &[f64], n_batches: usize) -> f64 {
    let size = values.len() / n_batches;
    let means: Vec<f64> = values.chunks(size).take(n_batches).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let mu = means.iter().sum::<f64>() / means.len() as f64;
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
    (var / means.len() as f64).sqrt()
}
