//! Cascades, generations and the generations-per-cascade power law (SEPSI).
//!
//! Outages closer than the cascade bandwidth belong to one cascade; inside a
//! cascade, outages closer than the generation bandwidth form one generation.
//! The number of generations per cascade is fitted to a truncated Zipf law
//! `p_g ~ g^-s`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};
use crate::kmc::{CascadeTrace, FailureDag};

pub const CASCADE_BANDWIDTH: f64 = 3600.0;
pub const GENERATION_BANDWIDTH: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Kmc,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageEvent {
    /// Seconds.
    pub timestamp: f64,
    pub line: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageLog {
    pub events: Vec<OutageEvent>,
    pub source: Source,
}

impl OutageLog {
    /// Sorts by timestamp (stably) if needed; returns whether it had to.
    pub fn new(mut events: Vec<OutageEvent>, source: Source) -> (Self, bool) {
        let sorted = events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp);
        if !sorted {
            events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        }
        (OutageLog { events, source }, !sorted)
    }

    /// Events of one cascade run, with external line ids.
    pub fn from_trace(dag: &FailureDag, trace: &CascadeTrace) -> Self {
        let events = trace
            .events
            .iter()
            .map(|e| OutageEvent {
                timestamp: e.time,
                line: dag.line_label(e.line).to_string(),
            })
            .collect();
        OutageLog {
            events,
            source: Source::Kmc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cascade {
    pub generations: Vec<Vec<OutageEvent>>,
}

impl Cascade {
    pub fn n_generations(&self) -> usize {
        self.generations.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeSet {
    pub cascades: Vec<Cascade>,
    pub cascade_bandwidth: f64,
    pub generation_bandwidth: f64,
}

impl CascadeSet {
    pub fn generation_counts(&self) -> Vec<usize> {
        self.cascades.iter().map(Cascade::n_generations).collect()
    }

    pub fn total_generations(&self) -> usize {
        self.cascades.iter().map(Cascade::n_generations).sum()
    }

    /// Pool the cascades of independent logs; bandwidths must agree.
    pub fn merge(sets: Vec<CascadeSet>) -> Result<CascadeSet> {
        let mut it = sets.into_iter();
        let Some(mut out) = it.next() else {
            return Ok(CascadeSet {
                cascades: Vec::new(),
                cascade_bandwidth: CASCADE_BANDWIDTH,
                generation_bandwidth: GENERATION_BANDWIDTH,
            });
        };
        for s in it {
            if s.cascade_bandwidth != out.cascade_bandwidth || s.generation_bandwidth != out.generation_bandwidth {
                return Err(GridError::Domain("cannot merge cascade sets with different bandwidths".into()));
            }
            out.cascades.extend(s.cascades);
        }
        Ok(out)
    }
}

/// Split at gaps strictly larger than `cb` into cascades and at gaps larger
/// than `gb` into generations.
pub fn group_cascades(log: &OutageLog, cb: f64, gb: f64) -> Result<CascadeSet> {
    if !(cb >= 0.0 && gb >= 0.0) {
        return Err(GridError::Domain(format!("bandwidths must be non-negative, got {cb} and {gb}")));
    }
    if log.events.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
        return Err(GridError::Domain("outage log is not sorted by time".into()));
    }
    let mut cascades: Vec<Cascade> = Vec::new();
    let mut prev: Option<f64> = None;
    for e in &log.events {
        let gap = prev.map(|t| e.timestamp - t);
        match gap {
            Some(g) if g <= cb => {
                let c = cascades.last_mut().expect("open cascade");
                if g > gb {
                    c.generations.push(vec![e.clone()]);
                } else {
                    c.generations.last_mut().expect("open generation").push(e.clone());
                }
            }
            _ => cascades.push(Cascade {
                generations: vec![vec![e.clone()]],
            }),
        }
        prev = Some(e.timestamp);
    }
    Ok(CascadeSet {
        cascades,
        cascade_bandwidth: cb,
        generation_bandwidth: gb,
    })
}

/// Group each log separately and pool the cascades.
pub fn group_runs(logs: &[OutageLog], cb: f64, gb: f64) -> Result<CascadeSet> {
    let sets = logs.iter().map(|l| group_cascades(l, cb, gb)).collect::<Result<Vec<_>>>()?;
    let mut out = CascadeSet::merge(sets)?;
    out.cascade_bandwidth = cb;
    out.generation_bandwidth = gb;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SepsiOptions {
    pub g_min: usize,
    pub g_max: usize,
    /// Fit an untruncated zeta law with cascades beyond `g_max` as one
    /// censored tail bin, instead of dropping them.
    pub censored: bool,
}

impl Default for SepsiOptions {
    fn default() -> Self {
        SepsiOptions {
            g_min: 1,
            g_max: 9,
            censored: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SepsiRow {
    pub g: usize,
    pub count: usize,
    /// Empirical frequency over the fitted support.
    pub p: f64,
    pub p_hat: f64,
    /// `ln(p / p_hat)`; absent for empty bins.
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SepsiEstimate {
    pub s: f64,
    /// Cascades entering the likelihood.
    pub n_cascades: usize,
    pub n_excluded: usize,
    pub support_min: usize,
    pub support_max: usize,
    pub censored: bool,
    pub log_likelihood: f64,
    /// `(g, count)` over every observed generation count.
    pub histogram: Vec<(usize, usize)>,
    pub rows: Vec<SepsiRow>,
}

/// Hurwitz zeta `sum_{k >= 0} (k + a)^-s` for `s > 1`, `a > 0`, by
/// Euler-Maclaurin summation.
pub fn hurwitz_zeta(s: f64, a: f64) -> f64 {
    const B2K: [f64; 6] = [
        1.0 / 6.0,
        -1.0 / 30.0,
        1.0 / 42.0,
        -1.0 / 30.0,
        5.0 / 66.0,
        -691.0 / 2730.0,
    ];
    let n = 12.0;
    let mut sum: f64 = (0..12).map(|k| (a + k as f64).powf(-s)).sum();
    let x = a + n;
    sum += x.powf(1.0 - s) / (s - 1.0) + 0.5 * x.powf(-s);
    // term j: B_2j / (2j)! * s (s+1) ... (s+2j-2) * x^(-s-2j+1)
    let mut rising = s;
    let mut fact = 2.0;
    let mut xpow = x.powf(-s - 1.0);
    for (j, b) in B2K.iter().enumerate() {
        sum += b / fact * rising * xpow;
        let k = 2 * j + 2;
        rising *= (s + k as f64 - 1.0) * (s + k as f64);
        fact *= ((k + 1) * (k + 2)) as f64;
        xpow /= x * x;
    }
    sum
}

/// Root of a decreasing function `d` on `(lo_limit, inf)`, Newton steps
/// safeguarded by a bracket. `d2` is its derivative.
fn decreasing_root(d: impl Fn(f64) -> f64, d2: impl Fn(f64) -> f64, s0: f64, lo_limit: f64) -> Result<f64> {
    let (mut lo, mut hi) = (s0, s0);
    let mut width = 1.0;
    while d(lo) <= 0.0 {
        lo = if lo_limit.is_finite() {
            lo_limit + 0.5 * (lo - lo_limit)
        } else {
            s0 - width
        };
        width *= 2.0;
        if lo - lo_limit < 1e-12 || width > 1e6 {
            return Err(GridError::Degenerate("likelihood has no interior maximum".into()));
        }
    }
    width = 1.0;
    while d(hi) >= 0.0 {
        hi = s0 + width;
        width *= 2.0;
        if width > 1e6 {
            return Err(GridError::Degenerate("likelihood increases without bound".into()));
        }
    }
    let mut s = s0.clamp(lo, hi);
    for _ in 0..200 {
        let v = d(s);
        if v > 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        let slope = d2(s);
        let mut next = s - v / slope;
        if !(slope < 0.0) || !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - s).abs() <= 1e-13 * (1.0 + s.abs()) || hi - lo <= 1e-13 * (1.0 + s.abs()) {
            return Ok(next);
        }
        s = next;
    }
    Ok(s)
}

/// Truncated Zipf pmf on `g_min..=g_max`.
pub fn zipf_pmf(s: f64, g_min: usize, g_max: usize) -> Vec<f64> {
    let w: Vec<f64> = (g_min..=g_max).map(|g| (g as f64).powf(-s)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Maximum-likelihood SEPSI. Newton starts from `s = 2`.
pub fn estimate_sepsi(cs: &CascadeSet, opts: &SepsiOptions) -> Result<SepsiEstimate> {
    let (g_min, g_max) = (opts.g_min.max(1), opts.g_max);
    if g_max < g_min {
        return Err(GridError::Domain(format!("empty support {g_min}..={g_max}")));
    }
    let counts = cs.generation_counts();
    let mut histogram: Vec<(usize, usize)> = Vec::new();
    for &g in &counts {
        match histogram.iter_mut().find(|h| h.0 == g) {
            Some(h) => h.1 += 1,
            None => histogram.push((g, 1)),
        }
    }
    histogram.sort_unstable();
    let bins: Vec<usize> = (g_min..=g_max).map(|g| counts.iter().filter(|&&c| c == g).count()).collect();
    let tail = counts.iter().filter(|&&c| c > g_max).count();
    let below = counts.iter().filter(|&&c| c < g_min).count();
    let n_in: usize = bins.iter().sum();
    if n_in == 0 {
        return Err(GridError::Degenerate("no cascade within the fitted support".into()));
    }
    let occupied = bins.iter().filter(|&&n| n > 0).count();
    if !opts.censored && occupied < 2 {
        return Err(GridError::Degenerate("all fitted cascades share one generation count".into()));
    }
    if opts.censored && occupied < 2 && tail == 0 {
        return Err(GridError::Degenerate("all fitted cascades share one generation count".into()));
    }

    let logs: Vec<f64> = (g_min..=g_max).map(|g| (g as f64).ln()).collect();
    let sum_log: f64 = bins.iter().zip(&logs).map(|(&n, l)| n as f64 * l).sum();
    let n_f = n_in as f64;
    // moments of ln g under the truncated law
    let moments = |s: f64| {
        let w: Vec<f64> = logs.iter().map(|l| (-s * l).exp()).collect();
        let z: f64 = w.iter().sum();
        let m1: f64 = w.iter().zip(&logs).map(|(w, l)| w * l).sum::<f64>() / z;
        let m2: f64 = w.iter().zip(&logs).map(|(w, l)| w * l * l).sum::<f64>() / z;
        (z, m1, m2 - m1 * m1)
    };

    let (s, log_likelihood, p_hat) = if !opts.censored {
        let d = |s: f64| -sum_log + n_f * moments(s).1;
        let d2 = |s: f64| -n_f * moments(s).2;
        let s = decreasing_root(d, d2, 2.0, f64::NEG_INFINITY)?;
        let ll = -s * sum_log - n_f * moments(s).0.ln();
        (s, ll, zipf_pmf(s, g_min, g_max))
    } else {
        let nt = tail as f64;
        let ll = |s: f64| {
            let z = hurwitz_zeta(s, g_min as f64);
            let zt = hurwitz_zeta(s, (g_max + 1) as f64);
            let tail_term = if tail > 0 { nt * (zt / z).ln() } else { 0.0 };
            -s * sum_log - n_f * z.ln() + tail_term
        };
        let h = 1e-5;
        let d = |s: f64| (ll(s + h) - ll(s - h)) / (2.0 * h);
        let d2 = |s: f64| (ll(s + h) - 2.0 * ll(s) + ll(s - h)) / (h * h);
        let s = decreasing_root(d, d2, 2.0, 1.0 + 2.0 * h)?;
        let z = hurwitz_zeta(s, g_min as f64);
        let p: Vec<f64> = (g_min..=g_max).map(|g| (g as f64).powf(-s) / z).collect();
        (s, ll(s), p)
    };
    if !(s > 0.0) {
        return Err(GridError::Degenerate(format!("fitted slope {s:.3} is not a decaying power law")));
    }

    let n_fit = if opts.censored { n_in + tail } else { n_in };
    let rows = (g_min..=g_max)
        .zip(&bins)
        .zip(&p_hat)
        .map(|((g, &count), &ph)| {
            let p = count as f64 / n_fit as f64;
            SepsiRow {
                g,
                count,
                p,
                p_hat: ph,
                residual: (count > 0).then(|| (p / ph).ln()),
            }
        })
        .collect();
    Ok(SepsiEstimate {
        s,
        n_cascades: n_fit,
        n_excluded: below + if opts.censored { 0 } else { tail },
        support_min: g_min,
        support_max: g_max,
        censored: opts.censored,
        log_likelihood,
        histogram,
        rows,
    })
}

/// JSON-facing summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SepsiReport {
    pub s: f64,
    pub n_cascades: usize,
    pub histogram: Vec<(usize, usize)>,
    pub residuals: Vec<(usize, f64)>,
}

impl SepsiEstimate {
    pub fn report(&self) -> SepsiReport {
        SepsiReport {
            s: self.s,
            n_cascades: self.n_cascades,
            histogram: self.histogram.clone(),
            residuals: self.rows.iter().filter_map(|r| Some((r.g, r.residual?))).collect(),
        }
    }
}

/// Plot data `g,count,p,p_hat,residual`.
pub fn write_sepsi_csv<W: Write>(est: &SepsiEstimate, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| GridError::Io(std::io::Error::other(e));
    w.write_record(["g", "count", "p", "p_hat", "residual"]).map_err(io)?;
    for r in &est.rows {
        w.write_record([
            r.g.to_string(),
            r.count.to_string(),
            format!("{:.10e}", r.p),
            format!("{:.10e}", r.p_hat),
            r.residual.map_or(String::new(), |v| format!("{v:.10e}")),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ingested {
    pub log: OutageLog,
    /// Reinstatement rows read and discarded.
    pub dropped: usize,
    pub reordered: bool,
}

#[derive(Deserialize)]
struct Row {
    timestamp: String,
    line: String,
    status: String,
}

/// Read `timestamp,line,status` with timestamps in seconds and status `out`
/// or `in`. Errors name the data row, counted from 1.
pub fn ingest_outage_csv(text: &str) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| GridError::Csv {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let wanted = ["timestamp", "line", "status"];
    if headers.len() != 3 || headers.iter().zip(wanted).any(|(h, w)| !h.eq_ignore_ascii_case(w)) {
        return Err(GridError::Csv {
            row: 0,
            message: format!("expected header timestamp,line,status, got {}", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut events = Vec::new();
    let mut dropped = 0;
    for (i, rec) in rdr.deserialize::<Row>().enumerate() {
        let row = i + 1;
        let err = |message: String| GridError::Csv { row, message };
        let r = rec.map_err(|e| err(e.to_string()))?;
        let timestamp: f64 = r.timestamp.parse().map_err(|_| err(format!("bad timestamp {:?}", r.timestamp)))?;
        if !timestamp.is_finite() {
            return Err(err(format!("bad timestamp {:?}", r.timestamp)));
        }
        if r.line.is_empty() {
            return Err(err("empty line id".into()));
        }
        match r.status.to_ascii_lowercase().as_str() {
            "out" => events.push(OutageEvent { timestamp, line: r.line }),
            "in" => dropped += 1,
            other => return Err(err(format!("status must be out or in, got {other:?}"))),
        }
    }
    let (log, reordered) = OutageLog::new(events, Source::External);
    if reordered {
        log::warn!("outage timestamps were not sorted; sorted them");
    }
    Ok(Ingested { log, dropped, reordered })
}

/// Inverse of [`ingest_outage_csv`] for outage events.
pub fn write_outage_csv<W: Write>(log: &OutageLog, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| GridError::Io(std::io::Error::other(e));
    w.write_record(["timestamp", "line", "status"]).map_err(io)?;
    for e in &log.events {
        // shortest representation that parses back to the same f64
        w.write_record([format!("{:?}", e.timestamp), e.line.clone(), "out".into()]).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
