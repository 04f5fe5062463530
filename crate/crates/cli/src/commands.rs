use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use log::info;
use serde::Serialize;

use gridesc::cascade_stats::{
    estimate_sepsi, group_runs, ingest_outage_csv, write_sepsi_csv, CascadeSet, OutageLog, SepsiOptions,
    CASCADE_BANDWIDTH, GENERATION_BANDWIDTH,
};
use gridesc::case_model::{build_params, parse_case, BusKind, Dynamics, GridCase, NetworkParams};
use gridesc::energy::{EnergyModel, GridModel};
use gridesc::equilibrium::{repair_equilibrium, EquilibriumOptions, Repaired};
use gridesc::exit_rate::{log_error, rate_constants};
use gridesc::failure_point::{solve_unconditional, NlpOptions};
use gridesc::kmc::{write_traces_csv, FailureDag, Terminal};
use gridesc::langevin::{quantile_delta, run_unconditional, SimConfig};
use gridesc::pathology::{scan_lines, write_pathology_csv, ScanOptions};

use crate::config::Resolver;
use crate::manifest::{sha256_hex, RunManifest};
use crate::{Command, SepsiFlags};

pub struct Context {
    pub seed: u64,
    pub out_dir: PathBuf,
}

pub struct Outcome {
    pub manifest: RunManifest,
    /// Exit nonzero.
    pub failed: bool,
}

/// Plain decimal inside `[1e-4, 1e6)`, shortest round-trip scientific
/// notation outside it.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-4..1e6).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

struct Output<'a> {
    dir: &'a Path,
    manifest: &'a mut RunManifest,
}

impl Output<'_> {
    /// Create `name` with the manifest comment line already written.
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let mut f = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        f.write_all(self.manifest.header().as_bytes())?;
        self.manifest.outputs.push(name.into());
        Ok(f)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.dir.join(name);
        let doc = serde_json::json!({ "manifest": self.manifest.id, "data": value });
        std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
        self.manifest.outputs.push(name.into());
        Ok(())
    }
}

fn load_case(path: &Path) -> Result<(GridCase, String)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let text = String::from_utf8(bytes.clone()).context("case file is not UTF-8")?;
    let case = parse_case(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok((case, sha256_hex(&bytes)))
}

fn operating_point(case: &GridCase, limit_scale: f64) -> Result<(NetworkParams, Repaired)> {
    let params = build_params(case, Dynamics::default(), limit_scale)?;
    let rep = repair_equilibrium(&params, None, &EquilibriumOptions::default())?;
    for r in &rep.eq.repair_log {
        info!("repair at bus {}: {:?} {}", r.bus, r.action, r.amount);
    }
    Ok((params, rep))
}

fn line_indices(params: &NetworkParams, model: &GridModel, ids: &[usize]) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Ok(model.lines());
    }
    ids.iter()
        .map(|&id| params.line_index(id).with_context(|| format!("no line with id {id}")))
        .collect()
}

pub fn dispatch(cmd: Command, ctx: &Context, res: &mut Resolver) -> Result<Outcome> {
    match cmd {
        Command::Parse { case } => cmd_parse(&case, ctx, res),
        Command::Equilibrium { case, limit_scale } => {
            let scale = res.get("limit_scale", limit_scale, 1.0)?;
            cmd_equilibrium(&case, scale, ctx, res)
        }
        Command::Rate {
            case,
            line,
            tau,
            simulate,
            dt,
            max_time,
            limit_scale,
        } => {
            let args = RateArgs {
                lines: res.get_list("line", line)?,
                taus: res.get_list("tau", tau)?,
                simulate: res.get("simulate", simulate, 0usize)?,
                dt: res.get("dt", dt, 1e-6)?,
                max_time: res.get("max_time", max_time, 10.0)?,
                limit_scale: res.get("limit_scale", limit_scale, 1.0)?,
            };
            cmd_rate(&case, &args, ctx, res)
        }
        Command::Scan {
            case,
            line,
            limit_scale,
            n_seeds,
        } => {
            let lines = res.get_list("line", line)?;
            let scale = res.get("limit_scale", limit_scale, 1.0)?;
            let n_seeds = res.get("n_seeds", n_seeds, 20usize)?;
            cmd_scan(&case, &lines, scale, n_seeds, ctx, res)
        }
        Command::Cascade {
            case,
            runs,
            t_max,
            tau,
            limit_scale,
            catalog,
            sepsi,
        } => {
            let args = CascadeArgs {
                runs: res.get("runs", runs, 100usize)?,
                t_max: res.get("t_max", t_max, 1e12)?,
                tau: res.get("tau", tau, 1e-3)?,
                limit_scale: res.get("limit_scale", limit_scale, 1.0)?,
                catalog: res.get_opt("catalog", catalog)?,
                sepsi: sepsi_settings(res, &sepsi)?,
            };
            cmd_cascade(&case, &args, ctx, res)
        }
        Command::Analyze { input, sepsi } => {
            let s = sepsi_settings(res, &sepsi)?;
            cmd_analyze(&input, &s, ctx, res)
        }
    }
}

struct SepsiSettings {
    cb: f64,
    gb: f64,
    opts: SepsiOptions,
}

fn sepsi_settings(res: &mut Resolver, f: &SepsiFlags) -> Result<SepsiSettings> {
    let d = SepsiOptions::default();
    Ok(SepsiSettings {
        cb: res.get("cascade_bandwidth", f.cascade_bandwidth, CASCADE_BANDWIDTH)?,
        gb: res.get("generation_bandwidth", f.generation_bandwidth, GENERATION_BANDWIDTH)?,
        opts: SepsiOptions {
            g_min: res.get("g_min", f.g_min, d.g_min)?,
            g_max: res.get("g_max", f.g_max, d.g_max)?,
            censored: res.get("censored", f.censored.then_some(true), d.censored)?,
        },
    })
}

fn cmd_parse(path: &Path, ctx: &Context, res: &mut Resolver) -> Result<Outcome> {
    let (case, hash) = load_case(path)?;
    let mut manifest = RunManifest::new("parse", &hash, &res.used, ctx.seed);
    let mut out = Output {
        dir: &ctx.out_dir,
        manifest: &mut manifest,
    };
    out.json("case.json", &case)?;
    println!(
        "{} buses ({} slack, {} generator, {} load), {} branches, {} generators",
        case.buses.len(),
        case.count(BusKind::Slack),
        case.count(BusKind::Generator),
        case.count(BusKind::Load),
        case.branches.len(),
        case.generators.len()
    );
    Ok(Outcome {
        manifest,
        failed: false,
    })
}

#[derive(Serialize)]
struct EquilibriumSummary {
    energy: f64,
    log_det_hess: f64,
    min_eigenvalue: f64,
    psd: bool,
    iterations: usize,
    residual: f64,
    repairs: Vec<gridesc::equilibrium::RepairAction>,
}

fn cmd_equilibrium(path: &Path, scale: f64, ctx: &Context, res: &mut Resolver) -> Result<Outcome> {
    let (case, hash) = load_case(path)?;
    let mut manifest = RunManifest::new("equilibrium", &hash, &res.used, ctx.seed);
    let (_, rep) = operating_point(&case, scale)?;
    let (m, eq) = (&rep.model, &rep.eq);
    let mut out = Output {
        dir: &ctx.out_dir,
        manifest: &mut manifest,
    };

    let mut f = out.create("equilibrium.csv")?;
    writeln!(f, "slot,label,value")?;
    for (i, v) in eq.x.iter().enumerate() {
        writeln!(f, "{i},{},{}", m.layout().slot_label(m.params(), i), num(*v))?;
    }
    f.flush()?;

    let mut f = out.create("loadings.csv")?;
    writeln!(f, "line,theta,theta_max,loading")?;
    for (l, load) in m.loadings(&eq.x) {
        let theta = m.line_value(&eq.x, l);
        writeln!(f, "{},{},{},{}", m.line_label(l), num(theta), num(m.theta_max(l)), num(load))?;
    }
    f.flush()?;

    out.json(
        "equilibrium.json",
        &EquilibriumSummary {
            energy: eq.energy,
            log_det_hess: eq.log_det_hess,
            min_eigenvalue: eq.min_eigenvalue,
            psd: eq.psd,
            iterations: eq.iterations,
            residual: eq.residual,
            repairs: eq.repair_log.clone(),
        },
    )?;
    println!("H(x) = {} after {} iterations, residual {:e}", num(eq.energy), eq.iterations, eq.residual);
    Ok(Outcome {
        manifest,
        failed: false,
    })
}

struct RateArgs {
    lines: Vec<usize>,
    taus: Vec<f64>,
    simulate: usize,
    dt: f64,
    max_time: f64,
    limit_scale: f64,
}

fn cmd_rate(path: &Path, a: &RateArgs, ctx: &Context, res: &mut Resolver) -> Result<Outcome> {
    if a.taus.is_empty() {
        bail!("rate needs at least one --tau");
    }
    let (case, hash) = load_case(path)?;
    let mut manifest = RunManifest::new("rate", &hash, &res.used, ctx.seed);
    let (params, rep) = operating_point(&case, a.limit_scale)?;
    let (m, eq) = (&rep.model, &rep.eq);
    let lines = line_indices(&params, m, &a.lines)?;

    let mut header = String::from("line,tau,dH,b_star,lambda0,lambda1,a1,a2,a3,status");
    if a.simulate > 0 {
        header.push_str(",lambda_sim,n_exits,delta,delta_bar");
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut n_ok = 0;
    let mut row_index = 0u64;
    for &l in &lines {
        let label = m.line_label(l);
        let solved = solve_unconditional(m, eq, l, None, &NlpOptions::default())
            .map_err(anyhow::Error::from)
            .and_then(|fp| {
                if !fp.is_solved() {
                    bail!("failure point not solved ({:?})", fp.status);
                }
                Ok((rate_constants(m, eq, &fp)?, fp))
            });
        for &tau in &a.taus {
            row_index += 1;
            let (rc, _fp) = match &solved {
                Ok(v) => v,
                Err(e) => {
                    let reason = format!("{e:#}").replace(',', ";");
                    rows.push(format!("{label},{},,,,,,,,error: {reason}", num(tau)));
                    failures.push(format!("line {label} tau {tau}: {e:#}"));
                    continue;
                }
            };
            if !(tau > 0.0 && tau.is_finite()) {
                rows.push(format!("{label},{},,,,,,,,error: temperature must be positive", num(tau)));
                failures.push(format!("line {label} tau {tau}: non-positive temperature"));
                continue;
            }
            let est = rc.estimate(tau);
            let ap = rc.applicability;
            let status = if ap.all() {
                "ok".to_string()
            } else {
                let bad: Vec<&str> = [("a1", ap.a1), ("a2", ap.a2), ("a3", ap.a3)]
                    .iter()
                    .filter(|(_, ok)| !ok)
                    .map(|(n, _)| *n)
                    .collect();
                format!("inapplicable: {}", bad.join(";"))
            };
            let mut row = format!(
                "{label},{},{},{},{},{},{},{},{},{status}",
                num(tau),
                num(est.delta_h),
                num(est.b_star),
                num(est.lambda0),
                num(est.lambda1),
                ap.a1,
                ap.a2,
                ap.a3
            );
            n_ok += 1;
            if a.simulate > 0 {
                let cfg = SimConfig {
                    tau,
                    dt: a.dt,
                    max_time: a.max_time,
                    seed: ctx.seed.wrapping_add(row_index),
                    record_stride: 1,
                };
                match run_unconditional(m, &eq.x, l, &cfg, a.simulate) {
                    Ok(b) => {
                        let rs = b.rate(0.95);
                        let (dbar, _) = quantile_delta(&b.exit_times(), &b.censored);
                        let delta = if rs.n_exits > 0 { log_error(rs.rate, est.lambda1) } else { f64::NAN };
                        let _ = write!(row, ",{},{},{},{}", num(rs.rate), rs.n_exits, num(delta), num(dbar));
                    }
                    Err(e) => {
                        row.push_str(",,,,");
                        failures.push(format!("line {label} tau {tau}: simulation: {e}"));
                    }
                }
            }
            rows.push(row);
        }
    }

    manifest.failures = failures;
    let mut out = Output {
        dir: &ctx.out_dir,
        manifest: &mut manifest,
    };
    let mut f = out.create("rate.csv")?;
    writeln!(f, "{header}")?;
    for r in &rows {
        writeln!(f, "{r}")?;
    }
    f.flush()?;
    println!("{} of {} rows computed", n_ok, rows.len());
    Ok(Outcome {
        manifest,
        failed: n_ok == 0,
    })
}

fn cmd_scan(
    path: &Path,
    ids: &[usize],
    scale: f64,
    n_seeds: usize,
    ctx: &Context,
    res: &mut Resolver,
) -> Result<Outcome> {
    let (case, hash) = load_case(path)?;
    let mut manifest = RunManifest::new("scan", &hash, &res.used, ctx.seed);
    let (params, rep) = operating_point(&case, scale)?;
    let (m, eq) = (&rep.model, &rep.eq);
    let lines = line_indices(&params, m, ids)?;
    let mut opts = ScanOptions::default();
    opts.isolation.n_seeds = n_seeds;
    opts.isolation.seed = ctx.seed;
    let reports = scan_lines(m, eq, &lines, &opts)?;
    manifest.failures = reports
        .iter()
        .filter(|r| !r.errors.is_empty())
        .map(|r| format!("line {}: {}", m.line_label(r.line), r.errors.join("; ")))
        .collect();
    let failed = !manifest.failures.is_empty();
    let mut out = Output {
        dir: &ctx.out_dir,
        manifest: &mut manifest,
    };
    let mut f = out.create("pathology.csv")?;
    write_pathology_csv(m, &reports, &mut f)?;
    f.flush()?;
    println!("scanned {} lines", reports.len());
    Ok(Outcome { manifest, failed })
}

struct CascadeArgs {
    runs: usize,
    t_max: f64,
    tau: f64,
    limit_scale: f64,
    catalog: Option<String>,
    sepsi: SepsiSettings,
}

#[derive(Serialize)]
struct SepsiSummary<T: Serialize> {
    n_runs: usize,
    terminals: std::collections::BTreeMap<String, usize>,
    cascade_bandwidth: f64,
    generation_bandwidth: f64,
    estimate: Option<T>,
    error: Option<String>,
}

fn write_sepsi(
    out: &mut Output<'_>,
    cs: &CascadeSet,
    s: &SepsiSettings,
    n_runs: usize,
    terminals: std::collections::BTreeMap<String, usize>,
) -> Result<()> {
    let est = estimate_sepsi(cs, &s.opts);
    let mut summary = SepsiSummary {
        n_runs,
        terminals,
        cascade_bandwidth: s.cb,
        generation_bandwidth: s.gb,
        estimate: None,
        error: None,
    };
    match est {
        Ok(e) => {
            let mut f = out.create("sepsi.csv")?;
            write_sepsi_csv(&e, &mut f)?;
            f.flush()?;
            println!("SEPSI exponent {} from {} cascades", num(e.s), e.n_cascades);
            summary.estimate = Some(e.report());
        }
        Err(e) => {
            println!("SEPSI not estimated: {e}");
            summary.error = Some(e.to_string());
        }
    }
    out.json("sepsi.json", &summary)
}

fn cmd_cascade(path: &Path, a: &CascadeArgs, ctx: &Context, res: &mut Resolver) -> Result<Outcome> {
    let (case, hash) = load_case(path)?;
    let mut manifest = RunManifest::new("cascade", &hash, &res.used, ctx.seed);
    let params = build_params(&case, Dynamics::default(), a.limit_scale)?;
    let dag = FailureDag::new(params, a.tau, &hash[..16])?;
    if let Some(p) = &a.catalog {
        if Path::new(p).exists() {
            let n = dag.load_catalog(File::open(p)?).with_context(|| format!("loading catalog {p}"))?;
            info!("loaded {n} catalog states from {p}");
        }
    }

    // A zero horizon admits no transition, so no run is started.
    let (traces, failures) = if a.t_max == 0.0 {
        (Vec::new(), Vec::new())
    } else {
        let b = dag.batch_cascades(a.t_max, ctx.seed, a.runs)?;
        (b.traces, b.failures)
    };
    manifest.failures = failures.iter().map(|(r, e)| format!("run {r}: {e}")).collect();
    let failed = !failures.is_empty();

    let mut terminals = std::collections::BTreeMap::new();
    for t in &traces {
        let kind = match &t.terminal {
            Terminal::AllFailed => "all_failed",
            Terminal::Collapsed { .. } => "collapsed",
            Terminal::Absorbing => "absorbing",
            Terminal::TimeExceeded => "time_exceeded",
        };
        *terminals.entry(kind.to_string()).or_insert(0) += 1;
    }

    let mut out = Output {
        dir: &ctx.out_dir,
        manifest: &mut manifest,
    };
    let mut f = out.create("traces.csv")?;
    write_traces_csv(&dag, &traces, &mut f)?;
    f.flush()?;

    let logs: Vec<OutageLog> = traces.iter().map(|t| OutageLog::from_trace(&dag, t)).collect();
    let cs = group_runs(&logs, a.sepsi.cb, a.sepsi.gb)?;
    write_sepsi(&mut out, &cs, &a.sepsi, traces.len(), terminals)?;

    if let Some(p) = &a.catalog {
        dag.save_catalog(BufWriter::new(File::create(p)?))?;
    }
    println!("{} traces, {} catalog states, {} solves", traces.len(), dag.node_count(), dag.nlp_solves());
    Ok(Outcome { manifest, failed })
}

fn cmd_analyze(path: &Path, s: &SepsiSettings, ctx: &Context, res: &mut Resolver) -> Result<Outcome> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let text = String::from_utf8(bytes.clone()).context("outage log is not UTF-8")?;
    let mut manifest = RunManifest::new("analyze", &sha256_hex(&bytes), &res.used, ctx.seed);
    let ing = ingest_outage_csv(&text)?;
    if ing.reordered {
        log::warn!("outage log was not sorted by time; events were reordered");
    }
    println!("{} outages, {} reinstatements dropped", ing.log.events.len(), ing.dropped);
    let cs = group_runs(std::slice::from_ref(&ing.log), s.cb, s.gb)?;
    let mut out = Output {
        dir: &ctx.out_dir,
        manifest: &mut manifest,
    };
    write_sepsi(&mut out, &cs, s, 1, Default::default())?;
    Ok(Outcome {
        manifest,
        failed: false,
    })
}
