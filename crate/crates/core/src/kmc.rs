//! Rejectionless kinetic Monte Carlo over the line-failure DAG.
//!
//! A node is a set of failed lines; its out-edges are single additional line
//! failures weighted by first-order exit rates. Nodes are expanded lazily and
//! memoized, so later cascades mostly read the catalog.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case_model::{degrade, Dynamics, NetworkParams};
use crate::energy::{EnergyModel, GridModel};
use crate::equilibrium::{repair_equilibrium, EquilibriumOptions, EquilibriumPoint, RepairAction};
use crate::error::{GridError, Result};
use crate::exit_rate::rate_constants;
use crate::failure_point::{solve_unconditional, NlpOptions};

/// Sorted failed line indices.
pub type StateKey = Vec<usize>;

pub const CATALOG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeStatus {
    Active,
    /// The line already sits at or above its limit at the state's operating
    /// point and fails next, without delay.
    Overloaded,
    /// Taken out of service by islanding or load shedding.
    Islanded,
    Infeasible,
    /// Noise does not act across the surface (`a3` fails).
    Inapplicable,
    SolverFailed,
    /// The state has no operating point.
    Collapsed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub line: usize,
    pub status: EdgeStatus,
    /// Log of the first-order rate; only active edges carry one.
    pub log_rate: Option<f64>,
    pub delta_h: Option<f64>,
    pub k: Option<f64>,
    /// Lines at their limit at the failure point.
    pub tripped: Vec<usize>,
    pub detail: Option<String>,
}

impl Edge {
    fn zero(line: usize, status: EdgeStatus, detail: Option<String>) -> Self {
        Edge {
            line,
            status,
            log_rate: None,
            delta_h: None,
            k: None,
            tripped: Vec::new(),
            detail,
        }
    }

    pub fn rate(&self) -> f64 {
        self.log_rate.map_or(0.0, f64::exp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub failed: StateKey,
    pub edges: Vec<Edge>,
    pub collapsed: Option<String>,
    pub repairs: Vec<RepairAction>,
}

impl Node {
    /// `ln sum_l lambda_l`, or `None` when every rate is zero.
    pub fn log_total_rate(&self) -> Option<f64> {
        log_sum_exp(self.edges.iter().filter_map(|e| e.log_rate))
    }

    /// Lowest-index line already over its limit.
    pub fn overloaded(&self) -> Option<usize> {
        self.edges.iter().find(|e| e.status == EdgeStatus::Overloaded).map(|e| e.line)
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> Option<f64> {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    (m > f64::NEG_INFINITY).then(|| m + xs.map(|x| (x - m).exp()).sum::<f64>().ln())
}

/// Draw the waiting time and the index of the firing edge.
pub fn sample_edge<R: Rng + ?Sized>(rng: &mut R, edges: &[Edge]) -> Option<(f64, usize)> {
    let logs = edges.iter().filter_map(|e| e.log_rate);
    let total = log_sum_exp(logs)?;
    let e: f64 = Exp1.sample(rng);
    let dt = (e.ln() - total).exp();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, edge) in edges.iter().enumerate() {
        if let Some(lr) = edge.log_rate {
            acc += (lr - total).exp();
            last = i;
            if u < acc {
                return Some((dt, i));
            }
        }
    }
    Some((dt, last))
}

struct Solved {
    model: Option<GridModel>,
    eq: Option<EquilibriumPoint>,
    repairs: Vec<RepairAction>,
    error: Option<String>,
}

pub struct FailureDag {
    base: NetworkParams,
    all_lines: Vec<usize>,
    tau: f64,
    case_id: String,
    eq_opts: EquilibriumOptions,
    nlp_opts: NlpOptions,
    nodes: RwLock<BTreeMap<StateKey, Arc<Node>>>,
    states: RwLock<BTreeMap<StateKey, Arc<Solved>>>,
    nlp_solves: AtomicUsize,
}

impl FailureDag {
    /// `case_id` identifies the network in saved catalogs.
    pub fn new(base: NetworkParams, tau: f64, case_id: impl Into<String>) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(GridError::Domain(format!("temperature must be positive, got {tau}")));
        }
        Ok(FailureDag {
            all_lines: base.active_lines(),
            base,
            tau,
            case_id: case_id.into(),
            eq_opts: EquilibriumOptions::default(),
            nlp_opts: NlpOptions::default(),
            nodes: RwLock::new(BTreeMap::new()),
            states: RwLock::new(BTreeMap::new()),
            nlp_solves: AtomicUsize::new(0),
        })
    }

    pub fn with_options(mut self, eq: EquilibriumOptions, nlp: NlpOptions) -> Self {
        self.eq_opts = eq;
        self.nlp_opts = nlp;
        self
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn base(&self) -> &NetworkParams {
        &self.base
    }

    pub fn all_lines(&self) -> &[usize] {
        &self.all_lines
    }

    pub fn nlp_solves(&self) -> usize {
        self.nlp_solves.load(Ordering::Relaxed)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.read().expect("catalog lock").len()
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.read().expect("catalog lock").values().map(|n| n.edges.len()).sum()
    }

    pub fn node(&self, key: &[usize]) -> Option<Arc<Node>> {
        self.nodes.read().expect("catalog lock").get(key).cloned()
    }

    pub fn line_label(&self, line: usize) -> usize {
        self.base.lines[line].id
    }

    fn check_key(&self, key: &[usize]) -> Result<()> {
        let sorted = key.windows(2).all(|w| w[0] < w[1]);
        if !sorted || key.iter().any(|l| self.all_lines.binary_search(l).is_err()) {
            return Err(GridError::Domain(format!("{key:?} is not a sorted set of in-service lines")));
        }
        Ok(())
    }

    /// Operating point of a state, warm-started from the state without its
    /// largest failed line so the result depends on the failed set alone.
    fn solve_state(&self, key: &[usize]) -> Arc<Solved> {
        if let Some(s) = self.states.read().expect("state lock").get(key) {
            return s.clone();
        }
        let parent = (!key.is_empty()).then(|| self.solve_state(&key[..key.len() - 1]));
        let params = degrade(&self.base, key);
        let init = parent
            .as_ref()
            .and_then(|p| Some((p.model.as_ref()?.layout(), &p.eq.as_ref()?.x)));
        let solved = match repair_equilibrium(&params, init, &self.eq_opts) {
            Ok(r) => Solved {
                repairs: r.eq.repair_log.clone(),
                model: Some(r.model),
                eq: Some(r.eq),
                error: None,
            },
            Err(e) => Solved {
                model: None,
                eq: None,
                repairs: Vec::new(),
                error: Some(e.to_string()),
            },
        };
        let solved = Arc::new(solved);
        self.states
            .write()
            .expect("state lock")
            .entry(key.to_vec())
            .or_insert(solved)
            .clone()
    }

    fn edge(&self, solved: &Solved, line: usize) -> Edge {
        let (Some(model), Some(eq)) = (&solved.model, &solved.eq) else {
            return Edge::zero(line, EdgeStatus::Collapsed, solved.error.clone());
        };
        if !model.lines().contains(&line) {
            return Edge::zero(line, EdgeStatus::Islanded, None);
        }
        if model.line_value(&eq.x, line) >= model.theta_max(line) - self.nlp_opts.trip_tol {
            return Edge::zero(line, EdgeStatus::Overloaded, None);
        }
        self.nlp_solves.fetch_add(1, Ordering::Relaxed);
        let fp = match solve_unconditional(model, eq, line, None, &self.nlp_opts) {
            Ok(fp) => fp,
            Err(e) => return Edge::zero(line, EdgeStatus::SolverFailed, Some(e.to_string())),
        };
        let mut edge = Edge {
            delta_h: Some(fp.delta_h),
            k: Some(fp.k),
            tripped: fp.tripped.clone(),
            ..Edge::zero(line, EdgeStatus::Infeasible, None)
        };
        if !fp.is_solved() {
            return edge;
        }
        match rate_constants(model, eq, &fp) {
            Ok(rc) if !rc.applicability.a3 => edge.status = EdgeStatus::Inapplicable,
            Ok(rc) => {
                edge.status = EdgeStatus::Active;
                edge.log_rate = Some(rc.estimate(self.tau).log_lambda1);
            }
            Err(e) => {
                edge.status = EdgeStatus::SolverFailed;
                edge.detail = Some(e.to_string());
            }
        }
        edge
    }

    /// Out-edges of `key`, computed once and then served from the catalog.
    pub fn expand_state(&self, key: &[usize]) -> Result<Arc<Node>> {
        self.check_key(key)?;
        if let Some(n) = self.node(key) {
            return Ok(n);
        }
        let solved = self.solve_state(key);
        let unfailed: Vec<usize> = self.all_lines.iter().copied().filter(|l| key.binary_search(l).is_err()).collect();
        let edges: Vec<Edge> = unfailed.par_iter().map(|&l| self.edge(&solved, l)).collect();
        let node = Arc::new(Node {
            failed: key.to_vec(),
            edges,
            collapsed: solved.error.clone(),
            repairs: solved.repairs.clone(),
        });
        Ok(self
            .nodes
            .write()
            .expect("catalog lock")
            .entry(key.to_vec())
            .or_insert(node)
            .clone())
    }

    /// Breadth-first expansion of every state reachable by single failures,
    /// zero-rate edges included. Stops after `max_nodes` nodes.
    pub fn expand_all(&self, max_nodes: usize) -> Result<usize> {
        let mut seen = BTreeSet::from([StateKey::new()]);
        let mut queue = VecDeque::from([StateKey::new()]);
        while let Some(key) = queue.pop_front() {
            if seen.len() > max_nodes {
                break;
            }
            let node = self.expand_state(&key)?;
            for e in &node.edges {
                let mut child = key.clone();
                child.push(e.line);
                child.sort_unstable();
                if seen.insert(child.clone()) {
                    queue.push_back(child);
                }
            }
        }
        Ok(self.node_count())
    }

    /// One cascade from the intact network. Runs are reproducible from
    /// `(seed, run)`.
    pub fn run_kmc(&self, t_max: f64, seed: u64, run: u64) -> Result<CascadeTrace> {
        if !(t_max > 0.0) {
            return Err(GridError::Domain(format!("horizon must be positive, got {t_max}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(run);
        let mut key = StateKey::new();
        let mut time = 0.0;
        let mut events = Vec::new();
        let terminal = loop {
            if key.len() == self.all_lines.len() {
                break Terminal::AllFailed;
            }
            let node = self.expand_state(&key)?;
            if let Some(reason) = &node.collapsed {
                break Terminal::Collapsed { reason: reason.clone() };
            }
            let (dt, line) = match node.overloaded() {
                Some(l) => (0.0, l),
                None => match sample_edge(&mut rng, &node.edges) {
                    Some((dt, i)) => (dt, node.edges[i].line),
                    None => break Terminal::Absorbing,
                },
            };
            if time + dt > t_max {
                break Terminal::TimeExceeded;
            }
            time += dt;
            events.push(CascadeEvent {
                time,
                line,
                state_before: key.clone(),
            });
            let pos = key.binary_search(&line).unwrap_err();
            key.insert(pos, line);
        };
        Ok(CascadeTrace {
            run,
            events,
            terminal,
            final_state: key,
        })
    }

    /// `n_runs` cascades in parallel over one shared catalog. Failed runs are
    /// logged and reported next to the successful traces.
    pub fn batch_cascades(&self, t_max: f64, seed: u64, n_runs: usize) -> Result<Batch> {
        if n_runs == 0 {
            return Err(GridError::Domain("a batch needs at least one run".into()));
        }
        let results: Vec<(u64, Result<CascadeTrace>)> = (0..n_runs as u64)
            .into_par_iter()
            .map(|r| (r, self.run_kmc(t_max, seed, r)))
            .collect();
        let mut batch = Batch::default();
        for (r, res) in results {
            match res {
                Ok(t) => batch.traces.push(t),
                Err(e) => {
                    log::warn!("cascade run {r} failed: {e}");
                    batch.failures.push((r, e.to_string()));
                }
            }
        }
        Ok(batch)
    }

    pub fn catalog(&self) -> Catalog {
        Catalog {
            version: CATALOG_VERSION,
            case_id: self.case_id.clone(),
            tau: self.tau,
            dynamics: self.base.dynamics,
            nodes: self.nodes.read().expect("catalog lock").values().map(|n| (**n).clone()).collect(),
        }
    }

    pub fn save_catalog<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, &self.catalog())?;
        Ok(())
    }

    /// Merge a saved catalog; it must come from the same case, temperature
    /// and dynamics. Returns the number of nodes added.
    pub fn load_catalog<R: Read>(&self, input: R) -> Result<usize> {
        let cat: Catalog = serde_json::from_reader(input)?;
        if cat.version != CATALOG_VERSION {
            return Err(GridError::Catalog(format!("version {} (expected {CATALOG_VERSION})", cat.version)));
        }
        if cat.case_id != self.case_id {
            return Err(GridError::Catalog(format!("case {} (expected {})", cat.case_id, self.case_id)));
        }
        if cat.tau != self.tau || cat.dynamics != self.base.dynamics {
            return Err(GridError::Catalog("temperature or dynamics differ".into()));
        }
        let mut nodes = self.nodes.write().expect("catalog lock");
        let before = nodes.len();
        for n in cat.nodes {
            self.check_key(&n.failed)?;
            nodes.entry(n.failed.clone()).or_insert_with(|| Arc::new(n));
        }
        Ok(nodes.len() - before)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub version: u32,
    pub case_id: String,
    pub tau: f64,
    pub dynamics: Dynamics,
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeEvent {
    /// Cumulative time in seconds.
    pub time: f64,
    pub line: usize,
    pub state_before: StateKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Terminal {
    /// Every line has failed.
    AllFailed,
    /// The current state has no operating point.
    Collapsed { reason: String },
    /// Every remaining rate is zero.
    Absorbing,
    TimeExceeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeTrace {
    pub run: u64,
    pub events: Vec<CascadeEvent>,
    pub terminal: Terminal,
    pub final_state: StateKey,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub traces: Vec<CascadeTrace>,
    pub failures: Vec<(u64, String)>,
}

fn join_ids(dag: &FailureDag, key: &[usize]) -> String {
    key.iter().map(|&l| dag.line_label(l).to_string()).collect::<Vec<_>>().join(";")
}

/// `run,seq,time_s,line,state_key` with external line ids; the state key is
/// the `;`-separated failed set before the event.
pub fn write_traces_csv<W: Write>(dag: &FailureDag, traces: &[CascadeTrace], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| GridError::Io(std::io::Error::other(e));
    w.write_record(["run", "seq", "time_s", "line", "state_key"]).map_err(io)?;
    for t in traces {
        for (seq, e) in t.events.iter().enumerate() {
            w.write_record([
                t.run.to_string(),
                seq.to_string(),
                format!("{:.10e}", e.time),
                dag.line_label(e.line).to_string(),
                join_ids(dag, &e.state_before),
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}
