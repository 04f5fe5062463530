//! Grid case description and the parameter bundle consumed by the energy model.
//!
//! Two input formats are accepted: a native JSON schema mirroring [`GridCase`]
//! and the numeric-matrix subset of Matpower case files. Both end in the same
//! validation pass.

mod matpower;
mod params;

use std::collections::{HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};

pub use matpower::parse_matpower;
pub use params::{build_params, degrade, params_matrix, susceptance_matrix, Dynamics, LineParams, NetworkParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Generator,
    Load,
}

/// Bus record. Demands are in per-unit on `base_mva`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    pub pd: f64,
    pub qd: f64,
    /// Voltage setpoint, required on slack and generator buses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vspec: Option<f64>,
}

/// Lossless branch. `rate_a` is a squared current magnitude in per-unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub id: usize,
    pub from_bus: usize,
    pub to_bus: usize,
    pub b: f64,
    pub rate_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub bus: usize,
    pub pg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCase {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub slack_angle: f64,
}

/// Parse either native JSON or the Matpower subset, then validate.
pub fn parse_case(text: &str) -> Result<GridCase> {
    let case = if text.trim_start().starts_with('{') {
        serde_json::from_str::<GridCase>(text).map_err(|e| GridError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?
    } else {
        parse_matpower(text)?
    };
    case.validate()?;
    Ok(case)
}

impl GridCase {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serializes")
    }

    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn branch_index(&self, id: usize) -> Option<usize> {
        self.branches.iter().position(|b| b.id == id)
    }

    pub fn count(&self, kind: BusKind) -> usize {
        self.buses.iter().filter(|b| b.kind == kind).count()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GridError::Validation(m));
        if !(self.base_mva > 0.0) {
            return bad("base_mva must be positive".into());
        }
        if self.buses.is_empty() {
            return bad("case has no buses".into());
        }
        if self.branches.is_empty() {
            return bad("case has no branches".into());
        }
        let mut index = HashMap::new();
        for (i, bus) in self.buses.iter().enumerate() {
            if index.insert(bus.id, i).is_some() {
                return bad(format!("duplicate bus id {}", bus.id));
            }
            if !bus.pd.is_finite() || !bus.qd.is_finite() {
                return bad(format!("bus {} has non-finite demand", bus.id));
            }
            if bus.kind != BusKind::Load {
                match bus.vspec {
                    Some(v) if v > 0.0 && v.is_finite() => {}
                    _ => return bad(format!("bus {} needs a positive voltage setpoint", bus.id)),
                }
            }
        }
        let slacks: Vec<_> = self.buses.iter().filter(|b| b.kind == BusKind::Slack).collect();
        match slacks.len() {
            0 => return bad("missing slack bus".into()),
            1 => {}
            n => return bad(format!("{n} slack buses, expected exactly one")),
        }
        let hosted: HashSet<usize> = self.generators.iter().map(|g| g.bus).collect();
        if !hosted.contains(&slacks[0].id) {
            return bad(format!("slack bus {} hosts no generator", slacks[0].id));
        }
        for g in &self.generators {
            if !index.contains_key(&g.bus) {
                return bad(format!("generator at unknown bus {}", g.bus));
            }
        }
        let mut branch_ids = HashSet::new();
        for br in &self.branches {
            if !branch_ids.insert(br.id) {
                return bad(format!("duplicate branch id {}", br.id));
            }
            if !index.contains_key(&br.from_bus) || !index.contains_key(&br.to_bus) {
                return bad(format!("branch {} references an unknown bus", br.id));
            }
            if br.from_bus == br.to_bus {
                return bad(format!("branch {} is a self-loop", br.id));
            }
            if !(br.b > 0.0 && br.b.is_finite()) {
                return bad(format!("branch {} needs positive susceptance", br.id));
            }
            if !(br.rate_a > 0.0 && br.rate_a.is_finite()) {
                return bad(format!("branch {} needs a positive finite rating", br.id));
            }
        }
        let edges: Vec<(usize, usize)> = self
            .branches
            .iter()
            .map(|br| (index[&br.from_bus], index[&br.to_bus]))
            .collect();
        let reach = reachable(self.buses.len(), &edges, index[&slacks[0].id]);
        if let Some(i) = reach.iter().position(|r| !r) {
            return bad(format!("bus {} is disconnected from the slack", self.buses[i].id));
        }
        Ok(())
    }
}

/// Breadth-first reachability over an undirected edge list.
pub fn reachable(n: usize, edges: &[(usize, usize)], root: usize) -> Vec<bool> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([root]);
    seen[root] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn json_round_trip_is_exact() {
        let case = fixtures::slack_gen_load();
        let text = case.to_json();
        let back = parse_case(&text).unwrap();
        assert_eq!(back, case);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn rejects_structural_problems() {
        let mut c = fixtures::slack_gen_load();
        c.branches.clear();
        assert!(matches!(c.validate(), Err(GridError::Validation(_))));

        let mut c = fixtures::slack_gen_load();
        c.buses[2].id = c.buses[1].id;
        assert!(c.validate().is_err());

        let mut c = fixtures::slack_gen_load();
        c.buses[0].kind = BusKind::Generator;
        assert!(c.validate().unwrap_err().to_string().contains("slack"));

        let mut c = fixtures::slack_gen_load();
        c.branches.retain(|b| b.from_bus != 3 && b.to_bus != 3);
        assert!(c.validate().unwrap_err().to_string().contains("disconnected"));
    }

    #[test]
    fn json_errors_carry_position() {
        let err = parse_case("{\n  \"base_mva\": 100,\n  \"buses\": [oops]\n}").unwrap_err();
        match err {
            GridError::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert!(column > 0);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&fixtures::slack_gen_load().to_json()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(parse_case(&v.to_string()).is_err());
    }
}
