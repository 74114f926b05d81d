//! Power-system case ingestion and the DC shift-factor matrix.
//!
//! Cases are JSON documents:
//!
//! ```text
//! {
//!   "base_mva": 100,
//!   "buses":      [{"id": 1, "load_mean": 0.0, "slack": true}, ...],
//!   "branches":   [{"from": 1, "to": 2, "x": 0.1, "limit": 50.0}, ...],
//!   "generators": [{"bus": 1, "c1": 10, "c2": 0, "pmin": 0, "pmax": 100,
//!                   "ramp_up": 50, "ramp_down": 50}, ...]
//! }
//! ```
//!
//! A missing `limit` means the branch is unlimited. Buses are renumbered
//! internally in ascending order of their external id.

use std::collections::{HashMap, HashSet, VecDeque};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("reduced susceptance matrix is singular")]
    Singular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusRecord {
    /// External (case file) id.
    pub id: i64,
    pub load_mean: f64,
    pub is_slack: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchRecord {
    /// Internal bus index.
    pub from_bus: usize,
    pub to_bus: usize,
    pub reactance: f64,
    /// `None` is unlimited.
    pub flow_limit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenRecord {
    /// Internal bus index.
    pub bus: usize,
    pub cost_linear: f64,
    pub cost_quadratic: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub ramp_up: f64,
    pub ramp_down: f64,
}

/// A validated network. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub base_mva: f64,
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
    pub generators: Vec<GenRecord>,
    slack: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseFile {
    base_mva: f64,
    buses: Vec<BusEntry>,
    branches: Vec<BranchEntry>,
    generators: Vec<GenEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusEntry {
    id: i64,
    #[serde(default)]
    load_mean: f64,
    #[serde(default)]
    slack: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchEntry {
    from: i64,
    to: i64,
    x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    limit: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenEntry {
    bus: i64,
    c1: f64,
    #[serde(default)]
    c2: f64,
    pmin: f64,
    pmax: f64,
    ramp_up: f64,
    ramp_down: f64,
}

/// Parses and validates a JSON case file.
pub fn parse_case(text: &str) -> Result<Network, CaseError> {
    let file: CaseFile = serde_json::from_str(text).map_err(|e| CaseError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Network::from_case_file(file)
}

impl Network {
    fn from_case_file(file: CaseFile) -> Result<Self, CaseError> {
        let invalid = |msg: String| Err(CaseError::Validation(msg));

        if !(file.base_mva > 0.0) {
            return invalid(format!("base_mva must be positive, got {}", file.base_mva));
        }
        if file.buses.is_empty() {
            return invalid("case has no buses".into());
        }
        let mut bus_entries = file.buses;
        bus_entries.sort_by_key(|b| b.id);
        for pair in bus_entries.windows(2) {
            if pair[0].id == pair[1].id {
                return invalid(format!("duplicate bus id {}", pair[0].id));
            }
        }
        let index: HashMap<i64, usize> = bus_entries
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id, i))
            .collect();
        let resolve = |id: i64, what: &str| -> Result<usize, CaseError> {
            index
                .get(&id)
                .copied()
                .ok_or_else(|| CaseError::Validation(format!("{what} references nonexistent bus {id}")))
        };

        let marked: Vec<usize> = bus_entries
            .iter()
            .enumerate()
            .filter(|(_, b)| b.slack)
            .map(|(i, _)| i)
            .collect();
        let slack = match marked.as_slice() {
            [] => 0,
            [s] => *s,
            _ => return invalid(format!("{} buses marked as slack", marked.len())),
        };

        let mut buses = Vec::with_capacity(bus_entries.len());
        for (i, b) in bus_entries.iter().enumerate() {
            if !b.load_mean.is_finite() {
                return invalid(format!("bus {} has non-finite load", b.id));
            }
            buses.push(BusRecord {
                id: b.id,
                load_mean: b.load_mean,
                is_slack: i == slack,
            });
        }

        let mut branches = Vec::with_capacity(file.branches.len());
        for (k, br) in file.branches.iter().enumerate() {
            let from_bus = resolve(br.from, &format!("branch {}", k + 1))?;
            let to_bus = resolve(br.to, &format!("branch {}", k + 1))?;
            if from_bus == to_bus {
                return invalid(format!("branch {} connects bus {} to itself", k + 1, br.from));
            }
            if !(br.x > 0.0) || !br.x.is_finite() {
                return invalid(format!("branch {} reactance must be positive, got {}", k + 1, br.x));
            }
            if let Some(limit) = br.limit {
                if !(limit > 0.0) {
                    return invalid(format!("branch {} limit must be positive, got {limit}", k + 1));
                }
            }
            branches.push(BranchRecord {
                from_bus,
                to_bus,
                reactance: br.x,
                flow_limit: br.limit,
            });
        }

        if file.generators.is_empty() {
            return invalid("case has no generators".into());
        }
        let mut gen_buses = HashSet::new();
        let mut generators = Vec::with_capacity(file.generators.len());
        for (j, g) in file.generators.iter().enumerate() {
            let bus = resolve(g.bus, &format!("generator {}", j + 1))?;
            if !gen_buses.insert(bus) {
                return invalid(format!("bus {} hosts more than one generator", g.bus));
            }
            if g.pmin > g.pmax {
                return invalid(format!("generator {} has pmin > pmax", j + 1));
            }
            if g.ramp_up < 0.0 || g.ramp_down < 0.0 {
                return invalid(format!("generator {} has a negative ramp limit", j + 1));
            }
            if g.c2 < 0.0 {
                return invalid(format!("generator {} has negative quadratic cost", j + 1));
            }
            let values = [g.c1, g.c2, g.pmin, g.pmax, g.ramp_up, g.ramp_down];
            if values.iter().any(|v| !v.is_finite()) {
                return invalid(format!("generator {} has a non-finite field", j + 1));
            }
            generators.push(GenRecord {
                bus,
                cost_linear: g.c1,
                cost_quadratic: g.c2,
                p_min: g.pmin,
                p_max: g.pmax,
                ramp_up: g.ramp_up,
                ramp_down: g.ramp_down,
            });
        }

        let net = Network {
            base_mva: file.base_mva,
            buses,
            branches,
            generators,
            slack,
        };
        if !net.is_connected() {
            return invalid("network is not connected".into());
        }
        Ok(net)
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn n_generators(&self) -> usize {
        self.generators.len()
    }

    /// Internal index of the slack bus.
    pub fn slack(&self) -> usize {
        self.slack
    }

    /// Mean net load per bus, in internal order.
    pub fn load_means(&self) -> Vec<f64> {
        self.buses.iter().map(|b| b.load_mean).collect()
    }

    /// Indices of branches carrying a flow limit, in branch order.
    pub fn limited_branches(&self) -> Vec<usize> {
        self.branches
            .iter()
            .enumerate()
            .filter(|(_, b)| b.flow_limit.is_some())
            .map(|(k, _)| k)
            .collect()
    }

    /// Internal index for an external bus id.
    pub fn bus_index(&self, id: i64) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    fn is_connected(&self) -> bool {
        let n = self.n_buses();
        let mut adj = vec![Vec::new(); n];
        for br in &self.branches {
            adj[br.from_bus].push(br.to_bus);
            adj[br.to_bus].push(br.from_bus);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Renders the network back into the case-file format.
    pub fn render(&self) -> String {
        let file = CaseFile {
            base_mva: self.base_mva,
            buses: self
                .buses
                .iter()
                .map(|b| BusEntry {
                    id: b.id,
                    load_mean: b.load_mean,
                    slack: b.is_slack,
                })
                .collect(),
            branches: self
                .branches
                .iter()
                .map(|br| BranchEntry {
                    from: self.buses[br.from_bus].id,
                    to: self.buses[br.to_bus].id,
                    x: br.reactance,
                    limit: br.flow_limit,
                })
                .collect(),
            generators: self
                .generators
                .iter()
                .map(|g| GenEntry {
                    bus: self.buses[g.bus].id,
                    c1: g.cost_linear,
                    c2: g.cost_quadratic,
                    pmin: g.p_min,
                    pmax: g.p_max,
                    ramp_up: g.ramp_up,
                    ramp_down: g.ramp_down,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("case file serializes")
    }
}

/// Builds the shift-factor matrix `S` (branches x buses) so that line flows
/// equal `S (g - d)` for balanced injections. The slack column is zero.
pub fn build_ptdf(net: &Network) -> Result<DMatrix<f64>, CaseError> {
    let n = net.n_buses();
    let nb = net.n_branches();
    let slack = net.slack();

    // Reduced susceptance matrix over non-slack buses.
    let reduced: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let mut pos = vec![usize::MAX; n];
    for (r, &i) in reduced.iter().enumerate() {
        pos[i] = r;
    }
    let mut b_red = DMatrix::<f64>::zeros(n - 1, n - 1);
    for br in &net.branches {
        let y = 1.0 / br.reactance;
        let (f, t) = (pos[br.from_bus], pos[br.to_bus]);
        if f != usize::MAX {
            b_red[(f, f)] += y;
        }
        if t != usize::MAX {
            b_red[(t, t)] += y;
        }
        if f != usize::MAX && t != usize::MAX {
            b_red[(f, t)] -= y;
            b_red[(t, f)] -= y;
        }
    }

    let mut s = DMatrix::<f64>::zeros(nb, n);
    if n == 1 {
        return Ok(s);
    }
    let x_red = b_red.lu().try_inverse().ok_or(CaseError::Singular)?;
    if x_red.iter().any(|v| !v.is_finite()) {
        return Err(CaseError::Singular);
    }
    for (k, br) in net.branches.iter().enumerate() {
        let y = 1.0 / br.reactance;
        for (c, &bus) in reduced.iter().enumerate() {
            let from = if pos[br.from_bus] != usize::MAX {
                x_red[(pos[br.from_bus], c)]
            } else {
                0.0
            };
            let to = if pos[br.to_bus] != usize::MAX {
                x_red[(pos[br.to_bus], c)]
            } else {
                0.0
            };
            s[(k, bus)] = y * (from - to);
        }
    }
    Ok(s)
}
