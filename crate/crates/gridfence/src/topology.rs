//! Shared electrical/communication graph and the line-current sensor planner.
//!
//! The cyber and physical layers are assumed to share one topology: every tie
//! line carries a communication link and vice versa. Sensor planning secures a
//! spanning tree of that graph: cycles are broken one by one (preferring
//! removals that revisit already-sacrificed nodes so the unsecured node set
//! stays small), then each tree line gets a sensor at both ends and redundant
//! sensors are dropped where a node can recover one reading from its own
//! outgoing-current balance.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("node {0} is not part of the topology")]
    UnknownNode(u32),
    #[error("self-loop at node {0} is not allowed")]
    SelfLoop(u32),
    #[error("line ({0}, {1}) declared twice")]
    DuplicateLine(u32, u32),
    #[error("line ({0}, {1}) does not exist")]
    NoSuchLine(u32, u32),
    #[error("electrical graph is not connected")]
    Disconnected,
    #[error("communication and electrical layers differ at edge ({0}, {1})")]
    LayerMismatch(u32, u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineParams {
    /// Tie-line resistance R_ij [Ω].
    pub resistance: f64,
    /// Tie-line inductance [H]; carried through but ignored by the
    /// quasi-stationary line model.
    pub inductance: f64,
}

/// Undirected graph over DER nodes with an electrical layer (tie lines) and a
/// communication layer (consensus links + weights). Edge keys are normalized
/// to `(min, max)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MicrogridTopology {
    nodes: BTreeSet<u32>,
    lines: BTreeMap<(u32, u32), LineParams>,
    comm: BTreeMap<(u32, u32), f64>,
}

fn key(a: u32, b: u32) -> (u32, u32) {
    (a.min(b), a.max(b))
}

impl MicrogridTopology {
    pub fn new(nodes: impl IntoIterator<Item = u32>) -> Self {
        Self { nodes: nodes.into_iter().collect(), ..Default::default() }
    }

    pub fn nodes(&self) -> impl Iterator<Item = u32> + '_ {
        self.nodes.iter().copied()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains_node(&self, n: u32) -> bool {
        self.nodes.contains(&n)
    }

    /// Registers a node without any lines yet (plug-in events add the lines
    /// right after). Idempotent.
    pub fn add_node(&mut self, n: u32) {
        self.nodes.insert(n);
    }

    fn check_pair(&self, a: u32, b: u32) -> Result<(u32, u32), TopologyError> {
        if a == b {
            return Err(TopologyError::SelfLoop(a));
        }
        for n in [a, b] {
            if !self.nodes.contains(&n) {
                return Err(TopologyError::UnknownNode(n));
            }
        }
        Ok(key(a, b))
    }

    /// Adds a tie line together with its communication link.
    pub fn add_line(&mut self, a: u32, b: u32, params: LineParams, comm_weight: f64) -> Result<(), TopologyError> {
        let k = self.check_pair(a, b)?;
        if self.lines.contains_key(&k) {
            return Err(TopologyError::DuplicateLine(k.0, k.1));
        }
        self.lines.insert(k, params);
        self.comm.insert(k, comm_weight);
        Ok(())
    }

    /// Removes a tie line and its communication link (used by line-cut and
    /// plug-out style events).
    pub fn remove_line(&mut self, a: u32, b: u32) -> Result<(), TopologyError> {
        let k = self.check_pair(a, b)?;
        if self.lines.remove(&k).is_none() {
            return Err(TopologyError::NoSuchLine(k.0, k.1));
        }
        self.comm.remove(&k);
        Ok(())
    }

    pub fn has_line(&self, a: u32, b: u32) -> bool {
        self.lines.contains_key(&key(a, b))
    }

    pub fn line(&self, a: u32, b: u32) -> Option<&LineParams> {
        self.lines.get(&key(a, b))
    }

    pub fn comm_weight(&self, a: u32, b: u32) -> Option<f64> {
        self.comm.get(&key(a, b)).copied()
    }

    /// Line keys in ascending `(min, max)` order.
    pub fn line_keys(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.lines.keys().copied()
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    /// Electrical neighbors of `n`, ascending.
    pub fn neighbors(&self, n: u32) -> Vec<u32> {
        let mut out: Vec<u32> = self
            .lines
            .keys()
            .filter_map(|&(a, b)| if a == n { Some(b) } else if b == n { Some(a) } else { None })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn degree(&self, n: u32) -> usize {
        self.lines.keys().filter(|&&(a, b)| a == n || b == n).count()
    }

    /// Connectivity of the electrical layer over all declared nodes.
    pub fn is_connected(&self) -> bool {
        let Some(&start) = self.nodes.iter().next() else { return true };
        let mut seen = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for v in self.neighbors(u) {
                if seen.insert(v) {
                    stack.push(v);
                }
            }
        }
        seen.len() == self.nodes.len()
    }

    /// Checks the shared-topology assumption: both layers carry exactly the
    /// same edge set.
    pub fn validate_shared_layers(&self) -> Result<(), TopologyError> {
        for k in self.lines.keys() {
            if !self.comm.contains_key(k) {
                return Err(TopologyError::LayerMismatch(k.0, k.1));
            }
        }
        for k in self.comm.keys() {
            if !self.lines.contains_key(k) {
                return Err(TopologyError::LayerMismatch(k.0, k.1));
            }
        }
        Ok(())
    }

    /// First cycle found by depth-first search (roots and neighbors visited in
    /// ascending order, so the result is deterministic). Edges are listed
    /// walking from the discovery node back up the search chain to the
    /// cycle-closing ancestor, ending with the closing line. `None` for
    /// forests.
    pub fn find_cycle(&self) -> Option<Vec<(u32, u32)>> {
        let mut visited = BTreeSet::new();
        let mut chain = Vec::new();
        for &root in &self.nodes {
            if !visited.contains(&root) {
                if let Some(c) = self.cycle_dfs(root, None, &mut visited, &mut chain) {
                    return Some(c);
                }
            }
        }
        None
    }

    fn cycle_dfs(
        &self,
        u: u32,
        parent: Option<u32>,
        visited: &mut BTreeSet<u32>,
        chain: &mut Vec<u32>,
    ) -> Option<Vec<(u32, u32)>> {
        visited.insert(u);
        chain.push(u);
        for v in self.neighbors(u) {
            if Some(v) == parent {
                continue;
            }
            if visited.contains(&v) {
                // In an undirected DFS a visited neighbor inside the current
                // chain is an ancestor: close the cycle there. A visited
                // neighbor outside the chain means this edge was already
                // walked from the other side.
                if let Some(pos) = chain.iter().position(|&x| x == v) {
                    let mut edges: Vec<(u32, u32)> =
                        chain[pos..].windows(2).map(|w| (w[1], w[0])).collect();
                    edges.reverse();
                    edges.push((v, u));
                    return Some(edges);
                }
                continue;
            }
            if let Some(c) = self.cycle_dfs(v, Some(u), visited, chain) {
                return Some(c);
            }
        }
        chain.pop();
        None
    }

    /// Breaks every cycle of the electrical graph, preferring removals that
    /// touch already-sacrificed nodes so the unsecured node set stays small.
    /// Returns the surviving spanning tree, the removed lines and the set of
    /// nodes touched by removals.
    pub fn select_spanning_tree(&self) -> Result<SpanningTreeSelection, TopologyError> {
        if !self.is_connected() {
            return Err(TopologyError::Disconnected);
        }
        let mut working = self.clone();
        let mut removed_lines = Vec::new();
        let mut removed_nodes = BTreeSet::new();
        while let Some(cycle) = working.find_cycle() {
            let pick = Self::pick_cycle_edge(&working, &cycle, &removed_nodes);
            let (a, b) = key(pick.0, pick.1);
            working.remove_line(a, b).expect("cycle edge must exist");
            removed_lines.push((a, b));
            removed_nodes.insert(a);
            removed_nodes.insert(b);
        }
        Ok(SpanningTreeSelection {
            tree_lines: working.line_keys().collect(),
            removed_lines,
            removed_nodes,
        })
    }

    /// Edge-selection policy for one cycle: the first cycle edge (in the
    /// order listed by [`find_cycle`](Self::find_cycle)) touching an already
    /// sacrificed node, so the sacrificed set grows as little as possible.
    /// When the cycle is untouched, the edge covering the highest-degree node
    /// wins (degree in the current graph; node ties broken by higher id, edge
    /// ties by higher opposite endpoint).
    fn pick_cycle_edge(
        working: &MicrogridTopology,
        cycle: &[(u32, u32)],
        removed_nodes: &BTreeSet<u32>,
    ) -> (u32, u32) {
        if let Some(&e) = cycle
            .iter()
            .find(|(a, b)| removed_nodes.contains(a) || removed_nodes.contains(b))
        {
            return e;
        }
        let mut cycle_nodes: Vec<u32> = cycle.iter().flat_map(|&(a, b)| [a, b]).collect();
        cycle_nodes.sort_unstable();
        cycle_nodes.dedup();
        let busiest = *cycle_nodes
            .iter()
            .max_by_key(|&&n| (working.degree(n), n))
            .expect("cycle has nodes");
        let incident = cycle
            .iter()
            .filter(|(a, b)| *a == busiest || *b == busiest)
            .map(|&(a, b)| if a == busiest { (a, b) } else { (b, a) });
        incident.max_by_key(|&(_, other)| other).expect("cycle covers busiest")
    }
}

/// Result of cycle-breaking: `tree_lines` spans the graph, `removed_lines`
/// are the sacrificed (unsecured) lines, `removed_nodes` their endpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanningTreeSelection {
    pub tree_lines: Vec<(u32, u32)>,
    pub removed_lines: Vec<(u32, u32)>,
    pub removed_nodes: BTreeSet<u32>,
}

/// Directed line-current sensor positions: `(i, j)` measures the current
/// leaving node `i` into line `(i, j)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SensorPlan {
    positions: BTreeSet<(u32, u32)>,
}

impl SensorPlan {
    pub fn from_positions(positions: impl IntoIterator<Item = (u32, u32)>) -> Self {
        Self { positions: positions.into_iter().collect() }
    }

    pub fn measures(&self, at: u32, toward: u32) -> bool {
        self.positions.contains(&(at, toward))
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.positions.iter().copied()
    }

    /// Plain-text rendering, one `sensor <i> <j>` line per position.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for (i, j) in &self.positions {
            out.push_str(&format!("sensor {i} {j}\n"));
        }
        out
    }
}

/// Places sensors for a chosen spanning tree: both directions of every tree
/// line, then for each node whose incident lines are all measured locally,
/// one sensor (toward the highest neighbor) is dropped — that reading stays
/// recoverable from the node's outgoing-current balance.
pub fn deploy_sensors(topology: &MicrogridTopology, tree_lines: &[(u32, u32)]) -> SensorPlan {
    let mut positions: BTreeSet<(u32, u32)> = BTreeSet::new();
    for &(a, b) in tree_lines {
        positions.insert((a, b));
        positions.insert((b, a));
    }
    for i in topology.nodes() {
        let neighbors = topology.neighbors(i);
        if neighbors.is_empty() {
            continue;
        }
        if neighbors.iter().all(|&j| positions.contains(&(i, j))) {
            positions.remove(&(i, *neighbors.last().expect("nonempty")));
        }
    }
    SensorPlan { positions }
}
