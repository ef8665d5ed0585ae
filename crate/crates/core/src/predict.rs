//! Forward prediction of risky states from a safe starting state.
//!
//! Starting at a non-risky abstract state, the tree follows the solved
//! policy: each non-risky node branches through the transition row of
//! its policy action, risky nodes become leaves, and expansion stops at
//! the horizon. A node's path probability is the product of the edge
//! probabilities from the root, so risky-leaf probabilities are
//! first-passage probabilities into the risky set. Branches are pruned
//! below a probability floor and capped per node; pruned mass is
//! recorded so the tree always accounts for all probability.
//!
//! Risky states are treated as absorbing when expanding: under the
//! remain action they keep at least 0.75 self-mass but may leak up to
//! 0.25, which this tree deliberately ignores.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::MdpModel;
use crate::solver::Policy;

/// Header note emitted with reports; states the absorption
/// approximation baked into the tree.
pub const ABSORPTION_NOTE: &str =
    "risky states are treated as absorbing leaves; residual outflow from risky states is ignored";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    /// Expanded non-risky node (its children may all be pruned away).
    Internal,
    /// Risky state: a forecast hit, never expanded.
    RiskyLeaf,
    /// Non-risky state at the horizon.
    HorizonLeaf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub state: u32,
    pub depth: usize,
    /// Product of edge probabilities from the root to this node.
    pub path_prob: f64,
    pub parent: Option<usize>,
    pub kind: NodeKind,
    /// Absolute probability mass dropped at this node by the floor and
    /// branching cap.
    pub pruned_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTree {
    pub root: u32,
    pub horizon: usize,
    pub prob_floor: f64,
    pub branch_cap: usize,
    pub note: String,
    pub nodes: Vec<TreeNode>,
}

impl PredictionTree {
    /// Total path probability of risky leaves.
    pub fn risky_mass(&self) -> f64 {
        self.mass_of(NodeKind::RiskyLeaf)
    }

    /// Total path probability of horizon leaves.
    pub fn horizon_mass(&self) -> f64 {
        self.mass_of(NodeKind::HorizonLeaf)
    }

    /// Total probability mass dropped by pruning.
    pub fn pruned_mass(&self) -> f64 {
        self.nodes.iter().map(|n| n.pruned_mass).sum()
    }

    fn mass_of(&self, kind: NodeKind) -> f64 {
        self.nodes.iter().filter(|n| n.kind == kind).map(|n| n.path_prob).sum()
    }

    /// Children indices per node, in insertion order.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut children = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(p) = node.parent {
                children[p].push(i);
            }
        }
        children
    }
}

/// Expands the policy-driven transition tree from `root`.
///
/// Successors with probability at most `prob_floor` are pruned and at
/// most `branch_cap` highest-probability successors are kept per node
/// (ties by lower state id). Dropped mass is recorded per node.
pub fn predict(
    mdp: &MdpModel,
    policy: &Policy,
    abstract_risky: &[bool],
    root: u32,
    horizon: usize,
    prob_floor: f64,
    branch_cap: usize,
) -> Result<PredictionTree> {
    if policy.actions.len() != mdp.k || abstract_risky.len() != mdp.k {
        return Err(Error::config("policy, risk labels and MDP cover different state counts"));
    }
    if (root as usize) >= mdp.k {
        return Err(Error::config(format!("root state {root} out of range (K = {})", mdp.k)));
    }
    if abstract_risky[root as usize] {
        return Err(Error::config(format!("root state {root} is risky; prediction starts from a safe state")));
    }
    if horizon == 0 {
        return Err(Error::config("horizon must be >= 1"));
    }
    if !(0.0..=1.0).contains(&prob_floor) {
        return Err(Error::config("probability floor must lie in [0, 1]"));
    }

    let classify = |state: u32, depth: usize| {
        if abstract_risky[state as usize] {
            NodeKind::RiskyLeaf
        } else if depth >= horizon {
            NodeKind::HorizonLeaf
        } else {
            NodeKind::Internal
        }
    };

    let mut nodes = vec![TreeNode {
        state: root,
        depth: 0,
        path_prob: 1.0,
        parent: None,
        kind: classify(root, 0),
        pruned_mass: 0.0,
    }];
    let mut queue = std::collections::VecDeque::from([0usize]);

    while let Some(idx) = queue.pop_front() {
        if nodes[idx].kind != NodeKind::Internal {
            continue;
        }
        let state = nodes[idx].state as usize;
        let depth = nodes[idx].depth;
        let path_prob = nodes[idx].path_prob;
        let action = policy.actions[state] as usize;
        let row = mdp.transitions[action].row(state);

        let mut successors: Vec<(u32, f64)> = row
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > prob_floor)
            .map(|(j, &p)| (j as u32, p))
            .collect();
        successors.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let kept = successors.len().min(branch_cap);

        let mut kept_mass = 0.0;
        for &(next, p) in &successors[..kept] {
            kept_mass += p;
            let child = TreeNode {
                state: next,
                depth: depth + 1,
                path_prob: path_prob * p,
                parent: Some(idx),
                kind: classify(next, depth + 1),
                pruned_mass: 0.0,
            };
            nodes.push(child);
            queue.push_back(nodes.len() - 1);
        }
        let row_mass: f64 = row.iter().sum();
        nodes[idx].pruned_mass = path_prob * (row_mass - kept_mass).max(0.0);
    }

    Ok(PredictionTree {
        root,
        horizon,
        prob_floor,
        branch_cap,
        note: ABSORPTION_NOTE.to_owned(),
        nodes,
    })
}

/// One forecast entry: a risky state reachable at `depth` with the
/// aggregated first-passage probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskForecast {
    pub depth: usize,
    pub state: u32,
    pub probability: f64,
}

/// Aggregates risky-leaf path probabilities by (state, depth), sorted
/// by descending probability (ties by depth, then state).
pub fn risk_report(tree: &PredictionTree) -> Vec<RiskForecast> {
    let mut by_key: BTreeMap<(usize, u32), f64> = BTreeMap::new();
    for node in &tree.nodes {
        if node.kind == NodeKind::RiskyLeaf {
            *by_key.entry((node.depth, node.state)).or_insert(0.0) += node.path_prob;
        }
    }
    let mut entries: Vec<RiskForecast> = by_key
        .into_iter()
        .map(|((depth, state), probability)| RiskForecast { depth, state, probability })
        .collect();
    entries.sort_by(|a, b| {
        b.probability
            .partial_cmp(&a.probability)
            .unwrap()
            .then(a.depth.cmp(&b.depth))
            .then(a.state.cmp(&b.state))
    });
    entries
}

pub fn save_tree(path: impl AsRef<Path>, tree: &PredictionTree) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), tree)?;
    Ok(())
}

pub fn load_tree(path: impl AsRef<Path>) -> Result<PredictionTree> {
    let file = std::fs::File::open(path.as_ref())?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// Writes the forecast as CSV (`depth,state,probability`) behind a `#`
/// comment header carrying the absorption note.
pub fn write_risk_report(path: impl AsRef<Path>, entries: &[RiskForecast]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(file, "# {ABSORPTION_NOTE}")?;
    writeln!(file, "depth,state,probability")?;
    for e in entries {
        writeln!(file, "{},{},{}", e.depth, e.state, e.probability)?;
    }
    file.flush()?;
    Ok(())
}

pub fn load_risk_report(path: impl AsRef<Path>) -> Result<Vec<RiskForecast>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path.as_ref())?;
    let mut entries = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let n = i + 1;
        let parse_err = |field: &str| Error::data(format!("row {n}: invalid {field}"));
        entries.push(RiskForecast {
            depth: row[0].trim().parse().map_err(|_| parse_err("depth"))?,
            state: row[1].trim().parse().map_err(|_| parse_err("state"))?,
            probability: row[2].trim().parse().map_err(|_| parse_err("probability"))?,
        });
    }
    Ok(entries)
}

/// Indented text rendering of the tree.
pub fn render_tree(tree: &PredictionTree) -> String {
    let mut out = format!("# {}\n", tree.note);
    let children = tree.children();
    let mut stack = vec![0usize];
    while let Some(idx) = stack.pop() {
        let node = &tree.nodes[idx];
        let tag = match node.kind {
            NodeKind::Internal => "",
            NodeKind::RiskyLeaf => " [risky]",
            NodeKind::HorizonLeaf => " [horizon]",
        };
        out.push_str(&format!(
            "{}state {} p={:.6}{}\n",
            "  ".repeat(node.depth),
            node.state,
            node.path_prob,
            tag
        ));
        for &child in children[idx].iter().rev() {
            stack.push(child);
        }
    }
    out
}
