//! Axis-aligned binary decision trees shared by the ensemble sampler and the
//! subgroup-discovery CART, plus greedy CART fitting on real-valued targets.
//!
//! Split convention: the left branch takes `x[feature] < threshold`, the right
//! branch takes `>=`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    pub feature_index: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Internal {
        rule: SplitRule,
        left: NodeId,
        right: NodeId,
        depth: usize,
        row_count: usize,
    },
    Leaf {
        value: f64,
        depth: usize,
        row_count: usize,
    },
}

impl Node {
    pub fn depth(&self) -> usize {
        match self {
            Node::Internal { depth, .. } | Node::Leaf { depth, .. } => *depth,
        }
    }

    pub fn row_count(&self) -> usize {
        match self {
            Node::Internal { row_count, .. } | Node::Leaf { row_count, .. } => *row_count,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Node::Leaf { .. })
    }
}

/// Arena-backed binary tree. Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    pub feature_count: usize,
}

impl DecisionTree {
    /// Single-leaf tree.
    pub fn leaf(value: f64, feature_count: usize, row_count: usize) -> Self {
        DecisionTree {
            nodes: vec![Node::Leaf {
                value,
                depth: 0,
                row_count,
            }],
            feature_count,
        }
    }

    pub const ROOT: NodeId = 0;

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn leaf_ids(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].is_leaf())
            .collect()
    }

    pub fn internal_ids(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| !self.nodes[i].is_leaf())
            .collect()
    }

    /// Route a covariate row to its unique leaf.
    pub fn assign_leaf(&self, x: &[f64]) -> Result<NodeId> {
        if x.len() != self.feature_count {
            return Err(Error::Dimension {
                expected: self.feature_count,
                got: x.len(),
            });
        }
        let mut id = Self::ROOT;
        loop {
            match &self.nodes[id] {
                Node::Leaf { .. } => return Ok(id),
                Node::Internal {
                    rule, left, right, ..
                } => {
                    id = if x[rule.feature_index] < rule.threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    /// Sum-of-trees style evaluation: leaf value reached by `x`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let id = self.assign_leaf(x)?;
        match &self.nodes[id] {
            Node::Leaf { value, .. } => Ok(*value),
            Node::Internal { .. } => unreachable!(),
        }
    }

    /// Parent of each node (root maps to itself).
    pub fn parents(&self) -> Vec<NodeId> {
        let mut parent = vec![0; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if let Node::Internal { left, right, .. } = node {
                parent[*left] = id;
                parent[*right] = id;
            }
        }
        parent
    }

    /// Canonical per-feature interval conjunction describing a node's region.
    /// Repeated splits on one feature are merged by interval intersection.
    pub fn node_predicate(&self, id: NodeId) -> Result<Predicate> {
        if id >= self.nodes.len() {
            return Err(Error::Argument(format!("unknown node id {}", id)));
        }
        // Walk from the root, tightening bounds along the path to `id`.
        let mut path = Vec::new();
        if !self.find_path(Self::ROOT, id, &mut path) {
            return Err(Error::Argument(format!("unreachable node id {}", id)));
        }
        let mut intervals: BTreeMap<usize, Interval> = BTreeMap::new();
        for (node_id, went_left) in path {
            if let Node::Internal { rule, .. } = &self.nodes[node_id] {
                let entry = intervals
                    .entry(rule.feature_index)
                    .or_insert_with(Interval::unbounded);
                if went_left {
                    entry.upper = Some(match entry.upper {
                        Some(u) => u.min(rule.threshold),
                        None => rule.threshold,
                    });
                } else {
                    entry.lower = Some(match entry.lower {
                        Some(l) => l.max(rule.threshold),
                        None => rule.threshold,
                    });
                }
            }
        }
        Ok(Predicate { intervals })
    }

    fn find_path(&self, from: NodeId, target: NodeId, path: &mut Vec<(NodeId, bool)>) -> bool {
        if from == target {
            return true;
        }
        if let Node::Internal { left, right, .. } = &self.nodes[from] {
            path.push((from, true));
            if self.find_path(*left, target, path) {
                return true;
            }
            path.pop();
            path.push((from, false));
            if self.find_path(*right, target, path) {
                return true;
            }
            path.pop();
        }
        false
    }

    /// Structural sanity: two children per internal node, exactly one root,
    /// recorded depths equal path lengths.
    pub fn check_invariants(&self) -> Result<()> {
        let mut seen_child = vec![false; self.nodes.len()];
        for node in &self.nodes {
            if let Node::Internal {
                left, right, depth, ..
            } = node
            {
                for &c in [left, right] {
                    if c >= self.nodes.len() || seen_child[c] {
                        return Err(Error::Domain("tree graph is not a tree".into()));
                    }
                    seen_child[c] = true;
                    if self.nodes[c].depth() != depth + 1 {
                        return Err(Error::Domain("child depth mismatch".into()));
                    }
                }
            }
        }
        if seen_child[Self::ROOT] {
            return Err(Error::Domain("root has a parent".into()));
        }
        for (id, &s) in seen_child.iter().enumerate() {
            if id != Self::ROOT && !s {
                return Err(Error::Domain(format!("orphan node {}", id)));
            }
        }
        Ok(())
    }
}

/// Half-open interval bound on one feature: `lower <= x < upper`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl Interval {
    pub fn unbounded() -> Self {
        Interval {
            lower: None,
            upper: None,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower.map_or(true, |l| v >= l) && self.upper.map_or(true, |u| v < u)
    }
}

/// Canonical conjunction of per-feature intervals. The empty conjunction is
/// the whole space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub intervals: BTreeMap<usize, Interval>,
}

impl Predicate {
    pub fn is_trivial(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.intervals
            .iter()
            .all(|(&f, iv)| f < x.len() && iv.contains(x[f]))
    }

    pub fn render(&self, names: &[String]) -> String {
        if self.intervals.is_empty() {
            return "(all)".to_string();
        }
        let mut parts = Vec::new();
        for (&f, iv) in &self.intervals {
            let name = names
                .get(f)
                .cloned()
                .unwrap_or_else(|| format!("x{}", f + 1));
            if let Some(l) = iv.lower {
                parts.push(format!("{} >= {}", name, l));
            }
            if let Some(u) = iv.upper {
                parts.push(format!("{} < {}", name, u));
            }
        }
        parts.join(" & ")
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CartConfig {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Absolute SSE-reduction threshold. `None` means 1% of the root SSE.
    pub min_gain: Option<f64>,
}

impl Default for CartConfig {
    fn default() -> Self {
        CartConfig {
            max_depth: 2,
            min_leaf: 25,
            min_gain: None,
        }
    }
}

/// Greedy recursive partitioning minimising within-node SSE of `target`.
/// Candidate thresholds are midpoints between sorted distinct feature values;
/// gain ties break toward the lower feature index, then lower threshold.
pub fn fit_cart(x: &[f64], p: usize, target: &[f64], cfg: &CartConfig) -> Result<DecisionTree> {
    let n = target.len();
    if p == 0 || x.len() != n * p {
        return Err(Error::Dimension {
            expected: n * p,
            got: x.len(),
        });
    }
    if n < 2 * cfg.min_leaf {
        return Err(Error::Size(format!(
            "need at least {} rows to fit with min_leaf={}, got {}",
            2 * cfg.min_leaf,
            cfg.min_leaf,
            n
        )));
    }
    let rows: Vec<usize> = (0..n).collect();
    let root_sse = node_sse(target, &rows);
    let min_gain = cfg.min_gain.unwrap_or(0.01 * root_sse);

    let mut tree = DecisionTree {
        nodes: Vec::new(),
        feature_count: p,
    };
    build_node(&mut tree, x, p, target, rows, 0, cfg, min_gain);
    Ok(tree)
}

fn node_mean(target: &[f64], rows: &[usize]) -> f64 {
    rows.iter().map(|&i| target[i]).sum::<f64>() / rows.len() as f64
}

fn node_sse(target: &[f64], rows: &[usize]) -> f64 {
    let m = node_mean(target, rows);
    rows.iter().map(|&i| (target[i] - m).powi(2)).sum()
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

fn best_split(
    x: &[f64],
    p: usize,
    target: &[f64],
    rows: &[usize],
    min_leaf: usize,
) -> Option<BestSplit> {
    let n = rows.len() as f64;
    let total_sum: f64 = rows.iter().map(|&i| target[i]).sum();
    let total_ss: f64 = rows.iter().map(|&i| target[i] * target[i]).sum();
    let parent_sse = total_ss - total_sum * total_sum / n;

    let mut best: Option<BestSplit> = None;
    for f in 0..p {
        let mut pairs: Vec<(f64, f64)> = rows.iter().map(|&i| (x[i * p + f], target[i])).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        // prefix sums over the sorted order; split between distinct values
        let mut left_sum = 0.0;
        let mut left_ss = 0.0;
        for k in 0..pairs.len() - 1 {
            left_sum += pairs[k].1;
            left_ss += pairs[k].1 * pairs[k].1;
            if pairs[k].0 == pairs[k + 1].0 {
                continue;
            }
            let n_left = (k + 1) as f64;
            let n_right = n - n_left;
            if (k + 1) < min_leaf || (rows.len() - k - 1) < min_leaf {
                continue;
            }
            let right_sum = total_sum - left_sum;
            let right_ss = total_ss - left_ss;
            let sse = (left_ss - left_sum * left_sum / n_left)
                + (right_ss - right_sum * right_sum / n_right);
            let gain = parent_sse - sse;
            let threshold = 0.5 * (pairs[k].0 + pairs[k + 1].0);
            let better = match &best {
                None => true,
                Some(b) => {
                    gain > b.gain + 1e-12
                        || ((gain - b.gain).abs() <= 1e-12
                            && (f < b.feature || (f == b.feature && threshold < b.threshold)))
                }
            };
            if better {
                best = Some(BestSplit {
                    feature: f,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn build_node(
    tree: &mut DecisionTree,
    x: &[f64],
    p: usize,
    target: &[f64],
    rows: Vec<usize>,
    depth: usize,
    cfg: &CartConfig,
    min_gain: f64,
) -> NodeId {
    let id = tree.nodes.len();
    // placeholder, replaced below
    tree.nodes.push(Node::Leaf {
        value: 0.0,
        depth,
        row_count: rows.len(),
    });

    let can_split = depth < cfg.max_depth && rows.len() >= 2 * cfg.min_leaf;
    let split = if can_split {
        best_split(x, p, target, &rows, cfg.min_leaf)
            .filter(|s| s.gain > 0.0 && s.gain >= min_gain)
    } else {
        None
    };

    match split {
        Some(s) => {
            let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
                .iter()
                .partition(|&&i| x[i * p + s.feature] < s.threshold);
            let row_count = rows.len();
            drop(rows);
            let left = build_node(tree, x, p, target, left_rows, depth + 1, cfg, min_gain);
            let right = build_node(tree, x, p, target, right_rows, depth + 1, cfg, min_gain);
            tree.nodes[id] = Node::Internal {
                rule: SplitRule {
                    feature_index: s.feature,
                    threshold: s.threshold,
                },
                left,
                right,
                depth,
                row_count,
            };
            id
        }
        None => {
            tree.nodes[id] = Node::Leaf {
                value: node_mean(target, &rows),
                depth,
                row_count: rows.len(),
            };
            id
        }
    }
}
