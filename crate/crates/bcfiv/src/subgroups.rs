//! Interpretable subgroup discovery: a shallow CART on per-unit discovery
//! targets, canonical node predicates, and matching of discovered nodes
//! against ground-truth cells for the simulation harness.

use crate::error::{Error, Result};
use crate::tree::{fit_cart, CartConfig, DecisionTree, Predicate};
use serde::{Deserialize, Serialize};

/// A fitted discovery tree over the covariates, with one canonical predicate
/// and one discovery-sample share per node (internal nodes included).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubgroupTree {
    pub tree: DecisionTree,
    pub node_predicates: Vec<Predicate>,
    pub shares: Vec<f64>,
}

impl SubgroupTree {
    /// One line per node: predicate and share, indented by depth.
    pub fn render_text(&self, names: &[String]) -> String {
        let mut out = String::new();
        self.render_node(0, names, &mut out);
        out
    }

    fn render_node(&self, id: usize, names: &[String], out: &mut String) {
        let depth = self.tree.nodes[id].depth();
        out.push_str(&"  ".repeat(depth));
        out.push_str(&format!(
            "{} [share {:.3}]\n",
            self.node_predicates[id].render(names),
            self.shares[id]
        ));
        if let crate::tree::Node::Internal { left, right, .. } = &self.tree.nodes[id] {
            self.render_node(*left, names, out);
            self.render_node(*right, names, out);
        }
    }
}

/// Fit the discovery tree on (targets, covariates) and annotate every node
/// with its canonical predicate and share of discovery units.
pub fn discover(x: &[f64], n: usize, p: usize, targets: &[f64], cfg: &CartConfig) -> Result<SubgroupTree> {
    if targets.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: targets.len(),
        });
    }
    if n < 2 * cfg.min_leaf {
        return Err(Error::Size(format!(
            "need at least {} rows for discovery, got {}",
            2 * cfg.min_leaf,
            n
        )));
    }
    let tree = fit_cart(x, p, targets, cfg)?;
    let node_predicates: Vec<Predicate> = (0..tree.nodes.len())
        .map(|id| tree.node_predicate(id))
        .collect::<Result<_>>()?;
    // count rows passing through each node
    let mut counts = vec![0usize; tree.nodes.len()];
    for i in 0..n {
        let mut id = 0usize;
        loop {
            counts[id] += 1;
            match &tree.nodes[id] {
                crate::tree::Node::Leaf { .. } => break,
                crate::tree::Node::Internal {
                    rule, left, right, ..
                } => {
                    id = if x[i * p + rule.feature_index] < rule.threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }
    let shares = counts.iter().map(|&c| c as f64 / n as f64).collect();
    Ok(SubgroupTree {
        tree,
        node_predicates,
        shares,
    })
}

/// A ground-truth cell: a conjunction of binary covariate values, e.g.
/// {x1 = 0, x2 = 0}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthCell {
    pub name: String,
    /// (feature index, required 0/1 value) pairs.
    pub constraints: Vec<(usize, u8)>,
}

impl TruthCell {
    pub fn new(name: impl Into<String>, constraints: Vec<(usize, u8)>) -> Self {
        TruthCell {
            name: name.into(),
            constraints,
        }
    }

    fn contains(&self, assignment: &[(usize, f64)]) -> bool {
        self.constraints.iter().all(|&(f, v)| {
            assignment
                .iter()
                .find(|&&(af, _)| af == f)
                .map_or(false, |&(_, av)| av == v as f64)
        })
    }
}

/// A truth cell is matched iff some node's predicate, restricted to binary
/// covariate values, selects exactly the same set of cells. Split order and
/// threshold jitter inside (0,1) are irrelevant because the comparison
/// enumerates 0/1 assignments of the involved features.
pub fn match_truth(st: &SubgroupTree, truths: &[TruthCell]) -> Vec<bool> {
    truths
        .iter()
        .map(|truth| {
            st.node_predicates
                .iter()
                .any(|pred| predicate_equals_truth(pred, truth, st.tree.feature_count))
        })
        .collect()
}

fn predicate_equals_truth(pred: &Predicate, truth: &TruthCell, p: usize) -> bool {
    // union of features mentioned on either side
    let mut feats: Vec<usize> = pred.intervals.keys().cloned().collect();
    for &(f, _) in &truth.constraints {
        if !feats.contains(&f) {
            feats.push(f);
        }
    }
    feats.sort_unstable();
    if feats.iter().any(|&f| f >= p) {
        return false;
    }
    // enumerate all 0/1 assignments of the involved features
    let m = feats.len();
    for mask in 0..(1usize << m) {
        let assignment: Vec<(usize, f64)> = feats
            .iter()
            .enumerate()
            .map(|(j, &f)| (f, ((mask >> j) & 1) as f64))
            .collect();
        let mut x = vec![0.0; p];
        for &(f, v) in &assignment {
            x[f] = v;
        }
        let in_pred = pred.contains(&x);
        let in_truth = truth.contains(&assignment);
        if in_pred != in_truth {
            return false;
        }
    }
    // a trivial predicate only matches a trivial truth; both sides handled by
    // the enumeration above except the empty-feature case
    m > 0 || truth.constraints.is_empty()
}
