//! Sum-of-trees Bayesian backfitting MCMC.
//!
//! One sampler drives three model variants: plain regression on a continuous
//! outcome, a probit latent-variable variant for binary outcomes, and a joint
//! two-forest decomposition where a prognostic forest models the outcome level
//! and a shrunken treatment forest models the instrument effect.
//!
//! Leaf values are marginalised out of every Metropolis-Hastings acceptance
//! ratio (normal-normal integrated likelihood) and re-sampled from their
//! conjugate posterior after each structural move. The error variance has an
//! inverse-gamma prior whose scale is calibrated against a least-squares fit
//! of the outcome on the covariates.

use crate::dataset::OutcomeKind;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tree::{DecisionTree, Node, SplitRule};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, InverseGamma, Normal};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProposalProbs {
    pub grow: f64,
    pub prune: f64,
    pub change: f64,
    pub swap: f64,
}

impl Default for ProposalProbs {
    fn default() -> Self {
        ProposalProbs {
            grow: 0.25,
            prune: 0.25,
            change: 0.40,
            swap: 0.10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BartConfig {
    /// Number of trees in the ensemble.
    pub q: usize,
    /// Depth-prior exponent: a node at depth k splits with probability
    /// beta * (1 + k)^(-eta).
    pub eta: f64,
    /// Depth-prior base.
    pub beta: f64,
    /// Leaf-prior scale calibrator; the leaf prior is N(0, sigma0^2 / q).
    pub sigma0: f64,
    /// Error-variance prior degrees of freedom.
    pub nu: f64,
    /// The inverse-gamma scale is chosen so the prior puts this much
    /// probability on sigma below the least-squares residual sd.
    pub lambda_quantile: f64,
    pub n_burn: usize,
    pub n_draw: usize,
    pub proposal_probs: ProposalProbs,
    pub seed: u64,
}

impl Default for BartConfig {
    fn default() -> Self {
        BartConfig {
            q: 200,
            eta: 2.0,
            beta: 0.95,
            sigma0: 0.25,
            nu: 3.0,
            lambda_quantile: 0.9,
            n_burn: 500,
            n_draw: 1000,
            proposal_probs: ProposalProbs::default(),
            seed: 0,
        }
    }
}

impl BartConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.proposal_probs;
        let total = p.grow + p.prune + p.change + p.swap;
        if !(self.beta > 0.0 && self.beta < 1.0)
            || self.eta < 0.0
            || self.q == 0
            || self.nu <= 0.0
            || self.n_draw == 0
            || (total - 1.0).abs() > 1e-9
        {
            return Err(Error::Argument(
                "invalid sampler configuration (check beta, eta, q, nu, draws, proposal probabilities)"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// One retained MCMC state: the trees (leaf values on the internal scaled
/// outcome) plus the residual scale draw.
#[derive(Debug, Clone)]
pub struct DrawState {
    pub trees: Vec<DecisionTree>,
    pub sigma: f64,
}

/// A fitted sum-of-trees model.
#[derive(Debug, Clone)]
pub struct PosteriorEnsemble {
    pub draws: Vec<DrawState>,
    pub feature_count: usize,
    pub outcome_kind: OutcomeKind,
    /// Back-transform: internal fit f maps to f * scale + shift for a
    /// continuous outcome, Phi(f + shift) for a binary one.
    pub y_shift: f64,
    pub y_scale: f64,
    pub acceptance_rate: f64,
    pub in_sample_mean: Vec<f64>,
}

impl PosteriorEnsemble {
    /// M x n_draw matrix (row-major) of per-row, per-state predictions on the
    /// outcome scale (probability scale for binary outcomes).
    pub fn predict_posterior(&self, x: &[f64], m: usize) -> Result<Vec<f64>> {
        let p = self.feature_count;
        if x.len() != m * p {
            return Err(Error::Dimension {
                expected: m * p,
                got: x.len(),
            });
        }
        let s = self.draws.len();
        let mut out = vec![0.0; m * s];
        let norm = Normal::new(0.0, 1.0).unwrap();
        for i in 0..m {
            let row = &x[i * p..(i + 1) * p];
            for (si, state) in self.draws.iter().enumerate() {
                let mut f = 0.0;
                for t in &state.trees {
                    f += t.predict(row)?;
                }
                out[i * s + si] = match self.outcome_kind {
                    OutcomeKind::Continuous => f * self.y_scale + self.y_shift,
                    OutcomeKind::Binary => norm.cdf(f + self.y_shift),
                };
            }
        }
        Ok(out)
    }

    /// Posterior mean prediction per row.
    pub fn predict_mean(&self, x: &[f64], m: usize) -> Result<Vec<f64>> {
        let s = self.draws.len();
        let mat = self.predict_posterior(x, m)?;
        Ok((0..m)
            .map(|i| mat[i * s..(i + 1) * s].iter().sum::<f64>() / s as f64)
            .collect())
    }

    /// Sigma draws mapped back to the original outcome scale.
    pub fn sigma_draws(&self) -> Vec<f64> {
        self.draws.iter().map(|d| d.sigma * self.y_scale).collect()
    }
}

/// Log prior of the tree's branching structure: sum over internal nodes of
/// log[beta (1+k)^(-eta)] plus sum over leaves of log[1 - beta (1+k)^(-eta)],
/// with k the node depth.
pub fn log_tree_prior(t: &DecisionTree, eta: f64, beta: f64) -> f64 {
    let mut lp = 0.0;
    for node in &t.nodes {
        let d = node.depth() as f64;
        let p_split = beta * (1.0 + d).powf(-eta);
        lp += if node.is_leaf() {
            (1.0 - p_split).ln()
        } else {
            p_split.ln()
        };
    }
    lp
}

/// Per-leaf sufficient statistics of the partial residual, weighted by the
/// forest's row multiplier (1 for prognostic rows, the instrument for the
/// treatment forest).
#[derive(Clone, Copy, Default)]
struct LeafStats {
    rows: usize,
    active: usize,
    sum: f64,
    sumsq: f64,
}

fn collect_leaf_stats(
    tree: &DecisionTree,
    x: &[f64],
    p: usize,
    resid: &[f64],
    mult: &[f64],
) -> Result<Vec<LeafStats>> {
    let mut stats = vec![LeafStats::default(); tree.nodes.len()];
    for i in 0..resid.len() {
        let id = tree.assign_leaf(&x[i * p..(i + 1) * p])?;
        let s = &mut stats[id];
        s.rows += 1;
        if mult[i] != 0.0 {
            s.active += 1;
            s.sum += resid[i];
            s.sumsq += resid[i] * resid[i];
        }
    }
    Ok(stats)
}

/// Integrated leaf log-likelihood of a whole tree: leaf values marginalised
/// under their N(0, sigma_mu^2) prior against N(value, sigma^2) noise.
pub fn log_marginal_likelihood(
    tree: &DecisionTree,
    x: &[f64],
    p: usize,
    resid: &[f64],
    mult: &[f64],
    sigma2: f64,
    sigma_mu2: f64,
) -> Result<f64> {
    let stats = collect_leaf_stats(tree, x, p, resid, mult)?;
    let mut ll = 0.0;
    for (id, s) in stats.iter().enumerate() {
        if !tree.nodes[id].is_leaf() || s.active == 0 {
            continue;
        }
        ll += leaf_log_marginal(s.active as f64, s.sum, s.sumsq, sigma2, sigma_mu2);
    }
    Ok(ll)
}

fn leaf_log_marginal(m: f64, sum: f64, sumsq: f64, sigma2: f64, sigma_mu2: f64) -> f64 {
    let denom = sigma2 + m * sigma_mu2;
    -0.5 * m * (2.0 * std::f64::consts::PI * sigma2).ln() - sumsq / (2.0 * sigma2)
        + 0.5 * (sigma2 / denom).ln()
        + sigma_mu2 * sum * sum / (2.0 * sigma2 * denom)
}

/// Per-feature candidate split thresholds: 100 equally spaced interior
/// cutpoints over the observed range; features with two distinct values
/// collapse to the single midpoint; constant features get none.
fn make_cutpoints(x: &[f64], n: usize, p: usize) -> Vec<Vec<f64>> {
    const GRID: usize = 100;
    let mut cuts = Vec::with_capacity(p);
    for f in 0..p {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut distinct: Vec<f64> = Vec::new();
        for i in 0..n {
            let v = x[i * p + f];
            lo = lo.min(v);
            hi = hi.max(v);
            if distinct.len() <= 2 && !distinct.contains(&v) {
                distinct.push(v);
            }
        }
        if hi <= lo {
            cuts.push(Vec::new());
        } else if distinct.len() == 2 {
            cuts.push(vec![0.5 * (lo + hi)]);
        } else {
            let step = (hi - lo) / (GRID + 1) as f64;
            cuts.push((1..=GRID).map(|k| lo + step * k as f64).collect());
        }
    }
    cuts
}

/// Internal nodes whose children are both leaves.
fn prunable_nodes(t: &DecisionTree) -> Vec<usize> {
    t.internal_ids()
        .into_iter()
        .filter(|&id| match &t.nodes[id] {
            Node::Internal { left, right, .. } => {
                t.nodes[*left].is_leaf() && t.nodes[*right].is_leaf()
            }
            _ => false,
        })
        .collect()
}

fn grow_at(t: &DecisionTree, leaf: usize, rule: SplitRule) -> DecisionTree {
    let mut nt = t.clone();
    let depth = nt.nodes[leaf].depth();
    let row_count = nt.nodes[leaf].row_count();
    let left = nt.nodes.len();
    let right = left + 1;
    nt.nodes.push(Node::Leaf {
        value: 0.0,
        depth: depth + 1,
        row_count: 0,
    });
    nt.nodes.push(Node::Leaf {
        value: 0.0,
        depth: depth + 1,
        row_count: 0,
    });
    nt.nodes[leaf] = Node::Internal {
        rule,
        left,
        right,
        depth,
        row_count,
    };
    nt
}

/// Collapse a prunable internal node back to a leaf, compacting the arena.
fn prune_at(t: &DecisionTree, node: usize) -> DecisionTree {
    let (left, right, depth, row_count) = match &t.nodes[node] {
        Node::Internal {
            left,
            right,
            depth,
            row_count,
            ..
        } => (*left, *right, *depth, *row_count),
        _ => unreachable!("prune target must be internal"),
    };
    let mut nt = t.clone();
    nt.nodes[node] = Node::Leaf {
        value: 0.0,
        depth,
        row_count,
    };
    // remove the two orphaned children, remapping ids
    let mut removed: Vec<usize> = vec![left, right];
    removed.sort_unstable();
    let remap = |id: usize| -> usize { id - removed.iter().filter(|&&r| r < id).count() };
    let mut nodes = Vec::with_capacity(nt.nodes.len() - 2);
    for (id, node) in nt.nodes.iter().enumerate() {
        if removed.contains(&id) {
            continue;
        }
        nodes.push(match node {
            Node::Internal {
                rule,
                left,
                right,
                depth,
                row_count,
            } => Node::Internal {
                rule: *rule,
                left: remap(*left),
                right: remap(*right),
                depth: *depth,
                row_count: *row_count,
            },
            leaf => leaf.clone(),
        });
    }
    DecisionTree {
        nodes,
        feature_count: nt.feature_count,
    }
}

fn any_empty_leaf(stats: &[LeafStats], tree: &DecisionTree) -> bool {
    stats
        .iter()
        .enumerate()
        .any(|(id, s)| tree.nodes[id].is_leaf() && s.rows == 0)
}

/// Shared per-forest state during sampling.
struct Forest {
    trees: Vec<DecisionTree>,
    /// Per-tree, per-row contribution (already multiplied by `mult`).
    tree_fit: Vec<Vec<f64>>,
    sigma_mu2: f64,
    eta: f64,
    beta: f64,
    cutpoints: Vec<Vec<f64>>,
    splittable: Vec<usize>,
    proposals: u64,
    accepted: u64,
}

impl Forest {
    fn new(q: usize, n: usize, p: usize, x: &[f64], sigma_mu: f64, eta: f64, beta: f64) -> Self {
        let cutpoints = make_cutpoints(x, n, p);
        let splittable = (0..p).filter(|&f| !cutpoints[f].is_empty()).collect();
        Forest {
            trees: (0..q).map(|_| DecisionTree::leaf(0.0, p, n)).collect(),
            tree_fit: vec![vec![0.0; n]; q],
            sigma_mu2: sigma_mu * sigma_mu,
            eta,
            beta,
            cutpoints,
            splittable,
            proposals: 0,
            accepted: 0,
        }
    }

    /// One backfitting sweep over every tree. `resid` is the full model
    /// residual (y minus all forests) and is kept current in place.
    #[allow(clippy::too_many_arguments)]
    fn sweep(
        &mut self,
        x: &[f64],
        p: usize,
        resid: &mut [f64],
        mult: &[f64],
        sigma2: f64,
        probs: &ProposalProbs,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let n = resid.len();
        let mut partial = vec![0.0; n];
        for j in 0..self.trees.len() {
            for i in 0..n {
                partial[i] = resid[i] + self.tree_fit[j][i];
            }
            self.update_tree(j, x, p, &partial, mult, sigma2, probs, rng)?;
            self.sample_leaf_values(j, x, p, &partial, mult, sigma2, rng)?;
            for i in 0..n {
                resid[i] = partial[i] - self.tree_fit[j][i];
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn update_tree(
        &mut self,
        j: usize,
        x: &[f64],
        p: usize,
        partial: &[f64],
        mult: &[f64],
        sigma2: f64,
        probs: &ProposalProbs,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if self.splittable.is_empty() {
            return Ok(());
        }
        self.proposals += 1;
        let tree = &self.trees[j];
        let u: f64 = rng.gen();
        let proposal = if u < probs.grow {
            self.propose_grow(tree, rng)
        } else if u < probs.grow + probs.prune {
            self.propose_prune(tree, rng)
        } else if u < probs.grow + probs.prune + probs.change {
            self.propose_change(tree, rng)
        } else {
            self.propose_swap(tree, rng)
        };
        let Some((candidate, log_transition)) = proposal else {
            return Ok(());
        };
        let new_stats = collect_leaf_stats(&candidate, x, p, partial, mult)?;
        if any_empty_leaf(&new_stats, &candidate) {
            return Ok(());
        }
        let old_ll = log_marginal_likelihood(tree, x, p, partial, mult, sigma2, self.sigma_mu2)?;
        let new_ll: f64 = new_stats
            .iter()
            .enumerate()
            .filter(|(id, s)| candidate.nodes[*id].is_leaf() && s.active > 0)
            .map(|(_, s)| leaf_log_marginal(s.active as f64, s.sum, s.sumsq, sigma2, self.sigma_mu2))
            .sum();
        let log_prior_ratio = log_tree_prior(&candidate, self.eta, self.beta)
            - log_tree_prior(tree, self.eta, self.beta);
        let log_alpha = new_ll - old_ll + log_prior_ratio + log_transition;
        if log_alpha >= 0.0 || rng.gen::<f64>().ln() < log_alpha {
            self.trees[j] = candidate;
            self.accepted += 1;
        }
        Ok(())
    }

    fn draw_rule(&self, rng: &mut ChaCha8Rng) -> SplitRule {
        let f = self.splittable[rng.gen_range(0..self.splittable.len())];
        let cuts = &self.cutpoints[f];
        SplitRule {
            feature_index: f,
            threshold: cuts[rng.gen_range(0..cuts.len())],
        }
    }

    /// Grow: uniform leaf, rule drawn from the split-rule prior (the rule
    /// terms cancel between prior and proposal, leaving only the depth terms
    /// and the leaf/prunable counting factors).
    fn propose_grow(&self, tree: &DecisionTree, rng: &mut ChaCha8Rng) -> Option<(DecisionTree, f64)> {
        let leaves = tree.leaf_ids();
        let leaf = leaves[rng.gen_range(0..leaves.len())];
        let rule = self.draw_rule(rng);
        let candidate = grow_at(tree, leaf, rule);
        let n_prunable_new = prunable_nodes(&candidate).len();
        let log_transition = (leaves.len() as f64).ln() - (n_prunable_new as f64).ln();
        Some((candidate, log_transition))
    }

    fn propose_prune(&self, tree: &DecisionTree, rng: &mut ChaCha8Rng) -> Option<(DecisionTree, f64)> {
        let prunable = prunable_nodes(tree);
        if prunable.is_empty() {
            return None;
        }
        let node = prunable[rng.gen_range(0..prunable.len())];
        let candidate = prune_at(tree, node);
        let n_leaves_new = candidate.leaf_ids().len();
        let log_transition = (prunable.len() as f64).ln() - (n_leaves_new as f64).ln();
        Some((candidate, log_transition))
    }

    fn propose_change(&self, tree: &DecisionTree, rng: &mut ChaCha8Rng) -> Option<(DecisionTree, f64)> {
        let internal = tree.internal_ids();
        if internal.is_empty() {
            return None;
        }
        let node = internal[rng.gen_range(0..internal.len())];
        let rule = self.draw_rule(rng);
        let mut candidate = tree.clone();
        if let Node::Internal { rule: r, .. } = &mut candidate.nodes[node] {
            *r = rule;
        }
        Some((candidate, 0.0))
    }

    /// Swap the rules of an internal parent-child pair.
    fn propose_swap(&self, tree: &DecisionTree, rng: &mut ChaCha8Rng) -> Option<(DecisionTree, f64)> {
        let pairs: Vec<(usize, usize)> = tree
            .internal_ids()
            .into_iter()
            .flat_map(|id| match &tree.nodes[id] {
                Node::Internal { left, right, .. } => {
                    let mut v = Vec::new();
                    if !tree.nodes[*left].is_leaf() {
                        v.push((id, *left));
                    }
                    if !tree.nodes[*right].is_leaf() {
                        v.push((id, *right));
                    }
                    v
                }
                _ => Vec::new(),
            })
            .collect();
        if pairs.is_empty() {
            return None;
        }
        let (parent, child) = pairs[rng.gen_range(0..pairs.len())];
        let mut candidate = tree.clone();
        let (rp, rc) = match (&tree.nodes[parent], &tree.nodes[child]) {
            (Node::Internal { rule: rp, .. }, Node::Internal { rule: rc, .. }) => (*rp, *rc),
            _ => unreachable!(),
        };
        if let Node::Internal { rule, .. } = &mut candidate.nodes[parent] {
            *rule = rc;
        }
        if let Node::Internal { rule, .. } = &mut candidate.nodes[child] {
            *rule = rp;
        }
        Some((candidate, 0.0))
    }

    fn sample_leaf_values(
        &mut self,
        j: usize,
        x: &[f64],
        p: usize,
        partial: &[f64],
        mult: &[f64],
        sigma2: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let stats = collect_leaf_stats(&self.trees[j], x, p, partial, mult)?;
        let n_nodes = self.trees[j].nodes.len();
        let mut values = vec![0.0; n_nodes];
        for id in 0..n_nodes {
            if !self.trees[j].nodes[id].is_leaf() {
                continue;
            }
            let s = stats[id];
            let prec = s.active as f64 / sigma2 + 1.0 / self.sigma_mu2;
            let var = 1.0 / prec;
            let mean = var * s.sum / sigma2;
            let eps: f64 = StandardNormal.sample(rng);
            values[id] = mean + var.sqrt() * eps;
            if let Node::Leaf {
                value, row_count, ..
            } = &mut self.trees[j].nodes[id]
            {
                *value = values[id];
                *row_count = s.rows;
            }
        }
        let n = partial.len();
        for i in 0..n {
            let id = self.trees[j].assign_leaf(&x[i * p..(i + 1) * p])?;
            self.tree_fit[j][i] = mult[i] * values[id];
        }
        Ok(())
    }

    fn total_fit(&self, n: usize) -> Vec<f64> {
        let mut f = vec![0.0; n];
        for tf in &self.tree_fit {
            for i in 0..n {
                f[i] += tf[i];
            }
        }
        f
    }
}

/// Residual standard deviation of a least-squares fit of `y` on `x` with an
/// intercept (SVD solve; collinearity tolerated).
pub fn linear_residual_sd(x: &[f64], n: usize, p: usize, y: &[f64]) -> f64 {
    use nalgebra::{DMatrix, DVector};
    let mut design = DMatrix::zeros(n, p + 1);
    for i in 0..n {
        design[(i, 0)] = 1.0;
        for f in 0..p {
            design[(i, f + 1)] = x[i * p + f];
        }
    }
    let yv = DVector::from_row_slice(y);
    let svd = design.clone().svd(true, true);
    let coef = svd.solve(&yv, 1e-10).expect("svd solve");
    let fitted = design * coef;
    let rss: f64 = (yv - fitted).iter().map(|r| r * r).sum();
    let dof = n.saturating_sub(p + 1).max(1);
    (rss / dof as f64).sqrt()
}

/// Solve for the inverse-gamma scale lambda such that the prior on sigma^2,
/// InvGamma(nu/2, nu*lambda/2), puts `quantile` mass below sigma_lin^2.
pub fn calibrate_lambda(nu: f64, quantile: f64, sigma_lin: f64) -> f64 {
    let target = sigma_lin * sigma_lin;
    let cdf_at = |lambda: f64| -> f64 {
        InverseGamma::new(nu / 2.0, nu * lambda / 2.0)
            .map(|d| d.cdf(target))
            .unwrap_or(1.0)
    };
    // cdf decreases in lambda; bisect
    let mut lo = 1e-12;
    let mut hi = target.max(1e-12);
    while cdf_at(hi) > quantile {
        hi *= 2.0;
        if hi > 1e12 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf_at(mid) > quantile {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn sample_sigma2(
    nu: f64,
    lambda: f64,
    resid: &[f64],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let n = resid.len() as f64;
    let sse: f64 = resid.iter().map(|r| r * r).sum();
    let shape = (nu + n) / 2.0;
    let rate = (nu * lambda + sse) / 2.0;
    let g = Gamma::new(shape, 1.0).unwrap().sample(rng);
    (rate / g).max(1e-12)
}

fn check_inputs(x: &[f64], n: usize, p: usize, y: &[f64]) -> Result<()> {
    if n < 10 {
        return Err(Error::Size(format!("need at least 10 rows, got {}", n)));
    }
    if x.len() != n * p {
        return Err(Error::Dimension {
            expected: n * p,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite value in inputs".into()));
    }
    Ok(())
}

/// Fit a BART regression of a continuous outcome on the covariates.
pub fn fit_bart(x: &[f64], n: usize, p: usize, y: &[f64], cfg: &BartConfig) -> Result<PosteriorEnsemble> {
    cfg.validate()?;
    check_inputs(x, n, p, y)?;

    let y_min = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let y_max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shift = 0.5 * (y_min + y_max);
    let scale = if y_max > y_min { y_max - y_min } else { 1.0 };
    let ys: Vec<f64> = y.iter().map(|v| (v - shift) / scale).collect();

    let sigma_lin = linear_residual_sd(x, n, p, &ys).max(1e-9);
    let lambda = calibrate_lambda(cfg.nu, cfg.lambda_quantile, sigma_lin);

    let sigma_mu = cfg.sigma0 / (cfg.q as f64).sqrt();
    let mut forest = Forest::new(cfg.q, n, p, x, sigma_mu, cfg.eta, cfg.beta);
    let ones = vec![1.0; n];
    let mut resid = ys.clone();
    let mut sigma2 = sigma_lin * sigma_lin;
    let mut rng = substream(cfg.seed, 0x4241_5254); // "BART"

    let mut draws = Vec::with_capacity(cfg.n_draw);
    for iter in 0..cfg.n_burn + cfg.n_draw {
        forest.sweep(x, p, &mut resid, &ones, sigma2, &cfg.proposal_probs, &mut rng)?;
        sigma2 = sample_sigma2(cfg.nu, lambda, &resid, &mut rng);
        if iter >= cfg.n_burn {
            draws.push(DrawState {
                trees: forest.trees.clone(),
                sigma: sigma2.sqrt(),
            });
        }
    }
    let acceptance_rate = forest.accepted as f64 / forest.proposals.max(1) as f64;
    let mut ensemble = PosteriorEnsemble {
        draws,
        feature_count: p,
        outcome_kind: OutcomeKind::Continuous,
        y_shift: shift,
        y_scale: scale,
        acceptance_rate,
        in_sample_mean: Vec::new(),
    };
    ensemble.in_sample_mean = ensemble.predict_mean(x, n)?;
    Ok(ensemble)
}

fn probit_offset(y: &[f64]) -> f64 {
    let pbar = (y.iter().sum::<f64>() / y.len() as f64).clamp(0.001, 0.999);
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(pbar)
}

/// Draw the probit latent variable: truncated normal around `mean` with unit
/// variance, positive when the observed class is 1.
fn sample_latent(mean: f64, positive: bool, rng: &mut ChaCha8Rng, norm: &Normal) -> f64 {
    let u: f64 = rng.gen();
    let p0 = norm.cdf(-mean); // P(latent <= 0)
    let q = if positive {
        p0 + u * (1.0 - p0)
    } else {
        u * p0
    };
    let q = q.clamp(1e-15, 1.0 - 1e-15);
    let v = mean + norm.inverse_cdf(q);
    v.clamp(mean - 6.0, mean + 6.0)
}

/// Fit a probit BART classifier via latent-variable augmentation; the noise
/// scale is fixed to 1 and predictions are event probabilities.
pub fn fit_bart_binary(
    x: &[f64],
    n: usize,
    p: usize,
    y: &[f64],
    cfg: &BartConfig,
) -> Result<PosteriorEnsemble> {
    cfg.validate()?;
    check_inputs(x, n, p, y)?;
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain("binary outcome must be 0/1".into()));
    }
    let n_pos = y.iter().filter(|&&v| v == 1.0).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::Domain(
            "binary outcome must contain both classes".into(),
        ));
    }
    let offset = probit_offset(y);
    let norm = Normal::new(0.0, 1.0).unwrap();

    // latent scale spans roughly [-3, 3]
    let sigma_mu = 3.0 / (2.0 * (cfg.q as f64).sqrt());
    let mut forest = Forest::new(cfg.q, n, p, x, sigma_mu, cfg.eta, cfg.beta);
    let ones = vec![1.0; n];
    let mut rng = substream(cfg.seed, 0x5052_4f42); // "PROB"
    let sigma2 = 1.0;

    let mut fit = vec![0.0; n];
    let mut resid = vec![0.0; n];
    let mut draws = Vec::with_capacity(cfg.n_draw);
    for iter in 0..cfg.n_burn + cfg.n_draw {
        // impute latents given the current fit
        for i in 0..n {
            let mean = fit[i] + offset;
            let u = sample_latent(mean, y[i] == 1.0, &mut rng, &norm);
            resid[i] = (u - offset) - fit[i];
        }
        forest.sweep(x, p, &mut resid, &ones, sigma2, &cfg.proposal_probs, &mut rng)?;
        fit = forest.total_fit(n);
        if iter >= cfg.n_burn {
            draws.push(DrawState {
                trees: forest.trees.clone(),
                sigma: 1.0,
            });
        }
    }
    let acceptance_rate = forest.accepted as f64 / forest.proposals.max(1) as f64;
    let mut ensemble = PosteriorEnsemble {
        draws,
        feature_count: p,
        outcome_kind: OutcomeKind::Binary,
        y_shift: offset,
        y_scale: 1.0,
        acceptance_rate,
        in_sample_mean: Vec::new(),
    };
    ensemble.in_sample_mean = ensemble.predict_mean(x, n)?;
    Ok(ensemble)
}

/// Result of the joint two-forest fit: per-unit instrument-effect draws plus
/// prognostic posterior means.
#[derive(Debug, Clone)]
pub struct TwoForestFit {
    /// n_draw x n (row-major per draw) instrument-effect draws on the
    /// outcome scale.
    pub itt_draws: Vec<Vec<f64>>,
    pub itt_hat: Vec<f64>,
    pub mu_hat: Vec<f64>,
    pub sigma_draws: Vec<f64>,
    pub acceptance_rate: f64,
}

/// Joint backfitting of a prognostic forest on [x, pi_hat] and a shrunken
/// treatment forest on x whose contribution enters multiplied by the
/// instrument. Tree updates alternate between the forests within each sweep.
#[allow(clippy::too_many_arguments)]
pub fn fit_two_forest(
    x: &[f64],
    n: usize,
    p: usize,
    z: &[u8],
    y: &[f64],
    pi_hat: &[f64],
    prog_cfg: &BartConfig,
    treat_cfg: &BartConfig,
    seed: u64,
) -> Result<TwoForestFit> {
    prog_cfg.validate()?;
    treat_cfg.validate()?;
    check_inputs(x, n, p, y)?;
    if z.len() != n || pi_hat.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: z.len().min(pi_hat.len()),
        });
    }

    let y_min = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let y_max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shift = 0.5 * (y_min + y_max);
    let scale = if y_max > y_min { y_max - y_min } else { 1.0 };
    let ys: Vec<f64> = y.iter().map(|v| (v - shift) / scale).collect();

    // prognostic features: covariates plus the instrument propensity
    let p_prog = p + 1;
    let mut x_prog = Vec::with_capacity(n * p_prog);
    for i in 0..n {
        x_prog.extend_from_slice(&x[i * p..(i + 1) * p]);
        x_prog.push(pi_hat[i]);
    }

    let sigma_lin = linear_residual_sd(&x_prog, n, p_prog, &ys).max(1e-9);
    let lambda = calibrate_lambda(prog_cfg.nu, prog_cfg.lambda_quantile, sigma_lin);

    let sigma_mu_prog = prog_cfg.sigma0 / (prog_cfg.q as f64).sqrt();
    let sigma_mu_treat = treat_cfg.sigma0 / (treat_cfg.q as f64).sqrt();
    let mut prog = Forest::new(
        prog_cfg.q,
        n,
        p_prog,
        &x_prog,
        sigma_mu_prog,
        prog_cfg.eta,
        prog_cfg.beta,
    );
    let mut treat = Forest::new(
        treat_cfg.q,
        n,
        p,
        x,
        sigma_mu_treat,
        treat_cfg.eta,
        treat_cfg.beta,
    );
    let ones = vec![1.0; n];
    let z_mult: Vec<f64> = z.iter().map(|&v| v as f64).collect();

    let mut resid = ys.clone();
    let mut sigma2 = sigma_lin * sigma_lin;
    let mut rng = substream(seed, 0x4243_4649); // "BCFI"

    let n_burn = prog_cfg.n_burn;
    let n_draw = prog_cfg.n_draw;
    let mut itt_draws = Vec::with_capacity(n_draw);
    let mut sigma_draws = Vec::with_capacity(n_draw);
    let mut mu_sum = vec![0.0; n];
    for iter in 0..n_burn + n_draw {
        prog.sweep(&x_prog, p_prog, &mut resid, &ones, sigma2, &prog_cfg.proposal_probs, &mut rng)?;
        treat.sweep(x, p, &mut resid, &z_mult, sigma2, &treat_cfg.proposal_probs, &mut rng)?;
        sigma2 = sample_sigma2(prog_cfg.nu, lambda, &resid, &mut rng);
        if iter >= n_burn {
            // treatment-forest effect per unit (before the z multiplier)
            let mut itt = vec![0.0; n];
            for t in &treat.trees {
                for i in 0..n {
                    itt[i] += t.predict(&x[i * p..(i + 1) * p])?;
                }
            }
            for v in itt.iter_mut() {
                *v *= scale;
            }
            itt_draws.push(itt);
            sigma_draws.push(sigma2.sqrt() * scale);
            let prog_fit = prog.total_fit(n);
            for i in 0..n {
                mu_sum[i] += prog_fit[i] * scale + shift;
            }
        }
    }
    let itt_hat: Vec<f64> = (0..n)
        .map(|i| itt_draws.iter().map(|d| d[i]).sum::<f64>() / n_draw as f64)
        .collect();
    let mu_hat: Vec<f64> = mu_sum.iter().map(|v| v / n_draw as f64).collect();
    let total_props = prog.proposals + treat.proposals;
    let acceptance_rate = (prog.accepted + treat.accepted) as f64 / total_props.max(1) as f64;
    Ok(TwoForestFit {
        itt_draws,
        itt_hat,
        mu_hat,
        sigma_draws,
        acceptance_rate,
    })
}
