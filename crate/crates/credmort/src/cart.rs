//! Piecewise-constant smoothing of per-age estimates.
//!
//! A univariate regression tree over age is grown by exhaustive least-squares
//! split search, then pruned by cost-complexity. The penalty is picked by
//! 5-fold cross-validation (folds assigned by index modulo, so results are
//! deterministic) with the one-standard-error rule, which prefers the
//! smallest tree whose error is statistically indistinguishable from the
//! best one.

/// Piecewise-constant fit over ages.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedFit {
    /// First age of each bin, ascending; the first entry is the smallest
    /// fitted age.
    pub bin_starts: Vec<i32>,
    pub means: Vec<f64>,
    /// Cost-complexity penalty selected by cross-validation.
    pub alpha: f64,
}

impl BinnedFit {
    pub fn n_bins(&self) -> usize {
        self.bin_starts.len()
    }

    /// Bin mean covering `age`; ages outside the fitted range take the
    /// nearest bin.
    pub fn predict(&self, age: i32) -> f64 {
        match self.bin_starts.binary_search(&age) {
            Ok(k) => self.means[k],
            Err(0) => self.means[0],
            Err(k) => self.means[k - 1],
        }
    }
}

struct Points {
    ages: Vec<f64>,
    // prefix sums of weight, weight*value, weight*value^2
    pw: Vec<f64>,
    pwv: Vec<f64>,
    pwv2: Vec<f64>,
}

impl Points {
    fn new(ages: &[i32], values: &[f64], weights: &[f64]) -> Self {
        let n = ages.len();
        let (mut pw, mut pwv, mut pwv2) = (vec![0.0; n + 1], vec![0.0; n + 1], vec![0.0; n + 1]);
        for i in 0..n {
            pw[i + 1] = pw[i] + weights[i];
            pwv[i + 1] = pwv[i] + weights[i] * values[i];
            pwv2[i + 1] = pwv2[i] + weights[i] * values[i] * values[i];
        }
        Points { ages: ages.iter().map(|a| f64::from(*a)).collect(), pw, pwv, pwv2 }
    }

    fn weight(&self, lo: usize, hi: usize) -> f64 {
        self.pw[hi] - self.pw[lo]
    }

    fn mean(&self, lo: usize, hi: usize) -> f64 {
        (self.pwv[hi] - self.pwv[lo]) / self.weight(lo, hi)
    }

    fn sse(&self, lo: usize, hi: usize) -> f64 {
        let w = self.weight(lo, hi);
        let sv = self.pwv[hi] - self.pwv[lo];
        let sv2 = self.pwv2[hi] - self.pwv2[lo];
        (sv2 - sv * sv / w).max(0.0)
    }
}

struct Tree {
    lo: usize,
    hi: usize,
    mean: f64,
    sse: f64,
    split: Option<Split>,
}

struct Split {
    threshold: f64,
    left: Box<Tree>,
    right: Box<Tree>,
}

fn grow(pts: &Points, lo: usize, hi: usize) -> Tree {
    let mean = pts.mean(lo, hi);
    let sse = pts.sse(lo, hi);
    let mut node = Tree { lo, hi, mean, sse, split: None };
    if hi - lo < 2 || sse <= 0.0 {
        return node;
    }
    let mut best: Option<(usize, f64)> = None;
    for s in lo + 1..hi {
        let cost = pts.sse(lo, s) + pts.sse(s, hi);
        if best.map_or(true, |(_, c)| cost < c) {
            best = Some((s, cost));
        }
    }
    let (s, cost) = best.expect("at least one candidate split");
    if sse - cost <= 1e-10 * sse {
        return node;
    }
    node.split = Some(Split {
        threshold: 0.5 * (pts.ages[s - 1] + pts.ages[s]),
        left: Box::new(grow(pts, lo, s)),
        right: Box::new(grow(pts, s, hi)),
    });
    node
}

/// Bottom-up cost-complexity pruning: a subtree survives only if its leaves'
/// error plus per-leaf penalty beats collapsing the node.
fn prune(node: &Tree, alpha: f64) -> (Tree, f64) {
    if let Some(split) = &node.split {
        let (left, lc) = prune(&split.left, alpha);
        let (right, rc) = prune(&split.right, alpha);
        let keep_cost = lc + rc;
        let collapse_cost = node.sse + alpha;
        if collapse_cost <= keep_cost {
            let leaf = Tree { lo: node.lo, hi: node.hi, mean: node.mean, sse: node.sse, split: None };
            return (leaf, collapse_cost);
        }
        let kept = Tree {
            lo: node.lo,
            hi: node.hi,
            mean: node.mean,
            sse: node.sse,
            split: Some(Split { threshold: split.threshold, left: Box::new(left), right: Box::new(right) }),
        };
        return (kept, keep_cost);
    }
    let leaf = Tree { lo: node.lo, hi: node.hi, mean: node.mean, sse: node.sse, split: None };
    let cost = node.sse + alpha;
    (leaf, cost)
}

fn leaves_and_sse(node: &Tree) -> (usize, f64) {
    match &node.split {
        None => (1, node.sse),
        Some(s) => {
            let (nl, sl) = leaves_and_sse(&s.left);
            let (nr, sr) = leaves_and_sse(&s.right);
            (nl + nr, sl + sr)
        }
    }
}

fn min_link(node: &Tree) -> Option<f64> {
    node.split.as_ref().map(|s| {
        let (n_leaves, leaf_sse) = leaves_and_sse(node);
        let own = (node.sse - leaf_sse) / (n_leaves as f64 - 1.0);
        let mut g = own;
        if let Some(l) = min_link(&s.left) {
            g = g.min(l);
        }
        if let Some(r) = min_link(&s.right) {
            g = g.min(r);
        }
        g
    })
}

fn prune_links_at(node: &mut Tree, g: f64) {
    if node.split.is_none() {
        return;
    }
    let (n_leaves, leaf_sse) = leaves_and_sse(node);
    let own = (node.sse - leaf_sse) / (n_leaves as f64 - 1.0);
    if own <= g {
        node.split = None;
        return;
    }
    let split = node.split.as_mut().expect("checked above");
    prune_links_at(&mut split.left, g);
    prune_links_at(&mut split.right, g);
}

/// Critical penalties of the weakest-link pruning sequence, ascending.
fn pruning_alphas(pts: &Points, lo: usize, hi: usize) -> Vec<f64> {
    let mut tree = grow(pts, lo, hi);
    let mut alphas = Vec::new();
    while let Some(g) = min_link(&tree) {
        alphas.push(g);
        prune_links_at(&mut tree, g * (1.0 + 1e-12));
    }
    alphas
}

fn predict_tree(node: &Tree, age: f64) -> f64 {
    match &node.split {
        None => node.mean,
        Some(s) => {
            if age < s.threshold {
                predict_tree(&s.left, age)
            } else {
                predict_tree(&s.right, age)
            }
        }
    }
}

/// Bin per-age values into a piecewise-constant function of age using
/// 5-fold cross-validation.
///
/// `ages` must be strictly increasing and parallel to `values`; optional
/// `weights` (all positive) weight both the split search and the
/// cross-validation error.
pub fn cart_bin(ages: &[i32], values: &[f64], weights: Option<&[f64]>) -> BinnedFit {
    cart_bin_k(ages, values, weights, 5)
}

/// Like [`cart_bin`] with an explicit cross-validation fold count.
pub fn cart_bin_k(
    ages: &[i32],
    values: &[f64],
    weights: Option<&[f64]>,
    k_folds: usize,
) -> BinnedFit {
    let n = ages.len();
    assert!(n > 0, "cart_bin needs at least one age");
    assert!(k_folds > 0, "cart_bin needs at least one fold");
    assert_eq!(values.len(), n);
    assert!(ages.windows(2).all(|p| p[0] < p[1]), "ages must be strictly increasing");
    let unit = vec![1.0; n];
    let weights = weights.unwrap_or(&unit);
    assert_eq!(weights.len(), n);
    assert!(weights.iter().all(|w| *w > 0.0 && w.is_finite()), "weights must be positive");

    let pts = Points::new(ages, values, weights);
    let alphas = pruning_alphas(&pts, 0, n);
    if alphas.is_empty() {
        return BinnedFit { bin_starts: vec![ages[0]], means: vec![pts.mean(0, n)], alpha: 0.0 };
    }

    let mut candidates = vec![0.0];
    for pair in alphas.windows(2) {
        candidates.push((pair[0] * pair[1]).sqrt());
    }
    candidates.push(2.0 * alphas[alphas.len() - 1]);

    let k = k_folds.min(n);
    // err[candidate][fold]: weighted squared validation error
    let mut err = vec![vec![0.0; k]; candidates.len()];
    for fold in 0..k {
        let train: Vec<usize> = (0..n).filter(|i| i % k != fold).collect();
        if train.is_empty() {
            continue;
        }
        let t_ages: Vec<i32> = train.iter().map(|&i| ages[i]).collect();
        let t_values: Vec<f64> = train.iter().map(|&i| values[i]).collect();
        let t_weights: Vec<f64> = train.iter().map(|&i| weights[i]).collect();
        let t_pts = Points::new(&t_ages, &t_values, &t_weights);
        let full = grow(&t_pts, 0, train.len());
        for (c, alpha) in candidates.iter().enumerate() {
            let (pruned, _) = prune(&full, *alpha);
            let mut e = 0.0;
            for i in (0..n).filter(|i| i % k == fold) {
                let pred = predict_tree(&pruned, f64::from(ages[i]));
                e += weights[i] * (values[i] - pred) * (values[i] - pred);
            }
            err[c][fold] = e;
        }
    }

    let totals: Vec<f64> = err.iter().map(|f| f.iter().sum()).collect();
    let best = totals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite CV errors"))
        .map(|(i, _)| i)
        .expect("at least one candidate");
    // one-standard-error rule: the largest penalty whose error stays within
    // one fold-level standard error of the minimum
    let fold_mean = totals[best] / k as f64;
    let fold_var = err[best]
        .iter()
        .map(|e| (e - fold_mean) * (e - fold_mean))
        .sum::<f64>()
        / (k as f64 - 1.0).max(1.0);
    let se_total = (fold_var * k as f64).sqrt();
    let threshold = totals[best] + se_total;
    let chosen = candidates
        .iter()
        .enumerate()
        .filter(|(i, _)| totals[*i] <= threshold)
        .map(|(_, a)| *a)
        .fold(f64::NEG_INFINITY, f64::max);

    let full = grow(&pts, 0, n);
    let (pruned, _) = prune(&full, chosen);
    let mut bin_starts = Vec::new();
    let mut means = Vec::new();
    collect_bins(&pruned, ages, &mut bin_starts, &mut means);
    BinnedFit { bin_starts, means, alpha: chosen }
}

fn collect_bins(node: &Tree, ages: &[i32], starts: &mut Vec<i32>, means: &mut Vec<f64>) {
    match &node.split {
        None => {
            starts.push(ages[node.lo]);
            means.push(node.mean);
        }
        Some(s) => {
            collect_bins(&s.left, ages, starts, means);
            collect_bins(&s.right, ages, starts, means);
        }
    }
}
