use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Dataset;

#[derive(Debug, Clone, Copy)]
pub(crate) struct TreeParams {
    max_depth: Option<usize>,
    min_leaf: usize,
}

impl TreeParams {
    /// `max_depth == 0` means unlimited.
    pub(crate) fn new(max_depth: usize, min_leaf: usize) -> Self {
        TreeParams { max_depth: (max_depth > 0).then_some(max_depth), min_leaf: min_leaf.max(1) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// CART classification tree; leaves hold the viral fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Tree {
    nodes: Vec<Node>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Split {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

struct Builder<'a> {
    data: &'a Dataset,
    params: TreeParams,
    /// Features tried per split; `None` tries all.
    max_features: Option<usize>,
    rng: Option<ChaCha8Rng>,
    nodes: Vec<Node>,
    importance: Vec<f64>,
    root_size: f64,
}

impl Builder<'_> {
    fn best_split_on(&self, idx: &[usize], feature: usize, pos: usize) -> Option<Split> {
        let mut pairs: Vec<(f64, bool)> =
            idx.iter().map(|&i| (self.data.rows[i][feature], self.data.labels[i])).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = pairs.len();
        let mut best: Option<Split> = None;
        let mut left_pos = 0;
        for i in 0..n - 1 {
            left_pos += pairs[i].1 as usize;
            if pairs[i].0 == pairs[i + 1].0 {
                continue;
            }
            let nl = i + 1;
            let nr = n - nl;
            if nl < self.params.min_leaf || nr < self.params.min_leaf {
                continue;
            }
            let impurity =
                (nl as f64 * gini(left_pos, nl) + nr as f64 * gini(pos - left_pos, nr)) / n as f64;
            if best.as_ref().is_none_or(|b| impurity < b.impurity) {
                best = Some(Split { feature, threshold: (pairs[i].0 + pairs[i + 1].0) / 2.0, impurity });
            }
        }
        best
    }

    fn best_split(&mut self, idx: &[usize], pos: usize) -> Option<Split> {
        let n_features = self.data.n_features();
        let mut order: Vec<usize> = (0..n_features).collect();
        let take = match (&mut self.rng, self.max_features) {
            (Some(rng), Some(m)) => {
                order.shuffle(rng);
                m.min(n_features)
            }
            _ => n_features,
        };
        // Ties resolve toward the lowest feature index within the batch tried.
        let mut tried: Vec<usize> = order[..take].to_vec();
        tried.sort_unstable();
        let pick = |b: &Self, feats: &[usize]| {
            feats.iter().filter_map(|&f| b.best_split_on(idx, f, pos)).fold(None, |acc: Option<Split>, s| {
                match acc {
                    Some(a) if a.impurity <= s.impurity => Some(a),
                    _ => Some(s),
                }
            })
        };
        if let Some(s) = pick(self, &tried) {
            return Some(s);
        }
        // Nothing splittable among the sampled features: keep drawing.
        order[take..].iter().find_map(|&f| self.best_split_on(idx, f, pos))
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.data.labels[i]).count();
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: pos as f64 / n as f64 });

        let pure = pos == 0 || pos == n;
        let deep = self.params.max_depth.is_some_and(|d| depth >= d);
        if pure || deep || n < 2 * self.params.min_leaf {
            return id;
        }
        let Some(split) = self.best_split(&idx, pos) else { return id };

        self.importance[split.feature] += n as f64 / self.root_size * (gini(pos, n) - split.impurity);
        let (l, r): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| self.data.rows[i][split.feature] <= split.threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split { feature: split.feature, threshold: split.threshold, left, right };
        id
    }
}

impl Tree {
    fn build(
        data: &Dataset,
        idx: Vec<usize>,
        params: TreeParams,
        max_features: Option<usize>,
        rng: Option<ChaCha8Rng>,
    ) -> (Tree, Vec<f64>) {
        let mut b = Builder {
            data,
            params,
            max_features,
            rng,
            nodes: Vec::new(),
            importance: vec![0.0; data.n_features()],
            root_size: idx.len() as f64,
        };
        b.grow(idx, 0);
        (Tree { nodes: b.nodes }, b.importance)
    }

    pub(crate) fn fit_all(data: &Dataset, params: TreeParams) -> Tree {
        Tree::build(data, (0..data.len()).collect(), params, None, None).0
    }

    pub(crate) fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

/// Bagged trees with per-split feature subsampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Forest {
    trees: Vec<Tree>,
    /// Mean decrease in Gini impurity per feature, summing to 1 unless no
    /// tree ever split.
    pub(crate) importances: Vec<f64>,
}

impl Forest {
    pub(crate) fn fit(
        data: &Dataset,
        n_trees: usize,
        max_features: usize,
        params: TreeParams,
        seed: u64,
    ) -> Forest {
        let n = data.len();
        let grown: Vec<(Tree, Vec<f64>)> = (0..n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64 + 1);
                let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                Tree::build(data, idx, params, Some(max_features), Some(rng))
            })
            .collect();

        let mut importances = vec![0.0; data.n_features()];
        for (_, imp) in &grown {
            let total: f64 = imp.iter().sum();
            if total > 0.0 {
                for (acc, v) in importances.iter_mut().zip(imp) {
                    *acc += v / total;
                }
            }
        }
        let total: f64 = importances.iter().sum();
        if total > 0.0 {
            importances.iter_mut().for_each(|v| *v /= total);
        }
        Forest { trees: grown.into_iter().map(|(t, _)| t).collect(), importances }
    }

    pub(crate) fn score(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}
