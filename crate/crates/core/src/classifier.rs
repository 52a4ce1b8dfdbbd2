//! Random-forest membership classifier: bootstrap-sampled CART trees grown
//! with Gini impurity, scored by the mean of leaf class-1 fractions.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIExample {
    pub utterance_id: String,
    pub speaker_id: String,
    /// 1 for member, 0 for non-member.
    pub label: u8,
    pub feature_set: String,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RfConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Nodes with fewer distinct training samples become leaves.
    pub min_samples_split: usize,
    pub seed: u64,
}

impl Default for RfConfig {
    fn default() -> Self {
        RfConfig {
            n_trees: 100,
            max_depth: 20,
            min_samples_split: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        /// Bootstrap-weighted fraction of class-1 samples.
        value: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf_value(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub seed: u64,
    pub feature_set: String,
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

struct Grower<'a> {
    xs: &'a [&'a [f64]],
    ys: &'a [u8],
    weights: Vec<u32>,
    n_features: usize,
    mtry: usize,
    max_depth: usize,
    min_samples_split: usize,
    nodes: Vec<Node>,
}

fn gini(w1: f64, w: f64) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let p = w1 / w;
    2.0 * p * (1.0 - p)
}

impl Grower<'_> {
    fn totals(&self, idx: &[usize]) -> (f64, f64) {
        idx.iter().fold((0.0, 0.0), |(w, w1), &i| {
            let wi = self.weights[i] as f64;
            (w + wi, w1 + wi * f64::from(self.ys[i]))
        })
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut impl Rng) -> usize {
        let (w, w1) = self.totals(&idx);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: w1 / w });
        if w1 == 0.0 || w1 == w || depth >= self.max_depth || idx.len() < self.min_samples_split {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(&idx, w, w1, rng) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| self.xs[i][feature] <= threshold);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    /// Examines features in a random order until `mtry` non-constant ones
    /// have been tried, then keeps going only while no valid split exists.
    fn best_split(&self, idx: &[usize], w: f64, w1: f64, rng: &mut impl Rng) -> Option<(usize, f64)> {
        let mut order: Vec<usize> = (0..self.n_features).collect();
        order.shuffle(rng);
        let parent = gini(w1, w) * w;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut tried = 0;
        let mut sorted: Vec<usize> = idx.to_vec();
        for f in order {
            if tried >= self.mtry && best.is_some() {
                break;
            }
            sorted.sort_by(|&a, &b| self.xs[a][f].total_cmp(&self.xs[b][f]));
            let lo = self.xs[sorted[0]][f];
            let hi = self.xs[sorted[sorted.len() - 1]][f];
            if lo == hi {
                continue;
            }
            tried += 1;
            let (mut lw, mut lw1) = (0.0, 0.0);
            for k in 0..sorted.len() - 1 {
                let i = sorted[k];
                let wi = self.weights[i] as f64;
                lw += wi;
                lw1 += wi * f64::from(self.ys[i]);
                let (a, b) = (self.xs[i][f], self.xs[sorted[k + 1]][f]);
                if a == b {
                    continue;
                }
                let cost = gini(lw1, lw) * lw + gini(w1 - lw1, w - lw) * (w - lw);
                if best.is_none_or(|(c, _, _)| cost < c) {
                    let mid = a + (b - a) / 2.0;
                    let threshold = if mid >= b { a } else { mid };
                    best = Some((cost, f, threshold));
                }
            }
        }
        best.filter(|(c, _, _)| *c <= parent).map(|(_, f, t)| (f, t))
    }
}

fn check_examples(train: &[MIExample]) -> Result<usize> {
    if train.len() < 2 {
        return Err(Error::invalid("forest training needs at least two examples"));
    }
    let n_features = train[0].features.len();
    if n_features == 0 {
        return Err(Error::invalid("examples have no features"));
    }
    for e in train {
        if e.features.len() != n_features || e.feature_set != train[0].feature_set {
            return Err(Error::Layout(format!(
                "example `{}` does not match the layout of `{}`",
                e.utterance_id, train[0].utterance_id
            )));
        }
        if e.label > 1 {
            return Err(Error::invalid(format!("label {} is not 0 or 1", e.label)));
        }
        if e.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite feature in `{}`",
                e.utterance_id
            )));
        }
    }
    let positives = train.iter().filter(|e| e.label == 1).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::invalid("forest training needs both classes present"));
    }
    Ok(n_features)
}

/// Trains a forest. Examples are sorted by utterance id first, and each
/// tree's randomness derives from `(seed, tree index)`, so input order and
/// thread scheduling do not affect the result.
pub fn rf_train(train: &[MIExample], cfg: &RfConfig) -> Result<Forest> {
    let n_features = check_examples(train)?;
    if cfg.n_trees == 0 || cfg.max_depth == 0 {
        return Err(Error::invalid("forest needs at least one tree and depth >= 1"));
    }
    let mut sorted: Vec<&MIExample> = train.iter().collect();
    sorted.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    let xs: Vec<&[f64]> = sorted.iter().map(|e| e.features.as_slice()).collect();
    let ys: Vec<u8> = sorted.iter().map(|e| e.label).collect();
    let n = xs.len();
    let mtry = (n_features as f64).sqrt().ceil() as usize;

    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(cfg.seed, "tree", &[t as u64]);
            let mut weights = vec![0u32; n];
            for _ in 0..n {
                weights[rng.random_range(0..n)] += 1;
            }
            let idx: Vec<usize> = (0..n).filter(|&i| weights[i] > 0).collect();
            let mut g = Grower {
                xs: &xs,
                ys: &ys,
                weights,
                n_features,
                mtry,
                max_depth: cfg.max_depth,
                min_samples_split: cfg.min_samples_split.max(2),
                nodes: Vec::new(),
            };
            g.grow(idx, 0, &mut rng);
            Tree { nodes: g.nodes }
        })
        .collect();
    Ok(Forest {
        seed: cfg.seed,
        feature_set: sorted[0].feature_set.clone(),
        n_features,
        trees,
    })
}

/// Mean over trees of the reached leaf's class-1 fraction.
pub fn rf_score(forest: &Forest, features: &[f64]) -> Result<f64> {
    if features.len() != forest.n_features {
        return Err(Error::Layout(format!(
            "forest expects {} features, got {}",
            forest.n_features,
            features.len()
        )));
    }
    if forest.trees.is_empty() {
        return Err(Error::invalid("forest has no trees"));
    }
    let total: f64 = forest.trees.iter().map(|t| t.leaf_value(features)).sum();
    Ok(total / forest.trees.len() as f64)
}

/// 1 iff the score reaches `threshold` (inclusive).
pub fn rf_predict(forest: &Forest, features: &[f64], threshold: f64) -> Result<u8> {
    Ok(u8::from(rf_score(forest, features)? >= threshold))
}

/// `u64` little-endian length followed by the JSON encoding.
pub fn forest_bytes(forest: &Forest) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(forest)?;
    let mut out = Vec::with_capacity(json.len() + 8);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

pub fn forest_from_bytes(bytes: &[u8]) -> Result<Forest> {
    if bytes.len() < 8 {
        return Err(Error::format(0, "truncated forest length prefix"));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() - 8 != len {
        return Err(Error::format(
            8,
            format!("forest body is {} bytes, prefix says {len}", bytes.len() - 8),
        ));
    }
    let forest: Forest = serde_json::from_slice(&bytes[8..])
        .map_err(|e| Error::format(8, format!("bad forest JSON: {e}")))?;
    for t in &forest.trees {
        for node in &t.nodes {
            let ok = match *node {
                Node::Split {
                    feature,
                    left,
                    right,
                    ..
                } => feature < forest.n_features && left < t.nodes.len() && right < t.nodes.len(),
                Node::Leaf { value } => (0.0..=1.0).contains(&value),
            };
            if !ok {
                return Err(Error::format(8, "forest node out of range"));
            }
        }
    }
    Ok(forest)
}
