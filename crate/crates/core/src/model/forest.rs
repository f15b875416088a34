//! Bootstrap random forest over Gini splits.
//!
//! Every leaf keeps the in-bag training samples that reached it together with
//! their bootstrap multiplicities. Soft votes are in-bag class proportions, so
//! the vote and the forest similarity kernel describe the same estimator.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{argmax_direction, Direction, Sample};

pub const FOREST_FORMAT: &str = "mandi-forest";
pub const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub num_trees: usize,
    /// `Some(0)` grows a single root leaf per tree.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Defaults to `ceil(sqrt(num_features))`.
    pub features_per_split: Option<usize>,
    pub rng_seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            num_trees: 100,
            max_depth: None,
            min_samples_leaf: 1,
            features_per_split: None,
            rng_seed: 0,
        }
    }
}

impl ForestParams {
    pub fn resolved_features_per_split(&self, num_features: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (num_features as f64).sqrt().ceil() as usize)
            .clamp(1, num_features.max(1))
    }
}

/// In-bag sample reaching a leaf, with its bootstrap multiplicity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafMember {
    pub sample: u32,
    pub multiplicity: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        /// `x[feature] <= threshold` goes left.
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        /// In-bag counts over `[down, flat, up]`.
        class_counts: [u32; 3],
        members: Vec<LeafMember>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Index of the leaf node `x` falls into.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { .. } => return i,
            }
        }
    }

    pub fn leaf(&self, x: &[f64]) -> (&[u32; 3], &[LeafMember]) {
        match &self.nodes[self.leaf_index(x)] {
            Node::Leaf { class_counts, members } => (class_counts, members),
            Node::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }

    pub fn leaves(&self) -> impl Iterator<Item = (&[u32; 3], &[LeafMember])> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf { class_counts, members } => Some((class_counts, members.as_slice())),
            Node::Split { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub format: String,
    pub format_version: u32,
    pub params: ForestParams,
    pub num_features: usize,
    pub trees: Vec<Tree>,
    /// Per tree, bootstrap multiplicity of each training sample.
    pub inbag: Vec<Vec<u32>>,
    pub training_samples: Vec<Sample>,
}

struct Grower<'a> {
    x: &'a [&'a [f64]],
    y: &'a [usize],
    params: &'a ForestParams,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

fn gini(counts: &[u32; 3]) -> f64 {
    let n: u32 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl Grower<'_> {
    fn counts(&self, members: &[LeafMember]) -> [u32; 3] {
        let mut c = [0u32; 3];
        for m in members {
            c[self.y[m.sample as usize]] += m.multiplicity;
        }
        c
    }

    fn grow(&mut self, members: Vec<LeafMember>, depth: usize) -> usize {
        let counts = self.counts(&members);
        let total: u32 = counts.iter().sum();
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_reached = self.params.max_depth.is_some_and(|d| depth >= d);
        let too_small = (total as usize) < 2 * self.params.min_samples_leaf;

        let split = if pure || depth_reached || too_small {
            None
        } else {
            self.best_split(&members, total)
        };

        let Some(split) = split else {
            self.nodes.push(Node::Leaf {
                class_counts: counts,
                members,
            });
            return self.nodes.len() - 1;
        };

        let (left, right): (Vec<_>, Vec<_>) = members
            .into_iter()
            .partition(|m| self.x[m.sample as usize][split.feature] <= split.threshold);
        let id = self.nodes.len();
        // placeholder, patched once both children exist
        self.nodes.push(Node::Leaf {
            class_counts: [0; 3],
            members: Vec::new(),
        });
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: l,
            right: r,
        };
        id
    }

    fn best_split(&mut self, members: &[LeafMember], total: u32) -> Option<BestSplit> {
        let num_features = self.x[0].len();
        let features = sample_indices(&mut self.rng, num_features, self.mtry).into_vec();
        let min_leaf = self.params.min_samples_leaf as u32;
        let mut best: Option<BestSplit> = None;
        let mut order: Vec<(f64, usize, u32)> = Vec::with_capacity(members.len());
        for f in features {
            order.clear();
            order.extend(
                members
                    .iter()
                    .map(|m| (self.x[m.sample as usize][f], self.y[m.sample as usize], m.multiplicity)),
            );
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = [0u32; 3];
            let mut right = self.counts(members);
            let mut n_left = 0u32;
            for i in 0..order.len() - 1 {
                let (v, label, w) = order[i];
                left[label] += w;
                right[label] -= w;
                n_left += w;
                let next = order[i + 1].0;
                if next <= v {
                    continue;
                }
                let n_right = total - n_left;
                if n_left < min_leaf || n_right < min_leaf {
                    continue;
                }
                let score = (n_left as f64 * gini(&left) + n_right as f64 * gini(&right)) / total as f64;
                if best.as_ref().is_none_or(|b| score < b.score) {
                    let mut threshold = 0.5 * (v + next);
                    if threshold >= next {
                        threshold = v;
                    }
                    best = Some(BestSplit {
                        feature: f,
                        threshold,
                        score,
                    });
                }
            }
        }
        best
    }
}

fn fit_tree(x: &[&[f64]], y: &[usize], params: &ForestParams, mtry: usize, seed: u64) -> (Tree, Vec<u32>) {
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inbag = vec![0u32; n];
    for _ in 0..n {
        inbag[rng.random_range(0..n)] += 1;
    }
    let members = inbag
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, &c)| LeafMember {
            sample: i as u32,
            multiplicity: c,
        })
        .collect();
    let mut grower = Grower {
        x,
        y,
        params,
        mtry,
        rng,
        nodes: Vec::new(),
    };
    grower.grow(members, 0);
    (Tree { nodes: grower.nodes }, inbag)
}

/// Fits `params.num_trees` trees in parallel; tree `b` uses seed
/// `rng_seed + b`, so results do not depend on thread scheduling.
pub fn fit_forest(samples: Vec<Sample>, params: &ForestParams) -> Result<ForestModel> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("training samples"));
    }
    if params.num_trees == 0 || params.min_samples_leaf == 0 {
        return Err(Error::InvalidInput(
            "num_trees and min_samples_leaf must be >= 1".into(),
        ));
    }
    let num_features = samples[0].features.len();
    if let Some(bad) = samples.iter().find(|s| s.features.len() != num_features) {
        return Err(Error::FeatureLength {
            expected: num_features,
            got: bad.features.len(),
        });
    }
    if let Some(f) = params.features_per_split {
        if f == 0 || f > num_features {
            return Err(Error::InvalidInput(format!(
                "features_per_split {f} must lie in 1..={num_features}"
            )));
        }
    }
    let mtry = params.resolved_features_per_split(num_features);
    let x: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
    let y: Vec<usize> = samples.iter().map(|s| s.direction.index()).collect();

    let fitted: Vec<(Tree, Vec<u32>)> = (0..params.num_trees)
        .into_par_iter()
        .map(|b| fit_tree(&x, &y, params, mtry, params.rng_seed.wrapping_add(b as u64)))
        .collect();
    let (trees, inbag) = fitted.into_iter().unzip();
    Ok(ForestModel {
        format: FOREST_FORMAT.to_string(),
        format_version: FOREST_FORMAT_VERSION,
        params: params.clone(),
        num_features,
        trees,
        inbag,
        training_samples: samples,
    })
}

impl ForestModel {
    pub fn check_features(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.num_features {
            return Err(Error::FeatureLength {
                expected: self.num_features,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Soft vote: mean over trees of the in-bag class proportions of the leaf
    /// reached by `x`.
    pub fn predict_proba(&self, x: &[f64]) -> Result<[f64; 3]> {
        self.check_features(x)?;
        let mut probs = [0.0; 3];
        for tree in &self.trees {
            let (counts, _) = tree.leaf(x);
            let n: u32 = counts.iter().sum();
            for c in 0..3 {
                probs[c] += counts[c] as f64 / n as f64;
            }
        }
        let b = self.trees.len() as f64;
        Ok(probs.map(|p| p / b))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: ForestModel = serde_json::from_str(s)?;
        if model.format != FOREST_FORMAT || model.format_version != FOREST_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported model format {} v{}",
                model.format, model.format_version
            )));
        }
        Ok(model)
    }
}

pub fn forest_predict(model: &ForestModel, x: &[f64]) -> Result<(Direction, [f64; 3])> {
    let probs = model.predict_proba(x)?;
    Ok((argmax_direction(&probs), probs))
}
