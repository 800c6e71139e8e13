//! Random forest classifier for the schedulability boundary.
//!
//! Trees are grown on bootstrap resamples with Gini splits over a random
//! subset of features at each node. An instance goes left iff
//! `feature <= threshold`. Each tree draws from its own ChaCha stream derived
//! from the master seed, so a forest is a pure function of
//! `(instances, hyperparams)` regardless of how many workers build it.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::LabeledInstance;
use crate::task::{AllocationGrid, Feature, FeaturePolicy, TaskType, FEATURE_COUNT};

pub const MODEL_VERSION: &str = "v1";

const CHECKSUM_PREFIX: &str = "sha256:";

/// Gini impurity `1 - Σ p_c²` over the two classes.
pub fn gini_impurity(class_counts: [u64; 2]) -> Result<f64> {
    let n = class_counts[0] + class_counts[1];
    if n == 0 {
        return Err(Error::EmptyNode);
    }
    let n = n as f64;
    let p0 = class_counts[0] as f64 / n;
    let p1 = class_counts[1] as f64 / n;
    Ok(1.0 - (p0 * p0 + p1 * p1))
}

fn impurity(counts: [u64; 2]) -> f64 {
    gini_impurity(counts).unwrap_or(0.0)
}

/// Impurity decrease of a split, given class counts on each side.
pub fn split_gain(left: [u64; 2], right: [u64; 2]) -> f64 {
    let parent = [left[0] + right[0], left[1] + right[1]];
    let n = (parent[0] + parent[1]) as f64;
    let nl = (left[0] + left[1]) as f64;
    let nr = (right[0] + right[1]) as f64;
    impurity(parent) - (nl / n * impurity(left) + nr / n * impurity(right))
}

/// `Σ_side (c0² + c1²) / n_side` as an exact fraction. Higher purity means
/// lower weighted Gini impurity, so splits are ranked without rounding.
#[derive(Clone, Copy, Debug)]
struct Purity {
    num: u128,
    den: u128,
}

impl Purity {
    fn squares(c: [u64; 2]) -> u128 {
        u128::from(c[0]).pow(2) + u128::from(c[1]).pow(2)
    }

    fn node(c: [u64; 2]) -> Purity {
        Purity {
            num: Self::squares(c),
            den: u128::from(c[0] + c[1]),
        }
    }

    fn split(left: [u64; 2], right: [u64; 2]) -> Purity {
        let nl = u128::from(left[0] + left[1]);
        let nr = u128::from(right[0] + right[1]);
        Purity {
            num: Self::squares(left) * nr + Self::squares(right) * nl,
            den: nl * nr,
        }
    }

    fn exceeds(&self, other: &Purity) -> bool {
        self.num * other.den > other.num * self.den
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitChoice {
    pub feature_index: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Best Gini split over the candidate features, or `None` when no split has
/// positive gain. Splits are compared exactly; ties go to the lower feature
/// index, then lower threshold.
pub fn best_split(instances: &[LabeledInstance], candidate_features: &[usize]) -> Option<SplitChoice> {
    let idx: Vec<usize> = (0..instances.len()).collect();
    best_split_among(instances, &idx, candidate_features, 1)
}

fn best_split_among(
    data: &[LabeledInstance],
    idx: &[usize],
    candidate_features: &[usize],
    min_leaf: usize,
) -> Option<SplitChoice> {
    if idx.len() < 2 {
        return None;
    }
    let mut features = candidate_features.to_vec();
    features.sort_unstable();
    features.dedup();

    let mut total = [0u64; 2];
    for &i in idx {
        total[usize::from(data[i].label.min(1))] += 1;
    }

    let parent = Purity::node(total);
    let mut best: Option<(SplitChoice, Purity)> = None;
    let mut column: Vec<(f64, u8)> = Vec::with_capacity(idx.len());
    for &f in &features {
        column.clear();
        column.extend(idx.iter().map(|&i| (data[i].features[f], data[i].label.min(1))));
        column.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut left = [0u64; 2];
        for k in 0..column.len() - 1 {
            left[usize::from(column[k].1)] += 1;
            let (lo, hi) = (column[k].0, column[k + 1].0);
            if lo == hi {
                continue;
            }
            let n_left = k + 1;
            if n_left < min_leaf || column.len() - n_left < min_leaf {
                continue;
            }
            let right = [total[0] - left[0], total[1] - left[1]];
            let purity = Purity::split(left, right);
            if purity.exceeds(&parent) && best.is_none_or(|(_, b)| purity.exceeds(&b)) {
                let choice = SplitChoice {
                    feature_index: f,
                    threshold: midpoint(lo, hi),
                    gain: split_gain(left, right),
                };
                best = Some((choice, purity));
            }
        }
    }
    best.map(|(choice, _)| choice)
}

/// Midpoint of `lo < hi` that still routes `lo` left and `hi` right.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid >= lo && mid < hi {
        mid
    } else {
        lo
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub features_per_split: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            n_trees: 100,
            max_depth: 12,
            min_samples_leaf: 5,
            features_per_split: (FEATURE_COUNT as f64).sqrt().ceil() as usize,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidHyperparams("n_trees must be at least 1".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::InvalidHyperparams("min_samples_leaf must be at least 1".into()));
        }
        if self.features_per_split == 0 || self.features_per_split > FEATURE_COUNT {
            return Err(Error::InvalidHyperparams(format!(
                "features_per_split must lie in 1..={FEATURE_COUNT}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        label: u8,
        class_counts: [u64; 2],
    },
}

/// A decision tree stored as a flat node array; the root is node 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// A tree that is a single leaf.
    pub fn leaf(label: u8, class_counts: [u64; 2]) -> Tree {
        Tree {
            nodes: vec![Node::Leaf { label, class_counts }],
        }
    }

    /// Index of the leaf reached by `x`.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
                Node::Leaf { .. } => return i,
            }
        }
    }

    /// Node indices from the root to the reached leaf.
    pub fn path(&self, x: &[f64]) -> Vec<usize> {
        let mut path = vec![0];
        let mut i = 0;
        while let Node::Split {
            feature,
            threshold,
            left,
            right,
        } = self.nodes[i]
        {
            i = if x[feature] <= threshold { left } else { right };
            path.push(i);
        }
        path
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        match self.nodes[self.leaf_index(x)] {
            Node::Leaf { label, .. } => label,
            Node::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
                Node::Leaf { .. } => 0,
            }
        }
        go(&self.nodes, 0)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.nodes.is_empty() {
            return Err("empty tree".into());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Node::Split {
                feature,
                threshold,
                left,
                right,
            } = *node
            {
                if feature >= FEATURE_COUNT || threshold.is_nan() {
                    return Err(format!("node {i} has an invalid split"));
                }
                if left <= i || right <= i || left >= self.nodes.len() || right >= self.nodes.len() || left == right {
                    return Err(format!("node {i} has invalid children"));
                }
            }
        }
        Ok(())
    }
}

fn leaf_label(counts: [u64; 2]) -> u8 {
    u8::from(counts[1] > counts[0])
}

struct TreeBuilder<'a, R> {
    data: &'a [LabeledInstance],
    hp: &'a Hyperparams,
    rng: &'a mut R,
    nodes: Vec<Node>,
}

impl<R: Rng> TreeBuilder<'_, R> {
    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let mut counts = [0u64; 2];
        for &i in &idx {
            counts[usize::from(self.data[i].label.min(1))] += 1;
        }
        let id = self.nodes.len();
        let leaf = Node::Leaf {
            label: leaf_label(counts),
            class_counts: counts,
        };
        let pure = counts[0] == 0 || counts[1] == 0;
        if depth >= self.hp.max_depth || pure || idx.len() < 2 * self.hp.min_samples_leaf {
            self.nodes.push(leaf);
            return id;
        }
        let features = sample(self.rng, FEATURE_COUNT, self.hp.features_per_split).into_vec();
        let Some(split) = best_split_among(self.data, &idx, &features, self.hp.min_samples_leaf) else {
            self.nodes.push(leaf);
            return id;
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.data[i].features[split.feature_index] <= split.threshold);
        self.nodes.push(leaf);
        let left = self.grow(left_idx, depth + 1);
        let right = self.grow(right_idx, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature_index,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }
}

/// Grows one tree over `instances` (already resampled by the caller).
pub fn build_tree<R: Rng>(instances: &[LabeledInstance], hyperparams: &Hyperparams, rng: &mut R) -> Tree {
    let idx = (0..instances.len()).collect();
    build_tree_on(instances, idx, hyperparams, rng)
}

fn build_tree_on<R: Rng>(data: &[LabeledInstance], idx: Vec<usize>, hp: &Hyperparams, rng: &mut R) -> Tree {
    let mut builder = TreeBuilder {
        data,
        hp,
        rng,
        nodes: Vec::new(),
    };
    builder.grow(idx, 0);
    Tree { nodes: builder.nodes }
}

/// Feature names, the allocation grid, and default mutability the model was
/// trained for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub names: Vec<String>,
    pub grid: AllocationGrid,
    pub mutable: Vec<Feature>,
}

impl Default for FeatureMeta {
    fn default() -> Self {
        FeatureMeta {
            names: Feature::names(),
            grid: AllocationGrid::default(),
            mutable: FeaturePolicy::default().mutable_features,
        }
    }
}

impl FeatureMeta {
    pub fn with_grid(grid: AllocationGrid) -> Self {
        FeatureMeta {
            grid,
            ..FeatureMeta::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "snake_case")]
pub enum TaskTypeScope {
    #[default]
    Global,
    PerType { task_type: TaskType },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetrics {
    pub train_accuracy: f64,
    /// `None` when no instance was ever out of bag.
    pub oob_error: Option<f64>,
    pub n_instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub version: String,
    pub hyperparams: Hyperparams,
    pub feature_meta: FeatureMeta,
    pub task_type_scope: TaskTypeScope,
    pub metrics: TrainingMetrics,
    pub trees: Vec<Tree>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: u8,
    pub vote_fraction: f64,
}

impl Forest {
    /// Assembles a forest from prebuilt trees.
    pub fn from_trees(trees: Vec<Tree>, feature_meta: FeatureMeta) -> Forest {
        Forest {
            version: MODEL_VERSION.to_string(),
            hyperparams: Hyperparams {
                n_trees: trees.len(),
                ..Hyperparams::default()
            },
            feature_meta,
            task_type_scope: TaskTypeScope::Global,
            metrics: TrainingMetrics::default(),
            trees,
        }
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn grid(&self) -> &AllocationGrid {
        &self.feature_meta.grid
    }

    /// Number of trees voting schedulable.
    pub fn votes(&self, x: &[f64]) -> usize {
        self.trees.iter().filter(|t| t.predict(x) == 1).count()
    }

    /// Majority vote; an exact tie is non-schedulable.
    pub fn predict(&self, features: &[f64]) -> Result<Prediction> {
        let expected = self.feature_meta.names.len();
        if features.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: features.len(),
            });
        }
        if self.trees.is_empty() {
            return Err(Error::UntrainedModel);
        }
        let votes = self.votes(features);
        Ok(Prediction {
            label: u8::from(2 * votes > self.trees.len()),
            vote_fraction: votes as f64 / self.trees.len() as f64,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let body = serde_json::to_string(self)?;
        let digest = hex::encode(Sha256::digest(body.as_bytes()));
        Ok(format!("{body}\n{CHECKSUM_PREFIX}{digest}\n").into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Forest> {
        let text = std::str::from_utf8(bytes).map_err(|_| Error::CorruptModel("not valid UTF-8".into()))?;
        let text = text.strip_suffix('\n').unwrap_or(text);
        let (body, checksum) = text
            .rsplit_once('\n')
            .ok_or_else(|| Error::CorruptModel("missing checksum line".into()))?;
        let expected = checksum
            .strip_prefix(CHECKSUM_PREFIX)
            .ok_or_else(|| Error::CorruptModel("missing checksum line".into()))?;
        if hex::encode(Sha256::digest(body.as_bytes())) != expected {
            return Err(Error::CorruptModel("checksum mismatch".into()));
        }
        let value: serde_json::Value =
            serde_json::from_str(body).map_err(|e| Error::CorruptModel(e.to_string()))?;
        let version = value.get("version").and_then(|v| v.as_str()).unwrap_or("");
        if version != MODEL_VERSION {
            return Err(Error::VersionMismatch {
                found: version.to_string(),
            });
        }
        let forest: Forest = serde_json::from_value(value).map_err(|e| Error::CorruptModel(e.to_string()))?;
        if forest.trees.len() != forest.hyperparams.n_trees {
            return Err(Error::CorruptModel("tree count disagrees with hyperparams".into()));
        }
        if forest.feature_meta.names.len() != FEATURE_COUNT {
            return Err(Error::CorruptModel("unexpected feature count".into()));
        }
        for (i, tree) in forest.trees.iter().enumerate() {
            tree.check().map_err(|e| Error::CorruptModel(format!("tree {i}: {e}")))?;
        }
        forest.feature_meta.grid.validate()?;
        Ok(forest)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Forest> {
        Forest::from_bytes(&std::fs::read(path)?)
    }
}

pub fn predict(forest: &Forest, features: &[f64]) -> Result<Prediction> {
    forest.predict(features)
}

pub fn serialize(forest: &Forest) -> Result<Vec<u8>> {
    forest.to_bytes()
}

pub fn deserialize(bytes: &[u8]) -> Result<Forest> {
    Forest::from_bytes(bytes)
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub feature_meta: FeatureMeta,
    pub scope: TaskTypeScope,
    /// Threads used to grow trees. Does not affect the result.
    pub workers: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            feature_meta: FeatureMeta::default(),
            scope: TaskTypeScope::Global,
            workers: 1,
        }
    }
}

pub fn train_forest(instances: &[LabeledInstance], hyperparams: &Hyperparams) -> Result<Forest> {
    train_forest_with(instances, hyperparams, &TrainOptions::default())
}

/// Stream-separated RNG for tree `index`.
fn tree_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

struct GrownTree {
    tree: Tree,
    in_bag: Vec<bool>,
}

fn grow_one(instances: &[LabeledInstance], hp: &Hyperparams, index: usize) -> GrownTree {
    let n = instances.len();
    let mut rng = tree_rng(hp.seed, index);
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let mut in_bag = vec![false; n];
    for &i in &idx {
        in_bag[i] = true;
    }
    GrownTree {
        tree: build_tree_on(instances, idx, hp, &mut rng),
        in_bag,
    }
}

pub fn train_forest_with(
    instances: &[LabeledInstance],
    hyperparams: &Hyperparams,
    options: &TrainOptions,
) -> Result<Forest> {
    hyperparams.validate()?;
    let needed = hyperparams.min_samples_leaf.max(2);
    if instances.len() < needed {
        return Err(Error::InsufficientData {
            needed,
            got: instances.len(),
        });
    }
    let positives = instances.iter().filter(|x| x.label == 1).count();
    if positives == 0 || positives == instances.len() {
        return Err(Error::SingleClass);
    }

    let workers = options.workers.clamp(1, hyperparams.n_trees);
    let mut grown: Vec<Option<GrownTree>> = (0..hyperparams.n_trees).map(|_| None).collect();
    if workers == 1 {
        for (i, slot) in grown.iter_mut().enumerate() {
            *slot = Some(grow_one(instances, hyperparams, i));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        (w..hyperparams.n_trees)
                            .step_by(workers)
                            .map(|i| (i, grow_one(instances, hyperparams, i)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for handle in handles {
                for (i, g) in handle.join().expect("tree worker panicked") {
                    grown[i] = Some(g);
                }
            }
        });
    }
    let grown: Vec<GrownTree> = grown.into_iter().map(|g| g.expect("every tree grown")).collect();

    let mut oob_seen = 0usize;
    let mut oob_wrong = 0usize;
    for (j, inst) in instances.iter().enumerate() {
        let (mut votes, mut total) = (0usize, 0usize);
        for g in grown.iter().filter(|g| !g.in_bag[j]) {
            total += 1;
            votes += usize::from(g.tree.predict(&inst.features) == 1);
        }
        if total > 0 {
            oob_seen += 1;
            oob_wrong += usize::from(u8::from(2 * votes > total) != inst.label);
        }
    }

    let mut forest = Forest {
        version: MODEL_VERSION.to_string(),
        hyperparams: hyperparams.clone(),
        feature_meta: options.feature_meta.clone(),
        task_type_scope: options.scope,
        metrics: TrainingMetrics::default(),
        trees: grown.into_iter().map(|g| g.tree).collect(),
    };
    let correct = instances
        .iter()
        .filter(|x| u8::from(forest.votes(&x.features) * 2 > forest.n_trees()) == x.label)
        .count();
    forest.metrics = TrainingMetrics {
        train_accuracy: correct as f64 / instances.len() as f64,
        oob_error: (oob_seen > 0).then(|| oob_wrong as f64 / oob_seen as f64),
        n_instances: instances.len(),
    };
    Ok(forest)
}

/// Trains a global forest plus one dedicated forest per task type with at
/// least `min_per_type` instances (and both classes). The global forest is
/// first in the returned list.
pub fn train_per_type(
    instances: &[LabeledInstance],
    hyperparams: &Hyperparams,
    options: &TrainOptions,
    min_per_type: usize,
) -> Result<Vec<Forest>> {
    let mut forests = vec![train_forest_with(instances, hyperparams, options)?];
    let mut by_type: BTreeMap<TaskType, Vec<LabeledInstance>> = BTreeMap::new();
    for inst in instances {
        by_type.entry(inst.task_type).or_default().push(inst.clone());
    }
    for (task_type, subset) in by_type {
        if subset.len() < min_per_type {
            continue;
        }
        let opts = TrainOptions {
            scope: TaskTypeScope::PerType { task_type },
            ..options.clone()
        };
        match train_forest_with(&subset, hyperparams, &opts) {
            Ok(forest) => forests.push(forest),
            Err(Error::SingleClass) => {
                log::warn!("task type {task_type} has a single class; serving it from the global forest")
            }
            Err(e) => return Err(e),
        }
    }
    Ok(forests)
}

/// The dedicated forest for `task_type` if present, else the global one.
pub fn select_forest(forests: &[Forest], task_type: TaskType) -> Option<&Forest> {
    forests
        .iter()
        .find(|f| f.task_type_scope == TaskTypeScope::PerType { task_type })
        .or_else(|| forests.iter().find(|f| f.task_type_scope == TaskTypeScope::Global))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(x: [f64; 4], label: u8) -> LabeledInstance {
        LabeledInstance::new(x, label)
    }

    /// Label 1 iff cpu * replicas >= 12, features on the default grid.
    fn separable(n: usize, seed: u64) -> Vec<LabeledInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let cpu = f64::from(rng.random_range(1..=16u32));
                let rep = f64::from(rng.random_range(1..=8u32));
                let mem = [2.0, 4.0, 8.0, 16.0, 32.0, 64.0][rng.random_range(0..6)];
                inst([cpu, mem, rep, 100.0], u8::from(cpu * rep >= 12.0))
            })
            .collect()
    }

    #[test]
    fn gini_values() {
        assert_eq!(gini_impurity([10, 0]).unwrap(), 0.0);
        assert_eq!(gini_impurity([5, 5]).unwrap(), 0.5);
        assert_eq!(gini_impurity([2, 6]).unwrap(), 0.375);
        assert!(matches!(gini_impurity([0, 0]), Err(Error::EmptyNode)));
    }

    #[test]
    fn separable_pair_splits_at_midpoint() {
        let data = [inst([1.0, 0.0, 0.0, 0.0], 0), inst([3.0, 0.0, 0.0, 0.0], 1)];
        let s = best_split(&data, &[0]).unwrap();
        assert_eq!((s.feature_index, s.threshold, s.gain), (0, 2.0, 0.5));
    }

    #[test]
    fn constant_labels_give_no_split() {
        let data: Vec<_> = (0..6).map(|i| inst([f64::from(i), 1.0, 2.0, 3.0], 1)).collect();
        assert!(best_split(&data, &[0, 1, 2, 3]).is_none());
    }

    #[test]
    fn ties_prefer_lower_feature() {
        // features 0 and 2 separate identically
        let data = [inst([1.0, 5.0, 1.0, 0.0], 0), inst([2.0, 5.0, 2.0, 0.0], 1)];
        assert_eq!(best_split(&data, &[2, 0]).unwrap().feature_index, 0);
    }

    #[test]
    fn pure_input_gives_single_leaf() {
        let data: Vec<_> = (0..20).map(|i| inst([f64::from(i), 1.0, 1.0, 1.0], 1)).collect();
        let tree = build_tree(&data, &Hyperparams::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(tree, Tree::leaf(1, [0, 20]));
    }

    #[test]
    fn zero_depth_gives_majority_leaf() {
        let data = separable(200, 1);
        let hp = Hyperparams {
            max_depth: 0,
            ..Hyperparams::default()
        };
        let tree = build_tree(&data, &hp, &mut ChaCha8Rng::seed_from_u64(0));
        let ones = data.iter().filter(|x| x.label == 1).count() as u64;
        let zeros = data.len() as u64 - ones;
        assert_eq!(tree, Tree::leaf(u8::from(ones > zeros), [zeros, ones]));
    }

    #[test]
    fn tie_leaf_is_conservative() {
        assert_eq!(leaf_label([3, 3]), 0);
    }

    #[test]
    fn trees_respect_depth_and_leaf_size() {
        let data = separable(500, 2);
        let hp = Hyperparams {
            n_trees: 10,
            max_depth: 4,
            min_samples_leaf: 7,
            ..Hyperparams::default()
        };
        let forest = train_forest(&data, &hp).unwrap();
        assert_eq!(forest.n_trees(), 10);
        for tree in &forest.trees {
            assert!(tree.depth() <= 4);
            for node in &tree.nodes {
                if let Node::Leaf { class_counts, .. } = node {
                    assert!(class_counts[0] + class_counts[1] >= 7);
                }
            }
        }
    }

    #[test]
    fn split_children_partition_parent() {
        let data = separable(300, 3);
        let hp = Hyperparams {
            n_trees: 5,
            ..Hyperparams::default()
        };
        let forest = train_forest(&data, &hp).unwrap();
        fn count(nodes: &[Node], i: usize) -> u64 {
            match nodes[i] {
                Node::Leaf { class_counts, .. } => class_counts[0] + class_counts[1],
                Node::Split { left, right, .. } => count(nodes, left) + count(nodes, right),
            }
        }
        for tree in &forest.trees {
            // every tree is grown on a bootstrap of the full size
            assert_eq!(count(&tree.nodes, 0), 300);
        }
    }

    #[test]
    fn single_tree_forest_matches_its_tree() {
        let data = separable(400, 4);
        let hp = Hyperparams {
            n_trees: 1,
            ..Hyperparams::default()
        };
        let forest = train_forest(&data, &hp).unwrap();
        for x in separable(200, 99) {
            assert_eq!(forest.predict(&x.features).unwrap().label, forest.trees[0].predict(&x.features));
        }
    }

    #[test]
    fn separable_training_accuracy() {
        let data = separable(2000, 5);
        let forest = train_forest(&data, &Hyperparams::default()).unwrap();
        assert!(forest.metrics.train_accuracy >= 0.95, "{:?}", forest.metrics);
        let oob = forest.metrics.oob_error.unwrap();
        assert!(oob <= 0.10, "oob {oob}");
    }

    #[test]
    fn training_errors() {
        let ones: Vec<_> = (0..20).map(|i| inst([f64::from(i), 1.0, 1.0, 1.0], 1)).collect();
        assert!(matches!(train_forest(&ones, &Hyperparams::default()), Err(Error::SingleClass)));
        let few = [inst([1.0; 4], 0), inst([2.0; 4], 1)];
        assert!(matches!(
            train_forest(&few, &Hyperparams::default()),
            Err(Error::InsufficientData { needed: 5, got: 2 })
        ));
    }

    #[test]
    fn worker_count_does_not_change_model() {
        let data = separable(600, 6);
        let hp = Hyperparams {
            n_trees: 24,
            seed: 42,
            ..Hyperparams::default()
        };
        let one = train_forest_with(&data, &hp, &TrainOptions::default()).unwrap();
        let eight = train_forest_with(
            &data,
            &hp,
            &TrainOptions {
                workers: 8,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(one.to_bytes().unwrap(), eight.to_bytes().unwrap());
    }

    #[test]
    fn predict_vote_arithmetic() {
        let meta = FeatureMeta::default();
        let forest = Forest::from_trees(vec![Tree::leaf(1, [0, 1]); 4], meta.clone());
        assert_eq!(
            forest.predict(&[1.0; 4]).unwrap(),
            Prediction {
                label: 1,
                vote_fraction: 1.0
            }
        );
        let forest = Forest::from_trees(vec![Tree::leaf(1, [0, 1]), Tree::leaf(1, [0, 1]), Tree::leaf(0, [1, 0])], meta.clone());
        let p = forest.predict(&[1.0; 4]).unwrap();
        assert_eq!((p.label, p.vote_fraction), (1, 2.0 / 3.0));
        let tie = Forest::from_trees(vec![Tree::leaf(1, [0, 1]), Tree::leaf(0, [1, 0])], meta);
        assert_eq!(tie.predict(&[1.0; 4]).unwrap().label, 0);
        assert!(matches!(tie.predict(&[1.0; 3]), Err(Error::DimensionMismatch { expected: 4, got: 3 })));
    }

    #[test]
    fn serialization_round_trip_and_corruption() {
        let data = separable(300, 7);
        let hp = Hyperparams {
            n_trees: 10,
            ..Hyperparams::default()
        };
        let forest = train_forest(&data, &hp).unwrap();
        let bytes = serialize(&forest).unwrap();
        let back = deserialize(&bytes).unwrap();
        assert_eq!(back, forest);

        let truncated = &bytes[..bytes.len() / 2];
        assert!(matches!(deserialize(truncated), Err(Error::CorruptModel(_))));

        let mut flipped = bytes.clone();
        let pos = flipped.iter().position(|&b| b == b'1').unwrap();
        flipped[pos] = b'2';
        assert!(matches!(deserialize(&flipped), Err(Error::CorruptModel(_))));

        let mut future = forest.clone();
        future.version = "v999".into();
        let text = serde_json::to_string(&future).unwrap();
        let digest = hex::encode(Sha256::digest(text.as_bytes()));
        let bytes = format!("{text}\nsha256:{digest}\n");
        assert!(matches!(
            deserialize(bytes.as_bytes()),
            Err(Error::VersionMismatch { found }) if found == "v999"
        ));
    }

    #[test]
    fn per_type_selection() {
        let mut data = separable(400, 8);
        for (i, x) in data.iter_mut().enumerate() {
            x.task_type = if i < 60 { TaskType::Lra } else { TaskType::Bpa };
        }
        let hp = Hyperparams {
            n_trees: 5,
            ..Hyperparams::default()
        };
        let forests = train_per_type(&data, &hp, &TrainOptions::default(), 50).unwrap();
        assert_eq!(forests.len(), 3);
        let lra = select_forest(&forests, TaskType::Lra).unwrap();
        assert_eq!(lra.task_type_scope, TaskTypeScope::PerType { task_type: TaskType::Lra });
        assert_eq!(lra.metrics.n_instances, 60);

        let forests = train_per_type(&data, &hp, &TrainOptions::default(), 100).unwrap();
        assert_eq!(forests.len(), 2);
        assert_eq!(select_forest(&forests, TaskType::Lra).unwrap().task_type_scope, TaskTypeScope::Global);
    }

    #[test]
    fn route_replay_reaches_same_leaf() {
        let data = separable(500, 9);
        let hp = Hyperparams {
            n_trees: 8,
            ..Hyperparams::default()
        };
        let forest = train_forest(&data, &hp).unwrap();
        for x in separable(100, 10) {
            for tree in &forest.trees {
                let path = tree.path(&x.features);
                for w in path.windows(2) {
                    let Node::Split { feature, threshold, left, right } = tree.nodes[w[0]] else {
                        panic!("interior path node is a leaf");
                    };
                    let expected = if x.features[feature] <= threshold { left } else { right };
                    assert_eq!(w[1], expected);
                }
                assert_eq!(*path.last().unwrap(), tree.leaf_index(&x.features));
            }
        }
    }
}
