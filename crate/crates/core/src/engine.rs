//! Counterfactual generation over a trained forest.
//!
//! Each tree contributes the boxes of its schedulable leaves, found by a
//! best-first traversal that skips subtrees whose distance lower bound already
//! exceeds the proximity threshold. The engine then runs a best-first
//! branch-and-bound over grid-index regions: a region is emitted once a strict
//! majority of trees place all of it in a schedulable box, discarded once a
//! majority is out of reach, and otherwise split along a box edge. Grid points
//! leave the search in ascending `(distance, sparsity, -votes, config)` order,
//! which is exactly the order the exhaustive oracle sorts by, and the greedy
//! diversity filter consumes them until `q` candidates are admitted.
//!
//! All thresholds are hard constraints: a candidate must be predicted
//! schedulable by the forest, lie on the grid, be within `tau_prox` of the
//! original, change at most `k_max` features, and keep at least `tau_div` from
//! every other admitted candidate.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{Forest, Node, Tree};
use crate::task::{
    Action, AllocationGrid, ContainerConfig, Counterfactual, DistanceScale, Feature, FeaturePolicy, TaskSpec,
    FEATURE_COUNT,
};

/// Largest configuration space the enumerating routines accept.
pub const ENUMERATION_LIMIT: usize = 1_000_000;

/// Half-open interval `(lower, upper]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub const FULL: Interval = Interval {
        lower: f64::NEG_INFINITY,
        upper: f64::INFINITY,
    };

    pub fn contains(&self, x: f64) -> bool {
        self.lower < x && x <= self.upper
    }

    /// Distance from `x` to the interval, zero inside.
    pub fn gap(&self, x: f64) -> f64 {
        if x <= self.lower {
            self.lower - x
        } else if x > self.upper {
            x - self.upper
        } else {
            0.0
        }
    }
}

/// The region of feature space reaching one leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafBox {
    pub intervals: [Interval; FEATURE_COUNT],
    pub label: u8,
    pub tree: usize,
    pub leaf: usize,
    pub class_counts: [u64; 2],
}

impl LeafBox {
    pub fn contains(&self, x: &[f64; FEATURE_COUNT]) -> bool {
        self.intervals.iter().zip(x).all(|(iv, &v)| iv.contains(v))
    }
}

/// Every leaf of `tree` as a box. Upper bounds are clipped to the grid
/// maximum of features that have grid values.
pub fn collect_leaves(tree: &Tree, tree_index: usize, grid: &AllocationGrid) -> Vec<LeafBox> {
    let mut out = Vec::new();
    let mut stack = vec![(0usize, [Interval::FULL; FEATURE_COUNT])];
    while let Some((i, intervals)) = stack.pop() {
        match tree.nodes[i] {
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let mut r = intervals;
                r[feature].lower = r[feature].lower.max(threshold);
                stack.push((right, r));
                let mut l = intervals;
                l[feature].upper = l[feature].upper.min(threshold);
                stack.push((left, l));
            }
            Node::Leaf { label, class_counts } => {
                let mut clipped = intervals;
                for f in Feature::ALL {
                    if let Some(&max) = grid.values(f).last() {
                        let iv = &mut clipped[f.index()];
                        iv.upper = iv.upper.min(max);
                    }
                }
                out.push(LeafBox {
                    intervals: clipped,
                    label,
                    tree: tree_index,
                    leaf: i,
                    class_counts,
                });
            }
        }
    }
    out
}

/// Boxes of the leaves labeled schedulable.
pub fn collect_schedulable_leaves(tree: &Tree, tree_index: usize, grid: &AllocationGrid) -> Vec<LeafBox> {
    collect_leaves(tree, tree_index, grid)
        .into_iter()
        .filter(|b| b.label == 1)
        .collect()
}

/// The discrete search space around one original task: per feature, the
/// values a candidate may take.
#[derive(Clone, Debug)]
struct SearchSpace {
    original: TaskSpec,
    orig: [f64; FEATURE_COUNT],
    orig_idx: [usize; FEATURE_COUNT],
    axes: [Vec<f64>; FEATURE_COUNT],
    /// `terms[f][i]`: distance contribution of taking value `axes[f][i]`.
    terms: [Vec<f64>; FEATURE_COUNT],
    mutable: [bool; FEATURE_COUNT],
    scale: DistanceScale,
    policy: FeaturePolicy,
}

/// Candidate values per feature: grid values for mutable features (the
/// deadline axis also keeps the original deadline), the original alone for
/// immutable ones.
fn candidate_axis(original: &TaskSpec, grid: &AllocationGrid, policy: &FeaturePolicy, f: Feature) -> Vec<f64> {
    let o = original.feature(f);
    if !policy.is_mutable(f) {
        return vec![o];
    }
    let mut values = grid.values(f).into_owned();
    if f == Feature::DeadlineS && !values.contains(&o) {
        values.push(o);
        values.sort_by(f64::total_cmp);
    }
    values
}

fn validate_request(original: &TaskSpec, grid: &AllocationGrid, policy: &FeaturePolicy) -> Result<()> {
    policy.validate()?;
    grid.validate()?;
    original.validate()?;
    original.config.check_on_grid(grid)
}

impl SearchSpace {
    fn new(original: &TaskSpec, grid: &AllocationGrid, policy: &FeaturePolicy) -> Result<SearchSpace> {
        validate_request(original, grid, policy)?;
        let scale = DistanceScale::new(grid, policy);
        let orig = original.features();
        let axes = Feature::ALL.map(|f| candidate_axis(original, grid, policy, f));
        let orig_idx = Feature::ALL.map(|f| {
            axes[f.index()]
                .iter()
                .position(|&v| v == orig[f.index()])
                .expect("original value is on its axis")
        });
        let terms = Feature::ALL.map(|f| {
            axes[f.index()]
                .iter()
                .map(|&v| scale.term(f, (orig[f.index()] - v).abs()))
                .collect()
        });
        Ok(SearchSpace {
            original: original.clone(),
            orig,
            orig_idx,
            axes,
            terms,
            mutable: policy.mutable_mask(),
            scale,
            policy: policy.clone(),
        })
    }

    fn values(&self, idx: &[usize; FEATURE_COUNT]) -> [f64; FEATURE_COUNT] {
        std::array::from_fn(|f| self.axes[f][idx[f]])
    }

    fn distance(&self, idx: &[usize; FEATURE_COUNT]) -> f64 {
        self.scale.sum_terms(&std::array::from_fn(|f| self.terms[f][idx[f]]))
    }

    fn sparsity(&self, idx: &[usize; FEATURE_COUNT]) -> usize {
        (0..FEATURE_COUNT).filter(|&f| idx[f] != self.orig_idx[f]).count()
    }

    fn admissible(&self, distance: f64, sparsity: usize) -> bool {
        distance <= self.policy.tau_prox && sparsity <= self.policy.k_max
    }

    /// Per-feature index of the axis value in `iv` closest to the original,
    /// ties toward the smaller value. `None` if some interval holds no value.
    fn nearest_in(&self, intervals: &[Interval; FEATURE_COUNT]) -> Option<[usize; FEATURE_COUNT]> {
        let mut out = [0usize; FEATURE_COUNT];
        for f in 0..FEATURE_COUNT {
            let o = self.orig[f];
            let mut best: Option<usize> = None;
            for (i, &v) in self.axes[f].iter().enumerate() {
                if !intervals[f].contains(v) {
                    continue;
                }
                if best.is_none_or(|b| (v - o).abs() < (self.axes[f][b] - o).abs()) {
                    best = Some(i);
                }
            }
            out[f] = best?;
        }
        Some(out)
    }

    /// Lower bound on the distance of any point in the intervals, and the
    /// number of mutable features whose interval excludes the original.
    fn interval_bound(&self, intervals: &[Interval; FEATURE_COUNT]) -> (f64, usize) {
        let terms: [f64; FEATURE_COUNT] =
            std::array::from_fn(|f| self.scale.term(Feature::ALL[f], intervals[f].gap(self.orig[f])));
        let outside = (0..FEATURE_COUNT)
            .filter(|&f| self.mutable[f] && !intervals[f].contains(self.orig[f]))
            .count();
        (self.scale.sum_terms(&terms), outside)
    }

    fn immutable_inside(&self, intervals: &[Interval; FEATURE_COUNT]) -> bool {
        (0..FEATURE_COUNT).all(|f| self.mutable[f] || intervals[f].contains(self.orig[f]))
    }

    fn counterfactual(&self, idx: &[usize; FEATURE_COUNT], votes: usize, n_trees: usize) -> Counterfactual {
        let values = self.values(idx);
        let actions: Vec<Action> = Feature::ALL
            .iter()
            .filter(|f| idx[f.index()] != self.orig_idx[f.index()])
            .map(|&f| Action::new(f, self.orig[f.index()], values[f.index()]))
            .collect();
        Counterfactual {
            config: ContainerConfig::new(values[0], values[1], values[2] as u32),
            deadline_s: values[3],
            sparsity: actions.len(),
            actions,
            distance: self.distance(idx),
            vote_fraction: votes as f64 / n_trees as f64,
        }
    }
}

/// Per-feature nearest grid value inside the box, ties toward the smaller
/// value. `None` if some mutable interval holds no grid value or an immutable
/// feature's original value lies outside the box.
pub fn nearest_grid_point_in_box(
    original: &TaskSpec,
    leaf_box: &LeafBox,
    grid: &AllocationGrid,
    policy: &FeaturePolicy,
) -> Result<Option<TaskSpec>> {
    let space = SearchSpace::new(original, grid, policy)?;
    Ok(space
        .nearest_in(&leaf_box.intervals)
        .map(|idx| original.with_features(&space.values(&idx))))
}

/// Sum over mutable features of the normalized gap between the original and
/// the box; zero when the original lies inside.
pub fn box_distance_lower_bound(
    original: &TaskSpec,
    leaf_box: &LeafBox,
    grid: &AllocationGrid,
    policy: &FeaturePolicy,
) -> f64 {
    let scale = DistanceScale::new(grid, policy);
    let orig = original.features();
    let terms: [f64; FEATURE_COUNT] =
        std::array::from_fn(|f| scale.term(Feature::ALL[f], leaf_box.intervals[f].gap(orig[f])));
    scale.sum_terms(&terms)
}

/// Result of a single-tree traversal.
#[derive(Clone, Debug)]
pub struct Traversal {
    /// Schedulable leaves satisfying every per-candidate constraint, in
    /// ascending order of their nearest point's distance.
    pub boxes: Vec<LeafBox>,
    /// Leaves reached during the traversal.
    pub visited_leaves: usize,
}

impl Traversal {
    /// The best candidate found: `(distance, sparsity, config)` of the
    /// nearest grid point of the first box.
    pub fn best(
        &self,
        original: &TaskSpec,
        grid: &AllocationGrid,
        policy: &FeaturePolicy,
    ) -> Result<Option<(f64, usize, TaskSpec)>> {
        let space = SearchSpace::new(original, grid, policy)?;
        Ok(self.boxes.first().and_then(|b| {
            let idx = space.nearest_in(&b.intervals)?;
            Some((space.distance(&idx), space.sparsity(&idx), original.with_features(&space.values(&idx))))
        }))
    }
}

enum Frontier {
    Open {
        bound: f64,
        node: usize,
        intervals: [Interval; FEATURE_COUNT],
    },
    Resolved {
        distance: f64,
        sparsity: usize,
        idx: [usize; FEATURE_COUNT],
        leaf: LeafBox,
    },
}

impl Frontier {
    fn key(&self) -> f64 {
        match self {
            Frontier::Open { bound, .. } => *bound,
            Frontier::Resolved { distance, .. } => *distance,
        }
    }
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Frontier {}
impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Frontier {
    /// Reversed so `BinaryHeap` pops the smallest key; open nodes precede
    /// resolved leaves at equal keys.
    fn cmp(&self, other: &Self) -> Ordering {
        let ord = self.key().total_cmp(&other.key()).then_with(|| match (self, other) {
            (Frontier::Open { node: a, .. }, Frontier::Open { node: b, .. }) => a.cmp(b),
            (Frontier::Open { .. }, Frontier::Resolved { .. }) => Ordering::Less,
            (Frontier::Resolved { .. }, Frontier::Open { .. }) => Ordering::Greater,
            (
                Frontier::Resolved { sparsity: sa, idx: ia, .. },
                Frontier::Resolved { sparsity: sb, idx: ib, .. },
            ) => sa.cmp(sb).then_with(|| ia.cmp(ib)),
        });
        ord.reverse()
    }
}

impl SearchSpace {
    fn traverse(&self, tree: &Tree, tree_index: usize, budget: Option<usize>, prune: bool) -> Traversal {
        let mut heap = BinaryHeap::new();
        heap.push(Frontier::Open {
            bound: 0.0,
            node: 0,
            intervals: [Interval::FULL; FEATURE_COUNT],
        });
        let mut boxes = Vec::new();
        let mut visited_leaves = 0;
        let limit = budget.unwrap_or(usize::MAX);

        while let Some(item) = heap.pop() {
            match item {
                Frontier::Open { node, intervals, .. } => match tree.nodes[node] {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        let mut l = intervals;
                        l[feature].upper = l[feature].upper.min(threshold);
                        let mut r = intervals;
                        r[feature].lower = r[feature].lower.max(threshold);
                        for (child, iv) in [(left, l), (right, r)] {
                            let (bound, outside) = self.interval_bound(&iv);
                            if prune
                                && (bound > self.policy.tau_prox
                                    || outside > self.policy.k_max
                                    || !self.immutable_inside(&iv))
                            {
                                continue;
                            }
                            heap.push(Frontier::Open {
                                bound,
                                node: child,
                                intervals: iv,
                            });
                        }
                    }
                    Node::Leaf { label, class_counts } => {
                        visited_leaves += 1;
                        if label != 1 || !self.immutable_inside(&intervals) {
                            continue;
                        }
                        let Some(idx) = self.nearest_in(&intervals) else {
                            continue;
                        };
                        let (distance, sparsity) = (self.distance(&idx), self.sparsity(&idx));
                        if !self.admissible(distance, sparsity) {
                            continue;
                        }
                        heap.push(Frontier::Resolved {
                            distance,
                            sparsity,
                            idx,
                            leaf: LeafBox {
                                intervals,
                                label,
                                tree: tree_index,
                                leaf: node,
                                class_counts,
                            },
                        });
                    }
                },
                Frontier::Resolved { leaf, .. } => {
                    boxes.push(leaf);
                    if boxes.len() >= limit {
                        break;
                    }
                }
            }
        }
        Traversal { boxes, visited_leaves }
    }
}

/// Best-first traversal of one tree toward schedulable leaves near the
/// original. Subtrees whose distance bound exceeds `tau_prox`, whose excluded
/// mutable features exceed `k_max`, or which exclude an immutable value are
/// skipped. Stops after `budget` satisfying leaves (`None` for no limit).
pub fn pruned_traversal(
    tree: &Tree,
    tree_index: usize,
    original: &TaskSpec,
    policy: &FeaturePolicy,
    grid: &AllocationGrid,
    budget: Option<usize>,
) -> Result<Traversal> {
    if budget == Some(0) {
        return Err(Error::InvalidPolicy("traversal budget must be at least 1".into()));
    }
    Ok(SearchSpace::new(original, grid, policy)?.traverse(tree, tree_index, budget, true))
}

/// Exhaustive traversal visiting every leaf; returns the same satisfying
/// leaves as an unlimited [`pruned_traversal`].
pub fn unpruned_traversal(
    tree: &Tree,
    tree_index: usize,
    original: &TaskSpec,
    policy: &FeaturePolicy,
    grid: &AllocationGrid,
) -> Result<Traversal> {
    Ok(SearchSpace::new(original, grid, policy)?.traverse(tree, tree_index, None, false))
}

/// Hint returned when no counterfactual satisfies the constraints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoFeasibleHint {
    pub message: String,
    /// Smallest grid deadline above the original that admits a candidate.
    pub min_deadline_s: Option<f64>,
    pub deadline_increase_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub original: TaskSpec,
    pub already_schedulable: bool,
    pub original_vote_fraction: f64,
    pub exhausted: bool,
    pub counterfactuals: Vec<Counterfactual>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint: Option<NoFeasibleHint>,
}

/// Inclusive per-feature index ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Region {
    lo: [usize; FEATURE_COUNT],
    hi: [usize; FEATURE_COUNT],
}

impl Region {
    fn contains(&self, other: &Region) -> bool {
        (0..FEATURE_COUNT).all(|f| self.lo[f] <= other.lo[f] && other.hi[f] <= self.hi[f])
    }

    fn intersects(&self, other: &Region) -> bool {
        (0..FEATURE_COUNT).all(|f| self.lo[f] <= other.hi[f] && other.lo[f] <= self.hi[f])
    }

    fn points(&self) -> impl Iterator<Item = [usize; FEATURE_COUNT]> + '_ {
        (self.lo[0]..=self.hi[0]).flat_map(move |a| {
            (self.lo[1]..=self.hi[1]).flat_map(move |b| {
                (self.lo[2]..=self.hi[2])
                    .flat_map(move |c| (self.lo[3]..=self.hi[3]).map(move |d| [a, b, c, d]))
            })
        })
    }
}

impl SearchSpace {
    fn region_of(&self, intervals: &[Interval; FEATURE_COUNT]) -> Option<Region> {
        let mut lo = [0; FEATURE_COUNT];
        let mut hi = [0; FEATURE_COUNT];
        for f in 0..FEATURE_COUNT {
            let inside: Vec<usize> = (0..self.axes[f].len())
                .filter(|&i| intervals[f].contains(self.axes[f][i]))
                .collect();
            lo[f] = *inside.first()?;
            hi[f] = *inside.last()?;
        }
        Some(Region { lo, hi })
    }

    /// Smallest distance and sparsity of any point in the region.
    fn region_bound(&self, r: &Region) -> (f64, usize) {
        let terms: [f64; FEATURE_COUNT] = std::array::from_fn(|f| {
            self.terms[f][r.lo[f]..=r.hi[f]]
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min)
        });
        let outside = (0..FEATURE_COUNT)
            .filter(|&f| !(r.lo[f] <= self.orig_idx[f] && self.orig_idx[f] <= r.hi[f]))
            .count();
        (self.scale.sum_terms(&terms), outside)
    }
}

enum Pending {
    Region { bound: f64, seq: usize, region: Region },
    Point(PointKey),
}

#[derive(Clone, Copy, Debug)]
struct PointKey {
    distance: f64,
    sparsity: usize,
    votes: usize,
    idx: [usize; FEATURE_COUNT],
}

impl Pending {
    fn key(&self) -> f64 {
        match self {
            Pending::Region { bound, .. } => *bound,
            Pending::Point(p) => p.distance,
        }
    }
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        let ord = self.key().total_cmp(&other.key()).then_with(|| match (self, other) {
            (Pending::Region { seq: a, .. }, Pending::Region { seq: b, .. }) => a.cmp(b),
            (Pending::Region { .. }, Pending::Point(_)) => Ordering::Less,
            (Pending::Point(_), Pending::Region { .. }) => Ordering::Greater,
            (Pending::Point(a), Pending::Point(b)) => a
                .sparsity
                .cmp(&b.sparsity)
                .then_with(|| b.votes.cmp(&a.votes))
                .then_with(|| a.idx.cmp(&b.idx)),
        });
        ord.reverse()
    }
}

/// Greedy max-min admission: keep a candidate iff it is at least `tau_div`
/// from every candidate already kept.
fn admits_diverse(scale: &DistanceScale, kept: &[[f64; FEATURE_COUNT]], x: &[f64; FEATURE_COUNT], tau_div: f64) -> bool {
    kept.iter().all(|k| scale.distance(k, x) >= tau_div)
}

fn search(forest: &Forest, space: &SearchSpace) -> Vec<Counterfactual> {
    let n_trees = forest.n_trees();
    let tree_regions: Vec<Vec<Region>> = forest
        .trees
        .iter()
        .enumerate()
        .map(|(t, tree)| {
            space
                .traverse(tree, t, None, true)
                .boxes
                .iter()
                .filter_map(|b| space.region_of(&b.intervals))
                .collect()
        })
        .collect();

    let full = Region {
        lo: [0; FEATURE_COUNT],
        hi: std::array::from_fn(|f| space.axes[f].len() - 1),
    };
    let mut heap = BinaryHeap::new();
    let mut seq = 0usize;
    let mut push_region = |heap: &mut BinaryHeap<Pending>, region: Region| {
        let (bound, outside) = space.region_bound(&region);
        if space.admissible(bound, outside) {
            heap.push(Pending::Region { bound, seq, region });
            seq += 1;
        }
    };
    push_region(&mut heap, full);

    let q = space.policy.q;
    let mut kept: Vec<[f64; FEATURE_COUNT]> = Vec::new();
    let mut out = Vec::new();
    while let Some(item) = heap.pop() {
        match item {
            Pending::Point(p) => {
                let values = space.values(&p.idx);
                if admits_diverse(&space.scale, &kept, &values, space.policy.tau_div) {
                    kept.push(values);
                    out.push(space.counterfactual(&p.idx, p.votes, n_trees));
                    if out.len() == q {
                        break;
                    }
                }
            }
            Pending::Region { region, .. } => {
                let mut yes = 0;
                let mut undecided: Option<(usize, &Region)> = None;
                let mut open = 0;
                for regions in &tree_regions {
                    if regions.iter().any(|b| b.contains(&region)) {
                        yes += 1;
                    } else if let Some(b) = regions.iter().find(|b| b.intersects(&region)) {
                        open += 1;
                        undecided.get_or_insert((open, b));
                    }
                }
                if 2 * yes > n_trees {
                    for idx in region.points() {
                        let (distance, sparsity) = (space.distance(&idx), space.sparsity(&idx));
                        if !space.admissible(distance, sparsity) {
                            continue;
                        }
                        let votes = forest.votes(&space.values(&idx));
                        debug_assert!(2 * votes > n_trees);
                        heap.push(Pending::Point(PointKey {
                            distance,
                            sparsity,
                            votes,
                            idx,
                        }));
                    }
                } else if 2 * (yes + open) > n_trees {
                    let (_, cut) = undecided.expect("an undecided tree exists");
                    let (a, b) = split_region(&region, cut);
                    push_region(&mut heap, a);
                    push_region(&mut heap, b);
                }
            }
        }
    }
    out
}

/// Splits `region` along the first edge of `cut` that falls strictly inside it.
fn split_region(region: &Region, cut: &Region) -> (Region, Region) {
    for f in 0..FEATURE_COUNT {
        if cut.lo[f] > region.lo[f] {
            let mut a = *region;
            let mut b = *region;
            a.hi[f] = cut.lo[f] - 1;
            b.lo[f] = cut.lo[f];
            return (a, b);
        }
        if cut.hi[f] < region.hi[f] {
            let mut a = *region;
            let mut b = *region;
            a.hi[f] = cut.hi[f];
            b.lo[f] = cut.hi[f] + 1;
            return (a, b);
        }
    }
    unreachable!("cut intersects but does not contain the region")
}

fn check_forest(forest: &Forest) -> Result<()> {
    if forest.trees.is_empty() {
        return Err(Error::UntrainedModel);
    }
    Ok(())
}

fn candidate_set(
    forest: &Forest,
    space: &SearchSpace,
    find: impl FnOnce(&Forest, &SearchSpace) -> Vec<Counterfactual>,
) -> Result<CandidateSet> {
    let prediction = forest.predict(&space.orig)?;
    if prediction.label == 1 {
        return Ok(CandidateSet {
            original: space.original.clone(),
            already_schedulable: true,
            original_vote_fraction: prediction.vote_fraction,
            exhausted: false,
            counterfactuals: Vec::new(),
            hint: None,
        });
    }
    let counterfactuals = find(forest, space);
    Ok(CandidateSet {
        original: space.original.clone(),
        already_schedulable: false,
        original_vote_fraction: prediction.vote_fraction,
        exhausted: counterfactuals.len() < space.policy.q,
        counterfactuals,
        hint: None,
    })
}

/// Up to `q` counterfactuals for a task the forest predicts will miss its
/// deadline. An empty, exhausted result carries a hint; when the grid lists
/// deadlines the hint names the smallest later deadline that admits one.
pub fn generate_counterfactuals(
    forest: &Forest,
    original: &TaskSpec,
    policy: &FeaturePolicy,
    grid: &AllocationGrid,
) -> Result<CandidateSet> {
    check_forest(forest)?;
    let space = SearchSpace::new(original, grid, policy)?;
    let mut set = candidate_set(forest, &space, search)?;
    if !set.already_schedulable && set.counterfactuals.is_empty() {
        set.hint = Some(deadline_hint(forest, original, policy, grid)?);
    }
    Ok(set)
}

fn deadline_hint(
    forest: &Forest,
    original: &TaskSpec,
    policy: &FeaturePolicy,
    grid: &AllocationGrid,
) -> Result<NoFeasibleHint> {
    let mut fixed = policy.clone();
    fixed.mutable_features.retain(|&f| f != Feature::DeadlineS);
    fixed.k_max = fixed.k_max.min(fixed.mutable_features.len());
    fixed.q = 1;
    for &deadline in grid.deadline_values.iter().filter(|&&d| d > original.deadline_s) {
        let relaxed = original.with_feature(Feature::DeadlineS, deadline);
        let feasible = if fixed.mutable_features.is_empty() {
            forest.predict(&relaxed.features())?.label == 1
        } else {
            let space = SearchSpace::new(&relaxed, grid, &fixed)?;
            let set = candidate_set(forest, &space, search)?;
            set.already_schedulable || !set.counterfactuals.is_empty()
        };
        if feasible {
            return Ok(NoFeasibleHint {
                message: format!(
                    "no configuration meets the constraints; relaxing the deadline to {deadline} s admits one"
                ),
                min_deadline_s: Some(deadline),
                deadline_increase_s: Some(deadline - original.deadline_s),
            });
        }
    }
    Ok(NoFeasibleHint {
        message: "no configuration meets the constraints; relax the deadline or the proximity/sparsity thresholds"
            .into(),
        min_deadline_s: None,
        deadline_increase_s: None,
    })
}

/// Every configuration in the search space, in CPU-major order.
fn enumerate_space(
    original: &TaskSpec,
    grid: &AllocationGrid,
    policy: &FeaturePolicy,
) -> Result<Vec<[f64; FEATURE_COUNT]>> {
    validate_request(original, grid, policy)?;
    let axes = Feature::ALL.map(|f| candidate_axis(original, grid, policy, f));
    let size = axes.iter().try_fold(1usize, |acc, a| acc.checked_mul(a.len())).unwrap_or(usize::MAX);
    if size > ENUMERATION_LIMIT {
        return Err(Error::GridTooLarge {
            size,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut out = Vec::with_capacity(size);
    for &cpu in &axes[0] {
        for &mem in &axes[1] {
            for &rep in &axes[2] {
                for &deadline in &axes[3] {
                    out.push([cpu, mem, rep, deadline]);
                }
            }
        }
    }
    Ok(out)
}

/// Every schedulable, proximal, sparse configuration, sorted by
/// `(distance, sparsity, -vote_fraction, config)`, before diversity
/// selection. Found by exhaustive enumeration.
pub fn oracle_candidate_pool(
    forest: &Forest,
    original: &TaskSpec,
    policy: &FeaturePolicy,
    grid: &AllocationGrid,
) -> Result<Vec<Counterfactual>> {
    check_forest(forest)?;
    let scale = DistanceScale::new(grid, policy);
    let orig = original.features();
    let n = forest.n_trees();
    let mut pool: Vec<(f64, usize, usize, [f64; FEATURE_COUNT])> = Vec::new();
    for x in enumerate_space(original, grid, policy)? {
        let votes = forest.votes(&x);
        if 2 * votes <= n {
            continue;
        }
        let distance = scale.distance(&orig, &x);
        let sparsity = (0..FEATURE_COUNT).filter(|&f| x[f] != orig[f]).count();
        if distance <= policy.tau_prox && sparsity <= policy.k_max {
            pool.push((distance, sparsity, votes, x));
        }
    }
    pool.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then(b.2.cmp(&a.2))
            .then_with(|| {
                a.3.iter()
                    .zip(&b.3)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            })
    });
    Ok(pool
        .into_iter()
        .map(|(distance, sparsity, votes, x)| {
            let actions: Vec<Action> = Feature::ALL
                .iter()
                .filter(|f| x[f.index()] != orig[f.index()])
                .map(|&f| Action::new(f, orig[f.index()], x[f.index()]))
                .collect();
            Counterfactual {
                config: ContainerConfig::new(x[0], x[1], x[2] as u32),
                deadline_s: x[3],
                actions,
                distance,
                sparsity,
                vote_fraction: votes as f64 / n as f64,
            }
        })
        .collect())
}

/// Reference semantics for [`generate_counterfactuals`]: enumerate every
/// configuration, filter, sort, and apply the same greedy diversity rule.
pub fn oracle_counterfactuals(
    forest: &Forest,
    original: &TaskSpec,
    policy: &FeaturePolicy,
    grid: &AllocationGrid,
) -> Result<CandidateSet> {
    check_forest(forest)?;
    let prediction = forest.predict(&original.features())?;
    // validates and applies the size gate even on the early-return branch
    let pool = oracle_candidate_pool(forest, original, policy, grid)?;
    if prediction.label == 1 {
        return Ok(CandidateSet {
            original: original.clone(),
            already_schedulable: true,
            original_vote_fraction: prediction.vote_fraction,
            exhausted: false,
            counterfactuals: Vec::new(),
            hint: None,
        });
    }
    let scale = DistanceScale::new(grid, policy);
    let mut kept: Vec<[f64; FEATURE_COUNT]> = Vec::new();
    let mut out = Vec::new();
    for cf in pool {
        if out.len() == policy.q {
            break;
        }
        let x = cf.features();
        if admits_diverse(&scale, &kept, &x, policy.tau_div) {
            kept.push(x);
            out.push(cf);
        }
    }
    Ok(CandidateSet {
        original: original.clone(),
        already_schedulable: false,
        original_vote_fraction: prediction.vote_fraction,
        exhausted: out.len() < policy.q,
        counterfactuals: out,
        hint: None,
    })
}

/// One row of the feasible-action export.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibleRow {
    pub cpu_cores: f64,
    pub mem_alloc: f64,
    pub replicas: u32,
    pub deadline_s: f64,
    pub label: u8,
    pub vote_fraction: f64,
    pub distance: f64,
}

pub const FEASIBLE_CSV_HEADER: &str = "cpu_cores,mem_alloc,replicas,deadline_s,label,vote_fraction,distance";

/// The forest's verdict on every configuration reachable from `original`.
pub fn enumerate_feasible_actions(
    forest: &Forest,
    original: &TaskSpec,
    policy: &FeaturePolicy,
    grid: &AllocationGrid,
) -> Result<Vec<FeasibleRow>> {
    check_forest(forest)?;
    let scale = DistanceScale::new(grid, policy);
    let orig = original.features();
    enumerate_space(original, grid, policy)?
        .into_iter()
        .map(|x| {
            let p = forest.predict(&x)?;
            Ok(FeasibleRow {
                cpu_cores: x[0],
                mem_alloc: x[1],
                replicas: x[2] as u32,
                deadline_s: x[3],
                label: p.label,
                vote_fraction: p.vote_fraction,
                distance: scale.distance(&orig, &x),
            })
        })
        .collect()
}

pub fn write_feasible_csv<W: Write>(out: W, rows: &[FeasibleRow]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    if rows.is_empty() {
        writer
            .write_record(FEASIBLE_CSV_HEADER.split(','))
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_feasible_csv(text: &str) -> Result<Vec<FeasibleRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Io(std::io::Error::other(e))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{FeatureMeta, Hyperparams};
    use crate::task::apply_actions;

    fn task(cpu: f64, mem: f64, rep: u32, deadline: f64) -> TaskSpec {
        TaskSpec::new("t", ContainerConfig::new(cpu, mem, rep), deadline)
    }

    fn stump(feature: usize, threshold: f64, left: u8, right: u8) -> Tree {
        Tree {
            nodes: vec![
                Node::Split {
                    feature,
                    threshold,
                    left: 1,
                    right: 2,
                },
                Node::Leaf {
                    label: left,
                    class_counts: [u64::from(left == 0), u64::from(left == 1)],
                },
                Node::Leaf {
                    label: right,
                    class_counts: [u64::from(right == 0), u64::from(right == 1)],
                },
            ],
        }
    }

    fn forest_of(trees: Vec<Tree>) -> Forest {
        Forest::from_trees(trees, FeatureMeta::default())
    }

    #[test]
    fn single_leaf_box_spans_everything() {
        let grid = AllocationGrid::default();
        let boxes = collect_schedulable_leaves(&Tree::leaf(1, [0, 3]), 0, &grid);
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].intervals[0].upper, 16.0);
        assert_eq!(boxes[0].intervals[0].lower, f64::NEG_INFINITY);
        assert_eq!(boxes[0].intervals[3], Interval::FULL);
    }

    #[test]
    fn stump_right_leaf_box() {
        let grid = AllocationGrid::default();
        let boxes = collect_schedulable_leaves(&stump(0, 4.0, 0, 1), 0, &grid);
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].intervals[0], Interval { lower: 4.0, upper: 16.0 });
        assert_eq!(boxes[0].leaf, 2);
    }

    #[test]
    fn nearest_point_examples() {
        let grid = AllocationGrid::default();
        let policy = FeaturePolicy::default();
        let leaf_box = collect_schedulable_leaves(&stump(0, 4.0, 0, 1), 0, &grid).remove(0);
        let original = task(2.0, 8.0, 2, 50.0);
        let p = nearest_grid_point_in_box(&original, &leaf_box, &grid, &policy).unwrap().unwrap();
        assert_eq!(p.config, ContainerConfig::new(5.0, 8.0, 2));
        let inside = task(9.0, 8.0, 2, 50.0);
        let p = nearest_grid_point_in_box(&inside, &leaf_box, &grid, &policy).unwrap().unwrap();
        assert_eq!(p, inside);
        assert_eq!(box_distance_lower_bound(&inside, &leaf_box, &grid, &policy), 0.0);
        // gap of 2 cores over a 15-core range
        assert_eq!(box_distance_lower_bound(&original, &leaf_box, &grid, &policy), 2.0 / 15.0);
    }

    #[test]
    fn immutable_feature_outside_box_gives_nothing() {
        let grid = AllocationGrid::default();
        let policy = FeaturePolicy::default();
        // deadline is immutable by default; the box wants deadline > 100
        let leaf_box = collect_schedulable_leaves(&stump(3, 100.0, 0, 1), 0, &grid).remove(0);
        let original = task(2.0, 8.0, 2, 50.0);
        assert!(nearest_grid_point_in_box(&original, &leaf_box, &grid, &policy).unwrap().is_none());
    }

    #[test]
    fn schedulable_original_short_circuits() {
        let forest = forest_of(vec![Tree::leaf(1, [0, 1])]);
        let grid = AllocationGrid::default();
        let set = generate_counterfactuals(&forest, &task(4.0, 8.0, 2, 60.0), &FeaturePolicy::default(), &grid).unwrap();
        assert!(set.already_schedulable);
        assert!(set.counterfactuals.is_empty());
        assert!(!set.exhausted);
    }

    #[test]
    fn all_zero_forest_has_no_counterfactual() {
        let forest = forest_of(vec![Tree::leaf(0, [1, 0])]);
        let grid = AllocationGrid::default().with_deadlines(vec![30.0, 60.0, 120.0]).unwrap();
        let original = task(4.0, 8.0, 2, 60.0);
        let policy = FeaturePolicy::default();
        let set = generate_counterfactuals(&forest, &original, &policy, &grid).unwrap();
        assert!(set.exhausted && set.counterfactuals.is_empty());
        let hint = set.hint.unwrap();
        assert_eq!(hint.min_deadline_s, None);
        let oracle = oracle_counterfactuals(&forest, &original, &policy, &grid).unwrap();
        assert!(oracle.counterfactuals.is_empty() && oracle.exhausted);
        let rows = enumerate_feasible_actions(&forest, &original, &policy, &grid).unwrap();
        assert_eq!(rows.len(), 768);
        assert!(rows.iter().all(|r| r.label == 0));
    }

    #[test]
    fn deadline_hint_finds_smallest_relaxation() {
        // schedulable iff deadline > 100
        let forest = forest_of(vec![stump(3, 100.0, 0, 1)]);
        let grid = AllocationGrid::default().with_deadlines(vec![60.0, 90.0, 120.0, 240.0]).unwrap();
        let set = generate_counterfactuals(&forest, &task(4.0, 8.0, 2, 80.0), &FeaturePolicy::default(), &grid).unwrap();
        let hint = set.hint.unwrap();
        assert_eq!(hint.min_deadline_s, Some(120.0));
        assert_eq!(hint.deadline_increase_s, Some(40.0));

        // with the deadline mutable the engine proposes it directly
        let policy = FeaturePolicy {
            mutable_features: Feature::ALL.to_vec(),
            ..FeaturePolicy::default()
        };
        let set = generate_counterfactuals(&forest, &task(4.0, 8.0, 2, 80.0), &policy, &grid).unwrap();
        assert_eq!(set.counterfactuals[0].actions, vec![Action::new(Feature::DeadlineS, 80.0, 120.0)]);
    }

    #[test]
    fn always_one_forest_returns_nearest_diverse_points() {
        // a majority of 2 of 3 trees vote yes everywhere except cpu <= 4
        let forest = forest_of(vec![stump(0, 4.0, 0, 1), stump(0, 4.0, 0, 1), Tree::leaf(1, [0, 1])]);
        let grid = AllocationGrid::default();
        let original = task(4.0, 8.0, 2, 60.0);
        let policy = FeaturePolicy {
            tau_div: 0.2,
            q: 3,
            ..FeaturePolicy::default()
        };
        let set = generate_counterfactuals(&forest, &original, &policy, &grid).unwrap();
        assert_eq!(set.original_vote_fraction, 1.0 / 3.0);
        let cpus: Vec<f64> = set.counterfactuals.iter().map(|c| c.config.cpu_cores).collect();
        assert_eq!(cpus.len(), 3);
        // one core is 1/15 of the range, so cpu 8 is the first pure-CPU step 0.2 away from cpu 5
        assert_eq!(cpus[..2], [5.0, 8.0]);
        assert_eq!(set, oracle_counterfactuals(&forest, &original, &policy, &grid).unwrap());
    }

    #[test]
    fn degenerate_single_tree_oracle() {
        let forest = forest_of(vec![Tree::leaf(1, [0, 1])]);
        let grid = AllocationGrid::default();
        let original = task(4.0, 8.0, 2, 60.0);
        let policy = FeaturePolicy::default();
        let set = oracle_counterfactuals(&forest, &original, &policy, &grid).unwrap();
        assert!(set.already_schedulable);
    }

    #[test]
    fn grid_too_large() {
        let forest = forest_of(vec![Tree::leaf(0, [1, 0])]);
        let grid = AllocationGrid::new(
            (1..=200).map(f64::from).collect(),
            (1..=100).map(f64::from).collect(),
            (1..=100).collect(),
        )
        .unwrap();
        let original = task(4.0, 8.0, 2, 60.0);
        let policy = FeaturePolicy::default();
        assert!(matches!(
            oracle_counterfactuals(&forest, &original, &policy, &grid),
            Err(Error::GridTooLarge { size: 2_000_000, .. })
        ));
        assert!(matches!(
            enumerate_feasible_actions(&forest, &original, &policy, &grid),
            Err(Error::GridTooLarge { .. })
        ));
    }

    #[test]
    fn untrained_and_off_grid() {
        let grid = AllocationGrid::default();
        let policy = FeaturePolicy::default();
        let empty = forest_of(Vec::new());
        assert!(matches!(
            generate_counterfactuals(&empty, &task(4.0, 8.0, 2, 60.0), &policy, &grid),
            Err(Error::UntrainedModel)
        ));
        let forest = forest_of(vec![Tree::leaf(0, [1, 0])]);
        assert!(matches!(
            generate_counterfactuals(&forest, &task(4.5, 8.0, 2, 60.0), &policy, &grid),
            Err(Error::OffGrid { feature: Feature::CpuCores, nearest, .. }) if nearest == 4.0
        ));
    }

    #[test]
    fn tau_prox_zero_in_negative_leaf_is_empty() {
        let tree = stump(0, 4.0, 0, 1);
        let grid = AllocationGrid::default();
        let policy = FeaturePolicy {
            tau_prox: 0.0,
            ..FeaturePolicy::default()
        };
        let t = pruned_traversal(&tree, 0, &task(2.0, 8.0, 2, 60.0), &policy, &grid, None).unwrap();
        assert!(t.boxes.is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let forest = forest_of(vec![stump(0, 4.0, 0, 1)]);
        let grid = AllocationGrid::default();
        let rows = enumerate_feasible_actions(&forest, &task(4.0, 8.0, 2, 60.0), &FeaturePolicy::default(), &grid).unwrap();
        let mut buf = Vec::new();
        write_feasible_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), FEASIBLE_CSV_HEADER);
        assert_eq!(text.lines().count(), 769);
        assert_eq!(read_feasible_csv(&text).unwrap(), rows);
    }

    fn trained(seed: u64) -> Forest {
        use crate::ingest::label_records;
        use crate::synth::{generate_history, GroundTruthModel};
        let grid = AllocationGrid::default();
        let records = generate_history(&GroundTruthModel::default(), &grid, 600, (0.7, 1.5), seed).unwrap();
        let hp = Hyperparams {
            n_trees: 9,
            max_depth: 6,
            seed,
            ..Hyperparams::default()
        };
        crate::forest::train_forest(&label_records(&records).unwrap(), &hp).unwrap()
    }

    #[test]
    fn emitted_candidates_round_trip_through_actions() {
        let forest = trained(1);
        let grid = AllocationGrid::default();
        let policy = FeaturePolicy::default();
        let mut checked = 0;
        for cfg in grid.configs().step_by(7) {
            let original = task(cfg.cpu_cores, cfg.mem_alloc, cfg.replicas, 40.0);
            let set = generate_counterfactuals(&forest, &original, &policy, &grid).unwrap();
            for cf in &set.counterfactuals {
                let applied = apply_actions(&original, &cf.actions, &policy).unwrap();
                assert_eq!(applied.config, cf.config);
                assert_eq!(applied.deadline_s, cf.deadline_s);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn engine_matches_oracle_on_trained_forests() {
        let grid = AllocationGrid::default();
        for seed in 0..4 {
            let forest = trained(seed);
            for (i, cfg) in grid.configs().enumerate().filter(|(i, _)| i % 37 == 0) {
                let original = task(cfg.cpu_cores, cfg.mem_alloc, cfg.replicas, 20.0 + (i % 5) as f64 * 15.0);
                for policy in [
                    FeaturePolicy::default(),
                    FeaturePolicy {
                        k_max: 3,
                        tau_div: 0.3,
                        q: 4,
                        ..FeaturePolicy::default()
                    },
                ] {
                    let engine = generate_counterfactuals(&forest, &original, &policy, &grid).unwrap();
                    let mut oracle = oracle_counterfactuals(&forest, &original, &policy, &grid).unwrap();
                    oracle.hint = engine.hint.clone();
                    assert_eq!(engine, oracle, "seed {seed} original {original:?}");
                }
            }
        }
    }
}
