//! Domain types shared across the crate: container configurations, tasks,
//! historical records, the allocation grid, the feature policy, and the
//! action/counterfactual vocabulary.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of features in the model input vector.
pub const FEATURE_COUNT: usize = 4;

/// A model input feature. The discriminant order is the fixed order of the
/// feature vector: `[cpu_cores, mem_alloc, replicas, deadline_s]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    CpuCores,
    MemAlloc,
    Replicas,
    DeadlineS,
}

impl Feature {
    pub const ALL: [Feature; FEATURE_COUNT] = [
        Feature::CpuCores,
        Feature::MemAlloc,
        Feature::Replicas,
        Feature::DeadlineS,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Feature> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::CpuCores => "cpu_cores",
            Feature::MemAlloc => "mem_alloc",
            Feature::Replicas => "replicas",
            Feature::DeadlineS => "deadline_s",
        }
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|f| f.name().to_string()).collect()
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cpu" | "cpu_cores" | "cores" => Ok(Feature::CpuCores),
            "mem" | "memory" | "mem_alloc" => Ok(Feature::MemAlloc),
            "replicas" | "instances" | "instance_num" | "instance-num" => Ok(Feature::Replicas),
            "deadline" | "deadline_s" => Ok(Feature::DeadlineS),
            _ => Err(Error::UnknownFeature(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Running,
    #[default]
    Finished,
    Pending,
}

/// Long-running application or batch processing application.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Lra,
    #[default]
    Bpa,
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskType::Lra => "lra",
            TaskType::Bpa => "bpa",
        })
    }
}

impl FromStr for TaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lra" => Ok(TaskType::Lra),
            "bpa" => Ok(TaskType::Bpa),
            other => Err(Error::InvalidTask(format!("unknown task type `{other}`"))),
        }
    }
}

/// Per-container resource configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerConfig {
    pub cpu_cores: f64,
    pub mem_alloc: f64,
    pub replicas: u32,
}

impl ContainerConfig {
    pub fn new(cpu_cores: f64, mem_alloc: f64, replicas: u32) -> Self {
        ContainerConfig {
            cpu_cores,
            mem_alloc,
            replicas,
        }
    }

    fn validate(&self) -> Result<()> {
        for (feature, value) in [
            (Feature::CpuCores, self.cpu_cores),
            (Feature::MemAlloc, self.mem_alloc),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidValue { feature, value });
            }
        }
        if self.replicas == 0 {
            return Err(Error::InvalidValue {
                feature: Feature::Replicas,
                value: 0.0,
            });
        }
        Ok(())
    }

    /// Checks every field against the grid, reporting the first off-grid value.
    pub fn check_on_grid(&self, grid: &AllocationGrid) -> Result<()> {
        for (feature, value) in [
            (Feature::CpuCores, self.cpu_cores),
            (Feature::MemAlloc, self.mem_alloc),
            (Feature::Replicas, f64::from(self.replicas)),
        ] {
            if !grid.contains(feature, value) {
                return Err(Error::OffGrid {
                    feature,
                    value,
                    nearest: grid.nearest(feature, value).unwrap_or(f64::NAN),
                });
            }
        }
        Ok(())
    }

    /// Snaps every field to the nearest grid value.
    pub fn snapped(&self, grid: &AllocationGrid) -> ContainerConfig {
        let snap = |f: Feature, v: f64| grid.nearest(f, v).unwrap_or(v);
        ContainerConfig {
            cpu_cores: snap(Feature::CpuCores, self.cpu_cores),
            mem_alloc: snap(Feature::MemAlloc, self.mem_alloc),
            replicas: snap(Feature::Replicas, f64::from(self.replicas)) as u32,
        }
    }
}

/// A task submission: identity, container configuration, relative deadline,
/// status, and type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    #[serde(default)]
    pub task_type: TaskType,
    #[serde(flatten)]
    pub config: ContainerConfig,
    pub deadline_s: f64,
    #[serde(default = "pending")]
    pub status: TaskStatus,
}

fn pending() -> TaskStatus {
    TaskStatus::Pending
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, config: ContainerConfig, deadline_s: f64) -> Self {
        TaskSpec {
            task_id: task_id.into(),
            task_type: TaskType::default(),
            config,
            deadline_s,
            status: TaskStatus::Pending,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_id.is_empty() {
            return Err(Error::InvalidTask("task_id must be non-empty".into()));
        }
        if !(self.deadline_s.is_finite() && self.deadline_s > 0.0) {
            return Err(Error::InvalidValue {
                feature: Feature::DeadlineS,
                value: self.deadline_s,
            });
        }
        self.config.validate()
    }

    /// Feature vector in canonical order.
    pub fn features(&self) -> [f64; FEATURE_COUNT] {
        [
            self.config.cpu_cores,
            self.config.mem_alloc,
            f64::from(self.config.replicas),
            self.deadline_s,
        ]
    }

    pub fn feature(&self, feature: Feature) -> f64 {
        self.features()[feature.index()]
    }

    /// Returns a copy with one feature replaced. Replica values are truncated
    /// to integers; callers validate integrality beforehand.
    pub fn with_feature(&self, feature: Feature, value: f64) -> TaskSpec {
        let mut out = self.clone();
        match feature {
            Feature::CpuCores => out.config.cpu_cores = value,
            Feature::MemAlloc => out.config.mem_alloc = value,
            Feature::Replicas => out.config.replicas = value as u32,
            Feature::DeadlineS => out.deadline_s = value,
        }
        out
    }

    /// Builds a spec with the identity of `self` and the given feature vector.
    pub fn with_features(&self, values: &[f64; FEATURE_COUNT]) -> TaskSpec {
        Feature::ALL
            .iter()
            .fold(self.clone(), |spec, &f| spec.with_feature(f, values[f.index()]))
    }
}

/// One historical execution. The deadline is optional because raw traces
/// carry none; see [`crate::ingest::assign_deadline`].
#[derive(Clone, Debug, PartialEq)]
pub struct TaskRecord {
    pub task_id: String,
    pub task_type: TaskType,
    pub status: TaskStatus,
    pub config: ContainerConfig,
    pub deadline_s: Option<f64>,
    pub start_ts: f64,
    pub end_ts: f64,
    pub completion_s: f64,
}

impl TaskRecord {
    pub fn new(
        task_id: impl Into<String>,
        task_type: TaskType,
        config: ContainerConfig,
        deadline_s: Option<f64>,
        start_ts: f64,
        end_ts: f64,
    ) -> Result<TaskRecord> {
        let record = TaskRecord {
            task_id: task_id.into(),
            task_type,
            status: TaskStatus::Finished,
            config,
            deadline_s,
            start_ts,
            end_ts,
            completion_s: end_ts - start_ts,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_id.is_empty() {
            return Err(Error::InvalidTask("task_id must be non-empty".into()));
        }
        if !(self.start_ts.is_finite() && self.end_ts.is_finite()) {
            return Err(Error::InvalidTask("timestamps must be finite".into()));
        }
        if self.end_ts < self.start_ts {
            return Err(Error::InvalidTask(format!(
                "end_ts {} precedes start_ts {}",
                self.end_ts, self.start_ts
            )));
        }
        if let Some(d) = self.deadline_s {
            if !(d.is_finite() && d >= 0.0) {
                return Err(Error::InvalidValue {
                    feature: Feature::DeadlineS,
                    value: d,
                });
            }
        }
        self.config.validate()
    }

    pub fn to_spec(&self) -> Result<TaskSpec> {
        let deadline_s = self
            .deadline_s
            .ok_or_else(|| Error::MissingDeadline(self.task_id.clone()))?;
        Ok(TaskSpec {
            task_id: self.task_id.clone(),
            task_type: self.task_type,
            config: self.config,
            deadline_s,
            status: self.status,
        })
    }
}

/// Canonical record wire form (one JSON object per line).
#[derive(Serialize, Deserialize)]
pub(crate) struct RecordWire {
    pub task_id: String,
    pub task_type: TaskType,
    pub cpu_cores: f64,
    pub mem_alloc: f64,
    pub replicas: u32,
    #[serde(default)]
    pub deadline_s: Option<f64>,
    pub start_ts: f64,
    pub end_ts: f64,
    pub status: TaskStatus,
}

pub(crate) const RECORD_KEYS: [&str; 9] = [
    "task_id",
    "task_type",
    "cpu_cores",
    "mem_alloc",
    "replicas",
    "deadline_s",
    "start_ts",
    "end_ts",
    "status",
];

impl From<&TaskRecord> for RecordWire {
    fn from(r: &TaskRecord) -> Self {
        RecordWire {
            task_id: r.task_id.clone(),
            task_type: r.task_type,
            cpu_cores: r.config.cpu_cores,
            mem_alloc: r.config.mem_alloc,
            replicas: r.config.replicas,
            deadline_s: r.deadline_s,
            start_ts: r.start_ts,
            end_ts: r.end_ts,
            status: r.status,
        }
    }
}

impl TryFrom<RecordWire> for TaskRecord {
    type Error = Error;

    fn try_from(w: RecordWire) -> Result<TaskRecord> {
        let record = TaskRecord {
            task_id: w.task_id,
            task_type: w.task_type,
            status: w.status,
            config: ContainerConfig::new(w.cpu_cores, w.mem_alloc, w.replicas),
            deadline_s: w.deadline_s,
            start_ts: w.start_ts,
            end_ts: w.end_ts,
            completion_s: w.end_ts - w.start_ts,
        };
        record.validate()?;
        Ok(record)
    }
}

impl Serialize for TaskRecord {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        RecordWire::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TaskRecord {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let wire = RecordWire::deserialize(deserializer)?;
        TaskRecord::try_from(wire).map_err(serde::de::Error::custom)
    }
}

/// Discrete catalog of allowed resource values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationGrid {
    pub cpu_values: Vec<f64>,
    pub mem_values: Vec<f64>,
    pub replica_values: Vec<u32>,
    /// Candidate deadlines, used only when the deadline is mutable. May be empty.
    #[serde(default)]
    pub deadline_values: Vec<f64>,
}

impl Default for AllocationGrid {
    /// 16 CPU categories, 6 memory allocations, 1..=8 replicas.
    fn default() -> Self {
        AllocationGrid {
            cpu_values: (1..=16).map(f64::from).collect(),
            mem_values: vec![2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            replica_values: (1..=8).collect(),
            deadline_values: Vec::new(),
        }
    }
}

impl AllocationGrid {
    pub fn new(cpu_values: Vec<f64>, mem_values: Vec<f64>, replica_values: Vec<u32>) -> Result<Self> {
        let grid = AllocationGrid {
            cpu_values,
            mem_values,
            replica_values,
            deadline_values: Vec::new(),
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn with_deadlines(mut self, deadline_values: Vec<f64>) -> Result<Self> {
        self.deadline_values = deadline_values;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for feature in Feature::ALL {
            let values = self.values(feature);
            if values.is_empty() {
                if feature == Feature::DeadlineS {
                    continue;
                }
                return Err(Error::InvalidGrid(format!("{feature} has no values")));
            }
            if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidGrid(format!("{feature} values must be positive and finite")));
            }
            if values.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidGrid(format!("{feature} values must be strictly increasing")));
            }
        }
        Ok(())
    }

    /// Allowed values of a feature as reals.
    pub fn values(&self, feature: Feature) -> Cow<'_, [f64]> {
        match feature {
            Feature::CpuCores => Cow::Borrowed(&self.cpu_values),
            Feature::MemAlloc => Cow::Borrowed(&self.mem_values),
            Feature::Replicas => Cow::Owned(self.replica_values.iter().map(|&r| f64::from(r)).collect()),
            Feature::DeadlineS => Cow::Borrowed(&self.deadline_values),
        }
    }

    pub fn contains(&self, feature: Feature, value: f64) -> bool {
        self.values(feature).iter().any(|&v| v == value)
    }

    /// Nearest allowed value; ties go to the smaller value.
    pub fn nearest(&self, feature: Feature, value: f64) -> Option<f64> {
        nearest_value(&self.values(feature), value)
    }

    /// `max - min` for the feature, zero for single-valued or empty lists.
    pub fn range(&self, feature: Feature) -> f64 {
        let values = self.values(feature);
        match (values.first(), values.last()) {
            (Some(lo), Some(hi)) => hi - lo,
            _ => 0.0,
        }
    }

    /// Number of container configurations (CPU × memory × replicas).
    pub fn cardinality(&self) -> usize {
        self.cpu_values.len() * self.mem_values.len() * self.replica_values.len()
    }

    /// All container configurations, CPU-major.
    pub fn configs(&self) -> impl Iterator<Item = ContainerConfig> + '_ {
        self.cpu_values.iter().flat_map(move |&cpu| {
            self.mem_values.iter().flat_map(move |&mem| {
                self.replica_values
                    .iter()
                    .map(move |&rep| ContainerConfig::new(cpu, mem, rep))
            })
        })
    }
}

/// Nearest element of a sorted slice, ties toward the smaller element.
pub(crate) fn nearest_value(values: &[f64], target: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for &v in values {
        best = match best {
            Some(b) if (b - target).abs() <= (v - target).abs() => Some(b),
            _ => Some(v),
        };
    }
    best
}

/// Which features may change, and the thresholds every counterfactual must
/// respect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePolicy {
    pub mutable_features: Vec<Feature>,
    /// Maximum normalized distance from the original task.
    pub tau_prox: f64,
    /// Minimum pairwise normalized distance between emitted candidates.
    pub tau_div: f64,
    /// Maximum number of changed features.
    pub k_max: usize,
    /// Requested number of counterfactuals.
    pub q: usize,
}

impl Default for FeaturePolicy {
    fn default() -> Self {
        FeaturePolicy {
            mutable_features: vec![Feature::CpuCores, Feature::MemAlloc, Feature::Replicas],
            tau_prox: 1.0,
            tau_div: 0.1,
            k_max: 2,
            q: 5,
        }
    }
}

impl FeaturePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.mutable_features.is_empty() {
            return Err(Error::InvalidPolicy("at least one feature must be mutable".into()));
        }
        if self.k_max == 0 || self.k_max > self.mutable_count() {
            return Err(Error::InvalidPolicy(format!(
                "k_max must lie in 1..={}, got {}",
                self.mutable_count(),
                self.k_max
            )));
        }
        if self.q == 0 {
            return Err(Error::InvalidPolicy("q must be at least 1".into()));
        }
        if self.tau_prox.is_nan() || self.tau_prox < 0.0 {
            return Err(Error::InvalidPolicy("tau_prox must be nonnegative".into()));
        }
        if self.tau_div.is_nan() || self.tau_div < 0.0 {
            return Err(Error::InvalidPolicy("tau_div must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn is_mutable(&self, feature: Feature) -> bool {
        self.mutable_features.contains(&feature)
    }

    fn mutable_count(&self) -> usize {
        Feature::ALL.iter().filter(|f| self.is_mutable(**f)).count()
    }

    pub fn mutable_mask(&self) -> [bool; FEATURE_COUNT] {
        Feature::ALL.map(|f| self.is_mutable(f))
    }
}

/// Range-normalized L1 distance over the mutable features, unit weights.
/// Features whose grid range is zero contribute nothing.
#[derive(Clone, Copy, Debug)]
pub struct DistanceScale {
    ranges: [f64; FEATURE_COUNT],
    mutable: [bool; FEATURE_COUNT],
}

impl DistanceScale {
    pub fn new(grid: &AllocationGrid, policy: &FeaturePolicy) -> Self {
        DistanceScale {
            ranges: Feature::ALL.map(|f| grid.range(f)),
            mutable: policy.mutable_mask(),
        }
    }

    /// Contribution of one feature; `gap` is an absolute difference.
    pub fn term(&self, feature: Feature, gap: f64) -> f64 {
        let i = feature.index();
        if !self.mutable[i] || self.ranges[i] == 0.0 {
            0.0
        } else {
            gap / self.ranges[i]
        }
    }

    /// Sums per-feature terms in canonical feature order.
    pub fn sum_terms(&self, terms: &[f64; FEATURE_COUNT]) -> f64 {
        terms.iter().sum()
    }

    pub fn distance(&self, a: &[f64; FEATURE_COUNT], b: &[f64; FEATURE_COUNT]) -> f64 {
        let terms = Feature::ALL.map(|f| self.term(f, (a[f.index()] - b[f.index()]).abs()));
        self.sum_terms(&terms)
    }
}

/// Normalized distance between two tasks on the mutable features.
pub fn normalized_distance(
    a: &TaskSpec,
    b: &TaskSpec,
    grid: &AllocationGrid,
    policy: &FeaturePolicy,
) -> Result<f64> {
    for spec in [a, b] {
        for feature in [Feature::CpuCores, Feature::MemAlloc, Feature::Replicas] {
            let value = spec.feature(feature);
            if policy.is_mutable(feature) && !grid.contains(feature, value) {
                return Err(Error::OffGrid {
                    feature,
                    value,
                    nearest: grid.nearest(feature, value).unwrap_or(f64::NAN),
                });
            }
        }
    }
    Ok(DistanceScale::new(grid, policy).distance(&a.features(), &b.features()))
}

/// A single feature change.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub feature: Feature,
    pub from_value: f64,
    pub to_value: f64,
}

impl Action {
    pub fn new(feature: Feature, from_value: f64, to_value: f64) -> Self {
        Action {
            feature,
            from_value,
            to_value,
        }
    }

    pub fn parse(feature: &str, from_value: f64, to_value: f64) -> Result<Self> {
        Ok(Action::new(feature.parse()?, from_value, to_value))
    }

    pub fn delta(&self) -> f64 {
        self.to_value - self.from_value
    }
}

impl fmt::Display for Action {
    /// Renders e.g. `CPU: 4 → 6 (+2 cores)`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (label, unit) = match self.feature {
            Feature::CpuCores => ("CPU", " cores"),
            Feature::MemAlloc => ("Memory", " GiB"),
            Feature::Replicas => ("Replicas", " instances"),
            Feature::DeadlineS => ("Deadline", " s"),
        };
        let delta = self.delta();
        let sign = if delta >= 0.0 { "+" } else { "-" };
        write!(
            f,
            "{label}: {} → {} ({sign}{}{unit})",
            self.from_value,
            self.to_value,
            delta.abs()
        )
    }
}

/// Applies actions in order. Each action's `from_value` must equal the
/// current value of its feature.
pub fn apply_actions(original: &TaskSpec, actions: &[Action], policy: &FeaturePolicy) -> Result<TaskSpec> {
    actions.iter().try_fold(original.clone(), |spec, action| {
        if !policy.is_mutable(action.feature) {
            return Err(Error::ImmutableFeature(action.feature));
        }
        let current = spec.feature(action.feature);
        if current != action.from_value {
            return Err(Error::FromValueMismatch {
                feature: action.feature,
                expected: action.from_value,
                found: current,
            });
        }
        let to = action.to_value;
        let valid = match action.feature {
            Feature::Replicas => to >= 1.0 && to.fract() == 0.0 && to <= f64::from(u32::MAX),
            _ => to.is_finite() && to > 0.0,
        };
        if !valid {
            return Err(Error::InvalidValue {
                feature: action.feature,
                value: to,
            });
        }
        Ok(spec.with_feature(action.feature, to))
    })
}

/// A recommended configuration and the evidence behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub config: ContainerConfig,
    pub deadline_s: f64,
    pub actions: Vec<Action>,
    pub distance: f64,
    pub sparsity: usize,
    pub vote_fraction: f64,
}

impl Counterfactual {
    pub fn features(&self) -> [f64; FEATURE_COUNT] {
        [
            self.config.cpu_cores,
            self.config.mem_alloc,
            f64::from(self.config.replicas),
            self.deadline_s,
        ]
    }
}
