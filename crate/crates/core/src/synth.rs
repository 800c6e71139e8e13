//! Synthetic task histories drawn from a known completion-time function, so
//! the learned boundary and the recommendations can be checked against
//! analytic truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{schedulability_label, LabeledInstance};
use crate::task::{AllocationGrid, ContainerConfig, TaskRecord, TaskStatus, TaskType};

/// Epoch second at which synthetic histories start.
const HISTORY_EPOCH: f64 = 1_700_000_000.0;

/// Completion time
/// `T = w / (cpu · min(replicas, p_max)) + κ · max(0, m_req − mem) / m_req + c0 + ε`
/// with `ε ~ N(0, σ²)` and `T` truncated at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthModel {
    /// Total work in core-seconds.
    pub work_w: f64,
    /// Replica count beyond which parallelism stops helping.
    pub parallel_cap: u32,
    /// Memory below which the task slows down, GiB.
    pub mem_requirement: f64,
    /// Slowdown in seconds at zero memory.
    pub mem_penalty: f64,
    pub base_c0: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GroundTruthModel {
    fn default() -> Self {
        GroundTruthModel {
            work_w: 240.0,
            parallel_cap: 4,
            mem_requirement: 16.0,
            mem_penalty: 60.0,
            base_c0: 2.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl GroundTruthModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("work_w", self.work_w),
            ("mem_requirement", self.mem_requirement),
            ("mem_penalty", self.mem_penalty),
            ("base_c0", self.base_c0),
            ("noise_sigma", self.noise_sigma),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidTask(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.work_w == 0.0 || self.mem_requirement == 0.0 {
            return Err(Error::InvalidTask("work_w and mem_requirement must be positive".into()));
        }
        if self.parallel_cap == 0 {
            return Err(Error::InvalidTask("parallel_cap must be at least 1".into()));
        }
        Ok(())
    }

    /// Noise-free completion time.
    pub fn expected_completion(&self, config: &ContainerConfig) -> f64 {
        let parallel = f64::from(config.replicas.min(self.parallel_cap));
        let compute = self.work_w / (config.cpu_cores * parallel);
        let shortfall = (self.mem_requirement - config.mem_alloc).max(0.0) / self.mem_requirement;
        compute + self.mem_penalty * shortfall + self.base_c0
    }

    /// Completion time with noise drawn from `rng`.
    pub fn completion_time<R: Rng + ?Sized>(&self, config: &ContainerConfig, rng: &mut R) -> f64 {
        let t = self.expected_completion(config);
        if self.noise_sigma == 0.0 {
            return t;
        }
        let noise = Normal::new(0.0, self.noise_sigma).expect("sigma validated nonnegative");
        (t + noise.sample(rng)).max(0.0)
    }

    /// Whether the noise-free completion time meets `deadline_s`.
    pub fn meets_deadline(&self, config: &ContainerConfig, deadline_s: f64) -> bool {
        schedulability_label(self.expected_completion(config), deadline_s) == 1
    }
}

/// `n` records with configurations drawn uniformly from the grid and
/// deadlines `slack × completion`, slack uniform in `slack_interval`.
pub fn generate_history(
    model: &GroundTruthModel,
    grid: &AllocationGrid,
    n: usize,
    slack_interval: (f64, f64),
    seed: u64,
) -> Result<Vec<TaskRecord>> {
    model.validate()?;
    grid.validate()?;
    let (lo, hi) = slack_interval;
    if n == 0 {
        return Err(Error::InvalidTask("history size must be at least 1".into()));
    }
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
        return Err(Error::InvalidDeadlinePolicy(format!(
            "slack interval must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let config = ContainerConfig::new(
            grid.cpu_values[rng.random_range(0..grid.cpu_values.len())],
            grid.mem_values[rng.random_range(0..grid.mem_values.len())],
            grid.replica_values[rng.random_range(0..grid.replica_values.len())],
        );
        let completion = model.completion_time(&config, &mut rng);
        let slack = rng.random_range(lo..=hi);
        let task_type = if rng.random_bool(0.5) { TaskType::Lra } else { TaskType::Bpa };
        let start = HISTORY_EPOCH + 60.0 * i as f64;
        let mut record = TaskRecord::new(format!("synth-{i:05}"), task_type, config, None, start, start + completion)?;
        // derived from the stored timestamps so the label is exact
        record.deadline_s = Some(slack * record.completion_s);
        record.status = TaskStatus::Finished;
        records.push(record);
    }
    Ok(records)
}

/// Every grid configuration paired with every deadline, labeled by the
/// noise-free ground truth.
pub fn labeled_grid(model: &GroundTruthModel, grid: &AllocationGrid, deadlines: &[f64]) -> Vec<LabeledInstance> {
    grid.configs()
        .flat_map(|config| {
            deadlines.iter().map(move |&d| {
                LabeledInstance::new(
                    [config.cpu_cores, config.mem_alloc, f64::from(config.replicas), d],
                    schedulability_label(model.expected_completion(&config), d),
                )
            })
        })
        .collect()
}
