//! Trace ingestion: parse historical executions, synthesize deadlines where a
//! trace carries none, and label each record as schedulable or not.
//!
//! Two input formats are supported:
//!
//! * `ndjson`: the canonical record format, one JSON object per line with
//!   keys `task_id, task_type, cpu_cores, mem_alloc, replicas, deadline_s,
//!   start_ts, end_ts, status`. `deadline_s` may be absent or null. Unknown
//!   keys are ignored and counted.
//! * `alibaba_csv`: Alibaba cluster-trace `batch_task` rows. With a header
//!   row, columns are matched by name; without one, the 9-column 2018 layout
//!   `task_name, instance_num, job_name, task_type, status, start_time,
//!   end_time, plan_cpu, plan_mem` is assumed (7-column files drop `job_name`
//!   and `task_type`). `plan_cpu` is in centi-cores, `plan_mem` is a percentage
//!   of machine memory; both, and `instance_num`, are snapped onto the grid.
//!
//! Task-level start/end timestamps are taken as given; per-instance
//! aggregation is not reconstructed.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{
    AllocationGrid, ContainerConfig, Feature, RecordWire, TaskRecord, TaskStatus, TaskType,
    FEATURE_COUNT, RECORD_KEYS,
};

/// Line numbers of at most this many rejected rows are kept in the report.
pub const MAX_REPORTED_LINES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceFormat {
    Ndjson,
    AlibabaCsv,
}

impl FromStr for TraceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ndjson" => Ok(TraceFormat::Ndjson),
            "alibaba_csv" => Ok(TraceFormat::AlibabaCsv),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected: usize,
    /// Occurrences of unrecognized keys (ndjson only).
    pub unknown_keys: usize,
    /// 1-based line numbers of the first rejected rows.
    pub rejected_lines: Vec<u64>,
}

impl IngestReport {
    fn reject(&mut self, line: u64) {
        self.rejected += 1;
        if self.rejected_lines.len() < MAX_REPORTED_LINES {
            self.rejected_lines.push(line);
        }
    }

    fn finish(self) -> Result<IngestReport> {
        if self.accepted == 0 && self.rejected > 0 {
            return Err(Error::AllRowsRejected {
                rejected: self.rejected,
            });
        }
        Ok(self)
    }
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    /// Grid used to snap CSV resource values.
    pub grid: AllocationGrid,
    /// Machine memory in GiB that `plan_mem = 100` corresponds to.
    pub machine_mem_gib: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            grid: AllocationGrid::default(),
            machine_mem_gib: 64.0,
        }
    }
}

pub fn parse_trace(
    path: &Path,
    format: TraceFormat,
    options: &IngestOptions,
) -> Result<(Vec<TaskRecord>, IngestReport)> {
    let text = match fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::FileNotFound(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    match format {
        TraceFormat::Ndjson => parse_ndjson(&text),
        TraceFormat::AlibabaCsv => parse_alibaba_csv(&text, options),
    }
}

pub fn parse_ndjson(text: &str) -> Result<(Vec<TaskRecord>, IngestReport)> {
    let mut report = IngestReport::default();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_ndjson_line(line) {
            Ok((record, unknown)) => {
                report.unknown_keys += unknown;
                report.accepted += 1;
                records.push(record);
            }
            Err(e) => {
                log::debug!("line {}: {e}", i + 1);
                report.reject(i as u64 + 1);
            }
        }
    }
    Ok((records, report.finish()?))
}

fn parse_ndjson_line(line: &str) -> Result<(TaskRecord, usize)> {
    let value: serde_json::Value = serde_json::from_str(line)?;
    let unknown = value
        .as_object()
        .map(|obj| obj.keys().filter(|k| !RECORD_KEYS.contains(&k.as_str())).count())
        .unwrap_or(0);
    let wire: RecordWire = serde_json::from_value(value)?;
    Ok((TaskRecord::try_from(wire)?, unknown))
}

pub fn write_ndjson<W: Write>(mut out: W, records: &[TaskRecord]) -> Result<()> {
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

const ALIBABA_2018_COLUMNS: [&str; 9] = [
    "task_name",
    "instance_num",
    "job_name",
    "task_type",
    "status",
    "start_time",
    "end_time",
    "plan_cpu",
    "plan_mem",
];

const ALIBABA_SHORT_COLUMNS: [&str; 7] = [
    "task_name",
    "instance_num",
    "status",
    "start_time",
    "end_time",
    "plan_cpu",
    "plan_mem",
];

pub fn parse_alibaba_csv(text: &str, options: &IngestOptions) -> Result<(Vec<TaskRecord>, IngestReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut report = IngestReport::default();
    let mut records = Vec::new();
    let mut columns: Option<HashMap<String, usize>> = None;

    for row in reader.records() {
        let row = match row {
            Ok(row) => row,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                report.reject(line);
                continue;
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.iter().all(str::is_empty) {
            continue;
        }
        if columns.is_none() {
            if row.iter().any(|c| c.eq_ignore_ascii_case("task_name")) {
                columns = Some(
                    row.iter()
                        .enumerate()
                        .map(|(i, name)| (name.to_ascii_lowercase(), i))
                        .collect(),
                );
                continue;
            }
            let layout: &[&str] = if row.len() == ALIBABA_SHORT_COLUMNS.len() {
                &ALIBABA_SHORT_COLUMNS
            } else {
                &ALIBABA_2018_COLUMNS
            };
            columns = Some(layout.iter().enumerate().map(|(i, n)| (n.to_string(), i)).collect());
        }
        let cols = columns.as_ref().expect("column map initialized above");
        match alibaba_row(&row, cols, options) {
            Some(record) => {
                report.accepted += 1;
                records.push(record);
            }
            None => report.reject(line),
        }
    }
    Ok((records, report.finish()?))
}

fn alibaba_row(row: &csv::StringRecord, cols: &HashMap<String, usize>, options: &IngestOptions) -> Option<TaskRecord> {
    let field = |name: &str| cols.get(name).and_then(|&i| row.get(i)).filter(|s| !s.is_empty());
    let num = |name: &str| field(name).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite());

    let task_name = field("task_name")?;
    let task_id = match field("job_name") {
        Some(job) => format!("{job}/{task_name}"),
        None => task_name.to_string(),
    };
    let instances = num("instance_num")?;
    let start = num("start_time")?;
    let end = num("end_time")?;
    let plan_cpu = num("plan_cpu")?;
    let plan_mem = num("plan_mem")?;
    if instances < 1.0 || plan_cpu <= 0.0 || plan_mem <= 0.0 {
        return None;
    }
    let grid = &options.grid;
    let config = ContainerConfig::new(
        grid.nearest(Feature::CpuCores, plan_cpu / 100.0)?,
        grid.nearest(Feature::MemAlloc, plan_mem / 100.0 * options.machine_mem_gib)?,
        grid.nearest(Feature::Replicas, instances)? as u32,
    );
    let status = match field("status").map(str::to_ascii_lowercase).as_deref() {
        Some("running") => TaskStatus::Running,
        Some("waiting") | Some("ready") | Some("pending") => TaskStatus::Pending,
        _ => TaskStatus::Finished,
    };
    let mut record = TaskRecord::new(task_id, TaskType::Bpa, config, None, start, end).ok()?;
    record.status = status;
    Some(record)
}

/// How a record's deadline is obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DeadlinePolicy {
    /// Keep the record's own deadline.
    Explicit,
    /// `deadline = slack × completion`.
    SlackFactor { slack: f64 },
    /// Per-record slack drawn uniformly from `[lo, hi]`.
    SlackInterval { lo: f64, hi: f64 },
}

impl Default for DeadlinePolicy {
    fn default() -> Self {
        DeadlinePolicy::SlackInterval { lo: 0.7, hi: 1.5 }
    }
}

impl DeadlinePolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DeadlinePolicy::Explicit => Ok(()),
            DeadlinePolicy::SlackFactor { slack } if slack.is_finite() && slack > 0.0 => Ok(()),
            DeadlinePolicy::SlackFactor { slack } => {
                Err(Error::InvalidDeadlinePolicy(format!("slack must be positive, got {slack}")))
            }
            DeadlinePolicy::SlackInterval { lo, hi } if lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi => {
                Ok(())
            }
            DeadlinePolicy::SlackInterval { lo, hi } => Err(Error::InvalidDeadlinePolicy(format!(
                "slack interval must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
            ))),
        }
    }
}

impl FromStr for DeadlinePolicy {
    type Err = Error;

    /// Accepts `explicit`, `slack:<s>` and `interval:<lo>,<hi>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidDeadlinePolicy(format!("cannot parse `{s}`"));
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        let policy = if s == "explicit" {
            DeadlinePolicy::Explicit
        } else if let Some(v) = s.strip_prefix("slack:") {
            DeadlinePolicy::SlackFactor { slack: parse(v)? }
        } else if let Some(v) = s.strip_prefix("interval:") {
            let (lo, hi) = v.split_once(',').ok_or_else(bad)?;
            DeadlinePolicy::SlackInterval {
                lo: parse(lo)?,
                hi: parse(hi)?,
            }
        } else {
            return Err(bad());
        };
        policy.validate()?;
        Ok(policy)
    }
}

pub fn assign_deadline<R: Rng + ?Sized>(record: &TaskRecord, policy: &DeadlinePolicy, rng: &mut R) -> Result<TaskRecord> {
    policy.validate()?;
    let slack = match *policy {
        DeadlinePolicy::Explicit => {
            return match record.deadline_s {
                Some(_) => Ok(record.clone()),
                None => Err(Error::MissingDeadline(record.task_id.clone())),
            }
        }
        DeadlinePolicy::SlackFactor { slack } => slack,
        DeadlinePolicy::SlackInterval { lo, hi } => rng.random_range(lo..=hi),
    };
    let mut out = record.clone();
    out.deadline_s = Some(slack * record.completion_s);
    Ok(out)
}

/// Assigns deadlines to a batch from one seeded stream, in input order.
pub fn assign_deadlines(records: &[TaskRecord], policy: &DeadlinePolicy, seed: u64) -> Result<Vec<TaskRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.iter().map(|r| assign_deadline(r, policy, &mut rng)).collect()
}

/// A training instance: features `[cpu_cores, mem_alloc, replicas, deadline_s]`
/// and a label (1 schedulable, 0 not).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub features: [f64; FEATURE_COUNT],
    pub label: u8,
    pub task_type: TaskType,
    pub weight: f64,
}

impl LabeledInstance {
    pub fn new(features: [f64; FEATURE_COUNT], label: u8) -> Self {
        LabeledInstance {
            features,
            label,
            task_type: TaskType::default(),
            weight: 1.0,
        }
    }
}

/// 1 when the deadline is met (`deadline − completion ≥ 0`), else 0.
pub fn schedulability_label(completion_s: f64, deadline_s: f64) -> u8 {
    u8::from(deadline_s - completion_s >= 0.0)
}

pub fn label_record(record: &TaskRecord) -> Result<LabeledInstance> {
    let deadline = record
        .deadline_s
        .ok_or_else(|| Error::MissingDeadline(record.task_id.clone()))?;
    Ok(LabeledInstance {
        features: [
            record.config.cpu_cores,
            record.config.mem_alloc,
            f64::from(record.config.replicas),
            deadline,
        ],
        label: schedulability_label(record.completion_s, deadline),
        task_type: record.task_type,
        weight: 1.0,
    })
}

pub fn label_records(records: &[TaskRecord]) -> Result<Vec<LabeledInstance>> {
    records.iter().map(label_record).collect()
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<LabeledInstance>,
    pub test: Vec<LabeledInstance>,
    /// False when the data held a single class and the split was unstratified.
    pub stratified: bool,
}

/// Seeded class-stratified train/test split. Per-class train counts are
/// apportioned by largest remainder so the train total is `round(f × n)`.
pub fn stratified_split(instances: &[LabeledInstance], train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidFraction(train_fraction));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, inst) in instances.iter().enumerate() {
        by_class[usize::from(inst.label.min(1))].push(i);
    }
    let stratified = by_class.iter().all(|c| !c.is_empty());
    let groups: Vec<Vec<usize>> = if stratified {
        by_class.to_vec()
    } else {
        log::warn!("single-class dataset; splitting without stratification");
        vec![(0..instances.len()).collect()]
    };

    let total = (train_fraction * instances.len() as f64).round() as usize;
    let quotas: Vec<f64> = groups.iter().map(|g| train_fraction * g.len() as f64).collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut remaining = total.saturating_sub(take.iter().sum());
    for &g in &order {
        if remaining == 0 {
            break;
        }
        if take[g] < groups[g].len() {
            take[g] += 1;
            remaining -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; instances.len()];
    for (group, &k) in groups.iter().zip(&take) {
        let mut shuffled = group.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..k] {
            in_train[i] = true;
        }
    }
    let (train, test): (Vec<_>, Vec<_>) = instances
        .iter()
        .zip(&in_train)
        .partition(|(_, &t)| t);
    Ok(Split {
        train: train.into_iter().map(|(x, _)| x.clone()).collect(),
        test: test.into_iter().map(|(x, _)| x.clone()).collect(),
        stratified,
    })
}
