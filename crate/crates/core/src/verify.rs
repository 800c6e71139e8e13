//! Seeded engine-versus-oracle equivalence cases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engine::{generate_counterfactuals, oracle_counterfactuals, CandidateSet};
use crate::error::Result;
use crate::forest::{train_forest_with, FeatureMeta, Forest, Hyperparams, TrainOptions};
use crate::ingest::label_records;
use crate::synth::{generate_history, GroundTruthModel};
use crate::task::{AllocationGrid, Feature, FeaturePolicy, TaskSpec};

/// Deadlines offered when a case lets the deadline vary.
pub const CASE_DEADLINES: [f64; 6] = [15.0, 30.0, 45.0, 60.0, 90.0, 120.0];

/// A forest trained on a seeded synthetic history over the default grid
/// (with [`CASE_DEADLINES`] as deadline values).
pub fn case_forest(seed: u64) -> Result<Forest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = GroundTruthModel {
        work_w: rng.random_range(120.0..360.0),
        parallel_cap: rng.random_range(2..=6),
        mem_requirement: [8.0, 16.0, 32.0][rng.random_range(0..3)],
        mem_penalty: rng.random_range(20.0..80.0),
        ..GroundTruthModel::default()
    };
    let grid = AllocationGrid::default().with_deadlines(CASE_DEADLINES.to_vec())?;
    let records = generate_history(&model, &grid, 500, (0.7, 1.5), seed)?;
    let hp = Hyperparams {
        n_trees: rng.random_range(5..=25),
        max_depth: rng.random_range(4..=10),
        min_samples_leaf: rng.random_range(1..=6),
        seed,
        ..Hyperparams::default()
    };
    let options = TrainOptions {
        feature_meta: FeatureMeta::with_grid(grid),
        ..TrainOptions::default()
    };
    train_forest_with(&label_records(&records)?, &hp, &options)
}

/// Policies cycled through by the cases.
pub fn case_policy(k: usize) -> FeaturePolicy {
    let base = FeaturePolicy::default();
    match k % 5 {
        0 => base,
        1 => FeaturePolicy {
            k_max: 3,
            tau_prox: 1.5,
            ..base
        },
        2 => FeaturePolicy {
            tau_div: 0.25,
            q: 8,
            ..base
        },
        3 => FeaturePolicy {
            mutable_features: vec![Feature::CpuCores, Feature::Replicas],
            tau_prox: 0.6,
            ..base
        },
        _ => FeaturePolicy {
            mutable_features: Feature::ALL.to_vec(),
            k_max: 2,
            q: 6,
            ..base
        },
    }
}

/// Up to `count` grid tasks the forest predicts non-schedulable.
pub fn non_schedulable_originals(forest: &Forest, count: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    let grid = forest.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut out = Vec::with_capacity(count);
    for attempt in 0..count * 200 {
        if out.len() == count {
            break;
        }
        let config = crate::task::ContainerConfig::new(
            grid.cpu_values[rng.random_range(0..grid.cpu_values.len())],
            grid.mem_values[rng.random_range(0..grid.mem_values.len())],
            grid.replica_values[rng.random_range(0..grid.replica_values.len())],
        );
        let deadline = CASE_DEADLINES[rng.random_range(0..CASE_DEADLINES.len())];
        let spec = TaskSpec::new(format!("case-{attempt}"), config, deadline);
        if forest.predict(&spec.features())?.label == 0 {
            out.push(spec);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseOutcome {
    pub forest_seed: u64,
    pub task_id: String,
    pub matched: bool,
    pub engine: CandidateSet,
    pub oracle: CandidateSet,
}

/// Runs the engine and the oracle on one case. The no-solution hint is
/// engine-only and excluded from the comparison.
pub fn compare(forest: &Forest, original: &TaskSpec, policy: &FeaturePolicy, forest_seed: u64) -> Result<CaseOutcome> {
    let grid = forest.grid();
    let engine = generate_counterfactuals(forest, original, policy, grid)?;
    let oracle = oracle_counterfactuals(forest, original, policy, grid)?;
    let mut stripped = engine.clone();
    stripped.hint = None;
    Ok(CaseOutcome {
        forest_seed,
        task_id: original.task_id.clone(),
        matched: stripped == oracle,
        engine,
        oracle,
    })
}

/// `cases` independent cases, one forest and one original each.
pub fn run_cases(cases: usize, seed: u64) -> Result<Vec<CaseOutcome>> {
    let mut out = Vec::with_capacity(cases);
    let mut k = 0u64;
    while out.len() < cases {
        let forest_seed = seed.wrapping_mul(1_000_003).wrapping_add(k);
        k += 1;
        let forest = case_forest(forest_seed)?;
        let Some(original) = non_schedulable_originals(&forest, 1, forest_seed)?.pop() else {
            continue;
        };
        out.push(compare(&forest, &original, &case_policy(out.len()), forest_seed)?);
    }
    Ok(out)
}
