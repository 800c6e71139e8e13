use std::fmt::Write as _;

use cfsched::{CandidateSet, TaskSpec};

fn describe(task: &TaskSpec) -> String {
    format!(
        "cpu {} cores, mem {} GiB, replicas {}, deadline {} s",
        task.config.cpu_cores, task.config.mem_alloc, task.config.replicas, task.deadline_s
    )
}

/// Human-readable rendering of an explain result.
pub fn candidate_table(set: &CandidateSet) -> String {
    let mut out = String::new();
    let task = &set.original;
    let _ = writeln!(out, "task {}: {}", task.task_id, describe(task));
    if set.already_schedulable {
        let _ = writeln!(
            out,
            "task is schedulable as requested (vote fraction {:.2})",
            set.original_vote_fraction
        );
        return out;
    }
    let _ = writeln!(
        out,
        "predicted to miss its deadline (vote fraction {:.2})",
        set.original_vote_fraction
    );
    if set.counterfactuals.is_empty() {
        let message = set
            .hint
            .as_ref()
            .map(|h| h.message.as_str())
            .unwrap_or("no configuration meets the constraints");
        let _ = writeln!(out, "{message}");
        return out;
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{:>2}  {:>8}  {:>7}  {:>5}  actions", "#", "distance", "changes", "votes");
    for (i, cf) in set.counterfactuals.iter().enumerate() {
        let actions: Vec<String> = cf.actions.iter().map(ToString::to_string).collect();
        let _ = writeln!(
            out,
            "{:>2}  {:>8.4}  {:>7}  {:>5.2}  {}",
            i + 1,
            cf.distance,
            cf.sparsity,
            cf.vote_fraction,
            actions.join("; ")
        );
    }
    if set.exhausted {
        let _ = writeln!(
            out,
            "only {} candidates satisfy the constraints",
            set.counterfactuals.len()
        );
    }
    out
}
