//! Plan grammar, rule-based simulator, reference solver and metrics.

mod action;
mod metrics;
mod sim;
mod solver;

pub use action::{parse_plan, Action, ActionSequence, Predicate};
pub use metrics::{
    correctness, evaluate_batch, executability, executed_fraction, lcs_score, EvalCase,
    MetricReport, Split, SplitMetrics,
};
pub use sim::{
    apply, execute, goal_satisfied, ExecResult, FailureReason, GoalPredicate, StepFailure,
    RULES_VERSION,
};
pub use solver::{solve, Solution, Subtask};
