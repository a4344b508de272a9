use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::action::ActionSequence;
use super::sim::{execute, goal_satisfied, ExecResult, GoalPredicate};
use crate::error::{Error, Result};
use crate::worldgen::WorldState;

/// Percentage of plans that executed without a failing step.
pub fn executability(results: &[ExecResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::contract("executability of an empty batch"));
    }
    let full = results.iter().filter(|r| r.fully_executed()).count();
    Ok(100.0 * full as f64 / results.len() as f64)
}

/// Fraction of a plan's steps executed before the first failure. Empty plans
/// score 1.
pub fn executed_fraction(result: &ExecResult) -> f64 {
    if result.plan_len == 0 {
        1.0
    } else {
        result.executed as f64 / result.plan_len as f64
    }
}

/// LCS length over exact action equality, normalized by the longer plan.
pub fn lcs_score(generated: &ActionSequence, reference: &ActionSequence) -> f64 {
    let (a, b) = (&generated.0, &reference.0);
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()] as f64 / a.len().max(b.len()) as f64
}

pub fn correctness(result: &ExecResult, goal: &[GoalPredicate]) -> bool {
    result.fully_executed() && goal_satisfied(goal, &result.final_world)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Ctrf,
    Norm,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Ctrf => "ctrf",
            Split::Norm => "norm",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalCase<'a> {
    pub split: Split,
    pub world: &'a WorldState,
    pub goal: &'a [GoalPredicate],
    pub reference: &'a ActionSequence,
    pub prediction: ActionSequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub exec: f64,
    pub lcs: f64,
    pub corr: f64,
    pub n: usize,
    /// Mean executed-step fraction; diagnostic only.
    pub step_exec: f64,
}

/// Metrics keyed by split name (`ctrf`, `norm`, `total`). Splits without
/// episodes are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub splits: BTreeMap<String, SplitMetrics>,
}

impl MetricReport {
    pub fn get(&self, split: &str) -> Option<&SplitMetrics> {
        self.splits.get(split)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,exec,lcs,corr,n\n");
        for name in ["ctrf", "norm", "total"] {
            if let Some(m) = self.splits.get(name) {
                writeln!(out, "{name},{:.2},{:.4},{:.2},{}", m.exec, m.lcs, m.corr, m.n).unwrap();
            }
        }
        out
    }
}

#[derive(Default)]
struct Acc {
    exec: Vec<ExecResult>,
    lcs: f64,
    corr: usize,
    step: f64,
}

impl Acc {
    fn finish(self) -> Result<SplitMetrics> {
        let n = self.exec.len() as f64;
        Ok(SplitMetrics {
            exec: executability(&self.exec)?,
            lcs: self.lcs / n,
            corr: 100.0 * self.corr as f64 / n,
            n: self.exec.len(),
            step_exec: self.step / n,
        })
    }
}

/// Scores predictions per split and in total, in input order.
pub fn evaluate_batch<'a>(cases: impl IntoIterator<Item = EvalCase<'a>>) -> Result<MetricReport> {
    let mut accs: BTreeMap<&'static str, Acc> = BTreeMap::new();
    for case in cases {
        let result = execute(&case.prediction, case.world);
        let lcs = lcs_score(&case.prediction, case.reference);
        let ok = correctness(&result, case.goal);
        for key in [case.split.name(), "total"] {
            let acc = accs.entry(key).or_default();
            acc.lcs += lcs;
            acc.corr += ok as usize;
            acc.step += executed_fraction(&result);
            acc.exec.push(result.clone());
        }
    }
    let mut report = MetricReport::default();
    for (k, acc) in accs {
        report.splits.insert(k.to_string(), acc.finish()?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planeval::{parse_plan, Action, Predicate};
    use crate::worldgen::{Location, ObjectClass};
    use proptest::prelude::*;

    fn seq(s: &str) -> ActionSequence {
        parse_plan(s).unwrap()
    }

    /// Longest common subsequence by enumerating every subsequence of `a`.
    fn brute_lcs(a: &[Action], b: &[Action]) -> usize {
        fn is_subseq(s: &[&Action], b: &[Action]) -> bool {
            let mut it = b.iter();
            s.iter().all(|x| it.any(|y| y == *x))
        }
        let mut best = 0;
        for bits in 0u32..(1 << a.len()) {
            let s: Vec<&Action> = (0..a.len()).filter(|i| bits >> i & 1 == 1).map(|i| &a[i]).collect();
            if s.len() > best && is_subseq(&s, b) {
                best = s.len();
            }
        }
        best
    }

    #[test]
    fn lcs_examples() {
        let abc = seq("find(a); open(b); pick(c)");
        let ac = seq("find(a); pick(c)");
        assert!((lcs_score(&abc, &ac) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(lcs_score(&abc, &abc), 1.0);
        assert_eq!(lcs_score(&abc, &seq("close(z)")), 0.0);
        let empty = ActionSequence::default();
        assert_eq!(lcs_score(&empty, &empty), 1.0);
        assert_eq!(lcs_score(&empty, &abc), 0.0);
    }

    fn arb_plan() -> impl Strategy<Value = Vec<Action>> {
        prop::collection::vec(
            (0..3usize, 0..3usize).prop_map(|(p, o)| Action::new(Predicate::ALL[p], ["a", "b", "c"][o])),
            0..=8,
        )
    }

    proptest! {
        #[test]
        fn lcs_matches_brute_force(a in arb_plan(), b in arb_plan()) {
            let (sa, sb) = (ActionSequence(a.clone()), ActionSequence(b.clone()));
            let s = lcs_score(&sa, &sb);
            prop_assert_eq!(s, lcs_score(&sb, &sa));
            if !(a.is_empty() && b.is_empty()) {
                let expect = brute_lcs(&a, &b) as f64 / a.len().max(b.len()) as f64;
                prop_assert_eq!(s, expect);
            }
        }
    }

    fn result(executed: usize, plan_len: usize) -> ExecResult {
        let mut w = WorldState::default();
        w.add(ObjectClass::Table, Location::Floor);
        let plan = ActionSequence(vec![Action::new(Predicate::Find, "table"); executed]);
        let mut r = execute(&plan, &w);
        r.plan_len = plan_len;
        r
    }

    #[test]
    fn executability_counts_full_plans() {
        let full = result(2, 2);
        assert_eq!(executability(&[full.clone(), full.clone()]).unwrap(), 100.0);
        let bad = execute(&seq("open(microwave)"), &WorldState::default());
        assert_eq!(executability(std::slice::from_ref(&bad)).unwrap(), 0.0);
        assert_eq!(executability(&[full.clone(), full.clone(), full, bad]).unwrap(), 75.0);
        assert!(matches!(executability(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn batch_splits_and_weighted_total() {
        let mut w = WorldState::default();
        w.add(ObjectClass::Table, Location::Floor);
        let reference = seq("find(table)");
        let goal: Vec<GoalPredicate> = Vec::new();
        let cases = vec![
            EvalCase { split: Split::Ctrf, world: &w, goal: &goal, reference: &reference, prediction: reference.clone() },
            EvalCase { split: Split::Norm, world: &w, goal: &goal, reference: &reference, prediction: seq("open(sink)") },
            EvalCase { split: Split::Norm, world: &w, goal: &goal, reference: &reference, prediction: reference.clone() },
        ];
        let r = evaluate_batch(cases).unwrap();
        let (c, n, t) = (r.get("ctrf").unwrap(), r.get("norm").unwrap(), r.get("total").unwrap());
        assert_eq!((c.n, n.n, t.n), (1, 2, 3));
        assert!((t.exec - (c.exec + 2.0 * n.exec) / 3.0).abs() < 1e-12);
        assert!((t.lcs - (c.lcs + 2.0 * n.lcs) / 3.0).abs() < 1e-12);
        assert_eq!(n.exec, 50.0);
        assert!(r.to_csv().starts_with("split,exec,lcs,corr,n\nctrf,100.00,1.0000,100.00,1\n"));
    }

    #[test]
    fn empty_split_is_absent() {
        let w = WorldState::default();
        let reference = ActionSequence::default();
        let r = evaluate_batch(vec![EvalCase {
            split: Split::Norm,
            world: &w,
            goal: &[],
            reference: &reference,
            prediction: ActionSequence::default(),
        }])
        .unwrap();
        assert!(r.get("ctrf").is_none());
        assert!(!r.to_csv().contains("ctrf"));
    }
}
