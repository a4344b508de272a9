//! Deterministic precondition/effect simulator.
//!
//! Rule table (version [`RULES_VERSION`]):
//!
//! | step          | preconditions                                                        | effect                 |
//! |---------------|----------------------------------------------------------------------|------------------------|
//! | `find(x)`     | x exists                                                             | agent at x's furniture |
//! | `open(x)`     | openable, agent at x, closed                                         | open                   |
//! | `close(x)`    | openable, agent at x, open                                           | closed                 |
//! | `pick(x)`     | item, not held, container open, agent at container, hands free       | held                   |
//! | `place(x)`    | x held, agent at a receptacle, receptacle open if openable           | x inside receptacle    |
//! | `clean(x)`    | cleanable, dirty, agent at x's furniture, holding a rag              | not dirty              |
//! | `discard(x)`  | x held, agent at an ashcan                                           | x removed              |
//! | `toggle_on`   | powerable, agent at x's furniture, off                               | powered                |
//! | `toggle_off`  | powerable, agent at x's furniture, on                                | unpowered              |

use std::fmt;

use serde::{Deserialize, Serialize};

use super::action::{Action, ActionSequence, Predicate};
use crate::worldgen::{Location, ObjectClass, WorldState};

pub const RULES_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    ObjectAbsent,
    NotOpenable,
    AlreadyOpen,
    AlreadyClosed,
    NotCoLocated,
    ContainerClosed,
    NotPickable,
    AlreadyHeld,
    HandsFull,
    NotHeld,
    NotAtReceptacle,
    NotCleanable,
    NotDirty,
    NoRag,
    NotAtAshcan,
    NotPowerable,
    AlreadyOn,
    AlreadyOff,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FailureReason::ObjectAbsent => "object absent",
            FailureReason::NotOpenable => "not openable",
            FailureReason::AlreadyOpen => "already open",
            FailureReason::AlreadyClosed => "already closed",
            FailureReason::NotCoLocated => "agent not co-located",
            FailureReason::ContainerClosed => "container closed",
            FailureReason::NotPickable => "not pickable",
            FailureReason::AlreadyHeld => "already held",
            FailureReason::HandsFull => "hands full",
            FailureReason::NotHeld => "object not held",
            FailureReason::NotAtReceptacle => "agent not at a receptacle",
            FailureReason::NotCleanable => "not cleanable",
            FailureReason::NotDirty => "not dirty",
            FailureReason::NoRag => "not holding a rag",
            FailureReason::NotAtAshcan => "agent not at an ashcan",
            FailureReason::NotPowerable => "not powerable",
            FailureReason::AlreadyOn => "already on",
            FailureReason::AlreadyOff => "already off",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFailure {
    /// Zero-based index of the failing step.
    pub step: usize,
    pub action: Action,
    pub reason: FailureReason,
}

impl fmt::Display for StepFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {} `{}`: {}", self.step + 1, self.action, self.reason)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecResult {
    pub executed: usize,
    pub plan_len: usize,
    pub failure: Option<StepFailure>,
    pub final_world: WorldState,
}

impl ExecResult {
    pub fn fully_executed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Goal-state predicate over object ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GoalPredicate {
    Inside { object: String, receptacle: String },
    Closed { object: String },
    Powered { object: String },
    NotDirty { object: String },
    Absent { object: String },
    NoBurntIn { receptacle: String },
}

impl GoalPredicate {
    pub fn holds(&self, w: &WorldState) -> bool {
        match self {
            GoalPredicate::Inside { object, receptacle } => w
                .object(object)
                .is_some_and(|o| o.location == Location::In(receptacle.clone())),
            GoalPredicate::Closed { object } => w.object(object).is_some_and(|o| !o.flags.open),
            GoalPredicate::Powered { object } => w.object(object).is_some_and(|o| o.flags.powered),
            GoalPredicate::NotDirty { object } => w.object(object).is_some_and(|o| !o.flags.dirty),
            GoalPredicate::Absent { object } => w.object(object).is_none(),
            GoalPredicate::NoBurntIn { receptacle } => {
                !w.contents(receptacle).any(|o| o.flags.burnt)
            }
        }
    }
}

pub fn goal_satisfied(goal: &[GoalPredicate], w: &WorldState) -> bool {
    goal.iter().all(|g| g.holds(w))
}

/// Runs `plan` against a copy of `world`, stopping at the first violated
/// precondition.
pub fn execute(plan: &ActionSequence, world: &WorldState) -> ExecResult {
    let mut w = world.clone();
    for (i, action) in plan.iter().enumerate() {
        if let Err(reason) = apply(&mut w, action) {
            return ExecResult {
                executed: i,
                plan_len: plan.len(),
                failure: Some(StepFailure {
                    step: i,
                    action: action.clone(),
                    reason,
                }),
                final_world: w,
            };
        }
    }
    ExecResult {
        executed: plan.len(),
        plan_len: plan.len(),
        failure: None,
        final_world: w,
    }
}

/// Applies one step in place; on failure the world is left unchanged.
pub fn apply(w: &mut WorldState, action: &Action) -> Result<(), FailureReason> {
    use FailureReason::*;
    let obj = w.resolve(&action.object).ok_or(ObjectAbsent)?.clone();
    let at = w.agent.at.clone();
    let site = w.site_of(&obj);
    let co_located = at.is_some() && at == site;
    match action.predicate {
        Predicate::Find => {
            w.agent.at = site;
        }
        Predicate::Open | Predicate::Close => {
            if !obj.class.is_openable() {
                return Err(NotOpenable);
            }
            if at.as_deref() != Some(obj.id.as_str()) {
                return Err(NotCoLocated);
            }
            let opening = action.predicate == Predicate::Open;
            if opening && obj.flags.open {
                return Err(AlreadyOpen);
            }
            if !opening && !obj.flags.open {
                return Err(AlreadyClosed);
            }
            w.object_mut(&obj.id).unwrap().flags.open = opening;
        }
        Predicate::Pick => {
            if obj.class.is_furniture() {
                return Err(NotPickable);
            }
            let Location::In(container) = &obj.location else {
                return Err(AlreadyHeld);
            };
            let c = w.object(container).ok_or(ObjectAbsent)?;
            if c.class.is_openable() && !c.flags.open {
                return Err(ContainerClosed);
            }
            if !co_located {
                return Err(NotCoLocated);
            }
            if w.agent.holding.is_some() {
                return Err(HandsFull);
            }
            let o = w.object_mut(&obj.id).unwrap();
            o.location = Location::Held;
            o.flags.held = true;
            w.agent.holding = Some(obj.id.clone());
        }
        Predicate::Place => {
            if obj.location != Location::Held {
                return Err(NotHeld);
            }
            let r = at
                .as_deref()
                .and_then(|id| w.object(id))
                .filter(|r| r.class.is_receptacle())
                .ok_or(NotAtReceptacle)?;
            if r.class.is_openable() && !r.flags.open {
                return Err(ContainerClosed);
            }
            let rid = r.id.clone();
            let o = w.object_mut(&obj.id).unwrap();
            o.location = Location::In(rid);
            o.flags.held = false;
            w.agent.holding = None;
        }
        Predicate::Clean => {
            if !obj.class.is_cleanable() {
                return Err(NotCleanable);
            }
            if !obj.flags.dirty {
                return Err(NotDirty);
            }
            if !co_located {
                return Err(NotCoLocated);
            }
            let has_rag = w
                .agent
                .holding
                .as_deref()
                .and_then(|h| w.object(h))
                .is_some_and(|h| h.class == ObjectClass::Rag);
            if !has_rag {
                return Err(NoRag);
            }
            w.object_mut(&obj.id).unwrap().flags.dirty = false;
        }
        Predicate::Discard => {
            if obj.location != Location::Held {
                return Err(NotHeld);
            }
            let at_ashcan = at
                .as_deref()
                .and_then(|id| w.object(id))
                .is_some_and(|r| r.class == ObjectClass::Ashcan);
            if !at_ashcan {
                return Err(NotAtAshcan);
            }
            w.objects.retain(|o| o.id != obj.id);
            w.agent.holding = None;
        }
        Predicate::ToggleOn | Predicate::ToggleOff => {
            if !obj.class.is_powerable() {
                return Err(NotPowerable);
            }
            if !co_located {
                return Err(NotCoLocated);
            }
            let on = action.predicate == Predicate::ToggleOn;
            if on && obj.flags.powered {
                return Err(AlreadyOn);
            }
            if !on && !obj.flags.powered {
                return Err(AlreadyOff);
            }
            w.object_mut(&obj.id).unwrap().flags.powered = on;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planeval::parse_plan;

    fn kitchen() -> WorldState {
        let mut w = WorldState::default();
        let mw = w.add(ObjectClass::Microwave, Location::Floor);
        let t = w.add(ObjectClass::Table, Location::Floor);
        w.add(ObjectClass::Ashcan, Location::Floor);
        let c = w.add(ObjectClass::Cookie, Location::In(mw));
        w.object_mut(&c).unwrap().flags.burnt = true;
        w.add(ObjectClass::Rag, Location::In(t));
        w
    }

    #[test]
    fn absent_object_fails_first_step() {
        let mut w = WorldState::default();
        w.add(ObjectClass::Table, Location::Floor);
        let r = execute(&parse_plan("open(microwave)").unwrap(), &w);
        assert_eq!(r.executed, 0);
        let f = r.failure.unwrap();
        assert_eq!(f.reason, FailureReason::ObjectAbsent);
        assert_eq!(f.reason.to_string(), "object absent");
    }

    #[test]
    fn pick_from_closed_container_fails() {
        let w = kitchen();
        let r = execute(&parse_plan("find(cookie)\npick(cookie)").unwrap(), &w);
        assert_eq!(r.executed, 1);
        assert_eq!(r.failure.unwrap().reason, FailureReason::ContainerClosed);
        let r = execute(&parse_plan("pick(cookie)").unwrap(), &w);
        assert_eq!(r.failure.unwrap().reason, FailureReason::ContainerClosed);
    }

    #[test]
    fn full_discard_sequence() {
        let w = kitchen();
        let plan = parse_plan(
            "find(microwave)\nopen(microwave)\npick(cookie)\nclose(microwave)\nfind(ashcan)\ndiscard(cookie)",
        )
        .unwrap();
        let r = execute(&plan, &w);
        assert!(r.fully_executed(), "{:?}", r.failure);
        let goal = [
            GoalPredicate::NoBurntIn {
                receptacle: "microwave_0".into(),
            },
            GoalPredicate::Closed {
                object: "microwave_0".into(),
            },
        ];
        assert!(goal_satisfied(&goal, &r.final_world));
        assert!(!goal_satisfied(&goal, &w));
        assert!(r.final_world.validate().is_ok());
    }

    #[test]
    fn execute_leaves_input_untouched_and_is_deterministic() {
        let w = kitchen();
        let before = w.clone();
        let plan = parse_plan("find(rag)\npick(rag)\nfind(microwave)\nopen(microwave)").unwrap();
        let a = execute(&plan, &w);
        let b = execute(&plan, &w);
        assert_eq!(w, before);
        assert_eq!(a, b);
    }

    #[test]
    fn clean_needs_rag_and_dirt() {
        let mut w = kitchen();
        w.object_mut("table_0").unwrap().flags.dirty = true;
        let r = execute(&parse_plan("find(table)\nclean(table)").unwrap(), &w);
        assert_eq!(r.failure.unwrap().reason, FailureReason::NoRag);
        let r = execute(&parse_plan("find(rag)\npick(rag)\nclean(table)\nclean(table)").unwrap(), &w);
        assert_eq!(r.executed, 3);
        assert_eq!(r.failure.unwrap().reason, FailureReason::NotDirty);
    }

    #[test]
    fn place_into_closed_container_fails() {
        let w = kitchen();
        let plan = parse_plan("find(rag)\npick(rag)\nfind(microwave)\nplace(rag)").unwrap();
        let r = execute(&plan, &w);
        assert_eq!(r.failure.unwrap().reason, FailureReason::ContainerClosed);
    }
}
