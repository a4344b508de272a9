//! Macro-based goal solver used to mint reference plans.
//!
//! Every macro opens a container only when it finds it closed and closes it
//! again afterwards, and starts with a `find`, so a macro's steps never depend
//! on where earlier macros left the agent.

use serde::{Deserialize, Serialize};

use super::action::{Action, ActionSequence, Predicate};
use super::sim::{apply, GoalPredicate};
use crate::error::{Error, Result};
use crate::worldgen::{Location, ObjectClass, WorldState};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Subtask {
    Deliver { object: String, receptacle: String },
    Heat { object: String },
    Clean { object: String, stow_rag: bool },
    Dispose { object: String },
    ClearBurnt { receptacle: String },
}

impl Subtask {
    /// Goal predicates this subtask establishes, against object ids of `w`.
    pub fn goal(&self, w: &WorldState) -> Result<Vec<GoalPredicate>> {
        let id = |name: &str| -> Result<String> {
            w.resolve(name)
                .map(|o| o.id.clone())
                .ok_or_else(|| Error::Generation(format!("no object `{name}` for goal")))
        };
        Ok(match self {
            Subtask::Deliver { object, receptacle } => vec![GoalPredicate::Inside {
                object: id(object)?,
                receptacle: id(receptacle)?,
            }],
            Subtask::Heat { object } => {
                let mw = id("microwave")?;
                vec![
                    GoalPredicate::Inside {
                        object: id(object)?,
                        receptacle: mw.clone(),
                    },
                    GoalPredicate::Closed { object: mw.clone() },
                    GoalPredicate::Powered { object: mw },
                ]
            }
            Subtask::Clean { object, .. } => vec![GoalPredicate::NotDirty { object: id(object)? }],
            Subtask::Dispose { object } => vec![GoalPredicate::Absent { object: id(object)? }],
            Subtask::ClearBurnt { receptacle } => vec![GoalPredicate::NoBurntIn {
                receptacle: id(receptacle)?,
            }],
        })
    }
}

struct Emitter {
    world: WorldState,
    actions: Vec<Action>,
    flags: Vec<bool>,
    ctrf: bool,
}

impl Emitter {
    fn step(&mut self, predicate: Predicate, object: &str) -> Result<()> {
        let action = Action::new(predicate, object);
        apply(&mut self.world, &action).map_err(|reason| {
            Error::Generation(format!("solver step `{action}` failed: {reason}"))
        })?;
        self.actions.push(action);
        self.flags.push(self.ctrf);
        Ok(())
    }

    fn class_name(&self, name: &str) -> Result<&'static str> {
        self.world
            .resolve(name)
            .map(|o| o.class.name())
            .ok_or_else(|| Error::Generation(format!("solver: `{name}` absent")))
    }

    fn fetch(&mut self, name: &str) -> Result<()> {
        let obj = self
            .world
            .resolve(name)
            .ok_or_else(|| Error::Generation(format!("solver: `{name}` absent")))?
            .clone();
        let x = obj.class.name();
        match &obj.location {
            Location::Held => Ok(()),
            Location::Floor => Err(Error::Generation(format!("solver: cannot fetch {x}"))),
            Location::In(c) => {
                let container = self.world.object(c).unwrap().clone();
                let cname = container.class.name();
                if container.class.is_openable() && !container.flags.open {
                    self.step(Predicate::Find, cname)?;
                    self.step(Predicate::Open, cname)?;
                    self.step(Predicate::Pick, x)?;
                    self.step(Predicate::Close, cname)
                } else {
                    self.step(Predicate::Find, x)?;
                    self.step(Predicate::Pick, x)
                }
            }
        }
    }

    fn deliver(&mut self, name: &str, receptacle: &str) -> Result<()> {
        let x = self.class_name(name)?;
        let r = self
            .world
            .resolve(receptacle)
            .ok_or_else(|| Error::Generation(format!("solver: `{receptacle}` absent")))?
            .clone();
        self.fetch(x)?;
        let rname = r.class.name();
        self.step(Predicate::Find, rname)?;
        if r.class.is_openable() && !r.flags.open {
            self.step(Predicate::Open, rname)?;
            self.step(Predicate::Place, x)?;
            self.step(Predicate::Close, rname)
        } else {
            self.step(Predicate::Place, x)
        }
    }

    fn dispose(&mut self, name: &str) -> Result<()> {
        let x = self.class_name(name)?;
        self.fetch(x)?;
        self.step(Predicate::Find, ObjectClass::Ashcan.name())?;
        self.step(Predicate::Discard, x)
    }

    fn run(&mut self, task: &Subtask) -> Result<()> {
        match task {
            Subtask::Deliver { object, receptacle } => self.deliver(object, receptacle),
            Subtask::Heat { object } => {
                self.deliver(object, ObjectClass::Microwave.name())?;
                self.step(Predicate::ToggleOn, ObjectClass::Microwave.name())
            }
            Subtask::Clean { object, stow_rag } => {
                let x = self.class_name(object)?;
                self.fetch(ObjectClass::Rag.name())?;
                self.step(Predicate::Find, x)?;
                self.step(Predicate::Clean, x)?;
                if *stow_rag {
                    self.step(Predicate::Find, ObjectClass::Sink.name())?;
                    self.step(Predicate::Place, ObjectClass::Rag.name())?;
                }
                Ok(())
            }
            Subtask::Dispose { object } => self.dispose(object),
            Subtask::ClearBurnt { receptacle } => {
                let rid = self
                    .world
                    .resolve(receptacle)
                    .ok_or_else(|| Error::Generation(format!("solver: `{receptacle}` absent")))?
                    .id
                    .clone();
                let burnt: Vec<String> = self
                    .world
                    .contents(&rid)
                    .filter(|o| o.flags.burnt)
                    .map(|o| o.class.name().to_string())
                    .collect();
                for b in burnt {
                    self.dispose(&b)?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub plan: ActionSequence,
    /// Per-step flag: true for steps emitted by a counterfactual remedy.
    pub ctrf_flags: Vec<bool>,
    pub final_world: WorldState,
}

/// Plans `tasks` in order; the boolean marks remedial (counterfactual) tasks.
pub fn solve(world: &WorldState, tasks: &[(Subtask, bool)]) -> Result<Solution> {
    let mut em = Emitter {
        world: world.clone(),
        actions: Vec::new(),
        flags: Vec::new(),
        ctrf: false,
    };
    for (task, ctrf) in tasks {
        em.ctrf = *ctrf;
        em.run(task)?;
    }
    Ok(Solution {
        plan: ActionSequence(em.actions),
        ctrf_flags: em.flags,
        final_world: em.world,
    })
}
