use serde::{Deserialize, Serialize};

use super::config::GenConfig;
use super::scene::{rasterize, Scene};
use super::world::{Location, ObjectClass, WorldState};
use crate::error::{Error, Result};
use crate::planeval::{
    execute, goal_satisfied, parse_plan, solve, ActionSequence, GoalPredicate, Split, Subtask,
};
use crate::tensor_core::Rng;

const TASK_STREAM: u64 = 1;
const MAX_ATTEMPTS: usize = 200;
/// Items per furniture piece; matches the layout slots.
const CAPACITY: usize = 6;
const HOLDERS: [ObjectClass; 4] = [
    ObjectClass::Microwave,
    ObjectClass::Cabinet,
    ObjectClass::Sink,
    ObjectClass::Table,
];
const CLEANABLE: [ObjectClass; 3] = [ObjectClass::Microwave, ObjectClass::Plate, ObjectClass::Table];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedSubtask {
    #[serde(flatten)]
    pub task: Subtask,
    pub ctrf: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub goal_text: String,
    pub clause_texts: Vec<String>,
    /// 1 marks a counterfactual clause.
    pub clause_labels: Vec<u8>,
    pub subtasks: Vec<PlannedSubtask>,
    pub reference_plan: ActionSequence,
    pub ctrf_step_flags: Vec<bool>,
    pub goal_condition: Vec<GoalPredicate>,
}

impl TaskSpec {
    /// Goal sentence followed by the clauses, each terminated by a period.
    pub fn text(&self) -> String {
        std::iter::once(&self.goal_text)
            .chain(&self.clause_texts)
            .map(|c| format!("{c}."))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn is_ctrf(&self) -> bool {
        self.clause_labels.contains(&1)
    }

    pub fn split(&self) -> Split {
        if self.is_ctrf() {
            Split::Ctrf
        } else {
            Split::Norm
        }
    }

    /// Clause indices (1-based, goal is 0) labelled counterfactual.
    pub fn ctrf_indices(&self) -> Vec<usize> {
        self.clause_labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == 1)
            .map(|(k, _)| k + 1)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub world: WorldState,
    pub scene: Scene,
    pub task: TaskSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Goal {
    Deliver(ObjectClass, ObjectClass),
    Heat(ObjectClass),
    Dispose(ObjectClass),
    Clean(ObjectClass),
}

impl Goal {
    fn item(self) -> Option<ObjectClass> {
        match self {
            Goal::Deliver(x, _) | Goal::Heat(x) | Goal::Dispose(x) => Some(x),
            Goal::Clean(x) => (!x.is_furniture()).then_some(x),
        }
    }

    fn text(self) -> String {
        match self {
            Goal::Deliver(x, r) => format!("Put the {x} {} the {r}", preposition(r)),
            Goal::Heat(x) => format!("Heat the {x}"),
            Goal::Dispose(x) => format!("Throw away the {x}"),
            Goal::Clean(x) => format!("Clean the {x}"),
        }
    }

    fn subtask(self) -> Subtask {
        match self {
            Goal::Deliver(x, r) => Subtask::Deliver {
                object: x.name().into(),
                receptacle: r.name().into(),
            },
            Goal::Heat(x) => Subtask::Heat { object: x.name().into() },
            Goal::Dispose(x) => Subtask::Dispose { object: x.name().into() },
            Goal::Clean(x) => Subtask::Clean {
                object: x.name().into(),
                stow_rag: false,
            },
        }
    }
}

fn preposition(r: ObjectClass) -> &'static str {
    if r == ObjectClass::Table {
        "on"
    } else {
        "in"
    }
}

pub fn burnt_clause() -> String {
    "If the microwave contains burnt food, discard it first".to_string()
}

pub fn dirty_clause(x: ObjectClass) -> String {
    format!("If the {x} is dirty, clean it first")
}

pub fn location_clause(x: ObjectClass, r: ObjectClass) -> String {
    format!("The {x} is {} the {r}", preposition(r))
}

struct Hazards {
    burnt: Option<ObjectClass>,
    dirty: Option<ObjectClass>,
}

fn pick<T: Copy>(rng: &mut Rng, items: &[T]) -> Option<T> {
    rng.choose(items).copied()
}

fn sample_goal(rng: &mut Rng, cfg: &GenConfig) -> Option<Goal> {
    let holders: Vec<_> = HOLDERS.into_iter().filter(|&c| cfg.has(c)).collect();
    let items: Vec<_> = ObjectClass::ALL
        .into_iter()
        .filter(|&c| !c.is_furniture() && c != ObjectClass::Rag && cfg.has(c))
        .collect();
    let foods: Vec<_> = ObjectClass::FOODS.into_iter().filter(|&c| cfg.has(c)).collect();
    let cleanable: Vec<_> = CLEANABLE
        .into_iter()
        .filter(|&c| cfg.has(c) && (c.is_furniture() || !holders.is_empty()))
        .collect();
    let mut kinds = Vec::new();
    if !items.is_empty() && holders.len() >= 2 {
        kinds.push(0);
    }
    if cfg.has(ObjectClass::Microwave) && !foods.is_empty() && holders.len() >= 2 {
        kinds.push(1);
    }
    if cfg.has(ObjectClass::Ashcan) && !items.is_empty() && !holders.is_empty() {
        kinds.push(2);
    }
    if cfg.has(ObjectClass::Rag) && !cleanable.is_empty() && !holders.is_empty() {
        kinds.push(3);
    }
    Some(match pick(rng, &kinds)? {
        0 => Goal::Deliver(pick(rng, &items)?, pick(rng, &holders)?),
        1 => Goal::Heat(pick(rng, &foods)?),
        2 => Goal::Dispose(pick(rng, &items)?),
        _ => Goal::Clean(pick(rng, &cleanable)?),
    })
}

fn sample_hazards(rng: &mut Rng, cfg: &GenConfig, goal: Goal) -> Option<Hazards> {
    let burnt_options: Vec<_> = if cfg.has(ObjectClass::Microwave) && cfg.has(ObjectClass::Ashcan) {
        ObjectClass::FOODS
            .into_iter()
            .filter(|&f| cfg.has(f) && Some(f) != goal.item())
            .collect()
    } else {
        Vec::new()
    };
    let dirty_target = match goal {
        Goal::Deliver(ObjectClass::Plate, _) => Some(ObjectClass::Plate),
        Goal::Deliver(_, r) if r.is_cleanable() => Some(r),
        Goal::Heat(_) => Some(ObjectClass::Microwave),
        _ => None,
    }
    .filter(|&x| cfg.has(x) && cfg.has(ObjectClass::Rag) && cfg.has(ObjectClass::Sink));
    let burnt = pick(rng, &burnt_options);
    match (burnt, dirty_target) {
        (None, None) => None,
        (Some(b), Some(d)) => {
            if rng.bernoulli(cfg.double_ctrf_prob) {
                Some(Hazards { burnt: Some(b), dirty: Some(d) })
            } else if rng.bernoulli(0.5) {
                Some(Hazards { burnt: Some(b), dirty: None })
            } else {
                Some(Hazards { burnt: None, dirty: Some(d) })
            }
        }
        (b, d) => Some(Hazards { burnt: b, dirty: d }),
    }
}

/// Generates one episode. `force_ctrf` overrides the counterfactual draw.
pub fn generate_episode_with(seed: u64, cfg: &GenConfig, force_ctrf: Option<bool>) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = Rng::new(seed).fork(TASK_STREAM);
    let want_ctrf = match force_ctrf {
        Some(f) => f,
        None => rng.bernoulli(cfg.ctrf_prob),
    };
    for _ in 0..MAX_ATTEMPTS {
        if let Some((world, task)) = attempt(&mut rng, cfg, want_ctrf)? {
            let scene = rasterize(&world, cfg, seed)?;
            return Ok(Episode { seed, world, scene, task });
        }
    }
    Err(Error::Generation(format!(
        "no satisfiable task for seed {seed} with the enabled classes {:?}",
        cfg.classes
    )))
}

pub fn generate_episode(seed: u64, cfg: &GenConfig) -> Result<Episode> {
    generate_episode_with(seed, cfg, None)
}

fn attempt(rng: &mut Rng, cfg: &GenConfig, want_ctrf: bool) -> Result<Option<(WorldState, TaskSpec)>> {
    let Some(goal) = sample_goal(rng, cfg) else {
        return Ok(None);
    };
    let hazards = if want_ctrf {
        match sample_hazards(rng, cfg, goal) {
            Some(h) => h,
            None => return Ok(None),
        }
    } else {
        Hazards { burnt: None, dirty: None }
    };

    let mut items: Vec<ObjectClass> = Vec::new();
    items.extend(goal.item());
    items.extend(hazards.burnt);
    let needs_rag = matches!(goal, Goal::Clean(_)) || hazards.dirty.is_some();
    if needs_rag && !items.contains(&ObjectClass::Rag) {
        items.push(ObjectClass::Rag);
    }
    let mut others: Vec<_> = ObjectClass::ALL
        .into_iter()
        .filter(|&c| !c.is_furniture() && cfg.has(c) && !items.contains(&c))
        .collect();
    rng.shuffle(&mut others);
    let target = rng.range(cfg.min_items, cfg.max_items + 1);
    while items.len() < target {
        match others.pop() {
            Some(c) => items.push(c),
            None => break,
        }
    }

    let mut world = WorldState::default();
    for c in ObjectClass::FURNITURE.into_iter().filter(|&c| cfg.has(c)) {
        world.add(c, Location::Floor);
    }
    let mut holder_of = Vec::new();
    for &item in &items {
        let container = if Some(item) == hazards.burnt {
            ObjectClass::Microwave
        } else {
            let allowed: Vec<_> = HOLDERS
                .into_iter()
                .filter(|&h| {
                    cfg.has(h)
                        && !(hazards.burnt.is_some() && h == ObjectClass::Microwave)
                        && !matches!(goal, Goal::Deliver(x, r) if x == item && r == h)
                        && !(matches!(goal, Goal::Heat(x) if x == item) && h == ObjectClass::Microwave)
                        && holder_of.iter().filter(|&&(_, c)| c == h).count() < CAPACITY
                })
                .collect();
            match pick(rng, &allowed) {
                Some(h) => h,
                None => return Ok(None),
            }
        };
        holder_of.push((item, container));
        let rid = world.first_of(container).unwrap().id.clone();
        world.add(item, Location::In(rid));
    }
    let set_flag = |w: &mut WorldState, c: ObjectClass, f: fn(&mut super::world::Flags)| {
        let id = w.first_of(c).unwrap().id.clone();
        f(&mut w.object_mut(&id).unwrap().flags);
    };
    if let Some(b) = hazards.burnt {
        set_flag(&mut world, b, |f| f.burnt = true);
    }
    if let Some(d) = hazards.dirty {
        set_flag(&mut world, d, |f| f.dirty = true);
    }
    if let Goal::Clean(x) = goal {
        set_flag(&mut world, x, |f| f.dirty = true);
    }
    world.validate()?;

    let container_of = |c: ObjectClass| holder_of.iter().find(|&&(i, _)| i == c).map(|&(_, h)| h);
    let mut clauses: Vec<(String, u8)> = Vec::new();
    if needs_rag {
        clauses.push((location_clause(ObjectClass::Rag, container_of(ObjectClass::Rag).unwrap()), 0));
    }
    let mut fact_pool: Vec<_> = items
        .iter()
        .copied()
        .filter(|&c| Some(c) != goal.item() && Some(c) != hazards.burnt && !(needs_rag && c == ObjectClass::Rag))
        .collect();
    rng.shuffle(&mut fact_pool);
    let n_facts = rng.range(0, cfg.max_facts + 1).min(fact_pool.len());
    for &c in &fact_pool[..n_facts] {
        clauses.push((location_clause(c, container_of(c).unwrap()), 0));
    }
    let mut subtasks = Vec::new();
    if hazards.burnt.is_some() {
        clauses.push((burnt_clause(), 1));
        subtasks.push(PlannedSubtask {
            task: Subtask::ClearBurnt {
                receptacle: ObjectClass::Microwave.name().into(),
            },
            ctrf: true,
        });
    }
    if let Some(d) = hazards.dirty {
        clauses.push((dirty_clause(d), 1));
        subtasks.push(PlannedSubtask {
            task: Subtask::Clean {
                object: d.name().into(),
                stow_rag: true,
            },
            ctrf: true,
        });
    }
    rng.shuffle(&mut clauses);
    subtasks.push(PlannedSubtask {
        task: goal.subtask(),
        ctrf: false,
    });

    let plan_input: Vec<(Subtask, bool)> = subtasks.iter().map(|s| (s.task.clone(), s.ctrf)).collect();
    let solution = solve(&world, &plan_input)?;
    let mut goal_condition = Vec::new();
    for s in &subtasks {
        goal_condition.extend(s.task.goal(&world)?);
    }
    let result = execute(&solution.plan, &world);
    if !result.fully_executed() || !goal_satisfied(&goal_condition, &result.final_world) {
        return Err(Error::Generation(format!(
            "reference plan fails its own goal: {:?}",
            result.failure
        )));
    }
    let task = TaskSpec {
        goal_text: goal.text(),
        clause_texts: clauses.iter().map(|(t, _)| t.clone()).collect(),
        clause_labels: clauses.iter().map(|&(_, y)| y).collect(),
        subtasks,
        reference_plan: solution.plan,
        ctrf_step_flags: solution.ctrf_flags,
        goal_condition,
    };
    Ok(Some((world, task)))
}

/// One dataset line; rasters are regenerated from the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub world: WorldState,
    pub task: TaskRecord,
    pub plan: String,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub goal: String,
    pub clauses: Vec<String>,
    pub subtasks: Vec<PlannedSubtask>,
    pub ctrf_step_flags: Vec<bool>,
    pub goal_condition: Vec<GoalPredicate>,
}

impl Episode {
    pub fn to_record(&self) -> EpisodeRecord {
        EpisodeRecord {
            seed: self.seed,
            world: self.world.clone(),
            task: TaskRecord {
                goal: self.task.goal_text.clone(),
                clauses: self.task.clause_texts.clone(),
                subtasks: self.task.subtasks.clone(),
                ctrf_step_flags: self.task.ctrf_step_flags.clone(),
                goal_condition: self.task.goal_condition.clone(),
            },
            plan: self.task.reference_plan.to_string(),
            labels: self.task.clause_labels.clone(),
        }
    }

    pub fn from_record(rec: EpisodeRecord, cfg: &GenConfig) -> Result<Episode> {
        rec.world.validate()?;
        let plan = parse_plan(&rec.plan)?;
        if rec.labels.len() != rec.task.clauses.len() || rec.labels.iter().any(|&y| y > 1) {
            return Err(Error::Data(format!("seed {}: labels do not match clauses", rec.seed)));
        }
        if rec.task.ctrf_step_flags.len() != plan.len() {
            return Err(Error::Data(format!("seed {}: step flags do not match plan", rec.seed)));
        }
        let scene = rasterize(&rec.world, cfg, rec.seed)?;
        Ok(Episode {
            seed: rec.seed,
            world: rec.world,
            scene,
            task: TaskSpec {
                goal_text: rec.task.goal,
                clause_texts: rec.task.clauses,
                clause_labels: rec.labels,
                subtasks: rec.task.subtasks,
                reference_plan: plan,
                ctrf_step_flags: rec.task.ctrf_step_flags,
                goal_condition: rec.task.goal_condition,
            },
        })
    }
}
