//! Scenario teacher: an autoregressive random generator and a mutation-based editor.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layouts::{sample_nodes, LaneRole, NodeSampling, RoadLayout};
use crate::scenario::{
    Actor, ActorClass, ActorId, EdgeKind, NodeId, NpcAttributes, Occupancy, ScenarioBounds,
    ScenarioError, ScenarioGraph,
};

const STUDENT_PLACEMENT_RETRIES: usize = 32;
const SCENARIO_RETRIES: usize = 32;
const VELOCITY_SIGMA: f64 = 0.5;
const OFFSET_SIGMA: f64 = 0.2;

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("layout set is empty")]
    EmptyLibrary,
    #[error("no reachable student goal after {0} placement attempts")]
    NoReachableGoal(usize),
    #[error("could not place {wanted} actors (placed {placed})")]
    Placement { wanted: usize, placed: usize },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("scenario references layout {0} which is not available")]
    UnknownLayout(u32),
    #[error("no mutation applies to this scenario")]
    NoApplicableMutation,
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub car: f64,
    pub motorcycle: f64,
    pub parked_car: f64,
    pub trash_container: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self {
            car: 0.55,
            motorcycle: 0.15,
            parked_car: 0.2,
            trash_container: 0.1,
        }
    }
}

impl ClassWeights {
    pub fn weight(&self, class: ActorClass) -> f64 {
        match class {
            ActorClass::Car => self.car,
            ActorClass::Motorcycle => self.motorcycle,
            ActorClass::ParkedCar => self.parked_car,
            ActorClass::TrashContainer => self.trash_container,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub max_actors: usize,
    pub class_weights: ClassWeights,
    pub velocity_range: (f64, f64),
    pub offset_range: (f64, f64),
    /// When set, an actor is an obstacle with this probability and
    /// `class_weights` only picks the class within its category.
    pub obstacle_fraction: Option<f64>,
    pub sampling: NodeSampling,
    /// Minimum distance between an actor's node and any other occupied node
    /// (or the student's goal node).
    pub placement_clearance: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            max_actors: 8,
            class_weights: ClassWeights::default(),
            velocity_range: (1.0, 6.0),
            offset_range: (-0.5, 0.5),
            obstacle_fraction: None,
            sampling: NodeSampling::default(),
            placement_clearance: 7.0,
        }
    }
}

impl GeneratorConfig {
    pub fn check(&self, bounds: &ScenarioBounds) -> Result<(), TeacherError> {
        let w = &self.class_weights;
        let sum = w.car + w.motorcycle + w.parked_car + w.trash_container;
        if ActorClass::ALL.iter().any(|c| w.weight(*c) < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(TeacherError::InvalidConfig(format!(
                "class weights must be non-negative and sum to 1 (sum {sum})"
            )));
        }
        let (v0, v1) = self.velocity_range;
        if !(0.0 <= v0 && v0 <= v1 && v1 <= bounds.v_max) {
            return Err(TeacherError::InvalidConfig(format!(
                "velocity range {v0}..{v1} outside [0, {}]",
                bounds.v_max
            )));
        }
        let (d0, d1) = self.offset_range;
        if !(d0 <= d1 && d0.abs() <= bounds.lane_half_width && d1.abs() <= bounds.lane_half_width) {
            return Err(TeacherError::InvalidConfig(format!(
                "offset range {d0}..{d1} exceeds lane half width {}",
                bounds.lane_half_width
            )));
        }
        if let Some(p) = self.obstacle_fraction {
            if !(0.0..=1.0).contains(&p) {
                return Err(TeacherError::InvalidConfig(format!(
                    "obstacle fraction {p} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    fn sample_class<R: Rng + ?Sized>(
        &self,
        allowed: &[ActorClass],
        rng: &mut R,
    ) -> Option<ActorClass> {
        let w = &self.class_weights;
        let weight = |c: ActorClass| -> f64 {
            match self.obstacle_fraction {
                None => w.weight(c),
                Some(p) => {
                    let (cat_p, cat_sum) = if c.is_road_bound() {
                        (1.0 - p, w.car + w.motorcycle)
                    } else {
                        (p, w.parked_car + w.trash_container)
                    };
                    if cat_sum > 0.0 {
                        cat_p * w.weight(c) / cat_sum
                    } else {
                        0.0
                    }
                }
            }
        };
        let weights: Vec<f64> = allowed.iter().map(|c| weight(*c)).collect();
        let dist = WeightedIndex::new(&weights).ok()?;
        Some(allowed[dist.sample(rng)])
    }

    fn sample_attrs<R: Rng + ?Sized>(&self, rng: &mut R) -> NpcAttributes {
        NpcAttributes {
            desired_velocity: uniform(rng, self.velocity_range),
            lateral_offset: uniform(rng, self.offset_range),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn lane_role(layout: &RoadLayout, g: &ScenarioGraph, node: NodeId) -> Option<LaneRole> {
    g.node(node)
        .and_then(|n| layout.lane(n.lane_id))
        .map(|l| l.role)
}

fn has_forward_edge(g: &ScenarioGraph, node: NodeId) -> bool {
    g.edges.iter().any(|e| e.src == node && e.kind.is_forward())
}

/// Classes that may be placed on `node`: road-bound actors need somewhere to
/// drive, obstacles stay on the arms (roadside), never inside the junction.
fn allowed_classes(layout: &RoadLayout, g: &ScenarioGraph, node: NodeId) -> Vec<ActorClass> {
    let on_arm = matches!(
        lane_role(layout, g, node),
        Some(LaneRole::Inbound { .. } | LaneRole::Outbound { .. })
    );
    let drivable = has_forward_edge(g, node);
    ActorClass::ALL
        .into_iter()
        .filter(|c| if c.is_road_bound() { drivable } else { on_arm })
        .collect()
}

/// Empty nodes far enough from every occupied node and from the student's goal.
fn free_nodes(g: &ScenarioGraph, clearance: f64) -> Vec<NodeId> {
    let mut anchors: Vec<_> = g
        .nodes
        .iter()
        .filter(|n| n.occupancy != Occupancy::Empty)
        .map(|n| n.pose.position())
        .collect();
    if let Some(goal) = g.student_goal().and_then(|e| g.node(e.dst)) {
        anchors.push(goal.pose.position());
    }
    g.nodes
        .iter()
        .filter(|n| n.occupancy == Occupancy::Empty)
        .filter(|n| {
            anchors
                .iter()
                .all(|a| a.distance(n.pose.position()) >= clearance)
        })
        .map(|n| n.id)
        .collect()
}

/// Goal candidates for the student: reachable outbound-lane nodes on an arm
/// other than the start arm; falls back to any reachable node.
fn student_goal_candidates(
    layout: &RoadLayout,
    g: &ScenarioGraph,
    start: NodeId,
) -> Result<Vec<NodeId>, ScenarioError> {
    let reach = g.reachable_goals(start)?;
    let start_arm = match lane_role(layout, g, start) {
        Some(LaneRole::Inbound { arm } | LaneRole::Outbound { arm }) => Some(arm),
        _ => None,
    };
    let preferred: Vec<NodeId> = reach
        .iter()
        .copied()
        .filter(|n| {
            matches!(lane_role(layout, g, *n),
                Some(LaneRole::Outbound { arm }) if Some(arm) != start_arm)
        })
        .collect();
    if preferred.is_empty() {
        Ok(reach.into_iter().collect())
    } else {
        Ok(preferred)
    }
}

fn place_actor(
    g: &mut ScenarioGraph,
    node: NodeId,
    class: ActorClass,
    goal: Option<(NodeId, NpcAttributes)>,
) -> Result<ActorId, ScenarioError> {
    let id = g.next_actor_id();
    let occ = if class.is_road_bound() {
        Occupancy::Npc(id)
    } else {
        Occupancy::Obstacle(id)
    };
    g.node_mut(node)
        .ok_or(ScenarioError::UnknownNode(node))?
        .occupancy = occ;
    g.actors.insert(id, Actor { class, node });
    if let Some((dst, attrs)) = goal {
        g.add_edge(node, dst, EdgeKind::NpcGoal, Some(attrs))?;
    }
    Ok(id)
}

fn remove_actor(g: &mut ScenarioGraph, id: ActorId) -> Result<(), ScenarioError> {
    let actor = g
        .actors
        .remove(&id)
        .ok_or(ScenarioError::UnknownActor(id))?;
    g.remove_edges_from(actor.node, EdgeKind::NpcGoal);
    if let Some(n) = g.node_mut(actor.node) {
        n.occupancy = Occupancy::Empty;
    }
    Ok(())
}

/// Try to add one actor on a free node; returns false when nothing fits.
fn add_random_actor<R: Rng + ?Sized>(
    layout: &RoadLayout,
    g: &mut ScenarioGraph,
    cfg: &GeneratorConfig,
    class_hint: Option<ActorClass>,
    rng: &mut R,
) -> Result<bool, TeacherError> {
    let free = free_nodes(g, cfg.placement_clearance);
    let candidates: Vec<(NodeId, Vec<ActorClass>)> = free
        .into_iter()
        .map(|n| (n, allowed_classes(layout, g, n)))
        .filter(|(_, classes)| match class_hint {
            Some(c) => classes.contains(&c),
            None => !classes.is_empty(),
        })
        .collect();
    let Some((node, classes)) = candidates.choose(rng).cloned() else {
        return Ok(false);
    };
    let class = match class_hint {
        Some(c) => c,
        None => match cfg.sample_class(&classes, rng) {
            Some(c) => c,
            None => return Ok(false),
        },
    };
    let goal = if class.is_road_bound() {
        let reach: Vec<NodeId> = g.reachable_goals(node)?.into_iter().collect();
        let dst = *reach
            .choose(rng)
            .expect("drivable node has reachable goals");
        Some((dst, cfg.sample_attrs(rng)))
    } else {
        None
    };
    place_actor(g, node, class, goal)?;
    Ok(true)
}

fn pick_layout<'a, R: Rng + ?Sized>(
    layouts: &'a [RoadLayout],
    rng: &mut R,
) -> Result<&'a RoadLayout, TeacherError> {
    layouts.choose(rng).ok_or(TeacherError::EmptyLibrary)
}

/// Steps 1 and 2: pick a layout, sample its empty graph, place the student and its goal.
fn initial_scenario<'a, R: Rng + ?Sized>(
    layouts: &'a [RoadLayout],
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> Result<(ScenarioGraph, &'a RoadLayout), TeacherError> {
    let layout = pick_layout(layouts, rng)?;
    let sampled = sample_nodes(layout, cfg.sampling.spacing, cfg.sampling.jitter, rng);
    let inbound: Vec<NodeId> = sampled
        .nodes
        .iter()
        .filter(|n| {
            matches!(
                layout.lane(n.lane_id).map(|l| l.role),
                Some(LaneRole::Inbound { .. })
            )
        })
        .map(|n| n.id)
        .collect();
    let mut g =
        ScenarioGraph::from_parts(layout.id, sampled.nodes, sampled.edges, 0, BTreeMap::new());
    for _ in 0..STUDENT_PLACEMENT_RETRIES {
        let start = *inbound
            .choose(rng)
            .ok_or(TeacherError::NoReachableGoal(0))?;
        let goals = student_goal_candidates(layout, &g, start)?;
        if let Some(&goal) = goals.choose(rng) {
            g.node_mut(start).expect("start node exists").occupancy = Occupancy::Student;
            g.student_node = start;
            g.add_edge(start, goal, EdgeKind::StudentGoal, None)?;
            return Ok((g, layout));
        }
    }
    Err(TeacherError::NoReachableGoal(STUDENT_PLACEMENT_RETRIES))
}

/// Autoregressive random scenario: layout, student and goal, actors, NPC goals
/// and attributes. The actor count is uniform in `[0, max_actors]`; actors
/// that do not fit anywhere are skipped.
pub fn generate_scenario<R: Rng + ?Sized>(
    layouts: &[RoadLayout],
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> Result<ScenarioGraph, TeacherError> {
    let (mut g, layout) = initial_scenario(layouts, cfg, rng)?;
    let count = rng.random_range(0..=cfg.max_actors);
    populate(layout, &mut g, cfg, count, rng)?;
    Ok(g)
}

/// Like [`generate_scenario`] but with exactly `count` actors; whole scenarios
/// are redrawn (bounded) when the actors do not fit.
pub fn generate_scenario_with_count<R: Rng + ?Sized>(
    layouts: &[RoadLayout],
    cfg: &GeneratorConfig,
    count: usize,
    rng: &mut R,
) -> Result<ScenarioGraph, TeacherError> {
    let mut placed = 0;
    for _ in 0..SCENARIO_RETRIES {
        let (mut g, layout) = initial_scenario(layouts, cfg, rng)?;
        placed = populate(layout, &mut g, cfg, count, rng)?;
        if placed == count {
            return Ok(g);
        }
    }
    Err(TeacherError::Placement {
        wanted: count,
        placed,
    })
}

/// Steps 3 and 4: sample classes, place actors on distinct free nodes, give
/// every NPC a reachable goal with sampled velocity and offset.
fn populate<R: Rng + ?Sized>(
    layout: &RoadLayout,
    g: &mut ScenarioGraph,
    cfg: &GeneratorConfig,
    count: usize,
    rng: &mut R,
) -> Result<usize, TeacherError> {
    let mut placed = 0;
    for _ in 0..count {
        let Some(class) = cfg.sample_class(&ActorClass::ALL, rng) else {
            break;
        };
        if add_random_actor(layout, g, cfg, Some(class), rng)?
            || add_random_actor(layout, g, cfg, None, rng)?
        {
            placed += 1;
        }
    }
    Ok(placed)
}

/// The three editor mutation families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationKind {
    StudentGoal,
    ModifyActor,
    AddOrRemoveActor,
}

fn alternative_goals(layout: &RoadLayout, g: &ScenarioGraph) -> Result<Vec<NodeId>, ScenarioError> {
    let current = g.student_goal().map(|e| e.dst);
    let mut goals = student_goal_candidates(layout, g, g.student_node)?;
    goals.retain(|n| Some(*n) != current);
    Ok(goals)
}

fn can_add(layout: &RoadLayout, g: &ScenarioGraph, cfg: &GeneratorConfig) -> bool {
    g.actor_count() < cfg.max_actors
        && free_nodes(g, cfg.placement_clearance)
            .into_iter()
            .any(|n| !allowed_classes(layout, g, n).is_empty())
}

pub fn applicable_mutations(
    layout: &RoadLayout,
    g: &ScenarioGraph,
    cfg: &GeneratorConfig,
) -> Result<Vec<MutationKind>, TeacherError> {
    let mut kinds = Vec::with_capacity(3);
    if !alternative_goals(layout, g)?.is_empty() {
        kinds.push(MutationKind::StudentGoal);
    }
    if g.actor_count() > 0 {
        kinds.push(MutationKind::ModifyActor);
    }
    if g.actor_count() > 0 || can_add(layout, g, cfg) {
        kinds.push(MutationKind::AddOrRemoveActor);
    }
    Ok(kinds)
}

/// Apply exactly one semantic change, chosen uniformly among the applicable
/// mutation families.
pub fn mutate_once<R: Rng + ?Sized>(
    s: &ScenarioGraph,
    layout: &RoadLayout,
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> Result<ScenarioGraph, TeacherError> {
    if layout.id != s.layout_id {
        return Err(TeacherError::UnknownLayout(s.layout_id));
    }
    let kinds = applicable_mutations(layout, s, cfg)?;
    let kind = *kinds
        .choose(rng)
        .ok_or(TeacherError::NoApplicableMutation)?;
    let mut g = s.clone();
    match kind {
        MutationKind::StudentGoal => {
            let goals = alternative_goals(layout, &g)?;
            let dst = *goals.choose(rng).expect("applicable");
            let src = g.student_node;
            g.remove_edges_from(src, EdgeKind::StudentGoal);
            g.add_edge(src, dst, EdgeKind::StudentGoal, None)?;
        }
        MutationKind::ModifyActor => modify_actor(layout, &mut g, cfg, rng)?,
        MutationKind::AddOrRemoveActor => {
            let add_ok = can_add(layout, &g, cfg);
            let remove = match (add_ok, g.actor_count() > 0) {
                (true, true) => rng.random_bool(0.5),
                (false, true) => true,
                (true, false) => false,
                (false, false) => return Err(TeacherError::NoApplicableMutation),
            };
            if remove {
                let ids: Vec<ActorId> = g.actors.keys().copied().collect();
                let id = *ids.choose(rng).expect("non-empty");
                remove_actor(&mut g, id)?;
            } else {
                let added = add_random_actor(layout, &mut g, cfg, None, rng)?;
                debug_assert!(added);
            }
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ActorEdit {
    Class,
    Attributes,
    Goal,
}

fn modify_actor<R: Rng + ?Sized>(
    layout: &RoadLayout,
    g: &mut ScenarioGraph,
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> Result<(), TeacherError> {
    let bounds = ScenarioBounds::default();
    let ids: Vec<ActorId> = g.actors.keys().copied().collect();
    let id = *ids.choose(rng).ok_or(TeacherError::NoApplicableMutation)?;
    let actor = g.actors[&id];
    let other_classes: Vec<ActorClass> = allowed_classes(layout, g, actor.node)
        .into_iter()
        .filter(|c| *c != actor.class)
        .collect();
    let goal = g.goal_edge_from(actor.node).cloned();
    let reach: BTreeSet<NodeId> = if actor.class.is_road_bound() {
        g.reachable_goals(actor.node)?
    } else {
        BTreeSet::new()
    };

    let mut edits = Vec::with_capacity(3);
    if !other_classes.is_empty() {
        edits.push(ActorEdit::Class);
    }
    if goal.is_some() {
        edits.push(ActorEdit::Attributes);
        if reach.len() > 1 {
            edits.push(ActorEdit::Goal);
        }
    }
    // Attribute perturbation can fail to move an attribute pinned at a bound;
    // retry with another edit kind in that case.
    while !edits.is_empty() {
        let pick = rng.random_range(0..edits.len());
        match edits[pick] {
            ActorEdit::Class => {
                let class = cfg
                    .sample_class(&other_classes, rng)
                    .unwrap_or_else(|| *other_classes.choose(rng).expect("non-empty"));
                let node = actor.node;
                match (actor.class.is_road_bound(), class.is_road_bound()) {
                    (true, false) => {
                        g.remove_edges_from(node, EdgeKind::NpcGoal);
                        g.node_mut(node).expect("actor node").occupancy = Occupancy::Obstacle(id);
                    }
                    (false, true) => {
                        let reach: Vec<NodeId> = g.reachable_goals(node)?.into_iter().collect();
                        let dst = *reach.choose(rng).expect("drivable node");
                        g.add_edge(node, dst, EdgeKind::NpcGoal, Some(cfg.sample_attrs(rng)))?;
                        g.node_mut(node).expect("actor node").occupancy = Occupancy::Npc(id);
                    }
                    _ => {}
                }
                g.actors.get_mut(&id).expect("actor").class = class;
                return Ok(());
            }
            ActorEdit::Attributes => {
                let edge = goal.as_ref().expect("npc goal");
                let old = edge.npc_attrs.expect("npc attributes");
                let nv = Normal::new(0.0, VELOCITY_SIGMA).expect("sigma > 0");
                let nd = Normal::new(0.0, OFFSET_SIGMA).expect("sigma > 0");
                for _ in 0..16 {
                    let new = NpcAttributes {
                        desired_velocity: (old.desired_velocity + nv.sample(rng))
                            .clamp(0.0, bounds.v_max),
                        lateral_offset: (old.lateral_offset + nd.sample(rng))
                            .clamp(-bounds.lane_half_width, bounds.lane_half_width),
                    };
                    if new != old {
                        g.remove_edges_from(actor.node, EdgeKind::NpcGoal);
                        g.add_edge(actor.node, edge.dst, EdgeKind::NpcGoal, Some(new))?;
                        return Ok(());
                    }
                }
                edits.remove(pick);
            }
            ActorEdit::Goal => {
                let edge = goal.as_ref().expect("npc goal");
                let choices: Vec<NodeId> =
                    reach.iter().copied().filter(|n| *n != edge.dst).collect();
                let dst = *choices.choose(rng).expect("more than one reachable goal");
                g.remove_edges_from(actor.node, EdgeKind::NpcGoal);
                g.add_edge(actor.node, dst, EdgeKind::NpcGoal, edge.npc_attrs)?;
                return Ok(());
            }
        }
    }
    Err(TeacherError::NoApplicableMutation)
}

/// `n_m` sequential mutations.
pub fn edit<R: Rng + ?Sized>(
    s: &ScenarioGraph,
    n_m: usize,
    layout: &RoadLayout,
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> Result<ScenarioGraph, TeacherError> {
    assert!(n_m >= 1, "edit needs at least one mutation");
    let mut g = mutate_once(s, layout, cfg, rng)?;
    for _ in 1..n_m {
        g = mutate_once(&g, layout, cfg, rng)?;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layouts::generate_layouts;
    use crate::scenario::{semantic_changes, SemanticChange};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layouts() -> Vec<RoadLayout> {
        generate_layouts(6, 3)
    }

    #[test]
    fn default_config_is_consistent() {
        GeneratorConfig::default()
            .check(&ScenarioBounds::default())
            .unwrap();
        let bad = GeneratorConfig {
            velocity_range: (-1.0, 3.0),
            ..Default::default()
        };
        assert!(bad.check(&ScenarioBounds::default()).is_err());
        let bad = GeneratorConfig {
            class_weights: ClassWeights {
                car: 0.9,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(bad.check(&ScenarioBounds::default()).is_err());
    }

    #[test]
    fn zero_actor_config_yields_student_only() {
        let cfg = GeneratorConfig {
            max_actors: 0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let g = generate_scenario(&layouts(), &cfg, &mut rng).unwrap();
            assert_eq!(g.actor_count(), 0);
            assert!(g.validate().is_clean());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig::default();
        let a = generate_scenario(&layouts(), &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = generate_scenario(&layouts(), &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.to_text().unwrap(), b.to_text().unwrap());
    }

    #[test]
    fn empty_library_is_an_error() {
        let err = generate_scenario(
            &[],
            &GeneratorConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(err, Err(TeacherError::EmptyLibrary)));
    }

    #[test]
    fn generated_attributes_within_config() {
        let cfg = GeneratorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ls = layouts();
        for _ in 0..100 {
            let g = generate_scenario(&ls, &cfg, &mut rng).unwrap();
            assert!(g.actor_count() <= cfg.max_actors);
            for e in g.edges.iter().filter(|e| e.kind == EdgeKind::NpcGoal) {
                let a = e.npc_attrs.unwrap();
                assert!((1.0..=6.0).contains(&a.desired_velocity));
                assert!((-0.5..=0.5).contains(&a.lateral_offset));
            }
        }
    }

    #[test]
    fn remove_and_goal_mutations() {
        let cfg = GeneratorConfig::default();
        let ls = layouts();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut saw_remove = false;
        let mut saw_goal = false;
        for _ in 0..300 {
            let g = generate_scenario(&ls, &cfg, &mut rng).unwrap();
            let layout = &ls[g.layout_id as usize];
            let m = mutate_once(&g, layout, &cfg, &mut rng).unwrap();
            let changes = semantic_changes(&g, &m);
            assert_eq!(changes.len(), 1, "{changes:?}");
            match changes[0] {
                SemanticChange::ActorRemoved(_) => {
                    saw_remove = true;
                    assert_eq!(m.actor_count() + 1, g.actor_count());
                }
                SemanticChange::StudentGoal { to: Some(dst), .. } => {
                    saw_goal = true;
                    assert!(g.reachable_goals(g.student_node).unwrap().contains(&dst));
                }
                _ => {}
            }
        }
        assert!(saw_remove && saw_goal);
    }

    #[test]
    fn edit_composes_mutations() {
        let cfg = GeneratorConfig::default();
        let ls = layouts();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let g = generate_scenario(&ls, &cfg, &mut rng).unwrap();
        let layout = &ls[g.layout_id as usize];
        let a = edit(&g, 2, layout, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = edit(&g, 2, layout, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(semantic_changes(&g, &a).len() <= 2);
        let one = edit(&g, 1, layout, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let direct = mutate_once(&g, layout, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(one, direct);
    }

    #[test]
    fn exact_count_generation() {
        let cfg = GeneratorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for count in [0, 4, 8] {
            let g = generate_scenario_with_count(&layouts(), &cfg, count, &mut rng).unwrap();
            assert_eq!(g.actor_count(), count);
            assert!(g.validate().is_clean());
        }
    }
}
