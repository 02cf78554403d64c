//! Directed-graph representation of a driving scenario.
//!
//! Nodes sit on lane centerlines and carry the occupancy (student, NPC,
//! obstacle or empty). Typed edges describe road topology and the goal
//! assignments of the student and NPCs. Spatial information lives on the
//! edges as poses relative to the source node, so the encoding does not
//! change under a rigid motion of the whole scene.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_angle, Pose2D};

pub type NodeId = u32;
pub type ActorId = u32;
pub type LaneId = u32;
pub type LayoutId = u32;

/// Hard limits that every scenario attribute must respect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioBounds {
    pub v_max: f64,
    pub lane_half_width: f64,
}

impl Default for ScenarioBounds {
    fn default() -> Self {
        Self {
            v_max: 8.0,
            lane_half_width: 1.75,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Occupancy {
    Empty,
    Student,
    Npc(ActorId),
    Obstacle(ActorId),
}

impl Occupancy {
    pub fn actor(&self) -> Option<ActorId> {
        match *self {
            Occupancy::Npc(id) | Occupancy::Obstacle(id) => Some(id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub lane_id: LaneId,
    pub station: f64,
    pub pose: Pose2D,
    pub occupancy: Occupancy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Successor,
    Predecessor,
    Left,
    Right,
    StudentGoal,
    NpcGoal,
}

impl EdgeKind {
    pub fn is_goal(self) -> bool {
        matches!(self, EdgeKind::StudentGoal | EdgeKind::NpcGoal)
    }

    /// Kinds followed when searching for reachable goals.
    pub fn is_forward(self) -> bool {
        matches!(self, EdgeKind::Successor | EdgeKind::Left | EdgeKind::Right)
    }
}

/// Pose of an edge's destination expressed in the source node's frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RelPose {
    pub dx: f64,
    pub dy: f64,
    pub dheading: f64,
}

/// Express `dst` in the local frame of `src`.
pub fn encode_relative(src: &Pose2D, dst: &Pose2D) -> RelPose {
    let local = src.to_local(dst.position());
    RelPose {
        dx: local.x,
        dy: local.y,
        dheading: normalize_angle(dst.heading - src.heading),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NpcAttributes {
    pub desired_velocity: f64,
    pub lateral_offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: EdgeKind,
    pub rel: RelPose,
    pub npc_attrs: Option<NpcAttributes>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorClass {
    Car,
    Motorcycle,
    ParkedCar,
    TrashContainer,
}

impl ActorClass {
    pub const ALL: [ActorClass; 4] = [
        ActorClass::Car,
        ActorClass::Motorcycle,
        ActorClass::ParkedCar,
        ActorClass::TrashContainer,
    ];

    /// Road-bound classes drive along a goal path; the rest are static obstacles.
    pub fn is_road_bound(self) -> bool {
        matches!(self, ActorClass::Car | ActorClass::Motorcycle)
    }

    /// Footprint as (length, width) in meters.
    pub fn footprint(self) -> (f64, f64) {
        match self {
            ActorClass::Car | ActorClass::ParkedCar => (4.5, 1.9),
            ActorClass::Motorcycle => (2.2, 0.9),
            ActorClass::TrashContainer => (1.2, 1.2),
        }
    }

    pub fn index(self) -> usize {
        match self {
            ActorClass::Car => 0,
            ActorClass::Motorcycle => 1,
            ActorClass::ParkedCar => 2,
            ActorClass::TrashContainer => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Actor {
    pub class: ActorClass,
    pub node: NodeId,
}

/// One concrete level: layout reference, occupied nodes, topology and goal edges.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioGraph {
    pub layout_id: LayoutId,
    /// Sorted by id.
    pub nodes: Vec<Node>,
    /// Sorted by `(src, dst, kind)`.
    pub edges: Vec<Edge>,
    pub student_node: NodeId,
    pub actors: BTreeMap<ActorId, Actor>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("unknown actor id {0}")]
    UnknownActor(ActorId),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("scenario is not valid: {0}")]
    Invalid(ValidationReport),
}

impl ScenarioGraph {
    /// Build a graph from parts, sorting into canonical order.
    pub fn from_parts(
        layout_id: LayoutId,
        mut nodes: Vec<Node>,
        mut edges: Vec<Edge>,
        student_node: NodeId,
        actors: BTreeMap<ActorId, Actor>,
    ) -> Self {
        nodes.sort_by_key(|n| n.id);
        edges.sort_by_key(|e| (e.src, e.dst, e.kind));
        Self {
            layout_id,
            nodes,
            edges,
            student_node,
            actors,
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes
            .binary_search_by_key(&id, |n| n.id)
            .ok()
            .map(|i| &self.nodes[i])
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut Node> {
        match self.nodes.binary_search_by_key(&id, |n| n.id) {
            Ok(i) => Some(&mut self.nodes[i]),
            Err(_) => None,
        }
    }

    pub fn contains_node(&self, id: NodeId) -> bool {
        self.node(id).is_some()
    }

    pub fn student_goal(&self) -> Option<&Edge> {
        self.edges
            .iter()
            .find(|e| e.kind == EdgeKind::StudentGoal && e.src == self.student_node)
    }

    /// The goal edge leaving `node`, if any.
    pub fn goal_edge_from(&self, node: NodeId) -> Option<&Edge> {
        self.edges
            .iter()
            .find(|e| e.src == node && e.kind == EdgeKind::NpcGoal)
    }

    pub fn actor_count(&self) -> usize {
        self.actors.len()
    }

    pub fn next_actor_id(&self) -> ActorId {
        self.actors.keys().next_back().map_or(0, |id| id + 1)
    }

    /// Insert an edge, computing its relative pose from the endpoint nodes.
    pub fn add_edge(
        &mut self,
        src: NodeId,
        dst: NodeId,
        kind: EdgeKind,
        npc_attrs: Option<NpcAttributes>,
    ) -> Result<(), ScenarioError> {
        let a = self.node(src).ok_or(ScenarioError::UnknownNode(src))?.pose;
        let b = self.node(dst).ok_or(ScenarioError::UnknownNode(dst))?.pose;
        let edge = Edge {
            src,
            dst,
            kind,
            rel: encode_relative(&a, &b),
            npc_attrs,
        };
        let key = (src, dst, kind);
        let pos = self.edges.partition_point(|e| (e.src, e.dst, e.kind) < key);
        self.edges.insert(pos, edge);
        Ok(())
    }

    pub fn remove_edges_from(&mut self, src: NodeId, kind: EdgeKind) {
        self.edges.retain(|e| !(e.src == src && e.kind == kind));
    }

    /// Adjacency over the forward kinds (successor, left, right).
    fn forward_adjacency(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut adj: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for e in self.edges.iter().filter(|e| e.kind.is_forward()) {
            adj.entry(e.src).or_default().push(e.dst);
        }
        adj
    }

    /// Nodes reachable from `from` over successor and lateral edges, excluding `from`.
    pub fn reachable_goals(&self, from: NodeId) -> Result<BTreeSet<NodeId>, ScenarioError> {
        if !self.contains_node(from) {
            return Err(ScenarioError::UnknownNode(from));
        }
        let adj = self.forward_adjacency();
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([from]);
        seen.insert(from);
        while let Some(n) = queue.pop_front() {
            for &m in adj.get(&n).into_iter().flatten() {
                if seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        seen.remove(&from);
        Ok(seen)
    }

    /// Fewest-hop node path over forward edges, both endpoints included.
    pub fn shortest_path(&self, from: NodeId, to: NodeId) -> Option<Vec<NodeId>> {
        if !self.contains_node(from) || !self.contains_node(to) {
            return None;
        }
        let adj = self.forward_adjacency();
        let mut parent: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        let mut queue = VecDeque::from([from]);
        parent.insert(from, from);
        while let Some(n) = queue.pop_front() {
            if n == to {
                let mut path = vec![to];
                let mut cur = to;
                while cur != from {
                    cur = parent[&cur];
                    path.push(cur);
                }
                path.reverse();
                return Some(path);
            }
            for &m in adj.get(&n).into_iter().flatten() {
                if let std::collections::btree_map::Entry::Vacant(v) = parent.entry(m) {
                    v.insert(n);
                    queue.push_back(m);
                }
            }
        }
        None
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self, &ScenarioBounds::default())
    }

    pub fn to_text(&self) -> Result<String, ScenarioError> {
        to_text(self)
    }

    pub fn from_text(text: &str) -> Result<Self, ScenarioError> {
        from_text(text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoStudent,
    MultipleStudents(Vec<NodeId>),
    StudentNodeMismatch(NodeId),
    MissingStudentGoal,
    MultipleStudentGoals,
    UnreachableStudentGoal(NodeId),
    DuplicateNode(NodeId),
    DanglingEdge {
        src: NodeId,
        dst: NodeId,
    },
    SelfLoop(NodeId),
    AttributesOnNonNpcEdge {
        src: NodeId,
        dst: NodeId,
    },
    MissingNpcAttributes {
        src: NodeId,
        dst: NodeId,
    },
    AttributeOutOfBounds {
        actor: Option<ActorId>,
        attrs: NpcAttributes,
    },
    MissingNpcGoal(ActorId),
    MultipleNpcGoals(ActorId),
    UnreachableNpcGoal(ActorId),
    ObstacleWithGoal(ActorId),
    GoalFromUnoccupiedNode(NodeId),
    OccupancyMismatch(String),
    NegativeStation(NodeId),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoStudent => write!(f, "no student"),
            Violation::MultipleStudents(ids) => write!(f, "multiple students at nodes {ids:?}"),
            Violation::StudentNodeMismatch(id) => {
                write!(f, "student_node {id} is not occupied by the student")
            }
            Violation::MissingStudentGoal => write!(f, "missing student goal"),
            Violation::MultipleStudentGoals => write!(f, "multiple student goals"),
            Violation::UnreachableStudentGoal(id) => write!(f, "student goal {id} unreachable"),
            Violation::DuplicateNode(id) => write!(f, "duplicate node id {id}"),
            Violation::DanglingEdge { src, dst } => {
                write!(f, "edge {src}->{dst} references a missing node")
            }
            Violation::SelfLoop(id) => write!(f, "self loop at node {id}"),
            Violation::AttributesOnNonNpcEdge { src, dst } => {
                write!(
                    f,
                    "edge {src}->{dst} carries npc attributes but is not an npc goal"
                )
            }
            Violation::MissingNpcAttributes { src, dst } => {
                write!(f, "npc goal {src}->{dst} has no attributes")
            }
            Violation::AttributeOutOfBounds { actor, attrs } => write!(
                f,
                "attribute out of bounds (actor {actor:?}: velocity {}, offset {})",
                attrs.desired_velocity, attrs.lateral_offset
            ),
            Violation::MissingNpcGoal(a) => write!(f, "npc {a} has no goal"),
            Violation::MultipleNpcGoals(a) => write!(f, "npc {a} has multiple goals"),
            Violation::UnreachableNpcGoal(a) => write!(f, "npc {a} goal unreachable"),
            Violation::ObstacleWithGoal(a) => write!(f, "obstacle {a} has a goal edge"),
            Violation::GoalFromUnoccupiedNode(n) => {
                write!(f, "goal edge leaves node {n} which holds no matching actor")
            }
            Violation::OccupancyMismatch(msg) => write!(f, "occupancy mismatch: {msg}"),
            Violation::NegativeStation(n) => write!(f, "node {n} has a negative station"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(|v| v.to_string()).collect()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.messages().join("; "))
    }
}

fn attrs_in_bounds(attrs: &NpcAttributes, bounds: &ScenarioBounds) -> bool {
    attrs.desired_velocity.is_finite()
        && attrs.lateral_offset.is_finite()
        && (0.0..=bounds.v_max).contains(&attrs.desired_velocity)
        && attrs.lateral_offset.abs() <= bounds.lane_half_width
}

/// Check every structural and feasibility rule. Violations are returned as data.
pub fn validate(g: &ScenarioGraph, bounds: &ScenarioBounds) -> ValidationReport {
    let mut out = Vec::new();

    let mut ids = BTreeSet::new();
    for n in &g.nodes {
        if !ids.insert(n.id) {
            out.push(Violation::DuplicateNode(n.id));
        }
        if n.station < 0.0 || !n.station.is_finite() {
            out.push(Violation::NegativeStation(n.id));
        }
    }

    let students: Vec<NodeId> = g
        .nodes
        .iter()
        .filter(|n| n.occupancy == Occupancy::Student)
        .map(|n| n.id)
        .collect();
    match students.len() {
        0 => out.push(Violation::NoStudent),
        1 => {
            if students[0] != g.student_node {
                out.push(Violation::StudentNodeMismatch(g.student_node));
            }
        }
        _ => out.push(Violation::MultipleStudents(students.clone())),
    }

    for e in &g.edges {
        if !ids.contains(&e.src) || !ids.contains(&e.dst) {
            out.push(Violation::DanglingEdge {
                src: e.src,
                dst: e.dst,
            });
        }
        if e.src == e.dst {
            out.push(Violation::SelfLoop(e.src));
        }
        match (e.kind, &e.npc_attrs) {
            (EdgeKind::NpcGoal, None) => out.push(Violation::MissingNpcAttributes {
                src: e.src,
                dst: e.dst,
            }),
            (EdgeKind::NpcGoal, Some(_)) => {}
            (_, Some(_)) => out.push(Violation::AttributesOnNonNpcEdge {
                src: e.src,
                dst: e.dst,
            }),
            _ => {}
        }
    }

    // Occupancy <-> actor map consistency.
    let mut seen_actors = BTreeSet::new();
    for n in &g.nodes {
        if let Some(actor_id) = n.occupancy.actor() {
            if !seen_actors.insert(actor_id) {
                out.push(Violation::OccupancyMismatch(format!(
                    "actor {actor_id} occupies more than one node"
                )));
            }
            match g.actors.get(&actor_id) {
                None => out.push(Violation::OccupancyMismatch(format!(
                    "node {} references unknown actor {actor_id}",
                    n.id
                ))),
                Some(actor) => {
                    if actor.node != n.id {
                        out.push(Violation::OccupancyMismatch(format!(
                            "actor {actor_id} recorded at node {} but found at node {}",
                            actor.node, n.id
                        )));
                    }
                    let road_bound = matches!(n.occupancy, Occupancy::Npc(_));
                    if road_bound != actor.class.is_road_bound() {
                        out.push(Violation::OccupancyMismatch(format!(
                            "actor {actor_id} class {:?} does not match occupancy",
                            actor.class
                        )));
                    }
                }
            }
        }
    }
    for (id, actor) in &g.actors {
        if !seen_actors.contains(id) {
            out.push(Violation::OccupancyMismatch(format!(
                "actor {id} (node {}) is not placed on any node",
                actor.node
            )));
        }
    }

    let student_goals: Vec<&Edge> = g
        .edges
        .iter()
        .filter(|e| e.kind == EdgeKind::StudentGoal)
        .collect();
    match student_goals.len() {
        0 => out.push(Violation::MissingStudentGoal),
        1 => {
            let e = student_goals[0];
            if e.src != g.student_node {
                out.push(Violation::GoalFromUnoccupiedNode(e.src));
            } else if let Ok(reach) = g.reachable_goals(e.src) {
                if !reach.contains(&e.dst) {
                    out.push(Violation::UnreachableStudentGoal(e.dst));
                }
            }
        }
        _ => out.push(Violation::MultipleStudentGoals),
    }

    let mut goals_per_node: BTreeMap<NodeId, Vec<&Edge>> = BTreeMap::new();
    for e in g.edges.iter().filter(|e| e.kind == EdgeKind::NpcGoal) {
        goals_per_node.entry(e.src).or_default().push(e);
    }
    for (src, edges) in &goals_per_node {
        let occ = g.node(*src).map(|n| n.occupancy);
        match occ {
            Some(Occupancy::Npc(_)) => {}
            Some(Occupancy::Obstacle(a)) => out.push(Violation::ObstacleWithGoal(a)),
            _ => out.push(Violation::GoalFromUnoccupiedNode(*src)),
        }
        for e in edges {
            if let Some(attrs) = &e.npc_attrs {
                if !attrs_in_bounds(attrs, bounds) {
                    out.push(Violation::AttributeOutOfBounds {
                        actor: occ.and_then(|o| o.actor()),
                        attrs: *attrs,
                    });
                }
            }
        }
    }
    for n in &g.nodes {
        if let Occupancy::Npc(actor_id) = n.occupancy {
            match goals_per_node.get(&n.id).map(|v| v.as_slice()) {
                None | Some([]) => out.push(Violation::MissingNpcGoal(actor_id)),
                Some([e]) => {
                    if let Ok(reach) = g.reachable_goals(n.id) {
                        if !reach.contains(&e.dst) {
                            out.push(Violation::UnreachableNpcGoal(actor_id));
                        }
                    }
                }
                Some(_) => out.push(Violation::MultipleNpcGoals(actor_id)),
            }
        }
    }

    ValidationReport { violations: out }
}

// ---------------------------------------------------------------------------
// Text form

#[derive(Debug, Serialize, Deserialize)]
struct NodeRecord {
    id: NodeId,
    lane_id: LaneId,
    station: f64,
    x: f64,
    y: f64,
    heading: f64,
    occupancy: Occupancy,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRecord {
    src: NodeId,
    dst: NodeId,
    kind: EdgeKind,
    dx: f64,
    dy: f64,
    dheading: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    desired_velocity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lateral_offset: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ActorRecord {
    id: ActorId,
    class: ActorClass,
    node: NodeId,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    layout_id: LayoutId,
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
    actors: Vec<ActorRecord>,
}

impl From<&ScenarioGraph> for ScenarioFile {
    fn from(g: &ScenarioGraph) -> Self {
        let mut nodes: Vec<NodeRecord> = g
            .nodes
            .iter()
            .map(|n| NodeRecord {
                id: n.id,
                lane_id: n.lane_id,
                station: n.station,
                x: n.pose.x,
                y: n.pose.y,
                heading: n.pose.heading,
                occupancy: n.occupancy,
            })
            .collect();
        nodes.sort_by_key(|n| n.id);
        let mut edges: Vec<EdgeRecord> = g
            .edges
            .iter()
            .map(|e| EdgeRecord {
                src: e.src,
                dst: e.dst,
                kind: e.kind,
                dx: e.rel.dx,
                dy: e.rel.dy,
                dheading: e.rel.dheading,
                desired_velocity: e.npc_attrs.map(|a| a.desired_velocity),
                lateral_offset: e.npc_attrs.map(|a| a.lateral_offset),
            })
            .collect();
        edges.sort_by_key(|e| (e.src, e.dst, e.kind));
        let actors = g
            .actors
            .iter()
            .map(|(id, a)| ActorRecord {
                id: *id,
                class: a.class,
                node: a.node,
            })
            .collect();
        ScenarioFile {
            layout_id: g.layout_id,
            nodes,
            edges,
            actors,
        }
    }
}

fn structure_error(message: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse {
        line: 0,
        column: 0,
        message: message.into(),
    }
}

impl TryFrom<ScenarioFile> for ScenarioGraph {
    type Error = ScenarioError;

    fn try_from(file: ScenarioFile) -> Result<Self, ScenarioError> {
        let nodes: Vec<Node> = file
            .nodes
            .into_iter()
            .map(|r| Node {
                id: r.id,
                lane_id: r.lane_id,
                station: r.station,
                pose: Pose2D {
                    x: r.x,
                    y: r.y,
                    heading: r.heading,
                },
                occupancy: r.occupancy,
            })
            .collect();
        let student_node = nodes
            .iter()
            .find(|n| n.occupancy == Occupancy::Student)
            .map(|n| n.id)
            .ok_or_else(|| structure_error("no node is occupied by the student"))?;
        let edges = file
            .edges
            .into_iter()
            .map(|r| {
                let npc_attrs = match (r.desired_velocity, r.lateral_offset) {
                    (Some(v), Some(d)) => Some(NpcAttributes {
                        desired_velocity: v,
                        lateral_offset: d,
                    }),
                    (None, None) => None,
                    _ => {
                        return Err(structure_error(format!(
                            "edge {}->{} has only one of desired_velocity/lateral_offset",
                            r.src, r.dst
                        )))
                    }
                };
                Ok(Edge {
                    src: r.src,
                    dst: r.dst,
                    kind: r.kind,
                    rel: RelPose {
                        dx: r.dx,
                        dy: r.dy,
                        dheading: r.dheading,
                    },
                    npc_attrs,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut actors = BTreeMap::new();
        for a in file.actors {
            if actors
                .insert(
                    a.id,
                    Actor {
                        class: a.class,
                        node: a.node,
                    },
                )
                .is_some()
            {
                return Err(structure_error(format!("duplicate actor id {}", a.id)));
            }
        }
        Ok(ScenarioGraph::from_parts(
            file.layout_id,
            nodes,
            edges,
            student_node,
            actors,
        ))
    }
}

/// Canonical pretty-printed JSON. Only validate-clean graphs are serialized.
pub fn to_text(g: &ScenarioGraph) -> Result<String, ScenarioError> {
    let report = g.validate();
    if !report.is_clean() {
        return Err(ScenarioError::Invalid(report));
    }
    let mut s = serde_json::to_string_pretty(&ScenarioFile::from(g))
        .expect("scenario records always serialize");
    s.push('\n');
    Ok(s)
}

pub fn from_text(text: &str) -> Result<ScenarioGraph, ScenarioError> {
    let file: ScenarioFile = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    ScenarioGraph::try_from(file)
}

/// Serde adapter so scenarios can be embedded in other documents (buffer
/// checkpoints, hold-out sets) using the same schema as scenario files.
pub mod serde_scenario {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(g: &ScenarioGraph, s: S) -> Result<S::Ok, S::Error> {
        ScenarioFile::from(g).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ScenarioGraph, D::Error> {
        let file = ScenarioFile::deserialize(d)?;
        ScenarioGraph::try_from(file).map_err(serde::de::Error::custom)
    }
}

/// Wrapper that serializes with the scenario file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScenarioDoc(#[serde(with = "serde_scenario")] pub ScenarioGraph);

// ---------------------------------------------------------------------------
// Semantic comparison

/// A single meaningful difference between two versions of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub enum SemanticChange {
    StudentGoal {
        from: Option<NodeId>,
        to: Option<NodeId>,
    },
    ActorAdded(ActorId),
    ActorRemoved(ActorId),
    /// Class, goal or attributes of an existing actor changed.
    ActorModified(ActorId),
}

/// Differences in the free parameters (goals, actors, attributes) of two
/// scenarios on the same layout.
pub fn semantic_changes(before: &ScenarioGraph, after: &ScenarioGraph) -> Vec<SemanticChange> {
    let mut changes = Vec::new();
    let goal_a = before.student_goal().map(|e| e.dst);
    let goal_b = after.student_goal().map(|e| e.dst);
    if goal_a != goal_b || before.student_node != after.student_node {
        changes.push(SemanticChange::StudentGoal {
            from: goal_a,
            to: goal_b,
        });
    }
    let ids: BTreeSet<ActorId> = before
        .actors
        .keys()
        .chain(after.actors.keys())
        .copied()
        .collect();
    for id in ids {
        match (before.actors.get(&id), after.actors.get(&id)) {
            (Some(_), None) => changes.push(SemanticChange::ActorRemoved(id)),
            (None, Some(_)) => changes.push(SemanticChange::ActorAdded(id)),
            (Some(a), Some(b)) => {
                let goal_a = before.goal_edge_from(a.node).map(|e| (e.dst, e.npc_attrs));
                let goal_b = after.goal_edge_from(b.node).map(|e| (e.dst, e.npc_attrs));
                if a != b || goal_a != goal_b {
                    changes.push(SemanticChange::ActorModified(id));
                }
            }
            (None, None) => unreachable!(),
        }
    }
    changes
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// Straight three-node lane with the student at node 0 heading for node 2.
    pub(crate) fn student_only() -> ScenarioGraph {
        let nodes = (0..3u32)
            .map(|i| Node {
                id: i,
                lane_id: 0,
                station: 5.0 * i as f64,
                pose: Pose2D::new(5.0 * i as f64, 0.0, 0.0),
                occupancy: if i == 0 {
                    Occupancy::Student
                } else {
                    Occupancy::Empty
                },
            })
            .collect();
        let mut g = ScenarioGraph::from_parts(0, nodes, vec![], 0, BTreeMap::new());
        for (a, b) in [(0, 1), (1, 2)] {
            g.add_edge(a, b, EdgeKind::Successor, None).unwrap();
            g.add_edge(b, a, EdgeKind::Predecessor, None).unwrap();
        }
        g.add_edge(0, 2, EdgeKind::StudentGoal, None).unwrap();
        g
    }
}
