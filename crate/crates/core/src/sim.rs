//! Deterministic fixed-timestep 2D kinematic driving simulator.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frenet::{planned_offset, ActionBounds, FrenetAction, FrenetState};
use crate::geometry::{normalize_angle, OrientedBox, Polyline, Pose2D, Vec2};
use crate::layouts::RoadLayout;
use crate::scenario::{
    ActorClass, ActorId, EdgeKind, LayoutId, NodeId, ScenarioGraph, ValidationReport,
};

/// Number of actor slots in the observation.
pub const ACTOR_SLOTS: usize = 6;
const EGO_FEATURES: usize = 11;
const SLOT_FEATURES: usize = 9;
/// Route offsets of the corridors probed for the free distance ahead.
const CORRIDOR_OFFSETS: [f64; 3] = [-1.5, 0.0, 1.5];
const CORRIDOR_RANGE: f64 = 30.0;
const CORRIDOR_FEATURES: usize = 2 * CORRIDOR_OFFSETS.len();
pub const OBS_DIM: usize = EGO_FEATURES + CORRIDOR_FEATURES + ACTOR_SLOTS * SLOT_FEATURES;

const ROUTE_SAMPLE_SPACING: f64 = 1.0;
const CURVATURE_STATIONS: [f64; 3] = [4.0, 10.0, 18.0];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario is invalid: {0:?}")]
    InvalidScenario(ValidationReport),
    #[error("scenario uses layout {found} but layout {expected} was supplied")]
    LayoutMismatch { expected: LayoutId, found: LayoutId },
    #[error("no drivable route from node {from} to node {to}")]
    NoRoute { from: NodeId, to: NodeId },
    #[error("step called on a finished episode")]
    StepAfterDone,
    #[error("observation has {0} non-finite entries")]
    NonFinite(usize),
    #[error("trace output: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub progress_scale: f64,
    pub target_speed: f64,
    pub speed_bonus: f64,
    pub step_cost: f64,
    pub success: f64,
    pub collision: f64,
    pub offroad: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            progress_scale: 100.0,
            target_speed: 3.0,
            speed_bonus: 0.05,
            step_cost: 0.05,
            success: 20.0,
            collision: -50.0,
            offroad: -50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub t_max: f64,
    pub goal_radius: f64,
    pub ego_length: f64,
    pub ego_width: f64,
    pub wheelbase: f64,
    pub accel_limit: f64,
    pub max_steer: f64,
    pub offroad_inflate: f64,
    pub obstacle_curb_shift: f64,
    pub plan_horizon: f64,
    pub lookahead_min: f64,
    pub lookahead_time: f64,
    pub npc_obstacle_lookahead: f64,
    pub npc_obstacle_clearance: f64,
    pub npc_min_gap: f64,
    pub npc_lateral_rate: f64,
    pub npc_speed_gain: f64,
    pub bounds: ActionBounds,
    pub reward: RewardConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            t_max: 40.0,
            goal_radius: 2.0,
            ego_length: 4.5,
            ego_width: 1.9,
            wheelbase: 2.7,
            accel_limit: 3.0,
            max_steer: 0.6,
            offroad_inflate: 0.5,
            obstacle_curb_shift: 0.6,
            plan_horizon: 2.0,
            lookahead_min: 3.0,
            lookahead_time: 0.8,
            npc_obstacle_lookahead: 8.0,
            npc_obstacle_clearance: 0.5,
            npc_min_gap: 4.0,
            npc_lateral_rate: 1.0,
            npc_speed_gain: 1.0,
            bounds: ActionBounds::default(),
            reward: RewardConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn max_steps(&self) -> usize {
        (self.t_max / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalCause {
    None,
    Success,
    Collision,
    OffRoad,
    Timeout,
}

impl TerminalCause {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminalCause::None => "none",
            TerminalCause::Success => "success",
            TerminalCause::Collision => "collision",
            TerminalCause::OffRoad => "off_road",
            TerminalCause::Timeout => "timeout",
        }
    }
}

/// Centerline path through a sequence of graph nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub nodes: Vec<NodeId>,
    pub line: Polyline,
}

impl Route {
    pub fn length(&self) -> f64 {
        self.line.length()
    }
}

fn densify(line: &Polyline, from: f64, to: f64, out: &mut Vec<Vec2>) {
    let n = ((to - from) / ROUTE_SAMPLE_SPACING).ceil().max(0.0) as usize;
    for k in 0..=n {
        let s = if k == n {
            to
        } else {
            from + k as f64 * ROUTE_SAMPLE_SPACING
        };
        out.push(line.pose_at(s).position());
    }
}

fn straight(a: Vec2, b: Vec2, out: &mut Vec<Vec2>) {
    let n = (a.distance(b) / ROUTE_SAMPLE_SPACING).ceil().max(1.0) as usize;
    for k in 1..=n {
        out.push(a + (b - a) * (k as f64 / n as f64));
    }
}

/// Build the centerline route along the shortest forward path. Lane changes
/// become diagonals spanning the neighbouring node gap.
pub fn build_route(
    lanes: &[Polyline],
    g: &ScenarioGraph,
    from: NodeId,
    to: NodeId,
) -> Result<Route, SimError> {
    let path = g
        .shortest_path(from, to)
        .ok_or(SimError::NoRoute { from, to })?;
    let node = |id: NodeId| g.node(id).expect("path nodes exist");
    let kind = |a: NodeId, b: NodeId| {
        g.edges
            .iter()
            .find(|e| e.src == a && e.dst == b && e.kind.is_forward())
            .map(|e| e.kind)
            .expect("path edges exist")
    };
    let n = path.len();
    let mut keep = vec![true; n];
    for k in 0..n.saturating_sub(1) {
        if kind(path[k], path[k + 1]) != EdgeKind::Successor {
            if k > 0 {
                keep[k] = false;
            } else if k + 2 < n {
                keep[k + 1] = false;
            }
        }
    }
    let kept: Vec<usize> = (0..n).filter(|&k| keep[k]).collect();
    let nominal = |id: NodeId| {
        let nd = node(id);
        lanes[nd.lane_id as usize].pose_at(nd.station).position()
    };
    let mut pts = vec![nominal(path[kept[0]])];
    for w in kept.windows(2) {
        let (a, b) = (node(path[w[0]]), node(path[w[1]]));
        let contiguous = w[1] == w[0] + 1 && kind(a.id, b.id) == EdgeKind::Successor;
        if contiguous && a.lane_id == b.lane_id && b.station >= a.station {
            densify(&lanes[a.lane_id as usize], a.station, b.station, &mut pts);
        } else if contiguous {
            let la = &lanes[a.lane_id as usize];
            densify(la, a.station, la.length(), &mut pts);
            densify(&lanes[b.lane_id as usize], 0.0, b.station, &mut pts);
        } else {
            let start = *pts.last().expect("non-empty");
            straight(start, nominal(b.id), &mut pts);
        }
    }
    let line = Polyline::new(pts);
    if line.len() < 2 {
        // Degenerate single-point route: extend along the start node heading.
        let p = node(from).pose;
        let line = Polyline::new(vec![p.position(), p.position() + p.direction()]);
        return Ok(Route { nodes: path, line });
    }
    Ok(Route { nodes: path, line })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub pose: Pose2D,
    pub speed: f64,
    pub yaw_rate: f64,
    pub accel_lon: f64,
    pub accel_lat: f64,
    /// Arc length of the ego's projection on its route.
    pub station: f64,
    /// Signed lateral offset from the route, positive to the left.
    pub offset: f64,
    pub route_arclength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpcState {
    pub actor_id: ActorId,
    pub class: ActorClass,
    pub pose: Pose2D,
    pub speed: f64,
    pub station: f64,
    pub offset: f64,
    pub desired_velocity: f64,
    pub lateral_offset: f64,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleState {
    pub actor_id: ActorId,
    pub class: ActorClass,
    pub pose: Pose2D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub time: f64,
    pub step_count: usize,
    pub ego: EgoState,
    pub npcs: Vec<NpcState>,
    pub obstacles: Vec<ObstacleState>,
    /// Route progress in [0, 1], non-decreasing.
    pub progress: f64,
}

pub type Observation = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub cause: TerminalCause,
}

/// NPC acceleration and lateral offset rate for one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NpcCommand {
    pub accel: f64,
    pub lateral_rate: f64,
}

/// One row of an episode trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub time: f64,
    pub ego: Pose2D,
    pub ego_speed: f64,
    pub actors: Vec<(ActorId, Vec2)>,
    pub reward: f64,
    pub cause: TerminalCause,
}

/// Static obstacle expressed in an NPC path's frame.
#[derive(Debug, Clone, Copy)]
struct PathObstacle {
    station: f64,
    offset: f64,
    half_length: f64,
    half_width: f64,
}

#[derive(Debug, Clone)]
struct NpcPath {
    line: Polyline,
    obstacles: Vec<PathObstacle>,
}

#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    cfg: SimConfig,
    layout: &'a RoadLayout,
    state: SimState,
    route: Route,
    goal: Vec2,
    npc_paths: Vec<NpcPath>,
    ego_present: bool,
    done: bool,
    trace: Option<Vec<TraceRow>>,
}

fn footprint_box(pose: Pose2D, class: ActorClass) -> OrientedBox {
    let (l, w) = class.footprint();
    OrientedBox::new(pose, l, w)
}

fn npc_pose(line: &Polyline, station: f64, offset: f64) -> Pose2D {
    let base = line.pose_at(station);
    let p = base.position() + base.direction().perp() * offset;
    Pose2D::new(p.x, p.y, base.heading)
}

impl<'a> Simulator<'a> {
    /// Instantiate the episode: ego at rest at the student node, NPCs at their
    /// nodes moving at their desired speed, obstacles at the roadside.
    pub fn reset(
        layout: &'a RoadLayout,
        scenario: &ScenarioGraph,
        cfg: &SimConfig,
    ) -> Result<(Self, Observation), SimError> {
        Self::build(layout, scenario, cfg, true)
    }

    /// Same world with the student removed; only NPCs move.
    pub fn reset_npc_only(
        layout: &'a RoadLayout,
        scenario: &ScenarioGraph,
        cfg: &SimConfig,
    ) -> Result<Self, SimError> {
        Self::build(layout, scenario, cfg, false).map(|(s, _)| s)
    }

    fn build(
        layout: &'a RoadLayout,
        scenario: &ScenarioGraph,
        cfg: &SimConfig,
        ego_present: bool,
    ) -> Result<(Self, Observation), SimError> {
        if layout.id != scenario.layout_id {
            return Err(SimError::LayoutMismatch {
                expected: layout.id,
                found: scenario.layout_id,
            });
        }
        let report = scenario.validate();
        if !report.is_clean() {
            return Err(SimError::InvalidScenario(report));
        }
        let lanes: Vec<Polyline> = layout.lanes.iter().map(|l| l.polyline()).collect();
        let goal_edge = scenario
            .student_goal()
            .expect("validated scenario has a goal");
        let route = build_route(&lanes, scenario, scenario.student_node, goal_edge.dst)?;
        let goal = scenario
            .node(goal_edge.dst)
            .expect("goal node")
            .pose
            .position();
        let start = scenario
            .node(scenario.student_node)
            .expect("student node")
            .pose;
        let proj = route.line.project_within(start.position(), 0.0, 5.0);
        let ego = EgoState {
            pose: start,
            speed: 0.0,
            yaw_rate: 0.0,
            accel_lon: 0.0,
            accel_lat: 0.0,
            station: proj.station.max(0.0),
            offset: proj.offset,
            route_arclength: route.length(),
        };

        let mut obstacles = Vec::new();
        let mut npc_specs = Vec::new();
        for (&id, actor) in &scenario.actors {
            let node = scenario.node(actor.node).expect("actor node");
            if actor.class.is_road_bound() {
                let edge = scenario.goal_edge_from(actor.node).expect("npc goal edge");
                let attrs = edge.npc_attrs.expect("npc attributes");
                npc_specs.push((id, actor.class, actor.node, edge.dst, attrs));
            } else {
                let at_curb = layout
                    .lane(node.lane_id)
                    .is_some_and(|l| l.right_neighbor.is_none());
                let shift = if at_curb {
                    -cfg.obstacle_curb_shift
                } else {
                    0.0
                };
                let p = node.pose.position() + node.pose.direction().perp() * shift;
                obstacles.push(ObstacleState {
                    actor_id: id,
                    class: actor.class,
                    pose: Pose2D::new(p.x, p.y, node.pose.heading),
                });
            }
        }

        let mut npcs = Vec::with_capacity(npc_specs.len());
        let mut npc_paths = Vec::with_capacity(npc_specs.len());
        for (id, class, from, to, attrs) in npc_specs {
            let r = build_route(&lanes, scenario, from, to)?;
            let start = scenario.node(from).expect("npc node").pose.position();
            let proj = r.line.project_within(start, 0.0, 5.0);
            let (station, offset) = (proj.station.max(0.0), proj.offset);
            let path_obstacles = obstacles
                .iter()
                .filter_map(|o| {
                    let pr = r.line.project(o.pose.position());
                    let (l, w) = o.class.footprint();
                    (pr.offset.abs() < 6.0).then_some(PathObstacle {
                        station: pr.station,
                        offset: pr.offset,
                        half_length: l / 2.0,
                        half_width: w / 2.0,
                    })
                })
                .collect();
            npcs.push(NpcState {
                actor_id: id,
                class,
                pose: npc_pose(&r.line, station, offset),
                speed: attrs.desired_velocity,
                station,
                offset,
                desired_velocity: attrs.desired_velocity,
                lateral_offset: attrs.lateral_offset,
                active: true,
            });
            npc_paths.push(NpcPath {
                line: r.line,
                obstacles: path_obstacles,
            });
        }

        let sim = Self {
            cfg: cfg.clone(),
            layout,
            state: SimState {
                time: 0.0,
                step_count: 0,
                ego,
                npcs,
                obstacles,
                progress: 0.0,
            },
            route,
            goal,
            npc_paths,
            ego_present,
            done: false,
            trace: None,
        };
        let obs = sim.observation();
        Ok((sim, obs))
    }

    pub fn enable_trace(&mut self) {
        let row = self.trace_row(0.0, TerminalCause::None);
        self.trace = Some(vec![row]);
    }

    pub fn trace(&self) -> Option<&[TraceRow]> {
        self.trace.as_deref()
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn route(&self) -> &Route {
        &self.route
    }

    pub fn goal(&self) -> Vec2 {
        self.goal
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn progress(&self) -> f64 {
        self.state.progress
    }

    /// Ego state in the route's Frenet frame.
    pub fn frenet_state(&self) -> FrenetState {
        let ego = &self.state.ego;
        let route_heading = self.route.line.pose_at(ego.station).heading;
        FrenetState {
            station: ego.station,
            offset: ego.offset,
            offset_rate: ego.speed * normalize_angle(ego.pose.heading - route_heading).sin(),
            speed: ego.speed,
        }
    }

    /// Advance one tick with the ego tracking the plan for `action`.
    pub fn step(&mut self, action: FrenetAction) -> Result<StepResult, SimError> {
        if self.done || !self.ego_present {
            return Err(SimError::StepAfterDone);
        }
        let action = self.cfg.bounds.clamp(action);
        let prev_progress = self.state.progress;
        self.step_npcs();
        self.step_ego(action);
        self.state.time = (self.state.step_count + 1) as f64 * self.cfg.dt;
        self.state.step_count += 1;

        let cause = self.terminal_cause();
        if cause == TerminalCause::Success {
            self.state.progress = 1.0;
        }
        let reward = self.reward(prev_progress, cause);
        self.done = cause != TerminalCause::None;
        if self.trace.is_some() {
            let row = self.trace_row(reward, cause);
            if let Some(t) = self.trace.as_mut() {
                t.push(row);
            }
        }
        Ok(StepResult {
            observation: self.observation(),
            reward,
            done: self.done,
            cause,
        })
    }

    /// Advance NPCs only (student removed).
    pub fn step_npcs_only(&mut self) {
        self.step_npcs();
        self.state.step_count += 1;
        self.state.time = self.state.step_count as f64 * self.cfg.dt;
    }

    fn step_ego(&mut self, action: FrenetAction) {
        let cfg = &self.cfg;
        let fs = self.frenet_state();
        let ego = &self.state.ego;
        let v = ego.speed;
        let lookahead = cfg.lookahead_min.max(v * cfg.lookahead_time);
        let t_look = (lookahead / v.max(1.0)).min(cfg.plan_horizon);
        let d_look = planned_offset(&fs, action, cfg.plan_horizon, t_look);
        let target = self.route.line.offset_point(fs.station + lookahead, d_look);
        let v_plan = v + (action.v_f - v) * cfg.dt / cfg.plan_horizon;
        let accel = ((v_plan - v) / cfg.dt).clamp(-cfg.accel_limit, cfg.accel_limit);
        let v_new = (v + accel * cfg.dt).max(0.0);

        let local = ego.pose.to_local(target);
        let alpha = local.y.atan2(local.x);
        let ld = local.norm().max(1e-6);
        let steer = (2.0 * cfg.wheelbase * alpha.sin() / ld)
            .atan()
            .clamp(-cfg.max_steer, cfg.max_steer);
        let v_mid = 0.5 * (v + v_new);
        let yaw_rate = v_mid / cfg.wheelbase * steer.tan();
        let h_mid = ego.pose.heading + 0.5 * yaw_rate * cfg.dt;
        let x = ego.pose.x + v_mid * h_mid.cos() * cfg.dt;
        let y = ego.pose.y + v_mid * h_mid.sin() * cfg.dt;
        let pose = Pose2D::new(x, y, ego.pose.heading + yaw_rate * cfg.dt);

        let lo = ego.station - 3.0;
        let hi = ego.station + 10.0;
        let proj = self.route.line.project_within(pose.position(), lo, hi);
        let len = self.route.length();
        let ego = &mut self.state.ego;
        ego.accel_lon = (v_new - v) / cfg.dt;
        ego.accel_lat = v_new * yaw_rate;
        ego.speed = v_new;
        ego.yaw_rate = yaw_rate;
        ego.pose = pose;
        ego.station = proj.station;
        ego.offset = proj.offset;
        let frac = (proj.station / len).clamp(0.0, 1.0);
        self.state.progress = self.state.progress.max(frac);
    }

    fn ego_box(&self) -> OrientedBox {
        OrientedBox::new(self.state.ego.pose, self.cfg.ego_length, self.cfg.ego_width)
    }

    fn terminal_cause(&self) -> TerminalCause {
        let ego_box = self.ego_box();
        let hit_npc = self
            .state
            .npcs
            .iter()
            .filter(|n| n.active)
            .any(|n| footprint_box(n.pose, n.class).overlaps(&ego_box));
        let hit_obstacle = self
            .state
            .obstacles
            .iter()
            .any(|o| footprint_box(o.pose, o.class).overlaps(&ego_box));
        let pos = self.state.ego.pose.position();
        if hit_npc || hit_obstacle {
            TerminalCause::Collision
        } else if !self.layout.on_road(pos, self.cfg.offroad_inflate) {
            TerminalCause::OffRoad
        } else if pos.distance(self.goal) <= self.cfg.goal_radius {
            TerminalCause::Success
        } else if self.state.step_count >= self.cfg.max_steps() {
            TerminalCause::Timeout
        } else {
            TerminalCause::None
        }
    }

    fn reward(&self, prev_progress: f64, cause: TerminalCause) -> f64 {
        step_reward(
            &self.cfg.reward,
            self.state.progress - prev_progress,
            self.state.ego.speed,
            cause,
        )
    }

    /// Vehicles an NPC must keep its distance from: other active NPCs and the ego.
    fn vehicle_boxes(&self) -> Vec<(Option<usize>, OrientedBox, Pose2D, f64, f64)> {
        let mut out: Vec<_> = self
            .state
            .npcs
            .iter()
            .enumerate()
            .filter(|(_, n)| n.active)
            .map(|(i, n)| {
                let (l, w) = n.class.footprint();
                (Some(i), footprint_box(n.pose, n.class), n.pose, l, w)
            })
            .collect();
        if self.ego_present {
            let e = self.state.ego.pose;
            out.push((
                None,
                self.ego_box(),
                e,
                self.cfg.ego_length,
                self.cfg.ego_width,
            ));
        }
        out
    }

    /// First vehicle blocking NPC `i` along its path, with the free distance.
    fn blocker(
        &self,
        i: usize,
        vehicles: &[(Option<usize>, OrientedBox, Pose2D, f64, f64)],
    ) -> Option<(Option<usize>, f64)> {
        let npc = &self.state.npcs[i];
        let path = &self.npc_paths[i].line;
        let (len, width) = npc.class.footprint();
        let reach = self.cfg.npc_min_gap
            + npc.speed * npc.speed / (2.0 * self.cfg.accel_limit)
            + len / 2.0
            + 2.0;
        let steps = (reach / 1.0).ceil() as usize;
        for k in 1..=steps {
            let ds = k as f64;
            let p = path.offset_point(npc.station + ds, npc.offset);
            for (j, _, pose, l, w) in vehicles {
                if *j == Some(i) {
                    continue;
                }
                let grown = OrientedBox::new(*pose, l + width, w + width);
                if grown.contains(p) {
                    return Some((*j, ds - len / 2.0));
                }
            }
        }
        None
    }

    /// Path-following controller for one road-bound NPC.
    pub fn npc_control(&self, i: usize, blocked_gap: Option<f64>) -> (NpcCommand, f64) {
        let cfg = &self.cfg;
        let npc = &self.state.npcs[i];
        let path = &self.npc_paths[i];
        let (len, width) = npc.class.footprint();
        let mut target = npc.lateral_offset;
        for o in &path.obstacles {
            let ahead = o.station - npc.station;
            let reach_back = o.half_length + len / 2.0;
            if ahead < -reach_back || ahead > cfg.npc_obstacle_lookahead + reach_back {
                continue;
            }
            let need = o.half_width + width / 2.0 + cfg.npc_obstacle_clearance;
            if (target - o.offset).abs() < need {
                let left = o.offset + need;
                let right = o.offset - need;
                target = if (left - target).abs() <= (right - target).abs() {
                    left
                } else {
                    right
                };
            }
        }
        let max_rate = cfg.npc_lateral_rate;
        let lateral_rate = ((target - npc.offset) / cfg.dt).clamp(-max_rate, max_rate);

        let mut v_cmd = npc.desired_velocity;
        if let Some(gap) = blocked_gap {
            let free = (gap - cfg.npc_min_gap).max(0.0);
            v_cmd = v_cmd.min((2.0 * cfg.accel_limit * free).sqrt());
        }
        let accel = if v_cmd < npc.speed {
            ((v_cmd - npc.speed) / cfg.dt).max(-cfg.accel_limit)
        } else {
            (cfg.npc_speed_gain * (v_cmd - npc.speed)).min(cfg.accel_limit)
        };
        (
            NpcCommand {
                accel,
                lateral_rate,
            },
            target,
        )
    }

    fn step_npcs(&mut self) {
        let dt = self.cfg.dt;
        let vehicles = self.vehicle_boxes();
        let blockers: Vec<Option<(Option<usize>, f64)>> = (0..self.state.npcs.len())
            .map(|i| {
                if self.state.npcs[i].active {
                    self.blocker(i, &vehicles)
                } else {
                    None
                }
            })
            .collect();
        let obstacle_boxes: Vec<OrientedBox> = self
            .state
            .obstacles
            .iter()
            .map(|o| footprint_box(o.pose, o.class))
            .collect();

        for i in 0..self.state.npcs.len() {
            if !self.state.npcs[i].active {
                continue;
            }
            let gap = match blockers[i] {
                Some((Some(j), gap)) => {
                    let mutual = matches!(blockers[j], Some((Some(k), _)) if k == i);
                    if mutual && i < j {
                        None
                    } else {
                        Some(gap)
                    }
                }
                Some((None, gap)) => Some(gap),
                None => None,
            };
            let (cmd, _) = self.npc_control(i, gap);
            let line = &self.npc_paths[i].line;
            let npc = &self.state.npcs[i];
            let v_new = (npc.speed + cmd.accel * dt).max(0.0);
            let station = npc.station + 0.5 * (npc.speed + v_new) * dt;
            let offset = npc.offset + cmd.lateral_rate * dt;

            let candidates = [
                (station, offset, v_new),
                (npc.station, offset, 0.0),
                (npc.station, npc.offset, 0.0),
            ];
            let mut chosen = candidates[2];
            for (k, &(s, d, v)) in candidates.iter().enumerate() {
                if k == 2 {
                    break;
                }
                let b = footprint_box(npc_pose(line, s, d), npc.class);
                let clash_npc = self.state.npcs.iter().enumerate().any(|(j, o)| {
                    j != i && o.active && footprint_box(o.pose, o.class).overlaps(&b)
                });
                let clash_obstacle = obstacle_boxes.iter().any(|o| o.overlaps(&b));
                if !clash_npc && !clash_obstacle {
                    chosen = (s, d, v);
                    break;
                }
            }
            let (s, d, v) = chosen;
            let length = line.length();
            let pose = npc_pose(line, s, d);
            let npc = &mut self.state.npcs[i];
            npc.station = s;
            npc.offset = d;
            npc.speed = v;
            npc.pose = pose;
            if s >= length - 0.5 {
                npc.active = false;
            }
        }
    }

    /// Fixed-size feature vector: ego measurements, goal, route shape, and the
    /// nearest actors.
    pub fn observation(&self) -> Observation {
        let ego = &self.state.ego;
        let mut obs = Vec::with_capacity(OBS_DIM);
        obs.push(ego.speed / 8.0);
        obs.push(ego.yaw_rate / 0.5);
        obs.push(ego.accel_lon / 3.0);
        obs.push(ego.accel_lat / 3.0);
        let g = ego.pose.to_local(self.goal);
        obs.push((g.x / 50.0).clamp(-3.0, 3.0));
        obs.push((g.y / 50.0).clamp(-3.0, 3.0));
        for ds in CURVATURE_STATIONS {
            obs.push(5.0 * self.route.line.curvature_at(ego.station + ds, 2.0));
        }
        let fs = self.frenet_state();
        obs.push(ego.offset / 2.0);
        obs.push(if ego.speed > 0.0 {
            fs.offset_rate / ego.speed.max(0.1)
        } else {
            normalize_angle(ego.pose.heading - self.route.line.pose_at(ego.station).heading).sin()
        });
        for (gap, speed) in self.corridor_gaps() {
            obs.push(gap / CORRIDOR_RANGE);
            obs.push(speed / 8.0);
        }

        let mut actors: Vec<(f64, ActorId, Pose2D, f64, ActorClass)> = self
            .state
            .npcs
            .iter()
            .filter(|n| n.active)
            .map(|n| (n.pose, n.speed, n.class, n.actor_id))
            .chain(
                self.state
                    .obstacles
                    .iter()
                    .map(|o| (o.pose, 0.0, o.class, o.actor_id)),
            )
            .map(|(pose, speed, class, id)| {
                (
                    pose.position().distance(ego.pose.position()),
                    id,
                    pose,
                    speed,
                    class,
                )
            })
            .collect();
        actors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for slot in 0..ACTOR_SLOTS {
            match actors.get(slot) {
                Some(&(_, _, pose, speed, class)) => {
                    let rel = ego.pose.to_local(pose.position());
                    obs.push((rel.x / 20.0).clamp(-3.0, 3.0));
                    obs.push((rel.y / 20.0).clamp(-3.0, 3.0));
                    obs.push(
                        normalize_angle(pose.heading - ego.pose.heading) / std::f64::consts::PI,
                    );
                    obs.push(speed / 8.0);
                    let mut onehot = [0.0; 4];
                    onehot[class.index()] = 1.0;
                    obs.extend_from_slice(&onehot);
                    obs.push(1.0);
                }
                None => obs.extend_from_slice(&[0.0; SLOT_FEATURES]),
            }
        }
        debug_assert_eq!(obs.len(), OBS_DIM);
        obs
    }

    /// Free distance along the route, and the blocker's speed, for each probe corridor.
    fn corridor_gaps(&self) -> [(f64, f64); 3] {
        let ego = &self.state.ego;
        let grown: Vec<(OrientedBox, f64)> = self
            .state
            .npcs
            .iter()
            .filter(|n| n.active)
            .map(|n| (n.pose, n.class, n.speed))
            .chain(self.state.obstacles.iter().map(|o| (o.pose, o.class, 0.0)))
            .map(|(pose, class, speed)| {
                let (l, w) = class.footprint();
                (
                    OrientedBox::new(pose, l + self.cfg.ego_length, w + self.cfg.ego_width),
                    speed,
                )
            })
            .collect();
        let mut out = [(CORRIDOR_RANGE, 0.0); 3];
        for (slot, d) in out.iter_mut().zip(CORRIDOR_OFFSETS) {
            let mut ds = 0.0;
            'probe: while ds < CORRIDOR_RANGE {
                let p = self.route.line.offset_point(ego.station + ds, d);
                for (b, speed) in &grown {
                    if b.contains(p) {
                        *slot = (ds, *speed);
                        break 'probe;
                    }
                }
                ds += ROUTE_SAMPLE_SPACING;
            }
        }
        out
    }

    fn trace_row(&self, reward: f64, cause: TerminalCause) -> TraceRow {
        let mut actors: Vec<(ActorId, Vec2)> = self
            .state
            .npcs
            .iter()
            .map(|n| (n.actor_id, n.pose.position()))
            .chain(
                self.state
                    .obstacles
                    .iter()
                    .map(|o| (o.actor_id, o.pose.position())),
            )
            .collect();
        actors.sort_by_key(|a| a.0);
        TraceRow {
            time: self.state.time,
            ego: self.state.ego.pose,
            ego_speed: self.state.ego.speed,
            actors,
            reward,
            cause,
        }
    }

    /// Whether any two NPCs, or an NPC and an obstacle, overlap.
    pub fn npc_overlap(&self) -> bool {
        let boxes: Vec<OrientedBox> = self
            .state
            .npcs
            .iter()
            .filter(|n| n.active)
            .map(|n| footprint_box(n.pose, n.class))
            .collect();
        let obstacles: Vec<OrientedBox> = self
            .state
            .obstacles
            .iter()
            .map(|o| footprint_box(o.pose, o.class))
            .collect();
        boxes.iter().enumerate().any(|(i, a)| {
            boxes[i + 1..].iter().any(|b| a.overlaps(b)) || obstacles.iter().any(|o| a.overlaps(o))
        })
    }
}

/// Shaped step reward: scaled progress, a bonus for driving near the target
/// speed, a constant step cost, and the terminal term.
pub fn step_reward(cfg: &RewardConfig, d_progress: f64, speed: f64, cause: TerminalCause) -> f64 {
    let closeness = 1.0 - ((speed - cfg.target_speed).abs() / cfg.target_speed).clamp(0.0, 1.0);
    let terminal = match cause {
        TerminalCause::Success => cfg.success,
        TerminalCause::Collision => cfg.collision,
        TerminalCause::OffRoad => cfg.offroad,
        TerminalCause::Timeout | TerminalCause::None => 0.0,
    };
    cfg.progress_scale * d_progress + cfg.speed_bonus * closeness - cfg.step_cost + terminal
}

/// Write a trace as CSV: time, ego pose and speed, per-actor positions, reward and cause.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    let ids: Vec<ActorId> = rows
        .first()
        .map(|r| r.actors.iter().map(|a| a.0).collect())
        .unwrap_or_default();
    let mut header: Vec<String> = ["time", "ego_x", "ego_y", "ego_heading", "ego_speed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for id in &ids {
        header.push(format!("actor{id}_x"));
        header.push(format!("actor{id}_y"));
    }
    header.push("reward".into());
    header.push("cause".into());
    w.write_record(&header).map_err(std::io::Error::from)?;
    for r in rows {
        let mut rec = vec![
            format!("{:.2}", r.time),
            format!("{:.4}", r.ego.x),
            format!("{:.4}", r.ego.y),
            format!("{:.4}", r.ego.heading),
            format!("{:.4}", r.ego_speed),
        ];
        for (_, p) in &r.actors {
            rec.push(format!("{:.4}", p.x));
            rec.push(format!("{:.4}", p.y));
        }
        rec.push(format!("{:.6}", r.reward));
        rec.push(r.cause.as_str().into());
        w.write_record(&rec).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}
