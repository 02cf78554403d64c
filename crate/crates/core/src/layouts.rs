//! Procedural intersection layouts and equidistant node sampling.
//!
//! Layouts are right-hand-traffic intersections with orthogonal arms meeting
//! in a square junction box. Each inbound lane connects to the outbound lanes
//! of every other arm through a connector lane (a straight segment or a
//! circular arc).

use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_angle, Polyline, Pose2D, Vec2};
use crate::scenario::{Edge, EdgeKind, LaneId, LayoutId, Node, NodeId, Occupancy};

pub const LANE_WIDTH: f64 = 3.5;
pub const ARM_LENGTH_RANGE: (f64, f64) = (20.0, 60.0);
pub const MAX_LANES_PER_DIRECTION: u8 = 2;

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("layout parameters out of bounds: {0}")]
    ParamsOutOfBounds(String),
    #[error("need at least 2 layouts to split, got {0}")]
    TooFewLayouts(usize),
    #[error("holdout fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntersectionKind {
    TIntersection,
    FourWay,
}

impl IntersectionKind {
    pub fn arm_count(self) -> usize {
        match self {
            IntersectionKind::TIntersection => 3,
            IntersectionKind::FourWay => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Turn {
    Left,
    Straight,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum LaneRole {
    Inbound {
        arm: usize,
    },
    Outbound {
        arm: usize,
    },
    Connector {
        from_arm: usize,
        to_arm: usize,
        turn: Turn,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneSpec {
    pub id: LaneId,
    pub role: LaneRole,
    pub centerline: Vec<Pose2D>,
    pub width: f64,
    pub successors: Vec<LaneId>,
    pub left_neighbor: Option<LaneId>,
    pub right_neighbor: Option<LaneId>,
}

impl LaneSpec {
    pub fn polyline(&self) -> Polyline {
        Polyline::new(self.centerline.iter().map(|p| p.position()).collect())
    }

    pub fn length(&self) -> f64 {
        self.polyline().length()
    }

    pub fn arm(&self) -> Option<usize> {
        match self.role {
            LaneRole::Inbound { arm } | LaneRole::Outbound { arm } => Some(arm),
            LaneRole::Connector { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutParams {
    /// One length per arm, meters, each within [20, 60].
    pub arm_lengths: Vec<f64>,
    pub lanes_per_direction: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmGeometry {
    /// Outward heading of the arm in the layout frame.
    pub direction: f64,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadLayout {
    pub id: LayoutId,
    pub kind: IntersectionKind,
    pub lanes_per_direction: u8,
    pub arms: Vec<ArmGeometry>,
    /// Half side of the square junction box.
    pub junction_half_size: f64,
    /// Placement of the layout frame in the world.
    pub origin: Pose2D,
    pub lanes: Vec<LaneSpec>,
}

impl RoadLayout {
    pub fn lane(&self, id: LaneId) -> Option<&LaneSpec> {
        self.lanes.get(id as usize).filter(|l| l.id == id)
    }

    pub fn road_half_width(&self) -> f64 {
        f64::from(self.lanes_per_direction) * LANE_WIDTH
    }

    /// Whether `p` lies on the drivable surface grown by `inflate` meters.
    pub fn on_road(&self, p: Vec2, inflate: f64) -> bool {
        let local = self.origin.to_local(p);
        let inflate = inflate + 1e-9;
        let h = self.junction_half_size + inflate;
        if local.x.abs() <= h && local.y.abs() <= h {
            return true;
        }
        let half = self.road_half_width() + inflate;
        self.arms.iter().any(|arm| {
            let u = Vec2::from_angle(arm.direction);
            let s = local.dot(u);
            let t = local.dot(u.perp());
            s >= -inflate && s <= self.junction_half_size + arm.length + inflate && t.abs() <= half
        })
    }

    /// Successor lanes must start where their predecessor ends.
    pub fn connectivity_errors(&self, tolerance: f64) -> Vec<String> {
        let mut errors = Vec::new();
        for lane in &self.lanes {
            let end = lane.centerline.last().map(|p| p.position());
            for &succ in &lane.successors {
                let start = self
                    .lane(succ)
                    .and_then(|l| l.centerline.first())
                    .map(|p| p.position());
                match (end, start) {
                    (Some(a), Some(b)) if a.distance(b) <= tolerance => {}
                    _ => errors.push(format!("lane {} -> {} disconnected", lane.id, succ)),
                }
            }
        }
        errors
    }
}

fn check_params(kind: IntersectionKind, params: &LayoutParams) -> Result<(), LayoutError> {
    if params.arm_lengths.len() != kind.arm_count() {
        return Err(LayoutError::ParamsOutOfBounds(format!(
            "{:?} needs {} arm lengths, got {}",
            kind,
            kind.arm_count(),
            params.arm_lengths.len()
        )));
    }
    if let Some(bad) = params
        .arm_lengths
        .iter()
        .find(|l| !(ARM_LENGTH_RANGE.0..=ARM_LENGTH_RANGE.1).contains(*l))
    {
        return Err(LayoutError::ParamsOutOfBounds(format!(
            "arm length {bad} outside [{}, {}]",
            ARM_LENGTH_RANGE.0, ARM_LENGTH_RANGE.1
        )));
    }
    if !(1..=MAX_LANES_PER_DIRECTION).contains(&params.lanes_per_direction) {
        return Err(LayoutError::ParamsOutOfBounds(format!(
            "lanes per direction {} outside [1, {MAX_LANES_PER_DIRECTION}]",
            params.lanes_per_direction
        )));
    }
    Ok(())
}

fn straight(a: Vec2, b: Vec2) -> Vec<Pose2D> {
    let heading = (b - a).angle();
    let len = a.distance(b);
    let n = (len / 5.0).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let p = a + (b - a) * (i as f64 / n as f64);
            Pose2D::new(p.x, p.y, heading)
        })
        .collect()
}

/// Circular arc tangent to `(p0, h0)` and `(p1, h1)`; requires a symmetric corner.
fn arc(p0: Vec2, h0: f64, p1: Vec2, h1: f64) -> Vec<Pose2D> {
    let sweep = normalize_angle(h1 - h0);
    let side = sweep.signum();
    let n0 = Vec2::from_angle(h0).perp() * side;
    let n1 = Vec2::from_angle(h1).perp() * side;
    let dn = n0 - n1;
    let radius = (p1 - p0).dot(dn) / dn.dot(dn);
    let center = p0 + n0 * radius;
    let segments = ((sweep.abs() * radius) / 1.0).ceil().max(8.0) as usize;
    let start = (p0 - center).angle();
    (0..=segments)
        .map(|i| {
            let f = i as f64 / segments as f64;
            let a = start + sweep * f;
            let p = center + Vec2::from_angle(a) * radius;
            Pose2D::new(p.x, p.y, h0 + sweep * f)
        })
        .collect()
}

/// Build a T or four-way intersection. `rng` draws the corner margin and the
/// world placement, so the result is a deterministic function of the seed.
pub fn build_intersection<R: Rng + ?Sized>(
    id: LayoutId,
    kind: IntersectionKind,
    params: &LayoutParams,
    rng: &mut R,
) -> Result<RoadLayout, LayoutError> {
    check_params(kind, params)?;
    let n = params.lanes_per_direction as usize;
    let w = LANE_WIDTH;
    let corner_margin = rng.random_range(4.0..7.0);
    let h = n as f64 * w + corner_margin;
    let origin = Pose2D::new(
        rng.random_range(-100.0..100.0),
        rng.random_range(-100.0..100.0),
        rng.random_range(-PI..PI),
    );
    // T intersections drop the southern arm.
    let directions: Vec<f64> = match kind {
        IntersectionKind::FourWay => vec![0.0, FRAC_PI_2, PI, -FRAC_PI_2],
        IntersectionKind::TIntersection => vec![0.0, FRAC_PI_2, PI],
    };
    let arms: Vec<ArmGeometry> = directions
        .iter()
        .zip(&params.arm_lengths)
        .map(|(&direction, &length)| ArmGeometry { direction, length })
        .collect();

    let world = |p: Vec2, heading: f64| -> Pose2D {
        let q = origin.to_world(p);
        Pose2D::new(q.x, q.y, heading + origin.heading)
    };
    let to_world = |poses: Vec<Pose2D>| -> Vec<Pose2D> {
        poses
            .into_iter()
            .map(|p| world(p.position(), p.heading))
            .collect()
    };

    let mut lanes: Vec<LaneSpec> = Vec::new();
    let mut inbound = vec![vec![0 as LaneId; n]; arms.len()];
    let mut outbound = vec![vec![0 as LaneId; n]; arms.len()];
    for (a, arm) in arms.iter().enumerate() {
        let u = Vec2::from_angle(arm.direction);
        let left = u.perp();
        for k in 0..n {
            let off = (k as f64 + 0.5) * w;
            let far = u * (h + arm.length);
            let near = u * h;
            let id = lanes.len() as LaneId;
            inbound[a][k] = id;
            lanes.push(LaneSpec {
                id,
                role: LaneRole::Inbound { arm: a },
                centerline: to_world(straight(far + left * off, near + left * off)),
                width: w,
                successors: vec![],
                left_neighbor: None,
                right_neighbor: None,
            });
        }
        for k in 0..n {
            let off = (k as f64 + 0.5) * w;
            let far = u * (h + arm.length);
            let near = u * h;
            let id = lanes.len() as LaneId;
            outbound[a][k] = id;
            lanes.push(LaneSpec {
                id,
                role: LaneRole::Outbound { arm: a },
                centerline: to_world(straight(near - left * off, far - left * off)),
                width: w,
                successors: vec![],
                left_neighbor: None,
                right_neighbor: None,
            });
        }
    }
    // Lower lane index is closer to the road centerline, i.e. to the left.
    for a in 0..arms.len() {
        for group in [&inbound[a], &outbound[a]] {
            for k in 0..n {
                let id = group[k] as usize;
                lanes[id].left_neighbor = (k > 0).then(|| group[k - 1]);
                lanes[id].right_neighbor = (k + 1 < n).then(|| group[k + 1]);
            }
        }
    }

    for (a, arm_a) in arms.iter().enumerate() {
        let u_a = Vec2::from_angle(arm_a.direction);
        let travel_in = arm_a.direction + PI;
        for (b, arm_b) in arms.iter().enumerate() {
            if a == b {
                continue;
            }
            let u_b = Vec2::from_angle(arm_b.direction);
            let rel = normalize_angle(arm_b.direction - travel_in);
            let turn = if rel.abs() < 1e-6 {
                Turn::Straight
            } else if rel > 0.0 {
                Turn::Left
            } else {
                Turn::Right
            };
            let pairs: Vec<(usize, usize)> = match turn {
                Turn::Straight => (0..n).map(|k| (k, k)).collect(),
                Turn::Left => vec![(0, 0)],
                Turn::Right => vec![(n - 1, n - 1)],
            };
            for (k_in, k_out) in pairs {
                let p0 = u_a * h + u_a.perp() * ((k_in as f64 + 0.5) * w);
                let p1 = u_b * h - u_b.perp() * ((k_out as f64 + 0.5) * w);
                let local = match turn {
                    Turn::Straight => straight(p0, p1),
                    _ => arc(p0, travel_in, p1, arm_b.direction),
                };
                let id = lanes.len() as LaneId;
                lanes.push(LaneSpec {
                    id,
                    role: LaneRole::Connector {
                        from_arm: a,
                        to_arm: b,
                        turn,
                    },
                    centerline: to_world(local),
                    width: w,
                    successors: vec![outbound[b][k_out]],
                    left_neighbor: None,
                    right_neighbor: None,
                });
                lanes[inbound[a][k_in] as usize].successors.push(id);
            }
        }
    }

    Ok(RoadLayout {
        id,
        kind,
        lanes_per_direction: params.lanes_per_direction,
        arms,
        junction_half_size: h,
        origin,
        lanes,
    })
}

/// Draw `count` layouts with random kind, arm lengths and lane counts.
pub fn generate_layouts(count: usize, seed: u64) -> Vec<RoadLayout> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let kind = if rng.random_bool(0.5) {
                IntersectionKind::FourWay
            } else {
                IntersectionKind::TIntersection
            };
            let lanes_per_direction = if rng.random_bool(0.25) { 2 } else { 1 };
            let params = LayoutParams {
                arm_lengths: (0..kind.arm_count())
                    .map(|_| rng.random_range(20.0..40.0))
                    .collect(),
                lanes_per_direction,
            };
            build_intersection(i as LayoutId, kind, &params, &mut rng)
                .expect("generated parameters are in bounds")
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub lon: f64,
    pub lat: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self { lon: 1.0, lat: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeSampling {
    pub spacing: f64,
    pub jitter: Jitter,
}

impl Default for NodeSampling {
    fn default() -> Self {
        Self {
            spacing: 5.0,
            jitter: Jitter::default(),
        }
    }
}

/// Empty road graph produced by [`sample_nodes`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    /// Node ids per lane, ordered by station.
    pub lane_nodes: Vec<Vec<NodeId>>,
}

/// Place nodes every `spacing` meters along each lane, jitter them, and derive
/// the topology edges from lane connectivity.
pub fn sample_nodes<R: Rng + ?Sized>(
    layout: &RoadLayout,
    spacing: f64,
    jitter: Jitter,
    rng: &mut R,
) -> SampledGraph {
    assert!(spacing > 0.0, "spacing must be positive");
    let mut nodes: Vec<Node> = Vec::new();
    let mut lane_nodes: Vec<Vec<NodeId>> = Vec::with_capacity(layout.lanes.len());
    for lane in &layout.lanes {
        let line = lane.polyline();
        let len = line.length();
        let count = (len / spacing + 1e-9).floor() as usize + 1;
        let mut ids = Vec::with_capacity(count);
        for i in 0..count {
            let nominal = i as f64 * spacing;
            let dl = if jitter.lon > 0.0 {
                rng.random_range(-jitter.lon..=jitter.lon)
            } else {
                0.0
            };
            let dt = if jitter.lat > 0.0 {
                rng.random_range(-jitter.lat..=jitter.lat)
            } else {
                0.0
            };
            let station = (nominal + dl).clamp(0.0, len);
            let base = line.pose_at(station);
            let p = base.position() + base.direction().perp() * dt;
            let id = nodes.len() as NodeId;
            nodes.push(Node {
                id,
                lane_id: lane.id,
                station,
                pose: Pose2D::new(p.x, p.y, base.heading),
                occupancy: Occupancy::Empty,
            });
            ids.push(id);
        }
        lane_nodes.push(ids);
    }

    let rel = |a: NodeId, b: NodeId, kind: EdgeKind| Edge {
        src: a,
        dst: b,
        kind,
        rel: crate::scenario::encode_relative(&nodes[a as usize].pose, &nodes[b as usize].pose),
        npc_attrs: None,
    };
    let mut edges = Vec::new();
    for lane in &layout.lanes {
        let ids = &lane_nodes[lane.id as usize];
        for pair in ids.windows(2) {
            edges.push(rel(pair[0], pair[1], EdgeKind::Successor));
            edges.push(rel(pair[1], pair[0], EdgeKind::Predecessor));
        }
        if let Some(&last) = ids.last() {
            for &succ in &lane.successors {
                if let Some(&first) = lane_nodes[succ as usize].first() {
                    edges.push(rel(last, first, EdgeKind::Successor));
                    edges.push(rel(first, last, EdgeKind::Predecessor));
                }
            }
        }
        for (neighbor, kind) in [
            (lane.left_neighbor, EdgeKind::Left),
            (lane.right_neighbor, EdgeKind::Right),
        ] {
            if let Some(nb) = neighbor {
                let other = &lane_nodes[nb as usize];
                for (a, b) in ids.iter().zip(other) {
                    edges.push(rel(*a, *b, kind));
                }
            }
        }
    }
    edges.sort_by_key(|e| (e.src, e.dst, e.kind));
    SampledGraph {
        nodes,
        edges,
        lane_nodes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutLibrary {
    pub train: Vec<RoadLayout>,
    pub holdout: Vec<RoadLayout>,
}

impl LayoutLibrary {
    pub fn find(&self, id: LayoutId) -> Option<&RoadLayout> {
        self.train.iter().chain(&self.holdout).find(|l| l.id == id)
    }
}

/// Deterministic disjoint split; both sides are non-empty.
pub fn split_library(
    layouts: Vec<RoadLayout>,
    holdout_fraction: f64,
    seed: u64,
) -> Result<LayoutLibrary, LayoutError> {
    if layouts.len() < 2 {
        return Err(LayoutError::TooFewLayouts(layouts.len()));
    }
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(LayoutError::InvalidFraction(holdout_fraction));
    }
    let n = layouts.len();
    let n_holdout = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let holdout_idx: std::collections::BTreeSet<usize> =
        order[..n_holdout].iter().copied().collect();
    let mut train = Vec::with_capacity(n - n_holdout);
    let mut holdout = Vec::with_capacity(n_holdout);
    for (i, l) in layouts.into_iter().enumerate() {
        if holdout_idx.contains(&i) {
            holdout.push(l);
        } else {
            train.push(l);
        }
    }
    Ok(LayoutLibrary { train, holdout })
}
