//! Shared domain types: hand configuration, object pose, tracking tasks,
//! demonstrations, and the fixed-length task embedding.
//!
//! All types are immutable after construction and safe to share across
//! workers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec2};

/// Number of hand degrees of freedom: base x, base y, base rotation, then two
/// joint angles per finger (A then B).
pub const HAND_DOF: usize = 7;
/// Object pose dimension: x, y, theta.
pub const OBJECT_DOF: usize = 3;
/// Full state dimension (hand + object).
pub const STATE_DIM: usize = HAND_DOF + OBJECT_DOF;
/// Finger joint angle limit (symmetric).
pub const FINGER_LIMIT: f64 = std::f64::consts::FRAC_PI_2;
/// Length of the geometry descriptor.
pub const DESCRIPTOR_DIM: usize = 32;
/// Keyframes sampled by the task embedding.
pub const EMBED_KEYFRAMES: usize = 16;
/// Total task-embedding length: 16 keyframes x 10 state values + descriptor.
pub const EMBED_DIM: usize = EMBED_KEYFRAMES * STATE_DIM + DESCRIPTOR_DIM;

/// Hand configuration vector.
///
/// Layout: `[base_x (m), base_y (m), base_rot (rad), a1, a2, b1, b2]` with
/// finger joints in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HandDof(pub [f64; HAND_DOF]);

impl HandDof {
    pub const ZERO: HandDof = HandDof([0.0; HAND_DOF]);

    pub fn base_x(&self) -> f64 {
        self.0[0]
    }

    pub fn base_y(&self) -> f64 {
        self.0[1]
    }

    pub fn base_rot(&self) -> f64 {
        self.0[2]
    }

    pub fn fingers(&self) -> &[f64] {
        &self.0[3..7]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Componentwise difference `self - other` with the base rotation taken
    /// along the shortest arc.
    pub fn wrapped_sub(&self, other: &HandDof) -> [f64; HAND_DOF] {
        let mut out = [0.0; HAND_DOF];
        for i in 0..HAND_DOF {
            out[i] = if i == 2 {
                geom::angle_diff_signed(self.0[i], other.0[i])
            } else {
                self.0[i] - other.0[i]
            };
        }
        out
    }

    pub fn add(&self, delta: &[f64; HAND_DOF]) -> HandDof {
        let mut out = self.0;
        for i in 0..HAND_DOF {
            out[i] += delta[i];
        }
        HandDof(out)
    }

    /// True when finger joints respect their limits and base_rot is wrapped.
    pub fn within_limits(&self) -> bool {
        let tol = 1e-9;
        self.fingers().iter().all(|a| a.abs() <= FINGER_LIMIT + tol)
            && self.base_rot() > -std::f64::consts::PI - tol
            && self.base_rot() <= std::f64::consts::PI + tol
    }
}

/// Planar object pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct ObjectPose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl From<[f64; 3]> for ObjectPose {
    fn from(v: [f64; 3]) -> Self {
        ObjectPose { x: v[0], y: v[1], theta: v[2] }
    }
}

impl From<ObjectPose> for [f64; 3] {
    fn from(p: ObjectPose) -> Self {
        [p.x, p.y, p.theta]
    }
}

impl ObjectPose {
    pub fn position(&self) -> Vec2 {
        [self.x, self.y]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    /// Body-frame point to world frame.
    pub fn to_world(&self, p: Vec2) -> Vec2 {
        geom::add(geom::rotate(p, self.theta), [self.x, self.y])
    }

    /// World-frame point to body frame.
    pub fn to_body(&self, p: Vec2) -> Vec2 {
        geom::rotate(geom::sub(p, [self.x, self.y]), -self.theta)
    }
}

/// Hand and object state at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "([f64; HAND_DOF], [f64; 3])", into = "([f64; HAND_DOF], [f64; 3])")]
pub struct FullState {
    pub hand: HandDof,
    pub object: ObjectPose,
}

impl From<([f64; HAND_DOF], [f64; 3])> for FullState {
    fn from(v: ([f64; HAND_DOF], [f64; 3])) -> Self {
        FullState { hand: HandDof(v.0), object: v.1.into() }
    }
}

impl From<FullState> for ([f64; HAND_DOF], [f64; 3]) {
    fn from(s: FullState) -> Self {
        (s.hand.0, s.object.into())
    }
}

impl FullState {
    pub fn is_finite(&self) -> bool {
        self.hand.is_finite() && self.object.is_finite()
    }

    /// Flatten to 10 values: hand DoF then object pose.
    pub fn flat(&self) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        out[..HAND_DOF].copy_from_slice(&self.hand.0);
        out[HAND_DOF] = self.object.x;
        out[HAND_DOF + 1] = self.object.y;
        out[HAND_DOF + 2] = self.object.theta;
        out
    }
}

/// Convex polygonal object geometry.
///
/// Vertices are counter-clockwise in the body frame; construction recenters
/// them so the area centroid is the body-frame origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryRepr", into = "GeometryRepr")]
pub struct ObjectGeometry {
    vertices: Vec<Vec2>,
    mass: f64,
    descriptor_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct GeometryRepr {
    vertices: Vec<Vec2>,
    mass: f64,
}

impl TryFrom<GeometryRepr> for ObjectGeometry {
    type Error = Error;
    fn try_from(r: GeometryRepr) -> Result<Self> {
        ObjectGeometry::new(r.vertices, r.mass)
    }
}

impl From<ObjectGeometry> for GeometryRepr {
    fn from(g: ObjectGeometry) -> Self {
        GeometryRepr { vertices: g.vertices, mass: g.mass }
    }
}

impl ObjectGeometry {
    pub fn new(mut vertices: Vec<Vec2>, mass: f64) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::Invalid(format!(
                "geometry needs >= 3 vertices, got {}",
                vertices.len()
            )));
        }
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::Invalid(format!("geometry mass must be positive, got {mass}")));
        }
        if vertices.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(Error::Invalid("geometry vertices must be finite".into()));
        }
        if geom::signed_area(&vertices) < 0.0 {
            vertices.reverse();
        }
        if geom::signed_area(&vertices) <= 1e-12 {
            return Err(Error::Invalid("geometry polygon is degenerate".into()));
        }
        if !geom::is_convex_ccw(&vertices) {
            return Err(Error::Invalid("geometry polygon must be convex".into()));
        }
        let c = geom::area_centroid(&vertices);
        for v in &mut vertices {
            v[0] -= c[0];
            v[1] -= c[1];
        }
        Ok(ObjectGeometry { vertices, mass, descriptor_dim: DESCRIPTOR_DIM })
    }

    /// Axis-aligned box of width `w` and height `h`.
    pub fn rectangle(w: f64, h: f64, mass: f64) -> Result<Self> {
        let hw = w / 2.0;
        let hh = h / 2.0;
        Self::new(vec![[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]], mass)
    }

    /// Regular polygon with `n` vertices at circumradius `r`, one vertex on +x.
    pub fn regular(n: usize, r: f64, mass: f64) -> Result<Self> {
        let verts = (0..n)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        Self::new(verts, mass)
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptor_dim
    }

    pub fn area(&self) -> f64 {
        geom::signed_area(&self.vertices)
    }

    pub fn inertia(&self) -> f64 {
        geom::polygon_inertia(&self.vertices, self.mass)
    }

    /// Body-frame axis-aligned bounding box as (extent_x, extent_y).
    pub fn bbox_extents(&self) -> (f64, f64) {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for k in 0..2 {
                min[k] = min[k].min(v[k]);
                max[k] = max[k].max(v[k]);
            }
        }
        (max[0] - min[0], max[1] - min[1])
    }

    /// Height of the centroid above the table when resting flat (largest drop
    /// from centroid to any vertex).
    pub fn rest_height(&self) -> f64 {
        self.vertices.iter().map(|v| -v[1]).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Deterministic 32-value shape descriptor: 16 centroid-to-boundary radii at
/// equally spaced angles, area, perimeter, bounding-box extents, min/max
/// vertex radius, mass, and zero padding.
pub fn geometry_descriptor(g: &ObjectGeometry) -> [f64; DESCRIPTOR_DIM] {
    let mut out = [0.0; DESCRIPTOR_DIM];
    for k in 0..16 {
        let phi = 2.0 * std::f64::consts::PI * k as f64 / 16.0;
        out[k] = geom::radial_extent(g.vertices(), phi);
    }
    out[16] = g.area();
    out[17] = geom::perimeter(g.vertices());
    let (ex, ey) = g.bbox_extents();
    out[18] = ex;
    out[19] = ey;
    let radii: Vec<f64> = g.vertices().iter().map(|v| geom::norm(*v)).collect();
    out[20] = radii.iter().copied().fold(f64::INFINITY, f64::min);
    out[21] = radii.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out[22] = g.mass();
    out
}

/// A kinematic reference trajectory plus object geometry: the unit of
/// tracking, mining, and generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingTask {
    pub id: String,
    pub dt: f64,
    pub ref_states: Vec<FullState>,
    pub geometry: ObjectGeometry,
}

impl TrackingTask {
    /// Number of transitions N (frame count minus one).
    pub fn horizon(&self) -> usize {
        self.ref_states.len().saturating_sub(1)
    }

    pub fn hand_refs(&self) -> impl Iterator<Item = &HandDof> {
        self.ref_states.iter().map(|s| &s.hand)
    }
}

/// Structural validation; returns one description per violated invariant.
/// Never aborts.
pub fn validate_task(task: &TrackingTask) -> Vec<String> {
    let mut violations = Vec::new();
    if task.horizon() < 2 {
        violations.push("N < 2".to_string());
    }
    if !(task.dt > 0.0 && task.dt.is_finite()) {
        violations.push(format!("dt not positive: {}", task.dt));
    }
    for (n, s) in task.ref_states.iter().enumerate() {
        let fields: [(&str, f64); STATE_DIM] = [
            ("hand.base_x", s.hand.0[0]),
            ("hand.base_y", s.hand.0[1]),
            ("hand.base_rot", s.hand.0[2]),
            ("hand.finger_a1", s.hand.0[3]),
            ("hand.finger_a2", s.hand.0[4]),
            ("hand.finger_b1", s.hand.0[5]),
            ("hand.finger_b2", s.hand.0[6]),
            ("object.x", s.object.x),
            ("object.y", s.object.y),
            ("object.theta", s.object.theta),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                violations.push(format!("{name} non-finite @{n}"));
            }
        }
        if s.hand.is_finite() && !s.hand.within_limits() {
            violations.push(format!("hand DoF out of limits @{n}"));
        }
        if s.object.theta.is_finite() {
            let t = s.object.theta;
            if !(t > -std::f64::consts::PI - 1e-9 && t <= std::f64::consts::PI + 1e-9) {
                violations.push(format!("object.theta not wrapped @{n}"));
            }
        }
    }
    violations
}

/// Fixed-length task embedding: 16 keyframes of the 10-value state with
/// angles unwrapped along the trajectory, then the geometry descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskEmbedding(pub Vec<f64>);

/// Deterministic fixed-size embedding of a task. Keyframe `k` uses frame
/// `round(k*N/15)`; angle components are unwrapped relative to frame 0.
pub fn embed_task(task: &TrackingTask) -> Result<TaskEmbedding> {
    let violations = validate_task(task);
    if !violations.is_empty() {
        return Err(Error::Invalid(format!("embed_task on invalid task: {}", violations.join("; "))));
    }
    let n = task.horizon();
    let base_rot: Vec<f64> = task.ref_states.iter().map(|s| s.hand.base_rot()).collect();
    let theta: Vec<f64> = task.ref_states.iter().map(|s| s.object.theta).collect();
    let base_rot_u = geom::unwrap_angles(&base_rot);
    let theta_u = geom::unwrap_angles(&theta);

    let mut values = Vec::with_capacity(EMBED_DIM);
    for k in 0..EMBED_KEYFRAMES {
        let frame = ((k * n) as f64 / (EMBED_KEYFRAMES - 1) as f64).round() as usize;
        let s = &task.ref_states[frame];
        let mut flat = s.flat();
        flat[2] = base_rot_u[frame];
        flat[HAND_DOF + 2] = theta_u[frame];
        values.extend_from_slice(&flat);
    }
    values.extend_from_slice(&geometry_descriptor(&task.geometry));
    Ok(TaskEmbedding(values))
}

/// A tracking task paired with an expert action sequence that tracks it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub task_id: String,
    pub baseline: Vec<HandDof>,
    /// Absolute position targets applied at each step.
    pub expert_actions: Vec<HandDof>,
    /// Per-step residual deltas; `expert_actions[n] = baseline[n] + sum(deltas[0..=n])`.
    pub expert_deltas: Vec<[f64; HAND_DOF]>,
    pub achieved: Vec<FullState>,
    pub rewards: Vec<f64>,
    pub episode_reward: f64,
}

impl Demonstration {
    /// Check internal consistency: reconstructed actions from baseline plus
    /// accumulated deltas must match the stored actions within `tol`.
    pub fn check_consistency(&self, tol: f64) -> Result<()> {
        let n = self.expert_actions.len();
        if self.expert_deltas.len() != n || self.baseline.len() != n + 1 || self.achieved.len() != n + 1 {
            return Err(Error::Data(format!(
                "demonstration {} has inconsistent lengths",
                self.task_id
            )));
        }
        let mut cum = [0.0; HAND_DOF];
        for step in 0..n {
            for i in 0..HAND_DOF {
                cum[i] += self.expert_deltas[step][i];
            }
            let rebuilt = self.baseline[step].add(&cum);
            for i in 0..HAND_DOF {
                if (rebuilt.0[i] - self.expert_actions[step].0[i]).abs() > tol {
                    return Err(Error::Data(format!(
                        "demonstration {} action mismatch at step {step} component {i}",
                        self.task_id
                    )));
                }
            }
        }
        Ok(())
    }
}
