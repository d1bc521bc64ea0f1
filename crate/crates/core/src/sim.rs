//! Deterministic planar rigid-body simulator: a floating-base two-finger hand
//! under PD position control, one convex polygonal object, a table half-plane
//! at y = 0, and penalty contacts with Coulomb friction.
//!
//! The hand is a kinematic mass-spring system (unit inertia per DoF); the
//! object is a rigid body with polygon mass properties. Hand gravity is
//! ignored; object gravity is not. Each control step advances `substeps`
//! semi-implicit Euler substeps. Identical inputs produce bit-identical
//! outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec2};
use crate::types::{FullState, HandDof, ObjectGeometry, FINGER_LIMIT, HAND_DOF};

pub const KEYPOINTS: usize = 6;

/// Physical and control parameters, loadable from the `[sim]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub dt_control: f64,
    pub substeps: u32,
    pub gravity: f64,
    pub kp_finger: f64,
    pub kd_finger: f64,
    pub kp_base_trans: f64,
    pub kd_base_trans: f64,
    pub kp_base_rot: f64,
    pub kd_base_rot: f64,
    pub contact_stiffness: f64,
    pub contact_damping: f64,
    pub friction_mu: f64,
    pub link_length: f64,
    pub finger_base_halfwidth: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            dt_control: 1.0 / 60.0,
            substeps: 4,
            gravity: 9.81,
            kp_finger: 20.0,
            kd_finger: 1.0,
            kp_base_trans: 400.0,
            kd_base_trans: 40.0,
            kp_base_rot: 100.0,
            kd_base_rot: 10.0,
            contact_stiffness: 1e4,
            contact_damping: 10.0,
            friction_mu: 0.9,
            link_length: 0.05,
            finger_base_halfwidth: 0.04,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt_control", self.dt_control),
            ("gravity", self.gravity),
            ("kp_finger", self.kp_finger),
            ("kd_finger", self.kd_finger),
            ("kp_base_trans", self.kp_base_trans),
            ("kd_base_trans", self.kd_base_trans),
            ("kp_base_rot", self.kp_base_rot),
            ("kd_base_rot", self.kd_base_rot),
            ("contact_stiffness", self.contact_stiffness),
            ("contact_damping", self.contact_damping),
            ("friction_mu", self.friction_mu),
            ("link_length", self.link_length),
            ("finger_base_halfwidth", self.finger_base_halfwidth),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("sim.{name} must be positive, got {v}")));
            }
        }
        if self.substeps < 1 {
            return Err(Error::Config("sim.substeps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Full dynamic state of the planar world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub q: FullState,
    pub hand_vel: [f64; HAND_DOF],
    /// Object twist: vx, vy, omega.
    pub object_vel: [f64; 3],
}

impl SimState {
    pub fn at_rest(q: FullState) -> Self {
        SimState { q, hand_vel: [0.0; HAND_DOF], object_vel: [0.0; 3] }
    }

    pub fn is_finite(&self) -> bool {
        self.q.is_finite()
            && self.hand_vel.iter().all(|v| v.is_finite())
            && self.object_vel.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_component(&self) -> f64 {
        let mut m: f64 = 0.0;
        for v in self.q.flat() {
            m = m.max(v.abs());
        }
        for v in self.hand_vel {
            m = m.max(v.abs());
        }
        for v in self.object_vel {
            m = m.max(v.abs());
        }
        m
    }
}

/// Keypoint world positions: finger A knuckle, A mid, A tip, then finger B
/// knuckle, B mid, B tip. Knuckles sit at base +- `finger_base_halfwidth`
/// along the base-frame x-axis; fingers extend along base +y at zero angles.
pub fn forward_kinematics(hand: &HandDof, params: &SimParams) -> [Vec2; KEYPOINTS] {
    let base = [hand.base_x(), hand.base_y()];
    let rot = hand.base_rot();
    let l = params.link_length;
    let w = params.finger_base_halfwidth;
    let mut out = [[0.0; 2]; KEYPOINTS];
    for (f, sign) in [(0usize, -1.0), (1usize, 1.0)] {
        let knuckle = geom::add(base, geom::rotate([sign * w, 0.0], rot));
        let a1 = hand.0[3 + 2 * f];
        let a2 = hand.0[4 + 2 * f];
        let phi1 = rot + std::f64::consts::FRAC_PI_2 + a1;
        let mid = geom::add(knuckle, [l * phi1.cos(), l * phi1.sin()]);
        let phi2 = phi1 + a2;
        let tip = geom::add(mid, [l * phi2.cos(), l * phi2.sin()]);
        out[3 * f] = knuckle;
        out[3 * f + 1] = mid;
        out[3 * f + 2] = tip;
    }
    out
}

/// Analytic keypoint Jacobians: `jac[k][i]` is the derivative of keypoint `k`
/// with respect to hand DoF `i`.
pub fn keypoint_jacobians(hand: &HandDof, params: &SimParams) -> [[Vec2; HAND_DOF]; KEYPOINTS] {
    let base = [hand.base_x(), hand.base_y()];
    let kp = forward_kinematics(hand, params);
    let mut jac = [[[0.0; 2]; HAND_DOF]; KEYPOINTS];
    for k in 0..KEYPOINTS {
        jac[k][0] = [1.0, 0.0];
        jac[k][1] = [0.0, 1.0];
        jac[k][2] = geom::perp(geom::sub(kp[k], base));
    }
    for f in 0..2 {
        let knuckle = kp[3 * f];
        let mid = kp[3 * f + 1];
        let tip = kp[3 * f + 2];
        // Joint 1 moves the mid joint and the tip about the knuckle.
        jac[3 * f + 1][3 + 2 * f] = geom::perp(geom::sub(mid, knuckle));
        jac[3 * f + 2][3 + 2 * f] = geom::perp(geom::sub(tip, knuckle));
        // Joint 2 moves only the tip about the mid joint.
        jac[3 * f + 2][4 + 2 * f] = geom::perp(geom::sub(tip, mid));
    }
    jac
}

/// Which bodies a contact couples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BodyPair {
    /// Hand keypoint `kp` against the object polygon.
    HandObject { kp: usize },
    /// Object polygon vertex against the table.
    ObjectTable { vertex: usize },
    /// Hand keypoint against the table.
    HandTable { kp: usize },
}

/// One penalty contact. `tangent_force` is signed along `perp(normal)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub point: Vec2,
    pub normal: Vec2,
    pub normal_force: f64,
    pub tangent_force: f64,
    pub pair: BodyPair,
}

fn penalty_forces(depth: f64, v_rel: Vec2, normal: Vec2, params: &SimParams) -> (f64, f64) {
    let v_n = geom::dot(v_rel, normal);
    let normal_force = params.contact_stiffness * depth + params.contact_damping * (-v_n).max(0.0);
    let tangent = geom::perp(normal);
    let v_t = geom::dot(v_rel, tangent);
    // Viscous stick model saturated by the Coulomb cone.
    let raw = -100.0 * params.contact_damping * v_t;
    let cap = params.friction_mu * normal_force;
    let tangent_force = raw.clamp(-cap, cap);
    (normal_force, tangent_force)
}

/// Detect all contacts and their penalty forces for the current state.
///
/// Tested pairs: hand keypoints vs object polygon, object vertices vs the
/// table y = 0, and hand keypoints vs the table.
pub fn compute_contacts(state: &SimState, geometry: &ObjectGeometry, params: &SimParams) -> Vec<Contact> {
    let mut contacts = Vec::new();
    let kp = forward_kinematics(&state.q.hand, params);
    let jac = keypoint_jacobians(&state.q.hand, params);
    let pose = state.q.object;
    let obj_v = [state.object_vel[0], state.object_vel[1]];
    let obj_w = state.object_vel[2];
    let com = pose.position();

    let kp_vel = |k: usize| -> Vec2 {
        let mut v = [0.0, 0.0];
        for i in 0..HAND_DOF {
            v = geom::add(v, geom::scale(jac[k][i], state.hand_vel[i]));
        }
        v
    };

    // Hand keypoints vs object polygon.
    for k in 0..KEYPOINTS {
        let body_pt = pose.to_body(kp[k]);
        if let Some((depth, body_normal, _)) = geom::penetration(geometry.vertices(), body_pt) {
            let normal = geom::rotate(body_normal, pose.theta);
            let r = geom::sub(kp[k], com);
            let obj_pt_vel = geom::add(obj_v, geom::scale(geom::perp(r), obj_w));
            let v_rel = geom::sub(kp_vel(k), obj_pt_vel);
            let (fn_, ft) = penalty_forces(depth, v_rel, normal, params);
            contacts.push(Contact {
                point: kp[k],
                normal,
                normal_force: fn_,
                tangent_force: ft,
                pair: BodyPair::HandObject { kp: k },
            });
        }
    }

    // Object vertices vs table.
    for (idx, v) in geometry.vertices().iter().enumerate() {
        let world = pose.to_world(*v);
        if world[1] < 0.0 {
            let normal = [0.0, 1.0];
            let r = geom::sub(world, com);
            let v_pt = geom::add(obj_v, geom::scale(geom::perp(r), obj_w));
            let (fn_, ft) = penalty_forces(-world[1], v_pt, normal, params);
            contacts.push(Contact {
                point: world,
                normal,
                normal_force: fn_,
                tangent_force: ft,
                pair: BodyPair::ObjectTable { vertex: idx },
            });
        }
    }

    // Hand keypoints vs table.
    for k in 0..KEYPOINTS {
        if kp[k][1] < 0.0 {
            let normal = [0.0, 1.0];
            let (fn_, ft) = penalty_forces(-kp[k][1], kp_vel(k), normal, params);
            contacts.push(Contact {
                point: kp[k],
                normal,
                normal_force: fn_,
                tangent_force: ft,
                pair: BodyPair::HandTable { kp: k },
            });
        }
    }

    contacts
}

/// Accumulated contact effect on the object over one control step, for
/// momentum bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct StepTrace {
    /// Integral of contact forces on the object (excludes gravity).
    pub object_contact_impulse: Vec2,
    /// Integral of contact torques about the object center of mass.
    pub object_torque_impulse: f64,
}

/// Advance one control step (`dt_control` seconds, `substeps` substeps) under
/// a PD position target for the hand.
pub fn step(
    state: &SimState,
    target: &HandDof,
    geometry: &ObjectGeometry,
    params: &SimParams,
) -> Result<SimState> {
    step_traced(state, target, geometry, params).map(|(s, _)| s)
}

/// As [`step`], also returning accumulated contact impulses on the object.
pub fn step_traced(
    state: &SimState,
    target: &HandDof,
    geometry: &ObjectGeometry,
    params: &SimParams,
) -> Result<(SimState, StepTrace)> {
    if !state.is_finite() {
        return Err(Error::Numeric("sim step on non-finite state".into()));
    }
    if !target.is_finite() {
        return Err(Error::Numeric("sim step with non-finite target".into()));
    }

    let h = params.dt_control / params.substeps as f64;
    let mass = geometry.mass();
    let inertia = geometry.inertia();
    let mut cur = state.clone();
    let mut trace = StepTrace::default();

    for _ in 0..params.substeps {
        let contacts = compute_contacts(&cur, geometry, params);
        let jac = keypoint_jacobians(&cur.q.hand, params);

        // PD joint forces (unit inertia per hand DoF).
        let mut hand_force = [0.0; HAND_DOF];
        for i in 0..HAND_DOF {
            let (kp, kd) = match i {
                0 | 1 => (params.kp_base_trans, params.kd_base_trans),
                2 => (params.kp_base_rot, params.kd_base_rot),
                _ => (params.kp_finger, params.kd_finger),
            };
            let err = if i == 2 {
                geom::angle_diff_signed(target.0[i], cur.q.hand.0[i])
            } else {
                target.0[i] - cur.q.hand.0[i]
            };
            hand_force[i] = kp * err - kd * cur.hand_vel[i];
        }

        let com = cur.q.object.position();
        let mut obj_force = [0.0, -params.gravity * mass];
        let mut obj_torque = 0.0;

        for c in &contacts {
            let tangent = geom::perp(c.normal);
            let force = geom::add(
                geom::scale(c.normal, c.normal_force),
                geom::scale(tangent, c.tangent_force),
            );
            match c.pair {
                BodyPair::HandObject { kp } => {
                    // Force on the hand keypoint; equal and opposite on the object.
                    for i in 0..HAND_DOF {
                        hand_force[i] += geom::dot(jac[kp][i], force);
                    }
                    let r = geom::sub(c.point, com);
                    obj_force = geom::sub(obj_force, force);
                    obj_torque -= geom::cross(r, force);
                    trace.object_contact_impulse =
                        geom::sub(trace.object_contact_impulse, geom::scale(force, h));
                    trace.object_torque_impulse -= h * geom::cross(r, force);
                }
                BodyPair::ObjectTable { .. } => {
                    let r = geom::sub(c.point, com);
                    obj_force = geom::add(obj_force, force);
                    obj_torque += geom::cross(r, force);
                    trace.object_contact_impulse =
                        geom::add(trace.object_contact_impulse, geom::scale(force, h));
                    trace.object_torque_impulse += h * geom::cross(r, force);
                }
                BodyPair::HandTable { kp } => {
                    for i in 0..HAND_DOF {
                        hand_force[i] += geom::dot(jac[kp][i], force);
                    }
                }
            }
        }

        // Semi-implicit Euler.
        for i in 0..HAND_DOF {
            cur.hand_vel[i] += h * hand_force[i];
            cur.q.hand.0[i] += h * cur.hand_vel[i];
        }
        cur.object_vel[0] += h * obj_force[0] / mass;
        cur.object_vel[1] += h * obj_force[1] / mass;
        cur.object_vel[2] += h * obj_torque / inertia;
        cur.q.object.x += h * cur.object_vel[0];
        cur.q.object.y += h * cur.object_vel[1];
        cur.q.object.theta = geom::wrap_angle(cur.q.object.theta + h * cur.object_vel[2]);

        // Joint stops and wrapping.
        cur.q.hand.0[2] = geom::wrap_angle(cur.q.hand.0[2]);
        for i in 3..HAND_DOF {
            if cur.q.hand.0[i] > FINGER_LIMIT {
                cur.q.hand.0[i] = FINGER_LIMIT;
                cur.hand_vel[i] = cur.hand_vel[i].min(0.0);
            } else if cur.q.hand.0[i] < -FINGER_LIMIT {
                cur.q.hand.0[i] = -FINGER_LIMIT;
                cur.hand_vel[i] = cur.hand_vel[i].max(0.0);
            }
        }
    }

    if !cur.is_finite() {
        return Err(Error::Numeric("sim step produced non-finite state".into()));
    }
    Ok((cur, trace))
}

/// Maximum penetration depth of the hand keypoints into the object, floored
/// at zero.
pub fn pene_depth(hand: &HandDof, geometry: &ObjectGeometry, pose: &crate::types::ObjectPose, params: &SimParams) -> f64 {
    let kp = forward_kinematics(hand, params);
    let mut depth: f64 = 0.0;
    for p in kp {
        if let Some((d, _, _)) = geom::penetration(geometry.vertices(), pose.to_body(p)) {
            depth = depth.max(d);
        }
    }
    depth
}
