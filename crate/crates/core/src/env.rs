//! The tracking MDP: observation construction, reward computation, residual
//! action accumulation, and episode lifecycle. Shared by the generalizable
//! controller and per-trajectory trackers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom;
use crate::sim::{self, SimParams, SimState};
use crate::types::{
    geometry_descriptor, FullState, HandDof, ObjectGeometry, TrackingTask, DESCRIPTOR_DIM,
    HAND_DOF, STATE_DIM,
};

/// Observation length: state (10) + velocities (10) + baseline hand (7) +
/// last absolute target (7) + object feature (32) + aux block (32).
pub const OBS_DIM: usize = 2 * STATE_DIM + 2 * HAND_DOF + DESCRIPTOR_DIM + (STATE_DIM + 12 + STATE_DIM);

/// Per-component clamp on each residual delta.
pub const DELTA_CLAMP: f64 = 0.05;
/// Clamp on the accumulated residual.
pub const CUM_DELTA_CLAMP: f64 = 0.5;
/// Default early-termination distance between object and its reference.
pub const TERMINATE_DIST_M: f64 = 0.25;

/// Reward weights, overridable from the `[reward]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub w_op: f64,
    pub w_oq: f64,
    pub w_wrist_trans: f64,
    pub w_wrist_ornt: f64,
    pub w_finger: f64,
    pub w_affinity: f64,
    pub bonus: f64,
    pub bonus_rot_deg: f64,
    pub bonus_trans_m: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w_op: 1.0,
            w_oq: 0.33,
            w_wrist_trans: 0.3,
            w_wrist_ornt: 0.05,
            w_finger: 0.05,
            w_affinity: 0.05,
            bonus: 1.0,
            bonus_rot_deg: 5.0,
            bonus_trans_m: 0.05,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("w_op", self.w_op),
            ("w_oq", self.w_oq),
            ("w_wrist_trans", self.w_wrist_trans),
            ("w_wrist_ornt", self.w_wrist_ornt),
            ("w_finger", self.w_finger),
            ("w_affinity", self.w_affinity),
            ("bonus", self.bonus),
            ("bonus_rot_deg", self.bonus_rot_deg),
            ("bonus_trans_m", self.bonus_trans_m),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("reward.{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Largest attainable per-step reward (all penalties zero, bonus firing).
    pub fn max_step_reward(&self) -> f64 {
        self.w_op * 0.9 + self.w_oq * std::f64::consts::PI + self.bonus
    }
}

/// Smallest rotation magnitude between two angles, in [0, pi].
pub fn diff_angle(a: f64, b: f64) -> f64 {
    geom::angle_diff_signed(a, b).abs()
}

/// Per-term reward breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    pub obj_pos: f64,
    pub obj_rot: f64,
    pub wrist_penalty: f64,
    pub finger_penalty: f64,
    pub affinity: f64,
    pub bonus: f64,
    pub obj_pos_err: f64,
    pub obj_rot_err: f64,
}

/// Tracking reward for one transition, compared against the goal state.
pub fn compute_reward(
    s_next: &FullState,
    goal: &FullState,
    hand_keypoints: &[geom::Vec2; sim::KEYPOINTS],
    geometry: &ObjectGeometry,
    obj_pose: &crate::types::ObjectPose,
    w: &RewardWeights,
) -> (f64, RewardComponents) {
    let dp = geom::dist(s_next.object.position(), goal.object.position());
    let dq = diff_angle(s_next.object.theta, goal.object.theta);
    let obj_pos = 0.9 - dp;
    let obj_rot = std::f64::consts::PI - dq;

    let hd = s_next.hand.wrapped_sub(&goal.hand);
    let wrist_penalty = w.w_wrist_trans * (hd[0].abs() + hd[1].abs()) + w.w_wrist_ornt * hd[2].abs();
    let finger_penalty = w.w_finger * hd[3..7].iter().map(|v| v.abs()).sum::<f64>();

    // Affinity: mean fingertip distance to the object surface, clamped.
    let tips = [hand_keypoints[2], hand_keypoints[5]];
    let mean_dist = tips
        .iter()
        .map(|p| geom::exterior_distance(geometry.vertices(), obj_pose.to_body(*p)))
        .sum::<f64>()
        / 2.0;
    let affinity = (-mean_dist).clamp(-0.2, 0.0);

    let bonus_fires = dq < w.bonus_rot_deg.to_radians() && dp < w.bonus_trans_m;
    let bonus = if bonus_fires { w.bonus } else { 0.0 };

    let r = w.w_op * obj_pos + w.w_oq * obj_rot - wrist_penalty - finger_penalty
        + w.w_affinity * affinity
        + bonus;
    (
        r,
        RewardComponents {
            obj_pos,
            obj_rot,
            wrist_penalty,
            finger_penalty,
            affinity,
            bonus,
            obj_pos_err: dp,
            obj_rot_err: dq,
        },
    )
}

/// Episode state for one tracking environment.
#[derive(Debug, Clone)]
pub struct EnvState {
    pub task: Arc<TrackingTask>,
    pub baseline: Arc<Vec<HandDof>>,
    pub sim: SimState,
    pub cum_delta: [f64; HAND_DOF],
    /// Last absolute position target applied (baseline frame 0 before any step).
    pub last_target: HandDof,
    pub n: usize,
    pub done: bool,
    pub terminate_dist_m: f64,
    pub params: SimParams,
}

impl EnvState {
    /// Fresh episode at the task's first reference frame, zero velocities.
    pub fn new(task: Arc<TrackingTask>, baseline: Arc<Vec<HandDof>>, params: SimParams) -> Result<Self> {
        if baseline.len() != task.ref_states.len() {
            return Err(Error::Invalid(format!(
                "baseline length {} != task frames {}",
                baseline.len(),
                task.ref_states.len()
            )));
        }
        let sim = SimState::at_rest(task.ref_states[0]);
        let last_target = baseline[0];
        Ok(EnvState {
            task,
            baseline,
            sim,
            cum_delta: [0.0; HAND_DOF],
            last_target,
            n: 0,
            done: false,
            terminate_dist_m: TERMINATE_DIST_M,
            params,
        })
    }

    pub fn reset(&mut self) {
        self.sim = SimState::at_rest(self.task.ref_states[0]);
        self.cum_delta = [0.0; HAND_DOF];
        self.last_target = self.baseline[0];
        self.n = 0;
        self.done = false;
    }

    pub fn horizon(&self) -> usize {
        self.task.horizon()
    }

    /// Object shape feature for this task.
    pub fn object_feature(&self) -> [f64; DESCRIPTOR_DIM] {
        geometry_descriptor(&self.task.geometry)
    }
}

/// Fixed-order observation vector for the current frame. Errors at the final
/// frame (no next goal).
pub fn build_observation(env: &EnvState, feat_obj: &[f64; DESCRIPTOR_DIM]) -> Result<Vec<f64>> {
    if env.n >= env.horizon() {
        return Err(Error::Invalid("observation requested at final frame".into()));
    }
    let mut obs = Vec::with_capacity(OBS_DIM);
    let s = &env.sim.q;
    obs.extend_from_slice(&s.flat());
    obs.extend_from_slice(&env.sim.hand_vel);
    obs.extend_from_slice(&env.sim.object_vel);
    obs.extend_from_slice(&env.baseline[env.n].0);
    obs.extend_from_slice(&env.last_target.0);
    obs.extend_from_slice(feat_obj);

    // Auxiliary block: next goal, fingertip keypoints, goal minus state.
    let goal = &env.task.ref_states[env.n + 1];
    obs.extend_from_slice(&goal.flat());
    let kp = sim::forward_kinematics(&s.hand, &env.params);
    for p in kp {
        obs.push(p[0]);
        obs.push(p[1]);
    }
    let hand_diff = goal.hand.wrapped_sub(&s.hand);
    obs.extend_from_slice(&hand_diff);
    obs.push(goal.object.x - s.object.x);
    obs.push(goal.object.y - s.object.y);
    obs.push(geom::angle_diff_signed(goal.object.theta, s.object.theta));

    debug_assert_eq!(obs.len(), OBS_DIM);
    Ok(obs)
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Observation for the new frame; absent when the episode ended.
    pub obs: Option<Vec<f64>>,
    pub reward: f64,
    pub done: bool,
    pub components: RewardComponents,
    /// Absolute position target that was applied.
    pub target: HandDof,
}

/// Apply a residual delta: clamp it, accumulate, PD-step the simulation, and
/// score the transition against the next reference frame.
pub fn env_step(
    env: &mut EnvState,
    delta: &[f64; HAND_DOF],
    feat_obj: &[f64; DESCRIPTOR_DIM],
    w: &RewardWeights,
) -> Result<StepOutcome> {
    if env.done {
        return Err(Error::Invalid("step on finished episode".into()));
    }
    for i in 0..HAND_DOF {
        let d = delta[i].clamp(-DELTA_CLAMP, DELTA_CLAMP);
        env.cum_delta[i] = (env.cum_delta[i] + d).clamp(-CUM_DELTA_CLAMP, CUM_DELTA_CLAMP);
    }
    let target = env.baseline[env.n].add(&env.cum_delta);
    let next = sim::step(&env.sim, &target, &env.task.geometry, &env.params)?;
    if next.max_abs_component() > 1e6 {
        return Err(Error::Numeric(format!(
            "simulation exploded on task {} at frame {}",
            env.task.id, env.n
        )));
    }
    env.sim = next;
    env.n += 1;
    env.last_target = target;

    let goal = &env.task.ref_states[env.n];
    let kp = sim::forward_kinematics(&env.sim.q.hand, &env.params);
    let (reward, components) = compute_reward(
        &env.sim.q,
        goal,
        &kp,
        &env.task.geometry,
        &env.sim.q.object,
        w,
    );

    let deviated = geom::dist(env.sim.q.object.position(), goal.object.position()) > env.terminate_dist_m;
    env.done = env.n >= env.horizon() || deviated;

    let obs = if env.done { None } else { Some(build_observation(env, feat_obj)?) };
    Ok(StepOutcome { obs, reward, done: env.done, components, target })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ObjectPose;
    use approx::assert_abs_diff_eq;

    fn square_task(frames: usize) -> TrackingTask {
        let geometry = ObjectGeometry::rectangle(0.06, 0.06, 0.4).unwrap();
        let rest = geometry.rest_height();
        let state = FullState {
            hand: HandDof([0.0, 0.12, 0.0, 0.0, 0.0, 0.0, 0.0]),
            object: ObjectPose { x: 0.0, y: rest, theta: 0.0 },
        };
        TrackingTask {
            id: "sq".into(),
            dt: 1.0 / 60.0,
            ref_states: vec![state; frames],
            geometry,
        }
    }

    fn kinematic_baseline(task: &TrackingTask) -> Vec<HandDof> {
        task.ref_states.iter().map(|s| s.hand).collect()
    }

    #[test]
    fn diff_angle_examples() {
        assert_abs_diff_eq!(diff_angle(0.3, 0.3), 0.0);
        assert_abs_diff_eq!(diff_angle(0.0, std::f64::consts::PI), std::f64::consts::PI);
        // Independent wrap arithmetic: |3.0 - (-3.0)| wraps to 2*pi - 6.
        assert_abs_diff_eq!(
            diff_angle(3.0, -3.0),
            2.0 * std::f64::consts::PI - 6.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn reward_perfect_tracking_with_touching_tips() {
        // Independent scalar recomputation: w_op*0.9 + w_oq*pi + bonus.
        let w = RewardWeights::default();
        let geometry = ObjectGeometry::rectangle(1.0, 1.0, 1.0).unwrap();
        let pose = ObjectPose { x: 0.0, y: 0.0, theta: 0.0 };
        let s = FullState { hand: HandDof::ZERO, object: pose };
        // Keypoints with both tips on the surface.
        let kp = [
            [-2.0, 2.0],
            [-2.0, 2.0],
            [0.0, 0.5],
            [2.0, 2.0],
            [2.0, 2.0],
            [0.5, 0.0],
        ];
        let (r, c) = compute_reward(&s, &s, &kp, &geometry, &pose, &w);
        let expect = 1.0 * 0.9 + 0.33 * std::f64::consts::PI + 1.0;
        assert_abs_diff_eq!(r, expect, epsilon = 1e-12);
        assert!((expect - 2.93669).abs() < 1e-4);
        assert_eq!(c.bonus, 1.0);
        assert_eq!(c.affinity, 0.0);
    }

    #[test]
    fn reward_translation_error_term() {
        let w = RewardWeights::default();
        let geometry = ObjectGeometry::rectangle(1.0, 1.0, 1.0).unwrap();
        let pose = ObjectPose { x: 0.10, y: 0.0, theta: 0.0 };
        let goal_pose = ObjectPose { x: 0.0, y: 0.0, theta: 0.0 };
        let s = FullState { hand: HandDof::ZERO, object: pose };
        let goal = FullState { hand: HandDof::ZERO, object: goal_pose };
        let kp = [[9.0, 9.0]; 6];
        let (_, c) = compute_reward(&s, &goal, &kp, &geometry, &pose, &w);
        assert_abs_diff_eq!(c.obj_pos, 0.9 - 0.10, epsilon = 1e-12);
        assert_eq!(c.bonus, 0.0);
    }

    #[test]
    fn reward_anti_podal_rotation_zeroes_term() {
        let w = RewardWeights::default();
        let geometry = ObjectGeometry::rectangle(1.0, 1.0, 1.0).unwrap();
        let pose = ObjectPose { x: 0.0, y: 0.0, theta: std::f64::consts::PI };
        let goal = FullState {
            hand: HandDof::ZERO,
            object: ObjectPose { x: 0.0, y: 0.0, theta: 0.0 },
        };
        let s = FullState { hand: HandDof::ZERO, object: pose };
        let kp = [[9.0, 9.0]; 6];
        let (_, c) = compute_reward(&s, &goal, &kp, &geometry, &pose, &w);
        assert_abs_diff_eq!(c.obj_rot, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn observation_layout_manual_oracle() {
        let task = Arc::new(square_task(3));
        let baseline = Arc::new(kinematic_baseline(&task));
        let env = EnvState::new(task.clone(), baseline.clone(), SimParams::default()).unwrap();
        let feat = env.object_feature();
        let obs = build_observation(&env, &feat).unwrap();
        assert_eq!(obs.len(), OBS_DIM);
        assert_eq!(OBS_DIM, 98);

        // Manually assembled layout.
        let mut expect = Vec::new();
        expect.extend_from_slice(&task.ref_states[0].flat());
        expect.extend_from_slice(&[0.0; 10]);
        expect.extend_from_slice(&baseline[0].0);
        expect.extend_from_slice(&baseline[0].0);
        expect.extend_from_slice(&feat);
        expect.extend_from_slice(&task.ref_states[1].flat());
        let kp = sim::forward_kinematics(&task.ref_states[0].hand, &SimParams::default());
        for p in kp {
            expect.push(p[0]);
            expect.push(p[1]);
        }
        // Constant trajectory: goal minus state is all zeros.
        expect.extend_from_slice(&[0.0; 10]);
        assert_eq!(obs, expect);
    }

    #[test]
    fn observation_rejected_at_final_frame() {
        let task = Arc::new(square_task(3));
        let baseline = Arc::new(kinematic_baseline(&task));
        let mut env = EnvState::new(task, baseline, SimParams::default()).unwrap();
        env.n = env.horizon();
        let feat = env.object_feature();
        assert!(build_observation(&env, &feat).is_err());
    }

    #[test]
    fn zero_deltas_keep_targets_on_baseline_and_match_raw_sim() {
        let task = Arc::new(square_task(20));
        let baseline = Arc::new(kinematic_baseline(&task));
        let params = SimParams::default();
        let mut env = EnvState::new(task.clone(), baseline.clone(), params.clone()).unwrap();
        let feat = env.object_feature();
        let w = RewardWeights::default();

        let mut raw = SimState::at_rest(task.ref_states[0]);
        for n in 0..task.horizon() {
            let out = env_step(&mut env, &[0.0; HAND_DOF], &feat, &w).unwrap();
            assert_eq!(out.target, baseline[n]);
            raw = sim::step(&raw, &baseline[n], &task.geometry, &params).unwrap();
            assert_eq!(env.sim, raw, "diverged at frame {n}");
        }
        assert!(env.done);
    }

    #[test]
    fn delta_clamp_applied() {
        let task = Arc::new(square_task(10));
        let baseline = Arc::new(kinematic_baseline(&task));
        let mut env = EnvState::new(task, baseline.clone(), SimParams::default()).unwrap();
        let feat = env.object_feature();
        let w = RewardWeights::default();
        let mut delta = [0.0; HAND_DOF];
        delta[3] = 0.2;
        let out = env_step(&mut env, &delta, &feat, &w).unwrap();
        assert_abs_diff_eq!(out.target.0[3], baseline[0].0[3] + DELTA_CLAMP, epsilon = 1e-15);
    }

    #[test]
    fn cumulative_clamp_applied() {
        let task = Arc::new(square_task(40));
        let baseline = Arc::new(kinematic_baseline(&task));
        let mut env = EnvState::new(task, baseline, SimParams::default()).unwrap();
        let feat = env.object_feature();
        let w = RewardWeights::default();
        let mut delta = [0.0; HAND_DOF];
        delta[0] = 0.05;
        for _ in 0..15 {
            env_step(&mut env, &delta, &feat, &w).unwrap();
        }
        assert_abs_diff_eq!(env.cum_delta[0], CUM_DELTA_CLAMP, epsilon = 1e-12);
    }

    #[test]
    fn early_termination_on_reference_deviation() {
        let mut task = square_task(40);
        // Reference object teleports far away mid-episode.
        for s in task.ref_states.iter_mut().skip(5) {
            s.object.x += 0.4;
        }
        let task = Arc::new(task);
        let baseline = Arc::new(kinematic_baseline(&task));
        let mut env = EnvState::new(task, baseline, SimParams::default()).unwrap();
        let feat = env.object_feature();
        let w = RewardWeights::default();
        let mut steps = 0;
        while !env.done {
            env_step(&mut env, &[0.0; HAND_DOF], &feat, &w).unwrap();
            steps += 1;
        }
        assert!(steps <= 6, "terminated after {steps} steps");
        assert!(env_step(&mut env, &[0.0; HAND_DOF], &feat, &w).is_err());
    }

    #[test]
    fn reward_upper_bound_never_exceeded() {
        let w = RewardWeights::default();
        let bound = w.max_step_reward() + 1e-9;
        let task = Arc::new(square_task(30));
        let baseline = Arc::new(kinematic_baseline(&task));
        let mut env = EnvState::new(task, baseline, SimParams::default()).unwrap();
        let feat = env.object_feature();
        let mut k = 0u64;
        while !env.done {
            // Arbitrary dithering deltas.
            let mut delta = [0.0; HAND_DOF];
            for (i, d) in delta.iter_mut().enumerate() {
                *d = 0.05 * (((k + i as u64) % 7) as f64 / 7.0 - 0.5);
            }
            let out = env_step(&mut env, &delta, &feat, &w).unwrap();
            assert!(out.reward <= bound, "reward {} exceeds bound {bound}", out.reward);
            k += 1;
        }
    }

    #[test]
    fn bonus_indicator_invariant_to_common_penalty_scale() {
        let geometry = ObjectGeometry::rectangle(0.06, 0.06, 0.4).unwrap();
        let pose = ObjectPose { x: 0.01, y: 0.03, theta: 0.02 };
        let goal = FullState {
            hand: HandDof([0.3, 0.1, 0.2, 0.1, 0.1, 0.1, 0.1]),
            object: ObjectPose { x: 0.0, y: 0.03, theta: 0.0 },
        };
        let s = FullState { hand: HandDof::ZERO, object: pose };
        let kp = [[9.0, 9.0]; 6];
        let base = RewardWeights::default();
        let mut scaled = base.clone();
        for f in [&mut scaled.w_wrist_trans, &mut scaled.w_wrist_ornt, &mut scaled.w_finger, &mut scaled.w_affinity] {
            *f *= 17.0;
        }
        let (_, c1) = compute_reward(&s, &goal, &kp, &geometry, &pose, &base);
        let (_, c2) = compute_reward(&s, &goal, &kp, &geometry, &pose, &scaled);
        assert_eq!(c1.bonus > 0.0, c2.bonus > 0.0);
    }
}
