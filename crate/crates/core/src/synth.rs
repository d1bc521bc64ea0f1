//! Procedural generator of kinematic reference trajectories, plus noise
//! injectors for robustness stress tests.
//!
//! Motions are closed-form object profiles with a claw-style grip: the hand
//! base hovers above the object (base_rot = pi, fingers pointing down) and
//! the fingertips track grip points on the object's left/right extremes with
//! a small standoff gap. Fingertip targets go through two-link IK to build
//! synthetic keypoints, then the retarget module fits the hand DoF sequence.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec2};
use crate::retarget::{retarget_frame, retarget_trajectory, SourceKeypointTrajectory};
use crate::sim::{forward_kinematics, SimParams, KEYPOINTS};
use crate::types::{
    validate_task, FullState, ObjectGeometry, ObjectPose, TrackingTask, FINGER_LIMIT,
    HAND_DOF,
};
use crate::util::derive_seed;

/// Motion family kinds mirroring the qualitative challenges in the synthetic
/// suite: plain pick-up, planar pushes, in-hand reorientation, combined lift
/// and turn, and low-profile (thin) object pick-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FamilyKind {
    GraspLift,
    Slide,
    RotateInPlace,
    LiftReorient,
    ThinBarLift,
}

impl FamilyKind {
    pub fn name(&self) -> &'static str {
        match self {
            FamilyKind::GraspLift => "grasp_lift",
            FamilyKind::Slide => "slide",
            FamilyKind::RotateInPlace => "rotate_in_place",
            FamilyKind::LiftReorient => "lift_reorient",
            FamilyKind::ThinBarLift => "thin_bar_lift",
        }
    }
}

/// A motion family with its amplitude (meters or radians, depending on the
/// kind) and duration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionFamily {
    pub kind: FamilyKind,
    pub amplitude: f64,
    pub duration_frames: usize,
}

impl MotionFamily {
    pub fn new(kind: FamilyKind, amplitude: f64, duration_frames: usize) -> Result<Self> {
        if duration_frames < 30 {
            return Err(Error::Invalid(format!(
                "duration_frames must be >= 30, got {duration_frames}"
            )));
        }
        Ok(MotionFamily { kind, amplitude, duration_frames })
    }
}

/// Default family set used by `gen-library`.
pub fn default_families() -> Vec<MotionFamily> {
    vec![
        MotionFamily { kind: FamilyKind::GraspLift, amplitude: 0.15, duration_frames: 120 },
        MotionFamily { kind: FamilyKind::Slide, amplitude: 0.20, duration_frames: 120 },
        MotionFamily {
            kind: FamilyKind::RotateInPlace,
            amplitude: std::f64::consts::FRAC_PI_4,
            duration_frames: 120,
        },
        MotionFamily {
            kind: FamilyKind::LiftReorient,
            amplitude: std::f64::consts::FRAC_PI_6,
            duration_frames: 120,
        },
        MotionFamily { kind: FamilyKind::ThinBarLift, amplitude: 0.12, duration_frames: 120 },
    ]
}

/// Default object set used by `gen-library`.
pub fn default_geometries() -> Vec<ObjectGeometry> {
    vec![
        ObjectGeometry::rectangle(0.06, 0.06, 0.4).unwrap(),
        ObjectGeometry::rectangle(0.12, 0.05, 0.5).unwrap(),
        ObjectGeometry::rectangle(0.12, 0.012, 0.3).unwrap(),
        ObjectGeometry::regular(8, 0.035, 0.4).unwrap(),
        ObjectGeometry::rectangle(0.03, 0.03, 0.3).unwrap(),
    ]
}

/// Noise injection parameters for robustness stressors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Shift near-surface hand keypoints into the object by this depth (m).
    pub penetration_offset: f64,
    /// Frame index receiving a one-frame hand-base discontinuity.
    pub teleport_frame: Option<usize>,
    /// Base x, y, rotation jump applied at `teleport_frame`.
    pub teleport_delta: (f64, f64, f64),
    /// Per-frame Gaussian jitter std on all hand DoF (m or rad).
    pub jitter_std: f64,
}

impl NoiseSpec {
    pub fn zero() -> Self {
        NoiseSpec {
            penetration_offset: 0.0,
            teleport_frame: None,
            teleport_delta: (0.0, 0.0, 0.0),
            jitter_std: 0.0,
        }
    }

    fn is_zero(&self) -> bool {
        self.penetration_offset == 0.0 && self.teleport_frame.is_none() && self.jitter_std == 0.0
    }
}

fn ease(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    3.0 * u * u - 2.0 * u * u * u
}

/// Object pose profile for one family. Returns poses per frame; frame 0 is
/// always the resting pose.
fn object_profile(
    family: &MotionFamily,
    start_x: f64,
    rest_y: f64,
    frames: usize,
    amp: f64,
) -> Vec<ObjectPose> {
    let mut out = Vec::with_capacity(frames);
    for n in 0..frames {
        let t = n as f64;
        let pose = match family.kind {
            FamilyKind::GraspLift => {
                let hold = 20.0;
                let u = ease((t - hold) / (frames as f64 - 1.0 - hold));
                ObjectPose { x: start_x, y: rest_y + amp * u, theta: 0.0 }
            }
            FamilyKind::Slide => {
                let hold = 10.0;
                let span = frames as f64 - 1.0 - 2.0 * hold;
                let u = ease((t - hold) / span);
                ObjectPose { x: start_x + amp * u, y: rest_y, theta: 0.0 }
            }
            FamilyKind::RotateInPlace => {
                let hold = 10.0;
                let u = ease((t - hold) / (frames as f64 - 1.0 - hold));
                ObjectPose { x: start_x, y: rest_y, theta: geom::wrap_angle(amp * u) }
            }
            FamilyKind::LiftReorient => {
                let hold = 12.0;
                let u = ease((t - hold) / (frames as f64 - 1.0 - hold));
                ObjectPose {
                    x: start_x,
                    y: rest_y + 0.10 * u,
                    theta: geom::wrap_angle(amp * u),
                }
            }
            FamilyKind::ThinBarLift => {
                let hold = 10.0;
                // Faster profile: top reached at 80% of the episode.
                let span = 0.8 * (frames as f64 - 1.0) - hold;
                let u = ease((t - hold) / span);
                ObjectPose { x: start_x, y: rest_y + amp * u, theta: 0.0 }
            }
        };
        out.push(pose);
    }
    out
}

/// Two-link IK from a knuckle to a tip target; `side` picks the elbow branch
/// (+1 bends the elbow counter-clockwise of the knuckle-to-target line).
fn two_link_ik(knuckle: Vec2, target: Vec2, link: f64, side: f64) -> (Vec2, f64, f64) {
    let to_t = geom::sub(target, knuckle);
    let d = geom::norm(to_t).clamp(1e-6, 2.0 * link - 1e-9);
    let cos_alpha = (d / (2.0 * link)).clamp(-1.0, 1.0);
    let alpha = cos_alpha.acos();
    let phi_kt = to_t[1].atan2(to_t[0]);
    let phi1 = phi_kt + side * alpha;
    let mid = geom::add(knuckle, [link * phi1.cos(), link * phi1.sin()]);
    let to_tip = geom::sub(target, mid);
    let phi2 = to_tip[1].atan2(to_tip[0]);
    (mid, phi1, phi2)
}

/// Synthetic source keypoints for the claw configuration at one frame.
fn grip_keypoints(
    pose: &ObjectPose,
    geometry: &ObjectGeometry,
    gap: f64,
    standoff: f64,
    params: &SimParams,
) -> [Vec2; KEYPOINTS] {
    let r_right = geom::radial_extent(geometry.vertices(), 0.0);
    let r_left = geom::radial_extent(geometry.vertices(), std::f64::consts::PI);
    // Fingertip targets hover `gap` outside the left/right surface extremes.
    let tip_right = pose.to_world([r_right + gap, 0.0]);
    let tip_left = pose.to_world([-(r_left + gap), 0.0]);
    let base_rot = geom::wrap_angle(std::f64::consts::PI + 0.5 * pose.theta);
    let base = [pose.x, pose.y + standoff];
    let w = params.finger_base_halfwidth;
    let l = params.link_length;
    // With base_rot near pi, finger A's knuckle lands on the +x side.
    let knuckle_a = geom::add(base, geom::rotate([-w, 0.0], base_rot));
    let knuckle_b = geom::add(base, geom::rotate([w, 0.0], base_rot));
    let (mid_a, _, _) = two_link_ik(knuckle_a, tip_right, l, 1.0);
    let (mid_b, _, _) = two_link_ik(knuckle_b, tip_left, l, -1.0);
    [knuckle_a, mid_a, tip_right, knuckle_b, mid_b, tip_left]
}

/// Generate one kinematic reference task. Deterministic in
/// `(family, geometry, seed)`.
pub fn gen_task(
    family: &MotionFamily,
    geometry: &ObjectGeometry,
    seed: u64,
    params: &SimParams,
) -> Result<TrackingTask> {
    let span = 2.0 * (params.finger_base_halfwidth + params.link_length);
    let (width, _) = geometry.bbox_extents();
    if width > 1.5 * span {
        return Err(Error::Invalid(format!(
            "object width {width:.3} exceeds 1.5x finger span {span:.3}"
        )));
    }
    if family.duration_frames < 30 {
        return Err(Error::Invalid("duration_frames must be >= 30".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start_x: f64 = rng.gen_range(-0.05..0.05);
    let amp = family.amplitude * rng.gen_range(0.9..1.1);
    let gap: f64 = rng.gen_range(0.0015..0.004);
    let standoff: f64 = rng.gen_range(0.080..0.090);

    let frames = family.duration_frames;
    let rest_y = geometry.rest_height();
    let poses = object_profile(family, start_x, rest_y, frames, amp);

    let src = SourceKeypointTrajectory {
        frames: poses
            .iter()
            .map(|p| grip_keypoints(p, geometry, gap, standoff, params))
            .collect(),
    };
    let hands = retarget_trajectory(&src, params)?;

    let ref_states = hands
        .into_iter()
        .zip(poses)
        .map(|(hand, object)| FullState { hand, object })
        .collect();
    let task = TrackingTask {
        id: format!("{}_{seed}", family.kind.name()),
        dt: params.dt_control,
        ref_states,
        geometry: geometry.clone(),
    };
    let violations = validate_task(&task);
    if !violations.is_empty() {
        return Err(Error::Data(format!(
            "generated task violates invariants: {}",
            violations.join("; ")
        )));
    }
    Ok(task)
}

/// Inject reference noise: penetration offsets, a one-frame hand teleport,
/// and per-frame hand jitter. The object's first frame is never modified; the
/// hand's first frame is also left untouched so episodes start physical.
pub fn inject_noise(
    task: &TrackingTask,
    spec: &NoiseSpec,
    seed: u64,
    params: &SimParams,
) -> Result<TrackingTask> {
    if spec.penetration_offset < 0.0 || spec.jitter_std < 0.0 {
        return Err(Error::Invalid("noise magnitudes must be >= 0".into()));
    }
    if let Some(f) = spec.teleport_frame {
        if f >= task.horizon() {
            return Err(Error::Invalid(format!(
                "teleport_frame {f} out of range (N = {})",
                task.horizon()
            )));
        }
    }
    if spec.is_zero() {
        return Ok(task.clone());
    }

    let mut out = task.clone();
    out.id = format!("{}_noisy_{seed}", task.id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Penetration pass: pull near-surface keypoints into the object and refit.
    if spec.penetration_offset > 0.0 {
        let po = spec.penetration_offset;
        for n in 1..out.ref_states.len() {
            let state = out.ref_states[n];
            let pose = state.object;
            let kp = forward_kinematics(&state.hand, params);
            let mut targets = kp;
            let mut touched = false;
            for (k, p) in kp.iter().enumerate() {
                let body = pose.to_body(*p);
                let dist = geom::exterior_distance(task.geometry.vertices(), body);
                if dist <= 0.01 {
                    let moved = if let Some((_, normal, _)) = geom::penetration(task.geometry.vertices(), body) {
                        // Already inside: push deeper along the inward normal.
                        geom::sub(body, geom::scale(normal, po))
                    } else {
                        let n_verts = task.geometry.vertices();
                        let mut best = body;
                        let mut best_d = f64::INFINITY;
                        for i in 0..n_verts.len() {
                            let q = geom::closest_on_segment(
                                n_verts[i],
                                n_verts[(i + 1) % n_verts.len()],
                                body,
                            );
                            let d = geom::dist(body, q);
                            if d < best_d {
                                best_d = d;
                                best = q;
                            }
                        }
                        let inward = geom::scale(geom::sub(best, body), 1.0 / best_d.max(1e-12));
                        geom::add(best, geom::scale(inward, po))
                    };
                    targets[k] = pose.to_world(moved);
                    touched = true;
                }
            }
            if touched {
                let (dof, _) = retarget_frame(&targets, &state.hand, params)?;
                out.ref_states[n].hand = dof;
            }
        }
    }

    if let Some(f) = spec.teleport_frame {
        let d = spec.teleport_delta;
        let h = &mut out.ref_states[f].hand;
        h.0[0] += d.0;
        h.0[1] += d.1;
        h.0[2] = geom::wrap_angle(h.0[2] + d.2);
    }

    if spec.jitter_std > 0.0 {
        let normal = Normal::new(0.0, spec.jitter_std).unwrap();
        for state in out.ref_states.iter_mut().skip(1) {
            for i in 0..HAND_DOF {
                state.hand.0[i] += normal.sample(&mut rng);
            }
            state.hand.0[2] = geom::wrap_angle(state.hand.0[2]);
            for i in 3..HAND_DOF {
                state.hand.0[i] = state.hand.0[i].clamp(-FINGER_LIMIT, FINGER_LIMIT);
            }
        }
    }

    Ok(out)
}

/// Generate a task library by cycling round-robin over families x geometries
/// with per-task derived seeds. Task ids are `task_%04d`.
pub fn gen_library(
    count: usize,
    seed: u64,
    families: &[MotionFamily],
    geometries: &[ObjectGeometry],
    params: &SimParams,
) -> Result<Vec<TrackingTask>> {
    if count == 0 {
        return Err(Error::Invalid("library count must be >= 1".into()));
    }
    if families.is_empty() || geometries.is_empty() {
        return Err(Error::Invalid("families and geometries must be non-empty".into()));
    }
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let combo = k % (families.len() * geometries.len());
        let family = &families[combo % families.len()];
        let geometry = &geometries[combo / families.len()];
        let task_seed = derive_seed(seed, "gen_task", k as u64);
        let mut task = gen_task(family, geometry, task_seed, params)?;
        task.id = format!("task_{k:04}");
        out.push(task);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::pene_depth;

    fn p() -> SimParams {
        SimParams::default()
    }

    #[test]
    fn grasp_lift_profile_monotone() {
        let fam = MotionFamily { kind: FamilyKind::GraspLift, amplitude: 0.15, duration_frames: 120 };
        let geo = ObjectGeometry::rectangle(0.06, 0.06, 0.4).unwrap();
        let task = gen_task(&fam, &geo, 7, &p()).unwrap();
        assert_eq!(task.ref_states.len(), 120);
        let ys: Vec<f64> = task.ref_states.iter().map(|s| s.object.y).collect();
        assert!((ys[0] - geo.rest_height()).abs() < 1e-12);
        for w in ys.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
        let lift = ys[119] - ys[0];
        assert!(lift > 0.12 && lift < 0.18, "lift {lift}");
    }

    #[test]
    fn gen_task_deterministic() {
        let fam = MotionFamily { kind: FamilyKind::Slide, amplitude: 0.2, duration_frames: 90 };
        let geo = ObjectGeometry::rectangle(0.06, 0.06, 0.4).unwrap();
        let a = gen_task(&fam, &geo, 3, &p()).unwrap();
        let b = gen_task(&fam, &geo, 3, &p()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rotate_in_place_keeps_position() {
        let fam = MotionFamily {
            kind: FamilyKind::RotateInPlace,
            amplitude: std::f64::consts::FRAC_PI_4,
            duration_frames: 120,
        };
        let geo = ObjectGeometry::regular(8, 0.035, 0.4).unwrap();
        let task = gen_task(&fam, &geo, 5, &p()).unwrap();
        let first = task.ref_states[0].object;
        for s in &task.ref_states {
            assert!((s.object.x - first.x).abs() < 1e-12);
            assert!((s.object.y - first.y).abs() < 1e-12);
        }
        let sweep = task.ref_states.last().unwrap().object.theta - first.theta;
        assert!(sweep > 0.6 && sweep < 0.9, "sweep {sweep}");
    }

    #[test]
    fn generated_tasks_validate_and_start_clean() {
        let params = p();
        for family in default_families() {
            for (gi, geo) in default_geometries().iter().enumerate() {
                for seed in [1u64, 9] {
                    let task = gen_task(&family, geo, seed, &params).unwrap();
                    assert!(validate_task(&task).is_empty());
                    let s0 = &task.ref_states[0];
                    let depth = pene_depth(&s0.hand, &task.geometry, &s0.object, &params);
                    assert!(
                        depth == 0.0,
                        "family {:?} geometry {gi} seed {seed}: frame-0 depth {depth}",
                        family.kind
                    );
                    assert!((s0.object.y - task.geometry.rest_height()).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn infeasible_width_rejected() {
        let fam = MotionFamily { kind: FamilyKind::GraspLift, amplitude: 0.1, duration_frames: 60 };
        let wide = ObjectGeometry::rectangle(0.30, 0.02, 0.5).unwrap();
        assert!(gen_task(&fam, &wide, 1, &p()).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let fam = MotionFamily { kind: FamilyKind::GraspLift, amplitude: 0.15, duration_frames: 60 };
        let geo = ObjectGeometry::rectangle(0.06, 0.06, 0.4).unwrap();
        let task = gen_task(&fam, &geo, 2, &p()).unwrap();
        let noisy = inject_noise(&task, &NoiseSpec::zero(), 5, &p()).unwrap();
        assert_eq!(noisy, task);
    }

    #[test]
    fn penetration_offset_creates_reference_penetration() {
        let fam = MotionFamily { kind: FamilyKind::GraspLift, amplitude: 0.15, duration_frames: 60 };
        let geo = ObjectGeometry::rectangle(0.06, 0.06, 0.4).unwrap();
        let task = gen_task(&fam, &geo, 2, &p()).unwrap();
        let spec = NoiseSpec { penetration_offset: 0.01, ..NoiseSpec::zero() };
        let noisy = inject_noise(&task, &spec, 5, &p()).unwrap();
        // Recompute penetration depth on the output at grasp frames.
        let mid = noisy.ref_states.len() / 2;
        let mut max_depth = 0.0f64;
        for s in &noisy.ref_states[mid..] {
            max_depth = max_depth.max(pene_depth(&s.hand, &noisy.geometry, &s.object, &p()));
        }
        assert!(max_depth >= 0.005, "max depth {max_depth}");
    }

    #[test]
    fn teleport_single_frame_discontinuity() {
        let fam = MotionFamily { kind: FamilyKind::Slide, amplitude: 0.2, duration_frames: 90 };
        let geo = ObjectGeometry::rectangle(0.06, 0.06, 0.4).unwrap();
        let task = gen_task(&fam, &geo, 2, &p()).unwrap();
        let spec = NoiseSpec {
            teleport_frame: Some(40),
            teleport_delta: (0.3, 0.0, 0.0),
            ..NoiseSpec::zero()
        };
        let noisy = inject_noise(&task, &spec, 5, &p()).unwrap();
        for (n, (a, b)) in task.ref_states.iter().zip(noisy.ref_states.iter()).enumerate() {
            if n == 40 {
                assert!((b.hand.0[0] - a.hand.0[0] - 0.3).abs() < 1e-12);
            } else {
                assert_eq!(a.hand, b.hand);
            }
            assert_eq!(a.object, b.object);
        }
        // Out-of-range teleport frame errors.
        let bad = NoiseSpec { teleport_frame: Some(90), ..spec };
        assert!(inject_noise(&task, &bad, 5, &p()).is_err());
    }

    #[test]
    fn library_round_robin_and_determinism() {
        let params = p();
        let fams = vec![
            MotionFamily { kind: FamilyKind::GraspLift, amplitude: 0.15, duration_frames: 60 },
            MotionFamily { kind: FamilyKind::Slide, amplitude: 0.2, duration_frames: 60 },
        ];
        let geos = vec![
            ObjectGeometry::rectangle(0.06, 0.06, 0.4).unwrap(),
            ObjectGeometry::regular(8, 0.035, 0.4).unwrap(),
        ];
        let lib = gen_library(4, 3, &fams, &geos, &params).unwrap();
        assert_eq!(lib.len(), 4);
        assert_eq!(lib[0].id, "task_0000");
        // Each (family, geometry) combo exactly once.
        let mut combos: Vec<(usize, usize)> = Vec::new();
        for t in &lib {
            let fam = if t.ref_states.iter().any(|s| s.object.x != t.ref_states[0].object.x) {
                1
            } else {
                0
            };
            let geo = if t.geometry.vertices().len() == 8 { 1 } else { 0 };
            combos.push((fam, geo));
        }
        combos.sort();
        assert_eq!(combos, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);

        let lib2 = gen_library(4, 3, &fams, &geos, &params).unwrap();
        assert_eq!(lib, lib2);
        assert!(gen_library(4, 3, &[], &geos, &params).is_err());
    }

    #[test]
    fn large_library_validates() {
        let params = p();
        let lib = gen_library(
            30,
            3,
            &default_families(),
            &default_geometries(),
            &params,
        )
        .unwrap();
        for t in &lib {
            assert!(validate_task(t).is_empty(), "task {} invalid", t.id);
        }
    }
}
