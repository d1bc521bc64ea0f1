//! Kinematic retargeting: fit hand DoF sequences so the robot keypoints match
//! source keypoints.
//!
//! Each frame minimizes the sum of squared keypoint distances with a
//! memory-limited quasi-Newton method (curvature-pair history 10, Armijo
//! backtracking), warm-started from the previous frame's solution. Finger
//! joints are projected onto their limits after each accepted step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec2};
use crate::sim::{forward_kinematics, keypoint_jacobians, SimParams, KEYPOINTS};
use crate::types::{HandDof, FINGER_LIMIT, HAND_DOF};

const MAX_ITERS: usize = 200;
const GRAD_TOL: f64 = 1e-10;
const HISTORY: usize = 10;
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// Source keypoint sequence, ordered exactly like [`forward_kinematics`]
/// output: A knuckle, A mid, A tip, B knuckle, B mid, B tip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceKeypointTrajectory {
    pub frames: Vec<[Vec2; KEYPOINTS]>,
}

fn objective(dof: &[f64; HAND_DOF], target: &[Vec2; KEYPOINTS], params: &SimParams) -> f64 {
    let kp = forward_kinematics(&HandDof(*dof), params);
    let mut f = 0.0;
    for k in 0..KEYPOINTS {
        let d = geom::sub(kp[k], target[k]);
        f += geom::dot(d, d);
    }
    f
}

fn gradient(dof: &[f64; HAND_DOF], target: &[Vec2; KEYPOINTS], params: &SimParams) -> [f64; HAND_DOF] {
    let hand = HandDof(*dof);
    let kp = forward_kinematics(&hand, params);
    let jac = keypoint_jacobians(&hand, params);
    let mut g = [0.0; HAND_DOF];
    for k in 0..KEYPOINTS {
        let d = geom::sub(kp[k], target[k]);
        for i in 0..HAND_DOF {
            g[i] += 2.0 * geom::dot(d, jac[k][i]);
        }
    }
    g
}

fn project(dof: &mut [f64; HAND_DOF]) {
    for v in dof[3..7].iter_mut() {
        *v = v.clamp(-FINGER_LIMIT, FINGER_LIMIT);
    }
}

fn dot7(a: &[f64; HAND_DOF], b: &[f64; HAND_DOF]) -> f64 {
    (0..HAND_DOF).map(|i| a[i] * b[i]).sum()
}

/// Fit one frame. Returns the solution and the final objective value, plus
/// the objective at every accepted iterate (monotone non-increasing).
fn solve_frame(
    target: &[Vec2; KEYPOINTS],
    init: &HandDof,
    params: &SimParams,
) -> Result<(HandDof, f64, Vec<f64>)> {
    for p in target {
        if !(p[0].is_finite() && p[1].is_finite()) {
            return Err(Error::Numeric("retarget target keypoints must be finite".into()));
        }
    }

    let mut x = init.0;
    project(&mut x);
    let mut f = objective(&x, target, params);
    let mut g = gradient(&x, target, params);
    let mut trace = vec![f];
    let mut history: Vec<([f64; HAND_DOF], [f64; HAND_DOF], f64)> = Vec::new();

    for _ in 0..MAX_ITERS {
        if g.iter().all(|v| v.abs() <= GRAD_TOL) {
            break;
        }

        // Two-loop recursion over stored (s, y) curvature pairs.
        let mut d = g;
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot7(s, &d);
            for i in 0..HAND_DOF {
                d[i] -= a * y[i];
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.last() {
            let gamma = dot7(s, y) / dot7(y, y).max(1e-300);
            for v in d.iter_mut() {
                *v *= gamma;
            }
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot7(y, &d);
            for i in 0..HAND_DOF {
                d[i] += (a - b) * s[i];
            }
        }
        for v in d.iter_mut() {
            *v = -*v;
        }
        if dot7(&g, &d) >= 0.0 {
            // Curvature info misleads; fall back to steepest descent.
            for i in 0..HAND_DOF {
                d[i] = -g[i];
            }
        }

        let line_search = |d: &[f64; HAND_DOF]| -> Option<([f64; HAND_DOF], f64)> {
            let slope = dot7(&g, d);
            let mut t = 1.0;
            for _ in 0..MAX_BACKTRACKS {
                let mut cand = x;
                for i in 0..HAND_DOF {
                    cand[i] += t * d[i];
                }
                project(&mut cand);
                let fc = objective(&cand, target, params);
                if fc <= f + ARMIJO_C1 * t * slope {
                    return Some((cand, fc));
                }
                t *= 0.5;
            }
            None
        };

        let mut accepted = line_search(&d);
        if accepted.is_none() {
            // Retry along the raw gradient so the stopping point does not
            // depend on the accumulated curvature history.
            let mut sd = [0.0; HAND_DOF];
            for i in 0..HAND_DOF {
                sd[i] = -g[i];
            }
            accepted = line_search(&sd);
        }
        let Some((next, fnext)) = accepted else {
            break;
        };

        let gnext = gradient(&next, target, params);
        let mut s = [0.0; HAND_DOF];
        let mut y = [0.0; HAND_DOF];
        for i in 0..HAND_DOF {
            s[i] = next[i] - x[i];
            y[i] = gnext[i] - g[i];
        }
        let sy = dot7(&s, &y);
        let scale = dot7(&s, &s).sqrt() * dot7(&y, &y).sqrt();
        if sy > 1e-10 * scale && sy > 0.0 {
            if history.len() == HISTORY {
                history.remove(0);
            }
            history.push((s, y, 1.0 / sy));
        }

        x = next;
        f = fnext;
        g = gnext;
        trace.push(f);
    }

    x[2] = geom::wrap_angle(x[2]);
    Ok((HandDof(x), f, trace))
}

/// Threshold below which a solve counts as converged and no restart is tried.
const RESTART_RESIDUAL: f64 = 1e-8;

fn solve_with_restarts(
    target: &[Vec2; KEYPOINTS],
    init: &HandDof,
    params: &SimParams,
) -> Result<(HandDof, f64, Vec<f64>)> {
    let mut best = solve_frame(target, init, params)?;
    if best.1 <= RESTART_RESIDUAL {
        return Ok(best);
    }
    // Analytic restart: the knuckle targets pin the base pose; try both elbow
    // signs per finger to escape elbow-flip local minima.
    let knuckle_axis = geom::sub(target[3], target[0]);
    let mid = geom::scale(geom::add(target[0], target[3]), 0.5);
    let rot = knuckle_axis[1].atan2(knuckle_axis[0]);
    for bend_a in [0.6, -0.6] {
        for bend_b in [0.6, -0.6] {
            let guess = HandDof([mid[0], mid[1], rot, bend_a, -bend_a, bend_b, -bend_b]);
            let sol = solve_frame(target, &guess, params)?;
            if sol.1 < best.1 {
                best = sol;
            }
            if best.1 <= RESTART_RESIDUAL {
                return Ok(best);
            }
        }
    }
    Ok(best)
}

/// Fit one frame of hand DoF to target keypoints. Returns the solution and
/// the residual (final objective value, in m^2).
pub fn retarget_frame(
    target: &[Vec2; KEYPOINTS],
    init: &HandDof,
    params: &SimParams,
) -> Result<(HandDof, f64)> {
    solve_with_restarts(target, init, params).map(|(d, f, _)| (d, f))
}

#[cfg(test)]
pub(crate) fn retarget_frame_traced(
    target: &[Vec2; KEYPOINTS],
    init: &HandDof,
    params: &SimParams,
) -> Result<(HandDof, f64, Vec<f64>)> {
    solve_with_restarts(target, init, params)
}

/// Fit a whole trajectory, warm-starting each frame from the previous
/// solution (frame 0 from zeros).
pub fn retarget_trajectory(
    src: &SourceKeypointTrajectory,
    params: &SimParams,
) -> Result<Vec<HandDof>> {
    let mut out = Vec::with_capacity(src.frames.len());
    let mut init = HandDof::ZERO;
    for frame in &src.frames {
        let (dof, _) = retarget_frame(frame, &init, params)?;
        out.push(dof);
        init = dof;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_reachable(rng: &mut ChaCha8Rng) -> HandDof {
        let mut d = [0.0; HAND_DOF];
        d[0] = rng.gen_range(-0.3..0.3);
        d[1] = rng.gen_range(-0.3..0.3);
        d[2] = rng.gen_range(-1.2..1.2);
        for v in d[3..7].iter_mut() {
            *v = rng.gen_range(-1.3..1.3);
        }
        HandDof(d)
    }

    #[test]
    fn already_optimal_returns_immediately() {
        let params = SimParams::default();
        let target = forward_kinematics(&HandDof::ZERO, &params);
        let (dof, residual) = retarget_frame(&target, &HandDof::ZERO, &params).unwrap();
        assert!(residual < 1e-12);
        for v in dof.0 {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn recovers_random_reachable_targets() {
        let params = SimParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let truth = random_reachable(&mut rng);
            let target = forward_kinematics(&truth, &params);
            let (_, residual) = retarget_frame(&target, &HandDof::ZERO, &params).unwrap();
            assert!(residual < 1e-6, "trial {trial}: residual {residual}");
        }
    }

    #[test]
    fn unreachable_target_converges_with_positive_residual() {
        let params = SimParams::default();
        let mut target = forward_kinematics(&HandDof::ZERO, &params);
        target[2][0] += 10.0; // tip A ten meters away from its own chain
        let (_, residual) = retarget_frame(&target, &HandDof::ZERO, &params).unwrap();
        // Reach analysis: the tip can sit at most ~0.14 m from the base, so
        // splitting 10 m of inconsistency across the chain still leaves tens
        // of m^2 of squared error.
        assert!(residual > 20.0, "residual {residual}");
        assert!(residual.is_finite());
    }

    #[test]
    fn monotone_descent_over_accepted_steps() {
        let params = SimParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = random_reachable(&mut rng);
        let target = forward_kinematics(&truth, &params);
        let (_, _, trace) = retarget_frame_traced(&target, &HandDof::ZERO, &params).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "objective increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn trajectory_round_trip_and_warm_start() {
        let params = SimParams::default();
        // Smooth DoF sequence.
        let frames: Vec<HandDof> = (0..30)
            .map(|i| {
                let t = i as f64 / 29.0;
                HandDof([
                    0.2 * t,
                    0.1 * (2.0 * t).sin(),
                    0.5 * t,
                    0.8 * t,
                    -0.6 * t,
                    -0.8 * t,
                    0.6 * t,
                ])
            })
            .collect();
        let src = SourceKeypointTrajectory {
            frames: frames.iter().map(|d| forward_kinematics(d, &params)).collect(),
        };
        let fitted = retarget_trajectory(&src, &params).unwrap();
        assert_eq!(fitted.len(), 30);

        let mut prev_kp: Option<[Vec2; KEYPOINTS]> = None;
        for (n, dof) in fitted.iter().enumerate() {
            let kp = forward_kinematics(dof, &params);
            let mut residual = 0.0;
            for k in 0..KEYPOINTS {
                let d = geom::sub(kp[k], src.frames[n][k]);
                residual += geom::dot(d, d);
            }
            assert!(residual < 1e-6, "frame {n}: residual {residual}");

            // Warm-start continuity: solution keypoints move at most 10x the
            // target keypoint displacement.
            if let Some(prev) = prev_kp {
                let sol_move: f64 = (0..KEYPOINTS).map(|k| geom::dist(kp[k], prev[k])).sum();
                let tgt_move: f64 = (0..KEYPOINTS)
                    .map(|k| geom::dist(src.frames[n][k], src.frames[n - 1][k]))
                    .sum();
                assert!(sol_move <= 10.0 * tgt_move + 1e-9);
            }
            prev_kp = Some(kp);
        }
    }

    #[test]
    fn constant_source_gives_constant_output() {
        let params = SimParams::default();
        let frame = forward_kinematics(&HandDof([0.1, 0.0, 0.3, 0.5, -0.2, -0.5, 0.2]), &params);
        let src = SourceKeypointTrajectory { frames: vec![frame; 5] };
        let fitted = retarget_trajectory(&src, &params).unwrap();
        for dof in &fitted[1..] {
            assert_eq!(dof, &fitted[1]);
        }
    }

    #[test]
    fn single_frame_source() {
        let params = SimParams::default();
        let frame = forward_kinematics(&HandDof::ZERO, &params);
        let src = SourceKeypointTrajectory { frames: vec![frame] };
        assert_eq!(retarget_trajectory(&src, &params).unwrap().len(), 1);
    }

    #[test]
    fn non_finite_target_rejected() {
        let params = SimParams::default();
        let mut target = forward_kinematics(&HandDof::ZERO, &params);
        target[0][0] = f64::NAN;
        assert!(retarget_frame(&target, &HandDof::ZERO, &params).is_err());
    }
}
