//! Quantitative evaluation: per-rollout tracking metrics with dual success
//! thresholds, task-difference and tracking-error functionals, reference
//! difficulty/quality statistics, and generalization/robustness scores.

use serde::{Deserialize, Serialize};

use crate::env::diff_angle;
use crate::error::{Error, Result};
use crate::geom;
use crate::sim::{forward_kinematics, pene_depth, SimParams};
use crate::types::{FullState, TrackingTask};
use crate::util::resample_state_sequence;

/// Weights for the tracking-error and task-difference functionals.
///
/// The ratio scores guard their denominators with `max(x, eps)`; the
/// division-by-`min(x, eps)` variant is available behind `paper_min_guard`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricWeights {
    pub err_op: f64,
    pub err_oq: f64,
    pub err_wrist: f64,
    pub err_finger: f64,
    pub diff_h: f64,
    pub diff_op: f64,
    pub diff_oq: f64,
    pub diff_pc: f64,
    pub eps: f64,
    pub paper_min_guard: bool,
}

impl Default for MetricWeights {
    fn default() -> Self {
        MetricWeights {
            err_op: 1.0,
            err_oq: 0.3,
            err_wrist: 0.1,
            err_finger: 0.1,
            diff_h: 0.1,
            diff_op: 1.0,
            diff_oq: 0.3,
            diff_pc: 0.5,
            eps: 1e-3,
            paper_min_guard: false,
        }
    }
}

impl MetricWeights {
    fn guard(&self, x: f64) -> f64 {
        if self.paper_min_guard {
            x.min(self.eps)
        } else {
            x.max(self.eps)
        }
    }
}

/// Dual success thresholds: translation (m), rotation (deg), combined hand
/// error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessThresholds {
    pub trans_m: f64,
    pub rot_deg: f64,
    pub hand: f64,
}

impl SuccessThresholds {
    pub fn tight() -> Self {
        SuccessThresholds { trans_m: 0.10, rot_deg: 20.0, hand: 0.8 }
    }

    pub fn loose() -> Self {
        SuccessThresholds { trans_m: 0.10, rot_deg: 40.0, hand: 1.2 }
    }
}

/// Per-rollout tracking metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutMetrics {
    pub r_err: f64,
    pub t_err: f64,
    pub e_wrist: f64,
    pub e_finger: f64,
    pub success_tight: bool,
    pub success_loose: bool,
}

/// Frame-mean object and hand errors plus strict-inequality success flags.
pub fn evaluate_rollout(achieved: &[FullState], reference: &[FullState]) -> Result<RolloutMetrics> {
    if achieved.len() != reference.len() || achieved.is_empty() {
        return Err(Error::Invalid(format!(
            "rollout length {} does not match reference length {}",
            achieved.len(),
            reference.len()
        )));
    }
    let frames = achieved.len() as f64;
    let mut r_err = 0.0;
    let mut t_err = 0.0;
    let mut e_wrist = 0.0;
    let mut e_finger = 0.0;
    for (a, r) in achieved.iter().zip(reference.iter()) {
        r_err += diff_angle(a.object.theta, r.object.theta);
        t_err += geom::dist(a.object.position(), r.object.position());
        let wrist_rot = diff_angle(a.hand.base_rot(), r.hand.base_rot());
        let wrist_trans = geom::dist(
            [a.hand.base_x(), a.hand.base_y()],
            [r.hand.base_x(), r.hand.base_y()],
        );
        e_wrist += 0.5 * wrist_rot + 0.5 * wrist_trans;
        let l1: f64 = a
            .hand
            .fingers()
            .iter()
            .zip(r.hand.fingers())
            .map(|(x, y)| (x - y).abs())
            .sum();
        e_finger += l1 / 4.0;
    }
    r_err /= frames;
    t_err /= frames;
    e_wrist /= frames;
    e_finger /= frames;

    let success = |th: SuccessThresholds| {
        t_err < th.trans_m && r_err < th.rot_deg.to_radians() && 0.5 * e_wrist + 0.5 * e_finger < th.hand
    };
    Ok(RolloutMetrics {
        r_err,
        t_err,
        e_wrist,
        e_finger,
        success_tight: success(SuccessThresholds::tight()),
        success_loose: success(SuccessThresholds::loose()),
    })
}

/// Weighted sum of the per-rollout tracking errors.
pub fn tracking_error(achieved: &[FullState], reference: &[FullState], w: &MetricWeights) -> Result<f64> {
    let m = evaluate_rollout(achieved, reference)?;
    Ok(w.err_op * m.t_err + w.err_oq * m.r_err + w.err_wrist * m.e_wrist + w.err_finger * m.e_finger)
}

const CHAMFER_SAMPLES: usize = 64;

/// Weighted task difference: frame-mean hand/object trajectory differences
/// plus the symmetric chamfer distance between the geometries' boundary
/// samples. `b` is resampled onto `a`'s frame count.
pub fn task_diff(a: &TrackingTask, b: &TrackingTask, w: &MetricWeights) -> f64 {
    let b_states = resample_state_sequence(&b.ref_states, a.ref_states.len());
    let mut acc = 0.0;
    for (sa, sb) in a.ref_states.iter().zip(b_states.iter()) {
        let hd = sa.hand.wrapped_sub(&sb.hand);
        let hand_norm = hd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let pos = geom::dist(sa.object.position(), sb.object.position());
        let ang = diff_angle(sa.object.theta, sb.object.theta);
        acc += w.diff_h * hand_norm + w.diff_op * pos + w.diff_oq * ang;
    }
    acc /= a.ref_states.len() as f64;
    let pa = geom::boundary_samples(a.geometry.vertices(), CHAMFER_SAMPLES);
    let pb = geom::boundary_samples(b.geometry.vertices(), CHAMFER_SAMPLES);
    acc + w.diff_pc * geom::chamfer(&pa, &pb)
}

/// Hard-to-track statistics of a reference trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyStats {
    /// Mean second-difference magnitude of the object position (m/s^2).
    pub s_smooth_o: f64,
    /// Mean contact-map change rate (1/s).
    pub v_contact: f64,
    /// Inverse minimum bounding-box extent (1/m).
    pub s_shape: f64,
}

/// Surface threshold for the binary hand-object contact map.
const CONTACT_THRESHOLD: f64 = 0.005;

pub fn difficulty_stats(task: &TrackingTask, params: &SimParams, w: &MetricWeights) -> Result<DifficultyStats> {
    let n = task.horizon();
    if n < 2 {
        return Err(Error::Invalid("difficulty_stats needs N >= 2".into()));
    }
    let dt = task.dt;
    let mut s_smooth = 0.0;
    for i in 1..n {
        let p_prev = task.ref_states[i - 1].object.position();
        let p = task.ref_states[i].object.position();
        let p_next = task.ref_states[i + 1].object.position();
        let ddx = p_next[0] - 2.0 * p[0] + p_prev[0];
        let ddy = p_next[1] - 2.0 * p[1] + p_prev[1];
        s_smooth += (ddx * ddx + ddy * ddy).sqrt() / (dt * dt);
    }
    s_smooth /= (n - 1) as f64;

    // Binary contact maps over the 6 keypoints.
    let contact_map = |s: &FullState| -> [bool; 6] {
        let kp = forward_kinematics(&s.hand, params);
        let mut c = [false; 6];
        for (k, p) in kp.iter().enumerate() {
            let body = s.object.to_body(*p);
            c[k] = geom::exterior_distance(task.geometry.vertices(), body) <= CONTACT_THRESHOLD;
        }
        c
    };
    let maps: Vec<[bool; 6]> = task.ref_states.iter().map(contact_map).collect();
    let mut v_contact = 0.0;
    for i in 1..=n {
        let hamming = maps[i]
            .iter()
            .zip(maps[i - 1].iter())
            .filter(|(a, b)| a != b)
            .count() as f64;
        v_contact += hamming / (6.0 * dt);
    }
    v_contact /= n as f64;

    let (ex, ey) = task.geometry.bbox_extents();
    let s_shape = 1.0 / w.guard(ex.min(ey));
    Ok(DifficultyStats { s_smooth_o: s_smooth, v_contact, s_shape })
}

/// Reference quality statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityStats {
    /// Mean absolute second difference of the full state (per-DoF summed).
    pub t_s: f64,
    /// Mean norm of object-minus-wrist velocity.
    pub t_c: f64,
    /// Mean hand-object penetration depth.
    pub t_p: f64,
}

pub fn quality_stats(task: &TrackingTask, params: &SimParams) -> Result<QualityStats> {
    let n = task.horizon();
    if n < 2 {
        return Err(Error::Invalid("quality_stats needs N >= 2".into()));
    }
    let dt = task.dt;

    // Unwrap angle components so second differences ignore branch jumps.
    let mut flats: Vec<[f64; 10]> = task.ref_states.iter().map(|s| s.flat()).collect();
    let rot_u = geom::unwrap_angles(&task.ref_states.iter().map(|s| s.hand.base_rot()).collect::<Vec<_>>());
    let theta_u = geom::unwrap_angles(&task.ref_states.iter().map(|s| s.object.theta).collect::<Vec<_>>());
    for (i, f) in flats.iter_mut().enumerate() {
        f[2] = rot_u[i];
        f[9] = theta_u[i];
    }

    let mut t_s = 0.0;
    for i in 1..n {
        let mut acc = 0.0;
        for d in 0..10 {
            acc += (flats[i + 1][d] - 2.0 * flats[i][d] + flats[i - 1][d]).abs();
        }
        t_s += acc / (dt * dt);
    }
    t_s /= (n - 1) as f64;

    let mut t_c = 0.0;
    for i in 1..=n {
        let o_prev = task.ref_states[i - 1].object.position();
        let o = task.ref_states[i].object.position();
        let h_prev = [task.ref_states[i - 1].hand.base_x(), task.ref_states[i - 1].hand.base_y()];
        let h = [task.ref_states[i].hand.base_x(), task.ref_states[i].hand.base_y()];
        let vx = (o[0] - o_prev[0]) / dt - (h[0] - h_prev[0]) / dt;
        let vy = (o[1] - o_prev[1]) / dt - (h[1] - h_prev[1]) / dt;
        t_c += (vx * vx + vy * vy).sqrt();
    }
    t_c /= n as f64;

    let mut t_p = 0.0;
    for s in &task.ref_states {
        t_p += pene_depth(&s.hand, &task.geometry, &s.object, params);
    }
    t_p /= (n + 1) as f64;

    Ok(QualityStats { t_s, t_c, t_p })
}

/// Mean over test tasks of the minimum task difference to any train task.
pub fn distribution_gap(test: &[TrackingTask], train: &[TrackingTask], w: &MetricWeights) -> Result<f64> {
    if test.is_empty() || train.is_empty() {
        return Err(Error::Invalid("distribution_gap needs non-empty sets".into()));
    }
    let mut acc = 0.0;
    for t in test {
        let min = train
            .iter()
            .map(|tr| task_diff(t, tr, w))
            .fold(f64::INFINITY, f64::min);
        acc += min;
    }
    Ok(acc / test.len() as f64)
}

/// Aggregate generalization/quality/robustness scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Distribution gap over mean test tracking error.
    pub s_g: f64,
    /// Mean (t_s + t_c + t_p) / 3 over the perturbed set.
    pub s_quality: f64,
    /// Perturbed-set quality over mean perturbed tracking error.
    pub s_r: f64,
    /// Per-test-task inverse tracking error.
    pub s_ht: Vec<f64>,
}

/// Compute the score suite from tracked results on a train/test split plus a
/// perturbed set.
#[allow(clippy::too_many_arguments)]
pub fn scores(
    train: &[TrackingTask],
    test: &[TrackingTask],
    test_errors: &[f64],
    perturbed: &[TrackingTask],
    perturbed_errors: &[f64],
    w: &MetricWeights,
    params: &SimParams,
) -> Result<ScoreReport> {
    if test.is_empty() || train.is_empty() || test_errors.len() != test.len() {
        return Err(Error::Invalid("scores needs aligned non-empty train/test sets".into()));
    }
    if perturbed.is_empty() || perturbed_errors.len() != perturbed.len() {
        return Err(Error::Invalid("scores needs an aligned non-empty perturbed set".into()));
    }
    let d = distribution_gap(test, train, w)?;
    let l_test = test_errors.iter().sum::<f64>() / test_errors.len() as f64;
    let s_g = d / w.guard(l_test);

    let mut q = 0.0;
    for t in perturbed {
        let qs = quality_stats(t, params)?;
        q += (qs.t_s + qs.t_c + qs.t_p) / 3.0;
    }
    let s_quality = q / perturbed.len() as f64;
    let l_pert = perturbed_errors.iter().sum::<f64>() / perturbed_errors.len() as f64;
    let s_r = s_quality / w.guard(l_pert);

    let s_ht = test_errors.iter().map(|e| 1.0 / w.guard(*e)).collect();
    Ok(ScoreReport { s_g, s_quality, s_r, s_ht })
}

/// One eval.csv row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub metrics: RolloutMetrics,
    pub tracking_error: f64,
    pub difficulty: DifficultyStats,
    pub quality: QualityStats,
}

/// Render a number with six significant digits, locale-independent.
pub fn fmt_sig(x: f64) -> String {
    format!("{x:.5e}")
}

pub const EVAL_CSV_HEADER: &str = "id,R_err,T_err,E_wrist,E_finger,success_tight,success_loose,tracking_error,s_smooth_o,v_contact,s_shape,t_s,t_c,t_p";

/// Render eval.csv (header plus one row per task).
pub fn render_eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.id,
            fmt_sig(r.metrics.r_err),
            fmt_sig(r.metrics.t_err),
            fmt_sig(r.metrics.e_wrist),
            fmt_sig(r.metrics.e_finger),
            u8::from(r.metrics.success_tight),
            u8::from(r.metrics.success_loose),
            fmt_sig(r.tracking_error),
            fmt_sig(r.difficulty.s_smooth_o),
            fmt_sig(r.difficulty.v_contact),
            fmt_sig(r.difficulty.s_shape),
            fmt_sig(r.quality.t_s),
            fmt_sig(r.quality.t_c),
            fmt_sig(r.quality.t_p),
        ));
    }
    out
}

/// Metadata describing the metric conventions in effect, written alongside
/// eval.csv.
pub fn eval_metadata(w: &MetricWeights) -> serde_json::Value {
    serde_json::json!({
        "t_s_per_term_absolute": true,
        "denominator_guard": if w.paper_min_guard { "min" } else { "max" },
        "eps": w.eps,
        "success_strict_inequality": true,
        "aggregate_reporting": "median",
    })
}
