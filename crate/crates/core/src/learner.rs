//! PPO with generalized advantage estimation plus a demonstration
//! action-supervision loss. Trains both the generalizable controller and
//! per-trajectory residual policies.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{build_observation, env_step, EnvState, RewardWeights, OBS_DIM};
use crate::error::{Error, Result};
use crate::evalkit;
use crate::nn::{clip_grad_norm, flatten_grads_into, Adam, Mlp};
use crate::sim::SimParams;
use crate::types::{Demonstration, HandDof, TrackingTask, DESCRIPTOR_DIM, HAND_DOF};
use crate::util::derive_seed;

const HIDDEN: usize = 256;
const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 1.0;
const LOG_STD_INIT: f64 = -1.0;
const EVAL_EVERY_UPDATES: u64 = 50;

/// Actor-critic parameters: two tanh MLPs plus a state-independent action
/// log-std.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub actor: Mlp,
    pub log_std: Array1<f64>,
    pub critic: Mlp,
}

impl Serialize for PolicyParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_flat().serialize(s)
    }
}

impl<'de> Deserialize<'de> for PolicyParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let flat = Vec::<f64>::deserialize(d)?;
        let mut p = PolicyParams::zeros();
        p.load_flat(&flat).map_err(serde::de::Error::custom)?;
        Ok(p)
    }
}

impl PolicyParams {
    /// All-zero parameters with the standard architecture (checkpoint loading
    /// target).
    pub fn zeros() -> PolicyParams {
        let zero_mlp = |dims: &[usize]| {
            let layers = dims
                .windows(2)
                .map(|w| crate::nn::Dense {
                    w: Array2::zeros((w[1], w[0])),
                    b: Array1::zeros(w[1]),
                })
                .collect();
            Mlp { layers }
        };
        PolicyParams {
            actor: zero_mlp(&[OBS_DIM, HIDDEN, HIDDEN, HAND_DOF]),
            log_std: Array1::zeros(HAND_DOF),
            critic: zero_mlp(&[OBS_DIM, HIDDEN, HIDDEN, 1]),
        }
    }

    pub fn init(seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Zero actor head: the initial policy mean is exactly the zero
        // residual, so an untrained policy reproduces the PD baseline.
        let mut actor = Mlp::new(
            &[OBS_DIM, HIDDEN, HIDDEN, HAND_DOF],
            &[2f64.sqrt(), 2f64.sqrt(), 0.0],
            &mut rng,
        );
        if let Some(head) = actor.layers.last_mut() {
            head.w.fill(0.0);
            head.b.fill(0.0);
        }
        let critic = Mlp::new(&[OBS_DIM, HIDDEN, HIDDEN, 1], &[2f64.sqrt(), 2f64.sqrt(), 1.0], &mut rng);
        PolicyParams { actor, log_std: Array1::from_elem(HAND_DOF, LOG_STD_INIT), critic }
    }

    pub fn param_count(&self) -> usize {
        self.actor.param_count() + HAND_DOF + self.critic.param_count()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.actor.flatten_into(&mut out);
        out.extend(self.log_std.iter());
        self.critic.flatten_into(&mut out);
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Data(format!(
                "checkpoint has {} params, expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut k = self.actor.unflatten_from(flat);
        for v in self.log_std.iter_mut() {
            *v = flat[k];
            k += 1;
        }
        self.critic.unflatten_from(&flat[k..]);
        Ok(())
    }

    pub fn mean_actions(&self, obs: &Array2<f64>) -> Array2<f64> {
        self.actor.forward(obs)
    }

    pub fn values(&self, obs: &Array2<f64>) -> Array1<f64> {
        self.critic.forward(obs).index_axis(Axis(1), 0).to_owned()
    }
}

/// PPO hyperparameters, loadable from the `[ppo]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub lr: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub horizon: usize,
    pub envs: usize,
    pub envs_per_traj: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub il_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            lr: 3e-4,
            epochs: 5,
            minibatches: 4,
            horizon: 32,
            envs: 256,
            envs_per_traj: 16,
            entropy_coef: 0.0,
            value_coef: 0.5,
            il_coef: 1.0,
            max_grad_norm: 1.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("ppo.gamma must be in [0,1), got {}", self.gamma)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("ppo.clip must be positive".into()));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("minibatches", self.minibatches),
            ("horizon", self.horizon),
            ("envs", self.envs),
            ("envs_per_traj", self.envs_per_traj),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("ppo.{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// One environment's task assignment: a task, the baseline its residuals are
/// accumulated around, and optionally an aligned expert demonstration.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub task: Arc<TrackingTask>,
    pub baseline: Arc<Vec<HandDof>>,
    pub demo: Option<Arc<Demonstration>>,
}

impl TaskSpec {
    pub fn kinematic(task: Arc<TrackingTask>) -> TaskSpec {
        let baseline = Arc::new(task.hand_refs().copied().collect::<Vec<_>>());
        TaskSpec { task, baseline, demo: None }
    }
}

/// A vector of persistent environments with their per-task feature caches.
pub struct VecEnv {
    pub specs: Vec<TaskSpec>,
    pub envs: Vec<EnvState>,
    feats: Vec<[f64; DESCRIPTOR_DIM]>,
    sim: SimParams,
    weights: RewardWeights,
}

impl VecEnv {
    /// `count` environments assigned round-robin over `specs`.
    pub fn new(
        specs: &[TaskSpec],
        count: usize,
        sim: SimParams,
        weights: RewardWeights,
    ) -> Result<VecEnv> {
        if specs.is_empty() {
            return Err(Error::Invalid("VecEnv needs at least one task".into()));
        }
        let mut assigned = Vec::with_capacity(count);
        let mut envs = Vec::with_capacity(count);
        let mut feats = Vec::with_capacity(count);
        for e in 0..count {
            let spec = specs[e % specs.len()].clone();
            let env = EnvState::new(spec.task.clone(), spec.baseline.clone(), sim.clone())?;
            feats.push(env.object_feature());
            envs.push(env);
            assigned.push(spec);
        }
        Ok(VecEnv { specs: assigned, envs, feats, sim, weights })
    }

    fn observe(&self, e: usize) -> Result<Vec<f64>> {
        build_observation(&self.envs[e], &self.feats[e])
    }
}

/// Flat rollout storage in time-major order (`row = t * envs + e`).
pub struct RolloutBatch {
    pub envs: usize,
    pub horizon: usize,
    pub obs: Array2<f64>,
    /// Raw sampled deltas (before the environment's clamps).
    pub actions: Array2<f64>,
    pub logp: Array1<f64>,
    pub values: Array1<f64>,
    pub rewards: Array1<f64>,
    pub dones: Array1<f64>,
    /// Value bootstrap for each env at the end of the slice (0 when done).
    pub bootstrap: Vec<f64>,
    /// Expert absolute targets for supervised rows.
    pub expert: Vec<Option<[f64; HAND_DOF]>>,
    /// `baseline[n] + cum_delta` before this step's delta, per row.
    pub base_plus_cum: Array2<f64>,
}

impl RolloutBatch {
    pub fn rows(&self) -> usize {
        self.envs * self.horizon
    }
}

fn log_prob(action: &[f64], mean: &[f64], log_std: &Array1<f64>) -> f64 {
    let mut lp = -0.5 * (HAND_DOF as f64) * (2.0 * std::f64::consts::PI).ln();
    for j in 0..HAND_DOF {
        let s = log_std[j].exp();
        let z = (action[j] - mean[j]) / s;
        lp += -0.5 * z * z - log_std[j];
    }
    lp
}

/// Collect `horizon` transitions from every environment. Finished episodes
/// reset automatically. With `deterministic` the policy mean is used.
pub fn collect_rollouts(
    policy: &PolicyParams,
    vecenv: &mut VecEnv,
    horizon: usize,
    rng: &mut ChaCha8Rng,
    deterministic: bool,
) -> Result<RolloutBatch> {
    let ne = vecenv.envs.len();
    let rows = ne * horizon;
    let mut obs_mat = Array2::zeros((rows, OBS_DIM));
    let mut act_mat = Array2::zeros((rows, HAND_DOF));
    let mut logp = Array1::zeros(rows);
    let mut values = Array1::zeros(rows);
    let mut rewards = Array1::zeros(rows);
    let mut dones = Array1::zeros(rows);
    let mut expert = vec![None; rows];
    let mut bpc = Array2::zeros((rows, HAND_DOF));

    // Current observations.
    let mut cur_obs = Array2::zeros((ne, OBS_DIM));
    for e in 0..ne {
        let o = vecenv.observe(e)?;
        for (j, v) in o.iter().enumerate() {
            cur_obs[[e, j]] = *v;
        }
    }

    for t in 0..horizon {
        let means = policy.mean_actions(&cur_obs);
        let vals = policy.values(&cur_obs);
        for e in 0..ne {
            let row = t * ne + e;
            let n = vecenv.envs[e].n;

            // Expert target aligned by env timestep.
            if let Some(demo) = &vecenv.specs[e].demo {
                if n < demo.expert_actions.len() {
                    expert[row] = Some(demo.expert_actions[n].0);
                }
            }
            let base = vecenv.envs[e].baseline[n];
            for j in 0..HAND_DOF {
                bpc[[row, j]] = base.0[j] + vecenv.envs[e].cum_delta[j];
            }

            let mut action = [0.0; HAND_DOF];
            for j in 0..HAND_DOF {
                let noise: f64 = if deterministic { 0.0 } else { rng.sample(StandardNormal) };
                action[j] = means[[e, j]] + policy.log_std[j].exp() * noise;
            }
            let mean_row: Vec<f64> = (0..HAND_DOF).map(|j| means[[e, j]]).collect();
            logp[row] = log_prob(&action, &mean_row, &policy.log_std);
            values[row] = vals[e];
            for j in 0..HAND_DOF {
                act_mat[[row, j]] = action[j];
            }
            obs_mat.row_mut(row).assign(&cur_obs.row(e));

            let out = env_step(&mut vecenv.envs[e], &action, &vecenv.feats[e], &vecenv.weights)?;
            rewards[row] = out.reward;
            dones[row] = if out.done { 1.0 } else { 0.0 };
            if out.done {
                vecenv.envs[e].reset();
                let o = vecenv.observe(e)?;
                for (j, v) in o.iter().enumerate() {
                    cur_obs[[e, j]] = *v;
                }
            } else if let Some(o) = out.obs {
                for (j, v) in o.iter().enumerate() {
                    cur_obs[[e, j]] = *v;
                }
            }
        }
    }

    // Bootstrap values for unfinished episodes.
    let boot_vals = policy.values(&cur_obs);
    let mut bootstrap = vec![0.0; ne];
    for e in 0..ne {
        let last_row = (horizon - 1) * ne + e;
        bootstrap[e] = if dones[last_row] > 0.5 { 0.0 } else { boot_vals[e] };
    }

    Ok(RolloutBatch {
        envs: ne,
        horizon,
        obs: obs_mat,
        actions: act_mat,
        logp,
        values,
        rewards,
        dones,
        bootstrap,
        expert,
        base_plus_cum: bpc,
    })
}

/// Standard recursive generalized advantage estimation over a time-major
/// batch. Returns raw (unnormalized) advantages and value targets.
pub fn gae(
    rewards: &Array1<f64>,
    values: &Array1<f64>,
    dones: &Array1<f64>,
    bootstrap: &[f64],
    envs: usize,
    horizon: usize,
    gamma: f64,
    lambda: f64,
) -> (Array1<f64>, Array1<f64>) {
    let rows = envs * horizon;
    let mut adv = Array1::zeros(rows);
    for e in 0..envs {
        let mut last = 0.0;
        for t in (0..horizon).rev() {
            let row = t * envs + e;
            let not_done = 1.0 - dones[row];
            let next_value = if t == horizon - 1 {
                bootstrap[e]
            } else if dones[row] > 0.5 {
                0.0
            } else {
                values[(t + 1) * envs + e]
            };
            let delta = rewards[row] + gamma * next_value * not_done - values[row];
            last = delta + gamma * lambda * not_done * last;
            adv[row] = last;
        }
    }
    let returns = &adv + values;
    (adv, returns)
}

/// Mean Euclidean distance between the policy's implied absolute targets and
/// the expert targets, over supervised rows only. Zero when nothing is
/// supervised.
pub fn il_loss(
    policy: &PolicyParams,
    obs: &Array2<f64>,
    expert: &[Option<[f64; HAND_DOF]>],
    base_plus_cum: &Array2<f64>,
) -> f64 {
    let means = policy.mean_actions(obs);
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, exp) in expert.iter().enumerate() {
        if let Some(target) = exp {
            let mut sq = 0.0;
            for j in 0..HAND_DOF {
                let pred = base_plus_cum[[row, j]] + means[[row, j]];
                sq += (pred - target[j]) * (pred - target[j]);
            }
            total += sq.sqrt();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Per-update optimizer statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub il_loss: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub entropy: f64,
    pub mean_reward: f64,
    pub aborted: bool,
}

/// Rows of a batch used for one gradient evaluation.
pub struct BatchSlice<'a> {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub old_logp: Array1<f64>,
    pub advantages: Array1<f64>,
    pub returns: Array1<f64>,
    pub expert: Vec<Option<[f64; HAND_DOF]>>,
    pub base_plus_cum: Array2<f64>,
    pub _marker: std::marker::PhantomData<&'a ()>,
}

impl BatchSlice<'_> {
    pub fn from_rows(batch: &RolloutBatch, adv: &Array1<f64>, ret: &Array1<f64>, rows: &[usize]) -> Self {
        let take2 = |m: &Array2<f64>| {
            let mut out = Array2::zeros((rows.len(), m.ncols()));
            for (i, &r) in rows.iter().enumerate() {
                out.row_mut(i).assign(&m.row(r));
            }
            out
        };
        let take1 = |v: &Array1<f64>| Array1::from_iter(rows.iter().map(|&r| v[r]));
        BatchSlice {
            obs: take2(&batch.obs),
            actions: take2(&batch.actions),
            old_logp: take1(&batch.logp),
            advantages: take1(adv),
            returns: take1(ret),
            expert: rows.iter().map(|&r| batch.expert[r]).collect(),
            base_plus_cum: take2(&batch.base_plus_cum),
            _marker: std::marker::PhantomData,
        }
    }
}

/// Loss components for one gradient evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub il: f64,
    pub entropy: f64,
    pub kl: f64,
    pub clip_frac: f64,
}

/// Total PPO+IL loss and its exact gradient with respect to the flat
/// parameter vector (actor, log_std, critic).
pub fn loss_and_grad(policy: &PolicyParams, slice: &BatchSlice, cfg: &PpoConfig) -> (LossParts, Vec<f64>) {
    let m = slice.obs.nrows();
    let mf = m as f64;
    let (means, actor_cache) = policy.actor.forward_cached(&slice.obs);
    let (vals2, critic_cache) = policy.critic.forward_cached(&slice.obs);

    // New log-probs, ratios, surrogate.
    let mut logp_new = Array1::zeros(m);
    for r in 0..m {
        let mut lp = -0.5 * (HAND_DOF as f64) * (2.0 * std::f64::consts::PI).ln();
        for j in 0..HAND_DOF {
            let s = policy.log_std[j].exp();
            let z = (slice.actions[[r, j]] - means[[r, j]]) / s;
            lp += -0.5 * z * z - policy.log_std[j];
        }
        logp_new[r] = lp;
    }

    let mut policy_loss = 0.0;
    let mut kl = 0.0;
    let mut clip_count = 0usize;
    // d(policy_loss)/d(logp_new) per row.
    let mut dl_dlogp = Array1::<f64>::zeros(m);
    for r in 0..m {
        let ratio = (logp_new[r] - slice.old_logp[r]).exp();
        let a = slice.advantages[r];
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        let surr1 = ratio * a;
        let surr2 = clipped * a;
        policy_loss += -surr1.min(surr2) / mf;
        kl += (slice.old_logp[r] - logp_new[r]) / mf;
        if (ratio - 1.0).abs() > cfg.clip {
            clip_count += 1;
        }
        // Gradient through the chosen branch of the min.
        let through = if surr1 <= surr2 {
            a * ratio
        } else if (1.0 - cfg.clip..=1.0 + cfg.clip).contains(&ratio) {
            a * ratio
        } else {
            0.0
        };
        dl_dlogp[r] = -through / mf;
    }

    // Value loss.
    let mut value_loss = 0.0;
    let mut dl_dv = Array2::<f64>::zeros((m, 1));
    for r in 0..m {
        let err = vals2[[r, 0]] - slice.returns[r];
        value_loss += err * err / mf;
        dl_dv[[r, 0]] = cfg.value_coef * 2.0 * err / mf;
    }

    // Entropy (diagonal Gaussian): depends only on log_std.
    let entropy: f64 = policy
        .log_std
        .iter()
        .map(|ls| ls + 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln()))
        .sum();

    // Gradient wrt actor means and log_std.
    let mut dl_dmean = Array2::<f64>::zeros((m, HAND_DOF));
    let mut dl_dlogstd = vec![0.0; HAND_DOF];
    for r in 0..m {
        for j in 0..HAND_DOF {
            let s = policy.log_std[j].exp();
            let z = (slice.actions[[r, j]] - means[[r, j]]) / s;
            // dlogp/dmean = z / s ; dlogp/dlogstd = z^2 - 1.
            dl_dmean[[r, j]] += dl_dlogp[r] * z / s;
            dl_dlogstd[j] += dl_dlogp[r] * (z * z - 1.0);
        }
    }
    for v in dl_dlogstd.iter_mut() {
        *v -= cfg.entropy_coef; // d(-coef * entropy)/d(log_std) = -coef
    }

    // Imitation loss over supervised rows.
    let sup_count = slice.expert.iter().filter(|e| e.is_some()).count();
    let mut il = 0.0;
    if sup_count > 0 {
        let sf = sup_count as f64;
        for (r, exp) in slice.expert.iter().enumerate() {
            if let Some(target) = exp {
                let mut diff = [0.0; HAND_DOF];
                let mut sq = 0.0;
                for j in 0..HAND_DOF {
                    diff[j] = slice.base_plus_cum[[r, j]] + means[[r, j]] - target[j];
                    sq += diff[j] * diff[j];
                }
                let norm = sq.sqrt();
                il += norm / sf;
                if norm > 1e-12 {
                    for j in 0..HAND_DOF {
                        dl_dmean[[r, j]] += cfg.il_coef * diff[j] / (norm * sf);
                    }
                }
            }
        }
    }

    let total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
        + cfg.il_coef * il;

    let (actor_grads, _) = policy.actor.backward(&actor_cache, &dl_dmean);
    let (critic_grads, _) = policy.critic.backward(&critic_cache, &dl_dv);

    let mut flat = Vec::with_capacity(policy.param_count());
    flatten_grads_into(&actor_grads, &mut flat);
    flat.extend(dl_dlogstd.iter());
    flatten_grads_into(&critic_grads, &mut flat);

    (
        LossParts {
            total,
            policy: policy_loss,
            value: value_loss,
            il,
            entropy,
            kl,
            clip_frac: clip_count as f64 / mf,
        },
        flat,
    )
}

/// One PPO update over a collected batch: `epochs` passes over shuffled
/// minibatches. A non-finite loss aborts the update and keeps the old
/// parameters.
pub fn ppo_update(
    policy: &mut PolicyParams,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    let rows = batch.rows();
    let (raw_adv, returns) = gae(
        &batch.rewards,
        &batch.values,
        &batch.dones,
        &batch.bootstrap,
        batch.envs,
        batch.horizon,
        cfg.gamma,
        cfg.gae_lambda,
    );
    // Normalize advantages once per update.
    let mean = raw_adv.mean().unwrap_or(0.0);
    let std = raw_adv.std(0.0);
    let adv = raw_adv.mapv(|a| (a - mean) / (std + 1e-8));

    let snapshot = policy.to_flat();
    let mut indices: Vec<usize> = (0..rows).collect();
    let mb = rows.div_ceil(cfg.minibatches);

    for _ in 0..cfg.epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(mb) {
            let slice = BatchSlice::from_rows(batch, &adv, &returns, chunk);
            let (parts, mut grad) = loss_and_grad(policy, &slice, cfg);
            if !parts.total.is_finite() {
                let mut flat = snapshot;
                policy.load_flat(&flat)?;
                flat.clear();
                return Ok(UpdateStats {
                    policy_loss: f64::NAN,
                    value_loss: f64::NAN,
                    il_loss: f64::NAN,
                    kl: f64::NAN,
                    clip_frac: 0.0,
                    entropy: 0.0,
                    mean_reward: batch.rewards.mean().unwrap_or(0.0),
                    aborted: true,
                });
            }
            clip_grad_norm(&mut grad, cfg.max_grad_norm);
            let mut flat = policy.to_flat();
            adam.step(&mut flat, &grad);
            policy.load_flat(&flat)?;
            for v in policy.log_std.iter_mut() {
                *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
            }
        }
    }

    // Post-update statistics on the full batch.
    let all: Vec<usize> = (0..rows).collect();
    let slice = BatchSlice::from_rows(batch, &adv, &returns, &all);
    let (parts, _) = loss_and_grad(policy, &slice, cfg);
    Ok(UpdateStats {
        policy_loss: parts.policy,
        value_loss: parts.value,
        il_loss: parts.il,
        kl: parts.kl,
        clip_frac: parts.clip_frac,
        entropy: parts.entropy,
        mean_reward: batch.rewards.mean().unwrap_or(0.0),
        aborted: false,
    })
}

/// Deterministic (mean-action) rollout of a policy on one task, recorded as a
/// demonstration. Early-terminated episodes are padded with frozen residuals,
/// repeated last state, and zero rewards.
pub fn rollout_deterministic(
    policy: &PolicyParams,
    task: &Arc<TrackingTask>,
    baseline: &Arc<Vec<HandDof>>,
    sim: &SimParams,
    weights: &RewardWeights,
) -> Result<Demonstration> {
    let n = task.horizon();
    let mut env = EnvState::new(task.clone(), baseline.clone(), sim.clone())?;
    let feat = env.object_feature();
    let mut achieved = Vec::with_capacity(n + 1);
    let mut actions = Vec::with_capacity(n);
    let mut deltas = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    achieved.push(env.sim.q);
    let mut cum_prev = [0.0; HAND_DOF];

    let mut obs = build_observation(&env, &feat)?;
    while !env.done {
        let obs_mat = Array2::from_shape_vec((1, OBS_DIM), obs.clone())
            .map_err(|e| Error::Numeric(e.to_string()))?;
        let means = policy.mean_actions(&obs_mat);
        let mut action = [0.0; HAND_DOF];
        for j in 0..HAND_DOF {
            action[j] = means[[0, j]];
        }
        let out = env_step(&mut env, &action, &feat, weights)?;
        let mut delta = [0.0; HAND_DOF];
        for j in 0..HAND_DOF {
            delta[j] = env.cum_delta[j] - cum_prev[j];
        }
        cum_prev = env.cum_delta;
        achieved.push(env.sim.q);
        actions.push(out.target);
        deltas.push(delta);
        rewards.push(out.reward);
        if let Some(o) = out.obs {
            obs = o;
        }
    }

    // Pad early-terminated episodes to the task length.
    while actions.len() < n {
        let frame = actions.len();
        actions.push(env.baseline[frame].add(&cum_prev));
        deltas.push([0.0; HAND_DOF]);
        achieved.push(*achieved.last().unwrap());
        rewards.push(0.0);
    }

    let episode_reward = rewards.iter().sum();
    let demo = Demonstration {
        task_id: task.id.clone(),
        baseline: baseline.as_ref().clone(),
        expert_actions: actions,
        expert_deltas: deltas,
        achieved,
        rewards,
        episode_reward,
    };
    debug_assert!(demo.check_consistency(1e-9).is_ok());
    Ok(demo)
}

/// A checkpoint evaluation entry in the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub update: u64,
    pub median_tracking_error: f64,
}

/// Full training record; identical across reruns with the same seed in
/// serial mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingLog {
    pub updates: Vec<UpdateStats>,
    pub evals: Vec<EvalPoint>,
    pub best_update: u64,
    pub env_steps: u64,
}

pub struct TrainOutput {
    pub params: PolicyParams,
    pub log: TrainingLog,
}

/// Train a residual policy on the given task specs for `budget_steps`
/// environment steps. Returns the best checkpoint by median tracking error
/// over the evaluation subset (capped at 12 tasks).
pub fn train(
    specs: &[TaskSpec],
    cfg: &PpoConfig,
    n_envs: usize,
    budget_steps: u64,
    seed: u64,
    sim: &SimParams,
    weights: &RewardWeights,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut policy = PolicyParams::init(derive_seed(seed, "policy_init", 0));
    let mut log = TrainingLog::default();
    if budget_steps == 0 {
        return Ok(TrainOutput { params: policy, log });
    }

    let mut vecenv = VecEnv::new(specs, n_envs, sim.clone(), weights.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "train_loop", 0));
    let mut adam = Adam::new(cfg.lr, policy.param_count());

    // Deduplicated eval subset.
    let mut eval_specs: Vec<TaskSpec> = Vec::new();
    {
        let mut seen = BTreeMap::new();
        for s in specs {
            seen.entry(s.task.id.clone()).or_insert_with(|| s.clone());
        }
        eval_specs.extend(seen.into_values().take(12));
    }

    let batch_steps = (n_envs * cfg.horizon) as u64;
    let n_updates = (budget_steps / batch_steps).max(1);
    let mut best = (f64::INFINITY, policy.to_flat(), 0u64);

    let mut evaluate = |policy: &PolicyParams, update: u64, log: &mut TrainingLog| -> Result<f64> {
        let errs = crate::par::map_indexed(&eval_specs, |_, s| {
            rollout_deterministic(policy, &s.task, &s.baseline, sim, weights).map(|demo| {
                evalkit::tracking_error(
                    &demo.achieved,
                    &s.task.ref_states,
                    &evalkit::MetricWeights::default(),
                )
            })
        });
        let mut vals = Vec::with_capacity(errs.len());
        for e in errs {
            vals.push(e??);
        }
        let med = crate::util::median(&vals);
        log.evals.push(EvalPoint { update, median_tracking_error: med });
        Ok(med)
    };

    for update in 1..=n_updates {
        let batch = collect_rollouts(&policy, &mut vecenv, cfg.horizon, &mut rng, false)?;
        let stats = ppo_update(&mut policy, &batch, cfg, &mut adam, &mut rng)?;
        log.updates.push(stats);
        log.env_steps += batch_steps;

        if update % EVAL_EVERY_UPDATES == 0 || update == n_updates {
            let med = evaluate(&policy, update, &mut log)?;
            if med < best.0 {
                best = (med, policy.to_flat(), update);
            }
        }
    }

    policy.load_flat(&best.1)?;
    log.best_update = best.2;
    Ok(TrainOutput { params: policy, log })
}

/// Train the generalizable tracking controller: uniform task assignment with
/// kinematic baselines; tasks with curated demonstrations receive expert
/// action supervision.
pub fn train_controller(
    tasks: &[Arc<TrackingTask>],
    demos: &BTreeMap<String, Arc<Demonstration>>,
    cfg: &PpoConfig,
    budget_steps: u64,
    seed: u64,
    sim: &SimParams,
    weights: &RewardWeights,
) -> Result<TrainOutput> {
    if tasks.is_empty() {
        return Err(Error::Invalid("train_controller needs a non-empty task set".into()));
    }
    let specs: Vec<TaskSpec> = tasks
        .iter()
        .map(|t| {
            let mut spec = TaskSpec::kinematic(t.clone());
            spec.demo = demos.get(&t.id).cloned();
            spec
        })
        .collect();
    train(&specs, cfg, cfg.envs, budget_steps, seed, sim, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_task, FamilyKind, MotionFamily};
    use crate::types::ObjectGeometry;
    use approx::assert_abs_diff_eq;

    fn tiny_cfg() -> PpoConfig {
        PpoConfig { envs: 4, envs_per_traj: 4, horizon: 8, ..PpoConfig::default() }
    }

    fn slide_task() -> Arc<TrackingTask> {
        let fam = MotionFamily { kind: FamilyKind::Slide, amplitude: 0.15, duration_frames: 60 };
        let geo = ObjectGeometry::rectangle(0.06, 0.06, 0.4).unwrap();
        Arc::new(gen_task(&fam, &geo, 11, &SimParams::default()).unwrap())
    }

    #[test]
    fn gae_limiting_case_matches_reward_to_go() {
        // gamma = 1, lambda = 1, no dones: advantage = sum(future r) - value.
        let rewards = Array1::from(vec![1.0, 2.0, 3.0]);
        let values = Array1::from(vec![0.5, 0.5, 0.5]);
        let dones = Array1::from(vec![0.0, 0.0, 0.0]);
        let (adv, ret) = gae(&rewards, &values, &dones, &[0.0], 1, 3, 1.0, 1.0);
        assert_abs_diff_eq!(adv[0], 6.0 - 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(adv[1], 5.0 - 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(adv[2], 3.0 - 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ret[0], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn gae_zero_case() {
        let zeros = Array1::from(vec![0.0; 4]);
        let (adv, _) = gae(&zeros, &zeros, &zeros, &[0.0, 0.0], 2, 2, 0.99, 0.95);
        assert!(adv.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn gae_hand_recursion_oracle() {
        // Length-3, gamma = lambda = 0.5, manual recursion.
        let rewards = Array1::from(vec![1.0, 0.0, 2.0]);
        let values = Array1::from(vec![0.2, 0.4, 0.6]);
        let dones = Array1::from(vec![0.0, 0.0, 0.0]);
        let bootstrap = [1.0];
        let g = 0.5;
        let l = 0.5;
        let d2 = 2.0 + g * 1.0 - 0.6;
        let d1 = 0.0 + g * 0.6 - 0.4;
        let d0 = 1.0 + g * 0.4 - 0.2;
        let a2 = d2;
        let a1 = d1 + g * l * a2;
        let a0 = d0 + g * l * a1;
        let (adv, _) = gae(&rewards, &values, &dones, &bootstrap, 1, 3, g, l);
        assert_abs_diff_eq!(adv[2], a2, epsilon = 1e-12);
        assert_abs_diff_eq!(adv[1], a1, epsilon = 1e-12);
        assert_abs_diff_eq!(adv[0], a0, epsilon = 1e-12);
    }

    #[test]
    fn collect_shapes_and_determinism() {
        let task = slide_task();
        let spec = TaskSpec::kinematic(task);
        let sim = SimParams::default();
        let w = RewardWeights::default();
        let policy = PolicyParams::init(3);

        let mut v1 = VecEnv::new(&[spec.clone()], 4, sim.clone(), w.clone()).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let b1 = collect_rollouts(&policy, &mut v1, 32, &mut r1, false).unwrap();
        assert_eq!(b1.rows(), 128);

        let mut v2 = VecEnv::new(&[spec], 4, sim, w).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let b2 = collect_rollouts(&policy, &mut v2, 32, &mut r2, false).unwrap();
        assert_eq!(b1.obs, b2.obs);
        assert_eq!(b1.actions, b2.actions);
        assert_eq!(b1.rewards, b2.rewards);
    }

    #[test]
    fn env_terminating_resets_with_done_mask() {
        // A 40-frame task with a horizon longer than the episode: done mask
        // must appear and the env must keep stepping after auto-reset.
        let fam = MotionFamily { kind: FamilyKind::Slide, amplitude: 0.1, duration_frames: 40 };
        let geo = ObjectGeometry::rectangle(0.06, 0.06, 0.4).unwrap();
        let task = Arc::new(gen_task(&fam, &geo, 1, &SimParams::default()).unwrap());
        let spec = TaskSpec::kinematic(task);
        let policy = PolicyParams::init(3);
        let mut venv = VecEnv::new(&[spec], 1, SimParams::default(), RewardWeights::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = collect_rollouts(&policy, &mut venv, 50, &mut rng, true).unwrap();
        let dones: Vec<usize> =
            (0..50).filter(|t| batch.dones[t * 1] > 0.5).collect();
        assert_eq!(dones, vec![38], "done at episode end (39 transitions, first at t index 38)");
    }

    #[test]
    fn il_loss_identity_offset_and_empty() {
        let task = slide_task();
        let spec = TaskSpec::kinematic(task);
        let policy = PolicyParams::init(3);
        let mut venv = VecEnv::new(&[spec], 2, SimParams::default(), RewardWeights::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = collect_rollouts(&policy, &mut venv, 4, &mut rng, true).unwrap();

        // No supervised rows: zero.
        assert_eq!(il_loss(&policy, &batch.obs, &batch.expert, &batch.base_plus_cum), 0.0);

        // Expert exactly equal to the implied targets: zero loss.
        let means = policy.mean_actions(&batch.obs);
        let mut expert: Vec<Option<[f64; HAND_DOF]>> = Vec::new();
        for r in 0..batch.rows() {
            let mut t = [0.0; HAND_DOF];
            for j in 0..HAND_DOF {
                t[j] = batch.base_plus_cum[[r, j]] + means[[r, j]];
            }
            expert.push(Some(t));
        }
        let l = il_loss(&policy, &batch.obs, &expert, &batch.base_plus_cum);
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-12);

        // Constant 0.1 offset on one component: loss exactly 0.1.
        for e in expert.iter_mut() {
            if let Some(t) = e {
                t[2] += 0.1;
            }
        }
        let l = il_loss(&policy, &batch.obs, &expert, &batch.base_plus_cum);
        assert_abs_diff_eq!(l, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn zero_advantage_leaves_actor_unchanged() {
        let task = slide_task();
        let spec = TaskSpec::kinematic(task);
        let mut policy = PolicyParams::init(3);
        let cfg = PpoConfig { il_coef: 0.0, entropy_coef: 0.0, ..tiny_cfg() };
        let mut venv = VecEnv::new(&[spec], 4, SimParams::default(), RewardWeights::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut batch = collect_rollouts(&policy, &mut venv, 8, &mut rng, false).unwrap();
        // Force zero advantages: constant rewards equal to values' implied target.
        batch.rewards.fill(0.0);
        batch.values.fill(0.0);
        batch.bootstrap = vec![0.0; 4];
        batch.dones.fill(1.0); // every step terminal: deltas are all zero

        let before_actor = policy.actor.clone();
        let before_logstd = policy.log_std.clone();
        let mut adam = Adam::new(cfg.lr, policy.param_count());
        ppo_update(&mut policy, &batch, &cfg, &mut adam, &mut rng).unwrap();
        let mut a = Vec::new();
        policy.actor.flatten_into(&mut a);
        let mut b = Vec::new();
        before_actor.flatten_into(&mut b);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        for (x, y) in policy.log_std.iter().zip(before_logstd.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn il_loss_decreases_under_training() {
        let task = slide_task();
        let mut spec = TaskSpec::kinematic(task.clone());
        // Synthetic "expert": kinematic baseline plus a small constant offset.
        let demo_actions: Vec<HandDof> = (0..task.horizon())
            .map(|n| spec.baseline[n].add(&[0.02, -0.01, 0.0, 0.03, 0.0, -0.02, 0.01]))
            .collect();
        let demo = Demonstration {
            task_id: task.id.clone(),
            baseline: spec.baseline.as_ref().clone(),
            expert_actions: demo_actions,
            expert_deltas: vec![[0.0; HAND_DOF]; task.horizon()],
            achieved: task.ref_states.clone(),
            rewards: vec![0.0; task.horizon()],
            episode_reward: 0.0,
        };
        spec.demo = Some(Arc::new(demo));

        let cfg = PpoConfig { il_coef: 10.0, ..tiny_cfg() };
        let mut policy = PolicyParams::init(3);
        let mut venv = VecEnv::new(&[spec], 4, SimParams::default(), RewardWeights::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut adam = Adam::new(cfg.lr, policy.param_count());

        let batch = collect_rollouts(&policy, &mut venv, 8, &mut rng, false).unwrap();
        let start = il_loss(&policy, &batch.obs, &batch.expert, &batch.base_plus_cum);
        let mut last = start;
        for _ in 0..5 {
            ppo_update(&mut policy, &batch, &cfg, &mut adam, &mut rng).unwrap();
            let cur = il_loss(&policy, &batch.obs, &batch.expert, &batch.base_plus_cum);
            assert!(cur <= last + 1e-6, "il loss increased: {last} -> {cur}");
            last = cur;
        }
        assert!(last < start, "no progress: {start} -> {last}");
    }

    #[test]
    fn budget_zero_returns_init() {
        let task = slide_task();
        let spec = TaskSpec::kinematic(task);
        let out = train(
            &[spec],
            &tiny_cfg(),
            4,
            0,
            9,
            &SimParams::default(),
            &RewardWeights::default(),
        )
        .unwrap();
        assert_eq!(out.params, PolicyParams::init(derive_seed(9, "policy_init", 0)));
        assert!(out.log.updates.is_empty());
    }

    #[test]
    fn training_log_deterministic() {
        let task = slide_task();
        let spec = TaskSpec::kinematic(task);
        let cfg = tiny_cfg();
        let sim = SimParams::default();
        let w = RewardWeights::default();
        let a = train(&[spec.clone()], &cfg, 4, 64, 9, &sim, &w).unwrap();
        let b = train(&[spec], &cfg, 4, 64, 9, &sim, &w).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn checkpoint_flat_round_trip() {
        let policy = PolicyParams::init(4);
        let flat = policy.to_flat();
        let mut other = PolicyParams::init(5);
        other.load_flat(&flat).unwrap();
        assert_eq!(policy, other);
        assert!(other.load_flat(&flat[1..]).is_err());
    }
}
