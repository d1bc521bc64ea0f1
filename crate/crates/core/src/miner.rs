//! Demonstration mining: per-trajectory RL trackers, tracking-prior transfer,
//! the homotopy optimization scheme, brute-force effective-parent search, and
//! demo curation.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::RewardWeights;
use crate::error::{Error, Result};
use crate::evalkit::{self, MetricWeights};
use crate::io;
use crate::learner::{self, PolicyParams, PpoConfig, TaskSpec};
use crate::par;
use crate::sim::SimParams;
use crate::types::{Demonstration, HandDof, TrackingTask};
use crate::util::{derive_seed, resample_hand_sequence};

/// Everything a mining run needs besides tasks and budgets.
#[derive(Debug, Clone)]
pub struct MineContext {
    pub cfg: PpoConfig,
    pub sim: SimParams,
    pub weights: RewardWeights,
    pub metric: MetricWeights,
}

impl MineContext {
    pub fn new(cfg: PpoConfig, sim: SimParams, weights: RewardWeights) -> Self {
        MineContext { cfg, sim, weights, metric: MetricWeights::default() }
    }
}

/// Outcome of tracking one task with one baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackResult {
    pub task_id: String,
    pub baseline_used: Vec<HandDof>,
    pub policy: PolicyParams,
    pub rollout: Demonstration,
    pub error: f64,
}

/// An ordered task chain (hardest-ancestor first, target task last) with
/// per-hop tracking errors and effectiveness flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomotopyPath {
    /// Task ids ordered (T_K, ..., T_0).
    pub chain: Vec<String>,
    pub per_hop_error: Vec<f64>,
    /// `effective[i]` says hop i improved `chain[i+1]` over its direct result.
    /// Empty until verified.
    pub effective: Vec<bool>,
}

/// Kinematic baseline of a task (its hand reference states).
pub fn kinematic_baseline(task: &TrackingTask) -> Vec<HandDof> {
    task.hand_refs().copied().collect()
}

/// Baseline derived from a tracking rollout: the absolute position-target
/// sequence, resampled onto `frames` entries (targets are what a baseline is
/// consumed as).
pub fn baseline_from_rollout(rollout: &Demonstration, frames: usize) -> Vec<HandDof> {
    let mut targets = rollout.expert_actions.clone();
    if targets.is_empty() {
        targets.push(rollout.baseline[0]);
    }
    resample_hand_sequence(&targets, frames)
}

/// Train a residual policy on one task with the given baseline (pure RL,
/// no action supervision), then roll out the best checkpoint.
pub fn track_single(
    task: &Arc<TrackingTask>,
    baseline: Vec<HandDof>,
    budget_steps: u64,
    seed: u64,
    ctx: &MineContext,
) -> Result<TrackResult> {
    if baseline.len() != task.ref_states.len() {
        return Err(Error::Invalid(format!(
            "baseline length {} != task frames {} for {}",
            baseline.len(),
            task.ref_states.len(),
            task.id
        )));
    }
    let baseline = Arc::new(baseline);
    let spec = TaskSpec { task: task.clone(), baseline: baseline.clone(), demo: None };
    let cfg = PpoConfig { il_coef: 0.0, ..ctx.cfg.clone() };
    let out = learner::train(
        &[spec],
        &cfg,
        cfg.envs_per_traj,
        budget_steps,
        seed,
        &ctx.sim,
        &ctx.weights,
    )?;
    let rollout = learner::rollout_deterministic(&out.params, task, &baseline, &ctx.sim, &ctx.weights)?;
    let error = evalkit::tracking_error(&rollout.achieved, &task.ref_states, &ctx.metric)?;
    Ok(TrackResult {
        task_id: task.id.clone(),
        baseline_used: baseline.as_ref().clone(),
        policy: out.params,
        rollout,
        error,
    })
}

/// Transfer the tracking prior: roll out the generalizable controller, adopt
/// its target sequence as the baseline, and re-optimize a residual policy.
pub fn transfer_prior(
    task: &Arc<TrackingTask>,
    controller: &PolicyParams,
    budget_steps: u64,
    seed: u64,
    ctx: &MineContext,
) -> Result<TrackResult> {
    let kin = Arc::new(kinematic_baseline(task));
    let prior_rollout = learner::rollout_deterministic(controller, task, &kin, &ctx.sim, &ctx.weights)?;
    let baseline = baseline_from_rollout(&prior_rollout, task.ref_states.len());
    track_single(task, baseline, budget_steps, seed, ctx)
}

/// Solve an ordered homotopy path (T_K, ..., T_0): the first task is tracked
/// from its own kinematic baseline, each later task from the previous hop's
/// rollout targets. Effectiveness of each hop is judged against the task's
/// direct result (taken from `known_direct` or computed with the same
/// budget). Returns the final task's result and the verified path.
pub fn solve_homotopy_path(
    path_tasks: &[Arc<TrackingTask>],
    budget_per_hop: u64,
    seed: u64,
    k_max: usize,
    known_direct: &BTreeMap<String, f64>,
    ctx: &MineContext,
) -> Result<(TrackResult, HomotopyPath)> {
    if path_tasks.is_empty() {
        return Err(Error::Invalid("homotopy path must be non-empty".into()));
    }
    if path_tasks.len() > k_max + 1 {
        return Err(Error::Invalid(format!(
            "homotopy path length {} exceeds K_max + 1 = {}",
            path_tasks.len(),
            k_max + 1
        )));
    }

    let mut chain = Vec::with_capacity(path_tasks.len());
    let mut per_hop_error = Vec::with_capacity(path_tasks.len());
    let mut effective = Vec::new();

    let first = &path_tasks[0];
    let mut result = track_single(
        first,
        kinematic_baseline(first),
        budget_per_hop,
        derive_seed(seed, "hop", 0),
        ctx,
    )?;
    chain.push(first.id.clone());
    per_hop_error.push(result.error);

    for (i, task) in path_tasks.iter().enumerate().skip(1) {
        let baseline = baseline_from_rollout(&result.rollout, task.ref_states.len());
        let hopped = track_single(task, baseline, budget_per_hop, derive_seed(seed, "hop", i as u64), ctx)?;
        let direct = match known_direct.get(&task.id) {
            Some(e) => *e,
            None => {
                track_single(
                    task,
                    kinematic_baseline(task),
                    budget_per_hop,
                    derive_seed(seed, "direct", i as u64),
                    ctx,
                )?
                .error
            }
        };
        effective.push(hopped.error < direct);
        per_hop_error.push(hopped.error);
        chain.push(task.id.clone());
        result = hopped;
    }

    Ok((result, HomotopyPath { chain, per_hop_error, effective }))
}

/// Result of the brute-force parent search.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MiningOutcome {
    /// All effective parents found per task.
    pub parents: BTreeMap<String, Vec<String>>,
    /// The parent behind each task's current best result.
    pub best_parent: BTreeMap<String, String>,
    /// (child, parent) pairs for generator training.
    pub pairs: Vec<(String, String)>,
    /// Paths recovered by backtracing best parents.
    pub paths: Vec<HomotopyPath>,
}

/// Brute-force effective-parent search: for each task, re-track it with each
/// of its `k_nei` nearest neighbors' rollout targets as the baseline, for
/// `k_max` rounds, committing strict improvements between rounds.
///
/// `results` must hold a baseline [`TrackResult`] for every task and is
/// updated in place with improvements.
pub fn mine_parents(
    tasks: &[Arc<TrackingTask>],
    results: &mut BTreeMap<String, TrackResult>,
    k_nei: usize,
    k_max: usize,
    budget_steps: u64,
    seed: u64,
    ctx: &MineContext,
) -> Result<MiningOutcome> {
    for t in tasks {
        if !results.contains_key(&t.id) {
            return Err(Error::Invalid(format!("mine_parents: no baseline result for {}", t.id)));
        }
    }
    let mut outcome = MiningOutcome::default();
    if tasks.len() < 2 {
        return Ok(outcome);
    }

    // Static neighbor lists from kinematic trajectory similarity.
    let mut neighbors: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for t in tasks {
        let mut dists: Vec<(f64, &str)> = tasks
            .iter()
            .filter(|o| o.id != t.id)
            .map(|o| (evalkit::task_diff(t, o, &ctx.metric), o.id.as_str()))
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
        neighbors.insert(t.id.clone(), dists.iter().take(k_nei).map(|(_, id)| id.to_string()).collect());
    }
    let task_by_id: BTreeMap<&str, &Arc<TrackingTask>> =
        tasks.iter().map(|t| (t.id.as_str(), t)).collect();

    for round in 1..=k_max {
        let snapshot: BTreeMap<String, (Vec<HandDof>, f64)> = results
            .iter()
            .map(|(id, r)| {
                let frames = task_by_id[id.as_str()].ref_states.len();
                (id.clone(), (baseline_from_rollout(&r.rollout, frames), r.error))
            })
            .collect();

        // Independent (child, parent) re-tracks against the round snapshot.
        let jobs: Vec<(String, String)> = tasks
            .iter()
            .flat_map(|t| {
                neighbors[&t.id].iter().map(move |p| (t.id.clone(), p.clone()))
            })
            .collect();
        let retracks = par::map_indexed(&jobs, |_, (child_id, parent_id)| {
            let child = task_by_id[child_id.as_str()];
            // The parent's snapshot baseline is already sized for the parent;
            // resize for the child.
            let parent_baseline = &snapshot[parent_id].0;
            let baseline = resample_hand_sequence(parent_baseline, child.ref_states.len());
            let job_seed = derive_seed(seed, &format!("mine:{child_id}:{parent_id}"), round as u64);
            track_single(child, baseline, budget_steps, job_seed, ctx)
        });

        // Single-writer commit against round-start errors.
        let mut best_candidate: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (j, res) in retracks.iter().enumerate() {
            let res = match res {
                Ok(r) => r,
                Err(e) => return Err(Error::Data(format!("mining re-track failed: {e}"))),
            };
            let (child_id, parent_id) = &jobs[j];
            let round_start_error = snapshot[child_id].1;
            if res.error < round_start_error {
                outcome
                    .parents
                    .entry(child_id.clone())
                    .or_default()
                    .push(parent_id.clone());
                let entry = best_candidate.entry(child_id.clone()).or_insert((f64::INFINITY, j));
                if res.error < entry.0 {
                    *entry = (res.error, j);
                }
            }
        }
        for (child_id, (err, j)) in best_candidate {
            let res = retracks[j].as_ref().unwrap().clone();
            let parent_id = jobs[j].1.clone();
            if err < results[&child_id].error {
                results.insert(child_id.clone(), res);
                outcome.best_parent.insert(child_id, parent_id);
            }
        }
    }

    // Deduplicate parent lists, build pairs, and backtrace paths.
    for (child, list) in outcome.parents.iter_mut() {
        list.sort();
        list.dedup();
        for p in list.iter() {
            outcome.pairs.push((child.clone(), p.clone()));
        }
    }
    for t in tasks {
        if !outcome.best_parent.contains_key(&t.id) {
            continue;
        }
        let mut chain = vec![t.id.clone()];
        let mut cur = t.id.clone();
        while chain.len() < k_max + 1 {
            match outcome.best_parent.get(&cur) {
                Some(p) if !chain.contains(p) => {
                    chain.push(p.clone());
                    cur = p.clone();
                }
                _ => break,
            }
        }
        chain.reverse();
        let per_hop_error = chain.iter().map(|id| results[id].error).collect();
        let effective = vec![true; chain.len() - 1];
        outcome.paths.push(HomotopyPath { chain, per_hop_error, effective });
    }
    Ok(outcome)
}

/// One curated demonstration with its provenance metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoEntry {
    pub demo: Arc<Demonstration>,
    pub error: f64,
    pub episode_reward: f64,
}

/// Best-per-task demonstration store (JSON-lines files plus an index).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DemoStore {
    pub entries: BTreeMap<String, DemoEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    error: f64,
    episode_reward: f64,
}

impl DemoStore {
    /// Admit a result when its episode reward clears `threshold` and it beats
    /// the stored error for its task. Stored errors never increase.
    pub fn admit(&mut self, result: &TrackResult, threshold: f64) -> bool {
        if result.rollout.episode_reward <= threshold {
            return false;
        }
        let better = self
            .entries
            .get(&result.task_id)
            .map(|e| result.error < e.error)
            .unwrap_or(true);
        if better {
            self.entries.insert(
                result.task_id.clone(),
                DemoEntry {
                    demo: Arc::new(result.rollout.clone()),
                    error: result.error,
                    episode_reward: result.rollout.episode_reward,
                },
            );
        }
        better
    }

    pub fn demos_by_task(&self) -> BTreeMap<String, Arc<Demonstration>> {
        self.entries.iter().map(|(k, v)| (k.clone(), v.demo.clone())).collect()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = BTreeMap::new();
        for (task_id, entry) in &self.entries {
            let file = format!("{task_id}.jsonl");
            io::write_jsonl(&dir.join(&file), std::slice::from_ref(entry.demo.as_ref()))?;
            index.insert(
                task_id.clone(),
                IndexEntry { file, error: entry.error, episode_reward: entry.episode_reward },
            );
        }
        io::write_json(&dir.join("index.json"), &index)
    }

    pub fn load_dir(dir: &Path) -> Result<DemoStore> {
        let index: BTreeMap<String, IndexEntry> = io::read_json(&dir.join("index.json"))?;
        let mut entries = BTreeMap::new();
        for (task_id, ie) in index {
            let demos: Vec<Demonstration> = io::read_jsonl(&dir.join(&ie.file))?;
            let demo = demos
                .into_iter()
                .next()
                .ok_or_else(|| Error::Data(format!("empty demo file for {task_id}")))?;
            demo.check_consistency(1e-9)?;
            entries.insert(
                task_id,
                DemoEntry { demo: Arc::new(demo), error: ie.error, episode_reward: ie.episode_reward },
            );
        }
        Ok(DemoStore { entries })
    }
}

/// Keep, per task, the single best-error result whose episode reward clears
/// the threshold.
pub fn curate_demos<'a>(results: impl IntoIterator<Item = &'a TrackResult>, threshold: f64) -> DemoStore {
    let mut store = DemoStore::default();
    for r in results {
        store.admit(r, threshold);
    }
    store
}
