//! Adversarial imitation: a discriminator scores state-action pairs and
//! its log-output rewards a PPO-trained actor-critic.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use gazeirl_numerics::{sigmoid, Gradients, NdArray, OptimState, ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{clamp_score, greedy_action, mask_bias, sample_action, ActionMode, Discriminator, PolicyNet};
use crate::dataset::{box_contains, BoxPx, ExpertPair, MAX_STEPS};
use crate::error::{GazeError, Result};
use crate::raster::RgbImage;
use crate::rng::{indexed_seed, substream_seed};
use crate::search_env::{Extractor, SearchEnv};

/// Samples per gradient work unit. Fixed so that summation order, and
/// therefore every result, is independent of the thread count.
const GRAD_CHUNK: usize = 8;
/// Loss magnitude treated as divergence.
const DIVERGENCE_LIMIT: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// `ln D`
    LogD,
    /// `-ln(1 - D)`
    NegLogOneMinusD,
}

impl std::str::FromStr for RewardKind {
    type Err = GazeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log_d" => Ok(Self::LogD),
            "neg_log_one_minus_d" => Ok(Self::NegLogOneMinusD),
            _ => Err(GazeError::Config(format!("unknown reward kind {s:?} (log_d, neg_log_one_minus_d)"))),
        }
    }
}

impl RewardKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::LogD => "log_d",
            Self::NegLogOneMinusD => "neg_log_one_minus_d",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip: f32,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr_policy: f32,
    pub lr_value: f32,
    pub lr_disc: f32,
    pub gamma: f32,
    pub lambda: f32,
    pub entropy_coef: f32,
    pub value_coef: f32,
    pub episodes_per_iter: usize,
    pub iterations: usize,
    /// Passes of the discriminator over each iteration's generated pairs.
    pub disc_epochs: usize,
    pub reward: RewardKind,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            epochs: 4,
            minibatch: 64,
            lr_policy: 1e-3,
            lr_value: 1e-3,
            lr_disc: 1e-3,
            gamma: 1.0,
            lambda: 0.95,
            entropy_coef: 0.01,
            value_coef: 0.5,
            episodes_per_iter: 32,
            iterations: 100,
            disc_epochs: 1,
            reward: RewardKind::LogD,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.clip > 0.0 && self.clip < 1.0) {
            errs.push(format!("clip must lie in (0, 1), got {}", self.clip));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            errs.push(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            errs.push(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        for (name, v) in [("lr_policy", self.lr_policy), ("lr_value", self.lr_value), ("lr_disc", self.lr_disc)] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.entropy_coef >= 0.0 && self.value_coef >= 0.0) {
            errs.push("entropy_coef and value_coef must be >= 0".into());
        }
        if self.epochs == 0 || self.minibatch == 0 || self.episodes_per_iter == 0 || self.disc_epochs == 0 {
            errs.push("epochs, minibatch, episodes_per_iter and disc_epochs must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(GazeError::Config(errs.join("; ")))
        }
    }
}

/// Reward for a clamped discriminator score.
pub fn gail_reward(score: f32, kind: RewardKind) -> f32 {
    match kind {
        RewardKind::LogD => (score as f64).ln() as f32,
        RewardKind::NegLogOneMinusD => -(1.0 - score as f64).ln() as f32,
    }
}

/// One search to run: an image, the category sought and the target box in
/// canvas pixels.
#[derive(Clone, Debug)]
pub struct SearchTask {
    pub image: Arc<RgbImage>,
    pub category: usize,
    pub target_box: Option<BoxPx>,
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    /// Policy input of the state the action was taken in.
    pub input: NdArray,
    pub mask: Option<Vec<bool>>,
    pub action: usize,
    pub log_prob: f32,
    pub value: f32,
    pub reward: Option<f32>,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub episode: usize,
    /// Index into the task list the episode ran on.
    pub task: usize,
    pub category: usize,
    pub target_box: Option<BoxPx>,
    /// Canvas fixations, the starting one first.
    pub fixations: Vec<(f32, f32)>,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    /// Saccade index (1-based) of the first fixation inside the target box.
    pub fn first_hit(&self) -> Option<usize> {
        let b = self.target_box?;
        self.fixations.iter().skip(1).position(|&(x, y)| box_contains(&b, x, y, 0.0)).map(|i| i + 1)
    }
}

/// Fixations visited (start included) and the recorded steps of one episode.
pub type Episode = (Vec<(f32, f32)>, Vec<StepRecord>);

/// Runs one full episode of `task`.
pub fn run_episode(
    env: &SearchEnv,
    policy: &PolicyNet,
    task: &SearchTask,
    rng: &mut impl Rng,
    mode: ActionMode,
) -> Result<Episode> {
    let (mut ep, mut state) = env.reset((*task.image).clone(), task.category, task.target_box)?;
    let mut steps = Vec::with_capacity(MAX_STEPS);
    for _ in 0..MAX_STEPS {
        let input = state.policy_input();
        let out = policy.forward_input(&input)?;
        let mask = env.cfg.inhibition_of_return.then(|| state.unvisited());
        let (action, log_prob) = match mode {
            ActionMode::Sample => sample_action(&out.logits, rng, mask.as_deref())?,
            ActionMode::Greedy => greedy_action(&out.logits, mask.as_deref())?,
        };
        let step = env.step(&mut ep, action)?;
        steps.push(StepRecord { input, mask, action, log_prob, value: out.value, reward: None, done: step.done });
        state = step.state;
    }
    Ok((ep.fixations().to_vec(), steps))
}

/// Runs episode `i` on `tasks[i]` with its own seed derived from `seed`.
pub fn run_tasks(
    env: &SearchEnv,
    policy: &PolicyNet,
    tasks: &[SearchTask],
    seed: u64,
    mode: ActionMode,
) -> Result<Vec<Trajectory>> {
    let assignment: Vec<usize> = (0..tasks.len()).collect();
    run_assigned(env, policy, tasks, &assignment, seed, mode)
}

fn run_assigned(
    env: &SearchEnv,
    policy: &PolicyNet,
    tasks: &[SearchTask],
    assignment: &[usize],
    seed: u64,
    mode: ActionMode,
) -> Result<Vec<Trajectory>> {
    assignment
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut rng = ChaCha8Rng::seed_from_u64(indexed_seed(seed, i as u64));
            let task = &tasks[t];
            let (fixations, steps) = run_episode(env, policy, task, &mut rng, mode)
                .map_err(|e| GazeError::invalid(format!("episode {i}: {e}")))?;
            Ok(Trajectory {
                episode: i,
                task: t,
                category: task.category,
                target_box: task.target_box,
                fixations,
                steps,
            })
        })
        .collect()
}

/// Samples `n_episodes` tasks uniformly and rolls out the stochastic policy.
pub fn collect_rollouts(
    env: &SearchEnv,
    policy: &PolicyNet,
    tasks: &[SearchTask],
    n_episodes: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Trajectory>> {
    if tasks.is_empty() {
        return Err(GazeError::invalid("no search tasks to roll out"));
    }
    let assignment: Vec<usize> = (0..n_episodes).map(|_| rng.random_range(0..tasks.len())).collect();
    let seed = rng.random();
    run_assigned(env, policy, tasks, &assignment, seed, ActionMode::Sample)
}

/// Fills every step's reward from the discriminator; returns the mean reward.
pub fn score_rewards(disc: &Discriminator, trajectories: &mut [Trajectory], kind: RewardKind) -> Result<f64> {
    let rewards: Vec<Vec<f32>> = trajectories
        .par_iter()
        .map(|t| {
            t.steps
                .iter()
                .map(|s| Ok(gail_reward(clamp_score(sigmoid(disc.logit(&s.input, s.action)?)), kind)))
                .collect::<Result<Vec<f32>>>()
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0f64;
    let mut n = 0usize;
    for (t, r) in trajectories.iter_mut().zip(rewards) {
        for (s, r) in t.steps.iter_mut().zip(r) {
            s.reward = Some(r);
            total += r as f64;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Generalized advantage estimates and value targets of one episode. The
/// value after the final step is zero.
pub fn compute_gae(trajectory: &Trajectory, gamma: f32, lambda: f32) -> Result<(Vec<f32>, Vec<f32>)> {
    let n = trajectory.steps.len();
    let mut adv = vec![0.0f32; n];
    let mut running = 0.0f64;
    let (g, l) = (gamma as f64, lambda as f64);
    for t in (0..n).rev() {
        let s = &trajectory.steps[t];
        let r = s
            .reward
            .ok_or_else(|| GazeError::invalid(format!("episode {}: step {t} has no reward", trajectory.episode)))?;
        let terminal = s.done || t + 1 == n;
        let next_v = if terminal { 0.0 } else { trajectory.steps[t + 1].value as f64 };
        let delta = r as f64 + g * next_v - s.value as f64;
        running = delta + if terminal { 0.0 } else { g * l * running };
        adv[t] = running as f32;
    }
    let ret = adv.iter().zip(&trajectory.steps).map(|(a, s)| a + s.value).collect();
    Ok((adv, ret))
}

/// Rescales to mean 0 and standard deviation 1.
pub fn normalize_advantages(adv: &mut [f32]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().map(|&a| a as f64).sum::<f64>() / n;
    let var = adv.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for a in adv.iter_mut() {
        *a = if sd > 1e-8 { ((*a as f64 - mean) / sd) as f32 } else { (*a as f64 - mean) as f32 };
    }
}

/// Per-item statistics: sums over items, plus one value reduced by maximum.
type ItemStats<const S: usize> = ([f64; S], f64);

/// Sums per-item gradients and statistics over fixed-size chunks in parallel.
fn accumulate<T: Sync, const S: usize>(
    store: &ParamStore,
    items: &[T],
    per_item: impl Fn(&T) -> Result<(Gradients, ItemStats<S>)> + Sync,
) -> Result<(Gradients, ItemStats<S>)> {
    let parts: Vec<(Gradients, ItemStats<S>)> = items
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = Gradients::zeros_like(store);
            let mut stats = ([0.0; S], 0.0f64);
            for item in chunk {
                let (g, (s, m)) = per_item(item)?;
                grads.add_assign(&g)?;
                for (a, b) in stats.0.iter_mut().zip(s) {
                    *a += b;
                }
                stats.1 = stats.1.max(m);
            }
            Ok((grads, stats))
        })
        .collect::<Result<_>>()?;
    let mut stats = ([0.0; S], 0.0f64);
    for (_, (s, m)) in &parts {
        for (a, b) in stats.0.iter_mut().zip(s) {
            *a += b;
        }
        stats.1 = stats.1.max(*m);
    }
    let grads: Vec<Gradients> = parts.into_iter().map(|(g, _)| g).collect();
    let total = Gradients::sum_ordered(&grads)?.unwrap_or_else(|| Gradients::zeros_like(store));
    Ok((total, stats))
}

/// One PPO training example.
#[derive(Clone, Copy, Debug)]
pub struct PpoSample<'a> {
    pub input: &'a NdArray,
    pub mask: Option<&'a [bool]>,
    pub action: usize,
    pub old_log_prob: f32,
    pub advantage: f32,
    pub ret: f32,
}

/// Batch means of one PPO gradient evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    /// Negated clipped surrogate.
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean absolute per-sample policy loss, watched by the divergence guard.
    pub abs_policy_loss: f64,
    /// Largest `|ρ − 1|` in the batch.
    pub max_ratio_dev: f64,
}

/// Gradient of the mean PPO loss over `batch`, without updating anything.
pub fn ppo_gradients(policy: &PolicyNet, batch: &[PpoSample], cfg: &PpoConfig) -> Result<(Gradients, PpoStats)> {
    if batch.is_empty() {
        return Err(GazeError::invalid("empty PPO batch"));
    }
    let scale = 1.0 / batch.len() as f32;
    let (grads, (s, max_dev)) = accumulate::<_, 4>(&policy.store, batch, |x| {
        let mut tape = Tape::new();
        let (logits, value) = policy.forward_tape(&mut tape, x.input)?;
        let logits = match x.mask {
            Some(m) => {
                let bias = tape.input(mask_bias(m))?;
                tape.add(logits, bias)?
            }
            None => logits,
        };
        let logp = tape.log_softmax(logits)?;
        let lp = tape.pick(logp, x.action)?;
        let shifted = tape.add_scalar(lp, -x.old_log_prob)?;
        let ratio = tape.exp(shifted)?;
        let surr1 = tape.scale(ratio, x.advantage)?;
        let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
        let surr2 = tape.scale(clipped, x.advantage)?;
        let surr = tape.minimum(surr1, surr2)?;
        let verr = tape.add_scalar(value, -x.ret)?;
        let vsq = tape.square(verr)?;
        let vloss = tape.sum(vsq)?;
        let p = tape.exp(logp)?;
        let plogp = tape.mul(p, logp)?;
        let neg_ent = tape.sum(plogp)?;
        let a = tape.scale(surr, -1.0)?;
        let b = tape.scale(vloss, cfg.value_coef)?;
        let c = tape.scale(neg_ent, cfg.entropy_coef)?;
        let ab = tape.add(a, b)?;
        let loss = tape.add(ab, c)?;
        let loss = tape.scale(loss, scale)?;
        let grads = tape.backward(loss, &policy.store)?;
        let pl = -tape.scalar(surr)? as f64;
        let rho = tape.scalar(ratio)? as f64;
        Ok((grads, ([pl, tape.scalar(vloss)? as f64, -tape.scalar(neg_ent)? as f64, pl.abs()], (rho - 1.0).abs())))
    })?;
    let n = batch.len() as f64;
    Ok((
        grads,
        PpoStats {
            policy_loss: s[0] / n,
            value_loss: s[1] / n,
            entropy: s[2] / n,
            abs_policy_loss: s[3] / n,
            max_ratio_dev: max_dev,
        },
    ))
}

/// Epochs of minibatch PPO over `batch`; advantages must already be
/// normalized. Returns the statistics of every minibatch step.
pub fn ppo_update(
    policy: &mut PolicyNet,
    opt: &mut OptimState,
    batch: &[PpoSample],
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<Vec<PpoStats>> {
    let mut out = Vec::new();
    let mut order: Vec<usize> = (0..batch.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.minibatch) {
            let mb: Vec<PpoSample> = idx.iter().map(|&i| batch[i]).collect();
            let (grads, stats) = ppo_gradients(policy, &mb, cfg)?;
            if !stats.abs_policy_loss.is_finite() || stats.abs_policy_loss > DIVERGENCE_LIMIT || !grads.is_finite() {
                return Err(GazeError::Divergence(format!(
                    "mean |policy loss| = {} (value loss {}, entropy {})",
                    stats.abs_policy_loss, stats.value_loss, stats.entropy
                )));
            }
            opt.optim_step(&mut policy.store, &grads)?;
            out.push(stats);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscStats {
    pub loss: f64,
    /// Fraction classified correctly before the step.
    pub accuracy: f64,
}

/// Binary cross-entropy of the discriminator, expert label 1, and its gradient.
pub fn disc_gradients(
    disc: &Discriminator,
    expert: &[(&NdArray, usize)],
    generated: &[(&NdArray, usize)],
) -> Result<(Gradients, DiscStats)> {
    if expert.is_empty() || generated.is_empty() {
        return Err(GazeError::invalid("discriminator update needs expert and generated pairs"));
    }
    let items: Vec<(&NdArray, usize, bool)> =
        expert.iter().map(|&(x, a)| (x, a, true)).chain(generated.iter().map(|&(x, a)| (x, a, false))).collect();
    let scale = 1.0 / items.len() as f32;
    let (grads, (s, _)) = accumulate::<_, 2>(&disc.store, &items, |&(x, a, is_expert)| {
        let mut tape = Tape::new();
        let z = disc.logit_tape(&mut tape, x, a)?;
        let signed = if is_expert { tape.scale(z, -1.0)? } else { z };
        let loss = tape.softplus(signed)?;
        let scaled = tape.scale(loss, scale)?;
        let grads = tape.backward(scaled, &disc.store)?;
        let zv = tape.scalar(z)?;
        let correct = if is_expert { zv > 0.0 } else { zv < 0.0 };
        Ok((grads, ([tape.scalar(loss)? as f64, correct as u8 as f64], 0.0)))
    })?;
    let n = items.len() as f64;
    Ok((grads, DiscStats { loss: s[0] / n, accuracy: s[1] / n }))
}

/// One gradient step of the discriminator.
pub fn discriminator_update(
    disc: &mut Discriminator,
    opt: &mut OptimState,
    expert: &[(&NdArray, usize)],
    generated: &[(&NdArray, usize)],
) -> Result<DiscStats> {
    let (grads, stats) = disc_gradients(disc, expert, generated)?;
    if !grads.is_finite() || !stats.loss.is_finite() {
        return Err(GazeError::Divergence(format!("discriminator loss {}", stats.loss)));
    }
    opt.optim_step(&mut disc.store, &grads)?;
    Ok(stats)
}

/// An expert decision encoded through the search environment.
#[derive(Clone, Debug)]
pub struct ExpertSample {
    pub input: NdArray,
    pub action: usize,
}

/// Replays every expert prefix through `env`, starting at the canvas center
/// and moving to the cells of the recorded fixations.
pub fn encode_expert_pairs(
    env: &SearchEnv,
    pairs: &[ExpertPair],
    load: &(dyn Fn(&str) -> Result<RgbImage> + Sync),
) -> Result<Vec<ExpertSample>> {
    let mut groups: Vec<&[ExpertPair]> = Vec::new();
    let mut start = 0;
    for i in 1..=pairs.len() {
        if i == pairs.len() || pairs[i].trial_id != pairs[start].trial_id || pairs[i].step != pairs[i - 1].step + 1 {
            groups.push(&pairs[start..i]);
            start = i;
        }
    }
    let encoded: Vec<Vec<ExpertSample>> = groups
        .par_iter()
        .map(|group| {
            let first = &group[0];
            let image = load(&first.image_ref)?;
            let (w, h) = (image.width(), image.height());
            let mut ep = env.start(image, first.category_id as usize, None)?;
            let prefix = group.last().expect("groups are non-empty").prefix_actions(w, h)?;
            let mut out = Vec::with_capacity(group.len());
            for p in group.iter() {
                while ep.steps_taken() < p.step {
                    ep.advance(prefix[ep.steps_taken()], &env.cfg.foveation)?;
                }
                out.push(ExpertSample { input: env.observe(&mut ep)?.policy_input(), action: p.action });
            }
            Ok(out)
        })
        .collect::<Result<_>>()
        .map_err(|e: GazeError| GazeError::invalid(format!("encoding expert pairs: {e}")))?;
    Ok(encoded.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub disc_loss: f64,
    pub disc_accuracy: f64,
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Largest `|ρ − 1|` in the first minibatch, before any update.
    pub initial_ratio_dev: f64,
    /// Fraction of this iteration's rollouts that fixated the target.
    pub fixated_in_6: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub iterations: Vec<IterationRecord>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str =
        "iteration,disc_loss,disc_accuracy,mean_reward,policy_loss,value_loss,entropy,initial_ratio_dev,fixated_in_6";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.iterations {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3e},{:.6}\n",
                r.iteration,
                r.disc_loss,
                r.disc_accuracy,
                r.mean_reward,
                r.policy_loss,
                r.value_loss,
                r.entropy,
                r.initial_ratio_dev,
                r.fixated_in_6
            ));
        }
        out
    }

    /// Mean of `f` over the last `n` iterations.
    pub fn tail_mean(&self, n: usize, f: impl Fn(&IterationRecord) -> f64) -> Option<f64> {
        let tail = &self.iterations[self.iterations.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(f).sum::<f64>() / tail.len() as f64)
    }

    /// Final-window summary written next to the CSV.
    pub fn summary(&self) -> BTreeMap<&'static str, f64> {
        let mut m = BTreeMap::new();
        m.insert("iterations", self.iterations.len() as f64);
        if let Some(v) = self.tail_mean(10, |r| r.disc_accuracy) {
            m.insert("final10_disc_accuracy", v);
        }
        if let Some(v) = self.tail_mean(10, |r| r.mean_reward) {
            m.insert("final10_mean_reward", v);
        }
        if let Some(v) = self.tail_mean(10, |r| r.fixated_in_6) {
            m.insert("final10_fixated_in_6", v);
        }
        m
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::write(dir.join("train_report.csv"), self.to_csv())?;
        let json = serde_json::json!({ "seed": self.seed, "summary": self.summary(), "iterations": self.iterations });
        let mut f = std::fs::File::create(dir.join("train_report.json"))?;
        f.write_all(serde_json::to_string_pretty(&json)?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Adversarial training loop. Each iteration collects rollouts, scores them
/// with the current discriminator, updates the discriminator on balanced
/// expert/generated batches, then runs PPO on the scored rollouts.
pub fn train(
    env: &SearchEnv,
    expert: &[ExpertSample],
    tasks: &[SearchTask],
    cfg: &PpoConfig,
    mut policy: PolicyNet,
    mut disc: Discriminator,
    seed: u64,
) -> Result<(PolicyNet, Discriminator, TrainReport)> {
    cfg.validate()?;
    let mut report = TrainReport { seed, iterations: Vec::new() };
    if cfg.iterations == 0 {
        return Ok((policy, disc, report));
    }
    if expert.is_empty() {
        return Err(GazeError::invalid("no expert pairs to imitate"));
    }
    if tasks.is_empty() {
        return Err(GazeError::invalid("no training images"));
    }
    let mut policy_opt = OptimState::new(&policy.store, cfg.lr_policy);
    policy_opt.set_lr(policy.value_params(), cfg.lr_value);
    let mut disc_opt = OptimState::new(&disc.store, cfg.lr_disc);
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, "gail"));
    let expert_pairs: Vec<(&NdArray, usize)> = expert.iter().map(|e| (&e.input, e.action)).collect();

    for it in 0..cfg.iterations {
        let mut trajs = collect_rollouts(env, &policy, tasks, cfg.episodes_per_iter, &mut rng)?;
        let mean_reward = score_rewards(&disc, &mut trajs, cfg.reward)?;
        let hits = trajs.iter().filter(|t| t.first_hit().is_some()).count();

        let generated: Vec<(&NdArray, usize)> =
            trajs.iter().flat_map(|t| t.steps.iter().map(|s| (&s.input, s.action))).collect();
        let half = (cfg.minibatch / 2).max(1);
        let mut disc_stats = Vec::new();
        let mut order: Vec<usize> = (0..generated.len()).collect();
        for _ in 0..cfg.disc_epochs {
            order.shuffle(&mut rng);
            for idx in order.chunks(half) {
                let gen: Vec<_> = idx.iter().map(|&i| generated[i]).collect();
                let exp: Vec<_> =
                    (0..gen.len()).map(|_| expert_pairs[rng.random_range(0..expert_pairs.len())]).collect();
                disc_stats.push(discriminator_update(&mut disc, &mut disc_opt, &exp, &gen)?);
            }
        }

        let mut advantages = Vec::new();
        let mut returns = Vec::new();
        for t in &trajs {
            let (a, r) = compute_gae(t, cfg.gamma, cfg.lambda)?;
            advantages.extend(a);
            returns.extend(r);
        }
        normalize_advantages(&mut advantages);
        let batch: Vec<PpoSample> = trajs
            .iter()
            .flat_map(|t| t.steps.iter())
            .zip(advantages.iter().zip(&returns))
            .map(|(s, (&advantage, &ret))| PpoSample {
                input: &s.input,
                mask: s.mask.as_deref(),
                action: s.action,
                old_log_prob: s.log_prob,
                advantage,
                ret,
            })
            .collect();
        let ppo = ppo_update(&mut policy, &mut policy_opt, &batch, cfg, &mut rng)?;

        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rec = IterationRecord {
            iteration: it,
            disc_loss: mean(&disc_stats.iter().map(|s| s.loss).collect::<Vec<_>>()),
            disc_accuracy: mean(&disc_stats.iter().map(|s| s.accuracy).collect::<Vec<_>>()),
            mean_reward,
            policy_loss: mean(&ppo.iter().map(|s| s.policy_loss).collect::<Vec<_>>()),
            value_loss: mean(&ppo.iter().map(|s| s.value_loss).collect::<Vec<_>>()),
            entropy: mean(&ppo.iter().map(|s| s.entropy).collect::<Vec<_>>()),
            initial_ratio_dev: ppo.first().map_or(0.0, |s| s.max_ratio_dev),
            fixated_in_6: hits as f64 / trajs.len() as f64,
        };
        log::info!(
            "iter {it}: disc acc {:.3} loss {:.4}, reward {:.4}, entropy {:.3}, fixated-in-6 {:.3}",
            rec.disc_accuracy,
            rec.disc_loss,
            rec.mean_reward,
            rec.entropy,
            rec.fixated_in_6
        );
        report.iterations.push(rec);
    }
    Ok((policy, disc, report))
}

/// Extractor, policy and discriminator saved together.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub extractor: Extractor,
    pub policy: PolicyNet,
    pub disc: Discriminator,
}

fn sub_store(all: &ParamStore, prefix: &str) -> ParamStore {
    let mut out = ParamStore::new();
    let lead = format!("{prefix}.");
    for (name, t) in all.iter() {
        if let Some(rest) = name.strip_prefix(&lead) {
            out.push(rest, t.clone());
        }
    }
    out
}

impl ModelBundle {
    pub fn to_store(&self) -> ParamStore {
        let mut all = ParamStore::new();
        all.extend_prefixed(self.extractor.store(), "extractor");
        all.extend_prefixed(&self.policy.store, "policy");
        all.extend_prefixed(&self.disc.store, "disc");
        all
    }

    pub fn from_store(all: &ParamStore) -> Result<Self> {
        Ok(Self {
            extractor: Extractor::from_store(sub_store(all, "extractor"))?,
            policy: PolicyNet::from_store(sub_store(all, "policy"))?,
            disc: Discriminator::from_store(sub_store(all, "disc"))?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(gazeirl_numerics::save_checkpoint(path, &self.to_store())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&gazeirl_numerics::load_checkpoint(path)?)
    }
}
