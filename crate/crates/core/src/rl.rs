//! PPO learner: rollout collection with reward densification, GAE, the
//! clipped policy update, value regression, entropy bonus and critic warmup.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{push_store, read_store, CheckpointError, Container};
use crate::curriculum::{CurriculumConfig, CurriculumError, SuccessTracker};
use crate::eval::{evaluate, EvalError, GreedyPolicy, RateCi};
use crate::nn::{clip_grad_norm, AdamConfig, Gradients, NnError};
use crate::orchestrator::{batched_decode, default_shards, Broadcaster, Orchestrator, OrchestratorError, WeightSnapshot};
use crate::policy::{PolicyConfig, PolicyError, PolicyParams};
use crate::rng::{stream, Purpose, RngState};
use crate::rprm::{densify, RprmError, RprmParams};
use crate::sim::{EnvSlotState, Observation, SimConfig, TaskSampler, TaskSpec};
use crate::tokenizer::{ActionVector, TokenSequence, TokenizerError, Vocabulary};

/// Added to the advantage standard deviation during normalization.
const ADV_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum RlError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Rprm(#[from] RprmError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite {what}: {dump}")]
    NonFinite { what: String, dump: String },
    #[error("critic warmup changed policy tensor `{0}`")]
    PolicyDrift(String),
    #[error("invalid PPO config: {0}")]
    Config(String),
}

fn non_finite(what: impl Into<String>, dump: impl Serialize) -> RlError {
    RlError::NonFinite { what: what.into(), dump: serde_json::to_string(&dump).unwrap_or_default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda_gae: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    /// Learning rate of the value head (warmup and joint updates).
    pub critic_lr: f64,
    pub max_grad_norm: f64,
    pub warmup_iters: usize,
    pub temperature: f64,
    pub num_envs: usize,
    pub steps_per_update: usize,
    pub iterations: usize,
    /// Early-stop threshold on the per-epoch mean approximate divergence.
    pub target_kl: f64,
    /// Clip value predictions to `clip_eps` around the rollout values.
    pub value_clip: bool,
    /// Environment shards; 0 selects `min(4, num_envs)`.
    pub num_shards: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda_gae: 0.95,
            clip_eps: 0.2,
            epochs: 4,
            minibatch_size: 256,
            value_coef: 0.5,
            entropy_coef: 0.003,
            lr: 4e-4,
            critic_lr: 1e-3,
            max_grad_norm: 1.0,
            warmup_iters: 5,
            temperature: 1.0,
            num_envs: 16,
            steps_per_update: 256,
            iterations: 100,
            target_kl: 0.02,
            value_clip: false,
            num_shards: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.lambda_gae > 0.0 && self.lambda_gae <= 1.0) {
            return bad("gamma and lambda_gae must lie in (0, 1]");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if self.minibatch_size == 0 || self.num_envs == 0 || self.steps_per_update == 0 {
            return bad("minibatch_size, num_envs and steps_per_update must be positive");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be finite and non-negative");
        }
        if !(self.lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.num_shards > self.num_envs {
            return bad("num_shards exceeds num_envs");
        }
        Ok(())
    }

    pub fn shards(&self) -> usize {
        if self.num_shards == 0 {
            default_shards(self.num_envs)
        } else {
            self.num_shards
        }
    }
}

/// One environment step as stored in the rollout buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub tokens: TokenSequence,
    pub action: ActionVector,
    /// Densified reward `r^sparse + β·score`.
    pub reward: f64,
    pub sparse_reward: f64,
    /// `d_t`: this observation starts a new episode.
    pub done_before: bool,
    /// The episode ended with this step (`d_{t+1}`).
    pub episode_end: bool,
    pub behavior_log_prob: f64,
    pub value: f64,
    pub entropy: f64,
    pub task_id: usize,
}

/// `N × M` transitions, stored env-major, plus one bootstrap value per env.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub steps: usize,
    pub transitions: Vec<Transition>,
    pub bootstrap: Vec<f64>,
}

impl RolloutBuffer {
    pub fn at(&self, env: usize, t: usize) -> &Transition {
        &self.transitions[env * self.steps + t]
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// GAE over one env's sequence. `ends[t]` is `d_{t+1}`: the episode ended
/// at step t, which cuts both the bootstrap and the recursion.
pub fn gae_sequence(
    rewards: &[f64],
    values: &[f64],
    ends: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let m = rewards.len();
    let mut adv = vec![0.0; m];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..m).rev() {
        let nonterminal = if ends[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * nonterminal * next_value - values[t];
        next_adv = delta + gamma * lambda * nonterminal * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Advantages and return targets laid out like `buffer.transitions`.
pub fn compute_gae(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let mut adv = Vec::with_capacity(buffer.len());
    let mut ret = Vec::with_capacity(buffer.len());
    for (e, seq) in buffer.transitions.chunks(buffer.steps.max(1)).enumerate() {
        let r: Vec<f64> = seq.iter().map(|t| t.reward).collect();
        let v: Vec<f64> = seq.iter().map(|t| t.value).collect();
        let d: Vec<bool> = seq.iter().map(|t| t.episode_end).collect();
        let (a, g) = gae_sequence(&r, &v, &d, buffer.bootstrap[e], gamma, lambda);
        adv.extend(a);
        ret.extend(g);
    }
    (adv, ret)
}

/// Eq. 2 for one sample: `min(r·A, clip(r, 1−ε, 1+ε)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    unclipped.min(clipped)
}

/// Mean 0, standard deviation 1 (population), with `ADV_EPS` in the divisor.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return Vec::new();
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    adv.iter().map(|a| (a - mean) / (std + ADV_EPS)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub epochs_completed: usize,
    pub early_stopped: bool,
    /// `max |ratio − 1|` on the first minibatch (on-policy consistency).
    pub first_ratio_dev: f64,
}

fn split_adam(params: &mut PolicyParams, mut grads: Gradients, cfg: &PpoConfig) -> Result<(), RlError> {
    let value: Gradients = PolicyParams::value_param_names()
        .iter()
        .filter_map(|n| grads.remove_entry(*n))
        .collect();
    params.store.adam_step_partial(&grads, &AdamConfig::with_lr(cfg.lr))?;
    params.store.adam_step_partial(&value, &AdamConfig::with_lr(cfg.critic_lr))?;
    Ok(())
}

/// Value-loss gradient and value for one sample, honoring `value_clip`.
fn value_term(v: f64, v_old: f64, target: f64, cfg: &PpoConfig) -> (f64, f64) {
    let unclipped = (v - target).powi(2);
    if !cfg.value_clip {
        return (unclipped, 2.0 * (v - target));
    }
    let vc = v_old + (v - v_old).clamp(-cfg.clip_eps, cfg.clip_eps);
    let clipped = (vc - target).powi(2);
    if clipped > unclipped {
        let active = (v - v_old).abs() <= cfg.clip_eps;
        (clipped, if active { 2.0 * (vc - target) } else { 0.0 })
    } else {
        (unclipped, 2.0 * (v - target))
    }
}

/// Clipped-surrogate update over `epochs × minibatches`.
pub fn ppo_update(
    params: &mut PolicyParams,
    buffer: &RolloutBuffer,
    advantages: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PpoStats, RlError> {
    let adv = normalize_advantages(advantages);
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut stats = PpoStats::default();
    let mut batches = 0usize;
    let mut first = true;
    for _epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_kl = 0.0;
        let mut epoch_batches = 0usize;
        for idx in order.chunks(cfg.minibatch_size) {
            let b = idx.len() as f64;
            let obs: Vec<&Observation> = idx.iter().map(|&i| &buffer.transitions[i].obs).collect();
            let toks: Vec<&TokenSequence> = idx.iter().map(|&i| &buffer.transitions[i].tokens).collect();
            let mut ev = params.evaluate(&obs, Some(&toks))?;
            let (mut d_lp, mut d_h, mut d_v) = (vec![0.0; idx.len()], vec![0.0; idx.len()], vec![0.0; idx.len()]);
            let (mut pl, mut vl, mut ent, mut clipped, mut kl) = (0.0, 0.0, 0.0, 0.0, 0.0);
            let mut max_dev: f64 = 0.0;
            for (k, &i) in idx.iter().enumerate() {
                let tr = &buffer.transitions[i];
                let log_ratio = ev.log_probs[k] - tr.behavior_log_prob;
                let ratio = log_ratio.exp();
                max_dev = max_dev.max((ratio - 1.0).abs());
                let a = adv[i];
                let unclipped = ratio * a;
                let surrogate = clipped_surrogate(ratio, a, cfg.clip_eps);
                pl -= surrogate;
                // The unclipped branch carries the gradient whenever it is the minimum.
                if unclipped <= surrogate {
                    d_lp[k] = -ratio * a / b;
                }
                if (ratio - 1.0).abs() > cfg.clip_eps {
                    clipped += 1.0;
                }
                kl += (ratio - 1.0) - log_ratio;
                ent += ev.entropies[k];
                d_h[k] = -cfg.entropy_coef / b;
                let (loss, grad) = value_term(ev.values[k], tr.value, returns[i], cfg);
                vl += loss;
                d_v[k] = cfg.value_coef * grad / b;
            }
            let (pl, vl, ent, kl) = (pl / b, vl / b, ent / b, kl / b);
            let total = pl + cfg.value_coef * vl - cfg.entropy_coef * ent;
            if !total.is_finite() {
                return Err(non_finite("PPO loss", (pl, vl, ent)));
            }
            if first {
                stats.first_ratio_dev = max_dev;
                first = false;
            }
            let mut grads = ev.backward(&d_lp, &d_h, &d_v)?;
            drop(ev);
            let norm = clip_grad_norm(&mut grads, cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err(non_finite("gradient norm", norm));
            }
            split_adam(params, grads, cfg)?;
            stats.policy_loss += pl;
            stats.value_loss += vl;
            stats.entropy += ent;
            stats.clip_frac += clipped / b;
            stats.approx_kl += kl;
            stats.grad_norm += norm;
            batches += 1;
            epoch_kl += kl;
            epoch_batches += 1;
        }
        stats.epochs_completed += 1;
        if epoch_batches > 0 && epoch_kl / epoch_batches as f64 > cfg.target_kl {
            stats.early_stopped = true;
            break;
        }
    }
    if batches > 0 {
        let n = batches as f64;
        stats.policy_loss /= n;
        stats.value_loss /= n;
        stats.entropy /= n;
        stats.clip_frac /= n;
        stats.approx_kl /= n;
        stats.grad_norm /= n;
    }
    Ok(stats)
}

/// Value-only regression onto `returns`; every other tensor is untouched.
/// Returns the mean squared error over the minibatches.
pub fn value_regression(
    params: &mut PolicyParams,
    buffer: &RolloutBuffer,
    returns: &[f64],
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, RlError> {
    let adam = AdamConfig::with_lr(cfg.critic_lr);
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let (mut total, mut batches) = (0.0, 0usize);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.minibatch_size) {
            let b = idx.len() as f64;
            let obs: Vec<&Observation> = idx.iter().map(|&i| &buffer.transitions[i].obs).collect();
            let mut ev = params.evaluate(&obs, None)?;
            let mut d_v = Vec::with_capacity(idx.len());
            let mut loss = 0.0;
            for (k, &i) in idx.iter().enumerate() {
                let err = ev.values[k] - returns[i];
                loss += err * err / b;
                d_v.push(2.0 * err / b);
            }
            if !loss.is_finite() {
                return Err(non_finite("value loss", loss));
            }
            let mut grads = ev.backward(&[], &[], &d_v)?;
            drop(ev);
            grads.retain(|n, _| PolicyParams::is_value_param(n));
            clip_grad_norm(&mut grads, cfg.max_grad_norm);
            params.store.adam_step_partial(&grads, &adam)?;
            total += loss;
            batches += 1;
        }
    }
    Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
}

/// Running totals of each env's current episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeAcc {
    pub ret: f64,
    pub sparse_ret: f64,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStat {
    pub env_id: usize,
    pub task_id: usize,
    pub success: bool,
    pub len: usize,
    pub ret: f64,
    pub sparse_ret: f64,
}

/// Environment-side rollout state: envs, decode streams, episode totals.
pub struct RolloutState {
    pub orch: Orchestrator,
    pub decode_rngs: Vec<ChaCha8Rng>,
    pub acc: Vec<EpisodeAcc>,
    /// Whether each env's current observation starts an episode.
    pub fresh: Vec<bool>,
}

impl RolloutState {
    pub fn new(orch: Orchestrator, seed: u64) -> Self {
        let n = orch.num_envs();
        Self {
            orch,
            decode_rngs: (0..n).map(|i| stream(seed, Purpose::Decode, i as u64)).collect(),
            acc: vec![EpisodeAcc::default(); n],
            fresh: vec![true; n],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutStats {
    /// Completed episodes in (step, env id) order.
    pub episodes: Vec<EpisodeStat>,
    pub mean_entropy: f64,
    pub env_secs: f64,
    pub inference_secs: f64,
}

/// Reward model used for densification (absent or β = 0: sparse only).
#[derive(Clone, Copy)]
pub struct Densifier<'a> {
    pub rprm: Option<&'a RprmParams>,
    pub beta: f64,
}

impl Densifier<'_> {
    pub fn sparse() -> Self {
        Densifier { rprm: None, beta: 0.0 }
    }
}

/// Runs `steps` synchronized steps of every env under a frozen snapshot.
pub fn collect_rollout(
    snapshot: &WeightSnapshot,
    densifier: Densifier<'_>,
    state: &mut RolloutState,
    sampler: &dyn TaskSampler,
    vocab: &Vocabulary,
    temperature: f64,
    steps: usize,
) -> Result<(RolloutBuffer, RolloutStats), RlError> {
    let n = state.orch.num_envs();
    let mut per_env: Vec<Vec<Transition>> = (0..n).map(|_| Vec::with_capacity(steps)).collect();
    let mut stats = RolloutStats::default();
    let mut entropy_total = 0.0;
    for t in 0..steps {
        let clock = Instant::now();
        let batch = state.orch.gather_observations()?;
        let decoded = batched_decode(snapshot, &batch, temperature, &mut state.decode_rngs)?;
        let mut actions = Vec::with_capacity(n);
        for (e, d) in decoded.iter().enumerate() {
            if !(d.log_prob.is_finite() && d.value.is_finite()) {
                return Err(non_finite(
                    format!("log-prob/value at step {t}, env {e}"),
                    (&batch.entries[e].1, d.log_prob, d.value),
                ));
            }
            actions.push(vocab.decode_tokens(&d.tokens)?);
        }
        let scores = match densifier.rprm {
            Some(r) if densifier.beta != 0.0 => {
                let obs = batch.observations();
                let toks: Vec<&TokenSequence> = decoded.iter().map(|d| &d.tokens).collect();
                r.score_batch(&obs, &toks)?
            }
            _ => vec![0.0; n],
        };
        stats.inference_secs += clock.elapsed().as_secs_f64();
        let clock = Instant::now();
        let results = state.orch.scatter_actions(&actions, sampler)?;
        stats.env_secs += clock.elapsed().as_secs_f64();
        for (e, ((r, d), (a, (_, obs)))) in
            results.into_iter().zip(decoded).zip(actions.into_iter().zip(batch.entries)).enumerate()
        {
            let reward = if densifier.rprm.is_some() && densifier.beta != 0.0 {
                densify(r.sparse_reward, scores[e], densifier.beta)
            } else {
                r.sparse_reward
            };
            entropy_total += d.entropy;
            let acc = &mut state.acc[e];
            acc.ret += reward;
            acc.sparse_ret += r.sparse_reward;
            acc.len += 1;
            if r.done {
                stats.episodes.push(EpisodeStat {
                    env_id: e,
                    task_id: r.info.task_id,
                    success: r.info.success,
                    len: acc.len,
                    ret: acc.ret,
                    sparse_ret: acc.sparse_ret,
                });
                *acc = EpisodeAcc::default();
            }
            per_env[e].push(Transition {
                obs,
                tokens: d.tokens,
                action: a,
                reward,
                sparse_reward: r.sparse_reward,
                done_before: state.fresh[e],
                episode_end: r.done,
                behavior_log_prob: d.log_prob,
                value: d.value,
                entropy: d.entropy,
                task_id: r.info.task_id,
            });
            state.fresh[e] = r.done;
        }
    }
    let clock = Instant::now();
    let batch = state.orch.gather_observations()?;
    let bootstrap = snapshot.params.values(&batch.observations())?;
    stats.inference_secs += clock.elapsed().as_secs_f64();
    if let Some(e) = bootstrap.iter().position(|v| !v.is_finite()) {
        return Err(non_finite(format!("bootstrap value of env {e}"), &batch.entries[e].1));
    }
    stats.mean_entropy = if steps * n == 0 { 0.0 } else { entropy_total / (steps * n) as f64 };
    let buffer = RolloutBuffer { num_envs: n, steps, transitions: per_env.into_iter().flatten().collect(), bootstrap };
    Ok((buffer, stats))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WallTimes {
    pub env: f64,
    pub inference: f64,
    pub learn: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub success_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub per_task: Vec<f64>,
    pub mean_success_len: Option<f64>,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub env_steps: u64,
    pub episodes: usize,
    pub mean_return: Option<f64>,
    pub mean_sparse_return: Option<f64>,
    pub mean_episode_len: Option<f64>,
    pub mean_success_len: Option<f64>,
    pub success_rate: Option<f64>,
    pub entropy: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
    pub value_loss: f64,
    pub policy_loss: f64,
    pub grad_norm: f64,
    pub epochs_completed: usize,
    pub early_stopped: bool,
    pub first_ratio_dev: f64,
    /// Rollout success per task this iteration (null when no episode ended).
    pub per_task_success: Vec<Option<f64>>,
    pub curriculum_rates: Vec<f64>,
    pub snapshot_version: u64,
    pub wall_times: WallTimes,
    pub eval: Option<EvalSummary>,
}

impl MetricsRecord {
    /// The record with timing fields zeroed (timings are not reproducible).
    pub fn without_timing(&self) -> Self {
        Self { wall_times: WallTimes::default(), ..self.clone() }
    }
}

/// One critic-warmup cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupRecord {
    pub warmup_iter: usize,
    pub value_loss: f64,
    pub mean_value: f64,
    pub mean_return_target: f64,
    pub episodes: usize,
    pub success_rate: Option<f64>,
}

/// Training-loop settings beyond the PPO hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub ppo: PpoConfig,
    pub curriculum: CurriculumConfig,
    /// Densification weight (0 or no reward model: sparse reward only).
    pub beta: f64,
    /// Greedy evaluation cadence in iterations (0: never).
    pub eval_every: u64,
    pub eval_episodes_per_task: usize,
    pub eval_seed: u64,
    pub seed: u64,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Checkpointed trainer metadata.
#[derive(Serialize, Deserialize)]
struct TrainerMeta {
    iteration: u64,
    env_steps: u64,
    warmup_done: bool,
    snapshot_version: u64,
    tracker: SuccessTracker,
    env_slots: Vec<EnvSlotState>,
    decode_rngs: Vec<RngState>,
    episode_acc: Vec<EpisodeAcc>,
    fresh: Vec<bool>,
    policy_config: PolicyConfig,
    policy_store: serde_json::Value,
    rprm_shape: Option<PolicyConfig>,
    rprm_store: Option<serde_json::Value>,
    settings: TrainSettings,
    config_digest: String,
}

/// Algorithm 1 driver: owns the learner, environments and curriculum.
pub struct Trainer {
    pub settings: TrainSettings,
    pub policy: PolicyParams,
    pub rprm: Option<Arc<RprmParams>>,
    pub vocab: Vocabulary,
    pub tracker: SuccessTracker,
    pub rollout: RolloutState,
    pub broadcaster: Broadcaster,
    pub iteration: u64,
    pub env_steps: u64,
    pub warmup_done: bool,
    pub config_digest: String,
    /// `(dx, dy)` of the most recent rollout's actions.
    pub last_actions: Vec<(f64, f64)>,
}

impl Trainer {
    pub fn new(
        settings: TrainSettings,
        policy: PolicyParams,
        rprm: Option<RprmParams>,
        tasks: Vec<Arc<TaskSpec>>,
        sim: SimConfig,
        vocab: Vocabulary,
    ) -> Result<Self, RlError> {
        settings.ppo.validate()?;
        policy.validate()?;
        let tracker = SuccessTracker::new(tasks.len(), settings.curriculum.clone());
        let orch = Orchestrator::new(
            sim,
            tasks,
            settings.ppo.num_envs,
            settings.ppo.shards(),
            settings.seed,
            &tracker.snapshot(),
        )?;
        let rollout = RolloutState::new(orch, settings.seed);
        Ok(Self {
            settings,
            policy,
            rprm: rprm.map(Arc::new),
            vocab,
            tracker,
            rollout,
            broadcaster: Broadcaster::new(0),
            iteration: 0,
            env_steps: 0,
            warmup_done: false,
            config_digest: String::new(),
            last_actions: Vec::new(),
        })
    }

    pub fn tasks(&self) -> &[Arc<TaskSpec>] {
        &self.rollout.orch.tasks
    }

    /// Broadcast, collect, then apply tracker updates in (step, env) order.
    fn rollout_phase(&mut self) -> Result<(RolloutBuffer, RolloutStats, WeightSnapshot), RlError> {
        let snapshot = self.broadcaster.broadcast(&self.policy)?;
        let sampler = self.tracker.snapshot();
        self.broadcaster.begin_rollout();
        let densifier = Densifier { rprm: self.rprm.as_deref(), beta: self.settings.beta };
        let result = collect_rollout(
            &snapshot,
            densifier,
            &mut self.rollout,
            &sampler,
            &self.vocab,
            self.settings.ppo.temperature,
            self.settings.ppo.steps_per_update,
        );
        self.broadcaster.end_rollout();
        let (buffer, stats) = result?;
        for ep in &stats.episodes {
            self.tracker.update(ep.task_id, ep.success)?;
        }
        self.env_steps += buffer.len() as u64;
        self.last_actions = buffer.transitions.iter().map(|t| (t.action.dx(), t.action.dy())).collect();
        Ok((buffer, stats, snapshot))
    }

    fn shuffle_rng(&self, tag: u64) -> ChaCha8Rng {
        stream(self.settings.seed, Purpose::Shuffle, tag)
    }

    /// Critic warmup: `warmup_iters` rollout + value-regression cycles with
    /// the policy frozen. Aborts if any non-value tensor changes.
    pub fn critic_warmup(&mut self) -> Result<Vec<WarmupRecord>, RlError> {
        let mut records = Vec::new();
        if self.warmup_done {
            return Ok(records);
        }
        let frozen: Vec<(String, Vec<u64>)> = self
            .policy
            .store
            .iter()
            .filter(|(n, _)| !PolicyParams::is_value_param(n))
            .map(|(n, t)| (n.to_string(), t.data().iter().map(|x| x.to_bits()).collect()))
            .collect();
        for w in 0..self.settings.ppo.warmup_iters {
            let (buffer, stats, _) = self.rollout_phase()?;
            let (_, returns) = compute_gae(&buffer, self.settings.ppo.gamma, self.settings.ppo.lambda_gae);
            // Tags above 2^32 keep warmup shuffles apart from PPO iterations.
            let mut rng = self.shuffle_rng((1 << 32) + w as u64);
            let value_loss = value_regression(&mut self.policy, &buffer, &returns, &self.settings.ppo, &mut rng)?;
            records.push(WarmupRecord {
                warmup_iter: w,
                value_loss,
                mean_value: mean(buffer.transitions.iter().map(|t| t.value)).unwrap_or(0.0),
                mean_return_target: mean(returns.iter().copied()).unwrap_or(0.0),
                episodes: stats.episodes.len(),
                success_rate: mean(stats.episodes.iter().map(|e| f64::from(u8::from(e.success)))),
            });
        }
        for (name, bits) in &frozen {
            let now = self.policy.store.get(name).ok_or_else(|| RlError::PolicyDrift(name.clone()))?;
            if now.data().iter().map(|x| x.to_bits()).ne(bits.iter().copied()) {
                return Err(RlError::PolicyDrift(name.clone()));
            }
        }
        self.warmup_done = true;
        Ok(records)
    }

    pub fn evaluate_greedy(&self) -> Result<EvalSummary, RlError> {
        let actor = GreedyPolicy { params: &self.policy, vocab: &self.vocab };
        let orch = &self.rollout.orch;
        let report = evaluate(&actor, &orch.tasks, &orch.config, self.settings.eval_episodes_per_task, self.settings.eval_seed)?;
        let succ_lens: Vec<f64> = report
            .per_task
            .iter()
            .filter_map(|t| t.mean_success_len.map(|l| l * t.result.successes as f64))
            .collect();
        let RateCi { rate, ci_low, ci_high, successes, .. } = report.overall;
        Ok(EvalSummary {
            success_rate: rate,
            ci_low,
            ci_high,
            per_task: report.per_task.iter().map(|t| t.result.rate).collect(),
            mean_success_len: (successes > 0).then(|| succ_lens.iter().sum::<f64>() / successes as f64),
        })
    }

    /// One PPO iteration: rollout, GAE, update, optional evaluation.
    pub fn iterate(&mut self) -> Result<MetricsRecord, RlError> {
        let (buffer, stats, snapshot) = self.rollout_phase()?;
        let clock = Instant::now();
        let ppo = &self.settings.ppo;
        let (adv, returns) = compute_gae(&buffer, ppo.gamma, ppo.lambda_gae);
        let mut rng = self.shuffle_rng(self.iteration);
        let ppo_stats = ppo_update(&mut self.policy, &buffer, &adv, &returns, ppo, &mut rng)?;
        let learn = clock.elapsed().as_secs_f64();
        self.iteration += 1;
        let eval = if self.settings.eval_every > 0 && self.iteration.is_multiple_of(self.settings.eval_every) {
            Some(self.evaluate_greedy()?)
        } else {
            None
        };
        let num_tasks = self.tracker.num_tasks();
        let per_task_success = (0..num_tasks)
            .map(|j| mean(stats.episodes.iter().filter(|e| e.task_id == j).map(|e| f64::from(u8::from(e.success)))))
            .collect();
        let eps = &stats.episodes;
        Ok(MetricsRecord {
            iter: self.iteration,
            env_steps: self.env_steps,
            episodes: eps.len(),
            mean_return: mean(eps.iter().map(|e| e.ret)),
            mean_sparse_return: mean(eps.iter().map(|e| e.sparse_ret)),
            mean_episode_len: mean(eps.iter().map(|e| e.len as f64)),
            mean_success_len: mean(eps.iter().filter(|e| e.success).map(|e| e.len as f64)),
            success_rate: mean(eps.iter().map(|e| f64::from(u8::from(e.success)))),
            entropy: stats.mean_entropy,
            clip_frac: ppo_stats.clip_frac,
            approx_kl: ppo_stats.approx_kl,
            value_loss: ppo_stats.value_loss,
            policy_loss: ppo_stats.policy_loss,
            grad_norm: ppo_stats.grad_norm,
            epochs_completed: ppo_stats.epochs_completed,
            early_stopped: ppo_stats.early_stopped,
            first_ratio_dev: ppo_stats.first_ratio_dev,
            per_task_success,
            curriculum_rates: self.tracker.rates.clone(),
            snapshot_version: snapshot.version,
            wall_times: WallTimes { env: stats.env_secs, inference: stats.inference_secs, learn },
            eval,
        })
    }

    /// Serializes the full training state.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new("rl");
        let policy_store = push_store(&mut c, "", &self.policy.store);
        let (rprm_shape, rprm_store) = match &self.rprm {
            Some(r) => (Some(r.shape.clone()), Some(push_store(&mut c, "", &r.store))),
            None => (None, None),
        };
        let meta = TrainerMeta {
            iteration: self.iteration,
            env_steps: self.env_steps,
            warmup_done: self.warmup_done,
            snapshot_version: self.broadcaster.version(),
            tracker: self.tracker.clone(),
            env_slots: self.rollout.orch.snapshot_slots(),
            decode_rngs: self.rollout.decode_rngs.iter().map(RngState::capture).collect(),
            episode_acc: self.rollout.acc.clone(),
            fresh: self.rollout.fresh.clone(),
            policy_config: self.policy.config.clone(),
            policy_store,
            rprm_shape,
            rprm_store,
            settings: self.settings.clone(),
            config_digest: self.config_digest.clone(),
        };
        c.meta = serde_json::to_value(meta).expect("serializes");
        c
    }

    /// Rebuilds a trainer saved by [`Trainer::to_container`].
    pub fn from_container(
        c: &Container,
        tasks: Vec<Arc<TaskSpec>>,
        sim: SimConfig,
        vocab: Vocabulary,
    ) -> Result<Self, RlError> {
        if c.kind != "rl" {
            return Err(CheckpointError::header("kind", format!("expected `rl`, found `{}`", c.kind)).into());
        }
        let meta: TrainerMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| CheckpointError::header("meta", e.to_string()))?;
        let policy_store = read_store(c, "", &meta.policy_store)?;
        let rprm = match (meta.rprm_shape, meta.rprm_store) {
            (Some(shape), Some(store_meta)) => {
                let store = read_store(c, "", &store_meta)?;
                Some(Arc::new(RprmParams { shape, store }))
            }
            _ => None,
        };
        let policy = PolicyParams { config: meta.policy_config, store: policy_store };
        policy.validate()?;
        let n = meta.env_slots.len();
        if meta.decode_rngs.len() != n || meta.episode_acc.len() != n || meta.fresh.len() != n {
            return Err(CheckpointError::header("meta.decode_rngs", "per-env state lengths disagree").into());
        }
        let orch = Orchestrator::restore(sim, tasks, &meta.env_slots, meta.settings.ppo.shards())?;
        let decode_rngs = meta
            .decode_rngs
            .iter()
            .enumerate()
            .map(|(i, r)| r.restore().map_err(|e| CheckpointError::header(format!("meta.decode_rngs[{i}]"), e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            settings: meta.settings,
            policy,
            rprm,
            vocab,
            tracker: meta.tracker,
            rollout: RolloutState { orch, decode_rngs, acc: meta.episode_acc, fresh: meta.fresh },
            broadcaster: Broadcaster::new(meta.snapshot_version),
            iteration: meta.iteration,
            env_steps: meta.env_steps,
            warmup_done: meta.warmup_done,
            config_digest: meta.config_digest,
            last_actions: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{make_suite, SuiteConfig, FEATURE_DIM};
    use proptest::prelude::*;

    /// Direct sum oracle: A_t = Σ_l (γλ)^l δ_{t+l} until the episode ends.
    fn gae_oracle(r: &[f64], v: &[f64], ends: &[bool], boot: f64, g: f64, l: f64) -> Vec<f64> {
        let m = r.len();
        let next_v = |t: usize| if t + 1 < m { v[t + 1] } else { boot };
        let delta = |t: usize| r[t] + if ends[t] { 0.0 } else { g * next_v(t) } - v[t];
        (0..m)
            .map(|t| {
                let mut a = 0.0;
                let mut w = 1.0;
                for k in t..m {
                    a += w * delta(k);
                    if ends[k] {
                        break;
                    }
                    w *= g * l;
                }
                a
            })
            .collect()
    }

    #[test]
    fn gae_worked_examples() {
        let (a, ret) = gae_sequence(&[1.0], &[0.0], &[true], 0.0, 1.0, 1.0);
        assert_eq!((a[0], ret[0]), (1.0, 1.0));
        let (a, _) = gae_sequence(&[0.0, 1.0], &[0.5, 0.4], &[false, false], 0.2, 0.9, 0.95);
        assert!((a[1] - 0.78).abs() < 1e-12 && (a[0] - 0.5269).abs() < 1e-12, "{a:?}");
        let (a, _) = gae_sequence(&[0.3, -0.2, 1.0], &[0.1, 0.5, 0.2], &[false, true, false], 0.7, 0.9, 1e-300);
        let td = [0.3 + 0.9 * 0.5 - 0.1, -0.2 - 0.5, 1.0 + 0.9 * 0.7 - 0.2];
        for (x, y) in a.iter().zip(td) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn gae_matches_oracle(
            n in 1usize..=4, m in 1usize..=6,
            data in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, any::<bool>()), 24),
            boots in prop::collection::vec(-2.0f64..2.0, 4),
            g in 0.5f64..=1.0, l in 0.0f64..=1.0,
        ) {
            for e in 0..n {
                let s = &data[e * m..e * m + m];
                let r: Vec<f64> = s.iter().map(|x| x.0).collect();
                let v: Vec<f64> = s.iter().map(|x| x.1).collect();
                let d: Vec<bool> = s.iter().map(|x| x.2).collect();
                let (a, ret) = gae_sequence(&r, &v, &d, boots[e], g, l);
                let o = gae_oracle(&r, &v, &d, boots[e], g, l);
                for t in 0..m {
                    prop_assert!((a[t] - o[t]).abs() <= 1e-10);
                    prop_assert!((ret[t] - (o[t] + v[t])).abs() <= 1e-10);
                }
            }
        }

        #[test]
        fn surrogate_with_huge_eps_is_unclipped(r in 0.0f64..5.0, a in -3.0f64..3.0) {
            prop_assert_eq!(clipped_surrogate(r, a, 1e300), r * a);
        }
    }

    #[test]
    fn surrogate_worked_examples() {
        assert_eq!(clipped_surrogate(2.0, 2.0, 0.2), 2.4);
        assert_eq!(-clipped_surrogate(0.5, -1.0, 0.2), 0.8);
        let adv = [0.5, -1.5, 2.0];
        let loss = -adv.iter().map(|&a| clipped_surrogate(1.0, a, 0.2)).sum::<f64>() / 3.0;
        assert_eq!(loss, -adv.iter().sum::<f64>() / 3.0);
    }

    #[test]
    fn normalization_has_zero_mean_unit_std() {
        let a = normalize_advantages(&[1.0, 2.0, 3.0, 6.0]);
        let m: f64 = a.iter().sum::<f64>() / 4.0;
        let v: f64 = a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-6);
    }

    fn trainer(n: usize, m: usize, shards: usize, seed: u64) -> Trainer {
        let s = make_suite(&SuiteConfig { tasks_per_suite: [2; 4], ..Default::default() });
        let tasks: Vec<_> = s.tasks.into_iter().map(Arc::new).collect();
        let cfg = PolicyConfig {
            width: 16,
            feature_dim: FEATURE_DIM,
            instruction_ids: s.vocab.instruction_ids(),
            action_dims: 7,
            bins: 256,
            action_token_base: s.vocab.action_token_base(),
        };
        let mut policy = PolicyParams::init(cfg.clone(), &mut stream(9, Purpose::Init, 0));
        // Non-zero head so decoding is not uniform.
        for name in [crate::policy::HEAD_W, crate::policy::VALUE_W] {
            let t = policy.store.get_mut(name).unwrap();
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x = ((i * 37 % 11) as f64 - 5.0) * 0.05;
            }
        }
        let rprm = RprmParams::init(cfg, &mut stream(9, Purpose::Init, 1));
        let settings = TrainSettings {
            ppo: PpoConfig {
                num_envs: n,
                steps_per_update: m,
                num_shards: shards,
                minibatch_size: 32,
                epochs: 2,
                warmup_iters: 2,
                ..Default::default()
            },
            curriculum: CurriculumConfig::default(),
            beta: 0.1,
            eval_every: 2,
            eval_episodes_per_task: 1,
            eval_seed: 3,
            seed,
        };
        Trainer::new(settings, policy, Some(rprm), tasks, SimConfig { horizon: 8, ..Default::default() }, s.vocab)
            .unwrap()
    }

    #[test]
    fn single_step_buffer_and_sparse_identity() {
        let mut t = trainer(1, 1, 1, 0);
        t.settings.beta = 0.0;
        let (b, _, _) = t.rollout_phase().unwrap();
        assert_eq!((b.len(), b.bootstrap.len()), (1, 1));
        let mut t = trainer(4, 20, 2, 0);
        t.settings.beta = 0.0;
        let (b, _, _) = t.rollout_phase().unwrap();
        assert!(b.transitions.iter().all(|x| x.reward == x.sparse_reward));
        assert!(b.transitions.iter().all(|x| x.behavior_log_prob <= 0.0 && x.behavior_log_prob.is_finite()));
    }

    #[test]
    fn shard_invariance_of_rollouts() {
        let buffers: Vec<RolloutBuffer> = [1, 2, 4]
            .iter()
            .map(|&e| {
                let mut t = trainer(8, 12, e, 4);
                t.rollout_phase().unwrap().0
            })
            .collect();
        assert!(buffers.iter().any(|b| b.transitions.iter().any(|t| t.episode_end)));
        assert_eq!(buffers[0], buffers[1]);
        assert_eq!(buffers[0], buffers[2]);
    }

    #[test]
    fn on_policy_ratio_is_one_at_first_minibatch() {
        let mut t = trainer(4, 16, 2, 1);
        let m = t.iterate().unwrap();
        assert!(m.first_ratio_dev < 1e-8, "{}", m.first_ratio_dev);
        assert!((0.0..=1.0).contains(&m.clip_frac));
    }

    #[test]
    fn warmup_freezes_policy_and_zero_iters_changes_nothing() {
        let mut t = trainer(4, 16, 2, 2);
        let before = t.policy.clone();
        let rec = t.critic_warmup().unwrap();
        assert_eq!(rec.len(), 2);
        for (n, x) in before.store.iter() {
            let same = x == t.policy.store.get(n).unwrap();
            assert_eq!(same, !PolicyParams::is_value_param(n), "{n}");
        }
        let mut t = trainer(4, 16, 2, 2);
        t.settings.ppo.warmup_iters = 0;
        let before = t.policy.clone();
        assert!(t.critic_warmup().unwrap().is_empty());
        assert_eq!(before, t.policy);
    }

    #[test]
    fn resume_reproduces_next_iteration() {
        let mut a = trainer(4, 10, 2, 3);
        a.critic_warmup().unwrap();
        a.iterate().unwrap();
        let bytes = a.to_container().to_bytes();
        let c = Container::from_bytes(&bytes).unwrap();
        let mut b = Trainer::from_container(&c, a.tasks().to_vec(), a.rollout.orch.config.clone(), a.vocab.clone())
            .unwrap();
        assert_eq!(b.to_container().to_bytes(), bytes);
        let ma = a.iterate().unwrap();
        let mb = b.iterate().unwrap();
        assert_eq!(ma.without_timing(), mb.without_timing());
        assert!(ma.eval.is_some());
        assert_eq!(a.policy, b.policy);
    }
}
