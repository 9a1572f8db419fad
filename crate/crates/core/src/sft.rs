//! Expert demonstrations and behavior-cloning pretraining.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{digest_hex, CheckpointError, Container};
use crate::nn::{AdamConfig, Gradients, NnError, Tensor};
use crate::policy::{PolicyError, PolicyParams};
use crate::rng::{stream, Purpose};
use crate::rprm::{TrajStep, TrajectoryLog};
use crate::sim::{expert_action, Env, Observation, SimConfig, TaskSpec, FEATURE_DIM};
use crate::tokenizer::{ActionVector, TokenSequence, TokenizerError, Vocabulary, ACTION_DIMS};

/// Expert failure rate above which a task is flagged in the dataset metadata.
pub const EXPERT_FAILURE_WARN: f64 = 0.05;
/// Loss ratio to the initial loss that counts as divergence.
const DIVERGENCE_RATIO: f64 = 2.0;
/// Consecutive divergent epochs before aborting.
const DIVERGENCE_EPOCHS: usize = 3;

#[derive(Debug, Error)]
pub enum SftError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("empty demonstration dataset")]
    EmptyDataset,
    #[error("behavior cloning diverged at epoch {epoch}: loss {loss} vs initial {initial} (losses {history:?})")]
    Diverged { epoch: usize, loss: f64, initial: f64, history: Vec<f64> },
}

impl From<NnError> for SftError {
    fn from(e: NnError) -> Self {
        SftError::Policy(PolicyError::Nn(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub episodes_per_task: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { episodes_per_task: 50, lr: 3e-3, epochs: 60, batch_size: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    pub obs: Observation,
    pub action: ActionVector,
    pub gripper_open: f64,
    /// Whether this step completed the task.
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoEpisode {
    pub task_id: usize,
    pub seed: u64,
    pub steps: Vec<DemoStep>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DemoMetadata {
    pub seed: u64,
    pub episodes_per_task: usize,
    pub attempted: usize,
    pub retained: usize,
    /// Tasks whose expert failure rate exceeded the warning threshold.
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoDataset {
    pub episodes: Vec<DemoEpisode>,
    pub metadata: DemoMetadata,
}

/// JSON manifest written next to the binary dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoManifest {
    pub metadata: DemoMetadata,
    pub tasks: usize,
    pub total_steps: usize,
    pub per_task_episodes: Vec<usize>,
    pub digest: String,
}

/// Rolls out the scripted expert `episodes_per_task` times on every task and
/// keeps the successful episodes.
pub fn generate_demos(tasks: &[Arc<TaskSpec>], sim: &SimConfig, episodes_per_task: usize, seed: u64) -> DemoDataset {
    let mut episodes = Vec::new();
    let mut metadata = DemoMetadata { seed, episodes_per_task, ..Default::default() };
    for (j, task) in tasks.iter().enumerate() {
        let mut rng = stream(seed, Purpose::Demos, j as u64);
        let mut failures = 0;
        for _ in 0..episodes_per_task {
            let ep_seed: u64 = rng.gen();
            let (mut env, mut obs) = Env::reset(sim, task.clone(), ep_seed);
            let mut steps = Vec::new();
            let success = loop {
                let action = expert_action(&env.state, &env.task, sim);
                let open = env.state.gripper_open;
                let r = env.step(&action).expect("episode live");
                steps.push(DemoStep { obs, action, gripper_open: open, success: r.info.success });
                obs = r.next_obs;
                if r.done {
                    break r.info.success;
                }
            };
            metadata.attempted += 1;
            if success {
                episodes.push(DemoEpisode { task_id: task.task_id, seed: ep_seed, steps });
            } else {
                failures += 1;
            }
        }
        if episodes_per_task > 0 && failures as f64 / episodes_per_task as f64 > EXPERT_FAILURE_WARN {
            metadata.warnings.push(format!(
                "task {} `{}`: expert failed {failures}/{episodes_per_task}",
                task.task_id, task.instruction
            ));
        }
    }
    metadata.retained = episodes.len();
    DemoDataset { episodes, metadata }
}

impl DemoDataset {
    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("demos");
        let n = self.total_steps();
        let (mut feats, mut acts, mut open, mut succ) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut episodes = Vec::new();
        for e in &self.episodes {
            for s in &e.steps {
                feats.extend_from_slice(&s.obs.features);
                acts.extend_from_slice(&s.action.0);
                open.push(s.gripper_open);
                succ.push(if s.success { 1.0 } else { 0.0 });
            }
            let instr = e.steps.first().map(|s| s.obs.instruction_tokens.clone()).unwrap_or_default();
            episodes.push(serde_json::json!({
                "task_id": e.task_id, "seed": e.seed, "len": e.steps.len(), "instruction_tokens": instr,
            }));
        }
        c.push("features", Tensor::new(vec![n, FEATURE_DIM], feats).expect("finite features"));
        c.push("actions", Tensor::new(vec![n, ACTION_DIMS], acts).expect("finite actions"));
        c.push("gripper_open", Tensor::new(vec![n], open).expect("finite"));
        c.push("success", Tensor::new(vec![n], succ).expect("finite"));
        c.meta = serde_json::json!({ "episodes": episodes, "metadata": self.metadata });
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, CheckpointError> {
        #[derive(Deserialize)]
        struct EpMeta {
            task_id: usize,
            seed: u64,
            len: usize,
            instruction_tokens: TokenSequence,
        }
        let metas: Vec<EpMeta> = c.meta_field("episodes")?;
        let metadata: DemoMetadata = c.meta_field("metadata")?;
        let (feats, acts) = (c.require("features")?, c.require("actions")?);
        let (open, succ) = (c.require("gripper_open")?, c.require("success")?);
        let total: usize = metas.iter().map(|m| m.len).sum();
        if feats.shape() != [total, FEATURE_DIM] || acts.shape() != [total, ACTION_DIMS] {
            return Err(CheckpointError::header("meta.episodes", "episode lengths disagree with tensor shapes"));
        }
        let mut row = 0;
        let mut episodes = Vec::with_capacity(metas.len());
        for m in metas {
            let steps = (row..row + m.len)
                .map(|r| DemoStep {
                    obs: Observation { features: feats.row(r).to_vec(), instruction_tokens: m.instruction_tokens.clone() },
                    action: ActionVector(acts.row(r).try_into().expect("7 columns")),
                    gripper_open: open.data()[r],
                    success: succ.data()[r] != 0.0,
                })
                .collect();
            row += m.len;
            episodes.push(DemoEpisode { task_id: m.task_id, seed: m.seed, steps });
        }
        Ok(Self { episodes, metadata })
    }

    pub fn manifest(&self, num_tasks: usize) -> DemoManifest {
        let mut per_task = vec![0; num_tasks];
        for e in &self.episodes {
            if let Some(c) = per_task.get_mut(e.task_id) {
                *c += 1;
            }
        }
        DemoManifest {
            metadata: self.metadata.clone(),
            tasks: num_tasks,
            total_steps: self.total_steps(),
            per_task_episodes: per_task,
            digest: digest_hex(&self.to_container().to_bytes()),
        }
    }

    /// Trajectory logs for the labeling pipeline (tokens are the quantized
    /// expert actions; gripper pose is read from the observation features).
    pub fn to_trajectories(&self, vocab: &Vocabulary) -> Result<Vec<TrajectoryLog>, TokenizerError> {
        self.episodes
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let steps = e
                    .steps
                    .iter()
                    .map(|s| {
                        Ok(TrajStep {
                            obs: s.obs.clone(),
                            tokens: vocab.encode_action(&s.action)?,
                            action: s.action,
                            gripper_open: s.gripper_open,
                            gripper_pos: [s.obs.features[0], s.obs.features[1], s.obs.features[2]],
                            sparse_reward: if s.success { 1.0 } else { 0.0 },
                            done: s.success,
                        })
                    })
                    .collect::<Result<Vec<_>, TokenizerError>>()?;
                Ok(TrajectoryLog { episode_id: i as u64, task_id: e.task_id, success: true, steps })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    pub initial_loss: f64,
    /// Mean per-token cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    pub examples: usize,
}

/// Supervised (observation, expert token) pairs.
pub fn bc_examples(data: &DemoDataset, vocab: &Vocabulary) -> Result<Vec<(Observation, TokenSequence)>, SftError> {
    let mut out = Vec::with_capacity(data.total_steps());
    for e in &data.episodes {
        for s in &e.steps {
            out.push((s.obs.clone(), vocab.encode_action(&s.action)?));
        }
    }
    Ok(out)
}

/// Mean per-token cross-entropy of `params` on `examples`.
pub fn bc_loss(params: &PolicyParams, examples: &[(Observation, TokenSequence)]) -> Result<f64, SftError> {
    let mut total = 0.0;
    for chunk in examples.chunks(512) {
        let obs: Vec<&Observation> = chunk.iter().map(|e| &e.0).collect();
        let toks: Vec<&TokenSequence> = chunk.iter().map(|e| &e.1).collect();
        total -= params.evaluate(&obs, Some(&toks))?.log_probs.iter().sum::<f64>();
    }
    Ok(total / (examples.len().max(1) * params.config.action_dims) as f64)
}

/// Summed log-probability of a batch and the gradient of its mean per-token
/// cross-entropy, value head excluded.
fn batch_gradient(
    params: &PolicyParams,
    obs: &[&Observation],
    toks: &[&TokenSequence],
) -> Result<(f64, Gradients), SftError> {
    let scale = -1.0 / (obs.len() * params.config.action_dims) as f64;
    let mut ev = params.evaluate(obs, Some(toks))?;
    let sum = ev.log_probs.iter().sum::<f64>();
    let mut grads = ev.backward(&vec![scale; obs.len()], &[], &[])?;
    grads.retain(|name, _| !PolicyParams::is_value_param(name));
    Ok((sum, grads))
}

/// [`bc_loss`] on one batch and its gradient.
pub fn bc_gradient(
    params: &PolicyParams,
    examples: &[(Observation, TokenSequence)],
) -> Result<(f64, Gradients), SftError> {
    let obs: Vec<&Observation> = examples.iter().map(|e| &e.0).collect();
    let toks: Vec<&TokenSequence> = examples.iter().map(|e| &e.1).collect();
    let (sum, grads) = batch_gradient(params, &obs, &toks)?;
    Ok((-sum / (examples.len() * params.config.action_dims) as f64, grads))
}

/// Behavior cloning: minimizes the mean per-token cross-entropy against the
/// quantized expert actions. The value head is never updated.
pub fn bc_train(
    mut params: PolicyParams,
    examples: &[(Observation, TokenSequence)],
    cfg: &SftConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PolicyParams, SftReport), SftError> {
    if examples.is_empty() {
        return Err(SftError::EmptyDataset);
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let dims = params.config.action_dims as f64;
    let initial_loss = bc_loss(&params, examples)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut divergent = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let obs: Vec<&Observation> = idx.iter().map(|&i| &examples[i].0).collect();
            let toks: Vec<&TokenSequence> = idx.iter().map(|&i| &examples[i].1).collect();
            let (sum_log_prob, grads) = batch_gradient(&params, &obs, &toks)?;
            total -= sum_log_prob;
            params.store.adam_step_partial(&grads, &adam)?;
        }
        let loss = total / (examples.len() as f64 * dims);
        epoch_losses.push(loss);
        if !loss.is_finite() || loss > DIVERGENCE_RATIO * initial_loss {
            divergent += 1;
        } else {
            divergent = 0;
        }
        if divergent >= DIVERGENCE_EPOCHS || !loss.is_finite() {
            return Err(SftError::Diverged { epoch, loss, initial: initial_loss, history: epoch_losses });
        }
    }
    Ok((params, SftReport { initial_loss, epoch_losses, examples: examples.len() }))
}

/// Fraction of examples whose greedy decoding reproduces every expert token.
pub fn greedy_token_accuracy(
    params: &PolicyParams,
    examples: &[(Observation, TokenSequence)],
) -> Result<f64, SftError> {
    let mut hits = 0;
    for chunk in examples.chunks(256) {
        let obs: Vec<&Observation> = chunk.iter().map(|e| &e.0).collect();
        let decoded = params.sample_batch(&obs, 0.0, &mut [])?;
        hits += decoded.iter().zip(chunk).filter(|(d, e)| d.tokens == e.1).count();
    }
    Ok(hits as f64 / examples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use crate::sim::{make_suite, SuiteConfig};

    fn tasks() -> (Vec<Arc<TaskSpec>>, Vocabulary) {
        let s = make_suite(&SuiteConfig::default());
        (s.tasks.into_iter().map(Arc::new).collect(), s.vocab)
    }

    fn policy(vocab: &Vocabulary, width: usize) -> PolicyParams {
        let cfg = PolicyConfig {
            width,
            feature_dim: FEATURE_DIM,
            instruction_ids: vocab.instruction_ids(),
            action_dims: ACTION_DIMS,
            bins: crate::tokenizer::BINS_PER_DIM,
            action_token_base: vocab.action_token_base(),
        };
        PolicyParams::init(cfg, &mut stream(0, Purpose::Init, 0))
    }

    #[test]
    fn zero_episodes_is_empty() {
        let (t, _) = tasks();
        let d = generate_demos(&t, &SimConfig::default(), 0, 1);
        assert!(d.episodes.is_empty());
        assert!(d.metadata.warnings.is_empty());
    }

    #[test]
    fn demos_deterministic_and_round_trip() {
        let (t, vocab) = tasks();
        let a = generate_demos(&t[..4], &SimConfig::default(), 3, 7);
        let b = generate_demos(&t[..4], &SimConfig::default(), 3, 7);
        assert_eq!(a.manifest(4).digest, b.manifest(4).digest);
        assert_eq!(a.metadata.retained, 12);
        assert_eq!(a.manifest(4).per_task_episodes, vec![3, 3, 3, 3]);
        let back = DemoDataset::from_container(&Container::from_bytes(&a.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, a);
        let trajs = a.to_trajectories(&vocab).unwrap();
        assert!(trajs.iter().all(|t| t.success && t.steps.last().unwrap().done));
    }

    #[test]
    fn initial_bc_loss_is_ln256() {
        let (t, vocab) = tasks();
        let d = generate_demos(&t[..2], &SimConfig::default(), 1, 0);
        let ex = bc_examples(&d, &vocab).unwrap();
        let p = policy(&vocab, 16);
        assert!((bc_loss(&p, &ex).unwrap() - 256f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn bc_fits_single_task_and_leaves_value_head() {
        let (t, vocab) = tasks();
        let d = generate_demos(&t[..1], &SimConfig::default(), 1, 3);
        let ex = bc_examples(&d, &vocab).unwrap();
        let p0 = policy(&vocab, 64);
        let cfg = SftConfig { lr: 3e-3, epochs: 800, batch_size: 8, ..Default::default() };
        let (p, rep) = bc_train(p0.clone(), &ex, &cfg, &mut stream(0, Purpose::Shuffle, 0)).unwrap();
        assert!(rep.epoch_losses.last().unwrap() < &rep.initial_loss);
        let acc = greedy_token_accuracy(&p, &ex).unwrap();
        assert!(acc >= 0.95, "greedy accuracy {acc}, losses {:?}", rep.epoch_losses);
        for name in PolicyParams::value_param_names() {
            assert_eq!(p.store.get(name), p0.store.get(name));
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let (_, vocab) = tasks();
        let p = policy(&vocab, 8);
        assert!(matches!(
            bc_train(p, &[], &SftConfig::default(), &mut stream(0, Purpose::Shuffle, 0)),
            Err(SftError::EmptyDataset)
        ));
    }
}
