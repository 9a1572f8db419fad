//! In-process analogue of multi-worker rollout: environment shards stepped
//! in parallel, observations gathered in env-id order, one central batched
//! decoder, and immutable weight snapshots.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::par;
use crate::policy::{Decoded, PolicyError, PolicyParams};
use crate::sim::{EnvSlot, EnvSlotState, Observation, SimConfig, SimError, StepResult, TaskSampler, TaskSpec};
use crate::tokenizer::ActionVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrchestratorError {
    #[error("shard {shard} is at epoch {got}, expected {expected} (barrier violation)")]
    EpochMismatch { shard: usize, expected: u64, got: u64 },
    #[error("environment {0} missing from gathered batch")]
    MissingEnv(usize),
    #[error("{got} actions for {expected} environments")]
    ActionCount { expected: usize, got: usize },
    #[error("weight broadcast rejected during an active rollout phase")]
    BroadcastDuringRollout,
    #[error("invalid shard layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// A worker's environments (contiguous env ids) and its step epoch.
#[derive(Clone, Debug)]
pub struct WorkerShard {
    pub shard_id: usize,
    pub slots: Vec<EnvSlot>,
    pub epoch: u64,
}

/// Observations of all live environments in env-id order.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceBatch {
    pub epoch: u64,
    pub entries: Vec<(usize, Observation)>,
}

impl InferenceBatch {
    pub fn observations(&self) -> Vec<&Observation> {
        self.entries.iter().map(|(_, o)| o).collect()
    }
}

/// Default shard count: `min(4, N)`.
pub fn default_shards(num_envs: usize) -> usize {
    num_envs.clamp(1, 4)
}

/// Contiguous, balanced partition of `0..n` into `e` ranges.
fn partition(n: usize, e: usize) -> Vec<std::ops::Range<usize>> {
    (0..e).map(|s| (s * n / e)..((s + 1) * n / e)).collect()
}

pub struct Orchestrator {
    pub config: SimConfig,
    pub tasks: Vec<Arc<TaskSpec>>,
    pub shards: Vec<WorkerShard>,
    num_envs: usize,
}

impl Orchestrator {
    /// Creates `num_envs` environments (seeded by env id only) split over
    /// `num_shards` workers.
    pub fn new(
        config: SimConfig,
        tasks: Vec<Arc<TaskSpec>>,
        num_envs: usize,
        num_shards: usize,
        master_seed: u64,
        sampler: &dyn TaskSampler,
    ) -> Result<Self, OrchestratorError> {
        let slots: Vec<EnvSlot> =
            (0..num_envs).map(|i| EnvSlot::new(i, master_seed, &config, &tasks, sampler).0).collect();
        Self::from_slots(config, tasks, slots, num_shards)
    }

    /// Rebuilds an orchestrator from saved slot states.
    pub fn restore(
        config: SimConfig,
        tasks: Vec<Arc<TaskSpec>>,
        states: &[EnvSlotState],
        num_shards: usize,
    ) -> Result<Self, OrchestratorError> {
        let slots = states.iter().map(|s| EnvSlot::restore(s, &config, &tasks)).collect::<Result<Vec<_>, _>>()?;
        Self::from_slots(config, tasks, slots, num_shards)
    }

    fn from_slots(
        config: SimConfig,
        tasks: Vec<Arc<TaskSpec>>,
        slots: Vec<EnvSlot>,
        num_shards: usize,
    ) -> Result<Self, OrchestratorError> {
        let n = slots.len();
        if num_shards == 0 || (n > 0 && num_shards > n) {
            return Err(OrchestratorError::Layout(format!("{num_shards} shards for {n} environments")));
        }
        let mut iter = slots.into_iter();
        let shards = partition(n, num_shards)
            .into_iter()
            .enumerate()
            .map(|(shard_id, r)| WorkerShard { shard_id, slots: iter.by_ref().take(r.len()).collect(), epoch: 0 })
            .collect();
        Ok(Self { config, tasks, shards, num_envs: n })
    }

    pub fn num_envs(&self) -> usize {
        self.num_envs
    }

    pub fn snapshot_slots(&self) -> Vec<EnvSlotState> {
        self.shards.iter().flat_map(|s| s.slots.iter().map(EnvSlot::snapshot)).collect()
    }

    /// Barrier: all shards must be at the same epoch. Returns the batch
    /// sorted by env id.
    pub fn gather_observations(&self) -> Result<InferenceBatch, OrchestratorError> {
        let expected = self.shards.first().map_or(0, |s| s.epoch);
        for s in &self.shards {
            if s.epoch != expected {
                return Err(OrchestratorError::EpochMismatch { shard: s.shard_id, expected, got: s.epoch });
            }
        }
        let mut entries: Vec<(usize, Observation)> =
            self.shards.iter().flat_map(|s| s.slots.iter().map(|e| (e.env_id, e.observe()))).collect();
        entries.sort_by_key(|(id, _)| *id);
        for (i, (id, _)) in entries.iter().enumerate() {
            if *id != i {
                return Err(OrchestratorError::MissingEnv(i));
            }
        }
        if entries.len() != self.num_envs {
            return Err(OrchestratorError::MissingEnv(entries.len()));
        }
        Ok(InferenceBatch { epoch: expected, entries })
    }

    /// Steps every shard concurrently with its slice of `actions` (indexed by
    /// env id) and returns the results in env-id order.
    pub fn scatter_actions(
        &mut self,
        actions: &[ActionVector],
        sampler: &dyn TaskSampler,
    ) -> Result<Vec<StepResult>, OrchestratorError> {
        if actions.is_empty() && self.num_envs == 0 {
            return Ok(Vec::new());
        }
        if actions.len() != self.num_envs {
            return Err(OrchestratorError::ActionCount { expected: self.num_envs, got: actions.len() });
        }
        let tasks = &self.tasks;
        let per_shard = par::map_mut(&mut self.shards, |shard| -> Result<Vec<(usize, StepResult)>, SimError> {
            let mut out = Vec::with_capacity(shard.slots.len());
            for slot in &mut shard.slots {
                let r = slot.step_auto_reset(&actions[slot.env_id], tasks, sampler)?;
                out.push((slot.env_id, r));
            }
            shard.epoch += 1;
            Ok(out)
        });
        let mut all = Vec::with_capacity(self.num_envs);
        for r in per_shard {
            all.extend(r?);
        }
        all.sort_by_key(|(id, _)| *id);
        Ok(all.into_iter().map(|(_, r)| r).collect())
    }
}

/// Immutable parameter copy handed to the decoder.
#[derive(Clone, Debug)]
pub struct WeightSnapshot {
    pub params: Arc<PolicyParams>,
    pub version: u64,
}

/// Issues versioned snapshots and refuses to do so mid-rollout.
#[derive(Clone, Debug, Default)]
pub struct Broadcaster {
    version: u64,
    rollout_active: bool,
}

impl Broadcaster {
    pub fn new(version: u64) -> Self {
        Self { version, rollout_active: false }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn broadcast(&mut self, learner: &PolicyParams) -> Result<WeightSnapshot, OrchestratorError> {
        if self.rollout_active {
            return Err(OrchestratorError::BroadcastDuringRollout);
        }
        self.version += 1;
        Ok(WeightSnapshot { params: Arc::new(learner.clone()), version: self.version })
    }

    pub fn begin_rollout(&mut self) {
        self.rollout_active = true;
    }

    pub fn end_rollout(&mut self) {
        self.rollout_active = false;
    }
}

/// Decodes the whole batch in one pass; row `i` draws from `rngs[env_id]`.
/// Equivalent, token for token, to decoding each observation on its own.
pub fn batched_decode(
    snapshot: &WeightSnapshot,
    batch: &InferenceBatch,
    temperature: f64,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Decoded>, OrchestratorError> {
    let obs = batch.observations();
    if temperature == 0.0 {
        return Ok(snapshot.params.sample_batch(&obs, 0.0, &mut [])?);
    }
    // Rows are in env-id order and every env is present, so row i uses rngs[i].
    if rngs.len() != obs.len() {
        return Err(OrchestratorError::ActionCount { expected: obs.len(), got: rngs.len() });
    }
    Ok(snapshot.params.sample_batch(&obs, temperature, rngs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::tests::randomized;
    use crate::policy::PolicyConfig;
    use crate::rng::{stream, Purpose};
    use crate::sim::{make_suite, SuiteConfig, UniformSampler, FEATURE_DIM};
    use crate::tokenizer::Vocabulary;

    fn setup(n: usize, e: usize) -> (Orchestrator, Vocabulary) {
        let s = make_suite(&SuiteConfig::default());
        let tasks: Vec<_> = s.tasks.into_iter().map(Arc::new).collect();
        let sampler = UniformSampler { num_tasks: tasks.len() };
        (Orchestrator::new(SimConfig::default(), tasks, n, e, 5, &sampler).unwrap(), s.vocab)
    }

    fn policy(vocab: &Vocabulary) -> PolicyParams {
        let cfg = PolicyConfig {
            width: 16,
            feature_dim: FEATURE_DIM,
            instruction_ids: vocab.instruction_ids(),
            action_dims: 7,
            bins: 256,
            action_token_base: vocab.action_token_base(),
        };
        randomized(cfg, 3)
    }

    #[test]
    fn shard_layouts_give_identical_batches() {
        let (one, _) = setup(16, 1);
        let b1 = one.gather_observations().unwrap();
        for e in [2, 4] {
            let (o, _) = setup(16, e);
            assert_eq!(o.shards.len(), e);
            assert_eq!(o.gather_observations().unwrap(), b1);
        }
    }

    #[test]
    fn epoch_mismatch_rejected() {
        let (mut o, _) = setup(4, 2);
        o.shards[1].epoch = 3;
        assert_eq!(
            o.gather_observations(),
            Err(OrchestratorError::EpochMismatch { shard: 1, expected: 0, got: 3 })
        );
    }

    #[test]
    fn missing_env_reported() {
        let (mut o, _) = setup(4, 2);
        o.shards[0].slots.remove(1);
        assert_eq!(o.gather_observations(), Err(OrchestratorError::MissingEnv(1)));
    }

    #[test]
    fn action_count_checked() {
        let (mut o, _) = setup(4, 2);
        let sampler = UniformSampler { num_tasks: o.tasks.len() };
        assert_eq!(
            o.scatter_actions(&[ActionVector::ZERO; 3], &sampler).unwrap_err(),
            OrchestratorError::ActionCount { expected: 4, got: 3 }
        );
    }

    #[test]
    fn batched_decode_matches_sequential() {
        let (o, vocab) = setup(16, 4);
        let p = policy(&vocab);
        let mut b = Broadcaster::new(0);
        let snap = b.broadcast(&p).unwrap();
        let batch = o.gather_observations().unwrap();
        let mut rngs: Vec<_> = (0..16).map(|i| stream(1, Purpose::Decode, i)).collect();
        let out = batched_decode(&snap, &batch, 1.5, &mut rngs).unwrap();
        for (i, (_, obs)) in batch.entries.iter().enumerate() {
            let mut r = stream(1, Purpose::Decode, i as u64);
            let d = p.sample_action_tokens(obs, 1.5, &mut r).unwrap();
            assert_eq!(d.tokens, out[i].tokens);
        }
    }

    #[test]
    fn broadcast_versions_and_immutability() {
        let (_, vocab) = setup(1, 1);
        let mut p = policy(&vocab);
        let mut b = Broadcaster::new(0);
        let s1 = b.broadcast(&p).unwrap();
        let s2 = b.broadcast(&p).unwrap();
        assert_eq!((s1.version, s2.version), (1, 2));
        assert_eq!(*s1.params, *s2.params);
        p.store.get_mut(crate::policy::HEAD_B).unwrap().data_mut()[0] = 9.0;
        assert_ne!(*s1.params, p);
        b.begin_rollout();
        assert_eq!(b.broadcast(&p).unwrap_err(), OrchestratorError::BroadcastDuringRollout);
        b.end_rollout();
        assert_eq!(b.broadcast(&p).unwrap().version, 3);
    }

    #[test]
    fn one_env_per_shard_matches_single_shard() {
        let (mut a, _) = setup(4, 1);
        let (mut b, _) = setup(4, 4);
        let sampler = UniformSampler { num_tasks: a.tasks.len() };
        for t in 0..30 {
            let acts: Vec<_> = (0..4).map(|i| ActionVector([0.3 * ((t + i) % 3) as f64 - 0.3, 0.2, -0.4, 0.0, 0.0, 0.5, 1.0])).collect();
            assert_eq!(a.scatter_actions(&acts, &sampler).unwrap(), b.scatter_actions(&acts, &sampler).unwrap());
        }
        assert_eq!(a.snapshot_slots(), b.snapshot_slots());
    }
}
