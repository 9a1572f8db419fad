use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::suite::TaskSpec;
use super::world::{Env, Observation, StepResult, WorldState};
use super::{SimConfig, SimError};
use crate::par;
use crate::rng::{stream, Purpose, RngState};
use crate::tokenizer::ActionVector;

/// Chooses the task for an automatic reset.
pub trait TaskSampler: Sync {
    fn sample(&self, rng: &mut ChaCha8Rng) -> usize;
}

pub struct UniformSampler {
    pub num_tasks: usize,
}

impl TaskSampler for UniformSampler {
    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.gen_range(0..self.num_tasks)
    }
}

/// One environment with its own reset stream keyed by `(master_seed, env_id)`.
#[derive(Clone, Debug)]
pub struct EnvSlot {
    pub env_id: usize,
    pub env: Env,
    pub rng: ChaCha8Rng,
}

/// Serializable snapshot of an [`EnvSlot`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSlotState {
    pub env_id: usize,
    pub task_id: usize,
    pub world: WorldState,
    pub rng: RngState,
}

impl EnvSlot {
    /// Creates the slot and resets it to a task drawn from its own stream.
    pub fn new(
        env_id: usize,
        master_seed: u64,
        config: &SimConfig,
        tasks: &[Arc<TaskSpec>],
        sampler: &dyn TaskSampler,
    ) -> (Self, Observation) {
        let mut rng = stream(master_seed, Purpose::EnvReset, env_id as u64);
        let task = sampler.sample(&mut rng);
        let seed = rng.gen::<u64>();
        let (env, obs) = Env::reset(config, tasks[task].clone(), seed);
        (Self { env_id, env, rng }, obs)
    }

    /// Steps the environment; on episode end the slot resets itself to a
    /// freshly sampled task and `next_obs` holds the reset observation.
    pub fn step_auto_reset(
        &mut self,
        action: &ActionVector,
        tasks: &[Arc<TaskSpec>],
        sampler: &dyn TaskSampler,
    ) -> Result<StepResult, SimError> {
        let mut r = self.env.step(action)?;
        if r.done {
            let task = sampler.sample(&mut self.rng);
            let seed = self.rng.gen::<u64>();
            let (env, obs) = Env::reset(&self.env.config, tasks[task].clone(), seed);
            self.env = env;
            r.next_obs = obs;
        }
        Ok(r)
    }

    pub fn snapshot(&self) -> EnvSlotState {
        EnvSlotState {
            env_id: self.env_id,
            task_id: self.env.task.task_id,
            world: self.env.state.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn restore(
        s: &EnvSlotState,
        config: &SimConfig,
        tasks: &[Arc<TaskSpec>],
    ) -> Result<Self, SimError> {
        let task = tasks
            .get(s.task_id)
            .ok_or_else(|| SimError::InvalidTask(format!("task {} not in suite", s.task_id)))?
            .clone();
        let rng = s.rng.restore().map_err(|e| SimError::InvalidTask(format!("bad rng state: {e}")))?;
        Ok(Self {
            env_id: s.env_id,
            env: Env { config: config.clone(), task, state: s.world.clone() },
            rng,
        })
    }

    pub fn observe(&self) -> Observation {
        self.env.observe()
    }
}

/// Batch of independent environments stepped together.
pub struct VecEnv {
    pub config: SimConfig,
    pub tasks: Vec<Arc<TaskSpec>>,
    pub slots: Vec<EnvSlot>,
}

impl VecEnv {
    pub fn new(
        config: SimConfig,
        tasks: Vec<Arc<TaskSpec>>,
        num_envs: usize,
        master_seed: u64,
        sampler: &dyn TaskSampler,
    ) -> (Self, Vec<Observation>) {
        let (slots, obs) = (0..num_envs)
            .map(|i| EnvSlot::new(i, master_seed, &config, &tasks, sampler))
            .unzip();
        (Self { config, tasks, slots }, obs)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Resets every environment to an explicit `(task, seed)`.
    pub fn vec_reset(&mut self, tasks: &[usize], seeds: &[u64]) -> Result<Vec<Observation>, SimError> {
        for len in [tasks.len(), seeds.len()] {
            if len != self.slots.len() {
                return Err(SimError::BatchMismatch { expected: self.slots.len(), got: len });
            }
        }
        let mut out = Vec::with_capacity(tasks.len());
        for ((slot, &t), &seed) in self.slots.iter_mut().zip(tasks).zip(seeds) {
            let task = self
                .tasks
                .get(t)
                .ok_or_else(|| SimError::InvalidTask(format!("task {t} not in suite")))?;
            let (env, obs) = Env::reset(&self.config, task.clone(), seed);
            slot.env = env;
            out.push(obs);
        }
        Ok(out)
    }

    pub fn vec_step(
        &mut self,
        actions: &[ActionVector],
        sampler: &dyn TaskSampler,
    ) -> Result<Vec<StepResult>, SimError> {
        if actions.len() != self.slots.len() {
            return Err(SimError::BatchMismatch { expected: self.slots.len(), got: actions.len() });
        }
        let tasks = &self.tasks;
        let mut pairs: Vec<(&mut EnvSlot, &ActionVector)> = self.slots.iter_mut().zip(actions).collect();
        par::map_mut(&mut pairs, |(slot, a)| slot.step_auto_reset(a, tasks, sampler))
            .into_iter()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{expert_action, make_suite, SuiteConfig};

    fn setup(n: usize) -> (VecEnv, Vec<Observation>) {
        let s = make_suite(&SuiteConfig::default());
        let tasks: Vec<_> = s.tasks.into_iter().map(Arc::new).collect();
        let sampler = UniformSampler { num_tasks: tasks.len() };
        VecEnv::new(SimConfig::default(), tasks, n, 42, &sampler)
    }

    fn expert_actions(v: &VecEnv) -> Vec<ActionVector> {
        v.slots.iter().map(|s| expert_action(&s.env.state, &s.env.task, &s.env.config)).collect()
    }

    #[test]
    fn single_env_matches_scalar_step() {
        let (mut v, _) = setup(1);
        let mut scalar = v.slots[0].env.clone();
        let sampler = UniformSampler { num_tasks: v.tasks.len() };
        for _ in 0..10 {
            let a = expert_actions(&v);
            let r = v.vec_step(&a, &sampler).unwrap();
            let s = scalar.step(&a[0]).unwrap();
            assert_eq!(r[0], s);
        }
    }

    #[test]
    fn batch_matches_scalar_runs() {
        let (mut v, _) = setup(8);
        let mut scalars: Vec<Env> = v.slots.iter().map(|s| s.env.clone()).collect();
        let sampler = UniformSampler { num_tasks: v.tasks.len() };
        let mut live = vec![true; 8];
        for _ in 0..60 {
            let a = expert_actions(&v);
            let r = v.vec_step(&a, &sampler).unwrap();
            for (i, env) in scalars.iter_mut().enumerate() {
                if !live[i] {
                    continue;
                }
                let s = env.step(&a[i]).unwrap();
                if s.done {
                    // Terminal observation is replaced by the auto-reset one.
                    assert_eq!((r[i].sparse_reward, r[i].done, &r[i].info), (s.sparse_reward, s.done, &s.info));
                    live[i] = false;
                } else {
                    assert_eq!(r[i], s);
                }
            }
        }
        assert!(live.iter().all(|l| !l));
    }

    #[test]
    fn permuting_envs_permutes_results() {
        let (mut v, _) = setup(4);
        let sampler = UniformSampler { num_tasks: v.tasks.len() };
        let mut w = VecEnv {
            config: v.config.clone(),
            tasks: v.tasks.clone(),
            slots: v.slots.iter().rev().cloned().collect(),
        };
        for _ in 0..40 {
            let a = expert_actions(&v);
            let b: Vec<_> = a.iter().rev().copied().collect();
            let ra = v.vec_step(&a, &sampler).unwrap();
            let mut rb = w.vec_step(&b, &sampler).unwrap();
            rb.reverse();
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn auto_reset_replaces_terminal_observation() {
        let (mut v, _) = setup(2);
        let sampler = UniformSampler { num_tasks: v.tasks.len() };
        let mut saw_done = false;
        for _ in 0..130 {
            let a = expert_actions(&v);
            for r in v.vec_step(&a, &sampler).unwrap() {
                if r.done {
                    saw_done = true;
                    assert!(r.info.success);
                    // Freshly reset: stage 0 active.
                    let f = &r.next_obs.features;
                    assert_eq!(f[f.len() - 2], 1.0);
                }
            }
        }
        assert!(saw_done);
        assert!(v.slots.iter().all(|s| !s.env.state.done));
    }

    #[test]
    fn length_mismatch_rejected() {
        let (mut v, _) = setup(3);
        let sampler = UniformSampler { num_tasks: v.tasks.len() };
        assert_eq!(
            v.vec_step(&[ActionVector::ZERO; 2], &sampler),
            Err(SimError::BatchMismatch { expected: 3, got: 2 })
        );
        assert!(v.vec_reset(&[0, 1], &[1, 2]).is_err());
    }

    #[test]
    fn snapshot_restore_continues_identically() {
        let (mut v, _) = setup(2);
        let sampler = UniformSampler { num_tasks: v.tasks.len() };
        for _ in 0..7 {
            let a = expert_actions(&v);
            v.vec_step(&a, &sampler).unwrap();
        }
        let snaps: Vec<_> = v.slots.iter().map(EnvSlot::snapshot).collect();
        let json = serde_json::to_string(&snaps).unwrap();
        let back: Vec<EnvSlotState> = serde_json::from_str(&json).unwrap();
        let mut w = VecEnv {
            config: v.config.clone(),
            tasks: v.tasks.clone(),
            slots: back.iter().map(|s| EnvSlot::restore(s, &v.config, &v.tasks).unwrap()).collect(),
        };
        for _ in 0..80 {
            let a = expert_actions(&v);
            assert_eq!(v.vec_step(&a, &sampler).unwrap(), w.vec_step(&a, &sampler).unwrap());
        }
    }
}
