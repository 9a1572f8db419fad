//! Greedy evaluation with binomial confidence intervals.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::{PolicyError, PolicyParams};
use crate::rng::{stream, Purpose};
use crate::sim::{expert_action, Env, Observation, SimConfig, SuiteId, TaskSpec};
use crate::tokenizer::{ActionVector, TokenizerError, Vocabulary};

/// Rows decoded per batched forward pass during evaluation.
const EVAL_BATCH: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Anything that maps a batch of live environments to actions.
pub trait Actor: Sync {
    fn act(&self, envs: &[&Env], obs: &[&Observation]) -> Result<Vec<ActionVector>, EvalError>;
}

/// Greedy (temperature 0) decoding of a policy.
pub struct GreedyPolicy<'a> {
    pub params: &'a PolicyParams,
    pub vocab: &'a Vocabulary,
}

impl Actor for GreedyPolicy<'_> {
    fn act(&self, _envs: &[&Env], obs: &[&Observation]) -> Result<Vec<ActionVector>, EvalError> {
        let mut out = Vec::with_capacity(obs.len());
        for chunk in obs.chunks(EVAL_BATCH) {
            for d in self.params.sample_batch(chunk, 0.0, &mut [])? {
                out.push(self.vocab.decode_tokens(&d.tokens)?);
            }
        }
        Ok(out)
    }
}

/// The scripted expert, for calibrating the evaluator.
pub struct ExpertActor;

impl Actor for ExpertActor {
    fn act(&self, envs: &[&Env], _obs: &[&Observation]) -> Result<Vec<ActionVector>, EvalError> {
        Ok(envs.iter().map(|e| expert_action(&e.state, &e.task, &e.config)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateCi {
    pub successes: usize,
    pub episodes: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl RateCi {
    pub fn new(successes: usize, episodes: usize) -> Self {
        let (ci_low, ci_high) = wilson_interval(successes, episodes);
        let rate = if episodes == 0 { 0.0 } else { successes as f64 / episodes as f64 };
        Self { successes, episodes, rate, ci_low, ci_high }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: usize,
    pub suite: SuiteId,
    pub instruction: String,
    #[serde(flatten)]
    pub result: RateCi,
    /// Mean length of successful episodes.
    pub mean_success_len: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: RateCi,
    pub per_suite: Vec<(SuiteId, RateCi)>,
    pub per_task: Vec<TaskEval>,
    pub seed: u64,
    pub episodes_per_task: usize,
}

/// 95% Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959963984540054;
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let denom = 1.0 + z * z / n_f;
    let center = (p + z * z / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z * z / (4.0 * n_f * n_f)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Per-episode seeds of the evaluation set: a pure function of
/// `(seed, task index, episode)`.
pub fn eval_seeds(seed: u64, task_index: usize, episodes: usize) -> Vec<u64> {
    let mut rng = stream(seed, Purpose::Eval, task_index as u64);
    (0..episodes).map(|_| rng.gen()).collect()
}

/// Runs `episodes_per_task` episodes of every task in lockstep.
pub fn evaluate(
    actor: &dyn Actor,
    tasks: &[Arc<TaskSpec>],
    sim: &SimConfig,
    episodes_per_task: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let mut envs = Vec::new();
    let mut obs = Vec::new();
    let mut owner = Vec::new();
    for (j, task) in tasks.iter().enumerate() {
        for s in eval_seeds(seed, j, episodes_per_task) {
            let (e, o) = Env::reset(sim, task.clone(), s);
            envs.push(e);
            obs.push(o);
            owner.push(j);
        }
    }
    let mut outcome: Vec<Option<(bool, usize)>> = vec![None; envs.len()];
    loop {
        let live: Vec<usize> = (0..envs.len()).filter(|&i| outcome[i].is_none()).collect();
        if live.is_empty() {
            break;
        }
        let env_refs: Vec<&Env> = live.iter().map(|&i| &envs[i]).collect();
        let obs_refs: Vec<&Observation> = live.iter().map(|&i| &obs[i]).collect();
        let actions = actor.act(&env_refs, &obs_refs)?;
        for (&i, a) in live.iter().zip(actions) {
            let r = envs[i].step(&a).expect("live episode");
            if r.done {
                outcome[i] = Some((r.info.success, r.info.episode_len));
            }
            obs[i] = r.next_obs;
        }
    }
    let mut per_task = Vec::with_capacity(tasks.len());
    for (j, task) in tasks.iter().enumerate() {
        let mine: Vec<(bool, usize)> = (0..envs.len()).filter(|&i| owner[i] == j).filter_map(|i| outcome[i]).collect();
        let succ: Vec<usize> = mine.iter().filter(|(s, _)| *s).map(|(_, l)| *l).collect();
        per_task.push(TaskEval {
            task_id: task.task_id,
            suite: task.suite,
            instruction: task.instruction.clone(),
            result: RateCi::new(succ.len(), mine.len()),
            mean_success_len: (!succ.is_empty()).then(|| succ.iter().sum::<usize>() as f64 / succ.len() as f64),
        });
    }
    let mut per_suite = Vec::new();
    for suite in SuiteId::ALL {
        let ts: Vec<&TaskEval> = per_task.iter().filter(|t| t.suite == suite).collect();
        if !ts.is_empty() {
            let s = ts.iter().map(|t| t.result.successes).sum();
            let n = ts.iter().map(|t| t.result.episodes).sum();
            per_suite.push((suite, RateCi::new(s, n)));
        }
    }
    let s = per_task.iter().map(|t| t.result.successes).sum();
    let n = per_task.iter().map(|t| t.result.episodes).sum();
    Ok(EvalReport { overall: RateCi::new(s, n), per_suite, per_task, seed, episodes_per_task })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use crate::sim::{make_suite, SuiteConfig, FEATURE_DIM};

    #[test]
    fn wilson_known_values() {
        let (lo, hi) = wilson_interval(50, 100);
        assert!((lo - 0.4038).abs() < 1e-3 && (hi - 0.5962).abs() < 1e-3);
        assert_eq!(wilson_interval(0, 0), (0.0, 1.0));
        let (lo, hi) = wilson_interval(0, 10);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.2 && hi < 0.35);
    }

    #[test]
    fn expert_scores_high_and_random_scores_low() {
        let s = make_suite(&SuiteConfig::default());
        let tasks: Vec<_> = s.tasks.into_iter().map(Arc::new).collect();
        let sim = SimConfig::default();
        let r = evaluate(&ExpertActor, &tasks, &sim, 5, 1).unwrap();
        assert!(r.overall.rate >= 0.99, "{:?}", r.overall);
        assert_eq!(r.per_suite.len(), 4);
        let cfg = PolicyConfig {
            width: 16,
            feature_dim: FEATURE_DIM,
            instruction_ids: s.vocab.instruction_ids(),
            action_dims: 7,
            bins: 256,
            action_token_base: s.vocab.action_token_base(),
        };
        let p = PolicyParams::init(cfg, &mut stream(0, Purpose::Init, 0));
        let g = GreedyPolicy { params: &p, vocab: &s.vocab };
        let a = evaluate(&g, &tasks, &sim, 2, 1).unwrap();
        let b = evaluate(&g, &tasks, &sim, 2, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.overall.rate < 0.01);
    }
}
