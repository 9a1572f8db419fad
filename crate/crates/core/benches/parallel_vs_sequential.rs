//! One RL iteration (rollout + PPO update) with the environment shards and
//! minibatch work on the rayon pool versus on the calling thread. Both modes
//! produce bit-identical results; only wall time differs.

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};

use deskrl::curriculum::CurriculumConfig;
use deskrl::par;
use deskrl::policy::{PolicyConfig, PolicyParams};
use deskrl::rl::{PpoConfig, TrainSettings, Trainer};
use deskrl::rng::{stream, Purpose};
use deskrl::sim::{make_suite, SimConfig, SuiteConfig, FEATURE_DIM};

fn trainer() -> Trainer {
    let s = make_suite(&SuiteConfig::default());
    let tasks: Vec<_> = s.tasks.into_iter().map(Arc::new).collect();
    let cfg = PolicyConfig {
        width: 64,
        feature_dim: FEATURE_DIM,
        instruction_ids: s.vocab.instruction_ids(),
        action_dims: 7,
        bins: 256,
        action_token_base: s.vocab.action_token_base(),
    };
    let policy = PolicyParams::init(cfg, &mut stream(0, Purpose::Init, 0));
    let settings = TrainSettings {
        ppo: PpoConfig { num_envs: 16, steps_per_update: 16, minibatch_size: 64, ..Default::default() },
        curriculum: CurriculumConfig::default(),
        beta: 0.0,
        eval_every: 0,
        eval_episodes_per_task: 0,
        eval_seed: 0,
        seed: 0,
    };
    Trainer::new(settings, policy, None, tasks, SimConfig::default(), s.vocab).expect("trainer")
}

fn bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("rl_iteration_n16_m16");
    group.sample_size(10);
    for (name, sequential) in [("parallel", false), ("sequential", true)] {
        par::force_sequential(sequential);
        let mut t = trainer();
        group.bench_function(name, |b| b.iter(|| t.iterate().expect("iteration")));
    }
    par::force_sequential(false);
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
