//! The command implementations behind the CLI: demos → SFT → labels →
//! RPRM → RL → eval → export, all rooted in one run directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_policy, load_rprm, policy_container, rprm_container, CheckpointError, Container};
use crate::config::{ConfigError, RunConfig, RESOLVED_CONFIG};
use crate::eval::{evaluate, EvalError, EvalReport, ExpertActor, GreedyPolicy};
use crate::export::{coverage_csv, metrics_csv, ActionRow};
use crate::policy::{PolicyConfig, PolicyError, PolicyParams};
use crate::rl::{MetricsRecord, RlError, TrainSettings, Trainer, WarmupRecord};
use crate::rng::{stream, Purpose};
use crate::rprm::{examples_from_records, label_all, train_rprm, LabelRecord, RprmError, RprmParams, RprmReport, TrajectoryLog};
use crate::sft::{bc_examples, bc_train, generate_demos, DemoDataset, DemoManifest, SftError, SftReport};
use crate::sim::{make_suite, TaskSpec, FEATURE_DIM};
use crate::tokenizer::{TokenizerError, Vocabulary, ACTION_DIMS, BINS_PER_DIM};

pub const DEMOS: &str = "demos.ckpt";
pub const DEMOS_MANIFEST: &str = "demos_manifest.json";
pub const VOCAB: &str = "vocab.tsv";
pub const SUITE: &str = "suite.json";
pub const SFT: &str = "sft.ckpt";
pub const SFT_LOSS: &str = "sft_loss.jsonl";
pub const LABELS: &str = "labels.jsonl";
pub const RPRM: &str = "rprm.ckpt";
pub const RPRM_REPORT: &str = "rprm_report.json";
pub const METRICS: &str = "metrics.jsonl";
pub const WARMUP: &str = "warmup.jsonl";
pub const ACTIONS: &str = "actions.jsonl";
pub const LATEST: &str = "rl_latest.ckpt";
pub const CHECKPOINTS: &str = "checkpoints";
pub const METRICS_CSV: &str = "metrics.csv";
pub const COVERAGE_CSV: &str = "action_coverage.csv";

/// Shuffle-stream tags of the offline stages (RL iterations use small tags).
const SFT_SHUFFLE: u64 = 1 << 40;
const RPRM_SHUFFLE: u64 = (1 << 40) + 1;
/// Init-stream indices.
const POLICY_INIT: u64 = 0;
const RPRM_INIT: u64 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("missing {what} at {path} (run `{hint}` first)")]
    Missing { what: &'static str, path: PathBuf, hint: &'static str },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Sft(#[from] SftError),
    #[error(transparent)]
    Rprm(#[from] RprmError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

impl PipelineError {
    /// 2 config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Rl(RlError::Config(_)) => 2,
            PipelineError::Io { .. }
            | PipelineError::Parse { .. }
            | PipelineError::Missing { .. }
            | PipelineError::Checkpoint(_)
            | PipelineError::Rl(RlError::Checkpoint(_)) => 4,
            _ => 3,
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(io(path))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| PipelineError::Parse { path: path.to_path_buf(), msg: format!("line {}: {e}", i + 1) })
        })
        .collect()
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|x| serde_json::to_string(x).expect("serializes") + "\n").collect()
}

fn append_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io(path))?;
    f.write_all(jsonl(items).as_bytes()).map_err(io(path))
}

/// A resolved config bound to its run directory.
pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct LabelSummary {
    pub records: usize,
    pub skipped_unsuccessful: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SftLossLine {
    epoch: usize,
    loss: f64,
}

impl Run {
    /// Creates the run directory and writes the resolved-config echo.
    pub fn open(cfg: RunConfig) -> Result<Self, PipelineError> {
        let dir = cfg.run_dir();
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        write_file(&dir.join(RESOLVED_CONFIG), &cfg.echo())?;
        Ok(Self { cfg, dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, name: &str, what: &'static str, hint: &'static str) -> Result<PathBuf, PipelineError> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::Missing { what, path: p, hint })
        }
    }

    /// Tasks and vocabulary; a pure function of the suite config.
    pub fn suite(&self) -> (Vec<Arc<TaskSpec>>, Vocabulary) {
        let s = make_suite(&self.cfg.suite);
        (s.tasks.into_iter().map(Arc::new).collect(), s.vocab)
    }

    pub fn policy_config(&self, vocab: &Vocabulary, width: usize) -> PolicyConfig {
        PolicyConfig {
            width,
            feature_dim: FEATURE_DIM,
            instruction_ids: vocab.instruction_ids(),
            action_dims: ACTION_DIMS,
            bins: BINS_PER_DIM,
            action_token_base: vocab.action_token_base(),
        }
    }

    pub fn gen_demos(&self) -> Result<DemoManifest, PipelineError> {
        let (tasks, vocab) = self.suite();
        let suite = make_suite(&self.cfg.suite);
        let data = generate_demos(&tasks, &self.cfg.sim, self.cfg.sft.episodes_per_task, self.cfg.run.seed);
        for w in &data.metadata.warnings {
            eprintln!("warning: {w}");
        }
        let p = self.path(DEMOS);
        data.to_container().save(&p)?;
        let manifest = data.manifest(tasks.len());
        write_file(&self.path(DEMOS_MANIFEST), &(serde_json::to_string_pretty(&manifest).expect("serializes") + "\n"))?;
        write_file(&self.path(VOCAB), &vocab.to_tsv())?;
        write_file(&self.path(SUITE), &suite.to_json())?;
        Ok(manifest)
    }

    fn demos(&self) -> Result<DemoDataset, PipelineError> {
        let p = self.require(DEMOS, "demonstration dataset", "gen-demos")?;
        Ok(DemoDataset::from_container(&Container::load(&p)?)?)
    }

    pub fn sft(&self) -> Result<SftReport, PipelineError> {
        let (_, vocab) = self.suite();
        let data = self.demos()?;
        let examples = bc_examples(&data, &vocab)?;
        let init = PolicyParams::init(
            self.policy_config(&vocab, self.cfg.policy.width),
            &mut stream(self.cfg.run.seed, Purpose::Init, POLICY_INIT),
        );
        let mut rng = stream(self.cfg.run.seed, Purpose::Shuffle, SFT_SHUFFLE);
        let (params, report) = bc_train(init, &examples, &self.cfg.sft, &mut rng)?;
        let lines: Vec<SftLossLine> =
            report.epoch_losses.iter().enumerate().map(|(epoch, &loss)| SftLossLine { epoch, loss }).collect();
        write_file(&self.path(SFT_LOSS), &jsonl(&lines))?;
        let extra = serde_json::json!({ "stage": "sft", "report": report, "config_digest": self.cfg.digest() });
        policy_container(&params, extra).save(&self.path(SFT))?;
        Ok(report)
    }

    /// Trajectories from `input` (JSON Lines of trajectory logs) or, by
    /// default, from the demonstration dataset.
    pub fn trajectories(&self, input: Option<&Path>) -> Result<Vec<TrajectoryLog>, PipelineError> {
        match input {
            Some(p) => read_jsonl(p),
            None => {
                let (_, vocab) = self.suite();
                Ok(self.demos()?.to_trajectories(&vocab)?)
            }
        }
    }

    pub fn label(&self, input: Option<&Path>) -> Result<LabelSummary, PipelineError> {
        let trajs = self.trajectories(input)?;
        let (records, skipped) = label_all(&trajs, &self.cfg.rprm)?;
        if skipped > 0 {
            eprintln!("warning: skipped {skipped} unsuccessful episode(s)");
        }
        write_file(&self.path(LABELS), &jsonl(&records))?;
        Ok(LabelSummary { records: records.len(), skipped_unsuccessful: skipped })
    }

    pub fn train_rprm(&self, input: Option<&Path>) -> Result<RprmReport, PipelineError> {
        let (_, vocab) = self.suite();
        let labels_path = self.require(LABELS, "label file", "label")?;
        let records: Vec<LabelRecord> = read_jsonl(&labels_path)?;
        let trajs = self.trajectories(input)?;
        let data = examples_from_records(&trajs, &records)?;
        let init = RprmParams::init(
            self.policy_config(&vocab, self.cfg.rprm.width),
            &mut stream(self.cfg.run.seed, Purpose::Init, RPRM_INIT),
        );
        let mut rng = stream(self.cfg.run.seed, Purpose::Shuffle, RPRM_SHUFFLE);
        let (params, report) = train_rprm(init, &data, &self.cfg.rprm, &mut rng)?;
        write_file(&self.path(RPRM_REPORT), &(serde_json::to_string_pretty(&report).expect("serializes") + "\n"))?;
        rprm_container(&params, serde_json::json!({ "report": report })).save(&self.path(RPRM))?;
        Ok(report)
    }

    fn settings(&self) -> TrainSettings {
        let c = &self.cfg;
        TrainSettings {
            ppo: c.ppo.clone(),
            curriculum: c.curriculum.clone(),
            beta: c.rprm.beta,
            eval_every: c.eval.every,
            eval_episodes_per_task: c.eval.episodes_per_task,
            eval_seed: c.eval.seed,
            seed: c.run.seed,
        }
    }

    /// Digest of the settings that must agree between a checkpoint and a
    /// resumed run (the iteration budget and checkpoint cadence may change).
    pub fn training_digest(&self) -> String {
        let mut c = self.cfg.clone();
        c.ppo.iterations = 0;
        c.run.checkpoint_every = 0;
        c.eval.every = 0;
        c.digest()
    }

    fn load_sft(&self) -> Result<PolicyParams, PipelineError> {
        let p = self.require(SFT, "SFT checkpoint", "sft")?;
        Ok(load_policy(&Container::load(&p)?)?)
    }

    /// Builds a fresh trainer, or restores `rl_latest.ckpt` when `resume`.
    pub fn trainer(&self, resume: bool) -> Result<Trainer, PipelineError> {
        let (tasks, vocab) = self.suite();
        let latest = self.path(LATEST);
        if resume && latest.exists() {
            let c = Container::load(&latest)?;
            let t = Trainer::from_container(&c, tasks, self.cfg.sim.clone(), vocab)?;
            if t.config_digest != self.training_digest() {
                return Err(ConfigError::BadValue {
                    key: "resume".into(),
                    msg: format!("{} was written under a different configuration", latest.display()),
                }
                .into());
            }
            let mut t = t;
            t.settings.ppo.iterations = self.cfg.ppo.iterations;
            t.settings.eval_every = self.cfg.eval.every;
            return Ok(t);
        }
        let policy = self.load_sft()?;
        let rprm = if self.cfg.rprm.beta != 0.0 {
            let p = self.require(RPRM, "reward-model checkpoint", "train-rprm")?;
            Some(load_rprm(&Container::load(&p)?)?)
        } else {
            None
        };
        let mut t = Trainer::new(self.settings(), policy, rprm, tasks, self.cfg.sim.clone(), vocab)?;
        t.config_digest = self.training_digest();
        Ok(t)
    }

    fn save_trainer(&self, t: &Trainer, cadence: bool) -> Result<(), PipelineError> {
        let c = t.to_container();
        if cadence {
            let dir = self.path(CHECKPOINTS);
            fs::create_dir_all(&dir).map_err(io(&dir))?;
            c.save(&dir.join(format!("rl_{:05}.ckpt", t.iteration)))?;
        }
        c.save(&self.path(LATEST))?;
        Ok(())
    }

    fn log_actions(&self, t: &Trainer, source: &str) -> Result<(), PipelineError> {
        let rows: Vec<ActionRow> =
            t.last_actions.iter().map(|&(dx, dy)| ActionRow { source: source.into(), dx, dy }).collect();
        append_jsonl(&self.path(ACTIONS), &rows)
    }

    /// Algorithm 1. Returns the metric records emitted by this invocation.
    pub fn train(&self, resume: bool) -> Result<Vec<MetricsRecord>, PipelineError> {
        let mut t = self.trainer(resume)?;
        let metrics_path = self.path(METRICS);
        if resume && self.path(LATEST).exists() {
            // Drop records written after the checkpoint being resumed.
            let mut kept: Vec<MetricsRecord> =
                if metrics_path.exists() { read_jsonl(&metrics_path)? } else { Vec::new() };
            kept.retain(|r| r.iter <= t.iteration);
            write_file(&metrics_path, &jsonl(&kept))?;
        } else {
            for f in [METRICS, WARMUP, ACTIONS] {
                let p = self.path(f);
                if p.exists() {
                    fs::remove_file(&p).map_err(io(&p))?;
                }
            }
        }
        let warm: Vec<WarmupRecord> = t.critic_warmup()?;
        if !warm.is_empty() {
            append_jsonl(&self.path(WARMUP), &warm)?;
            self.log_actions(&t, "sft")?;
        }
        let mut out = Vec::new();
        let every = self.cfg.run.checkpoint_every;
        while t.iteration < t.settings.ppo.iterations as u64 {
            let first_rollout = t.iteration == 0 && warm.is_empty() && !self.path(ACTIONS).exists();
            let rec = t.iterate()?;
            if first_rollout {
                self.log_actions(&t, "sft")?;
            }
            append_jsonl(&metrics_path, std::slice::from_ref(&rec))?;
            out.push(rec);
            if every > 0 && t.iteration % every == 0 {
                self.save_trainer(&t, true)?;
            }
        }
        if !out.is_empty() {
            self.log_actions(&t, "rl")?;
        }
        self.save_trainer(&t, false)?;
        Ok(out)
    }

    /// Greedy evaluation of `checkpoint` (default: latest RL, else SFT), or
    /// of the scripted expert.
    pub fn eval(
        &self,
        checkpoint: Option<&Path>,
        episodes: Option<usize>,
        expert: bool,
    ) -> Result<EvalReport, PipelineError> {
        let (tasks, vocab) = self.suite();
        let n = episodes.unwrap_or(self.cfg.eval.episodes_per_task);
        let (report, name) = if expert {
            (evaluate(&ExpertActor, &tasks, &self.cfg.sim, n, self.cfg.eval.seed)?, "expert".to_string())
        } else {
            let path = match checkpoint {
                Some(p) => p.to_path_buf(),
                None if self.path(LATEST).exists() => self.path(LATEST),
                None => self.require(SFT, "checkpoint", "sft")?,
            };
            let params = load_policy(&Container::load(&path)?)?;
            let actor = GreedyPolicy { params: &params, vocab: &vocab };
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (evaluate(&actor, &tasks, &self.cfg.sim, n, self.cfg.eval.seed)?, stem)
        };
        let out = self.path(&format!("eval_{name}.json"));
        write_file(&out, &(serde_json::to_string_pretty(&report).expect("serializes") + "\n"))?;
        Ok(report)
    }

    /// `kind` is `metrics` or `action-coverage`; returns the CSV path.
    pub fn export(&self, kind: ExportKind) -> Result<PathBuf, PipelineError> {
        let (csv, name) = match kind {
            ExportKind::Metrics => {
                let p = self.require(METRICS, "metrics stream", "train")?;
                (metrics_csv(&read_jsonl::<MetricsRecord>(&p)?), METRICS_CSV)
            }
            ExportKind::ActionCoverage => {
                let p = self.require(ACTIONS, "action log", "train")?;
                (coverage_csv(&read_jsonl::<ActionRow>(&p)?), COVERAGE_CSV)
            }
        };
        let out = self.path(name);
        write_file(&out, &csv)?;
        Ok(out)
    }

    pub fn metrics(&self) -> Result<Vec<MetricsRecord>, PipelineError> {
        read_jsonl(&self.path(METRICS))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportKind {
    Metrics,
    ActionCoverage,
}
