//! Robotic process reward model: pseudo-labels from successful
//! trajectories and a learned per-step progress scorer.
//!
//! Labeling pipeline: split an episode at large gripper-openness changes
//! (milestones), mark steps where the end effector is nearly stationary
//! plus every segment end as keyframes, and label the `window` steps leading
//! up to each keyframe as progress.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{AdamConfig, Graph, NnError, NodeId, ParamStore, Tensor};
use crate::policy::{normal_init, PolicyConfig, PolicyError, Trunk};
use crate::sim::Observation;
use crate::tokenizer::{ActionVector, TokenSequence};

const INSTR_EMBED: &str = "rprm.instr_embed";
const FEAT_W: &str = "rprm.feat_proj.w";
const FEAT_B: &str = "rprm.feat_proj.b";
const TRUNK_W: &str = "rprm.trunk.w";
const TRUNK_B: &str = "rprm.trunk.b";
const ACTION_EMBED: &str = "rprm.action_embed";
const OUT_W: &str = "rprm.out.w";
const OUT_B: &str = "rprm.out.b";

/// Index of the progress class in the 2-way head.
pub const PROGRESS: usize = 1;
pub const NO_PROGRESS: usize = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RprmError {
    #[error(transparent)]
    Model(#[from] PolicyError),
    #[error("episode {0} is unsuccessful; only successful episodes are labeled")]
    Unsuccessful(u64),
    #[error("empty trajectory for episode {0}")]
    EmptyTrajectory(u64),
    #[error("training data contains a single label class")]
    SingleClass,
    #[error("non-finite loss {0} during reward-model training")]
    NonFinite(f64),
    #[error("label for episode {episode_id}, step {t} has no matching trajectory step")]
    UnmatchedLabel { episode_id: u64, t: usize },
}

impl From<NnError> for RprmError {
    fn from(e: NnError) -> Self {
        RprmError::Model(PolicyError::Nn(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RprmConfig {
    /// Gripper-openness change that marks a milestone boundary.
    pub delta_g: f64,
    /// End-effector displacement below which a step is a keyframe.
    pub eps_v: f64,
    /// Steps up to and including a keyframe labeled positive.
    pub window: usize,
    /// Weight of the dense reward.
    pub beta: f64,
    pub width: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Every `holdout_every`-th episode is held out for accuracy.
    pub holdout_every: usize,
}

impl Default for RprmConfig {
    fn default() -> Self {
        Self {
            delta_g: 0.5,
            eps_v: 0.01,
            window: 3,
            beta: 0.005,
            width: 64,
            lr: 1e-3,
            epochs: 8,
            batch_size: 256,
            holdout_every: 10,
        }
    }
}

/// One recorded step. Only `gripper_open` and `gripper_pos` are needed for
/// labeling; the rest feeds reward-model training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajStep {
    #[serde(default)]
    pub obs: Observation,
    #[serde(default)]
    pub tokens: TokenSequence,
    #[serde(default)]
    pub action: ActionVector,
    pub gripper_open: f64,
    pub gripper_pos: [f64; 3],
    #[serde(default)]
    pub sparse_reward: f64,
    #[serde(default)]
    pub done: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub episode_id: u64,
    #[serde(default)]
    pub task_id: usize,
    pub success: bool,
    pub steps: Vec<TrajStep>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    KeyframeWindow,
    Default,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub step: usize,
    pub label: Label,
    pub provenance: Provenance,
}

/// JSON Lines record of one label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub episode_id: u64,
    pub t: usize,
    pub label: Label,
    pub provenance: Provenance,
}

/// Boundaries `t` (a segment ends at `t`) where the openness jumps by more
/// than `delta_g` between steps `t` and `t + 1`.
pub fn segment_milestones(open: &[f64], delta_g: f64) -> Vec<usize> {
    open.windows(2)
        .enumerate()
        .filter(|(_, w)| (w[1] - w[0]).abs() > delta_g)
        .map(|(t, _)| t)
        .collect()
}

/// Inclusive `(start, end)` segments of a length-`len` episode.
pub fn segments(boundaries: &[usize], len: usize) -> Vec<(usize, usize)> {
    if len == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(boundaries.len() + 1);
    let mut start = 0;
    for &b in boundaries {
        if b + 1 < len && b >= start {
            out.push((start, b));
            start = b + 1;
        }
    }
    out.push((start, len - 1));
    out
}

/// Keyframes in `segment`: steps whose next displacement is below `eps_v`,
/// plus the segment's final step.
pub fn detect_keyframes(pos: &[[f64; 3]], segment: (usize, usize), eps_v: f64) -> BTreeSet<usize> {
    let (start, end) = segment;
    let mut keys: BTreeSet<usize> = (start..=end)
        .filter(|&t| t + 1 < pos.len() && dist(&pos[t + 1], &pos[t]) < eps_v)
        .collect();
    keys.insert(end);
    keys
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Steps in `[k - window + 1, k]` for some keyframe `k` are positive.
pub fn assign_labels(len: usize, keyframes: &BTreeSet<usize>, window: usize) -> Vec<PseudoLabel> {
    let mut positive = vec![false; len];
    for &k in keyframes {
        if k >= len {
            continue;
        }
        let lo = (k + 1).saturating_sub(window.max(1));
        positive[lo..=k].iter_mut().for_each(|p| *p = true);
    }
    positive
        .into_iter()
        .enumerate()
        .map(|(step, p)| PseudoLabel {
            step,
            label: if p { Label::Positive } else { Label::Negative },
            provenance: if p { Provenance::KeyframeWindow } else { Provenance::Default },
        })
        .collect()
}

/// Intermediate products of labeling one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLabels {
    pub boundaries: Vec<usize>,
    pub segments: Vec<(usize, usize)>,
    pub keyframes: BTreeSet<usize>,
    pub labels: Vec<PseudoLabel>,
}

pub fn label_episode(traj: &TrajectoryLog, cfg: &RprmConfig) -> Result<EpisodeLabels, RprmError> {
    if !traj.success {
        return Err(RprmError::Unsuccessful(traj.episode_id));
    }
    if traj.steps.is_empty() {
        return Err(RprmError::EmptyTrajectory(traj.episode_id));
    }
    let open: Vec<f64> = traj.steps.iter().map(|s| s.gripper_open).collect();
    let pos: Vec<[f64; 3]> = traj.steps.iter().map(|s| s.gripper_pos).collect();
    let boundaries = segment_milestones(&open, cfg.delta_g);
    let segs = segments(&boundaries, open.len());
    let mut keyframes = BTreeSet::new();
    for &s in &segs {
        keyframes.extend(detect_keyframes(&pos, s, cfg.eps_v));
    }
    let labels = assign_labels(open.len(), &keyframes, cfg.window);
    Ok(EpisodeLabels { boundaries, segments: segs, keyframes, labels })
}

/// Labels every successful episode; returns the records and the number of
/// skipped unsuccessful episodes.
pub fn label_all(trajs: &[TrajectoryLog], cfg: &RprmConfig) -> Result<(Vec<LabelRecord>, usize), RprmError> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for traj in trajs {
        if !traj.success {
            skipped += 1;
            continue;
        }
        for l in label_episode(traj, cfg)?.labels {
            out.push(LabelRecord { episode_id: traj.episode_id, t: l.step, label: l.label, provenance: l.provenance });
        }
    }
    Ok((out, skipped))
}

pub fn densify(sparse: f64, score: f64, beta: f64) -> f64 {
    sparse + beta * score
}

/// One supervised example for the reward model.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub episode_id: u64,
    pub obs: Observation,
    pub tokens: TokenSequence,
    pub positive: bool,
}

/// Joins trajectories with their labels into training examples.
pub fn examples_from(trajs: &[TrajectoryLog], cfg: &RprmConfig) -> Result<Vec<LabeledExample>, RprmError> {
    let mut out = Vec::new();
    for traj in trajs.iter().filter(|t| t.success) {
        let labels = label_episode(traj, cfg)?.labels;
        for (step, l) in traj.steps.iter().zip(labels) {
            out.push(LabeledExample {
                episode_id: traj.episode_id,
                obs: step.obs.clone(),
                tokens: step.tokens.clone(),
                positive: l.label == Label::Positive,
            });
        }
    }
    Ok(out)
}

/// Joins label records (as written by the labeler) with the trajectories
/// they were computed from.
pub fn examples_from_records(
    trajs: &[TrajectoryLog],
    records: &[LabelRecord],
) -> Result<Vec<LabeledExample>, RprmError> {
    let by_id: std::collections::BTreeMap<u64, &TrajectoryLog> = trajs.iter().map(|t| (t.episode_id, t)).collect();
    records
        .iter()
        .map(|r| {
            let step = by_id
                .get(&r.episode_id)
                .and_then(|t| t.steps.get(r.t))
                .ok_or(RprmError::UnmatchedLabel { episode_id: r.episode_id, t: r.t })?;
            Ok(LabeledExample {
                episode_id: r.episode_id,
                obs: step.obs.clone(),
                tokens: step.tokens.clone(),
                positive: r.label == Label::Positive,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RprmParams {
    pub shape: PolicyConfig,
    pub store: ParamStore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RprmReport {
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
    pub heldout_accuracy: f64,
    pub heldout_examples: usize,
    pub train_examples: usize,
    pub mean_score_positive: f64,
    pub mean_score_negative: f64,
}

/// Forward graph of a batch, kept for the backward pass.
pub struct RprmEval<'g> {
    graph: Graph<'g>,
    xent: NodeId,
    /// Probability of the progress class per row.
    pub scores: Vec<f64>,
    /// Per-row cross-entropy of the given label.
    pub losses: Vec<f64>,
}

impl RprmEval<'_> {
    /// Gradient of the mean cross-entropy.
    pub fn backward_mean(&mut self) -> Result<crate::nn::Gradients, RprmError> {
        let b = self.losses.len();
        let mut seed = vec![0.0; 2 * b];
        for r in 0..b {
            seed[2 * r] = 1.0 / b as f64;
        }
        Ok(self.graph.backward_with(vec![(self.xent, Tensor::new(vec![b, 2], seed)?)])?)
    }
}

impl RprmParams {
    /// `shape.bins`/`action_dims` describe the action tokens the model reads;
    /// the output head is always 2-way.
    pub fn init(shape: PolicyConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = shape.width;
        let mut store = ParamStore::new();
        trunk_for(&shape).init(&mut store, w, rng);
        store.insert(ACTION_EMBED, normal_init(shape.action_dims * shape.bins, w, rng));
        store.insert(OUT_W, Tensor::zeros(&[w, 2]));
        store.insert(OUT_B, Tensor::zeros(&[2]));
        Self { shape, store }
    }

    fn token_bag(&self, tokens: &TokenSequence) -> Result<Vec<usize>, RprmError> {
        let s = &self.shape;
        if tokens.len() != s.action_dims {
            return Err(PolicyError::WrongLength { expected: s.action_dims, got: tokens.len() }.into());
        }
        tokens
            .as_slice()
            .iter()
            .enumerate()
            .map(|(position, &token)| {
                token
                    .checked_sub(s.action_token_base)
                    .filter(|&b| b < s.bins)
                    .map(|b| position * s.bins + b)
                    .ok_or(PolicyError::OutOfRange { position, token }.into())
            })
            .collect()
    }

    /// Evaluates a batch; `labels` selects the cross-entropy targets
    /// (defaults to the progress class when absent).
    pub fn evaluate<'g>(
        &'g self,
        obs: &[&Observation],
        tokens: &[&TokenSequence],
        labels: Option<&[bool]>,
    ) -> Result<RprmEval<'g>, RprmError> {
        if tokens.len() != obs.len() || labels.is_some_and(|l| l.len() != obs.len()) {
            return Err(PolicyError::Batch(format!("{} observations, {} token rows", obs.len(), tokens.len())).into());
        }
        let mut g = Graph::new();
        let ctx = trunk_for(&self.shape).build(&mut g, obs)?;
        let bags = tokens.iter().map(|t| self.token_bag(t)).collect::<Result<Vec<_>, _>>()?;
        let table = g.param(ACTION_EMBED);
        let a = g.gather(table, bags);
        let pre = g.add(ctx, a);
        let u = g.tanh(pre);
        let w = g.param(OUT_W);
        let b = g.param(OUT_B);
        let z = g.matmul(u, w);
        let logits = g.add(z, b);
        let targets = (0..obs.len())
            .map(|i| match labels {
                Some(l) if !l[i] => NO_PROGRESS,
                _ => PROGRESS,
            })
            .collect();
        let xent = g.softmax_xent(logits, targets);
        g.forward(&self.store)?;
        let losses: Vec<f64> = g.value(xent).expect("evaluated").data().iter().step_by(2).copied().collect();
        let probs = g.probs(xent).expect("evaluated");
        let scores = probs.chunks(2).map(|p| p[PROGRESS]).collect();
        Ok(RprmEval { graph: g, xent, scores, losses })
    }

    /// Probability of the progress token for each `(obs, tokens)` row.
    pub fn score_batch(&self, obs: &[&Observation], tokens: &[&TokenSequence]) -> Result<Vec<f64>, RprmError> {
        if obs.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.evaluate(obs, tokens, None)?.scores)
    }

    pub fn score(&self, obs: &Observation, tokens: &TokenSequence) -> Result<f64, RprmError> {
        Ok(self.score_batch(&[obs], &[tokens])?[0])
    }
}

fn trunk_for(shape: &PolicyConfig) -> Trunk<'static> {
    Trunk {
        instr_embed: INSTR_EMBED,
        feat_w: FEAT_W,
        feat_b: FEAT_B,
        trunk_w: TRUNK_W,
        trunk_b: TRUNK_B,
        feature_dim: shape.feature_dim,
        instruction_ids: shape.instruction_ids,
    }
}

/// Minimizes the 2-way cross-entropy (Eq. 3 with a progress/no-progress
/// vocabulary). Every `holdout_every`-th episode is held out.
pub fn train_rprm(
    mut params: RprmParams,
    data: &[LabeledExample],
    cfg: &RprmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(RprmParams, RprmReport), RprmError> {
    let has_pos = data.iter().any(|e| e.positive);
    let has_neg = data.iter().any(|e| !e.positive);
    if !has_pos || !has_neg {
        return Err(RprmError::SingleClass);
    }
    let held = |e: &LabeledExample| cfg.holdout_every > 1 && e.episode_id.is_multiple_of(cfg.holdout_every as u64);
    let train: Vec<&LabeledExample> = data.iter().filter(|e| !held(e)).collect();
    let test: Vec<&LabeledExample> = data.iter().filter(|e| held(e)).collect();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mean_loss = |p: &RprmParams, set: &[&LabeledExample]| -> Result<f64, RprmError> {
        let mut total = 0.0;
        for chunk in set.chunks(1024) {
            let (o, t, l) = unzip(chunk);
            total += p.evaluate(&o, &t, Some(&l))?.losses.iter().sum::<f64>();
        }
        Ok(total / set.len().max(1) as f64)
    };
    let initial_loss = mean_loss(&params, &train)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&LabeledExample> = idx.iter().map(|&i| train[i]).collect();
            let (o, t, l) = unzip(&batch);
            let grads = {
                let mut ev = params.evaluate(&o, &t, Some(&l))?;
                total += ev.losses.iter().sum::<f64>();
                ev.backward_mean()?
            };
            params.store.adam_step(&grads, &adam)?;
        }
        let epoch_loss = total / train.len().max(1) as f64;
        if !epoch_loss.is_finite() {
            return Err(RprmError::NonFinite(epoch_loss));
        }
        epoch_losses.push(epoch_loss);
    }
    let (mut correct, mut pos, mut neg) = (0usize, (0.0, 0usize), (0.0, 0usize));
    for chunk in test.chunks(1024) {
        let (o, t, l) = unzip(chunk);
        let scores = params.score_batch(&o, &t)?;
        for (s, &label) in scores.iter().zip(&l) {
            if (*s >= 0.5) == label {
                correct += 1;
            }
            let acc = if label { &mut pos } else { &mut neg };
            acc.0 += s;
            acc.1 += 1;
        }
    }
    let report = RprmReport {
        epoch_losses,
        initial_loss,
        heldout_accuracy: correct as f64 / test.len().max(1) as f64,
        heldout_examples: test.len(),
        train_examples: train.len(),
        mean_score_positive: pos.0 / pos.1.max(1) as f64,
        mean_score_negative: neg.0 / neg.1.max(1) as f64,
    };
    Ok((params, report))
}

fn unzip<'e>(set: &[&'e LabeledExample]) -> (Vec<&'e Observation>, Vec<&'e TokenSequence>, Vec<bool>) {
    (
        set.iter().map(|e| &e.obs).collect(),
        set.iter().map(|e| &e.tokens).collect(),
        set.iter().map(|e| e.positive).collect(),
    )
}
