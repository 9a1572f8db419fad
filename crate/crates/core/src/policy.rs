//! Auto-regressive token-action policy with a shared value head.
//!
//! Architecture (all widths `W`):
//! ```text
//! h1   = tanh(features · W1 + b1 + Σ instr_embed[word])
//! ctx  = tanh(h1 · W2 + b2)
//! u_i  = tanh(ctx + token_embed[marker_i] + Σ_{j<i} token_embed[j·bins + t_j])
//! π(t_i | ·) = softmax(u_i · Wh + bh)
//! V    = ctx · Wv + bv
//! ```
//! The token head is shared across steps; previous tokens enter through
//! position-tagged embeddings, which keeps the decoding auto-regressive.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    init_orthogonal, softmax_row, Gradients, Graph, NnError, NodeId, ParamStore, Tensor,
};
use crate::rng::standard_normal;
use crate::sim::Observation;
use crate::tokenizer::{TokenSequence, PAD_TOKEN};

pub const INSTR_EMBED: &str = "policy.instr_embed";
pub const FEAT_W: &str = "policy.feat_proj.w";
pub const FEAT_B: &str = "policy.feat_proj.b";
pub const TRUNK_W: &str = "policy.trunk.w";
pub const TRUNK_B: &str = "policy.trunk.b";
pub const TOKEN_EMBED: &str = "policy.token_embed";
pub const HEAD_W: &str = "policy.token_head.w";
pub const HEAD_B: &str = "policy.token_head.b";
pub const VALUE_W: &str = "policy.value_head.w";
pub const VALUE_B: &str = "policy.value_head.b";

/// Standard deviation of the embedding-table initialization.
const EMBED_INIT_STD: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("observation has {got} features, policy expects {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("instruction token {token} outside the {rows}-row embedding table")]
    InstructionToken { token: usize, rows: usize },
    #[error("expected {expected} action tokens, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("token {token} at position {position} is outside the action range")]
    OutOfRange { position: usize, token: usize },
    #[error("temperature must be finite and >= 0, got {0}")]
    BadTemperature(f64),
    #[error("batch length mismatch: {0}")]
    Batch(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub width: usize,
    pub feature_dim: usize,
    /// Rows of the instruction embedding table (ids below the action range).
    pub instruction_ids: usize,
    pub action_dims: usize,
    pub bins: usize,
    /// Vocabulary id of bin 0.
    pub action_token_base: usize,
}

impl PolicyConfig {
    fn marker_row(&self, step: usize) -> usize {
        self.action_dims * self.bins + step
    }

    /// Embedding bag for step `step` given the earlier tokens (as bins).
    fn step_bag(&self, step: usize, prev_bins: &[usize]) -> Vec<usize> {
        let mut bag = Vec::with_capacity(step + 1);
        bag.push(self.marker_row(step));
        bag.extend(prev_bins.iter().take(step).enumerate().map(|(j, &b)| j * self.bins + b));
        bag
    }
}

/// Parameter names and input sizes of the two-layer observation trunk
/// shared (architecturally) by the policy and the reward model.
pub(crate) struct Trunk<'n> {
    pub instr_embed: &'n str,
    pub feat_w: &'n str,
    pub feat_b: &'n str,
    pub trunk_w: &'n str,
    pub trunk_b: &'n str,
    pub feature_dim: usize,
    pub instruction_ids: usize,
}

impl Trunk<'_> {
    /// Adds the trunk for `obs` to `g` and returns the context node `[B, W]`.
    pub fn build(&self, g: &mut Graph<'_>, obs: &[&Observation]) -> Result<NodeId, PolicyError> {
        let mut feats = Vec::with_capacity(obs.len() * self.feature_dim);
        let mut bags = Vec::with_capacity(obs.len());
        for o in obs {
            if o.features.len() != self.feature_dim {
                return Err(PolicyError::FeatureDim { expected: self.feature_dim, got: o.features.len() });
            }
            feats.extend_from_slice(&o.features);
            let mut bag = Vec::new();
            for &t in o.instruction_tokens.as_slice() {
                if t == PAD_TOKEN {
                    continue;
                }
                if t >= self.instruction_ids {
                    return Err(PolicyError::InstructionToken { token: t, rows: self.instruction_ids });
                }
                bag.push(t);
            }
            bags.push(bag);
        }
        let x = g.constant(Tensor::new(vec![obs.len(), self.feature_dim], feats)?);
        let w1 = g.param(self.feat_w);
        let b1 = g.param(self.feat_b);
        let emb = g.param(self.instr_embed);
        let xw = g.matmul(x, w1);
        let xwb = g.add(xw, b1);
        let instr = g.gather(emb, bags);
        let pre1 = g.add(xwb, instr);
        let h1 = g.tanh(pre1);
        let w2 = g.param(self.trunk_w);
        let b2 = g.param(self.trunk_b);
        let hw = g.matmul(h1, w2);
        let pre2 = g.add(hw, b2);
        Ok(g.tanh(pre2))
    }

    /// Inserts freshly initialized trunk tensors of width `width`.
    pub fn init(&self, store: &mut ParamStore, width: usize, rng: &mut ChaCha8Rng) {
        store.insert(self.instr_embed, normal_init(self.instruction_ids, width, rng));
        store.insert(self.feat_w, init_orthogonal(self.feature_dim, width, 1.0, rng));
        store.insert(self.feat_b, Tensor::zeros(&[width]));
        store.insert(self.trunk_w, init_orthogonal(width, width, 1.0, rng));
        store.insert(self.trunk_b, Tensor::zeros(&[width]));
    }
}

/// Small normal initialization for embedding tables.
pub(crate) fn normal_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| EMBED_INIT_STD * standard_normal(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("finite init")
}

fn trunk_for(config: &PolicyConfig) -> Trunk<'static> {
    Trunk {
        instr_embed: INSTR_EMBED,
        feat_w: FEAT_W,
        feat_b: FEAT_B,
        trunk_w: TRUNK_W,
        trunk_b: TRUNK_B,
        feature_dim: config.feature_dim,
        instruction_ids: config.instruction_ids,
    }
}

/// Actor-critic parameters plus the configuration that fixes their shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub store: ParamStore,
}

/// One decoded action.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: TokenSequence,
    /// Untempered log-probabilities of the chosen tokens.
    pub token_log_probs: Vec<f64>,
    /// Sum of `token_log_probs` (Eq. 1).
    pub log_prob: f64,
    /// Path-conditional entropy: Σ_i H(π(· | o, t_<i)).
    pub entropy: f64,
    pub value: f64,
}

/// Teacher-forced evaluation of a batch, kept alive for a backward pass.
pub struct BatchEval<'g> {
    graph: Graph<'g>,
    xent: Option<NodeId>,
    value: NodeId,
    steps: usize,
    pub log_probs: Vec<f64>,
    pub entropies: Vec<f64>,
    pub values: Vec<f64>,
}

impl BatchEval<'_> {
    /// Backpropagates upstream gradients `dL/dlog π_b`, `dL/dH_b` and
    /// `dL/dV_b` into parameter gradients. Empty slices mean zero.
    pub fn backward(
        &mut self,
        d_log_prob: &[f64],
        d_entropy: &[f64],
        d_value: &[f64],
    ) -> Result<Gradients, PolicyError> {
        let batch = self.values.len();
        let mut seeds = Vec::new();
        if let Some(xent) = self.xent {
            if !d_log_prob.is_empty() || !d_entropy.is_empty() {
                let mut g = vec![0.0; batch * self.steps * 2];
                for b in 0..batch {
                    let dl = d_log_prob.get(b).copied().unwrap_or(0.0);
                    let de = d_entropy.get(b).copied().unwrap_or(0.0);
                    for i in 0..self.steps {
                        let r = b * self.steps + i;
                        // log π = -Σ nll.
                        g[2 * r] = -dl;
                        g[2 * r + 1] = de;
                    }
                }
                seeds.push((xent, Tensor::new(vec![batch * self.steps, 2], g)?));
            }
        }
        if !d_value.is_empty() {
            if d_value.len() != batch {
                return Err(PolicyError::Batch(format!("{} value grads for {batch} rows", d_value.len())));
            }
            seeds.push((self.value, Tensor::new(vec![batch, 1], d_value.to_vec())?));
        }
        Ok(self.graph.backward_with(seeds)?)
    }
}

impl PolicyParams {
    /// Fresh parameters: orthogonal hidden layers (gain 1), small normal
    /// embeddings, zero token and value output layers.
    pub fn init(config: PolicyConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = config.width;
        let mut store = ParamStore::new();
        trunk_for(&config).init(&mut store, w, rng);
        store.insert(TOKEN_EMBED, normal_init(config.action_dims * config.bins + config.action_dims, w, rng));
        store.insert(HEAD_W, Tensor::zeros(&[w, config.bins]));
        store.insert(HEAD_B, Tensor::zeros(&[config.bins]));
        store.insert(VALUE_W, Tensor::zeros(&[w, 1]));
        store.insert(VALUE_B, Tensor::zeros(&[1]));
        Self { config, store }
    }

    /// Names of the value-head tensors (the only ones critic warmup trains).
    pub fn value_param_names() -> [&'static str; 2] {
        [VALUE_W, VALUE_B]
    }

    pub fn is_value_param(name: &str) -> bool {
        name == VALUE_W || name == VALUE_B
    }

    /// Checks the stored tensors against the configured shapes.
    pub fn validate(&self) -> Result<(), PolicyError> {
        let c = &self.config;
        let w = c.width;
        let expected: [(&str, Vec<usize>); 10] = [
            (INSTR_EMBED, vec![c.instruction_ids, w]),
            (FEAT_W, vec![c.feature_dim, w]),
            (FEAT_B, vec![w]),
            (TRUNK_W, vec![w, w]),
            (TRUNK_B, vec![w]),
            (TOKEN_EMBED, vec![c.action_dims * c.bins + c.action_dims, w]),
            (HEAD_W, vec![w, c.bins]),
            (HEAD_B, vec![c.bins]),
            (VALUE_W, vec![w, 1]),
            (VALUE_B, vec![1]),
        ];
        for (name, shape) in expected {
            let t = self.store.get(name).ok_or_else(|| PolicyError::MissingParam(name.into()))?;
            if t.shape() != shape.as_slice() {
                return Err(PolicyError::Nn(NnError::Shape {
                    node: 0,
                    kind: crate::nn::OpKind::Leaf,
                    msg: format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape()),
                }));
            }
        }
        Ok(())
    }

    /// Converts vocabulary ids into bins, validating range and length.
    pub fn token_bins(&self, tokens: &TokenSequence) -> Result<Vec<usize>, PolicyError> {
        let c = &self.config;
        if tokens.len() != c.action_dims {
            return Err(PolicyError::WrongLength { expected: c.action_dims, got: tokens.len() });
        }
        tokens
            .as_slice()
            .iter()
            .enumerate()
            .map(|(position, &token)| {
                token
                    .checked_sub(c.action_token_base)
                    .filter(|&b| b < c.bins)
                    .ok_or(PolicyError::OutOfRange { position, token })
            })
            .collect()
    }

    fn bins_to_tokens(&self, bins: &[usize]) -> TokenSequence {
        TokenSequence(bins.iter().map(|b| b + self.config.action_token_base).collect())
    }

    fn build_context(&self, g: &mut Graph<'_>, obs: &[&Observation]) -> Result<NodeId, PolicyError> {
        trunk_for(&self.config).build(g, obs)
    }

    fn build_value(&self, g: &mut Graph<'_>, ctx: NodeId) -> NodeId {
        let wv = g.param(VALUE_W);
        let bv = g.param(VALUE_B);
        let v = g.matmul(ctx, wv);
        g.add(v, bv)
    }

    /// Context vectors `[B, W]` for a batch of observations.
    pub fn forward_context(&self, obs: &[&Observation]) -> Result<Tensor, PolicyError> {
        let mut g = Graph::new();
        let ctx = self.build_context(&mut g, obs)?;
        g.forward(&self.store)?;
        Ok(g.value(ctx).expect("evaluated").clone())
    }

    /// Value estimates for a batch.
    pub fn values(&self, obs: &[&Observation]) -> Result<Vec<f64>, PolicyError> {
        Ok(self.evaluate(obs, None)?.values)
    }

    /// Teacher-forced evaluation. With `tokens = None` only the value head
    /// is built (used by critic warmup).
    pub fn evaluate<'g>(
        &'g self,
        obs: &[&Observation],
        tokens: Option<&[&TokenSequence]>,
    ) -> Result<BatchEval<'g>, PolicyError> {
        let c = &self.config;
        let batch = obs.len();
        let mut g = Graph::new();
        let ctx = self.build_context(&mut g, obs)?;
        let value = self.build_value(&mut g, ctx);
        let mut xent = None;
        if let Some(tokens) = tokens {
            if tokens.len() != batch {
                return Err(PolicyError::Batch(format!("{} token rows for {batch} observations", tokens.len())));
            }
            let steps = c.action_dims;
            let mut ctx_bags = Vec::with_capacity(batch * steps);
            let mut tok_bags = Vec::with_capacity(batch * steps);
            let mut targets = Vec::with_capacity(batch * steps);
            for (b, t) in tokens.iter().enumerate() {
                let bins = self.token_bins(t)?;
                for (i, &bin) in bins.iter().enumerate() {
                    ctx_bags.push(vec![b]);
                    tok_bags.push(c.step_bag(i, &bins));
                    targets.push(bin);
                }
            }
            let ctx_rep = g.gather(ctx, ctx_bags);
            let table = g.param(TOKEN_EMBED);
            let prev = g.gather(table, tok_bags);
            let pre = g.add(ctx_rep, prev);
            let u = g.tanh(pre);
            let wh = g.param(HEAD_W);
            let bh = g.param(HEAD_B);
            let z = g.matmul(u, wh);
            let logits = g.add(z, bh);
            xent = Some(g.softmax_xent(logits, targets));
        }
        g.forward(&self.store)?;
        let values = g.value(value).expect("evaluated").data().to_vec();
        let (mut log_probs, mut entropies) = (Vec::new(), Vec::new());
        if let Some(x) = xent {
            let out = g.value(x).expect("evaluated").data();
            for row in out.chunks(2 * c.action_dims) {
                log_probs.push(-row.iter().step_by(2).sum::<f64>());
                entropies.push(row.iter().skip(1).step_by(2).sum::<f64>());
            }
        }
        Ok(BatchEval { graph: g, xent, value, steps: c.action_dims, log_probs, entropies, values })
    }

    /// Eq. 1: Σ_i log π(t_i | o, t_<i) by teacher forcing.
    pub fn action_log_prob(&self, obs: &Observation, tokens: &TokenSequence) -> Result<f64, PolicyError> {
        Ok(self.evaluate(&[obs], Some(&[tokens]))?.log_probs[0])
    }

    /// Path-conditional entropy along `tokens`.
    pub fn entropy(&self, obs: &Observation, tokens: &TokenSequence) -> Result<f64, PolicyError> {
        Ok(self.evaluate(&[obs], Some(&[tokens]))?.entropies[0])
    }

    pub fn value(&self, obs: &Observation) -> Result<f64, PolicyError> {
        Ok(self.values(&[obs])?[0])
    }

    /// Samples one action per observation, each row drawing from its own
    /// RNG stream. Temperature scales the logits used for selection only;
    /// `temperature == 0` decodes greedily (lowest index on ties).
    pub fn sample_batch(
        &self,
        obs: &[&Observation],
        temperature: f64,
        rngs: &mut [ChaCha8Rng],
    ) -> Result<Vec<Decoded>, PolicyError> {
        if !temperature.is_finite() || temperature < 0.0 {
            return Err(PolicyError::BadTemperature(temperature));
        }
        let greedy = temperature == 0.0;
        if !greedy && rngs.len() != obs.len() {
            return Err(PolicyError::Batch(format!("{} rng streams for {} observations", rngs.len(), obs.len())));
        }
        let c = &self.config;
        let batch = obs.len();
        if batch == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let ctx = self.build_context(&mut g, obs)?;
        let value = self.build_value(&mut g, ctx);
        g.forward(&self.store)?;
        let values = g.value(value).expect("evaluated").data().to_vec();

        let mut bins = vec![Vec::with_capacity(c.action_dims); batch];
        let mut out: Vec<Decoded> = values
            .iter()
            .map(|&v| Decoded {
                tokens: TokenSequence(Vec::new()),
                token_log_probs: Vec::with_capacity(c.action_dims),
                log_prob: 0.0,
                entropy: 0.0,
                value: v,
            })
            .collect();
        let table = g.param(TOKEN_EMBED);
        let wh = g.param(HEAD_W);
        let bh = g.param(HEAD_B);
        let mut probs = vec![0.0; c.bins];
        let mut tempered = vec![0.0; c.bins];
        for i in 0..c.action_dims {
            let bags = bins.iter().map(|prev: &Vec<usize>| c.step_bag(i, prev)).collect();
            let prev = g.gather(table, bags);
            let pre = g.add(ctx, prev);
            let u = g.tanh(pre);
            let z = g.matmul(u, wh);
            let logits = g.add(z, bh);
            g.forward(&self.store)?;
            let lt = g.value(logits).expect("evaluated");
            for b in 0..batch {
                let row = lt.row(b);
                let choice = if greedy {
                    argmax(row)
                } else {
                    for (t, z) in tempered.iter_mut().zip(row) {
                        *t = z / temperature;
                    }
                    softmax_row(&tempered, 0, &mut probs);
                    sample_categorical(&probs, &mut rngs[b])
                };
                let (lp, h) = softmax_row(row, choice, &mut probs);
                let d = &mut out[b];
                d.token_log_probs.push(lp);
                d.log_prob += lp;
                d.entropy += h;
                bins[b].push(choice);
            }
        }
        for (d, b) in out.iter_mut().zip(&bins) {
            d.tokens = self.bins_to_tokens(b);
        }
        Ok(out)
    }

    /// Single-observation convenience wrapper over [`Self::sample_batch`].
    pub fn sample_action_tokens(
        &self,
        obs: &Observation,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Decoded, PolicyError> {
        let mut rngs = [rng.clone()];
        let d = self.sample_batch(&[obs], temperature, &mut rngs)?.remove(0);
        *rng = rngs[0].clone();
        Ok(d)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a normalized distribution.
pub fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left the cumulative sum just below 1: take the last
    // category with nonzero mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use crate::tokenizer::{ACTION_DIMS, BINS_PER_DIM};

    pub(crate) fn small_config(action_dims: usize, bins: usize) -> PolicyConfig {
        PolicyConfig { width: 8, feature_dim: 5, instruction_ids: 6, action_dims, bins, action_token_base: 6 }
    }

    pub(crate) fn random_obs(cfg: &PolicyConfig, seed: u64) -> Observation {
        let mut rng = stream(seed, Purpose::Shuffle, 99);
        Observation {
            features: (0..cfg.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            instruction_tokens: TokenSequence(vec![2, 3, 5, PAD_TOKEN]),
        }
    }

    /// Randomizes every tensor so no output layer is degenerate.
    pub(crate) fn randomized(cfg: PolicyConfig, seed: u64) -> PolicyParams {
        let mut rng = stream(seed, Purpose::Init, 0);
        let mut p = PolicyParams::init(cfg, &mut rng);
        let names: Vec<String> = p.store.names().map(String::from).collect();
        for n in names {
            for x in p.store.get_mut(&n).unwrap().data_mut() {
                *x = 0.5 * standard_normal(&mut rng);
            }
        }
        p
    }

    fn full_config() -> PolicyConfig {
        PolicyConfig {
            width: 16,
            feature_dim: 5,
            instruction_ids: 6,
            action_dims: ACTION_DIMS,
            bins: BINS_PER_DIM,
            action_token_base: 6,
        }
    }

    #[test]
    fn uniform_head_log_probs() {
        let cfg = full_config();
        let p = PolicyParams::init(cfg.clone(), &mut stream(0, Purpose::Init, 0));
        let obs = random_obs(&cfg, 1);
        let mut rng = stream(0, Purpose::Decode, 0);
        let d = p.sample_action_tokens(&obs, 1.5, &mut rng).unwrap();
        for lp in &d.token_log_probs {
            assert!((lp - (-5.545177)).abs() < 1e-6);
        }
        assert!((d.log_prob - (-38.816242)).abs() < 1e-6);
        assert!((d.entropy - 38.816242).abs() < 1e-6);
        assert_eq!(d.value, 0.0);
        let lp = p.action_log_prob(&obs, &d.tokens).unwrap();
        assert!((lp - d.log_prob).abs() < 1e-10);
    }

    #[test]
    fn context_is_deterministic_and_width_sized() {
        let cfg = full_config();
        let p = PolicyParams::init(cfg.clone(), &mut stream(3, Purpose::Init, 0));
        let obs = random_obs(&cfg, 2);
        let a = p.forward_context(&[&obs]).unwrap();
        let b = p.forward_context(&[&obs]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 16]);
        let zero = Observation { features: vec![0.0; 5], instruction_tokens: TokenSequence(vec![PAD_TOKEN; 4]) };
        let z = p.forward_context(&[&zero]).unwrap();
        // Zero input with zero biases: context is exactly tanh(0) = 0.
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn reduced_head_normalizes() {
        let cfg = small_config(2, 3);
        let p = randomized(cfg.clone(), 7);
        let obs = random_obs(&cfg, 8);
        let mut total = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let t = TokenSequence(vec![6 + a, 6 + b]);
                total += p.action_log_prob(&obs, &t).unwrap().exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-9, "{total}");
    }

    #[test]
    fn sampled_log_probs_match_teacher_forcing() {
        let cfg = small_config(4, 5);
        let p = randomized(cfg.clone(), 11);
        let mut rng = stream(1, Purpose::Decode, 0);
        for s in 0..10 {
            let obs = random_obs(&cfg, s);
            let d = p.sample_action_tokens(&obs, 1.5, &mut rng).unwrap();
            let ev = p.evaluate(&[&obs], Some(&[&d.tokens])).unwrap();
            assert!((ev.log_probs[0] - d.log_prob).abs() < 1e-10);
            assert!((ev.entropies[0] - d.entropy).abs() < 1e-10);
            assert!((ev.values[0] - d.value).abs() < 1e-12);
            assert!(d.entropy >= 0.0);
        }
    }

    #[test]
    fn low_temperature_approaches_greedy() {
        let cfg = small_config(3, 6);
        let p = randomized(cfg.clone(), 13);
        let obs = random_obs(&cfg, 4);
        let greedy = p.sample_batch(&[&obs], 0.0, &mut []).unwrap().remove(0);
        let mut rng = stream(5, Purpose::Decode, 0);
        for _ in 0..20 {
            let cold = p.sample_action_tokens(&obs, 1e-4, &mut rng).unwrap();
            assert_eq!(cold.tokens, greedy.tokens);
        }
    }

    #[test]
    fn fixed_seed_is_reproducible_and_batch_equals_scalar() {
        let cfg = small_config(7, 16);
        let p = randomized(cfg.clone(), 17);
        let obs: Vec<_> = (0..5).map(|s| random_obs(&cfg, s)).collect();
        let refs: Vec<_> = obs.iter().collect();
        let mut rngs: Vec<_> = (0..5).map(|i| stream(9, Purpose::Decode, i)).collect();
        let batched = p.sample_batch(&refs, 1.5, &mut rngs).unwrap();
        for (i, o) in obs.iter().enumerate() {
            let mut rng = stream(9, Purpose::Decode, i as u64);
            let d = p.sample_action_tokens(o, 1.5, &mut rng).unwrap();
            assert_eq!(d.tokens, batched[i].tokens);
            assert_eq!(rng.get_word_pos(), rngs[i].get_word_pos());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = small_config(2, 3);
        let p = randomized(cfg.clone(), 1);
        let obs = random_obs(&cfg, 1);
        assert_eq!(
            p.action_log_prob(&obs, &TokenSequence(vec![6, 9])),
            Err(PolicyError::OutOfRange { position: 1, token: 9 })
        );
        assert!(matches!(p.action_log_prob(&obs, &TokenSequence(vec![6])), Err(PolicyError::WrongLength { .. })));
        let bad = Observation { features: vec![0.0; 3], instruction_tokens: TokenSequence(vec![]) };
        assert!(matches!(p.value(&bad), Err(PolicyError::FeatureDim { expected: 5, got: 3 })));
        let mut rng = stream(0, Purpose::Decode, 0);
        assert!(p.sample_action_tokens(&obs, -1.0, &mut rng).is_err());
        p.validate().unwrap();
    }

    /// Directional central finite difference of `f` along a random direction.
    fn directional_check(
        p: &PolicyParams,
        grads: &Gradients,
        f: &dyn Fn(&PolicyParams) -> f64,
        seed: u64,
    ) -> f64 {
        let mut rng = stream(seed, Purpose::Shuffle, 1);
        let dir: Vec<(String, Vec<f64>)> = p
            .store
            .iter()
            .map(|(n, t)| (n.to_string(), (0..t.len()).map(|_| standard_normal(&mut rng)).collect()))
            .collect();
        let analytic: f64 = dir
            .iter()
            .map(|(n, d)| grads[n].data().iter().zip(d).map(|(g, d)| g * d).sum::<f64>())
            .sum();
        let h = 1e-5;
        let shifted = |s: f64| {
            let mut q = p.clone();
            for (n, d) in &dir {
                for (x, dx) in q.store.get_mut(n).unwrap().data_mut().iter_mut().zip(d) {
                    *x += s * dx;
                }
            }
            f(&q)
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
    }

    #[test]
    fn log_prob_and_value_gradients_match_finite_differences() {
        let cfg = small_config(3, 4);
        let p = randomized(cfg.clone(), 21);
        let obs = random_obs(&cfg, 3);
        let tokens = TokenSequence(vec![7, 9, 6]);
        let mut ev = p.evaluate(&[&obs], Some(&[&tokens])).unwrap();
        let g_lp = ev.backward(&[1.0], &[], &[]).unwrap();
        let g_h = ev.backward(&[], &[1.0], &[]).unwrap();
        let g_v = ev.backward(&[], &[], &[1.0]).unwrap();
        for seed in 0..5 {
            let e = directional_check(&p, &g_lp, &|q| q.action_log_prob(&obs, &tokens).unwrap(), seed);
            assert!(e < 1e-6, "log-prob rel err {e}");
            let e = directional_check(&p, &g_h, &|q| q.entropy(&obs, &tokens).unwrap(), seed);
            assert!(e < 1e-6, "entropy rel err {e}");
            let e = directional_check(&p, &g_v, &|q| q.value(&obs).unwrap(), seed);
            assert!(e < 1e-6, "value rel err {e}");
        }
    }
}
