//! Recovery tuning: continual next-token pre-training on a corpus shard, and
//! group-relative policy-gradient training against format and accuracy
//! rewards.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decode::{self, Generation, Sampling};
use crate::error::{Error, Result};
use crate::model::{next_token_targets, TokenBatch, TransformerModel};
use crate::optim::{AdamConfig, OptimizerState};
use crate::tensor;
use crate::toydata;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Optimizer steps (RL: policy updates).
    pub steps: usize,
    /// Sequences per step (RL: prompts per update).
    pub batch_size: usize,
    pub lr: f32,
    /// Longest training sequence (RL: most new tokens per rollout).
    pub max_len: usize,
    pub shard: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            lr: 3e-4,
            max_len: 64,
            shard: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidConfig(format!("learning rate {} is invalid", self.lr)));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Training sequences split into equal, non-overlapping, contiguous shards.
/// Sequences past the last full shard belong to no shard.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    sequences: Vec<Vec<u32>>,
    num_shards: usize,
}

impl Corpus {
    pub fn new(sequences: Vec<Vec<u32>>, num_shards: usize) -> Result<Self> {
        if num_shards == 0 {
            return Err(Error::InvalidConfig("a corpus needs at least one shard".into()));
        }
        Ok(Self { sequences, num_shards })
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn num_shards(&self) -> usize {
        self.num_shards
    }

    pub fn shard_len(&self) -> usize {
        self.sequences.len() / self.num_shards
    }

    /// Shard trained on in round `round`.
    pub fn shard_for_round(&self, round: usize) -> usize {
        round % self.num_shards
    }

    pub fn shard(&self, index: usize) -> Result<&[Vec<u32>]> {
        if index >= self.num_shards {
            return Err(Error::InvalidConfig(format!(
                "shard {index} out of range for {} shards",
                self.num_shards
            )));
        }
        let n = self.shard_len();
        Ok(&self.sequences[index * n..(index + 1) * n])
    }
}

/// A prompt and its ground-truth answer. Answers follow the toy convention:
/// the text after the last `=` and before the end symbol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RlTask {
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RlTaskSet {
    pub tasks: Vec<RlTask>,
}

impl RlTaskSet {
    pub fn new(tasks: Vec<RlTask>) -> Self {
        Self { tasks }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardSpec {
    /// Paid when the completion has an extractable answer.
    pub format_reward: f32,
    /// Paid on top of the format reward when that answer is exact.
    pub accuracy_reward: f32,
    pub group_size: usize,
    /// Added to the group standard deviation.
    pub eps: f32,
    /// Divide centred rewards by the group standard deviation.
    pub normalize_std: bool,
    pub temperature: f32,
    /// Weight of a k3 KL penalty to the starting policy; 0 disables it.
    pub kl_coef: f32,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            format_reward: 0.1,
            accuracy_reward: 1.0,
            group_size: 8,
            eps: 1e-6,
            normalize_std: true,
            temperature: 1.0,
            kl_coef: 0.0,
        }
    }
}

impl RewardSpec {
    fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::InvalidConfig(format!("group size {} < 2", self.group_size)));
        }
        let finite = [self.format_reward, self.accuracy_reward, self.eps, self.kl_coef]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.eps < 0.0 || self.kl_coef < 0.0 {
            return Err(Error::InvalidConfig(format!("invalid reward spec {self:?}")));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

fn truncate(seq: &[u32], max: usize) -> &[u32] {
    &seq[..seq.len().min(max)]
}

/// Next-token training on shard `cfg.shard`. Returns the tuned model and the
/// mean loss of every step.
pub fn continual_pretrain(
    model: &TransformerModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<(TransformerModel, Vec<f32>)> {
    cfg.validate()?;
    let shard = corpus.shard(cfg.shard)?;
    if shard.is_empty() {
        return Err(Error::EmptyCorpus(format!("shard {} has no sequences", cfg.shard)));
    }
    let mut model = model.clone();
    if cfg.steps == 0 {
        return Ok((model, Vec::new()));
    }
    let max = cfg.max_len.min(model.config.max_seq_len);
    if shard.iter().all(|s| truncate(s, max).len() < 2) {
        return Err(Error::SequenceTooShort(format!(
            "shard {} has no sequence with a next-token target",
            cfg.shard
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = OptimizerState::new(cfg.adam(), model.named_tensors().into_iter().map(|(_, t)| t));
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(truncate(&shard[order[cursor]], max));
            cursor += 1;
        }
        let lengths: Vec<usize> = picked.iter().map(|s| s.len()).collect();
        let batch = TokenBatch::padded(&picked, 0);
        let (targets, weights) = next_token_targets(&batch, Some(&lengths));
        let (loss, grads) = model.loss_and_grads(&batch, &targets, &weights)?;
        opt.step(&mut model.named_tensors_mut(), &grads)?;
        curve.push(loss);
    }
    Ok((model, curve))
}

/// Runs `cfg.steps` steps as consecutive segments of at most `segment`
/// steps. Each segment starts with fresh optimizer state and seed
/// `cfg.seed + i`. A `segment` of 0 means one segment.
pub fn pretrain_segmented(
    model: &TransformerModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    segment: usize,
) -> Result<(TransformerModel, Vec<f32>)> {
    let segment = if segment == 0 { cfg.steps.max(1) } else { segment };
    let mut model = model.clone();
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut done = 0;
    let mut i = 0u64;
    while done < cfg.steps {
        let steps = segment.min(cfg.steps - done);
        let part = TrainConfig {
            steps,
            seed: cfg.seed.wrapping_add(i),
            ..cfg.clone()
        };
        let (m, c) = continual_pretrain(&model, corpus, &part)?;
        model = m;
        curve.extend(c);
        done += steps;
        i += 1;
    }
    Ok((model, curve))
}

/// `g` completions of one prompt, stopping at the end symbol.
pub fn sample_rollouts(
    model: &TransformerModel,
    prompt: &[u32],
    g: usize,
    sampling: Sampling,
    max_new: usize,
    seed: u64,
) -> Result<Vec<Generation>> {
    if g == 0 {
        return Err(Error::InvalidConfig("at least one rollout is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompts = vec![prompt; g];
    decode::generate(model, &prompts, max_new, sampling, Some(toydata::END), &mut rng)
}

pub fn compute_reward(completion: &[u32], task: &RlTask, spec: &RewardSpec) -> f32 {
    match toydata::extract_answer(completion) {
        None => 0.0,
        Some(ans) if ans == task.answer.as_slice() => spec.format_reward + spec.accuracy_reward,
        Some(_) => spec.format_reward,
    }
}

pub fn compute_rewards(rollouts: &[Generation], task: &RlTask, spec: &RewardSpec) -> Vec<f32> {
    rollouts
        .iter()
        .map(|r| compute_reward(&r.tokens, task, spec))
        .collect()
}

/// `(r_i − mean) / (std + eps)` with the population standard deviation, or
/// `r_i − mean` when `normalize_std` is off. A group whose rewards are all
/// equal gets exactly zero advantages.
pub fn group_advantages(rewards: &[f32], eps: f32, normalize_std: bool) -> Result<Vec<f32>> {
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(Error::NonFiniteAdvantage(i));
    }
    if rewards.windows(2).all(|w| w[0] == w[1]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().map(|&r| r as f64).sum::<f64>() / n;
    let var = rewards.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / n;
    let denom = if normalize_std { var.sqrt() + eps as f64 } else { 1.0 };
    let adv: Vec<f32> = rewards.iter().map(|&r| ((r as f64 - mean) / denom) as f32).collect();
    if let Some(i) = adv.iter().position(|a| !a.is_finite()) {
        return Err(Error::NonFiniteAdvantage(i));
    }
    Ok(adv)
}

/// Per-token log-probabilities of `targets` under `model`, one vector per row.
fn token_logprobs(model: &TransformerModel, batch: &TokenBatch, spans: &[(usize, usize)]) -> Result<Vec<Vec<f32>>> {
    let logits = model.forward_batch(batch)?;
    Ok(spans
        .iter()
        .enumerate()
        .map(|(b, &(start, len))| {
            (0..len)
                .map(|k| {
                    let pos = start + k;
                    let row = logits.row(b * batch.seq + pos - 1);
                    tensor::log_softmax_row(row)[batch.tokens[b * batch.seq + pos] as usize]
                })
                .collect()
        })
        .collect())
}

/// Group-relative policy-gradient recovery. Each update draws
/// `cfg.batch_size` prompts, samples `spec.group_size` rollouts per prompt,
/// and ascends `Σ A_i · mean_t log p(o_i,t)` averaged over rollouts. Returns
/// the tuned model and the mean reward of every update.
pub fn rl_recover(
    model: &TransformerModel,
    tasks: &RlTaskSet,
    spec: &RewardSpec,
    cfg: &TrainConfig,
) -> Result<(TransformerModel, Vec<f32>)> {
    cfg.validate()?;
    spec.validate()?;
    if tasks.is_empty() {
        return Err(Error::EmptyCorpus("RL task set is empty".into()));
    }
    let reference = model.clone();
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = OptimizerState::new(cfg.adam(), model.named_tensors().into_iter().map(|(_, t)| t));
    let g = spec.group_size;
    let sampling = Sampling::Temperature(spec.temperature);
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&tasks.tasks[order[cursor]]);
            cursor += 1;
        }

        let mut rollouts: Vec<(usize, Generation)> = Vec::with_capacity(picked.len() * g);
        let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (p, t) in picked.iter().enumerate() {
            by_len.entry(t.prompt.len()).or_default().push(p);
        }
        for ps in by_len.values() {
            let prompts: Vec<&[u32]> = ps
                .iter()
                .flat_map(|&p| std::iter::repeat_n(picked[p].prompt.as_slice(), g))
                .collect();
            let gens = decode::generate(&model, &prompts, cfg.max_len, sampling, Some(toydata::END), &mut rng)?;
            for (k, gen) in gens.into_iter().enumerate() {
                rollouts.push((ps[k / g], gen));
            }
        }
        rollouts.sort_by_key(|(p, _)| *p);

        let mut advantages = Vec::with_capacity(rollouts.len());
        let mut reward_sum = 0.0f64;
        for (p, group) in rollouts.chunks(g).enumerate() {
            let gens: Vec<Generation> = group.iter().map(|(_, r)| r.clone()).collect();
            let rewards = compute_rewards(&gens, picked[p], spec);
            reward_sum += rewards.iter().map(|&r| r as f64).sum::<f64>();
            let adv = group_advantages(&rewards, spec.eps, spec.normalize_std)
                .map_err(|_| Error::NonFiniteAdvantage(p))?;
            advantages.extend(adv);
        }
        curve.push((reward_sum / rollouts.len() as f64) as f32);

        let seqs: Vec<Vec<u32>> = rollouts
            .iter()
            .map(|(p, r)| [picked[*p].prompt.as_slice(), r.tokens.as_slice()].concat())
            .collect();
        let spans: Vec<(usize, usize)> = rollouts
            .iter()
            .map(|(p, r)| (picked[*p].prompt.len(), r.tokens.len()))
            .collect();
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        let batch = TokenBatch::padded(&refs, 0);
        let scale = 1.0 / rollouts.len() as f32;
        let mut weights = vec![0.0f32; batch.tokens.len()];
        let mut targets = vec![0u32; batch.tokens.len()];
        for (b, &(start, len)) in spans.iter().enumerate() {
            for k in 0..len {
                let pos = b * batch.seq + start + k;
                targets[pos - 1] = batch.tokens[pos];
                weights[pos - 1] = advantages[b] * scale / len as f32;
            }
        }
        if spec.kl_coef > 0.0 {
            let cur = token_logprobs(&model, &batch, &spans)?;
            let old = token_logprobs(&reference, &batch, &spans)?;
            for (b, &(start, len)) in spans.iter().enumerate() {
                for k in 0..len {
                    let c = 1.0 - (old[b][k] - cur[b][k]).exp();
                    weights[b * batch.seq + start + k - 1] -= spec.kl_coef * c * scale / len as f32;
                }
            }
        }
        if weights.iter().all(|&w| w == 0.0) {
            continue;
        }
        let (_, grads) = model.loss_and_grads(&batch, &targets, &weights)?;
        opt.step(&mut model.named_tensors_mut(), &grads)?;
    }
    Ok((model, curve))
}

/// `step,value` CSV of a per-step curve.
pub fn curve_csv(values: &[f32]) -> String {
    let mut s = String::from("step,value\n");
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("{i},{v}\n"));
    }
    s
}
