//! Batched autoregressive decoding: greedy or ancestral sampling with
//! recorded per-token log-probabilities.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{TokenBatch, TransformerModel};
use crate::tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature(f32),
}

/// Generated continuation of one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// New tokens only, including the stop token if one was produced.
    pub tokens: Vec<u32>,
    /// `log p(token)` under the sampling distribution at each step.
    pub logprobs: Vec<f32>,
}

/// Decodes every prompt in lockstep. All prompts must have the same length.
/// Generation stops per sequence at `stop` or after `max_new` tokens, and is
/// capped by the model's context length.
pub fn generate(
    model: &TransformerModel,
    prompts: &[&[u32]],
    max_new: usize,
    sampling: Sampling,
    stop: Option<u32>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Generation>> {
    let Some(first) = prompts.first() else {
        return Ok(Vec::new());
    };
    let plen = first.len();
    if plen == 0 {
        return Err(Error::SequenceTooShort("empty prompt".into()));
    }
    if prompts.iter().any(|p| p.len() != plen) {
        return Err(Error::InvalidConfig("prompts in one decode batch differ in length".into()));
    }
    let max_seq = model.config.max_seq_len;
    if plen > max_seq {
        return Err(Error::SequenceTooLong { len: plen, max: max_seq });
    }
    if let Sampling::Temperature(t) = sampling {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {t}")));
        }
    }
    let vocab = model.config.vocab_size;
    let n = prompts.len();
    let mut seqs: Vec<Vec<u32>> = prompts.iter().map(|p| p.to_vec()).collect();
    let mut out = vec![
        Generation {
            tokens: Vec::new(),
            logprobs: Vec::new(),
        };
        n
    ];
    let mut done = vec![false; n];
    let steps = max_new.min(max_seq - plen);
    for _ in 0..steps {
        if done.iter().all(|&d| d) {
            break;
        }
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        let batch = TokenBatch::padded(&refs, 0);
        let logits = model.forward_batch(&batch)?;
        let len = batch.seq;
        for b in 0..n {
            let next = if done[b] {
                stop.unwrap_or(0)
            } else {
                let row = logits.row(b * len + len - 1);
                let (tok, lp) = pick(row, sampling, vocab, rng);
                out[b].tokens.push(tok);
                out[b].logprobs.push(lp);
                if Some(tok) == stop {
                    done[b] = true;
                }
                tok
            };
            seqs[b].push(next);
        }
    }
    Ok(out)
}

fn pick(row: &[f32], sampling: Sampling, vocab: usize, rng: &mut ChaCha8Rng) -> (u32, f32) {
    match sampling {
        Sampling::Greedy => {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            let lsm = tensor::log_softmax_row(row);
            (best as u32, lsm[best])
        }
        Sampling::Temperature(t) => {
            let scaled: Vec<f32> = row.iter().map(|&v| v / t).collect();
            let lsm = tensor::log_softmax_row(&scaled);
            let u: f64 = rng.random();
            let mut acc = 0.0f64;
            let mut tok = vocab - 1;
            for (i, &lp) in lsm.iter().enumerate() {
                acc += (lp as f64).exp();
                if u < acc {
                    tok = i;
                    break;
                }
            }
            (tok as u32, lsm[tok])
        }
    }
}

/// Greedy completions for prompts of any lengths, batched by length in
/// chunks of at most `chunk` prompts. Output order follows the input.
pub fn greedy_completions(
    model: &TransformerModel,
    prompts: &[&[u32]],
    max_new: usize,
    stop: Option<u32>,
    chunk: usize,
) -> Result<Vec<Vec<u32>>> {
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, p) in prompts.iter().enumerate() {
        groups.entry(p.len()).or_default().push(i);
    }
    let mut out = vec![Vec::new(); prompts.len()];
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    for idx in groups.values() {
        for part in idx.chunks(chunk.max(1)) {
            let ps: Vec<&[u32]> = part.iter().map(|&i| prompts[i]).collect();
            let gens = generate(model, &ps, max_new, Sampling::Greedy, stop, &mut rng)?;
            for (&i, g) in part.iter().zip(gens) {
                out[i] = g.tokens;
            }
        }
    }
    Ok(out)
}
