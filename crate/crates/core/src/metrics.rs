//! Parameter and FLOPs accounting, exact-match evaluation, and wall-clock
//! speedup measurement.

use std::time::Instant;

use crate::decode;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::toydata;
use crate::tuner::RlTaskSet;

/// Counting rule used by [`count_flops`]. A multiply-add is 2 FLOPs; norms,
/// activations, and softmax are not counted.
pub const FLOPS_FORMULA: &str = "sum over layers l of (8*s*d^2 + 4*s^2*d + 6*s*d*f_l) + 2*s*d*V \
     [QKVO projections + attention scores/context + gated FFN + unembedding; \
     s=seq_len d=d_model f_l=FFN width of layer l V=vocab; multiply-add = 2 FLOPs]";

pub fn count_params(model: &TransformerModel) -> usize {
    model.named_tensors().iter().map(|(_, t)| t.numel()).sum()
}

/// FLOPs of one forward pass over `seq_len` tokens, per [`FLOPS_FORMULA`].
pub fn count_flops(model: &TransformerModel, seq_len: usize) -> u64 {
    flops_for_config(&model.config, seq_len)
}

/// [`count_flops`] from the architecture alone, for configs too large to
/// allocate.
pub fn flops_for_config(config: &ModelConfig, seq_len: usize) -> u64 {
    let s = seq_len as u64;
    let d = config.d_model as u64;
    let v = config.vocab_size as u64;
    let blocks: u64 = config
        .ffn_widths
        .iter()
        .map(|&f| 8 * s * d * d + 4 * s * s * d + 6 * s * d * f as u64)
        .sum();
    blocks + 2 * s * d * v
}

/// Greedy completions for every prompt of `benchmark`.
pub fn greedy_answers(model: &TransformerModel, benchmark: &RlTaskSet) -> Result<Vec<Vec<u32>>> {
    let prompts: Vec<&[u32]> = benchmark.tasks.iter().map(|t| t.prompt.as_slice()).collect();
    decode::greedy_completions(model, &prompts, model.config.max_seq_len, Some(toydata::END), 256)
}

/// Fraction of benchmark prompts whose greedy completion carries exactly the
/// ground-truth answer.
pub fn eval_accuracy(model: &TransformerModel, benchmark: &RlTaskSet) -> Result<f32> {
    if benchmark.is_empty() {
        return Err(Error::EmptyCorpus("benchmark is empty".into()));
    }
    let outs = greedy_answers(model, benchmark)?;
    let correct = outs
        .iter()
        .zip(&benchmark.tasks)
        .filter(|(o, t)| toydata::extract_answer(o) == Some(t.answer.as_slice()))
        .count();
    Ok(correct as f32 / benchmark.len() as f32)
}

fn time_per_question(model: &TransformerModel, benchmark: &RlTaskSet) -> Result<f64> {
    let start = Instant::now();
    greedy_answers(model, benchmark)?;
    Ok(start.elapsed().as_secs_f64() / benchmark.len() as f64)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Speedup of `model_b` over `model_a`: the ratio of their mean
/// per-question greedy generation times, as a median over `reps` (at least
/// 3) interleaved repetitions.
pub fn measure_speedup(
    model_a: &TransformerModel,
    model_b: &TransformerModel,
    benchmark: &RlTaskSet,
    reps: usize,
) -> Result<f64> {
    if benchmark.is_empty() {
        return Err(Error::EmptyCorpus("benchmark is empty".into()));
    }
    let reps = reps.max(3);
    let mut ta = Vec::with_capacity(reps);
    let mut tb = Vec::with_capacity(reps);
    for _ in 0..reps {
        ta.push(time_per_question(model_a, benchmark)?);
        tb.push(time_per_question(model_b, benchmark)?);
    }
    Ok(median(ta) / median(tb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::tuner::RlTask;

    #[test]
    fn zero_layer_param_count() {
        let m = TransformerModel::init(0, ModelConfig::uniform(16, 4, 1, 8, 0, 8)).unwrap();
        assert_eq!(count_params(&m), 132);
    }

    #[test]
    fn hand_enumerated_flops() {
        let m = TransformerModel::init(0, ModelConfig::uniform(16, 4, 1, 8, 1, 8)).unwrap();
        assert_eq!(count_flops(&m, 1), 464);
    }

    #[test]
    fn flops_drop_by_one_layer_term() {
        let full = TransformerModel::init(0, ModelConfig::new(16, 8, 2, 8, vec![16, 12, 16])).unwrap();
        let mut cut = full.clone();
        cut.layers.remove(1);
        cut.config.ffn_widths.remove(1);
        let s = 5u64;
        let term = 8 * s * 64 + 4 * s * s * 8 + 6 * s * 8 * 12;
        assert_eq!(count_flops(&full, 5) - count_flops(&cut, 5), term);
    }

    fn always_wrong() -> TransformerModel {
        let mut m = TransformerModel::init(0, ModelConfig::uniform(16, 8, 2, 12, 1, 8)).unwrap();
        // Every position ranks "$" first after the prompt, yielding an
        // empty, malformed answer.
        let d = m.config.d_model;
        let mut unembed = vec![0.0; d * 16];
        for r in 0..d {
            unembed[r * 16 + toydata::END as usize] = 1.0;
        }
        m.unembed = Tensor::matrix(d, 16, unembed).unwrap();
        m.final_norm = Tensor::full(&[d], 1.0);
        m.embed = Tensor::full(&[16, d], 1.0);
        m
    }

    #[test]
    fn degenerate_model_scores_zero_and_duplication_is_invariant() {
        let m = always_wrong();
        let tasks = RlTaskSet::new(vec![
            RlTask {
                prompt: toydata::encode("^1+2=").unwrap(),
                answer: toydata::encode("3").unwrap(),
            },
            RlTask {
                prompt: toydata::encode("^4*2=").unwrap(),
                answer: toydata::encode("8").unwrap(),
            },
        ]);
        assert_eq!(eval_accuracy(&m, &tasks).unwrap(), 0.0);
        let mut twice = tasks.clone();
        twice.tasks.extend(tasks.tasks.clone());
        assert_eq!(eval_accuracy(&m, &twice).unwrap(), eval_accuracy(&m, &tasks).unwrap());
        assert!(eval_accuracy(&m, &RlTaskSet::new(vec![])).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
