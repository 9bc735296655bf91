mod common;

use common::Reference;
use proptest::prelude::*;
use prunetune::decode::Sampling;
use prunetune::metrics::{eval_accuracy, greedy_answers};
use prunetune::toydata::{self, encode, generate_toy_corpus, ToyTaskSpec, END};
use prunetune::tuner::{
    compute_reward, continual_pretrain, group_advantages, sample_rollouts, Corpus, RewardSpec, RlTask,
    TrainConfig,
};
use prunetune::{ModelConfig, TransformerModel};

fn small_model(seed: u64) -> TransformerModel {
    TransformerModel::init(seed, ModelConfig::uniform(toydata::VOCAB_SIZE, 16, 2, 24, 2, 32)).unwrap()
}

fn log_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
    let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + scaled.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    scaled.iter().map(|v| v - lse).collect()
}

#[test]
fn rollout_logprobs_match_recomputation() {
    let m = small_model(2);
    let reference = Reference::from_model(&m);
    let v = m.config.vocab_size;
    let prompt = encode("^3+4=").unwrap();
    for temperature in [1.0f32, 0.7] {
        let rollouts = sample_rollouts(&m, &prompt, 6, Sampling::Temperature(temperature), 8, 17).unwrap();
        for r in &rollouts {
            let full: Vec<u32> = prompt.iter().chain(&r.tokens).copied().collect();
            let logits = reference.logits(&full);
            for (k, (&tok, &lp)) in r.tokens.iter().zip(&r.logprobs).enumerate() {
                let pos = prompt.len() + k - 1;
                let expected = log_softmax(&logits[pos * v..(pos + 1) * v], temperature as f64)[tok as usize];
                assert!((lp as f64 - expected).abs() < 1e-4, "{lp} vs {expected}");
            }
            let stopped = r.tokens.last() == Some(&END);
            assert!(stopped || r.tokens.len() == 8);
            assert!(!r.tokens[..r.tokens.len() - 1].contains(&END));
        }
    }
}

#[test]
fn reward_fixtures() {
    let spec = RewardSpec {
        format_reward: 0.1,
        accuracy_reward: 1.0,
        ..RewardSpec::default()
    };
    let task = RlTask {
        prompt: encode("^3+4*2=").unwrap(),
        answer: encode("11").unwrap(),
    };
    let cases = [
        ("3+8=11$", 1.1f32),
        ("11$", 1.1),
        ("3+8=12$", 0.1),
        ("3+8=-11$", 0.1),
        ("3+8=11", 0.0),
        ("3+8=$", 0.0),
        ("3+8=1+1$", 0.0),
        ("11$7", 1.1),
    ];
    for (text, expected) in cases {
        let got = compute_reward(&encode(text).unwrap(), &task, &spec);
        assert!((got - expected).abs() < 1e-6, "{text}: {got} vs {expected}");
    }
}

proptest! {
    #[test]
    fn advantages_are_centred(rewards in prop::collection::vec(-5.0f32..5.0, 2..16), norm in any::<bool>()) {
        let adv = group_advantages(&rewards, 1e-6, norm).unwrap();
        let sum: f64 = adv.iter().map(|&a| a as f64).sum();
        prop_assert!(sum.abs() <= 1e-6 * rewards.len() as f64 * adv.iter().fold(1.0f32, |m, a| m.max(a.abs())) as f64);
    }

    #[test]
    fn normalized_advantages_ignore_shift_and_scale(
        rewards in prop::collection::vec(0u8..4, 2..12),
        shift in -3.0f64..3.0,
        scale in 0.5f64..4.0,
    ) {
        let base: Vec<f32> = rewards.iter().map(|&r| r as f32).collect();
        let moved: Vec<f32> = rewards.iter().map(|&r| (r as f64 * scale + shift) as f32).collect();
        let a = group_advantages(&base, 0.0, true).unwrap();
        let b = group_advantages(&moved, 0.0, true).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn equal_rewards_give_exact_zeros(r in -5.0f32..5.0, n in 2usize..10) {
        prop_assert!(group_advantages(&vec![r; n], 1e-6, true).unwrap().iter().all(|&a| a == 0.0));
    }
}

#[test]
fn continual_pretraining_overfits_a_tiny_corpus() {
    let seqs = vec![encode("^3+4*2=3+8=11$").unwrap()];
    let corpus = Corpus::new(seqs.clone(), 1).unwrap();
    let cfg = TrainConfig {
        steps: 500,
        batch_size: 2,
        lr: 3e-3,
        max_len: 24,
        shard: 0,
        seed: 1,
    };
    let (m, curve) = continual_pretrain(&small_model(0), &corpus, &cfg).unwrap();
    let final_loss = m.lm_loss(&seqs[0]).unwrap();
    println!("first loss {}, final loss {final_loss}", curve[0]);
    assert!(final_loss < 0.1, "{final_loss}");
    assert!(curve[0] > 2.0);
}

/// One token at a time through the straight-line reference.
fn reference_greedy(r: &Reference, prompt: &[u32], max_seq_len: usize) -> Vec<u32> {
    let v = r.cfg.vocab_size;
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while seq.len() < max_seq_len {
        let logits = r.logits(&seq);
        let row = &logits[(seq.len() - 1) * v..seq.len() * v];
        let tok = (0..v).fold(0, |best, j| if row[j] > row[best] { j } else { best }) as u32;
        out.push(tok);
        seq.push(tok);
        if tok == END {
            break;
        }
    }
    out
}

fn answer_of(text: &str) -> Option<&str> {
    let body = &text[..text.find('$')?];
    let ans = body.rsplit('=').next()?;
    let digits = ans.strip_prefix('-').unwrap_or(ans);
    (!digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit())).then_some(ans)
}

#[test]
fn accuracy_matches_decode_replay() {
    let data = generate_toy_corpus(&ToyTaskSpec {
        operators: vec!['+'],
        num_ops: 1,
        train_size: 60,
        rl_size: 0,
        bench_size: 30,
        shards: 1,
        max_seq_len: 24,
        ..ToyTaskSpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        steps: 150,
        batch_size: 8,
        lr: 3e-3,
        max_len: 24,
        shard: 0,
        seed: 0,
    };
    let (m, _) = continual_pretrain(&small_model(5), &data.corpus, &cfg).unwrap();
    let r = Reference::from_model(&m);
    let answers = greedy_answers(&m, &data.benchmark).unwrap();
    let mut correct = 0;
    for (task, got) in data.benchmark.tasks.iter().zip(&answers) {
        let replay = reference_greedy(&r, &task.prompt, m.config.max_seq_len);
        assert_eq!(&replay, got);
        let text = toydata::decode(got);
        if answer_of(&text) == Some(toydata::decode(&task.answer).as_str()) {
            correct += 1;
        }
    }
    let acc = eval_accuracy(&m, &data.benchmark).unwrap();
    println!("replayed accuracy {correct}/30");
    assert_eq!(acc, correct as f32 / 30.0);
}
