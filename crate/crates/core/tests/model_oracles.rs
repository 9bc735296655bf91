mod common;

use common::{gradient_check, gradient_check_model, random_tokens, Reference};
use prunetune::model::ffn_apply;
use prunetune::{FfnWeights, ModelConfig, Tensor, TransformerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn forward_matches_straight_line_reference() {
    for seed in 0..4 {
        let m = TransformerModel::init(seed, ModelConfig::uniform(20, 16, 4, 16, 2, 24)).unwrap();
        let toks = random_tokens(seed + 100, 12, 20);
        let (logits, _) = m.forward(&toks, false).unwrap();
        let reference = Reference::from_model(&m).logits(&toks);
        for (a, b) in logits.data().iter().zip(&reference) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
        let loss = m.lm_loss(&toks).unwrap() as f64;
        assert!((loss - Reference::from_model(&m).loss(&toks)).abs() < 1e-5);
    }
}

#[test]
fn heterogeneous_widths_match_reference() {
    let cfg = ModelConfig::new(16, 8, 2, 16, vec![256, 64, 256]);
    let m = TransformerModel::init(9, cfg).unwrap();
    let toks = random_tokens(1, 9, 16);
    let (logits, _) = m.forward(&toks, false).unwrap();
    let reference = Reference::from_model(&m).logits(&toks);
    for (a, b) in logits.data().iter().zip(&reference) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 0..3 {
        let m = gradient_check_model(seed);
        let toks = random_tokens(seed + 7, 10, 16);
        let (worst, at) = gradient_check(&m, &toks, 1e-3, 1e-5);
        println!("seed {seed}: worst relative error {worst:e} at {at}");
        assert!(worst <= 1e-3, "seed {seed}: relative error {worst:e} at {at}");
    }
}

#[test]
fn per_neuron_removal_delta_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut rand_t = |r: usize, c: usize| {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    };
    let ffn = FfnWeights {
        gate: rand_t(8, 16),
        up: rand_t(8, 16),
        down: rand_t(16, 8),
    };
    let h = rand_t(5, 8);
    let (out, act) = ffn_apply(&ffn, &h).unwrap();
    let norms = ffn.down_row_norms();
    for j in 0..16 {
        let mut ablated = ffn.clone();
        for r in 0..8 {
            ablated.gate.data_mut()[r * 16 + j] = 0.0;
        }
        let (out_j, _) = ffn_apply(&ablated, &h).unwrap();
        for row in 0..5 {
            let delta: f64 = out
                .row(row)
                .iter()
                .zip(out_j.row(row))
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            let predicted = (act.row(row)[j].abs() * norms[j]) as f64;
            let rel = (delta - predicted).abs() / predicted.max(1e-12);
            assert!(rel < 1e-5 || (delta - predicted).abs() < 1e-6, "neuron {j} row {row}: {delta} vs {predicted}");
        }
    }
}
