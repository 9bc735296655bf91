//! Test-only oracles, written independently of the library's graph code.
#![allow(dead_code)]

use prunetune::{ModelConfig, TransformerModel};

/// Row-major intermediate values of [`Reference::trace`].
#[derive(Default)]
pub struct RefTrace {
    pub layer_inputs: Vec<Vec<f64>>,
    pub activations: Vec<Vec<f64>>,
    pub layer_outputs: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// Straight-line `f64` re-implementation of the model forward pass.
pub struct Reference {
    pub cfg: ModelConfig,
    /// Parameters in canonical order, widened to f64.
    pub params: Vec<Vec<f64>>,
}

impl Reference {
    pub fn from_model(m: &TransformerModel) -> Self {
        Self {
            cfg: m.config.clone(),
            params: m
                .named_tensors()
                .iter()
                .map(|(_, t)| t.data().iter().map(|&v| v as f64).collect())
                .collect(),
        }
    }

    fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn norm(x: &[f64], scale: &[f64], d: usize, eps: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            out.extend(row.iter().zip(scale).map(|(v, s)| v * inv * s));
        }
        out
    }

    fn rope(x: &mut [f64], seq: usize, d: usize, heads: usize, base: f64) {
        let hd = d / heads;
        for pos in 0..seq {
            for h in 0..heads {
                for i in 0..hd / 2 {
                    let theta = pos as f64 * base.powf(-2.0 * i as f64 / hd as f64);
                    let (c, s) = (theta.cos(), theta.sin());
                    let a = pos * d + h * hd + 2 * i;
                    let (x0, x1) = (x[a], x[a + 1]);
                    x[a] = x0 * c - x1 * s;
                    x[a + 1] = x0 * s + x1 * c;
                }
            }
        }
    }

    /// Logits `[seq × vocab]`.
    pub fn logits(&self, tokens: &[u32]) -> Vec<f64> {
        self.trace(tokens).logits
    }

    pub fn trace(&self, tokens: &[u32]) -> RefTrace {
        let cfg = &self.cfg;
        let (d, v, s) = (cfg.d_model, cfg.vocab_size, tokens.len());
        let heads = cfg.n_heads;
        let hd = d / heads;
        let eps = cfg.norm_eps as f64;
        let p = &self.params;
        let mut h: Vec<f64> = tokens
            .iter()
            .flat_map(|&t| p[0][t as usize * d..(t as usize + 1) * d].to_vec())
            .collect();
        let mut tr = RefTrace::default();
        for (l, &f) in cfg.ffn_widths.iter().enumerate() {
            tr.layer_inputs.push(h.clone());
            let b = 1 + 9 * l;
            let n1 = Self::norm(&h, &p[b], d, eps);
            let mut q = Self::mm(&n1, &p[b + 1], s, d, d);
            let mut k = Self::mm(&n1, &p[b + 2], s, d, d);
            let vv = Self::mm(&n1, &p[b + 3], s, d, d);
            Self::rope(&mut q, s, d, heads, cfg.rope_base as f64);
            Self::rope(&mut k, s, d, heads, cfg.rope_base as f64);
            let mut attn = vec![0.0; s * d];
            for hh in 0..heads {
                for i in 0..s {
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            (0..hd).map(|t| q[i * d + hh * hd + t] * k[j * d + hh * hd + t]).sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|x| (x - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..=i {
                        for t in 0..hd {
                            attn[i * d + hh * hd + t] += e[j] / z * vv[j * d + hh * hd + t];
                        }
                    }
                }
            }
            let o = Self::mm(&attn, &p[b + 4], s, d, d);
            let mid: Vec<f64> = h.iter().zip(&o).map(|(a, b)| a + b).collect();
            let n2 = Self::norm(&mid, &p[b + 5], d, eps);
            let g = Self::mm(&n2, &p[b + 6], s, d, f);
            let u = Self::mm(&n2, &p[b + 7], s, d, f);
            let act: Vec<f64> = g
                .iter()
                .zip(&u)
                .map(|(g, u)| g / (1.0 + (-g).exp()) * u)
                .collect();
            let ff = Self::mm(&act, &p[b + 8], s, f, d);
            tr.activations.push(act);
            h = mid.iter().zip(&ff).map(|(a, b)| a + b).collect();
            tr.layer_outputs.push(h.clone());
        }
        let last = p.len();
        let n = Self::norm(&h, &p[last - 2], d, eps);
        tr.logits = Self::mm(&n, &p[last - 1], s, d, v);
        tr
    }

    /// Mean next-token cross-entropy.
    pub fn loss(&self, tokens: &[u32]) -> f64 {
        let v = self.cfg.vocab_size;
        let logits = self.logits(tokens);
        let mut total = 0.0;
        for t in 0..tokens.len() - 1 {
            let row = &logits[t * v..(t + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            total += lse - row[tokens[t + 1] as usize];
        }
        total / (tokens.len() - 1) as f64
    }
}

/// Worst elementwise relative error between analytic gradients and central
/// finite differences (step `h`) of the f64 shadow loss, over every parameter.
///
/// Relative error is `|g − fd| / max(|g|, |fd|, floor)`; the floor keeps
/// entries whose true gradient is numerically zero from dividing by noise.
pub fn gradient_check(model: &TransformerModel, tokens: &[u32], h: f64, floor: f64) -> (f64, String) {
    let batch = prunetune::TokenBatch::single(tokens);
    let (targets, weights) = prunetune::model::next_token_targets(&batch, None);
    let (_, grads) = model.loss_and_grads(&batch, &targets, &weights).unwrap();
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut reference = Reference::from_model(model);
    let mut worst = (0.0f64, String::new());
    for (pi, g) in grads.iter().enumerate() {
        for i in 0..g.numel() {
            let orig = reference.params[pi][i];
            reference.params[pi][i] = orig + h;
            let plus = reference.loss(tokens);
            reference.params[pi][i] = orig - h;
            let minus = reference.loss(tokens);
            reference.params[pi][i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = g.data()[i] as f64;
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, format!("{}[{i}]: analytic {a:e} vs fd {fd:e}", names[pi]));
            }
        }
    }
    worst
}

/// A 2-layer, d_model=16 model whose weights sit where a 1e-3 central
/// difference is in the linear regime: unit-scale embeddings, 0.06-std
/// matrices, norm scales jittered around 1.
pub fn gradient_check_model(seed: u64) -> TransformerModel {
    use rand::{Rng, SeedableRng};
    let cfg = ModelConfig::uniform(16, 16, 4, 16, 2, 32);
    let mut m = TransformerModel::init(seed, cfg).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (name, t) in m.named_tensors_mut() {
        for v in t.data_mut() {
            if name.ends_with("norm") {
                *v += rng.random_range(-0.5..0.5);
            } else if name == "embed" {
                *v *= 50.0;
            } else {
                *v *= 3.0;
            }
        }
    }
    m
}

pub fn random_tokens(seed: u64, len: usize, vocab: usize) -> Vec<u32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}
