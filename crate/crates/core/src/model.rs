//! Decoder-only transformer with gated feed-forward blocks whose widths may
//! differ per layer.
//!
//! A block computes `h + Attn(norm(h))`, then adds `FFN(norm(·))` where
//! `FFN(x) = (SiLU(x·W_gate) ⊙ (x·W_up)) · W_down`. Neuron `j` of a block is
//! column `j` of `W_gate` and `W_up` together with row `j` of `W_down`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{AttnLayout, Graph, NodeId, RopeTable};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub const POSITIONAL_SCHEME: &str = "rotary";
const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// One entry per layer; its length is the depth.
    pub ffn_widths: Vec<usize>,
    pub rope_base: f32,
    pub norm_eps: f32,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, d_model: usize, n_heads: usize, max_seq_len: usize, ffn_widths: Vec<usize>) -> Self {
        Self {
            vocab_size,
            d_model,
            n_heads,
            max_seq_len,
            ffn_widths,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }

    pub fn uniform(vocab_size: usize, d_model: usize, n_heads: usize, max_seq_len: usize, n_layers: usize, d_ff: usize) -> Self {
        Self::new(vocab_size, d_model, n_heads, max_seq_len, vec![d_ff; n_layers])
    }

    pub fn n_layers(&self) -> usize {
        self.ffn_widths.len()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_seq_len == 0 {
            return bad(format!("zero-sized dimension in {self:?}"));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("rotary positions need an even head_dim, got {}", self.head_dim()));
        }
        if let Some(l) = self.ffn_widths.iter().position(|&w| w == 0) {
            return bad(format!("layer {l} has FFN width 0"));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) || !(self.norm_eps.is_finite() && self.norm_eps >= 0.0) {
            return bad("rope_base/norm_eps must be finite and positive".into());
        }
        Ok(())
    }

    /// Parameters of one block with FFN width `d_ff`: four attention
    /// projections, two norm scales, three FFN matrices.
    pub fn block_params(&self, d_ff: usize) -> usize {
        let d = self.d_model;
        4 * d * d + 2 * d + 3 * d * d_ff
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnWeights {
    /// `[d_model × d_ff]`
    pub gate: Tensor,
    /// `[d_model × d_ff]`
    pub up: Tensor,
    /// `[d_ff × d_model]`
    pub down: Tensor,
}

impl FfnWeights {
    pub fn width(&self) -> usize {
        self.gate.cols()
    }

    /// Returns `(output, activations)` for `h[n × d_model]`, where
    /// `activations = SiLU(h·W_gate) ⊙ (h·W_up)` and `output = activations·W_down`.
    pub fn apply(&self, h: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = tensor::matmul(h, &self.gate)?;
        let u = tensor::matmul(h, &self.up)?;
        let act = tensor::mul(&tensor::silu(&g), &u)?;
        let out = tensor::matmul(&act, &self.down)?;
        Ok((out, act))
    }

    /// `‖row_j(W_down)‖₂` for every neuron.
    pub fn down_row_norms(&self) -> Vec<f32> {
        (0..self.down.rows()).map(|j| tensor::l2(self.down.row(j))).collect()
    }
}

/// Free-function form of [`FfnWeights::apply`].
pub fn ffn_apply(ffn: &FfnWeights, h: &Tensor) -> Result<(Tensor, Tensor)> {
    ffn.apply(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerBlock {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub ffn: FfnWeights,
}

impl LayerBlock {
    fn tensors(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ffn_norm", &self.ffn_norm),
            ("ffn.gate", &self.ffn.gate),
            ("ffn.up", &self.ffn.up),
            ("ffn.down", &self.ffn.down),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 9] {
        [
            ("attn_norm", &mut self.attn_norm),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ffn_norm", &mut self.ffn_norm),
            ("ffn.gate", &mut self.ffn.gate),
            ("ffn.up", &mut self.ffn.up),
            ("ffn.down", &mut self.ffn.down),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Hash over the attention projections only.
    pub fn attention_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in [&self.wq, &self.wk, &self.wv, &self.wo] {
            h.update(t.content_hash().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Per-layer tensors captured during a forward pass over one sequence.
#[derive(Clone, Debug, Default)]
pub struct HiddenTrace {
    /// `h_{ℓ-1}`: input to layer ℓ, `[seq × d_model]`.
    pub layer_inputs: Vec<Tensor>,
    /// `SiLU(W_gate·) ⊙ (W_up·)` inside layer ℓ, `[seq × d_ff(ℓ)]`.
    pub activations: Vec<Tensor>,
    /// `h_ℓ`: output of layer ℓ, `[seq × d_model]`.
    pub layer_outputs: Vec<Tensor>,
}

/// Equal-length token sequences laid out row-major as `[batch × seq]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn single(tokens: &[u32]) -> Self {
        Self {
            tokens: tokens.to_vec(),
            batch: 1,
            seq: tokens.len(),
        }
    }

    /// Right-pads every sequence with `pad` up to the longest one.
    pub fn padded(seqs: &[&[u32]], pad: u32) -> Self {
        let seq = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            tokens.extend_from_slice(s);
            tokens.extend(std::iter::repeat_n(pad, seq - s.len()));
        }
        Self {
            tokens,
            batch: seqs.len(),
            seq,
        }
    }

    pub fn sequence(&self, b: usize) -> &[u32] {
        &self.tokens[b * self.seq..(b + 1) * self.seq]
    }
}

pub(crate) struct LayerNodes {
    pub input: NodeId,
    pub activations: NodeId,
    pub output: NodeId,
}

pub(crate) struct ForwardNodes {
    /// Parameter leaves in canonical order.
    pub params: Vec<NodeId>,
    pub layers: Vec<LayerNodes>,
    pub logits: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    /// `[vocab × d_model]`
    pub embed: Tensor,
    pub layers: Vec<LayerBlock>,
    pub final_norm: Tensor,
    /// `[d_model × vocab]`, not tied to `embed`.
    pub unembed: Tensor,
}

impl TransformerModel {
    /// Scaled-normal initialization (std 0.02; `wo` and `W_down` further
    /// scaled by `1/sqrt(2L)`), fully determined by `seed`.
    pub fn init(seed: u64, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let v = config.vocab_size;
        let depth = config.n_layers().max(1) as f32;
        let resid_std = INIT_STD / (2.0 * depth).sqrt();
        let mut normal = |rows: usize, cols: usize, std: f32| {
            let dist = Normal::new(0.0f32, std).expect("positive std");
            let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
            Tensor::from_parts(vec![rows, cols], data)
        };
        let embed = normal(v, d, INIT_STD);
        let mut layers = Vec::with_capacity(config.n_layers());
        for &f in &config.ffn_widths {
            layers.push(LayerBlock {
                attn_norm: Tensor::full(&[d], 1.0),
                wq: normal(d, d, INIT_STD),
                wk: normal(d, d, INIT_STD),
                wv: normal(d, d, INIT_STD),
                wo: normal(d, d, resid_std),
                ffn_norm: Tensor::full(&[d], 1.0),
                ffn: FfnWeights {
                    gate: normal(d, f, INIT_STD),
                    up: normal(d, f, INIT_STD),
                    down: normal(f, d, resid_std),
                },
            });
        }
        let unembed = normal(d, v, INIT_STD);
        Ok(Self {
            config,
            embed,
            layers,
            final_norm: Tensor::full(&[d], 1.0),
            unembed,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Every tensor with its canonical name, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, block) in self.layers.iter().enumerate() {
            out.extend(block.tensors().into_iter().map(|(n, t)| (format!("layers.{l}.{n}"), t)));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("unembed".into(), &self.unembed));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (l, block) in self.layers.iter_mut().enumerate() {
            out.extend(block.tensors_mut().into_iter().map(|(n, t)| (format!("layers.{l}.{n}"), t)));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("unembed".into(), &mut self.unembed));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn tensor_hashes(&self) -> BTreeMap<String, String> {
        self.named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.content_hash()))
            .collect()
    }

    /// Hash of every tensor, in canonical order.
    pub fn parameter_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            h.update(t.content_hash().as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Bitwise equality of configuration and all tensors.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self
                .named_tensors()
                .iter()
                .zip(other.named_tensors())
                .all(|((na, a), (nb, b))| *na == nb && a.bit_eq(b))
            && self.named_tensors().len() == other.named_tensors().len()
    }

    /// Checks every tensor shape against the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let cfg = &self.config;
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        if self.layers.len() != cfg.n_layers() {
            return Err(Error::InvalidConfig(format!(
                "config declares {} layers, model has {}",
                cfg.n_layers(),
                self.layers.len()
            )));
        }
        let mut expect = vec![("embed".to_string(), vec![v, d])];
        for (l, &f) in cfg.ffn_widths.iter().enumerate() {
            for (n, s) in [
                ("attn_norm", vec![d]),
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("ffn_norm", vec![d]),
                ("ffn.gate", vec![d, f]),
                ("ffn.up", vec![d, f]),
                ("ffn.down", vec![f, d]),
            ] {
                expect.push((format!("layers.{l}.{n}"), s));
            }
        }
        expect.push(("final_norm".into(), vec![d]));
        expect.push(("unembed".into(), vec![d, v]));
        for ((name, t), (ename, eshape)) in self.named_tensors().into_iter().zip(expect) {
            if name != ename || t.shape() != eshape.as_slice() {
                return Err(Error::InvalidConfig(format!(
                    "tensor {name} has shape {:?}, expected {ename} {eshape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::InvalidConfig(format!("tensor {name} has non-finite values")));
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq == 0 || batch.batch == 0 || batch.tokens.len() != batch.batch * batch.seq {
            return Err(Error::SequenceTooShort(format!(
                "batch of {}x{} with {} tokens",
                batch.batch,
                batch.seq,
                batch.tokens.len()
            )));
        }
        if batch.seq > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: batch.seq,
                max: self.config.max_seq_len,
            });
        }
        let vocab = self.config.vocab_size;
        if let Some(i) = batch.tokens.iter().position(|&t| t as usize >= vocab) {
            return Err(Error::TokenOutOfRange {
                position: i % batch.seq,
                token: batch.tokens[i],
                vocab,
            });
        }
        Ok(())
    }

    /// Records the full forward computation into `g`. Parameters become
    /// trainable leaves when `trainable` is set, constants otherwise.
    pub(crate) fn build(&self, g: &mut Graph, batch: &TokenBatch, trainable: bool) -> Result<ForwardNodes> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let leaf = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let mut params = Vec::new();
        let embed = leaf(g, &self.embed);
        params.push(embed);
        let rope = RopeTable::new(batch.seq, cfg.head_dim(), cfg.rope_base);
        let layout = AttnLayout {
            batch: batch.batch,
            seq: batch.seq,
            n_heads: cfg.n_heads,
        };

        let mut h = g.embedding(embed, &batch.tokens)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for block in &self.layers {
            let ids: Vec<NodeId> = block.tensors().iter().map(|(_, t)| leaf(g, t)).collect();
            params.extend_from_slice(&ids);
            let [attn_norm, wq, wk, wv, wo, ffn_norm, gate, up, down] = ids[..] else {
                unreachable!("block has nine tensors")
            };
            let input = h;
            let n1 = g.rmsnorm(input, attn_norm, cfg.norm_eps)?;
            let q = g.matmul(n1, wq)?;
            let k = g.matmul(n1, wk)?;
            let v = g.matmul(n1, wv)?;
            let q = g.rope(q, &rope, cfg.n_heads)?;
            let k = g.rope(k, &rope, cfg.n_heads)?;
            let attn = g.causal_attention(q, k, v, layout)?;
            let o = g.matmul(attn, wo)?;
            let mid = g.add(input, o)?;
            let n2 = g.rmsnorm(mid, ffn_norm, cfg.norm_eps)?;
            let gp = g.matmul(n2, gate)?;
            let up_p = g.matmul(n2, up)?;
            let gs = g.silu(gp);
            let activations = g.mul(gs, up_p)?;
            let f = g.matmul(activations, down)?;
            let output = g.add(mid, f)?;
            layers.push(LayerNodes {
                input,
                activations,
                output,
            });
            h = output;
        }
        let final_norm = leaf(g, &self.final_norm);
        let unembed = leaf(g, &self.unembed);
        params.push(final_norm);
        params.push(unembed);
        let n = g.rmsnorm(h, final_norm, cfg.norm_eps)?;
        let logits = g.matmul(n, unembed)?;
        Ok(ForwardNodes {
            params,
            layers,
            logits,
        })
    }

    /// Logits `[seq × vocab]` for one sequence, plus a hidden-state trace when requested.
    pub fn forward(&self, tokens: &[u32], trace: bool) -> Result<(Tensor, Option<HiddenTrace>)> {
        let batch = TokenBatch::single(tokens);
        let mut g = Graph::new();
        let nodes = self.build(&mut g, &batch, false)?;
        let logits = g.value(nodes.logits).clone();
        let trace = trace.then(|| HiddenTrace {
            layer_inputs: nodes.layers.iter().map(|l| g.value(l.input).clone()).collect(),
            activations: nodes.layers.iter().map(|l| g.value(l.activations).clone()).collect(),
            layer_outputs: nodes.layers.iter().map(|l| g.value(l.output).clone()).collect(),
        });
        Ok((logits, trace))
    }

    /// Logits `[batch·seq × vocab]`.
    pub fn forward_batch(&self, batch: &TokenBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = self.build(&mut g, batch, false)?;
        Ok(g.value(nodes.logits).clone())
    }

    /// Mean next-token cross-entropy over positions `1..len`.
    pub fn lm_loss(&self, tokens: &[u32]) -> Result<f32> {
        if tokens.len() < 2 {
            return Err(Error::SequenceTooShort(format!(
                "lm_loss needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        let batch = TokenBatch::single(tokens);
        let (targets, weights) = next_token_targets(&batch, None);
        let mut g = Graph::new();
        let nodes = self.build(&mut g, &batch, false)?;
        let loss = g.token_nll(nodes.logits, &targets, &weights)?;
        Ok(g.value(loss).data()[0])
    }

    /// Weighted token NLL and its gradient for every parameter (canonical order).
    pub fn loss_and_grads(&self, batch: &TokenBatch, targets: &[u32], weights: &[f32]) -> Result<(f32, Vec<Tensor>)> {
        let mut g = Graph::new();
        let nodes = self.build(&mut g, batch, true)?;
        let loss = g.token_nll(nodes.logits, targets, weights)?;
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        Ok((value, nodes.params.iter().map(|&p| grads.take(p)).collect()))
    }
}

/// Targets shifted by one for next-token prediction. Row `b` contributes
/// positions `0..lengths[b]-1` (the rest is padding); counted positions
/// share equal weight so the loss is a mean. `None` counts full rows.
pub fn next_token_targets(batch: &TokenBatch, lengths: Option<&[usize]>) -> (Vec<u32>, Vec<f32>) {
    let mut targets = vec![0u32; batch.tokens.len()];
    let mut counted = vec![false; batch.tokens.len()];
    for b in 0..batch.batch {
        let s = batch.sequence(b);
        let len = lengths.map_or(batch.seq, |l| l[b]).min(batch.seq);
        for t in 0..len.saturating_sub(1) {
            targets[b * batch.seq + t] = s[t + 1];
            counted[b * batch.seq + t] = true;
        }
    }
    let n = counted.iter().filter(|&&c| c).count().max(1);
    let w = 1.0 / n as f32;
    let weights = counted.iter().map(|&c| if c { w } else { 0.0 }).collect();
    (targets, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::uniform(16, 4, 1, 8, 1, 8)
    }

    #[test]
    fn init_is_deterministic() {
        let a = TransformerModel::init(3, tiny()).unwrap();
        let b = TransformerModel::init(3, tiny()).unwrap();
        assert!(a.bit_eq(&b));
        let c = TransformerModel::init(4, tiny()).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(TransformerModel::init(0, ModelConfig::uniform(16, 6, 4, 8, 1, 8)).is_err());
        assert!(TransformerModel::init(0, ModelConfig::new(16, 4, 1, 8, vec![8, 0])).is_err());
        assert!(TransformerModel::init(0, ModelConfig::uniform(0, 4, 1, 8, 1, 8)).is_err());
    }

    #[test]
    fn tiny_param_count_matches_tensor_sizes() {
        let m = TransformerModel::init(0, tiny()).unwrap();
        // embed 16·4, block 4·16 + 2·4 + 3·4·8, final norm 4, unembed 4·16
        let by_hand = 64 + (64 + 8 + 96) + 4 + 64;
        assert_eq!(m.num_params(), by_hand);
        assert_eq!(m.config.block_params(8), 168);
    }

    #[test]
    fn zero_layer_forward_is_unembed_of_norm() {
        let cfg = ModelConfig::new(16, 4, 1, 8, vec![]);
        let m = TransformerModel::init(1, cfg).unwrap();
        let toks = [3u32, 1, 4];
        let (logits, _) = m.forward(&toks, false).unwrap();
        let mut rows = Vec::new();
        for &t in &toks {
            rows.extend_from_slice(m.embed.row(t as usize));
        }
        let x = Tensor::matrix(3, 4, rows).unwrap();
        let n = tensor::rmsnorm(&x, &m.final_norm, m.config.norm_eps).unwrap();
        let expected = tensor::matmul(&n, &m.unembed).unwrap();
        assert!(logits.bit_eq(&expected));
    }

    #[test]
    fn trace_does_not_perturb_logits() {
        let m = TransformerModel::init(2, ModelConfig::uniform(16, 8, 2, 8, 2, 12)).unwrap();
        let toks = [1u32, 5, 2, 9, 0];
        let (a, none) = m.forward(&toks, false).unwrap();
        let (b, trace) = m.forward(&toks, true).unwrap();
        assert!(none.is_none());
        assert!(a.bit_eq(&b));
        let trace = trace.unwrap();
        assert_eq!(trace.activations.len(), 2);
        assert_eq!(trace.activations[1].shape(), &[5, 12]);
        assert_eq!(trace.layer_inputs[1].bit_eq(&trace.layer_outputs[0]), true);
    }

    #[test]
    fn zero_residual_branches_pass_through() {
        let mut m = TransformerModel::init(5, ModelConfig::uniform(16, 4, 1, 8, 1, 8)).unwrap();
        m.layers[0].wo = Tensor::zeros(&[4, 4]);
        m.layers[0].ffn.down = Tensor::zeros(&[8, 4]);
        let mut shallow = m.clone();
        shallow.layers.clear();
        shallow.config.ffn_widths.clear();
        let toks = [2u32, 7, 7, 1];
        let (a, _) = m.forward(&toks, false).unwrap();
        let (b, _) = shallow.forward(&toks, false).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn heterogeneous_widths_forward() {
        let cfg = ModelConfig::new(16, 8, 2, 8, vec![256, 64, 256]);
        let m = TransformerModel::init(0, cfg.clone()).unwrap();
        let expected = 16 * 8 + cfg.block_params(256) + cfg.block_params(64) + cfg.block_params(256) + 8 + 8 * 16;
        assert_eq!(m.num_params(), expected);
        let (logits, _) = m.forward(&[1, 2, 3], false).unwrap();
        assert_eq!(logits.shape(), &[3, 16]);
    }

    #[test]
    fn forward_errors() {
        let m = TransformerModel::init(0, tiny()).unwrap();
        let err = m.forward(&[1, 2, 99], false).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { position: 2, token: 99, .. }));
        assert!(matches!(m.forward(&[0; 9], false), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn lm_loss_of_uniform_logits_is_ln_vocab() {
        let mut m = TransformerModel::init(0, tiny()).unwrap();
        m.unembed = Tensor::zeros(&[4, 16]);
        let loss = m.lm_loss(&[1, 2, 3, 4]).unwrap();
        assert!((loss - (16f32).ln()).abs() < 1e-6);
        assert!(m.lm_loss(&[1]).is_err());
    }

    #[test]
    fn lm_loss_vanishes_with_margin() {
        // Zero blocks, identity-like embeddings: logits favour token t+1 after t.
        let cfg = ModelConfig::new(4, 4, 1, 8, vec![]);
        let mut m = TransformerModel::init(0, cfg).unwrap();
        let mut e = vec![0.0; 16];
        for t in 0..4 {
            e[t * 4 + t] = 1.0;
        }
        m.embed = Tensor::matrix(4, 4, e).unwrap();
        let mut last = f32::INFINITY;
        for margin in [1.0f32, 5.0, 20.0] {
            let mut u = vec![0.0; 16];
            for t in 0..4 {
                u[t * 4 + (t + 1) % 4] = margin;
            }
            m.unembed = Tensor::matrix(4, 4, u).unwrap();
            let loss = m.lm_loss(&[0, 1, 2, 3, 0]).unwrap();
            assert!(loss >= 0.0 && loss < last);
            last = loss;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn ffn_removal_identity_single_neuron() {
        let ffn = FfnWeights {
            gate: Tensor::matrix(2, 1, vec![0.5, -1.0]).unwrap(),
            up: Tensor::matrix(2, 1, vec![2.0, 0.25]).unwrap(),
            down: Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap(),
        };
        let h = Tensor::matrix(1, 2, vec![1.0, 0.3]).unwrap();
        let (out, act) = ffn_apply(&ffn, &h).unwrap();
        // Removing the only neuron leaves a zero output.
        let delta = out.l2_norm();
        assert!((delta - act.data()[0].abs() * 5.0).abs() < 1e-6);
    }

    #[test]
    fn padded_targets_skip_pad_and_last_positions() {
        let a = [5u32, 1, 2];
        let b = [5u32, 3];
        let batch = TokenBatch::padded(&[&a, &b], 9);
        assert_eq!(batch.tokens, vec![5, 1, 2, 5, 3, 9]);
        let (targets, weights) = next_token_targets(&batch, Some(&[3, 2]));
        assert_eq!(&targets[..2], &[1, 2]);
        assert_eq!(targets[3], 3);
        let counted: Vec<bool> = weights.iter().map(|&w| w > 0.0).collect();
        assert_eq!(counted, vec![true, true, false, true, false, false]);
    }
}
